//! Bridge-template sweeps: alignment per template × dataset and argmax selection.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_corpora, ExperimentConfig, RunnerError};
use crate::backends::{write_atomic, BackendSuite};
use crate::corpus::{sample_tasks, CorpusManifest};
use crate::metrics::{template_alignment, AlignmentSample, MetricError, TemplateAlignment};
use crate::plan::{Method, PromptTemplate, TemplateRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub role: TemplateRole,
    pub template_id: String,
    pub average: f64,
    /// other templates with exactly the same average, lost on id order
    pub tied_with: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub datasets: Vec<String>,
    pub rows: Vec<TemplateAlignment>,
    pub selected: Vec<Selection>,
}

/// Per bridge role, the template with the highest across-dataset average;
/// equal averages go to the lexicographically smallest id. Only the order of
/// the averages matters, so any uniform positive rescaling picks the same ids.
pub fn select_templates(rows: &[TemplateAlignment]) -> Vec<Selection> {
    let mut out = Vec::new();
    for role in [TemplateRole::T2iBridge, TemplateRole::I2tBridge] {
        let mut cands: Vec<&TemplateAlignment> =
            rows.iter().filter(|r| r.role == role && !r.average.is_nan()).collect();
        if cands.is_empty() {
            continue;
        }
        cands.sort_by(|a, b| b.average.total_cmp(&a.average).then_with(|| a.template_id.cmp(&b.template_id)));
        let best = cands[0];
        let tied_with =
            cands[1..].iter().filter(|r| r.average == best.average).map(|r| r.template_id.clone()).collect();
        out.push(Selection { role, template_id: best.template_id.clone(), average: best.average, tied_with });
    }
    out
}

/// One probe step per sampled goal: its reference text and, copied into the
/// image store, its reference image.
pub fn robustness_samples(
    corpora: &[CorpusManifest],
    per_dataset: usize,
    seed: u64,
    backends: &BackendSuite,
) -> Result<Vec<AlignmentSample>, RunnerError> {
    let mut out = Vec::new();
    for m in corpora {
        let n = per_dataset.min(m.examples.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for goal in sample_tasks(m, n, seed)? {
            let plan = m.get(&goal.id).expect("sampled from this manifest");
            let step = &plan.steps[rng.random_range(0..plan.steps.len())];
            let image = match &step.image {
                Some(h) => Some(
                    backends
                        .store()
                        .import(&m.root.join(&h.locator))
                        .map_err(|e| RunnerError::Metric(MetricError::Backend(e)))?,
                ),
                None => None,
            };
            out.push(AlignmentSample { dataset: m.dataset.clone(), step: step.text.clone(), image });
        }
    }
    if out.is_empty() {
        return Err(MetricError::EmptySample.into());
    }
    Ok(out)
}

pub fn run_template_robustness(
    config: &ExperimentConfig,
    templates: &[PromptTemplate],
) -> Result<RobustnessReport, RunnerError> {
    let backends = config.build_backends()?;
    let corpora = load_corpora(config)?;
    let samples = robustness_samples(&corpora, config.robustness_samples, config.seed, &backends)?;
    let report = run_template_robustness_on(config, templates, &samples, &backends)?;
    report.write(&config.out_dir)?;
    Ok(report)
}

/// Scores every template on `samples` and selects one per bridge role.
pub fn run_template_robustness_on(
    config: &ExperimentConfig,
    templates: &[PromptTemplate],
    samples: &[AlignmentSample],
    backends: &BackendSuite,
) -> Result<RobustnessReport, RunnerError> {
    if samples.is_empty() {
        return Err(MetricError::EmptySample.into());
    }
    if let Some(t) = templates.iter().find(|t| t.role() == TemplateRole::Vanilla) {
        return Err(RunnerError::Config(format!("`{}` is not a bridge template", t.id)));
    }
    let roles: BTreeSet<TemplateRole> = templates.iter().map(|t| t.role()).collect();
    if roles.is_empty() {
        return Err(RunnerError::Config("no candidate templates".into()));
    }
    for role in &roles {
        let n = templates.iter().filter(|t| t.role() == *role).count();
        if n < 2 {
            return Err(RunnerError::Config(format!("{role} needs at least 2 candidate templates, got {n}")));
        }
    }
    let pc = config.pipeline_config(Method::TipProcedure)?;
    let rows = templates
        .iter()
        .map(|t| template_alignment(t, samples, backends, &pc))
        .collect::<Result<Vec<_>, _>>()?;
    let datasets: Vec<String> =
        samples.iter().map(|s| s.dataset.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let selected = select_templates(&rows);
    Ok(RobustnessReport { datasets, rows, selected })
}

impl RobustnessReport {
    pub fn selected_for(&self, role: TemplateRole) -> Option<&Selection> {
        self.selected.iter().find(|s| s.role == role)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Role | Template | Misleading |");
        for d in &self.datasets {
            let _ = write!(out, " {d} |");
        }
        out.push_str(" Avg. | Selected |\n|---|---|---|");
        for _ in &self.datasets {
            out.push_str("---:|");
        }
        out.push_str("---:|---|\n");
        for r in &self.rows {
            let chosen = self.selected_for(r.role).is_some_and(|s| s.template_id == r.template_id);
            let _ = write!(out, "| {} | {} | {} |", r.role, r.template_id, if r.misleading { "yes" } else { "" });
            for d in &self.datasets {
                let _ = write!(out, " {} |", r.per_dataset.get(d).map_or("-".into(), |v| format!("{v:.4}")));
            }
            let _ = writeln!(out, " {:.4} | {} |", r.average, if chosen { "*" } else { "" });
        }
        for s in &self.selected {
            if !s.tied_with.is_empty() {
                let _ = writeln!(out, "\n{}: `{}` tied with {} (lowest id wins)", s.role, s.template_id, s.tied_with.join(", "));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("role,template_id,misleading");
        for d in &self.datasets {
            let _ = write!(out, ",{d}");
        }
        out.push_str(",average,selected\n");
        for r in &self.rows {
            let chosen = self.selected_for(r.role).is_some_and(|s| s.template_id == r.template_id);
            let _ = write!(out, "{},{},{}", r.role, r.template_id, r.misleading);
            for d in &self.datasets {
                let _ = write!(out, ",{}", r.per_dataset.get(d).map(|v| v.to_string()).unwrap_or_default());
            }
            let _ = writeln!(out, ",{},{}", r.average, chosen);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), RunnerError> {
        write_atomic(&dir.join("robustness.md"), self.to_markdown().as_bytes())?;
        write_atomic(&dir.join("robustness.csv"), self.to_csv().as_bytes())?;
        Ok(())
    }
}
