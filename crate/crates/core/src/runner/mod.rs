//! Experiment orchestration: sweeps of methods over sampled goals, metric
//! tables, template-robustness sweeps, ablation contrasts and galleries.
//!
//! Output layout under `out_dir`:
//! `images/` (content-addressed store), `cache/` (replay records),
//! `{dataset}/{goal}/{method}.plan`, `metrics.jsonl`, `failures.txt`,
//! `report.{csv,md,json}`.

mod config;
mod gallery;
mod report;
mod robustness;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{write_atomic, BackendSuite};
use crate::corpus::{load_corpus, sample_tasks, CorpusError, CorpusManifest, ValidationRules};
use crate::metrics::{evaluate_plan, image_set_fid, MetricReport};
use crate::pipeline::{self, plan_path, Reference};
use crate::plan::{parse_plan, serialize_plan, ImageHandle, Method, MultimodalPlan};

pub use config::{BackendKind, BackendsConfig, ExperimentConfig, Paths, TemplatesConfig, DEFAULT_WORKERS};
pub use gallery::{export_gallery, load_plans, GalleryOutcome};
pub use report::{
    ablation_report, format_delta, AblationCell, AblationReport, AblationRow, ComparisonReport, IsolationCheck, ReportRow,
    METHOD_ORDER,
};
pub use robustness::{
    robustness_samples, run_template_robustness, run_template_robustness_on, select_templates, RobustnessReport,
    Selection,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Metric(#[from] crate::metrics::MetricError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl From<std::io::Error> for RunnerError {
    fn from(e: std::io::Error) -> Self {
        RunnerError::Io(e.to_string())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub dataset: String,
    pub goal_id: String,
    pub method: Method,
    pub steps: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub dataset: String,
    pub goal_id: String,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: ComparisonReport,
    pub plans: Vec<MultimodalPlan>,
    pub metrics: Vec<PlanMetrics>,
    pub failures: Vec<TaskFailure>,
    /// plans loaded from disk instead of generated
    pub resumed: usize,
    /// backend calls that missed the replay cache during this run
    pub backend_calls: u64,
}

pub fn load_corpora(config: &ExperimentConfig) -> Result<Vec<CorpusManifest>, RunnerError> {
    let mut out: Vec<CorpusManifest> = Vec::new();
    for path in config.corpus.to_vec() {
        let m = load_corpus(&path, &ValidationRules::default())?;
        if out.iter().any(|o| o.dataset == m.dataset) {
            return Err(RunnerError::Config(format!("two corpus files share the dataset name `{}`", m.dataset)));
        }
        out.push(m);
    }
    Ok(out)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, RunnerError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| RunnerError::Pool(e.to_string()))
}

fn load_existing(path: &Path) -> Option<MultimodalPlan> {
    let text = fs::read_to_string(path).ok()?;
    match parse_plan(text.trim_end()) {
        Ok(p) => Some(p),
        Err(e) => {
            tracing::warn!(path = %path.display(), error = %e, "unreadable plan record, regenerating");
            None
        }
    }
}

/// Generates (or resumes) one plan per sampled goal × method, scores each
/// against its reference and writes records plus aggregate reports.
///
/// Per-task failures are logged, counted in the report and listed in
/// `failures.txt`; only configuration and corpus errors abort the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, RunnerError> {
    run_experiment_with(config, &config.build_backends()?)
}

pub fn run_experiment_with(config: &ExperimentConfig, backends: &BackendSuite) -> Result<ExperimentOutcome, RunnerError> {
    config.validate()?;
    let corpora = load_corpora(config)?;
    fs::create_dir_all(&config.out_dir)?;
    let calls_before = backends.total_calls();

    let mut tasks = Vec::new();
    for (ci, manifest) in corpora.iter().enumerate() {
        for goal in sample_tasks(manifest, config.sample_size, config.seed)? {
            for &method in &config.methods {
                tasks.push((ci, goal.clone(), method));
            }
        }
    }
    tracing::info!(tasks = tasks.len(), workers = config.workers, "running experiment");

    enum Done {
        Plan(Box<MultimodalPlan>, PlanMetrics, bool),
        Failed(TaskFailure),
    }
    let results: Vec<Done> = pool(config.workers)?.install(|| {
        tasks
            .par_iter()
            .map(|(ci, goal, method)| {
                let manifest = &corpora[*ci];
                let reference = manifest.get(&goal.id).expect("sampled from this manifest");
                let path = plan_path(&config.out_dir, goal, *method);
                let fail = |error: String| {
                    tracing::warn!(goal = %goal.id, method = %method, %error, "task failed");
                    Done::Failed(TaskFailure {
                        dataset: goal.dataset.clone(),
                        goal_id: goal.id.clone(),
                        method: *method,
                        error,
                    })
                };
                let (plan, resumed) = match load_existing(&path) {
                    Some(p) => (p, true),
                    None => {
                        let pc = match config.pipeline_config(*method) {
                            Ok(pc) => pc,
                            Err(e) => return fail(e.to_string()),
                        };
                        let r = Reference { plan: reference, assets_root: &manifest.root };
                        match pipeline::run(goal, Some(r), backends, &pc) {
                            Ok(p) => {
                                let mut line = serialize_plan(&p);
                                line.push('\n');
                                if let Err(e) = write_atomic(&path, line.as_bytes()) {
                                    return fail(format!("writing {}: {e}", path.display()));
                                }
                                (p, false)
                            }
                            Err(e) => return fail(e.to_string()),
                        }
                    }
                };
                let mut report = evaluate_plan(&plan, reference, backends, &config.metrics, &config.wmd_options());
                report.fid = None;
                let m = PlanMetrics {
                    dataset: goal.dataset.clone(),
                    goal_id: goal.id.clone(),
                    method: *method,
                    steps: plan.steps.len(),
                    report,
                };
                Done::Plan(Box::new(plan), m, resumed)
            })
            .collect()
    });

    let mut plans = Vec::new();
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    let mut resumed = 0;
    for r in results {
        match r {
            Done::Plan(p, m, was_resumed) => {
                resumed += usize::from(was_resumed);
                plans.push(*p);
                metrics.push(m);
            }
            Done::Failed(f) => failures.push(f),
        }
    }
    let key = |d: &str, g: &str, m: Method| (d.to_string(), g.to_string(), m);
    metrics.sort_by_key(|m| key(&m.dataset, &m.goal_id, m.method));
    plans.sort_by_key(|p| key(&p.goal.dataset, &p.goal.id, p.method));
    failures.sort_by_key(|f| key(&f.dataset, &f.goal_id, f.method));

    let fid = if config.metrics.fid { corpus_fid(&corpora, &plans, backends) } else { BTreeMap::new() };
    let report = ComparisonReport::build(&config.methods, &corpora, &metrics, &failures, &fid, &plans, backends);
    write_outputs(&config.out_dir, &report, &metrics, &failures)?;

    Ok(ExperimentOutcome {
        report,
        plans,
        metrics,
        failures,
        resumed,
        backend_calls: backends.total_calls() - calls_before,
    })
}

/// Reference images of the goals that were actually planned, copied into the store.
fn reference_images(manifest: &CorpusManifest, goal_ids: &BTreeSet<&str>, backends: &BackendSuite) -> Vec<ImageHandle> {
    let mut out = Vec::new();
    for plan in manifest.examples.iter().filter(|p| goal_ids.contains(p.goal.id.as_str())) {
        for img in plan.steps.iter().filter_map(|s| s.image.as_ref()) {
            match backends.store().import(&manifest.root.join(&img.locator)) {
                Ok(h) => out.push(h),
                Err(e) => tracing::warn!(goal = %plan.goal.id, error = %e, "reference image skipped"),
            }
        }
    }
    out
}

/// FID per (dataset, method) between generated and reference image sets.
/// Values are `Err(reason)` when the distance cannot be computed.
fn corpus_fid(
    corpora: &[CorpusManifest],
    plans: &[MultimodalPlan],
    backends: &BackendSuite,
) -> BTreeMap<(String, Method), Result<f64, String>> {
    let mut out = BTreeMap::new();
    for manifest in corpora {
        let here: Vec<&MultimodalPlan> = plans.iter().filter(|p| p.goal.dataset == manifest.dataset).collect();
        let ids: BTreeSet<&str> = here.iter().map(|p| p.goal.id.as_str()).collect();
        let reference = reference_images(manifest, &ids, backends);
        let methods: BTreeSet<Method> = here.iter().map(|p| p.method).collect();
        for method in methods {
            let predicted: Vec<ImageHandle> =
                here.iter().filter(|p| p.method == method).flat_map(|p| p.images().cloned()).collect();
            let v = image_set_fid(&predicted, &reference, &*backends.joint).map_err(|e| e.to_string());
            out.insert((manifest.dataset.clone(), method), v);
        }
    }
    out
}

fn write_outputs(
    out: &Path,
    report: &ComparisonReport,
    metrics: &[PlanMetrics],
    failures: &[TaskFailure],
) -> Result<(), RunnerError> {
    let mut jsonl = String::new();
    for m in metrics {
        jsonl.push_str(&serde_json::to_string(m).map_err(|e| RunnerError::Io(e.to_string()))?);
        jsonl.push('\n');
    }
    write_atomic(&out.join("metrics.jsonl"), jsonl.as_bytes())?;
    let mut ftxt = String::new();
    for f in failures {
        ftxt.push_str(&format!("{}\t{}\t{}\t{}\n", f.dataset, f.goal_id, f.method, f.error.replace('\n', " ")));
    }
    write_atomic(&out.join("failures.txt"), ftxt.as_bytes())?;
    report.write(out, "report")?;
    Ok(())
}

/// Paths of the report files written by [`run_experiment`].
pub fn report_paths(out_dir: &Path, stem: &str) -> [PathBuf; 3] {
    ["csv", "md", "json"].map(|ext| out_dir.join(format!("{stem}.{ext}")))
}

/// Runs the full pipeline and its ablations, then contrasts them.
pub fn run_ablation(config: &ExperimentConfig) -> Result<(ExperimentOutcome, AblationReport), RunnerError> {
    run_ablation_with(config, &config.build_backends()?)
}

pub fn run_ablation_with(
    config: &ExperimentConfig,
    backends: &BackendSuite,
) -> Result<(ExperimentOutcome, AblationReport), RunnerError> {
    if !config.methods.contains(&Method::TipProcedure) {
        return Err(RunnerError::Config("ablation needs tip_procedure among the methods".into()));
    }
    let variants = [Method::AblationNoT2ib, Method::AblationNoI2tb, Method::TipStepwise];
    if !config.methods.iter().any(|m| variants.contains(m)) {
        return Err(RunnerError::Config(
            "ablation needs at least one of ablation_no_t2ib, ablation_no_i2tb, tip_stepwise".into(),
        ));
    }
    let outcome = run_experiment_with(config, backends)?;
    let ablation = ablation_report(&outcome.report, &outcome.plans);
    ablation.write(&config.out_dir)?;
    Ok((outcome, ablation))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::tests::write_fixture_corpus;

    #[test]
    fn five_tasks_two_methods() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_fixture_corpus(dir.path(), 6);
        let out = dir.path().join("out");
        let config = ExperimentConfig::mock(&corpus, &out, vec![Method::TipProcedure, Method::BaselineNoBridge], 5);
        let o = run_experiment(&config).unwrap();
        assert_eq!(o.plans.len(), 10);
        assert!(o.failures.is_empty());
        assert_eq!(o.report.rows.len(), 2);
        let n = walk_plans(&out);
        assert_eq!(n, 10);
        for f in report_paths(&out, "report") {
            assert!(f.exists(), "{}", f.display());
        }
        assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 10);
    }

    pub(crate) fn walk_plans(dir: &Path) -> usize {
        load_plans(dir).unwrap().len()
    }

    #[test]
    fn resume_under_strict_replay_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_fixture_corpus(dir.path(), 4);
        let out = dir.path().join("out");
        let mut config = ExperimentConfig::mock(&corpus, &out, vec![Method::TipProcedure, Method::BaselineTextRef], 3);
        let first = run_experiment(&config).unwrap();
        assert!(first.backend_calls > 0);
        let report_md = fs::read(out.join("report.md")).unwrap();
        config.cache_mode = crate::backends::CacheMode::StrictReplay;
        let second = run_experiment(&config).unwrap();
        assert_eq!(second.backend_calls, 0);
        assert_eq!(second.resumed, 6);
        assert_eq!(fs::read(out.join("report.md")).unwrap(), report_md);
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_fixture_corpus(dir.path(), 3);
        let out = dir.path().join("out");
        let mut config = ExperimentConfig::mock(&corpus, &out, vec![Method::TipProcedure], 2);
        // nothing cached yet, so every backend call misses
        config.cache_mode = crate::backends::CacheMode::StrictReplay;
        let o = run_experiment(&config).unwrap();
        assert_eq!(o.failures.len(), 2);
        assert_eq!(o.report.rows[0].failed, 2);
        assert_eq!(fs::read_to_string(out.join("failures.txt")).unwrap().lines().count(), 2);
    }

    #[test]
    fn ablation_rows_and_isolation() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_fixture_corpus(dir.path(), 3);
        let out = dir.path().join("out");
        let methods = vec![Method::TipProcedure, Method::AblationNoT2ib, Method::AblationNoI2tb, Method::TipStepwise];
        let config = ExperimentConfig::mock(&corpus, &out, methods, 3);
        let (_, ab) = run_ablation(&config).unwrap();
        let methods: Vec<Method> = ab.rows.iter().map(|r| r.method).collect();
        assert!(methods.contains(&Method::TipStepwise) && methods.contains(&Method::AblationNoI2tb));
        for c in &ab.isolation {
            assert!(c.holds(), "{c:?}");
        }
        assert!(out.join("ablation.md").exists());
        let bad = ExperimentConfig::mock(&corpus, &out, vec![Method::TipProcedure], 1);
        assert!(matches!(run_ablation(&bad), Err(RunnerError::Config(_))));
    }
}
