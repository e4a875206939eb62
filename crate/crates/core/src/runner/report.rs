//! Aggregate tables: method × metric means and ablation contrasts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PlanMetrics, RunnerError, TaskFailure};
use crate::backends::{write_atomic, BackendSuite};
use crate::corpus::CorpusManifest;
use crate::metrics::MetricReport;
use crate::plan::{Method, MultimodalPlan};

/// Row order of the tables: reference baselines, plain baseline, ablations, ours.
pub const METHOD_ORDER: [Method; 7] = [
    Method::BaselineImageRef,
    Method::BaselineTextRef,
    Method::BaselineNoBridge,
    Method::AblationNoT2ib,
    Method::AblationNoI2tb,
    Method::TipStepwise,
    Method::TipProcedure,
];

fn order(m: Method) -> usize {
    METHOD_ORDER.iter().position(|x| *x == m).unwrap_or(usize::MAX)
}

fn header_label(column: &str) -> &'static str {
    match column {
        "wmd_similarity" => "WMD",
        "wmd_distance" => "WMD dist.",
        "sbert" => "S-BERT",
        "rouge_l" => "ROUGE-L",
        "meteor" => "METEOR",
        "fid" => "FID ↓",
        "clip" => "CLIP ↑",
        "cap_s" => "Cap-S",
        "text_s" => "Text-S",
        "all_s" => "ALL-S",
        "avg_textual" => "Avg. Textual",
        _ => "?",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn md(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: Method,
    /// plans that were produced (generated or resumed)
    pub plans: usize,
    /// tasks that failed to produce a plan
    pub failed: usize,
    /// means aligned with [`MetricReport::COLUMNS`]; `None` when no plan had a value
    pub means: Vec<Option<f64>>,
    /// plans left out of each mean because the metric was missing
    pub excluded: Vec<usize>,
    /// plans missing at least one per-plan metric
    pub incomplete: usize,
    pub avg_steps: Option<f64>,
}

impl ReportRow {
    pub fn mean(&self, column: &str) -> Option<f64> {
        MetricReport::COLUMNS.iter().position(|c| *c == column).and_then(|i| self.means[i])
    }
}

/// Method × metric means per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub failures: usize,
    /// distinct backend fingerprints recorded in the plans, plus the live suite's
    pub fingerprints: Vec<String>,
    pub corpora: Vec<String>,
    pub notes: Vec<String>,
}

impl ComparisonReport {
    pub fn build(
        methods: &[Method],
        corpora: &[CorpusManifest],
        metrics: &[PlanMetrics],
        failures: &[TaskFailure],
        fid: &BTreeMap<(String, Method), Result<f64, String>>,
        plans: &[MultimodalPlan],
        backends: &BackendSuite,
    ) -> Self {
        let mut methods: Vec<Method> = methods.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        methods.sort_by_key(|m| order(*m));
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        for c in corpora {
            for &method in &methods {
                let here: Vec<&PlanMetrics> =
                    metrics.iter().filter(|m| m.dataset == c.dataset && m.method == method).collect();
                let failed = failures.iter().filter(|f| f.dataset == c.dataset && f.method == method).count();
                let mut means = Vec::new();
                let mut excluded = Vec::new();
                for col in MetricReport::COLUMNS {
                    if col == "fid" {
                        match fid.get(&(c.dataset.clone(), method)) {
                            Some(Ok(v)) => {
                                means.push(Some(*v));
                                excluded.push(0);
                            }
                            Some(Err(e)) => {
                                notes.push(format!("fid {}/{method}: {e}", c.dataset));
                                means.push(None);
                                excluded.push(here.len());
                            }
                            None => {
                                means.push(None);
                                excluded.push(here.len());
                            }
                        }
                        continue;
                    }
                    let vals: Vec<f64> = here.iter().filter_map(|m| m.report.get(col)).collect();
                    excluded.push(here.len() - vals.len());
                    means.push((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
                }
                let incomplete = here
                    .iter()
                    .filter(|m| {
                        MetricReport::COLUMNS.iter().any(|col| *col != "fid" && m.report.get(col).is_none())
                    })
                    .count();
                let avg_steps = (!here.is_empty())
                    .then(|| here.iter().map(|m| m.steps as f64).sum::<f64>() / here.len() as f64);
                rows.push(ReportRow {
                    dataset: c.dataset.clone(),
                    method,
                    plans: here.len(),
                    failed,
                    means,
                    excluded,
                    incomplete,
                    avg_steps,
                });
            }
        }
        let mut fingerprints: BTreeSet<String> = plans.iter().map(|p| p.backend_fingerprint.clone()).collect();
        fingerprints.insert(backends.fingerprint());
        ComparisonReport {
            rows,
            failures: failures.len(),
            fingerprints: fingerprints.into_iter().collect(),
            corpora: corpora.iter().map(|c| c.provenance.clone()).collect(),
            notes,
        }
    }

    pub fn row(&self, dataset: &str, method: Method) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,method,plans,failed,incomplete");
        for c in MetricReport::COLUMNS {
            let _ = write!(out, ",{c}");
        }
        out.push_str(",avg_steps");
        for c in MetricReport::COLUMNS {
            let _ = write!(out, ",excluded_{c}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", csv_field(&r.dataset), r.method, r.plans, r.failed, r.incomplete);
            for v in &r.means {
                let _ = write!(out, ",{}", num(*v));
            }
            let _ = write!(out, ",{}", num(r.avg_steps));
            for e in &r.excluded {
                let _ = write!(out, ",{e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset | Method |");
        for c in MetricReport::COLUMNS {
            let _ = write!(out, " {} |", header_label(c));
        }
        out.push_str(" Avg. steps | Plans | Failed | Excluded |\n|---|---|");
        for _ in MetricReport::COLUMNS {
            out.push_str("---:|");
        }
        out.push_str("---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = write!(out, "| {} | {} |", r.dataset, r.method);
            for (c, v) in MetricReport::COLUMNS.iter().zip(&r.means) {
                let _ = write!(out, " {} |", md(*v, if *c == "fid" { 2 } else { 3 }));
            }
            let _ = writeln!(out, " {} | {} | {} | {} |", md(r.avg_steps, 2), r.plans, r.failed, r.incomplete);
        }
        let _ = writeln!(out, "\nFailed tasks: {}", self.failures);
        out.push_str("\nBackends:\n");
        for f in &self.fingerprints {
            let _ = writeln!(out, "- `{f}`");
        }
        out.push_str("\nCorpora:\n");
        for c in &self.corpora {
            let _ = writeln!(out, "- `{c}`");
        }
        if !self.notes.is_empty() {
            out.push_str("\nNotes:\n");
            for n in &self.notes {
                let _ = writeln!(out, "- {n}");
            }
        }
        out
    }

    /// Writes `{stem}.csv`, `{stem}.md` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), RunnerError> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.md")), self.to_markdown().as_bytes())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| RunnerError::Io(e.to_string()))?;
        write_atomic(&dir.join(format!("{stem}.json")), (json + "\n").as_bytes())?;
        Ok(())
    }
}

/// `"0.341 (-18.4%)"`: the value and its relative change from `base`.
pub fn format_delta(value: f64, base: f64) -> String {
    if base == 0.0 || !base.is_finite() || !value.is_finite() {
        return format!("{value:.3} (n/a)");
    }
    let mut pct = (value - base) / base.abs() * 100.0;
    if pct.abs() < 0.05 {
        pct = 0.0;
    }
    format!("{value:.3} ({pct:+.1}%)")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: Option<f64>,
    pub delta: Option<f64>,
    pub pct: Option<f64>,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub method: Method,
    pub cells: Vec<AblationCell>,
}

/// A provenance comparison between an ablated plan and the full pipeline's
/// plan for the same goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationCheck {
    pub dataset: String,
    pub goal_id: String,
    pub method: Method,
    pub check: String,
    pub ok: bool,
}

impl IsolationCheck {
    pub fn holds(&self) -> bool {
        self.ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub isolation: Vec<IsolationCheck>,
}

const ABLATED: [Method; 3] = [Method::AblationNoT2ib, Method::AblationNoI2tb, Method::TipStepwise];
const TEXTUAL: [&str; 4] = ["wmd_similarity", "sbert", "rouge_l", "meteor"];

fn avg_textual(row: &ReportRow) -> Option<f64> {
    let vals: Option<Vec<f64>> = TEXTUAL.iter().map(|c| row.mean(c)).collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn isolation_checks(plans: &[MultimodalPlan]) -> Vec<IsolationCheck> {
    let mut by_goal: BTreeMap<(&str, &str), BTreeMap<Method, &MultimodalPlan>> = BTreeMap::new();
    for p in plans {
        by_goal.entry((p.goal.dataset.as_str(), p.goal.id.as_str())).or_default().insert(p.method, p);
    }
    let mut out = Vec::new();
    for ((dataset, goal_id), m) in by_goal {
        let Some(tip) = m.get(&Method::TipProcedure) else { continue };
        let mut push = |method: Method, check: &str, ok: bool| {
            out.push(IsolationCheck {
                dataset: dataset.to_string(),
                goal_id: goal_id.to_string(),
                method,
                check: check.to_string(),
                ok,
            })
        };
        if let Some(p) = m.get(&Method::AblationNoT2ib) {
            push(p.method, "vanilla_text_shared", p.vanilla_text == tip.vanilla_text);
            let raw = p
                .steps
                .iter()
                .all(|s| s.imagination_prompt.as_deref() == p.vanilla_text.get(s.index - 1).map(String::as_str));
            push(p.method, "imagination_prompt_is_step_text", raw);
        }
        if let Some(p) = m.get(&Method::AblationNoI2tb) {
            push(p.method, "vanilla_text_shared", p.vanilla_text == tip.vanilla_text);
            let prompts = |q: &MultimodalPlan| q.steps.iter().map(|s| s.imagination_prompt.clone()).collect::<Vec<_>>();
            let n = p.steps.len().min(tip.steps.len());
            push(p.method, "imagination_prompts_shared", prompts(p)[..n] == prompts(tip)[..n]);
            let texts: Vec<String> = p.steps.iter().map(|s| s.text.clone()).collect();
            push(p.method, "text_equals_vanilla", texts == p.vanilla_text);
        }
    }
    out
}

/// Full pipeline vs its ablations and the stepwise variant, per dataset. The
/// full pipeline's row shows plain values; the others show
/// `value (±pct%)` relative to it.
pub fn ablation_report(report: &ComparisonReport, plans: &[MultimodalPlan]) -> AblationReport {
    let mut columns = vec!["avg_textual".to_string()];
    columns.extend(MetricReport::COLUMNS.iter().map(|c| c.to_string()));
    let value = |row: &ReportRow, col: &str| if col == "avg_textual" { avg_textual(row) } else { row.mean(col) };
    let mut datasets: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let mut rows = Vec::new();
    for d in datasets {
        let Some(base) = report.row(d, Method::TipProcedure) else { continue };
        let cells = columns
            .iter()
            .map(|c| {
                let v = value(base, c);
                AblationCell { value: v, delta: v.map(|_| 0.0), pct: v.map(|_| 0.0), display: md(v, 3) }
            })
            .collect();
        rows.push(AblationRow { dataset: d.to_string(), method: Method::TipProcedure, cells });
        for m in ABLATED {
            let Some(row) = report.row(d, m) else { continue };
            let cells = columns
                .iter()
                .map(|c| match (value(row, c), value(base, c)) {
                    (Some(v), Some(b)) => AblationCell {
                        value: Some(v),
                        delta: Some(v - b),
                        pct: (b != 0.0).then(|| (v - b) / b.abs() * 100.0),
                        display: format_delta(v, b),
                    },
                    (v, _) => AblationCell { value: v, delta: None, pct: None, display: md(v, 3) },
                })
                .collect();
            rows.push(AblationRow { dataset: d.to_string(), method: m, cells });
        }
    }
    AblationReport { columns, rows, isolation: isolation_checks(plans) }
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset | Method |");
        for c in &self.columns {
            let _ = write!(out, " {} |", header_label(c));
        }
        out.push_str("\n|---|---|");
        for _ in &self.columns {
            out.push_str("---:|");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} | {} |", r.dataset, r.method);
            for c in &r.cells {
                let _ = write!(out, " {} |", c.display);
            }
            out.push('\n');
        }
        let failed: Vec<&IsolationCheck> = self.isolation.iter().filter(|c| !c.ok).collect();
        let _ = writeln!(out, "\nIsolation checks: {} passed, {} failed", self.isolation.len() - failed.len(), failed.len());
        for c in failed {
            let _ = writeln!(out, "- {}/{} {}: {}", c.dataset, c.goal_id, c.method, c.check);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,method");
        for c in &self.columns {
            let _ = write!(out, ",{c},{c}_pct");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", csv_field(&r.dataset), r.method);
            for c in &r.cells {
                let _ = write!(out, ",{},{}", num(c.value), num(c.pct));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), RunnerError> {
        write_atomic(&dir.join("ablation.md"), self.to_markdown().as_bytes())?;
        write_atomic(&dir.join("ablation.csv"), self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_format() {
        assert_eq!(format_delta(0.341, 0.4179), "0.341 (-18.4%)");
        assert_eq!(format_delta(0.5, 0.4), "0.500 (+25.0%)");
        assert_eq!(format_delta(0.4, 0.4), "0.400 (+0.0%)");
        assert_eq!(format_delta(1.0, 0.0), "1.000 (n/a)");
    }

    #[test]
    fn method_order_covers_every_method() {
        for m in Method::ALL {
            assert!(METHOD_ORDER.contains(&m));
        }
        assert_eq!(METHOD_ORDER.last(), Some(&Method::TipProcedure));
    }

    #[test]
    fn csv_quotes_awkward_names() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
