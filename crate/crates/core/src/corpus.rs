//! Reference-plan corpora: loading, validation, sampling and statistics.
//!
//! A corpus file is a JSON array of
//! `{id, title, category, topic, steps: [{text, image}]}` where `image` is a
//! path relative to the corpus file's directory (conventionally under a
//! sibling `assets/`). The dataset tag is the file stem.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{sha256_hex, ImageStore};
use crate::plan::{Goal, ImageHandle, PlanStep, ReferencePlan};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Schema { path: PathBuf, line: usize, column: usize, message: String },
    #[error("requested {requested} tasks but only {available} accepted examples")]
    TooFew { requested: usize, available: usize },
    #[error("corpus has no accepted examples")]
    Empty,
    #[error("invalid rules: {0}")]
    Rules(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationRules {
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_image_dim: u32,
}

impl Default for ValidationRules {
    fn default() -> Self {
        ValidationRules { min_steps: 3, max_steps: 22, min_image_dim: 400 }
    }
}

impl ValidationRules {
    pub fn check(&self) -> Result<(), CorpusError> {
        if self.min_steps < 1 || self.min_steps > self.max_steps {
            return Err(CorpusError::Rules(format!(
                "need 1 <= min_steps <= max_steps, got {} and {}",
                self.min_steps, self.max_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStepRecord {
    pub text: String,
    pub image: Option<String>,
}

/// One entry of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
    pub steps: Vec<CorpusStepRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReason {
    pub rule: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedExample {
    pub id: String,
    pub reasons: Vec<RejectionReason>,
}

impl RejectedExample {
    pub fn has_rule(&self, rule: &str) -> bool {
        self.reasons.iter().any(|r| r.rule == rule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub dataset: String,
    pub examples: Vec<ReferencePlan>,
    pub rejected: Vec<RejectedExample>,
    pub provenance: String,
    /// directory image locators are relative to
    pub root: PathBuf,
    /// topics by example id, kept so a rewritten corpus loses nothing
    pub topics: BTreeMap<String, String>,
}

impl CorpusManifest {
    pub fn get(&self, id: &str) -> Option<&ReferencePlan> {
        self.examples.iter().find(|p| p.goal.id == id)
    }

    pub fn goals(&self) -> Vec<Goal> {
        self.examples.iter().map(|p| p.goal.clone()).collect()
    }

    /// `id \t rule \t detail`, one line per reason.
    pub fn rejects_report(&self) -> String {
        let mut out = String::new();
        for r in &self.rejected {
            for reason in &r.reasons {
                let _ = writeln!(out, "{}\t{}\t{}", r.id, reason.rule, reason.detail);
            }
        }
        out
    }
}

fn reason(rule: &str, detail: String) -> RejectionReason {
    RejectionReason { rule: rule.to_string(), detail }
}

fn check_record(
    rec: &CorpusRecord,
    root: &Path,
    rules: &ValidationRules,
    dataset: &str,
) -> Result<ReferencePlan, Vec<RejectionReason>> {
    let mut reasons = Vec::new();
    if rec.title.trim().is_empty() {
        reasons.push(reason("empty_title", "title is empty".into()));
    }
    let n = rec.steps.len();
    if n < rules.min_steps {
        reasons.push(reason("min_steps", format!("step count {n} < {}", rules.min_steps)));
    }
    if n > rules.max_steps {
        reasons.push(reason("max_steps", format!("step count {n} > {}", rules.max_steps)));
    }
    let probed: Vec<Result<ImageHandle, RejectionReason>> = rec
        .steps
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rel = s.image.as_deref().ok_or_else(|| reason("missing_image", format!("step {} has no image", i + 1)))?;
            let (width, height, format) = ImageStore::probe(&root.join(rel))
                .map_err(|e| reason("unreadable_image", format!("step {}: {rel}: {e}", i + 1)))?;
            if width.min(height) < rules.min_image_dim {
                return Err(reason(
                    "min_image_dim",
                    format!("image dim < {} (step {}: {width}x{height})", rules.min_image_dim, i + 1),
                ));
            }
            Ok(ImageHandle { locator: rel.to_string(), width, height, format })
        })
        .collect();
    let mut steps = Vec::with_capacity(n);
    for (i, (s, img)) in rec.steps.iter().zip(probed).enumerate() {
        if s.text.trim().is_empty() {
            reasons.push(reason("empty_step_text", format!("step {} has no text", i + 1)));
        }
        match img {
            Ok(h) => steps.push(PlanStep {
                index: i + 1,
                text: s.text.clone(),
                image: Some(h),
                imagination_prompt: None,
                caption: None,
            }),
            Err(r) => reasons.push(r),
        }
    }
    if !reasons.is_empty() {
        return Err(reasons);
    }
    let mut goal = Goal::new(rec.id.clone(), rec.title.clone(), dataset);
    goal.category = rec.category.clone();
    Ok(ReferencePlan { goal, steps })
}

/// Loads and validates a corpus file; every record ends up either accepted or
/// rejected with at least one reason.
pub fn load_corpus(path: &Path, rules: &ValidationRules) -> Result<CorpusManifest, CorpusError> {
    rules.check()?;
    let bytes = fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let records: Vec<CorpusRecord> = serde_json::from_slice(&bytes).map_err(|e| CorpusError::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dataset = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();

    let mut seen = HashSet::new();
    let mut examples = Vec::new();
    let mut rejected = Vec::new();
    let mut topics = BTreeMap::new();
    for rec in &records {
        if !seen.insert(rec.id.clone()) {
            rejected.push(RejectedExample {
                id: rec.id.clone(),
                reasons: vec![reason("duplicate_id", "id already used by an earlier example".into())],
            });
            continue;
        }
        match check_record(rec, &root, rules, &dataset) {
            Ok(plan) => {
                if let Some(t) = &rec.topic {
                    topics.insert(rec.id.clone(), t.clone());
                }
                examples.push(plan);
            }
            Err(reasons) => rejected.push(RejectedExample { id: rec.id.clone(), reasons }),
        }
    }
    tracing::info!(dataset, accepted = examples.len(), rejected = rejected.len(), "loaded corpus");
    Ok(CorpusManifest {
        provenance: format!("{} sha256:{}", path.display(), sha256_hex(&bytes)),
        dataset,
        examples,
        rejected,
        root,
        topics,
    })
}

/// Corpus records for the accepted examples.
pub fn to_records(manifest: &CorpusManifest) -> Vec<CorpusRecord> {
    manifest
        .examples
        .iter()
        .map(|p| CorpusRecord {
            id: p.goal.id.clone(),
            title: p.goal.title.clone(),
            category: p.goal.category.clone(),
            topic: manifest.topics.get(&p.goal.id).cloned(),
            steps: p
                .steps
                .iter()
                .map(|s| CorpusStepRecord { text: s.text.clone(), image: s.image.as_ref().map(|h| h.locator.clone()) })
                .collect(),
        })
        .collect()
}

/// Writes the accepted examples back out in corpus format. Image locators are
/// written unchanged, so the file belongs in the manifest's root directory.
pub fn write_corpus(manifest: &CorpusManifest, path: &Path) -> Result<(), CorpusError> {
    let text = serde_json::to_string_pretty(&to_records(manifest)).expect("corpus records serialize");
    fs::write(path, text + "\n").map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Writes `rejects.txt` into `dir`, returning its path.
pub fn write_rejects(manifest: &CorpusManifest, dir: &Path) -> Result<PathBuf, CorpusError> {
    let path = dir.join("rejects.txt");
    fs::write(&path, manifest.rejects_report()).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn sorted_goals(manifest: &CorpusManifest) -> Vec<Goal> {
    let mut goals = manifest.goals();
    goals.sort_by(|a, b| a.id.cmp(&b.id));
    goals
}

/// `n` distinct goals drawn uniformly without replacement. The result depends
/// only on the accepted ids, `n` and `seed`.
pub fn sample_tasks(manifest: &CorpusManifest, n: usize, seed: u64) -> Result<Vec<Goal>, CorpusError> {
    let goals = sorted_goals(manifest);
    if n > goals.len() {
        return Err(CorpusError::TooFew { requested: n, available: goals.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, goals.len(), n).into_iter().map(|i| goals[i].clone()).collect())
}

/// Up to `per_category` goals from each category (uncategorised examples
/// count as category ""), categories in name order.
pub fn sample_balanced(manifest: &CorpusManifest, per_category: usize, seed: u64) -> Vec<Goal> {
    let mut by_cat: BTreeMap<String, Vec<Goal>> = BTreeMap::new();
    for g in sorted_goals(manifest) {
        by_cat.entry(g.category.clone().unwrap_or_default()).or_default().push(g);
    }
    let mut out = Vec::new();
    for (cat, goals) in by_cat {
        if goals.len() < per_category {
            tracing::warn!(category = cat, available = goals.len(), per_category, "category under quota");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(
            crate::backends::sha256_bytes(cat.as_bytes())[..8].try_into().expect("8 bytes"),
        ));
        let k = per_category.min(goals.len());
        out.extend(index::sample(&mut rng, goals.len(), k).into_iter().map(|i| goals[i].clone()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dataset: String,
    pub examples: usize,
    pub rejected: usize,
    pub avg_steps: f64,
    pub step_histogram: BTreeMap<usize, usize>,
    pub categories: BTreeMap<String, usize>,
}

impl CorpusStats {
    /// Average step count to two decimals.
    pub fn avg_steps_display(&self) -> String {
        format!("{:.2}", self.avg_steps)
    }
}

pub fn corpus_stats(manifest: &CorpusManifest) -> Result<CorpusStats, CorpusError> {
    if manifest.examples.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut step_histogram = BTreeMap::new();
    let mut categories = BTreeMap::new();
    let mut total = 0usize;
    for p in &manifest.examples {
        total += p.steps.len();
        *step_histogram.entry(p.steps.len()).or_insert(0) += 1;
        *categories.entry(p.goal.category.clone().unwrap_or_default()).or_insert(0) += 1;
    }
    Ok(CorpusStats {
        dataset: manifest.dataset.clone(),
        examples: manifest.examples.len(),
        rejected: manifest.rejected.len(),
        avg_steps: total as f64 / manifest.examples.len() as f64,
        step_histogram,
        categories,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backends::MockImageGenerator;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32) -> String {
        let rel = format!("assets/{name}.png");
        fs::create_dir_all(dir.join("assets")).unwrap();
        fs::write(dir.join(&rel), MockImageGenerator::render(name, w, h).unwrap()).unwrap();
        rel
    }

    fn record(dir: &Path, id: &str, steps: usize, dims: (u32, u32)) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            title: format!("How to {id}"),
            category: Some(if steps % 2 == 0 { "even" } else { "odd" }.into()),
            topic: None,
            steps: (0..steps)
                .map(|i| CorpusStepRecord {
                    text: format!("do part {i} of {id}"),
                    image: Some(write_png(dir, &format!("{id}-{i}"), dims.0, dims.1)),
                })
                .collect(),
        }
    }

    /// `n` valid examples (3–5 steps, 400px images) in `{dir}/wikiplan.json`.
    pub(crate) fn write_fixture_corpus(dir: &Path, n: usize) -> PathBuf {
        const TASKS: [&str; 6] = ["bake bread", "plant tomatoes", "wash a car", "brew tea", "fold a shirt", "paint a fence"];
        let recs: Vec<CorpusRecord> = (0..n)
            .map(|i| {
                let mut r = record(dir, &format!("g{i:02}"), 3 + i % 3, (400, 400));
                r.title = format!("How to {} {i}", TASKS[i % TASKS.len()]);
                r
            })
            .collect();
        corpus(dir, &recs)
    }

    fn corpus(dir: &Path, recs: &[CorpusRecord]) -> PathBuf {
        let path = dir.join("wikiplan.json");
        fs::write(&path, serde_json::to_string(recs).unwrap()).unwrap();
        path
    }

    #[test]
    fn rules_and_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            record(dir.path(), "ok", 3, (400, 400)),
            record(dir.path(), "short", 2, (400, 400)),
            record(dir.path(), "long", 23, (400, 400)),
            record(dir.path(), "small", 3, (399, 500)),
        ];
        let m = load_corpus(&corpus(dir.path(), &recs), &ValidationRules::default()).unwrap();
        assert_eq!(m.dataset, "wikiplan");
        assert_eq!(m.examples.len(), 1);
        assert_eq!(m.examples.len() + m.rejected.len(), recs.len());
        let find = |id: &str| m.rejected.iter().find(|r| r.id == id).unwrap();
        assert!(find("short").reasons[0].detail.starts_with("step count 2 < 3"));
        assert!(find("long").reasons[0].detail.starts_with("step count 23 > 22"));
        assert!(find("small").has_rule("min_image_dim"));
        assert!(find("small").reasons[0].detail.starts_with("image dim < 400"));
        let report = m.rejects_report();
        assert!(report.contains("short\tmin_steps\tstep count 2 < 3"));
    }

    #[test]
    fn duplicates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut broken = record(dir.path(), "broken", 3, (400, 400));
        broken.steps[1].image = Some("assets/nope.png".into());
        let recs = vec![record(dir.path(), "a", 3, (400, 400)), record(dir.path(), "a", 4, (400, 400)), broken];
        let m = load_corpus(&corpus(dir.path(), &recs), &ValidationRules::default()).unwrap();
        assert_eq!(m.examples.len(), 1);
        assert!(m.rejected[0].has_rule("duplicate_id"));
        assert!(m.rejected[1].has_rule("unreadable_image"));
    }

    #[test]
    fn schema_errors_have_positions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "[\n  {\"id\": \"x\", \"steps\": []}\n]").unwrap();
        match load_corpus(&path, &ValidationRules::default()) {
            Err(CorpusError::Schema { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("title"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_corpus(&dir.path().join("none.json"), &ValidationRules::default()), Err(CorpusError::Io { .. })));
    }

    #[test]
    fn sampling_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = [3, 5, 7].iter().enumerate().map(|(i, &n)| record(dir.path(), &format!("t{i}"), n, (400, 400))).collect();
        let m = load_corpus(&corpus(dir.path(), &recs), &ValidationRules::default()).unwrap();
        let s = corpus_stats(&m).unwrap();
        assert_eq!(s.avg_steps_display(), "5.00");
        assert_eq!(s.categories["odd"], 3);

        assert_eq!(sample_tasks(&m, 3, 9).unwrap(), sample_tasks(&m, 3, 9).unwrap());
        let mut all: Vec<String> = sample_tasks(&m, 3, 9).unwrap().into_iter().map(|g| g.id).collect();
        all.sort();
        assert_eq!(all, vec!["t0", "t1", "t2"]);
        assert!(sample_tasks(&m, 0, 9).unwrap().is_empty());
        assert!(matches!(sample_tasks(&m, 4, 9), Err(CorpusError::TooFew { .. })));
        assert_eq!(sample_balanced(&m, 2, 1).len(), 2);
    }

    #[test]
    fn rewrite_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = vec![record(dir.path(), "a", 3, (400, 400)), record(dir.path(), "b", 2, (400, 400))];
        recs[0].topic = Some("crafts".into());
        let m = load_corpus(&corpus(dir.path(), &recs), &ValidationRules::default()).unwrap();
        let again = dir.path().join("wikiplan2.json");
        write_corpus(&m, &again).unwrap();
        let m2 = load_corpus(&again, &ValidationRules::default()).unwrap();
        assert_eq!(m.examples.iter().map(|p| &p.steps).collect::<Vec<_>>(), m2.examples.iter().map(|p| &p.steps).collect::<Vec<_>>());
        assert_eq!(m.topics, m2.topics);
        assert!(m2.rejected.is_empty());
    }

    #[test]
    fn bad_rules() {
        let r = ValidationRules { min_steps: 5, max_steps: 4, ..ValidationRules::default() };
        assert!(r.check().is_err());
    }
}
