//! Automatic plan metrics: ROUGE-L, METEOR, WMD, sentence similarity,
//! CLIP score, Fréchet distance and the caption/text composites.

pub mod frechet;
pub mod lexical;
pub mod transport;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSuite, EmbedInput, Embedder, Space, CAPTION_QUESTION};
use crate::pipeline::{parse_step_list, render_imagination_prompt, render_revision_prompt, PipelineConfig};
use crate::plan::{ImageHandle, MultimodalPlan, PromptTemplate, ReferencePlan, TemplateRole};

pub use frechet::{frechet_distance, DistributionMoments};
pub use lexical::{lcs_len, meteor, meteor_with, rouge_l, MeteorParams, MeteorScore, RougeScore};
pub use transport::{solve_transport, TransportPlan};

/// CLIPScore rescaling weight.
pub const CLIP_WEIGHT: f64 = 2.5;
pub const DEFAULT_VOCAB_BUDGET: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty {0}")]
    EmptySequence(&'static str),
    #[error("vocabulary of {size} words exceeds the solver budget of {budget}")]
    VocabBudget { size: usize, budget: usize },
    #[error("word `{0}` missing from embedder")]
    MissingWord(String),
    #[error("zero-norm embedding for {0}")]
    ZeroNorm(&'static str),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("covariance is not symmetric")]
    NotSymmetric,
    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("infeasible transport problem: {0}")]
    Infeasible(String),
    #[error("missing reference plan")]
    MissingReference,
    #[error("empty sample")]
    EmptySample,
    #[error("template `{0}` is not a bridge template")]
    NotABridge(String),
    #[error("sample step {0:?} has no image")]
    MissingImage(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("pipeline: {0}")]
    Pipeline(String),
}

/// Lowercase, split on non-alphanumeric runs, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(text: &str) -> Self {
        TokenSequence { tokens: tokenize(text) }
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [String];
    fn deref(&self) -> &[String] {
        &self.tokens
    }
}

fn embed_values(embedder: &dyn Embedder, input: EmbedInput<'_>, space: Space) -> Result<Vec<f64>, MetricError> {
    let v = embedder.embed(input, space)?;
    if v.values.is_empty() || v.values.iter().any(|x| !x.is_finite()) {
        return Err(BackendError::Malformed(format!("{space} embedding is empty or non-finite")).into());
    }
    Ok(v.values)
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 {
        return Err(MetricError::ZeroNorm("left vector"));
    }
    if nb == 0.0 {
        return Err(MetricError::ZeroNorm("right vector"));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingWordPolicy {
    #[default]
    Error,
    SkipRenormalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WmdOptions {
    pub vocab_budget: usize,
    pub missing: MissingWordPolicy,
}

impl Default for WmdOptions {
    fn default() -> Self {
        WmdOptions { vocab_budget: DEFAULT_VOCAB_BUDGET, missing: MissingWordPolicy::Error }
    }
}

fn nbow<'a>(doc: &'a [String], keep: &BTreeMap<&str, Vec<f64>>) -> Vec<(&'a str, f64)> {
    let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
    for w in doc.iter().filter(|w| keep.contains_key(w.as_str())) {
        *counts.entry(w.as_str()).or_default() += 1.0;
    }
    let total: f64 = counts.values().sum();
    counts.into_iter().map(|(w, c)| (w, c / total)).collect()
}

pub fn wmd(doc_a: &[String], doc_b: &[String], embedder: &dyn Embedder) -> Result<f64, MetricError> {
    wmd_with(doc_a, doc_b, embedder, &WmdOptions::default())
}

/// Word Mover's Distance: exact optimal transport between normalised
/// bag-of-words histograms with Euclidean word-embedding ground cost.
pub fn wmd_with(
    doc_a: &[String],
    doc_b: &[String],
    embedder: &dyn Embedder,
    opts: &WmdOptions,
) -> Result<f64, MetricError> {
    if doc_a.is_empty() || doc_b.is_empty() {
        return Err(MetricError::EmptySequence("document"));
    }
    let vocab: BTreeSet<&str> = doc_a.iter().chain(doc_b).map(String::as_str).collect();
    if vocab.len() > opts.vocab_budget {
        return Err(MetricError::VocabBudget { size: vocab.len(), budget: opts.vocab_budget });
    }
    let mut vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for w in vocab {
        match embed_values(embedder, EmbedInput::Text(w), Space::Word) {
            Ok(v) => {
                vectors.insert(w, v);
            }
            Err(MetricError::Backend(BackendError::UnknownInput(_))) => match opts.missing {
                MissingWordPolicy::Error => return Err(MetricError::MissingWord(w.to_string())),
                MissingWordPolicy::SkipRenormalize => tracing::debug!(word = w, "skipping word without embedding"),
            },
            Err(e) => return Err(e),
        }
    }
    let a = nbow(doc_a, &vectors);
    let b = nbow(doc_b, &vectors);
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySequence("document after dropping unknown words"));
    }
    let dim = vectors.values().next().map_or(0, Vec::len);
    if let Some(v) = vectors.values().find(|v| v.len() != dim) {
        return Err(MetricError::DimensionMismatch { left: dim, right: v.len() });
    }
    let cost: Vec<Vec<f64>> =
        a.iter().map(|(wa, _)| b.iter().map(|(wb, _)| euclidean(&vectors[wa], &vectors[wb])).collect()).collect();
    let supply: Vec<f64> = a.iter().map(|p| p.1).collect();
    let demand: Vec<f64> = b.iter().map(|p| p.1).collect();
    Ok(solve_transport(&supply, &demand, &cost)?.cost.max(0.0))
}

/// Cosine of sentence-space embeddings.
pub fn sbert_similarity(text_a: &str, text_b: &str, embedder: &dyn Embedder) -> Result<f64, MetricError> {
    if text_a.trim().is_empty() || text_b.trim().is_empty() {
        return Err(MetricError::EmptySequence("text"));
    }
    let a = embed_values(embedder, EmbedInput::Text(text_a), Space::Sentence)?;
    let b = embed_values(embedder, EmbedInput::Text(text_b), Space::Sentence)?;
    cosine(&a, &b)
}

pub fn clip_from_cosine(cos: f64) -> f64 {
    CLIP_WEIGHT * cos.max(0.0)
}

/// `w · max(cos(image, text), 0)` in the joint space.
pub fn clip_score(image: &ImageHandle, text: &str, embedder: &dyn Embedder) -> Result<f64, MetricError> {
    if text.trim().is_empty() {
        return Err(MetricError::EmptySequence("text"));
    }
    let i = embed_values(embedder, EmbedInput::Image(image), Space::JointImage)?;
    let t = embed_values(embedder, EmbedInput::Text(text), Space::JointText)?;
    Ok(clip_from_cosine(cosine(&i, &t)?))
}

/// Fréchet distance between the joint-image feature distributions of two image sets.
pub fn image_set_fid(
    predicted: &[ImageHandle],
    reference: &[ImageHandle],
    embedder: &dyn Embedder,
) -> Result<f64, MetricError> {
    let feats = |set: &[ImageHandle]| -> Result<Vec<Vec<f64>>, MetricError> {
        set.par_iter().map(|h| embed_values(embedder, EmbedInput::Image(h), Space::JointImage)).collect()
    };
    let a = DistributionMoments::from_features(&feats(predicted)?)?;
    let b = DistributionMoments::from_features(&feats(reference)?)?;
    frechet_distance(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeScores {
    pub cap_s: f64,
    pub text_s: f64,
    pub all_s: f64,
}

/// Caption/text similarity against the reference text. Steps without a
/// stored caption are captioned on the fly.
pub fn composite_scores(
    predicted: &MultimodalPlan,
    reference: Option<&ReferencePlan>,
    backends: &BackendSuite,
) -> Result<CompositeScores, MetricError> {
    let reference = reference.ok_or(MetricError::MissingReference)?;
    let ref_text = reference.joined_text();
    let mut captions = Vec::new();
    for step in &predicted.steps {
        match (&step.caption, &step.image) {
            (Some(c), _) => captions.push(c.clone()),
            (None, Some(img)) => captions.push(backends.caption(img, CAPTION_QUESTION)?),
            (None, None) => {}
        }
    }
    if captions.is_empty() {
        return Err(MetricError::EmptySequence("captions"));
    }
    let cap_s = sbert_similarity(&captions.join("\n"), &ref_text, &*backends.sentence)?;
    let text_s = sbert_similarity(&predicted.joined_text(), &ref_text, &*backends.sentence)?;
    Ok(CompositeScores { cap_s, text_s, all_s: (cap_s + text_s) / 2.0 })
}

/// Which metrics to compute per plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricToggles {
    pub rouge_l: bool,
    pub meteor: bool,
    pub wmd: bool,
    pub sbert: bool,
    pub clip: bool,
    pub composite: bool,
    pub fid: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles { rouge_l: true, meteor: true, wmd: true, sbert: true, clip: true, composite: true, fid: true }
    }
}

/// Scores for one plan against its reference. A metric that is disabled or
/// fails is `None`; failures are listed in `failures`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub wmd_distance: Option<f64>,
    pub wmd_similarity: Option<f64>,
    pub sbert: Option<f64>,
    pub rouge_l: Option<f64>,
    pub meteor: Option<f64>,
    pub clip: Option<f64>,
    pub cap_s: Option<f64>,
    pub text_s: Option<f64>,
    pub all_s: Option<f64>,
    /// corpus-level only; never set on per-plan reports
    pub fid: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl MetricReport {
    /// Column order of the aggregate tables.
    pub const COLUMNS: [&'static str; 10] =
        ["wmd_similarity", "wmd_distance", "sbert", "rouge_l", "meteor", "fid", "clip", "cap_s", "text_s", "all_s"];

    pub fn get(&self, column: &str) -> Option<f64> {
        match column {
            "wmd_distance" => self.wmd_distance,
            "wmd_similarity" => self.wmd_similarity,
            "sbert" => self.sbert,
            "rouge_l" => self.rouge_l,
            "meteor" => self.meteor,
            "clip" => self.clip,
            "cap_s" => self.cap_s,
            "text_s" => self.text_s,
            "all_s" => self.all_s,
            "fid" => self.fid,
            _ => None,
        }
    }

    fn record<T>(&mut self, name: &str, r: Result<T, MetricError>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.failures.push(format!("{name}: {e}"));
                None
            }
        }
    }
}

/// Per-plan metric suite. Text metrics compare newline-joined plan text with
/// the joined reference text; CLIP is averaged over image-bearing steps.
pub fn evaluate_plan(
    plan: &MultimodalPlan,
    reference: &ReferencePlan,
    backends: &BackendSuite,
    toggles: &MetricToggles,
    wmd_opts: &WmdOptions,
) -> MetricReport {
    let mut report = MetricReport::default();
    let pred_text = plan.joined_text();
    let ref_text = reference.joined_text();
    let pred = TokenSequence::new(&pred_text);
    let gold = TokenSequence::new(&ref_text);

    if toggles.rouge_l {
        report.rouge_l = report.record("rouge_l", rouge_l(&pred, &gold).map(|r| r.f));
    }
    if toggles.meteor {
        report.meteor = report.record("meteor", meteor(&pred, &gold).map(|m| m.score));
    }
    if toggles.wmd {
        report.wmd_distance = report.record("wmd", wmd_with(&pred, &gold, &*backends.word, wmd_opts));
        report.wmd_similarity = report.wmd_distance.map(|d| 1.0 / (1.0 + d));
    }
    if toggles.clip {
        let scores: Result<Vec<f64>, MetricError> = plan
            .steps
            .iter()
            .filter_map(|s| s.image.as_ref().map(|img| clip_score(img, &s.text, &*backends.joint)))
            .collect();
        let clip = scores.and_then(|v| {
            if v.is_empty() {
                Err(MetricError::EmptySequence("image steps"))
            } else {
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            }
        });
        report.clip = report.record("clip", clip);
    }
    if toggles.composite || toggles.sbert {
        if let Some(c) = report.record("composite", composite_scores(plan, Some(reference), backends)) {
            if toggles.composite {
                (report.cap_s, report.text_s, report.all_s) = (Some(c.cap_s), Some(c.text_s), Some(c.all_s));
            }
            // plan-level sentence similarity is the text composite
            if toggles.sbert {
                report.sbert = Some(c.text_s);
            }
        }
    }
    report
}

/// One probe for the template-robustness harness: a step text, and for the
/// image-to-text direction the image it is paired with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub dataset: String,
    pub step: String,
    pub image: Option<ImageHandle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateAlignment {
    pub template_id: String,
    pub role: TemplateRole,
    pub misleading: bool,
    pub per_dataset: BTreeMap<String, f64>,
    /// unweighted mean of the per-dataset means
    pub average: f64,
}

fn pipeline_err(e: impl std::fmt::Display) -> MetricError {
    MetricError::Pipeline(e.to_string())
}

fn align_one(
    template: &PromptTemplate,
    sample: &AlignmentSample,
    backends: &BackendSuite,
    config: &PipelineConfig,
) -> Result<f64, MetricError> {
    let joint = &*backends.joint;
    match template.role() {
        TemplateRole::T2iBridge => {
            let prompt = render_imagination_prompt(&sample.step, template).map_err(pipeline_err)?;
            let scene = backends.text_complete(&prompt.text, &config.params)?.text;
            let scene = scene.trim();
            if scene.is_empty() {
                return Err(MetricError::EmptySequence("scene description"));
            }
            let (w, h) = config.image_size;
            let image = backends.image_generate(scene, w, h)?;
            let t = embed_values(joint, EmbedInput::Text(&sample.step), Space::JointText)?;
            let i = embed_values(joint, EmbedInput::Image(&image), Space::JointImage)?;
            cosine(&t, &i)
        }
        TemplateRole::I2tBridge => {
            let image = sample.image.as_ref().ok_or_else(|| MetricError::MissingImage(sample.step.clone()))?;
            let caption = backends.caption(image, CAPTION_QUESTION)?;
            let prompt = render_revision_prompt(std::slice::from_ref(&sample.step), &[caption], template)
                .map_err(pipeline_err)?;
            let raw = backends.text_complete(&prompt.text, &config.params)?.text;
            // misleading templates often answer in prose; score that verbatim
            let revised = parse_step_list(&raw).ok().and_then(|s| s.into_iter().next()).unwrap_or(raw.trim().to_string());
            if revised.is_empty() {
                return Err(MetricError::EmptySequence("revised step"));
            }
            let i = embed_values(joint, EmbedInput::Image(image), Space::JointImage)?;
            let t = embed_values(joint, EmbedInput::Text(&revised), Space::JointText)?;
            cosine(&i, &t)
        }
        TemplateRole::Vanilla => Err(MetricError::NotABridge(template.id.clone())),
    }
}

/// Mean joint-space cosine between what a bridge template was given and what
/// it produced, per dataset and averaged across datasets.
pub fn template_alignment(
    template: &PromptTemplate,
    samples: &[AlignmentSample],
    backends: &BackendSuite,
    config: &PipelineConfig,
) -> Result<TemplateAlignment, MetricError> {
    if template.role() == TemplateRole::Vanilla {
        return Err(MetricError::NotABridge(template.id.clone()));
    }
    if samples.is_empty() {
        return Err(MetricError::EmptySample);
    }
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|s| align_one(template, s, backends, config))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_, _>>()?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (s, v) in samples.iter().zip(&scores) {
        let e = sums.entry(s.dataset.clone()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let per_dataset: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let average = per_dataset.values().sum::<f64>() / per_dataset.len() as f64;
    Ok(TemplateAlignment {
        template_id: template.id.clone(),
        role: template.role(),
        misleading: template.misleading,
        per_dataset,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FixtureEmbedder;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Step 1: Boil the WATER, then... pour!"), vec!["step", "1", "boil", "the", "water", "then", "pour"]);
        assert!(tokenize(" -- ").is_empty());
    }

    #[test]
    fn wmd_single_mass_is_euclidean() {
        let e = FixtureEmbedder::new("fx").with(Space::Word, "cat", vec![0.0, 0.0]).with(Space::Word, "dog", vec![3.0, 4.0]);
        assert!((wmd(&words("cat"), &words("dog"), &e).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(wmd(&words("cat dog"), &words("dog cat"), &e).unwrap(), 0.0);
    }

    #[test]
    fn wmd_missing_word_policy() {
        let e = FixtureEmbedder::new("fx").with(Space::Word, "cat", vec![0.0, 0.0]).with(Space::Word, "dog", vec![3.0, 4.0]);
        assert_eq!(wmd(&words("cat zebra"), &words("dog"), &e), Err(MetricError::MissingWord("zebra".into())));
        let skip = WmdOptions { missing: MissingWordPolicy::SkipRenormalize, ..WmdOptions::default() };
        assert!((wmd_with(&words("cat zebra"), &words("dog"), &e, &skip).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn wmd_vocab_budget() {
        let e = FixtureEmbedder::new("fx");
        let opts = WmdOptions { vocab_budget: 2, ..WmdOptions::default() };
        assert!(matches!(
            wmd_with(&words("a b"), &words("c"), &e, &opts),
            Err(MetricError::VocabBudget { size: 3, budget: 2 })
        ));
    }

    #[test]
    fn sbert_fixtures() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let e = FixtureEmbedder::new("fx")
            .with(Space::Sentence, "a", vec![1.0, 0.0])
            .with(Space::Sentence, "b", vec![0.0, 1.0])
            .with(Space::Sentence, "c", vec![h, h])
            .with(Space::Sentence, "z", vec![0.0, 0.0]);
        assert!((sbert_similarity("a", "a", &e).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(sbert_similarity("a", "b", &e).unwrap(), 0.0);
        assert!((sbert_similarity("a", "c", &e).unwrap() - 0.70710678).abs() < 1e-6);
        assert!(matches!(sbert_similarity("a", "z", &e), Err(MetricError::ZeroNorm(_))));
    }

    #[test]
    fn clip_formula() {
        assert_eq!(clip_from_cosine(1.0), 2.5);
        assert_eq!(clip_from_cosine(0.8), 2.0);
        assert_eq!(clip_from_cosine(-0.3), 0.0);
    }
}
