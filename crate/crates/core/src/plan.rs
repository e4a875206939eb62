//! Goals, plans, templates and the JSON Lines plan record format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A high-level task to plan for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub id: String,
    pub title: String,
    pub dataset: String,
    #[serde(default)]
    pub category: Option<String>,
}

impl Goal {
    pub fn new(id: impl Into<String>, title: impl Into<String>, dataset: impl Into<String>) -> Self {
        Goal { id: id.into(), title: title.into(), dataset: dataset.into(), category: None }
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }
}

/// Reference to a raster image stored on disk.
///
/// `locator` is relative to the image store (or corpus) root that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageHandle {
    pub locator: String,
    pub width: u32,
    pub height: u32,
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub index: usize,
    pub text: String,
    #[serde(default)]
    pub image: Option<ImageHandle>,
    #[serde(default)]
    pub imagination_prompt: Option<String>,
    #[serde(default)]
    pub caption: Option<String>,
}

impl PlanStep {
    pub fn text_only(index: usize, text: impl Into<String>) -> Self {
        PlanStep { index, text: text.into(), image: None, imagination_prompt: None, caption: None }
    }
}

/// How a plan was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    TipProcedure,
    TipStepwise,
    BaselineNoBridge,
    BaselineTextRef,
    BaselineImageRef,
    AblationNoT2ib,
    AblationNoI2tb,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::TipProcedure,
        Method::TipStepwise,
        Method::BaselineNoBridge,
        Method::BaselineTextRef,
        Method::BaselineImageRef,
        Method::AblationNoT2ib,
        Method::AblationNoI2tb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TipProcedure => "tip_procedure",
            Method::TipStepwise => "tip_stepwise",
            Method::BaselineNoBridge => "baseline_no_bridge",
            Method::BaselineTextRef => "baseline_text_ref",
            Method::BaselineImageRef => "baseline_image_ref",
            Method::AblationNoT2ib => "ablation_no_t2ib",
            Method::AblationNoI2tb => "ablation_no_i2tb",
        }
    }

    /// Methods built on the bridged pipeline, whose image steps must record
    /// the imagination prompt that produced them.
    pub fn is_tip(self) -> bool {
        matches!(
            self,
            Method::TipProcedure | Method::TipStepwise | Method::AblationNoT2ib | Method::AblationNoI2tb
        )
    }

    /// Whether image prompts come from the text-to-image bridge.
    pub fn uses_t2i_bridge(self) -> bool {
        matches!(self, Method::TipProcedure | Method::TipStepwise | Method::AblationNoI2tb)
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Method::BaselineTextRef | Method::BaselineImageRef)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown method `{0}`")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

impl TryFrom<String> for Method {
    type Error = UnknownMethod;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.as_str().to_string()
    }
}

/// A generated text-image plan with the provenance of every stage.
///
/// Field order is the record's wire order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalPlan {
    pub goal: Goal,
    pub method: Method,
    pub vanilla_text: Vec<String>,
    pub steps: Vec<PlanStep>,
    pub pairing_adjusted: bool,
    pub backend_fingerprint: String,
}

impl MultimodalPlan {
    pub fn texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }

    /// Step texts joined by newline; the plan-level document used by the metrics.
    pub fn joined_text(&self) -> String {
        self.texts().join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageHandle> {
        self.steps.iter().filter_map(|s| s.image.as_ref())
    }
}

/// Gold plan from a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePlan {
    pub goal: Goal,
    pub steps: Vec<PlanStep>,
}

impl ReferencePlan {
    pub fn joined_text(&self) -> String {
        self.steps.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRole {
    Vanilla,
    T2iBridge,
    I2tBridge,
}

impl fmt::Display for TemplateRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateRole::Vanilla => "vanilla",
            TemplateRole::T2iBridge => "t2i_bridge",
            TemplateRole::I2tBridge => "i2t_bridge",
        })
    }
}

/// A trigger sentence bound to one prompt slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    role: TemplateRole,
    pub body: String,
    #[serde(default)]
    pub misleading: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("template `{0}` has an empty body")]
pub struct EmptyTemplate(pub String);

impl PromptTemplate {
    pub fn new(id: impl Into<String>, role: TemplateRole, body: impl Into<String>) -> Result<Self, EmptyTemplate> {
        let id = id.into();
        let body = body.into();
        if body.trim().is_empty() {
            return Err(EmptyTemplate(id));
        }
        Ok(PromptTemplate { id, role, body, misleading: false })
    }

    pub fn misleading(mut self) -> Self {
        self.misleading = true;
        self
    }

    pub fn role(&self) -> TemplateRole {
        self.role
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { temperature: 0.0, max_tokens: 512, seed: None }
    }
}

/// A broken plan invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Checks every plan invariant and reports what is broken. An empty result
/// means the plan is valid.
pub fn validate_plan(plan: &MultimodalPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field, message: String| out.push(Violation { field, message });

    if plan.goal.title.trim().is_empty() {
        push("goal.title", "empty goal title".into());
    }
    if plan.steps.is_empty() {
        push("steps", "plan has no steps".into());
    }
    if plan.steps.iter().enumerate().any(|(i, s)| s.index != i + 1) {
        push("steps.index", "non-contiguous step indices".into());
    }
    for step in &plan.steps {
        if step.text.trim().is_empty() {
            push("steps.text", format!("empty text at step {}", step.index));
        }
        if let Some(image) = &step.image {
            if image.width == 0 || image.height == 0 {
                push("steps.image", format!("zero-sized image at step {}", step.index));
            }
            if plan.method.is_tip() && step.imagination_prompt.is_none() {
                push("steps.imagination_prompt", format!("missing imagination_prompt at step {}", step.index));
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed plan record at line {line}, column {column}: {message}")]
    Malformed { line: usize, column: usize, message: String },
    #[error("{0}")]
    UnknownMethod(#[from] UnknownMethod),
}

/// Encodes a plan as one JSON line (no trailing newline).
pub fn serialize_plan(plan: &MultimodalPlan) -> String {
    serde_json::to_string(plan).expect("plan serialization is infallible")
}

pub fn parse_plan(record: &str) -> Result<MultimodalPlan, RecordError> {
    serde_json::from_str(record.trim_end()).map_err(|e| {
        let message = e.to_string();
        // serde reports try_from failures as custom errors; surface the enum closure directly.
        if let Some(rest) = message.strip_prefix("unknown method `") {
            if let Some(name) = rest.split('`').next() {
                return RecordError::UnknownMethod(UnknownMethod(name.to_string()));
            }
        }
        RecordError::Malformed { line: e.line(), column: e.column(), message }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_plan(method: Method) -> MultimodalPlan {
        let steps = (1..=3)
            .map(|i| PlanStep {
                index: i,
                text: format!("do thing {i}"),
                image: Some(ImageHandle {
                    locator: format!("images/{i}.png"),
                    width: 512,
                    height: 512,
                    format: "png".into(),
                }),
                imagination_prompt: Some(format!("draw thing {i}")),
                caption: Some(format!("a thing {i}")),
            })
            .collect();
        MultimodalPlan {
            goal: Goal::new("g1", "How to make a candy bouquet", "wikiplan").with_category("crafts"),
            method,
            vanilla_text: vec!["a".into(), "b".into(), "c".into()],
            steps,
            pairing_adjusted: false,
            backend_fingerprint: "mock".into(),
        }
    }

    #[test]
    fn valid_plan_has_no_violations() {
        assert!(validate_plan(&sample_plan(Method::TipProcedure)).is_empty());
    }

    #[test]
    fn gap_in_indices_is_reported() {
        let mut plan = sample_plan(Method::TipProcedure);
        plan.steps.remove(1);
        plan.steps[1].index = 3;
        let v: Vec<String> = validate_plan(&plan).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["non-contiguous step indices"]);
    }

    #[test]
    fn tip_image_needs_imagination_prompt() {
        let mut plan = sample_plan(Method::TipProcedure);
        plan.steps[1].imagination_prompt = None;
        let v: Vec<String> = validate_plan(&plan).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["missing imagination_prompt at step 2"]);

        // baselines do not carry the bridge provenance requirement
        plan.method = Method::BaselineImageRef;
        assert!(validate_plan(&plan).is_empty());
    }

    #[test]
    fn empty_plan_and_blank_text() {
        let mut plan = sample_plan(Method::BaselineNoBridge);
        plan.steps[0].text = "  ".into();
        assert_eq!(validate_plan(&plan)[0].field, "steps.text");
        plan.steps.clear();
        assert_eq!(validate_plan(&plan)[0].message, "plan has no steps");
    }

    #[test]
    fn record_field_names() {
        let line = serialize_plan(&sample_plan(Method::TipProcedure));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["goal", "method", "vanilla_text", "steps", "pairing_adjusted", "backend_fingerprint"] {
            assert!(keys.contains(&k), "{k}");
        }
        let step = &v["steps"][0];
        for k in ["index", "text", "image", "imagination_prompt", "caption"] {
            assert!(step.get(k).is_some(), "{k}");
        }
        for k in ["locator", "width", "height", "format"] {
            assert!(step["image"].get(k).is_some(), "{k}");
        }
        for k in ["id", "title", "dataset", "category"] {
            assert!(v["goal"].get(k).is_some(), "{k}");
        }
        assert!(!line.contains('\n'));
    }

    #[test]
    fn missing_field_is_named() {
        let line = serialize_plan(&sample_plan(Method::TipProcedure));
        let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v.as_object_mut().unwrap().remove("backend_fingerprint");
        let err = parse_plan(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("missing field `backend_fingerprint`"), "{err}");
    }

    #[test]
    fn cut_off_record_reports_position() {
        let line = serialize_plan(&sample_plan(Method::TipProcedure));
        let err = parse_plan(&line[..line.len() / 2]).unwrap_err();
        match err {
            RecordError::Malformed { line, column, .. } => {
                assert_eq!(line, 1);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_method_tag() {
        let line = serialize_plan(&sample_plan(Method::TipProcedure)).replace("tip_procedure", "tip_magic");
        let err = parse_plan(&line).unwrap_err();
        assert!(matches!(err, RecordError::UnknownMethod(_)));
        assert!(err.to_string().starts_with("unknown method"));
    }

    #[test]
    fn template_role_is_fixed_and_body_required() {
        let t = PromptTemplate::new("x", TemplateRole::T2iBridge, "draw").unwrap();
        assert_eq!(t.role(), TemplateRole::T2iBridge);
        assert!(PromptTemplate::new("y", TemplateRole::Vanilla, "   ").is_err());
    }

    #[test]
    fn greedy_by_default() {
        let p = GenerationParams::default();
        assert_eq!(p.temperature, 0.0);
        assert_eq!(p.max_tokens, 512);
    }
}

#[cfg(test)]
pub(crate) use tests::sample_plan;
