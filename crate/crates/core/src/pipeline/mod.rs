//! The dual-bridge planning pipeline.
//!
//! A full run goes vanilla plan → imagination prompts (text-to-image bridge)
//! → images → captions → revised plan (image-to-text bridge). The baseline and
//! ablation methods reuse the same stages with individual bridges bypassed.

mod prompts;
mod run;
pub mod templates;

use std::fmt;

use thiserror::Error;

use crate::backends::{BackendError, DEFAULT_IMAGE_SIZE};
use crate::plan::{GenerationParams, Method, TemplateRole};

pub use prompts::{
    parse_step_list, render_imagination_prompt, render_revision_prompt, render_stepwise_prompt, render_vanilla_prompt,
    RenderedPrompt, SLOT_MARKERS, STEPWISE_INSTRUCTION,
};
pub use run::{
    generate_image_plan, plan_path, run, run_baseline, run_tip, run_tip_stepwise, verbalize_images, Reference,
};
pub use templates::TemplateSet;

/// Upper bound on stepwise plan length; the corpus step cap.
pub const DEFAULT_MAX_STEPS: usize = 22;
pub const DEFAULT_STOP_MARKER: &str = "DONE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vanilla,
    Imagination,
    ImageGeneration,
    Verbalization,
    Revision,
    Stepwise,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Vanilla => "vanilla plan",
            Stage::Imagination => "imagination prompt",
            Stage::ImageGeneration => "image generation",
            Stage::Verbalization => "verbalization",
            Stage::Revision => "revision",
            Stage::Stepwise => "stepwise generation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("no parseable steps in LLM output: {raw:?}")]
    UnparseablePlan { raw: String },
    #[error("{stage} failed{}: {source}", step.map(|s| format!(" at step={s}")).unwrap_or_default())]
    Backend {
        stage: Stage,
        step: Option<usize>,
        #[source]
        source: BackendError,
    },
    #[error("template `{template}` has role {actual}, expected {expected}")]
    WrongRole { template: String, expected: TemplateRole, actual: TemplateRole },
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("{steps} steps but {captions} captions")]
    ArityMismatch { steps: usize, captions: usize },
    #[error("method {0} requires a reference plan")]
    MissingReference(Method),
    #[error("method {method} cannot run through {entry}")]
    WrongMode { method: Method, entry: &'static str },
    #[error("pipeline produced an invalid plan: {0}")]
    InvalidPlan(String),
}

impl PipelineError {
    pub fn step(&self) -> Option<usize> {
        match self {
            PipelineError::Backend { step, .. } => *step,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub templates: TemplateSet,
    pub mode: Method,
    pub image_size: (u32, u32),
    pub params: GenerationParams,
    pub max_steps: usize,
    pub stop_marker: String,
}

impl PipelineConfig {
    pub fn new(mode: Method) -> Self {
        PipelineConfig {
            templates: TemplateSet::default(),
            mode,
            image_size: DEFAULT_IMAGE_SIZE,
            params: GenerationParams::default(),
            max_steps: DEFAULT_MAX_STEPS,
            stop_marker: DEFAULT_STOP_MARKER.to_string(),
        }
    }

    pub fn with_mode(&self, mode: Method) -> Self {
        PipelineConfig { mode, ..self.clone() }
    }
}
