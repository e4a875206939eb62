//! Multimodal procedural planning: a dual-bridge prompting pipeline over
//! pluggable text, image, caption and embedding backends, plus the metrics,
//! corpus tooling, experiment runner and pairwise rating store used to
//! evaluate it.

pub mod backends;
pub mod corpus;
pub mod metrics;
pub mod pipeline;
pub mod plan;
pub mod rater;
pub mod runner;

pub use backends::{BackendError, BackendSuite, CacheMode, ImageStore, ReplayCache};
pub use corpus::{load_corpus, CorpusError, CorpusManifest, ValidationRules};
pub use metrics::{MetricError, MetricReport};
pub use pipeline::{PipelineConfig, PipelineError, TemplateSet};
pub use plan::{
    parse_plan, serialize_plan, validate_plan, GenerationParams, Goal, ImageHandle, Method, MultimodalPlan, PlanStep,
    PromptTemplate, ReferencePlan, TemplateRole,
};
pub use rater::{AggregateMode, AggregateTable, Aspect, Choice, RaterError, RaterStore};
pub use runner::{run_experiment, ComparisonReport, ExperimentConfig, RunnerError};
