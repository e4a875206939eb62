//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::backends::{
    BackendSuite, CacheMode, HttpCaptioner, HttpEmbedder, HttpImageGenerator, ImageStore, OpenAiTextGenerator,
    ReplayCache, DEFAULT_IMAGE_SIZE,
};
use crate::metrics::{MetricToggles, WmdOptions};
use crate::pipeline::templates::{self, DEFAULT_I2T_ID, DEFAULT_T2I_ID, DEFAULT_VANILLA_ID};
use crate::pipeline::{PipelineConfig, TemplateSet, DEFAULT_MAX_STEPS};
use crate::plan::{GenerationParams, Method, PromptTemplate, TemplateRole};

pub const DEFAULT_WORKERS: usize = 4;

fn default_workers() -> usize {
    DEFAULT_WORKERS
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

fn default_image_size() -> (u32, u32) {
    DEFAULT_IMAGE_SIZE
}

/// A single path or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Paths {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl Paths {
    pub fn to_vec(&self) -> Vec<PathBuf> {
        match self {
            Paths::One(p) => vec![p.clone()],
            Paths::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    pub kind: BackendKind,
    /// mock seed; defaults to the experiment seed
    pub seed: Option<u64>,
    pub text_url: Option<String>,
    pub text_model: Option<String>,
    pub image_url: Option<String>,
    pub caption_url: Option<String>,
    pub embed_url: Option<String>,
    /// environment variable holding the bearer token
    pub token_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatesConfig {
    pub vanilla: String,
    pub t2i: String,
    pub i2t: String,
    /// robustness sweep candidates; empty means every registered template of the role
    pub t2i_candidates: Vec<String>,
    pub i2t_candidates: Vec<String>,
}

impl Default for TemplatesConfig {
    fn default() -> Self {
        TemplatesConfig {
            vanilla: DEFAULT_VANILLA_ID.into(),
            t2i: DEFAULT_T2I_ID.into(),
            i2t: DEFAULT_I2T_ID.into(),
            t2i_candidates: Vec::new(),
            i2t_candidates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: Paths,
    /// goals sampled per corpus file
    pub sample_size: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub cache_mode: CacheMode,
    /// defaults to `{out_dir}/cache`
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates: TemplatesConfig,
    #[serde(default)]
    pub metrics: MetricToggles,
    pub out_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_image_size")]
    pub image_size: (u32, u32),
    #[serde(default)]
    pub params: GenerationParams,
    /// alignment probes per corpus file for the robustness sweep
    #[serde(default = "default_probes")]
    pub robustness_samples: usize,
}

fn default_probes() -> usize {
    20
}

impl ExperimentConfig {
    /// Parses TOML. Relative paths resolve against `base` (the config file's directory).
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, RunnerError> {
        let mut c: ExperimentConfig = toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))?;
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        c.corpus = match &c.corpus {
            Paths::One(p) => Paths::One(abs(p)),
            Paths::Many(v) => Paths::Many(v.iter().map(|p| abs(p)).collect()),
        };
        c.out_dir = abs(&c.out_dir);
        c.cache_dir = c.cache_dir.as_deref().map(abs);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Minimal offline configuration, mostly for tests.
    pub fn mock(corpus: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, methods: Vec<Method>, sample_size: usize) -> Self {
        ExperimentConfig {
            corpus: Paths::One(corpus.into()),
            sample_size,
            seed: 0,
            methods,
            backends: BackendsConfig::default(),
            cache_mode: CacheMode::Replay,
            cache_dir: None,
            templates: TemplatesConfig::default(),
            metrics: MetricToggles::default(),
            out_dir: out_dir.into(),
            workers: DEFAULT_WORKERS,
            max_steps: DEFAULT_MAX_STEPS,
            image_size: DEFAULT_IMAGE_SIZE,
            params: GenerationParams::default(),
            robustness_samples: default_probes(),
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Config(m));
        if self.methods.is_empty() {
            return bad("methods must list at least one method".into());
        }
        if self.corpus.to_vec().is_empty() {
            return bad("corpus must name at least one file".into());
        }
        if self.sample_size == 0 {
            return bad("sample_size must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        self.template_set()?;
        for id in self.templates.t2i_candidates.iter().chain(&self.templates.i2t_candidates) {
            if templates::lookup(id).is_none() {
                return bad(format!("unknown template `{id}`"));
            }
        }
        if self.backends.kind == BackendKind::Remote {
            let b = &self.backends;
            for (name, v) in [("text_url", &b.text_url), ("text_model", &b.text_model), ("image_url", &b.image_url), ("caption_url", &b.caption_url), ("embed_url", &b.embed_url)] {
                if v.is_none() {
                    return bad(format!("remote backends need backends.{name}"));
                }
            }
        }
        Ok(())
    }

    pub fn template_set(&self) -> Result<TemplateSet, RunnerError> {
        TemplateSet::from_ids(&self.templates.vanilla, &self.templates.t2i, &self.templates.i2t).map_err(RunnerError::Config)
    }

    pub fn candidates(&self, role: TemplateRole) -> Vec<PromptTemplate> {
        let ids = match role {
            TemplateRole::T2iBridge => &self.templates.t2i_candidates,
            TemplateRole::I2tBridge => &self.templates.i2t_candidates,
            TemplateRole::Vanilla => return templates::by_role(role),
        };
        if ids.is_empty() {
            templates::by_role(role)
        } else {
            ids.iter().filter_map(|id| templates::lookup(id)).collect()
        }
    }

    pub fn pipeline_config(&self, mode: Method) -> Result<PipelineConfig, RunnerError> {
        Ok(PipelineConfig {
            templates: self.template_set()?,
            mode,
            image_size: self.image_size,
            params: self.params.clone(),
            max_steps: self.max_steps,
            stop_marker: crate::pipeline::DEFAULT_STOP_MARKER.to_string(),
        })
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn wmd_options(&self) -> WmdOptions {
        WmdOptions::default()
    }

    /// Backend suite writing images under `out_dir` and routed through the replay cache.
    pub fn build_backends(&self) -> Result<BackendSuite, RunnerError> {
        let store = Arc::new(ImageStore::new(&self.out_dir).map_err(|e| RunnerError::Io(e.to_string()))?);
        let base = match self.backends.kind {
            BackendKind::Mock => BackendSuite::mock(store, self.backends.seed.unwrap_or(self.seed)),
            BackendKind::Remote => {
                let b = &self.backends;
                let token = b.token_env.as_deref().and_then(|k| std::env::var(k).ok());
                let url = |v: &Option<String>| v.clone().unwrap_or_default();
                let embed = Arc::new(HttpEmbedder::new(&url(&b.embed_url), token.clone(), store.clone()));
                BackendSuite::new(
                    Arc::new(OpenAiTextGenerator::new(
                        &url(&b.text_url),
                        b.text_model.clone().unwrap_or_default(),
                        token.clone(),
                    )),
                    Arc::new(HttpImageGenerator::new(&url(&b.image_url), token.clone(), store.clone())),
                    Arc::new(HttpCaptioner::new(&url(&b.caption_url), token, store)),
                    embed.clone(),
                    embed.clone(),
                    embed,
                )
            }
        };
        let cache = ReplayCache::new(self.cache_dir(), self.cache_mode).map_err(|e| RunnerError::Io(e.to_string()))?;
        Ok(base.with_replay(Arc::new(cache)))
    }
}
