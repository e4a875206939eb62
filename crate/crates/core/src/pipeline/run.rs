use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::prompts::{
    parse_step_list, render_imagination_prompt, render_revision_prompt, render_stepwise_prompt, render_vanilla_prompt,
};
use super::{PipelineConfig, PipelineError, Stage};
use crate::backends::{BackendError, BackendSuite, FinishReason, CAPTION_QUESTION};
use crate::plan::{validate_plan, Goal, ImageHandle, Method, MultimodalPlan, PlanStep, ReferencePlan};

/// A gold plan together with the directory its image locators are relative to.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub plan: &'a ReferencePlan,
    pub assets_root: &'a Path,
}

/// `{out_dir}/{dataset}/{goal_id}/{method}.plan`
pub fn plan_path(out_dir: &Path, goal: &Goal, method: Method) -> PathBuf {
    let clean = |s: &str| s.replace(['/', '\\'], "_");
    out_dir.join(clean(&goal.dataset)).join(clean(&goal.id)).join(format!("{method}.plan"))
}

fn complete(
    backends: &BackendSuite,
    prompt: &str,
    config: &PipelineConfig,
    stage: Stage,
    step: Option<usize>,
) -> Result<String, PipelineError> {
    let c = backends
        .text_complete(prompt, &config.params)
        .map_err(|source| PipelineError::Backend { stage, step, source })?;
    if c.finish_reason == FinishReason::Error {
        return Err(PipelineError::Backend {
            stage,
            step,
            source: BackendError::Malformed("backend returned no text".into()),
        });
    }
    Ok(c.text)
}

fn bridge_step(
    text: &str,
    step: usize,
    backends: &BackendSuite,
    config: &PipelineConfig,
    bridged: bool,
) -> Result<(String, ImageHandle), PipelineError> {
    let prompt = if bridged {
        let rendered = render_imagination_prompt(text, config.templates.t2i())?;
        complete(backends, &rendered.text, config, Stage::Imagination, Some(step))?.trim().to_string()
    } else {
        text.to_string()
    };
    let (w, h) = config.image_size;
    let image = backends.image_generate(&prompt, w, h).map_err(|source| PipelineError::Backend {
        stage: Stage::ImageGeneration,
        step: Some(step),
        source,
    })?;
    Ok((prompt, image))
}

fn image_plan(
    steps: &[String],
    backends: &BackendSuite,
    config: &PipelineConfig,
    bridged: bool,
) -> Result<Vec<(String, ImageHandle)>, PipelineError> {
    if steps.is_empty() {
        return Err(PipelineError::EmptyInput("text plan"));
    }
    let results: Vec<_> =
        steps.par_iter().enumerate().map(|(i, t)| bridge_step(t, i + 1, backends, config, bridged)).collect();
    // first failure in step order, independent of scheduling
    results.into_iter().collect()
}

/// Imagination prompt and image for every step, in input order. With the
/// text-to-image bridge disabled the raw step text is the image prompt.
pub fn generate_image_plan(
    text_steps: &[String],
    backends: &BackendSuite,
    config: &PipelineConfig,
) -> Result<Vec<(String, ImageHandle)>, PipelineError> {
    image_plan(text_steps, backends, config, config.mode.uses_t2i_bridge())
}

pub fn verbalize_images(images: &[ImageHandle], backends: &BackendSuite) -> Result<Vec<String>, PipelineError> {
    let results: Vec<_> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            backends.caption(img, CAPTION_QUESTION).map_err(|source| PipelineError::Backend {
                stage: Stage::Verbalization,
                step: Some(i + 1),
                source,
            })
        })
        .collect();
    results.into_iter().collect()
}

fn finish(plan: MultimodalPlan) -> Result<MultimodalPlan, PipelineError> {
    let violations = validate_plan(&plan);
    if !violations.is_empty() {
        let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(PipelineError::InvalidPlan(joined.join("; ")));
    }
    Ok(plan)
}

fn vanilla_plan(goal: &Goal, backends: &BackendSuite, config: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let prompt = render_vanilla_prompt(goal, config.templates.vanilla())?;
    parse_step_list(&complete(backends, &prompt.text, config, Stage::Vanilla, None)?)
}

/// Procedure-level run, including the two bridge ablations.
///
/// Revised steps are paired with images by index; when the revision changes
/// the step count the plan is cut to the shorter side and flagged with
/// `pairing_adjusted`.
pub fn run_tip(goal: &Goal, backends: &BackendSuite, config: &PipelineConfig) -> Result<MultimodalPlan, PipelineError> {
    if !matches!(config.mode, Method::TipProcedure | Method::AblationNoT2ib | Method::AblationNoI2tb) {
        return Err(PipelineError::WrongMode { method: config.mode, entry: "run_tip" });
    }
    let vanilla = vanilla_plan(goal, backends, config)?;
    let (prompts, images): (Vec<String>, Vec<ImageHandle>) =
        generate_image_plan(&vanilla, backends, config)?.into_iter().unzip();
    let captions = verbalize_images(&images, backends)?;

    let texts = if config.mode == Method::AblationNoI2tb {
        vanilla.clone()
    } else {
        let prompt = render_revision_prompt(&vanilla, &captions, config.templates.i2t())?;
        parse_step_list(&complete(backends, &prompt.text, config, Stage::Revision, None)?)?
    };
    let pairing_adjusted = texts.len() != images.len();
    let steps = texts
        .into_iter()
        .zip(images)
        .zip(prompts.into_iter().zip(captions))
        .enumerate()
        .map(|(i, ((text, image), (prompt, caption)))| PlanStep {
            index: i + 1,
            text,
            image: Some(image),
            imagination_prompt: Some(prompt),
            caption: Some(caption),
        })
        .collect();

    finish(MultimodalPlan {
        goal: goal.clone(),
        method: config.mode,
        vanilla_text: vanilla,
        steps,
        pairing_adjusted,
        backend_fingerprint: backends.fingerprint(),
    })
}

/// The next step from a stepwise completion, or `None` on the stop marker.
fn next_step(raw: &str, stop_marker: &str) -> Option<String> {
    let candidate = match parse_step_list(raw) {
        Ok(steps) => steps.into_iter().next()?,
        Err(_) => raw.lines().map(str::trim).find(|l| !l.is_empty())?.to_string(),
    };
    let bare = candidate.trim().trim_end_matches(['.', '!']);
    if bare.eq_ignore_ascii_case(stop_marker) || candidate.starts_with(stop_marker) {
        return None;
    }
    Some(candidate)
}

/// Step-based run: each step is requested separately given the accepted
/// history, bridged to an image, captioned, and revised together with its
/// prefix. Stops on the stop marker or at `config.max_steps`.
pub fn run_tip_stepwise(
    goal: &Goal,
    backends: &BackendSuite,
    config: &PipelineConfig,
) -> Result<MultimodalPlan, PipelineError> {
    if config.mode != Method::TipStepwise {
        return Err(PipelineError::WrongMode { method: config.mode, entry: "run_tip_stepwise" });
    }
    let mut accepted: Vec<String> = Vec::new();
    let mut captions: Vec<String> = Vec::new();
    let mut steps: Vec<PlanStep> = Vec::new();
    let mut pairing_adjusted = false;

    while accepted.len() < config.max_steps {
        let k = accepted.len() + 1;
        let prompt = render_stepwise_prompt(goal, config.templates.vanilla(), &accepted)?;
        let raw = complete(backends, &prompt.text, config, Stage::Stepwise, Some(k))?;
        let Some(text) = next_step(&raw, &config.stop_marker) else {
            if accepted.is_empty() {
                return Err(PipelineError::UnparseablePlan { raw });
            }
            break;
        };
        let (imagination, image) = bridge_step(&text, k, backends, config, true)?;
        let caption = backends.caption(&image, CAPTION_QUESTION).map_err(|source| PipelineError::Backend {
            stage: Stage::Verbalization,
            step: Some(k),
            source,
        })?;
        accepted.push(text);
        captions.push(caption.clone());

        let revision = render_revision_prompt(&accepted, &captions, config.templates.i2t())?;
        let revised = parse_step_list(&complete(backends, &revision.text, config, Stage::Revision, Some(k))?)?;
        if revised.len() != k {
            pairing_adjusted = true;
        }
        let revised_text = revised.get(k - 1).or(revised.last()).cloned().expect("parse yields at least one step");
        steps.push(PlanStep {
            index: k,
            text: revised_text,
            image: Some(image),
            imagination_prompt: Some(imagination),
            caption: Some(caption),
        });
    }

    finish(MultimodalPlan {
        goal: goal.clone(),
        method: Method::TipStepwise,
        vanilla_text: accepted,
        steps,
        pairing_adjusted,
        backend_fingerprint: backends.fingerprint(),
    })
}

/// Unbridged baselines: text and images produced independently, or one side
/// taken from the reference plan.
pub fn run_baseline(
    goal: &Goal,
    reference: Option<Reference<'_>>,
    backends: &BackendSuite,
    config: &PipelineConfig,
) -> Result<MultimodalPlan, PipelineError> {
    let method = config.mode;
    let (vanilla_text, steps) = match method {
        Method::BaselineNoBridge | Method::BaselineTextRef => {
            let texts = if method == Method::BaselineNoBridge {
                vanilla_plan(goal, backends, config)?
            } else {
                let r = reference.ok_or(PipelineError::MissingReference(method))?;
                r.plan.steps.iter().map(|s| s.text.clone()).collect()
            };
            let pairs = image_plan(&texts, backends, config, false)?;
            let steps = texts
                .iter()
                .zip(pairs)
                .enumerate()
                .map(|(i, (text, (prompt, image)))| PlanStep {
                    index: i + 1,
                    text: text.clone(),
                    image: Some(image),
                    imagination_prompt: Some(prompt),
                    caption: None,
                })
                .collect();
            (texts, steps)
        }
        Method::BaselineImageRef => {
            let r = reference.ok_or(PipelineError::MissingReference(method))?;
            let images = r
                .plan
                .steps
                .iter()
                .filter_map(|s| s.image.as_ref())
                .enumerate()
                .map(|(i, img)| {
                    backends.store().import(&r.assets_root.join(&img.locator)).map_err(|source| {
                        PipelineError::Backend { stage: Stage::ImageGeneration, step: Some(i + 1), source }
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let captions = verbalize_images(&images, backends)?;
            let steps = images
                .into_iter()
                .zip(captions)
                .enumerate()
                .map(|(i, (image, caption))| PlanStep {
                    index: i + 1,
                    text: caption.clone(),
                    image: Some(image),
                    imagination_prompt: None,
                    caption: Some(caption),
                })
                .collect();
            (Vec::new(), steps)
        }
        other => return Err(PipelineError::WrongMode { method: other, entry: "run_baseline" }),
    };
    finish(MultimodalPlan {
        goal: goal.clone(),
        method,
        vanilla_text,
        steps,
        pairing_adjusted: false,
        backend_fingerprint: backends.fingerprint(),
    })
}

/// Runs whichever entry point `config.mode` selects.
pub fn run(
    goal: &Goal,
    reference: Option<Reference<'_>>,
    backends: &BackendSuite,
    config: &PipelineConfig,
) -> Result<MultimodalPlan, PipelineError> {
    match config.mode {
        Method::TipProcedure | Method::AblationNoT2ib | Method::AblationNoI2tb => run_tip(goal, backends, config),
        Method::TipStepwise => run_tip_stepwise(goal, backends, config),
        Method::BaselineNoBridge | Method::BaselineTextRef | Method::BaselineImageRef => {
            run_baseline(goal, reference, backends, config)
        }
    }
}
