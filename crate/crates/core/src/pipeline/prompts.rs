//! Prompt assembly and LLM output parsing.

use std::collections::BTreeMap;

use super::PipelineError;
use crate::plan::{Goal, PromptTemplate, TemplateRole};

/// Slot markers that must never survive rendering.
pub const SLOT_MARKERS: &[&str] = &["[TEMPLATE]", "[GOAL]", "[STEP]", "[T2I-B]", "[INITIAL]", "[CAPTION]", "[I2T-B]"];

/// Instruction appended to stepwise prompts; `{k}` is the requested step number.
pub const STEPWISE_INSTRUCTION: &str = "What is step {k}? Reply with that step only, or DONE if the procedure is complete.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub role: TemplateRole,
    pub text: String,
    pub slots: BTreeMap<String, String>,
}

fn check_role(template: &PromptTemplate, role: TemplateRole) -> Result<(), PipelineError> {
    if template.role() != role {
        return Err(PipelineError::WrongRole { template: template.id.clone(), expected: role, actual: template.role() });
    }
    Ok(())
}

fn slots<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// `{body}\nTask: {title}?`
pub fn render_vanilla_prompt(goal: &Goal, template: &PromptTemplate) -> Result<RenderedPrompt, PipelineError> {
    check_role(template, TemplateRole::Vanilla)?;
    if goal.title.trim().is_empty() {
        return Err(PipelineError::EmptyInput("goal title"));
    }
    Ok(RenderedPrompt {
        role: TemplateRole::Vanilla,
        text: format!("{}\nTask: {}?", template.body, goal.title),
        slots: slots([("TEMPLATE", template.body.as_str()), ("GOAL", goal.title.as_str())]),
    })
}

/// `{step}\n{body}`
pub fn render_imagination_prompt(step_text: &str, template: &PromptTemplate) -> Result<RenderedPrompt, PipelineError> {
    check_role(template, TemplateRole::T2iBridge)?;
    if step_text.trim().is_empty() {
        return Err(PipelineError::EmptyInput("step text"));
    }
    Ok(RenderedPrompt {
        role: TemplateRole::T2iBridge,
        text: format!("{step_text}\n{}", template.body),
        slots: slots([("STEP", step_text), ("T2I-B", template.body.as_str())]),
    })
}

pub(crate) fn numbered(items: &[String]) -> String {
    items.iter().enumerate().map(|(i, s)| format!("Step {}: {s}", i + 1)).collect::<Vec<_>>().join("\n")
}

/// `Step-by-step Procedure:\n{steps}\nCaptions:\n{captions}\n{body}`, both
/// lists numbered `Step k:`.
pub fn render_revision_prompt(
    initial_steps: &[String],
    captions: &[String],
    template: &PromptTemplate,
) -> Result<RenderedPrompt, PipelineError> {
    check_role(template, TemplateRole::I2tBridge)?;
    if initial_steps.len() != captions.len() {
        return Err(PipelineError::ArityMismatch { steps: initial_steps.len(), captions: captions.len() });
    }
    if initial_steps.is_empty() {
        return Err(PipelineError::EmptyInput("initial steps"));
    }
    let initial = numbered(initial_steps);
    let caption_list = numbered(captions);
    Ok(RenderedPrompt {
        role: TemplateRole::I2tBridge,
        text: format!("Step-by-step Procedure:\n{initial}\nCaptions:\n{caption_list}\n{}", template.body),
        slots: slots([
            ("INITIAL", initial.as_str()),
            ("CAPTION", caption_list.as_str()),
            ("I2T-B", template.body.as_str()),
        ]),
    })
}

/// Prompt for step `k` of a stepwise plan: the vanilla prompt, the accepted
/// history, then the next-step instruction.
pub fn render_stepwise_prompt(
    goal: &Goal,
    template: &PromptTemplate,
    history: &[String],
) -> Result<RenderedPrompt, PipelineError> {
    let base = render_vanilla_prompt(goal, template)?;
    let k = history.len() + 1;
    let mut text = base.text;
    if !history.is_empty() {
        text.push('\n');
        text.push_str(&numbered(history));
    }
    text.push('\n');
    text.push_str(&STEPWISE_INSTRUCTION.replace("{k}", &k.to_string()));
    let mut slots = base.slots;
    slots.insert("HISTORY".into(), numbered(history));
    Ok(RenderedPrompt { role: TemplateRole::Vanilla, text, slots })
}

/// Strips a `Step k:` / `k.` / `k)` prefix, returning the remainder.
fn strip_number(line: &str) -> Option<&str> {
    let rest = match line.get(..4) {
        Some(head) if head.eq_ignore_ascii_case("step") => line[4..].trim_start(),
        _ => line,
    };
    let digits = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let after = &rest[digits..];
    let after = after.strip_prefix([':', '.', ')']).or_else(|| (rest.len() != line.len()).then_some(after))?;
    Some(after.trim())
}

/// Parses a numbered step list.
///
/// Accepts `Step k:` and `k.` prefixes. Unnumbered lines after a numbered one
/// continue that step; lines before the first numbered one are dropped.
pub fn parse_step_list(text: &str) -> Result<Vec<String>, PipelineError> {
    let mut steps: Vec<String> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match strip_number(line) {
            Some(rest) => steps.push(rest.to_string()),
            None => {
                if let Some(last) = steps.last_mut() {
                    if !last.is_empty() {
                        last.push(' ');
                    }
                    last.push_str(line);
                }
            }
        }
    }
    steps.retain(|s| !s.is_empty());
    if steps.is_empty() {
        return Err(PipelineError::UnparseablePlan { raw: text.to_string() });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::templates::TemplateSet;

    fn set() -> TemplateSet {
        TemplateSet::default()
    }

    #[test]
    fn vanilla_prompt_shape() {
        let goal = Goal::new("1", "How to make a candy bouquet", "wikiplan");
        let p = render_vanilla_prompt(&goal, set().vanilla()).unwrap();
        assert_eq!(p.text, "What's the step-by-step procedure of\nTask: How to make a candy bouquet?");
        assert_eq!(p.slots["GOAL"], "How to make a candy bouquet");
        assert_eq!(p.slots["TEMPLATE"], "What's the step-by-step procedure of");
    }

    #[test]
    fn vanilla_needs_title_and_role() {
        let goal = Goal::new("1", "  ", "d");
        assert!(matches!(render_vanilla_prompt(&goal, set().vanilla()), Err(PipelineError::EmptyInput(_))));
        let goal = Goal::new("1", "x", "d");
        assert!(matches!(render_vanilla_prompt(&goal, set().t2i()), Err(PipelineError::WrongRole { .. })));
    }

    #[test]
    fn imagination_prompt_shape() {
        let p = render_imagination_prompt("put down the wine glass", set().t2i()).unwrap();
        assert_eq!(p.text, "put down the wine glass\nWhat do I need to draw in the picture to describe the above text?");
        assert!(render_imagination_prompt("", set().t2i()).is_err());
    }

    #[test]
    fn misleading_templates_render_normally() {
        let t = crate::pipeline::templates::lookup("t2i-misleading-usually-draw").unwrap();
        assert!(t.misleading);
        let p = render_imagination_prompt("fold the paper", &t).unwrap();
        assert_eq!(p.text, "fold the paper\nWhat do you usually draw?");
    }

    #[test]
    fn revision_arity_and_numbering() {
        let steps = vec!["a".to_string(), "b".to_string()];
        let caps = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        assert!(matches!(
            render_revision_prompt(&steps, &caps, set().i2t()),
            Err(PipelineError::ArityMismatch { steps: 2, captions: 3 })
        ));
        let p = render_revision_prompt(&steps, &caps[..2], set().i2t()).unwrap();
        assert!(p.text.contains("Step 1: a\nStep 2: b\nCaptions:\nStep 1: x\nStep 2: y\n"));
    }

    #[test]
    fn parse_step_prefix() {
        assert_eq!(parse_step_list("Step 1: A\nStep 2: B").unwrap(), vec!["A", "B"]);
    }

    #[test]
    fn parse_number_dot() {
        assert_eq!(parse_step_list("1. A\n2. B\n3. C").unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn parse_rejects_unnumbered() {
        match parse_step_list("no numbering at all") {
            Err(PipelineError::UnparseablePlan { raw }) => assert_eq!(raw, "no numbering at all"),
            other => panic!("{other:?}"),
        }
        assert!(parse_step_list("").is_err());
    }

    #[test]
    fn parse_tolerates_noise() {
        let text = "Sure! Here you go:\n\nStep 1:   Gather flowers  \n  with long stems\n\n2) Trim them\nSTEP 3. Arrange\n";
        assert_eq!(parse_step_list(text).unwrap(), vec!["Gather flowers with long stems", "Trim them", "Arrange"]);
    }

    #[test]
    fn parse_bare_digits_are_not_steps() {
        // a year at the start of a sentence is not a list item
        assert!(parse_step_list("2023 was a year").is_err());
        assert_eq!(parse_step_list("Step 4 Mix").unwrap(), vec!["Mix"]);
    }

    #[test]
    fn stepwise_prompt_embeds_history() {
        let goal = Goal::new("1", "How to brew tea", "d");
        let hist = vec!["Boil water".to_string(), "Add leaves".to_string()];
        let p = render_stepwise_prompt(&goal, set().vanilla(), &hist).unwrap();
        assert_eq!(
            p.text,
            "What's the step-by-step procedure of\nTask: How to brew tea?\nStep 1: Boil water\nStep 2: Add leaves\n\
             What is step 3? Reply with that step only, or DONE if the procedure is complete."
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rendered_prompts_keep_inputs_verbatim(
                title in "[A-Za-z][A-Za-z ,']{0,30}",
                steps in prop::collection::vec("[A-Za-z][a-z ,]{0,20}", 1..5),
            ) {
                let set = TemplateSet::default();
                let goal = Goal::new("g", title.clone(), "d");
                let captions: Vec<String> = steps.iter().map(|s| format!("a picture of {s}")).collect();
                let mut rendered = vec![render_vanilla_prompt(&goal, set.vanilla()).unwrap()];
                for s in &steps {
                    rendered.push(render_imagination_prompt(s, set.t2i()).unwrap());
                }
                rendered.push(render_revision_prompt(&steps, &captions, set.i2t()).unwrap());
                for p in &rendered {
                    for v in p.slots.values() {
                        prop_assert!(p.text.contains(v.as_str()));
                    }
                    for m in SLOT_MARKERS {
                        prop_assert!(!p.text.contains(m));
                    }
                }
                prop_assert!(rendered[0].text.contains(set.vanilla().body.as_str()));
                prop_assert!(rendered.last().unwrap().text.contains(set.i2t().body.as_str()));
                for s in &steps {
                    prop_assert!(rendered.last().unwrap().text.contains(s.as_str()));
                }
            }

            #[test]
            fn numbered_lists_round_trip(steps in prop::collection::vec("[A-Za-z][a-z ]{0,20}[a-z]", 1..8)) {
                prop_assert_eq!(parse_step_list(&numbered(&steps)).unwrap(), steps);
            }
        }
    }
}
