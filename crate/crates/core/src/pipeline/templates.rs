//! Built-in trigger sentences.

use crate::plan::{PromptTemplate, TemplateRole};

pub const VANILLA_TRIGGER: &str = "What's the step-by-step procedure of";
pub const T2I_TRIGGER: &str = "What do I need to draw in the picture to describe the above text?";
pub const I2T_TRIGGER: &str = "Rewrite the textual instruction with the knowledge from visualized instruction pair-wisely.";

pub const DEFAULT_VANILLA_ID: &str = "vanilla-step-by-step";
pub const DEFAULT_T2I_ID: &str = "t2i-what-to-draw";
pub const DEFAULT_I2T_ID: &str = "i2t-rewrite-pairwise";

const ENTRIES: &[(&str, TemplateRole, &str, bool)] = &[
    (DEFAULT_VANILLA_ID, TemplateRole::Vanilla, VANILLA_TRIGGER, false),
    (DEFAULT_T2I_ID, TemplateRole::T2iBridge, T2I_TRIGGER, false),
    ("t2i-what-do-you-see", TemplateRole::T2iBridge, "What do you see in the figure?", false),
    (
        "t2i-picture-should-have",
        TemplateRole::T2iBridge,
        "Describe what the picture corresponding to the text should have.",
        false,
    ),
    (
        "t2i-visualize-idea",
        TemplateRole::T2iBridge,
        "Let's think about what we need to visualize to present the above idea.",
        false,
    ),
    ("t2i-misleading-irrelevant", TemplateRole::T2iBridge, "Describe something irrelevant to the above text.", true),
    ("t2i-misleading-usually-draw", TemplateRole::T2iBridge, "What do you usually draw?", true),
    (DEFAULT_I2T_ID, TemplateRole::I2tBridge, I2T_TRIGGER, false),
    (
        "i2t-revise-by-paired-captions",
        TemplateRole::I2tBridge,
        "Based on the visual caption, can you revise the step-by-step procedure according to the paired captions?",
        false,
    ),
    (
        "i2t-revise-by-imagination",
        TemplateRole::I2tBridge,
        "Revise each step according to the visual imagination.",
        false,
    ),
    ("i2t-revise-using-captions", TemplateRole::I2tBridge, "Let's revise the procedure using the captions.", false),
    ("i2t-misleading-disobey", TemplateRole::I2tBridge, "What's the procedure that disobey the captions?", true),
    (
        "i2t-misleading-irrelevant",
        TemplateRole::I2tBridge,
        "Provide an interesting procedure to be irrelevant with the captions.",
        true,
    ),
];

/// Every built-in template, in registry order.
pub fn registry() -> Vec<PromptTemplate> {
    ENTRIES
        .iter()
        .map(|&(id, role, body, misleading)| {
            let t = PromptTemplate::new(id, role, body).expect("built-in bodies are non-empty");
            if misleading {
                t.misleading()
            } else {
                t
            }
        })
        .collect()
}

pub fn lookup(id: &str) -> Option<PromptTemplate> {
    registry().into_iter().find(|t| t.id == id)
}

pub fn by_role(role: TemplateRole) -> Vec<PromptTemplate> {
    registry().into_iter().filter(|t| t.role() == role).collect()
}

/// One template per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    vanilla: PromptTemplate,
    t2i: PromptTemplate,
    i2t: PromptTemplate,
}

impl TemplateSet {
    pub fn new(vanilla: PromptTemplate, t2i: PromptTemplate, i2t: PromptTemplate) -> Result<Self, String> {
        for (t, role) in [(&vanilla, TemplateRole::Vanilla), (&t2i, TemplateRole::T2iBridge), (&i2t, TemplateRole::I2tBridge)]
        {
            if t.role() != role {
                return Err(format!("template `{}` has role {}, expected {}", t.id, t.role(), role));
            }
        }
        Ok(TemplateSet { vanilla, t2i, i2t })
    }

    pub fn from_ids(vanilla: &str, t2i: &str, i2t: &str) -> Result<Self, String> {
        let get = |id: &str| lookup(id).ok_or_else(|| format!("unknown template `{id}`"));
        TemplateSet::new(get(vanilla)?, get(t2i)?, get(i2t)?)
    }

    pub fn vanilla(&self) -> &PromptTemplate {
        &self.vanilla
    }

    pub fn t2i(&self) -> &PromptTemplate {
        &self.t2i
    }

    pub fn i2t(&self) -> &PromptTemplate {
        &self.i2t
    }

    pub fn with_t2i(mut self, t: PromptTemplate) -> Result<Self, String> {
        if t.role() != TemplateRole::T2iBridge {
            return Err(format!("template `{}` is not a t2i_bridge template", t.id));
        }
        self.t2i = t;
        Ok(self)
    }

    pub fn with_i2t(mut self, t: PromptTemplate) -> Result<Self, String> {
        if t.role() != TemplateRole::I2tBridge {
            return Err(format!("template `{}` is not an i2t_bridge template", t.id));
        }
        self.i2t = t;
        Ok(self)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::from_ids(DEFAULT_VANILLA_ID, DEFAULT_T2I_ID, DEFAULT_I2T_ID).expect("defaults are registered")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique() {
        let reg = registry();
        let mut ids: Vec<&str> = reg.iter().map(|t| t.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), reg.len());
    }

    #[test]
    fn two_misleading_per_bridge() {
        for role in [TemplateRole::T2iBridge, TemplateRole::I2tBridge] {
            let ts = by_role(role);
            assert_eq!(ts.len(), 6);
            assert_eq!(ts.iter().filter(|t| t.misleading).count(), 2);
        }
    }

    #[test]
    fn defaults_are_the_selected_triggers() {
        let set = TemplateSet::default();
        assert_eq!(set.vanilla().body, "What's the step-by-step procedure of");
        assert_eq!(set.t2i().body, "What do I need to draw in the picture to describe the above text?");
        assert_eq!(
            set.i2t().body,
            "Rewrite the textual instruction with the knowledge from visualized instruction pair-wisely."
        );
    }

    #[test]
    fn role_mismatch_rejected() {
        assert!(TemplateSet::from_ids(DEFAULT_T2I_ID, DEFAULT_T2I_ID, DEFAULT_I2T_ID).is_err());
        assert!(TemplateSet::default().with_i2t(lookup(DEFAULT_T2I_ID).unwrap()).is_err());
    }
}
