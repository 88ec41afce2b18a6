use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_SLOT: &str = "[CLASS]";
pub const MODALITY_SLOT: &str = "[MODALITY]";

const BUILTIN_TEMPLATES: &str = include_str!("../../assets/templates.json");

/// Where the class name goes relative to the context words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassPosition {
    Front,
    Mid,
    #[default]
    End,
}

impl std::str::FromStr for ClassPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(Self::Front),
            "mid" => Ok(Self::Mid),
            "end" => Ok(Self::End),
            other => Err(Error::Config(format!("unknown class position `{other}`"))),
        }
    }
}

/// What a rendered prompt word is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// The `i`-th context word (a learnable slot).
    Context(usize),
    Class,
    Filler,
}

/// A clinical prompt template and its context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(rename = "dataset")]
    pub dataset_name: String,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    pub nctx: usize,
    #[serde(default)]
    pub class_position: ClassPosition,
}

impl PromptSpec {
    /// Shipped templates for the eleven clinical datasets plus the synthetic benchmark.
    pub fn builtin() -> Vec<PromptSpec> {
        serde_json::from_str(BUILTIN_TEMPLATES).expect("shipped templates parse")
    }

    pub fn builtin_for(dataset: &str) -> Option<PromptSpec> {
        Self::builtin()
            .into_iter()
            .find(|s| s.dataset_name.eq_ignore_ascii_case(dataset))
    }

    pub fn from_json(text: &str) -> Result<Vec<PromptSpec>> {
        let specs: Vec<PromptSpec> = serde_json::from_str(text)
            .map_err(|e| Error::Template(format!("template file: {e}")))?;
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }

    /// Template with `[MODALITY]` substituted.
    pub fn resolved_template(&self) -> Result<String> {
        let has_slot = self.template.contains(MODALITY_SLOT);
        match (&self.modality, has_slot) {
            (Some(m), true) => Ok(self.template.replace(MODALITY_SLOT, m)),
            (None, true) => Err(Error::Template(format!(
                "`{}` uses {MODALITY_SLOT} but no modality is set",
                self.template
            ))),
            (_, false) => Ok(self.template.clone()),
        }
    }

    /// Context words (the words before `[CLASS]`) and the words after it.
    /// Any punctuation glued to the class slot is returned separately.
    fn parts(&self) -> Result<(Vec<String>, (String, String), Vec<String>)> {
        let t = self.resolved_template()?;
        if t.matches(CLASS_SLOT).count() != 1 {
            return Err(Error::Template(format!(
                "`{}` must contain {CLASS_SLOT} exactly once",
                self.template
            )));
        }
        let words: Vec<&str> = t.split_whitespace().collect();
        let at = words
            .iter()
            .position(|w| w.contains(CLASS_SLOT))
            .expect("slot present");
        let (pre, post) = words[at].split_once(CLASS_SLOT).expect("slot present");
        let ctx = words[..at].iter().map(|w| w.to_string()).collect();
        let rest = words[at + 1..].iter().map(|w| w.to_string()).collect();
        Ok((ctx, (pre.to_string(), post.to_string()), rest))
    }

    /// Context words in template order.
    pub fn context_words(&self) -> Result<Vec<String>> {
        Ok(self.parts()?.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (ctx, _, _) = self.parts()?;
        if ctx.len() != self.nctx {
            return Err(Error::Template(format!(
                "{}: nctx is {} but {} words precede {CLASS_SLOT}",
                self.dataset_name,
                self.nctx,
                ctx.len()
            )));
        }
        let rendered = self.resolved_template()?.replace(CLASS_SLOT, "");
        if rendered.contains('[') && rendered.contains(']') {
            return Err(Error::Template(format!(
                "unresolved placeholder in `{}`",
                self.template
            )));
        }
        Ok(())
    }

    /// Rendered words with their roles, honoring `class_position`.
    pub fn layout(&self, class_name: &str) -> Result<Vec<(String, Role)>> {
        self.validate()?;
        let (ctx, (pre, post), rest) = self.parts()?;
        let class_words: Vec<String> = class_name.split_whitespace().map(str::to_string).collect();
        if class_words.is_empty() {
            return Err(Error::Template("empty class name".into()));
        }
        let mut ctx: Vec<(String, Role)> = ctx
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, Role::Context(i)))
            .collect();
        let mut rest: Vec<(String, Role)> = rest.into_iter().map(|w| (w, Role::Filler)).collect();
        let mut class: Vec<(String, Role)> =
            class_words.into_iter().map(|w| (w, Role::Class)).collect();

        if self.class_position == ClassPosition::End {
            class.first_mut().expect("nonempty").0.insert_str(0, &pre);
            class.last_mut().expect("nonempty").0.push_str(&post);
            return Ok(ctx.into_iter().chain(class).chain(rest).collect());
        }

        // The slot moves; punctuation it carried stays with the neighbouring word.
        let residue = format!("{pre}{post}");
        if !residue.is_empty() {
            if let Some(last) = ctx.last_mut() {
                last.0.push_str(&residue);
            } else if let Some(first) = rest.first_mut() {
                first.0.insert_str(0, &residue);
            }
        }
        let split = match self.class_position {
            ClassPosition::Front => 0,
            ClassPosition::Mid => self.nctx.div_ceil(2),
            ClassPosition::End => unreachable!(),
        };
        let tail = ctx.split_off(split);
        Ok(ctx.into_iter().chain(class).chain(tail).chain(rest).collect())
    }
}

/// Renders the prompt text for one class.
pub fn build_prompt(spec: &PromptSpec, class_name: &str) -> Result<String> {
    if spec.class_position == ClassPosition::End {
        spec.validate()?;
        // Substitution in place keeps the template's exact spacing.
        return Ok(spec.resolved_template()?.replace(CLASS_SLOT, class_name));
    }
    let words: Vec<String> = spec.layout(class_name)?.into_iter().map(|(w, _)| w).collect();
    Ok(words.join(" "))
}
