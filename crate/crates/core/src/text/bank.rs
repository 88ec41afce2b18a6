use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::encode_texts;
use super::vocab::Tokenizer;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankClass {
    pub name: String,
    pub prompts: Vec<String>,
}

/// Per-class descriptive prompts, typically produced offline by a language model.
///
/// File schema: `{"classes":[{"name":"<string>","prompts":["<string>",...]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub classes: Vec<BankClass>,
}

impl PromptBank {
    pub fn get(&self, class: &str) -> Option<&BankClass> {
        self.classes.iter().find(|c| c.name == class)
    }

    /// Every dataset class needs a nonempty prompt list; `strict` also requires
    /// the same prompt count for every class.
    pub fn validate(&self, class_names: &[String], strict: bool) -> Result<()> {
        let mut count = None;
        for name in class_names {
            let entry = self
                .get(name)
                .ok_or_else(|| Error::Data(format!("prompt bank has no entry for class `{name}`")))?;
            if entry.prompts.is_empty() {
                return Err(Error::Data(format!("prompt bank lists no prompts for class `{name}`")));
            }
            if strict {
                match count {
                    None => count = Some(entry.prompts.len()),
                    Some(n) if n != entry.prompts.len() => {
                        return Err(Error::Data(format!(
                            "class `{name}` has {} prompts, expected {n}",
                            entry.prompts.len()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Keeps the first `n` prompts of every class.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            classes: self
                .classes
                .iter()
                .map(|c| BankClass {
                    name: c.name.clone(),
                    prompts: c.prompts.iter().take(n).cloned().collect(),
                })
                .collect(),
        }
    }

    /// `n` prompts per class drawn without replacement, kept in bank order.
    /// Classes with at most `n` prompts keep all of them.
    pub fn sampled(&self, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            classes: self
                .classes
                .iter()
                .map(|c| {
                    let mut idx = sample(&mut rng, c.prompts.len(), n.min(c.prompts.len())).into_vec();
                    idx.sort_unstable();
                    BankClass {
                        name: c.name.clone(),
                        prompts: idx.into_iter().map(|i| c.prompts[i].clone()).collect(),
                    }
                })
                .collect(),
        }
    }

    /// Restricts the bank to `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let classes = names
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("prompt bank has no entry for class `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { classes })
    }
}

/// Teacher (ensemble) embeddings for the classes in `class_names` order:
/// row `i` is the mean of the encoded prompts of class `i`.
pub fn embed_prompt_bank(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    bank: &PromptBank,
    class_names: &[String],
) -> Result<Tensor> {
    bank.validate(class_names, false)?;
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        let prompts: Vec<&str> = bank
            .get(name)
            .expect("validated")
            .prompts
            .iter()
            .map(String::as_str)
            .collect();
        let feats = encode_texts(params, tokenizer, &prompts)?;
        let (n, d) = feats.dims2();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(feats.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        rows.push(mean);
    }
    Tensor::from_rows(&rows)
}

/// Student and teacher class embeddings, rows in dataset class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    pub names: Vec<String>,
    pub student: Tensor,
    pub teacher: Tensor,
}

impl ClassBank {
    pub fn new(names: Vec<String>, student: Tensor, teacher: Tensor) -> Result<Self> {
        let k = names.len();
        if student.dims2().0 != k || teacher.dims2().0 != k {
            return Err(Error::Contract(format!(
                "{k} class names for {} student and {} teacher rows",
                student.dims2().0,
                teacher.dims2().0
            )));
        }
        if !student.is_finite() || !teacher.is_finite() {
            return Err(Error::Contract("class bank rows must be finite".into()));
        }
        Ok(Self {
            names,
            student,
            teacher,
        })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("unknown class `{name}`")))
    }
}
