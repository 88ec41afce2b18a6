use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::prompt::{PromptSpec, Role};
use super::vocab::{Tokenizer, Vocab, CLS_ID};
use crate::error::{Error, Result};
use crate::model::{block_forward, layer_norm, ModelParams, SinkInjection};
use crate::tensor::{Graph, Parameter, Tensor, Var};

/// Word-token ids plus, per position, the context slot that may replace it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub ids: Vec<usize>,
    pub context: Vec<Option<usize>>,
}

impl PromptTokens {
    pub fn plain(ids: Vec<usize>) -> Self {
        let context = vec![None; ids.len()];
        Self { ids, context }
    }

    pub fn from_text(text: &str, tokenizer: &Tokenizer) -> Result<Self> {
        Ok(Self::plain(tokenizer.tokenize(text)?))
    }

    /// Tokens of the prompt for `class_name`, with context slots marked.
    pub fn from_spec(spec: &PromptSpec, class_name: &str, tokenizer: &Tokenizer) -> Result<Self> {
        let mut pairs = Vec::new();
        for (word, role) in spec.layout(class_name)? {
            match (tokenizer.word_id(&word), role) {
                (Some(id), Role::Context(i)) => pairs.push((id, Some(i))),
                (Some(id), _) => pairs.push((id, None)),
                (None, Role::Context(i)) => {
                    return Err(Error::Template(format!(
                        "context word {i} (`{word}`) of {} has no token",
                        spec.dataset_name
                    )))
                }
                (None, _) => {}
            }
        }
        let text: Vec<String> = spec.layout(class_name)?.into_iter().map(|(w, _)| w).collect();
        let pairs = tokenizer.fit(pairs, &text.join(" "))?;
        let (ids, context) = pairs.into_iter().unzip();
        Ok(Self { ids, context })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextInit {
    /// Embedding rows of the template's context words.
    #[default]
    Template,
    /// i.i.d. N(0, 0.02^2).
    Random,
}

/// The learnable context rows `v_1..v_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVectors {
    pub param: Parameter,
    pub init: ContextInit,
}

impl ContextVectors {
    pub fn len(&self) -> usize {
        self.param.value.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> &Tensor {
        &self.param.value
    }
}

pub const CONTEXT_INIT_STD: f64 = 0.02;

pub fn init_context(
    spec: &PromptSpec,
    tokenizer: &Tokenizer,
    params: &ModelParams,
    init: ContextInit,
    seed: u64,
) -> Result<ContextVectors> {
    spec.validate()?;
    let words = spec.context_words()?;
    if words.len() != spec.nctx {
        return Err(Error::Template(format!(
            "nctx {} but template has {} context words",
            spec.nctx,
            words.len()
        )));
    }
    let d = params.config.d_text;
    let value = match init {
        ContextInit::Template => {
            let table = params.store.value(params.text.tok_embed);
            let mut data = Vec::with_capacity(words.len() * d);
            for w in &words {
                let id = tokenizer
                    .word_id(w)
                    .filter(|&id| id != tokenizer.vocab.unk_id())
                    .ok_or_else(|| Error::Template(format!("context word `{w}` not in vocab")))?;
                data.extend_from_slice(table.row(id));
            }
            Tensor::new(vec![words.len(), d], data)?
        }
        ContextInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::randn(&[words.len(), d], CONTEXT_INIT_STD, &mut rng)
        }
    };
    Ok(ContextVectors {
        param: Parameter::new("context", value, true),
        init,
    })
}

/// Encodes one prompt and returns its `1 x feature_dim` feature.
///
/// Context slots take rows of `context` when given, otherwise the ordinary
/// token embeddings. Pooling reads the class-slot token at position 0.
pub fn encode_text(
    g: &mut Graph,
    params: &ModelParams,
    tokens: &PromptTokens,
    context: Option<Var>,
) -> Result<Var> {
    let t = &params.text;
    let s = &params.store;
    let cfg = &params.config;
    if tokens.len() > cfg.context_window {
        return Err(Error::Data(format!(
            "{} tokens exceed the context window of {}",
            tokens.len(),
            cfg.context_window
        )));
    }
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(CLS_ID);
    ids.extend_from_slice(&tokens.ids);
    let table = g.param(s, t.tok_embed);
    let emb = g.embedding(table, &ids)?;

    let emb = match context {
        Some(v) if tokens.context.iter().any(Option::is_some) => {
            splice(g, emb, v, &tokens.context)?
        }
        _ => emb,
    };

    let pos = g.param(s, t.pos_embed);
    let pos = g.slice(pos, 0, 0, ids.len())?;
    let mut x = g.add(emb, pos)?;
    for block in &t.blocks {
        x = block_forward(g, s, block, x, SinkInjection::None, cfg.ln_eps)?;
    }
    let pooled = g.slice(x, 0, 0, 1)?;
    let h = layer_norm(g, s, pooled, t.ln_g, t.ln_b, cfg.ln_eps)?;
    let proj = g.param(s, t.proj);
    g.matmul(h, proj)
}

// Rebuilds the embedding rows from runs of token rows and context rows.
// `slots` excludes the class-slot row at position 0.
fn splice(g: &mut Graph, emb: Var, context: Var, slots: &[Option<usize>]) -> Result<Var> {
    let m = g.shape(context)[0];
    if let Some(bad) = slots.iter().flatten().find(|&&i| i >= m) {
        return Err(Error::dim(format!("context slot {bad} but only {m} context rows")));
    }
    let mut pieces = Vec::new();
    let mut pos = 0;
    // Row 0 is the class slot and is never replaced.
    let mut run_start = 0;
    while pos < slots.len() {
        match slots[pos] {
            None => pos += 1,
            Some(first) => {
                let row = pos + 1;
                if run_start < row {
                    pieces.push(g.slice(emb, 0, run_start, row)?);
                }
                let mut len = 1;
                while pos + len < slots.len() && slots[pos + len] == Some(first + len) {
                    len += 1;
                }
                pieces.push(g.slice(context, 0, first, first + len)?);
                pos += len;
                run_start = pos + 1;
            }
        }
    }
    if run_start < slots.len() + 1 {
        pieces.push(g.slice(emb, 0, run_start, slots.len() + 1)?);
    }
    g.concat(&pieces, 0)
}

/// Frozen features for many texts (no context), one row per text.
pub fn encode_texts(params: &ModelParams, tokenizer: &Tokenizer, texts: &[&str]) -> Result<Tensor> {
    let rows = texts
        .par_iter()
        .map(|text| {
            let tokens = PromptTokens::from_text(text, tokenizer)?;
            let mut g = Graph::new();
            let f = encode_text(&mut g, params, &tokens, None)?;
            g.check()?;
            Ok(g.value(f).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// The `k` vocabulary entries closest to `vector` in Euclidean distance,
/// nearest first, ties broken by id.
pub fn nearest_tokens(vector: &[f64], table: &Tensor, vocab: &Vocab, k: usize) -> Vec<(String, f64)> {
    let (n, d) = table.dims2();
    assert_eq!(d, vector.len(), "query dimension must match the embedding table");
    let mut scored: Vec<(f64, usize)> = (0..n.min(vocab.len()))
        .map(|i| {
            let dist = table
                .row(i)
                .iter()
                .zip(vector)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (dist, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(k)
        .map(|(dist, i)| (vocab.token(i).unwrap_or_default().to_string(), dist))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (ModelParams, Tokenizer) {
        let vocab = Vocab::builtin();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            init_seed: 5,
            ..ModelConfig::default()
        };
        (ModelParams::init(&cfg).unwrap(), Tokenizer::new(vocab, 24))
    }

    fn feature(p: &ModelParams, tokens: &PromptTokens, ctx: Option<&ContextVectors>) -> Tensor {
        let mut g = Graph::new();
        let v = ctx.map(|c| g.leaf(c.value().clone(), true));
        let f = encode_text(&mut g, p, tokens, v).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn splice_identity_is_bitwise() {
        let (p, tok) = setup();
        let spec = PromptSpec::builtin_for("BTMRI").unwrap();
        let ctx = init_context(&spec, &tok, &p, ContextInit::Template, 0).unwrap();
        assert_eq!(ctx.len(), 5);
        let tokens = PromptTokens::from_spec(&spec, "glioma", &tok).unwrap();
        let literal = PromptTokens::from_text(
            &crate::text::build_prompt(&spec, "glioma").unwrap(),
            &tok,
        )
        .unwrap();
        assert_eq!(tokens.ids, literal.ids);
        let spliced = feature(&p, &tokens, Some(&ctx));
        assert_eq!(spliced, feature(&p, &literal, None));
        assert_eq!(spliced, feature(&p, &tokens, None));
        assert_eq!(spliced.shape(), &[1, 32]);
    }

    #[test]
    fn splice_handles_mid_position() {
        let (p, tok) = setup();
        let mut spec = PromptSpec::builtin_for("BTMRI").unwrap();
        spec.class_position = crate::text::ClassPosition::Mid;
        let ctx = init_context(&spec, &tok, &p, ContextInit::Template, 0).unwrap();
        let tokens = PromptTokens::from_spec(&spec, "glioma", &tok).unwrap();
        assert_eq!(
            tokens.context,
            vec![Some(0), Some(1), Some(2), None, Some(3), Some(4), None, None, None]
        );
        assert_eq!(feature(&p, &tokens, Some(&ctx)), feature(&p, &tokens, None));
    }

    #[test]
    fn random_context_changes_output_and_is_seeded() {
        let (p, tok) = setup();
        let spec = PromptSpec::builtin_for("BTMRI").unwrap();
        let a = init_context(&spec, &tok, &p, ContextInit::Random, 1).unwrap();
        let b = init_context(&spec, &tok, &p, ContextInit::Random, 1).unwrap();
        assert_eq!(a, b);
        let tokens = PromptTokens::from_spec(&spec, "glioma", &tok).unwrap();
        assert_ne!(feature(&p, &tokens, Some(&a)), feature(&p, &tokens, None));
    }

    #[test]
    fn word_order_matters() {
        let (p, tok) = setup();
        let a = PromptTokens::from_text("a photo of the glioma in a brain", &tok).unwrap();
        let b = PromptTokens::from_text("a photo of a glioma in the brain", &tok).unwrap();
        let diff = feature(&p, &a, None).max_abs_diff(&feature(&p, &b, None));
        assert!(diff > 0.0);
    }

    #[test]
    fn nearest_tokens_finds_exact_row() {
        let (p, tok) = setup();
        let table = p.store.value(p.text.tok_embed);
        let id = tok.vocab.id("photo").unwrap();
        let near = nearest_tokens(table.row(id), table, &tok.vocab, 3);
        assert_eq!(near[0], ("photo".to_string(), 0.0));
        let all = nearest_tokens(table.row(id), table, &tok.vocab, tok.vocab.len());
        assert_eq!(all.len(), tok.vocab.len());
        assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
    }
}
