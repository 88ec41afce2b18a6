//! Backbone configuration and parameters for the text and vision encoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vision::attention_with_sink;

/// Architecture of the toy backbone. Both encoders share depth and head count
/// settings only by default; every field is independently configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_text: usize,
    pub feature_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Maximum number of word tokens; the class slot is extra.
    pub context_window: usize,
    pub vocab_size: usize,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_text: 32,
            feature_dim: 32,
            vision_layers: 2,
            text_layers: 2,
            heads: 2,
            mlp_ratio: 4,
            patch: 8,
            image_size: 32,
            channels: 3,
            context_window: 24,
            vocab_size: 0,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.d_model.is_multiple_of(self.heads), "d_model must be divisible by heads"),
            (self.d_text.is_multiple_of(self.heads), "d_text must be divisible by heads"),
            (self.patch >= 1 && self.patch <= self.image_size, "patch must be in 1..=image_size"),
            (self.channels == 1 || self.channels == 3, "channels must be 1 or 3"),
            (self.vocab_size > 0, "vocab_size must be set"),
            (self.context_window > 0, "context_window must be > 0"),
            (self.ln_eps > 0.0, "ln_eps must be > 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Pre-norm transformer block parameters.
#[derive(Debug, Clone)]
pub struct Block {
    pub heads: usize,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t, true)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), true)
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::filled(shape, 1.0), true)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let w = self.normal(format!("{name}.w"), &[fan_in, fan_out], (fan_in as f64).powf(-0.5));
        let b = self.zeros(format!("{name}.b"), &[fan_out]);
        (w, b)
    }

    fn block(&mut self, prefix: &str, d: usize, heads: usize, mlp: usize) -> Block {
        let ln1_g = self.ones(format!("{prefix}.ln1.g"), &[d]);
        let ln1_b = self.zeros(format!("{prefix}.ln1.b"), &[d]);
        let (wq, bq) = self.linear(&format!("{prefix}.attn.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.attn.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.attn.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.attn.o"), d, d);
        let ln2_g = self.ones(format!("{prefix}.ln2.g"), &[d]);
        let ln2_b = self.zeros(format!("{prefix}.ln2.b"), &[d]);
        let (w1, b1) = self.linear(&format!("{prefix}.mlp.fc1"), d, d * mlp);
        let (w2, b2) = self.linear(&format!("{prefix}.mlp.fc2"), d * mlp, d);
        Block {
            heads,
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub proj: ParamId,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub proj: ParamId,
}

/// Both encoders' weights in one store.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
}

impl ModelParams {
    /// Randomly initialized backbone, deterministic in `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let c = config;

        let text = {
            let tok_embed = init.normal("text.tok_embed".into(), &[c.vocab_size, c.d_text], 0.02);
            let pos_embed =
                init.normal("text.pos_embed".into(), &[c.context_window + 1, c.d_text], 0.01);
            let blocks = (0..c.text_layers)
                .map(|l| init.block(&format!("text.blocks.{l}"), c.d_text, c.heads, c.mlp_ratio))
                .collect();
            let ln_g = init.ones("text.ln_final.g".into(), &[c.d_text]);
            let ln_b = init.zeros("text.ln_final.b".into(), &[c.d_text]);
            let proj = init.normal(
                "text.proj".into(),
                &[c.d_text, c.feature_dim],
                (c.d_text as f64).powf(-0.5),
            );
            TextEncoder {
                tok_embed,
                pos_embed,
                blocks,
                ln_g,
                ln_b,
                proj,
            }
        };

        let vision = {
            let patch_dim = c.channels * c.patch * c.patch;
            let (patch_w, patch_b) = init.linear("vision.patch_embed", patch_dim, c.d_model);
            let scale = (c.d_model as f64).powf(-0.5);
            let cls = init.normal("vision.cls".into(), &[1, c.d_model], scale);
            let pos_embed =
                init.normal("vision.pos_embed".into(), &[c.num_patches() + 1, c.d_model], scale);
            let blocks = (0..c.vision_layers)
                .map(|l| init.block(&format!("vision.blocks.{l}"), c.d_model, c.heads, c.mlp_ratio))
                .collect();
            let ln_g = init.ones("vision.ln_final.g".into(), &[c.d_model]);
            let ln_b = init.zeros("vision.ln_final.b".into(), &[c.d_model]);
            let proj = init.normal(
                "vision.proj".into(),
                &[c.d_model, c.feature_dim],
                (c.d_model as f64).powf(-0.5),
            );
            VisionEncoder {
                patch_w,
                patch_b,
                cls,
                pos_embed,
                blocks,
                ln_g,
                ln_b,
                proj,
            }
        };

        Ok(Self {
            config: config.clone(),
            store,
            text,
            vision,
        })
    }

    pub fn freeze(&mut self) {
        self.store.set_requires_grad(false);
    }

    pub fn unfreeze(&mut self) {
        self.store.set_requires_grad(true);
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    /// Fingerprint of the vision weights alone.
    pub fn vision_fingerprint(&self) -> String {
        let mut vision = ParamStore::new();
        for p in self.store.iter().filter(|p| p.name.starts_with("vision.")) {
            vision.add(p.name.clone(), p.value.clone(), false);
        }
        vision.fingerprint()
    }
}

/// How zero prompts enter a block's attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkInjection {
    None,
    /// `n` zero rows appended to each head's projected keys and values.
    KeyValue(usize),
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    gain: ParamId,
    bias: ParamId,
    eps: f64,
) -> Result<Var> {
    let gain = g.param(store, gain);
    let bias = g.param(store, bias);
    g.layer_norm(x, gain, bias, eps)
}

/// Multi-head self-attention over the rows of `x` (already normalized).
/// Returns the per-head outputs concatenated, before the output projection.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    block: &Block,
    x: Var,
    sink: SinkInjection,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / block.heads;
    let q = linear(g, store, x, block.wq, block.bq)?;
    let k = linear(g, store, x, block.wk, block.bk)?;
    let v = linear(g, store, x, block.wv, block.bv)?;
    let sinks = match sink {
        SinkInjection::None => 0,
        SinkInjection::KeyValue(p) => p,
    };
    let mut heads = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if block.heads == 1 {
            (q, k, v)
        } else {
            (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
        };
        heads.push(attention_with_sink(g, qh, kh, vh, sinks)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat(&heads, 1)
    }
}

/// `x + attn(ln1(x))` followed by `x + mlp(ln2(x))`.
pub(crate) fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    block: &Block,
    x: Var,
    sink: SinkInjection,
    eps: f64,
) -> Result<Var> {
    let h = layer_norm(g, store, x, block.ln1_g, block.ln1_b, eps)?;
    let a = multi_head_attention(g, store, block, h, sink)?;
    let a = linear(g, store, a, block.wo, block.bo)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, store, x, block.ln2_g, block.ln2_b, eps)?;
    let h = linear(g, store, h, block.w1, block.b1)?;
    let h = g.gelu(h);
    let h = linear(g, store, h, block.w2, block.b2)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&cfg()).unwrap();
        let b = ModelParams::init(&cfg()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ModelParams::init(&ModelConfig {
            init_seed: 1,
            ..cfg()
        })
        .unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn invalid_heads_rejected() {
        let bad = ModelConfig {
            heads: 3,
            ..cfg()
        };
        assert!(matches!(ModelParams::init(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn param_names_are_unique() {
        let m = ModelParams::init(&cfg()).unwrap();
        let mut names: Vec<_> = m.store.iter().map(|p| p.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(n, names.len());
    }
}
