use rayon::prelude::*;

use super::image::{patchify, ImageTensor, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{block_forward, layer_norm, ModelParams, SinkInjection};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ZeroPromptMode {
    /// Zero keys/values appended inside every attention call.
    #[default]
    KvSink,
    /// Zero token rows placed after the class token before every block, outputs dropped.
    Concat,
    Off,
}

impl std::str::FromStr for ZeroPromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv_sink" => Ok(Self::KvSink),
            "concat" => Ok(Self::Concat),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown zero-prompt mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ZeroPromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::KvSink => "kv_sink",
            Self::Concat => "concat",
            Self::Off => "off",
        })
    }
}

/// Zero prompts per layer and how they are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ZeroPromptConfig {
    pub count: usize,
    pub mode: ZeroPromptMode,
}

impl ZeroPromptConfig {
    pub const OFF: Self = Self {
        count: 0,
        mode: ZeroPromptMode::Off,
    };

    pub fn kv_sink(count: usize) -> Self {
        Self {
            count,
            mode: ZeroPromptMode::KvSink,
        }
    }

    pub fn concat(count: usize) -> Self {
        Self {
            count,
            mode: ZeroPromptMode::Concat,
        }
    }
}

/// Projects each patch and adds the patch-slot positional embeddings.
pub fn embed_patches(g: &mut Graph, params: &ModelParams, grid: &PatchGrid) -> Result<Var> {
    let c = &params.config;
    let pd = c.channels * c.patch * c.patch;
    if grid.channels != c.channels || grid.patch_h != c.patch || grid.patch_w != c.patch {
        return Err(Error::dim(format!(
            "grid of {}-channel {}x{} patches for a {}-channel {}-pixel patch embedding",
            grid.channels, grid.patch_h, grid.patch_w, c.channels, c.patch
        )));
    }
    if grid.len() != c.num_patches() {
        return Err(Error::dim(format!(
            "{} patches but positional table has {}",
            grid.len(),
            c.num_patches()
        )));
    }
    let flat = Tensor::new(vec![grid.len(), pd], grid.patches.concat())?;
    let x = g.constant(flat);
    let v = &params.vision;
    let w = g.param(&params.store, v.patch_w);
    let b = g.param(&params.store, v.patch_b);
    let e = g.matmul(x, w)?;
    let e = g.add(e, b)?;
    let pos = g.param(&params.store, v.pos_embed);
    let pos = g.slice(pos, 0, 1, grid.len() + 1)?;
    g.add(e, pos)
}

/// Runs the vision blocks on `[class; e0]` and returns the projected class
/// feature as a `1 x feature_dim` row.
pub fn encoder_forward(
    g: &mut Graph,
    params: &ModelParams,
    e0: Var,
    zcfg: ZeroPromptConfig,
) -> Result<Var> {
    let v = &params.vision;
    let s = &params.store;
    let eps = params.config.ln_eps;
    let n = g.shape(e0)[0];
    let d = g.shape(e0)[1];

    let cls = g.param(s, v.cls);
    let pos = g.param(s, v.pos_embed);
    let pos0 = g.slice(pos, 0, 0, 1)?;
    let x0 = g.add(cls, pos0)?;
    let mut x = g.concat(&[x0, e0], 0)?;

    for block in &v.blocks {
        x = match (zcfg.mode, zcfg.count) {
            (ZeroPromptMode::Off, _) => block_forward(g, s, block, x, SinkInjection::None, eps)?,
            (ZeroPromptMode::KvSink, p) => {
                block_forward(g, s, block, x, SinkInjection::KeyValue(p), eps)?
            }
            (ZeroPromptMode::Concat, 0) => {
                block_forward(g, s, block, x, SinkInjection::None, eps)?
            }
            (ZeroPromptMode::Concat, p) => {
                let head = g.slice(x, 0, 0, 1)?;
                let tail = g.slice(x, 0, 1, n + 1)?;
                let zeros = g.constant(Tensor::zeros(&[p, d]));
                let seq = g.concat(&[head, zeros, tail], 0)?;
                let out = block_forward(g, s, block, seq, SinkInjection::None, eps)?;
                let head = g.slice(out, 0, 0, 1)?;
                let tail = g.slice(out, 0, p + 1, p + 1 + n)?;
                g.concat(&[head, tail], 0)?
            }
        };
    }

    let cls_out = g.slice(x, 0, 0, 1)?;
    let h = layer_norm(g, s, cls_out, v.ln_g, v.ln_b, eps)?;
    let proj = g.param(s, v.proj);
    g.matmul(h, proj)
}

pub(crate) fn image_grid(params: &ModelParams, image: &ImageTensor) -> Result<PatchGrid> {
    let img = image.with_channels(params.config.channels)?;
    patchify(&img, params.config.patch, params.config.patch)
}

/// Image to feature row on `g`.
pub fn encode_image(
    g: &mut Graph,
    params: &ModelParams,
    image: &ImageTensor,
    zcfg: ZeroPromptConfig,
) -> Result<Var> {
    let grid = image_grid(params, image)?;
    let e0 = embed_patches(g, params, &grid)?;
    encoder_forward(g, params, e0, zcfg)
}

/// Features for many images with frozen weights, one graph per image, in parallel.
/// Row `i` belongs to `images[i]`.
pub fn image_features(
    params: &ModelParams,
    images: &[&ImageTensor],
    zcfg: ZeroPromptConfig,
) -> Result<Tensor> {
    let rows = images
        .par_iter()
        .map(|img| {
            let mut g = Graph::new();
            let f = encode_image(&mut g, params, img, zcfg)?;
            g.check()?;
            Ok(g.value(f).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: 8,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn image(seed: u64) -> ImageTensor {
        let data = (0..32 * 32)
            .map(|i| (((i as u64 + seed) * 2654435761) % 1000) as f64 / 1000.0)
            .collect();
        ImageTensor::new(1, 32, 32, data).unwrap()
    }

    fn feature(p: &ModelParams, img: &ImageTensor, z: ZeroPromptConfig) -> Tensor {
        let mut g = Graph::new();
        let f = encode_image(&mut g, p, img, z).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn zero_image_zero_bias_gives_positional_rows() {
        let p = params();
        let zero = ImageTensor::new(1, 32, 32, vec![0.0; 1024]).unwrap();
        let mut g = Graph::new();
        let grid = image_grid(&p, &zero).unwrap();
        let e0 = embed_patches(&mut g, &p, &grid).unwrap();
        let pos = p.store.value(p.vision.pos_embed);
        assert_eq!(g.shape(e0), &[16, 32]);
        assert_eq!(g.value(e0).data(), &pos.data()[32..]);
    }

    #[test]
    fn off_and_empty_prompt_modes_agree_bitwise() {
        let p = params();
        let img = image(3);
        let off = feature(&p, &img, ZeroPromptConfig::OFF);
        assert_eq!(off, feature(&p, &img, ZeroPromptConfig::kv_sink(0)));
        assert_eq!(off, feature(&p, &img, ZeroPromptConfig::concat(0)));
        assert_eq!(off.shape(), &[1, 32]);
        assert_ne!(off, feature(&p, &img, ZeroPromptConfig::kv_sink(4)));
        assert_ne!(off, feature(&p, &img, ZeroPromptConfig::concat(4)));
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let p = params();
        let small = ImageTensor::new(1, 16, 16, vec![0.5; 256]).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            encode_image(&mut g, &p, &small, ZeroPromptConfig::OFF),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn batch_features_match_single() {
        let p = params();
        let (a, b) = (image(1), image(2));
        let batch = image_features(&p, &[&a, &b], ZeroPromptConfig::kv_sink(2)).unwrap();
        assert_eq!(batch.row(1), feature(&p, &b, ZeroPromptConfig::kv_sink(2)).data());
    }
}
