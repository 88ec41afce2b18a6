use super::encoder::{embed_patches, encoder_forward, image_grid, ZeroPromptConfig};
use super::image::ImageTensor;
use crate::error::{Error, Result};
use crate::loss::cosine_logits;
use crate::model::ModelParams;
use crate::tensor::{Graph, Tensor};

/// Per-patch saliency on the patch grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Scores min-max scaled to `[0, 1]`; a flat field maps to all zeros.
    pub fn from_norms(rows: usize, cols: usize, norms: Vec<f64>) -> Self {
        let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let values = if span > 0.0 && span.is_finite() {
            norms.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; norms.len()]
        };
        Self { rows, cols, values }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// (row, col) of the largest value; first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }

    /// Nearest-neighbour upsampling to `height x width`; pixels past the grid
    /// take the last row/column of cells.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let cell_h = (height / self.rows).max(1);
        let cell_w = (width / self.cols).max(1);
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let r = (y / cell_h).min(self.rows - 1);
            for x in 0..width {
                let c = (x / cell_w).min(self.cols - 1);
                out.push(self.at(r, c));
            }
        }
        out
    }
}

/// How patch relevance is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyMethod {
    /// L2 norm of the gradient of the target logit with respect to each
    /// patch embedding row.
    Gradient,
    /// Integrated gradients of the target log-probability along the straight
    /// path from a blank image's patch embeddings to the input's, summed per
    /// patch and clipped at zero. The blank image is filled with the input's
    /// median pixel value.
    IntegratedGradients { steps: usize },
}

impl Default for SaliencyMethod {
    fn default() -> Self {
        SaliencyMethod::IntegratedGradients { steps: 16 }
    }
}

/// Saliency of class `target` over the patch grid with the default method.
/// `class_rows` holds one text embedding per class.
pub fn saliency(
    params: &ModelParams,
    image: &ImageTensor,
    class_rows: &Tensor,
    target: usize,
    tau: f64,
    zcfg: ZeroPromptConfig,
) -> Result<Heatmap> {
    saliency_with(params, image, class_rows, target, tau, zcfg, SaliencyMethod::default())
}

pub fn saliency_with(
    params: &ModelParams,
    image: &ImageTensor,
    class_rows: &Tensor,
    target: usize,
    tau: f64,
    zcfg: ZeroPromptConfig,
    method: SaliencyMethod,
) -> Result<Heatmap> {
    let (k, _) = class_rows.dims2();
    if target >= k {
        return Err(Error::Lookup(format!("class {target} not in a bank of {k} classes")));
    }
    let grid = image_grid(params, image)?;
    let mut g = Graph::new();
    let e0 = embed_patches(&mut g, params, &grid)?;
    let e0 = g.value(e0).clone();
    let scores = match method {
        SaliencyMethod::Gradient => {
            let grad = target_gradient(params, &e0, class_rows, target, tau, zcfg, false)?;
            (0..grid.len())
                .map(|i| grad.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        }
        SaliencyMethod::IntegratedGradients { steps } => {
            integrated_gradients(params, image, &e0, class_rows, target, tau, zcfg, steps)?
                .into_iter()
                .map(|a| a.max(0.0))
                .collect()
        }
    };
    Ok(Heatmap::from_norms(grid.rows, grid.cols, scores))
}

/// Unclipped per-patch integrated-gradient attributions of the target
/// log-probability, midpoint rule with `steps` points.
#[allow(clippy::too_many_arguments)]
fn integrated_gradients(
    params: &ModelParams,
    image: &ImageTensor,
    e0: &Tensor,
    class_rows: &Tensor,
    target: usize,
    tau: f64,
    zcfg: ZeroPromptConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients need at least one step".into()));
    }
    let base = blank_embedding(params, image)?;
    let delta: Vec<f64> = e0.data().iter().zip(base.data()).map(|(x, b)| x - b).collect();
    let (n, d) = e0.dims2();
    let mut attr = vec![0.0; n];
    for step in 0..steps {
        let alpha = (step as f64 + 0.5) / steps as f64;
        let point = base.data().iter().zip(&delta).map(|(b, x)| b + alpha * x).collect();
        let point = Tensor::new(e0.shape().to_vec(), point)?;
        let grad = target_gradient(params, &point, class_rows, target, tau, zcfg, true)?;
        for (i, a) in attr.iter_mut().enumerate() {
            let row = &delta[i * d..(i + 1) * d];
            *a += grad.row(i).iter().zip(row).map(|(g, x)| g * x).sum::<f64>();
        }
    }
    Ok(attr.into_iter().map(|a| a / steps as f64).collect())
}

/// Patch embeddings of an image filled with the median pixel of `image`.
fn blank_embedding(params: &ModelParams, image: &ImageTensor) -> Result<Tensor> {
    let mut pixels = image.data().to_vec();
    pixels.sort_by(f64::total_cmp);
    let fill = pixels[pixels.len() / 2];
    let blank = ImageTensor::new(
        image.channels(),
        image.height(),
        image.width(),
        vec![fill; pixels.len()],
    )?;
    let mut g = Graph::new();
    let b0 = embed_patches(&mut g, params, &image_grid(params, &blank)?)?;
    Ok(g.value(b0).clone())
}

/// Gradient of the target logit (or log-probability) with respect to `e0`.
fn target_gradient(
    params: &ModelParams,
    e0: &Tensor,
    class_rows: &Tensor,
    target: usize,
    tau: f64,
    zcfg: ZeroPromptConfig,
    log_prob: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.leaf(e0.clone(), true);
    let f = encoder_forward(&mut g, params, e, zcfg)?;
    let w = g.constant(class_rows.clone());
    let logits = cosine_logits(&mut g, f, w, tau)?;
    let picked = g.slice(logits, 1, target, target + 1)?;
    let mut out = g.sum(picked);
    if log_prob {
        // Cosine logits are bounded by 1/tau, so the plain exp-sum is safe.
        let ex = g.exp(logits);
        let z = g.sum(ex);
        let lz = g.log(z, f64::MIN_POSITIVE);
        out = g.sub(out, lz)?;
    }
    g.backward(out)?;
    Ok(g.grad(e).expect("leaf requires grad").clone())
}
