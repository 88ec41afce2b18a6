//! Cosine/temperature classifier and the cross-entropy + L1 + KL objective.
//!
//! Each quantity exists twice: as a plain function over slices (for
//! evaluation and reporting) and as a graph builder (for training).

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 12.5,
            lambda2: 0.25,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must be > 0, got {tau}")))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity `w.f / (|w| |f|)`.
pub fn similarity(w: &[f64], f: &[f64]) -> Result<f64> {
    if w.len() != f.len() {
        return Err(Error::dim(format!("similarity of {} and {} dims", w.len(), f.len())));
    }
    let (nw, nf) = (norm(w), norm(f));
    if nw == 0.0 || nf == 0.0 {
        return Err(Error::Degenerate("similarity of a zero vector".into()));
    }
    let dot: f64 = w.iter().zip(f).map(|(a, b)| a * b).sum();
    Ok((dot / (nw * nf)).clamp(-1.0, 1.0))
}

/// Softmax over `sim(w_i, f) / tau` for the rows `w_i` of `class_rows`.
pub fn class_probs(class_rows: &Tensor, f: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let (k, _) = class_rows.dims2();
    if k < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {k}")));
    }
    let logits = (0..k)
        .map(|i| similarity(class_rows.row(i), f).map(|s| s / tau))
        .collect::<Result<Vec<_>>>()?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Argmax with ties going to the lowest index.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// `-sum_i y_i log p_s[i]`.
pub fn loss_ce(y: &[f64], p_s: &[f64]) -> f64 {
    -y.iter()
        .zip(p_s)
        .map(|(yi, p)| yi * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// `sum_i p_t[i] log(p_t[i] / p_s[i])`.
pub fn loss_kl(p_t: &[f64], p_s: &[f64]) -> f64 {
    p_t.iter()
        .zip(p_s)
        .map(|(t, s)| t * (t.max(PROB_FLOOR).ln() - s.max(PROB_FLOOR).ln()))
        .sum()
}

/// Mean over classes of the L1 distance between teacher and student rows.
pub fn loss_l1(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::Contract(format!(
            "teacher {:?} and student {:?} banks differ",
            teacher.shape(),
            student.shape()
        )));
    }
    let (k, _) = teacher.dims2();
    let total: f64 = (0..k)
        .map(|i| {
            teacher
                .row(i)
                .iter()
                .zip(student.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / k as f64)
}

pub fn loss_total(ce: f64, l1: f64, kl: f64, weights: &LossWeights) -> f64 {
    ce + weights.lambda1 * l1 + weights.lambda2 * kl
}

/// `[B x K]` logits `sim(w_k, f_b) / tau` for feature rows `f` and class rows `w`.
pub fn cosine_logits(g: &mut Graph, f: Var, w: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let fn_ = g.l2_normalize(f);
    let wn = g.l2_normalize(w);
    let wt = g.transpose(wn)?;
    let sims = g.matmul(fn_, wt)?;
    Ok(g.scale(sims, 1.0 / tau))
}

/// Mean cross-entropy of `[B x K]` probabilities against integer labels.
pub fn ce_graph(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = g.value(probs).dims2();
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(Error::Contract(format!("{} labels for a {b}x{k} batch", labels.len())));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let y = g.constant(Tensor::new(vec![b, k], onehot)?);
    let logp = g.log(probs, PROB_FLOOR);
    let picked = g.mul(y, logp)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// Mean KL(teacher || student) over the batch; the teacher is a constant.
pub fn kl_graph(g: &mut Graph, teacher: &Tensor, student: Var) -> Result<Var> {
    if teacher.shape() != g.shape(student) {
        return Err(Error::Contract("teacher and student distributions differ in shape".into()));
    }
    let (b, _) = teacher.dims2();
    let log_t = Tensor::new(
        teacher.shape().to_vec(),
        teacher.data().iter().map(|t| t.max(PROB_FLOOR).ln()).collect(),
    )?;
    let pt = g.constant(teacher.clone());
    let log_t = g.constant(log_t);
    let log_s = g.log(student, PROB_FLOOR);
    let diff = g.sub(log_t, log_s)?;
    let terms = g.mul(pt, diff)?;
    let s = g.sum(terms);
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Graph form of [`loss_l1`]; the teacher bank is a constant.
pub fn l1_graph(g: &mut Graph, teacher: &Tensor, student: Var) -> Result<Var> {
    if teacher.shape() != g.shape(student) {
        return Err(Error::Contract(format!(
            "teacher {:?} and student {:?} banks differ",
            teacher.shape(),
            g.shape(student)
        )));
    }
    let (k, _) = teacher.dims2();
    let t = g.constant(teacher.clone());
    let diff = g.sub(student, t)?;
    let a = g.abs(diff)?;
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / k as f64))
}
