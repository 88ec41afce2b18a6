//! Prompt tuning: SGD on the shared context vectors with the backbone frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{ce_graph, cosine_logits, kl_graph, l1_graph, LossWeights};
use crate::model::ModelParams;
use crate::tensor::{sgd_step, Graph, Tensor, Var};
use crate::text::{encode_text, init_context, ContextInit, ContextVectors, PromptSpec, PromptTokens, Tokenizer};

/// Per-class prompt tokens sharing one set of learnable context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLearner {
    pub class_names: Vec<String>,
    pub tokens: Vec<PromptTokens>,
    pub context: ContextVectors,
}

impl PromptLearner {
    pub fn new(
        spec: &PromptSpec,
        class_names: &[String],
        tokenizer: &Tokenizer,
        params: &ModelParams,
        init: ContextInit,
        seed: u64,
    ) -> Result<Self> {
        let context = init_context(spec, tokenizer, params, init, seed)?;
        let tokens = class_names
            .iter()
            .map(|c| PromptTokens::from_spec(spec, c, tokenizer))
            .collect::<Result<_>>()?;
        Ok(Self {
            class_names: class_names.to_vec(),
            tokens,
            context,
        })
    }

    /// The same context vectors applied to a different class list.
    pub fn for_classes(&self, spec: &PromptSpec, class_names: &[String], tokenizer: &Tokenizer) -> Result<Self> {
        let tokens = class_names
            .iter()
            .map(|c| PromptTokens::from_spec(spec, c, tokenizer))
            .collect::<Result<_>>()?;
        Ok(Self {
            class_names: class_names.to_vec(),
            tokens,
            context: self.context.clone(),
        })
    }

    /// `K x d` student class embeddings on `g`, with `context` spliced in.
    pub fn class_rows_on(&self, g: &mut Graph, params: &ModelParams, context: Var) -> Result<Var> {
        let rows = self
            .tokens
            .iter()
            .map(|t| encode_text(g, params, t, Some(context)))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows, 0)
    }

    /// Student class embeddings as a plain tensor.
    pub fn class_rows(&self, params: &ModelParams) -> Result<Tensor> {
        let mut g = Graph::new();
        let ctx = g.constant(self.context.value().clone());
        let w = self.class_rows_on(&mut g, params, ctx)?;
        g.check()?;
        Ok(g.value(w).clone())
    }
}

/// Precomputed inputs for one batch. Rows of `features` and `teacher_probs`
/// align with `labels`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a Tensor,
    pub teacher_probs: &'a Tensor,
    pub labels: &'a [usize],
    pub teacher_bank: &'a Tensor,
}

/// Loss terms of one step as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub ce: Var,
    pub l1: Var,
    pub kl: Var,
}

/// Builds `ce + lambda1 * l1 + lambda2 * kl` for `batch`. A zero weight
/// leaves its term out of the total entirely.
pub fn tuning_loss(
    g: &mut Graph,
    params: &ModelParams,
    learner: &PromptLearner,
    context: Var,
    batch: Batch<'_>,
    weights: &LossWeights,
) -> Result<LossNodes> {
    let w = learner.class_rows_on(g, params, context)?;
    let f = g.constant(batch.features.clone());
    let logits = cosine_logits(g, f, w, weights.tau)?;
    let probs = g.softmax(logits, 1)?;
    let ce = ce_graph(g, probs, batch.labels)?;
    let l1 = l1_graph(g, batch.teacher_bank, w)?;
    let kl = kl_graph(g, batch.teacher_probs, probs)?;
    let mut total = ce;
    if weights.lambda1 != 0.0 {
        let t = g.scale(l1, weights.lambda1);
        total = g.add(total, t)?;
    }
    if weights.lambda2 != 0.0 {
        let t = g.scale(kl, weights.lambda2);
        total = g.add(total, t)?;
    }
    Ok(LossNodes { total, ce, l1, kl })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub ce: f64,
    pub l1: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneSettings {
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle of the support set.
    pub seed: u64,
}

/// Training pool: support-set features, teacher probabilities and labels,
/// row-aligned, plus the teacher class bank.
#[derive(Debug, Clone, PartialEq)]
pub struct TunePool {
    pub features: Tensor,
    pub teacher_probs: Tensor,
    pub labels: Vec<usize>,
    pub teacher_bank: Tensor,
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.dims2().1;
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("row gather keeps shape")
}

/// One SGD step on the context vectors; returns the loss terms before the update.
pub fn tuning_step(
    params: &ModelParams,
    learner: &mut PromptLearner,
    batch: Batch<'_>,
    weights: &LossWeights,
    lr: f64,
    step: usize,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let ctx = g.leaf(learner.context.value().clone(), true);
    let nodes = tuning_loss(&mut g, params, learner, ctx, batch, weights)?;
    let loss = StepLoss {
        total: g.scalar(nodes.total),
        ce: g.scalar(nodes.ce),
        l1: g.scalar(nodes.l1),
        kl: g.scalar(nodes.kl),
    };
    if !loss.total.is_finite() || g.check().is_err() {
        return Err(Error::Divergence {
            step,
            value: loss.total,
        });
    }
    g.backward(nodes.total)?;
    learner.context.param.grad = g.grad(ctx).cloned();
    sgd_step(&mut [&mut learner.context.param], lr)?;
    learner.context.param.grad = None;
    Ok(loss)
}

/// Runs `settings.epochs` passes over the pool in shuffled batches and
/// returns the loss of every step.
pub fn train_prompts(
    params: &ModelParams,
    learner: &mut PromptLearner,
    pool: &TunePool,
    settings: &TuneSettings,
) -> Result<Vec<StepLoss>> {
    settings.weights.validate()?;
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let n = pool.labels.len();
    if n == 0 {
        return Err(Error::Data("empty training pool".into()));
    }
    if params.store.iter().any(|p| p.requires_grad) {
        return Err(Error::Contract("prompt tuning needs a frozen backbone".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(settings.epochs * n.div_ceil(settings.batch_size));
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let features = gather(&pool.features, chunk);
            let teacher_probs = gather(&pool.teacher_probs, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| pool.labels[i]).collect();
            let batch = Batch {
                features: &features,
                teacher_probs: &teacher_probs,
                labels: &labels,
                teacher_bank: &pool.teacher_bank,
            };
            let step = losses.len();
            losses.push(tuning_step(params, learner, batch, &settings.weights, settings.lr, step)?);
        }
    }
    Ok(losses)
}
