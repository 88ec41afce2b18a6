//! Symmetric image-text contrastive pretraining of the backbone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::PretrainConfig;
use super::data::Item;
use crate::error::{Error, Result};
use crate::loss::{cosine_logits, PROB_FLOOR};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Adam, Graph, Tensor, Var};
use crate::text::{encode_text, PromptTokens, Tokenizer};
use crate::vision::{encode_image, image_features, ZeroPromptConfig};

/// Mean over rows of `-sum_j target_ij log softmax(logits)_ij`.
fn soft_cross_entropy(g: &mut Graph, logits: Var, target: Tensor) -> Result<Var> {
    let rows = target.dims2().0;
    let probs = g.softmax(logits, 1)?;
    let logp = g.log(probs, PROB_FLOOR);
    let t = g.constant(target);
    let terms = g.mul(t, logp)?;
    let s = g.sum(terms);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// Distinct captions of `items` in first-seen order, and each item's caption index.
fn caption_table(items: &[&Item]) -> (Vec<String>, Vec<usize>) {
    let mut captions: Vec<String> = Vec::new();
    let index = items
        .iter()
        .map(|it| match captions.iter().position(|c| *c == it.caption) {
            Some(i) => i,
            None => {
                captions.push(it.caption.clone());
                captions.len() - 1
            }
        })
        .collect();
    (captions, index)
}

/// Contrastive loss of one batch. Items sharing a caption are all positives
/// for that caption; image-to-text targets are one-hot over distinct captions
/// and text-to-image targets spread uniformly over matching images.
pub fn contrastive_loss(
    g: &mut Graph,
    params: &ModelParams,
    tokenizer: &Tokenizer,
    items: &[&Item],
    tau: f64,
) -> Result<Var> {
    if items.len() < 2 {
        return Err(Error::Contract(format!(
            "contrastive batch needs at least 2 pairs, got {}",
            items.len()
        )));
    }
    let (captions, index) = caption_table(items);
    let feats = items
        .iter()
        .map(|it| encode_image(g, params, &it.image, ZeroPromptConfig::OFF))
        .collect::<Result<Vec<_>>>()?;
    let f = g.concat(&feats, 0)?;
    let texts = captions
        .iter()
        .map(|c| {
            let tokens = PromptTokens::from_text(c, tokenizer)?;
            encode_text(g, params, &tokens, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let t = g.concat(&texts, 0)?;

    let (b, u) = (items.len(), captions.len());
    let mut i2t = vec![0.0; b * u];
    let mut t2i = vec![0.0; u * b];
    for (i, &c) in index.iter().enumerate() {
        i2t[i * u + c] = 1.0;
    }
    for c in 0..u {
        let n = index.iter().filter(|&&x| x == c).count() as f64;
        for (i, &x) in index.iter().enumerate() {
            if x == c {
                t2i[c * b + i] = 1.0 / n;
            }
        }
    }
    let logits = cosine_logits(g, f, t, tau)?;
    let img_loss = soft_cross_entropy(g, logits, Tensor::new(vec![b, u], i2t)?)?;
    let logits_t = g.transpose(logits)?;
    let txt_loss = soft_cross_entropy(g, logits_t, Tensor::new(vec![u, b], t2i)?)?;
    let total = g.add(img_loss, txt_loss)?;
    Ok(g.scale(total, 0.5))
}

/// Trains a fresh backbone on the image-caption pairs in `items` and returns it frozen.
pub fn pretrain_backbone(
    items: &[Item],
    tokenizer: &Tokenizer,
    model: &ModelConfig,
    config: &PretrainConfig,
) -> Result<ModelParams> {
    if config.batch_size < 2 {
        return Err(Error::Contract("contrastive pretraining needs batch_size >= 2".into()));
    }
    let model = ModelConfig {
        vocab_size: tokenizer.vocab.len(),
        ..model.clone()
    };
    let mut params = ModelParams::init(&model)?;
    params.unfreeze();
    let mut adam = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<&Item> = chunk.iter().map(|&i| &items[i]).collect();
            let mut g = Graph::new();
            let loss = contrastive_loss(&mut g, &params, tokenizer, &batch, config.tau)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { step, value });
            }
            g.backward(loss)?;
            params.store.zero_grads();
            params.store.collect_grads(&g);
            adam.step(params.store.params_mut())?;
            epoch_loss += value;
            batches += 1;
            step += 1;
        }
        log::info!(
            "pretrain epoch {}/{}: mean loss {:.4}",
            epoch + 1,
            config.epochs,
            epoch_loss / batches.max(1) as f64
        );
    }
    params.store.zero_grads();
    params.freeze();
    Ok(params)
}

/// Held-out image-to-text retrieval accuracy in percent.
///
/// Items are grouped into batches holding one item per class (cycling
/// through each class's items in a seeded order), so captions within a batch
/// are distinct and chance level is `1 / batch`.
pub fn retrieval_accuracy(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    items: &[Item],
    seed: u64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Data("retrieval needs at least one item".into()));
    }
    let (captions, index) = caption_table(&items.iter().collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); captions.len()];
    for (i, &c) in index.iter().enumerate() {
        groups[c].push(i);
    }
    for group in &mut groups {
        group.shuffle(&mut rng);
    }
    let refs: Vec<&crate::vision::ImageTensor> = items.iter().map(|i| &i.image).collect();
    let feats = image_features(params, &refs, ZeroPromptConfig::OFF)?;
    let text_refs: Vec<&str> = captions.iter().map(String::as_str).collect();
    let text = crate::text::encode_texts(params, tokenizer, &text_refs)?;

    let rounds = groups.iter().map(Vec::len).max().unwrap_or(0);
    let (mut correct, mut total) = (0usize, 0usize);
    for r in 0..rounds {
        let batch: Vec<usize> = groups.iter().filter_map(|g| g.get(r).copied()).collect();
        for &i in &batch {
            let scores: Vec<f64> = batch
                .iter()
                .map(|&j| crate::loss::similarity(text.row(index[j]), feats.row(i)))
                .collect::<Result<_>>()?;
            let best = crate::loss::predict(&scores);
            correct += usize::from(index[batch[best]] == index[i]);
            total += 1;
        }
    }
    Ok(100.0 * correct as f64 / total as f64)
}
