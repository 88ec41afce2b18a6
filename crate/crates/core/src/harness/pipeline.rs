//! Few-shot, zero-shot, base-to-novel and ablation runs on a frozen backbone.

use std::collections::HashMap;

use super::config::{Benchmark, RunConfig, Switches};
use super::data::{sample_few_shot, split_base_novel, Dataset, FewShotTask, Split};
use super::eval::{evaluate, harmonic_mean, MetricsRecord};
use super::tune::{train_prompts, PromptLearner, StepLoss, TunePool, TuneSettings};
use crate::error::{Error, Result};
use crate::loss::class_probs;
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::text::{embed_prompt_bank, ContextInit, PromptBank, PromptSpec, Tokenizer};
use crate::vision::{image_features, ZeroPromptConfig};

/// Outcome of tuning on a class subset.
#[derive(Debug, Clone)]
pub struct TunedPrompts {
    /// Original class ids the learner was trained on, in learner order.
    pub classes: Vec<usize>,
    pub learner: PromptLearner,
    pub losses: Vec<StepLoss>,
    pub task: FewShotTask,
}

/// A frozen backbone with its data, prompt bank and run settings. Image
/// features and the teacher bank are computed once and cached.
pub struct Experiment {
    pub params: ModelParams,
    pub tokenizer: Tokenizer,
    pub spec: PromptSpec,
    pub dataset: Dataset,
    pub bank: PromptBank,
    pub config: RunConfig,
    features: HashMap<(Split, ZeroPromptConfig), Tensor>,
    teacher: HashMap<usize, Tensor>,
}

fn rows(t: &Tensor, ids: &[usize]) -> Tensor {
    let d = t.dims2().1;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![ids.len(), d], data).expect("row gather keeps shape")
}

impl Experiment {
    pub fn new(
        mut params: ModelParams,
        tokenizer: Tokenizer,
        spec: PromptSpec,
        dataset: Dataset,
        bank: PromptBank,
        config: RunConfig,
    ) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        bank.validate(&dataset.class_names, false)?;
        params.freeze();
        let spec = PromptSpec {
            class_position: config.class_position,
            ..spec
        };
        spec.validate()?;
        Ok(Self {
            params,
            tokenizer,
            spec,
            dataset,
            bank,
            config,
            features: HashMap::new(),
            teacher: HashMap::new(),
        })
    }

    /// Image features of a whole split under `zcfg`.
    pub fn features(&mut self, split: Split, zcfg: ZeroPromptConfig) -> Result<&Tensor> {
        if !self.features.contains_key(&(split, zcfg)) {
            let images: Vec<_> = self.dataset.split(split).iter().map(|i| &i.image).collect();
            let f = image_features(&self.params, &images, zcfg)?;
            self.features.insert((split, zcfg), f);
        }
        Ok(&self.features[&(split, zcfg)])
    }

    /// Teacher class bank (all classes) from the first `n_prompts` prompts per class.
    pub fn teacher_bank(&mut self, n_prompts: usize) -> Result<Tensor> {
        if !self.teacher.contains_key(&n_prompts) {
            let bank = self.bank.truncated(n_prompts);
            let gp = embed_prompt_bank(&self.params, &self.tokenizer, &bank, &self.dataset.class_names)?;
            self.teacher.insert(n_prompts, gp);
        }
        Ok(self.teacher[&n_prompts].clone())
    }

    fn labels(&self, split: Split) -> Vec<usize> {
        self.dataset.split(split).iter().map(|i| i.label).collect()
    }

    /// Test-split rows whose class is in `classes`, relabeled to positions in `classes`.
    fn test_view(&mut self, classes: &[usize], zcfg: ZeroPromptConfig) -> Result<(Tensor, Vec<usize>)> {
        let labels = self.labels(Split::Test);
        let (idx, relabeled): (Vec<usize>, Vec<usize>) = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| classes.iter().position(|c| c == l).map(|p| (i, p)))
            .unzip();
        if idx.is_empty() {
            return Err(Error::Data("no test items for the requested classes".into()));
        }
        let feats = self.features(Split::Test, zcfg)?;
        Ok((rows(feats, &idx), relabeled))
    }

    /// Zero-shot accuracy with an ensemble of `n_prompts` prompts per class,
    /// drawn from the bank with `seed`, as the classifier.
    pub fn zero_shot(&mut self, n_prompts: usize, seed: u64) -> Result<MetricsRecord> {
        let bank = self.bank.sampled(n_prompts, seed);
        let gp = embed_prompt_bank(&self.params, &self.tokenizer, &bank, &self.dataset.class_names)?;
        let all: Vec<usize> = (0..self.dataset.num_classes()).collect();
        let (feats, labels) = self.test_view(&all, ZeroPromptConfig::OFF)?;
        let acc = evaluate(&feats, &labels, &gp, self.config.weights.tau)?;
        Ok(MetricsRecord {
            dataset: self.dataset.name.clone(),
            benchmark: Benchmark::ZeroShot,
            k_shot: 0,
            seed,
            switches: format!("ensemble{n_prompts}"),
            accuracy: Some(acc),
            base_acc: None,
            novel_acc: None,
            hm: None,
        })
    }

    /// Samples a `k`-shot support set over `classes` and tunes context vectors on it.
    pub fn tune(
        &mut self,
        classes: &[usize],
        k: usize,
        seed: u64,
        switches: Switches,
        benchmark: Benchmark,
    ) -> Result<TunedPrompts> {
        let sub = self.dataset.subset(classes)?;
        let task = sample_few_shot(&sub, k, seed)?;
        // Subset train items keep the original order, so map back by filtering.
        let original: Vec<usize> = self
            .dataset
            .train
            .iter()
            .enumerate()
            .filter(|(_, it)| classes.contains(&it.label))
            .map(|(i, _)| i)
            .collect();
        let picked = task.indices();
        let train_ids: Vec<usize> = picked.iter().map(|&j| original[j]).collect();
        let labels: Vec<usize> = picked.iter().map(|&j| sub.train[j].label).collect();

        let tau = self.config.weights.tau;
        let zcfg = self.config.zcfg(switches);
        let student = rows(self.features(Split::Train, zcfg)?, &train_ids);
        let frozen = rows(self.features(Split::Train, ZeroPromptConfig::OFF)?, &train_ids);
        let teacher_bank = rows(&self.teacher_bank(self.config.n_prompts)?, classes);
        let probs = (0..train_ids.len())
            .map(|i| class_probs(&teacher_bank, frozen.row(i), tau))
            .collect::<Result<Vec<_>>>()?;
        let pool = TunePool {
            features: student,
            teacher_probs: Tensor::from_rows(&probs)?,
            labels,
            teacher_bank,
        };

        let init = if switches.cpt {
            ContextInit::Template
        } else {
            ContextInit::Random
        };
        let mut learner = PromptLearner::new(
            &self.spec,
            &sub.class_names,
            &self.tokenizer,
            &self.params,
            init,
            seed,
        )?;
        let settings = TuneSettings {
            weights: self.config.effective_weights(benchmark, switches),
            lr: self.config.lr,
            batch_size: self.config.batch_size,
            epochs: self.config.epochs(benchmark),
            seed,
        };
        let losses = train_prompts(&self.params, &mut learner, &pool, &settings)?;
        Ok(TunedPrompts {
            classes: classes.to_vec(),
            learner,
            losses,
            task,
        })
    }

    /// Accuracy of a tuned learner on the test items of its classes.
    pub fn score(&mut self, tuned: &PromptLearner, classes: &[usize], switches: Switches) -> Result<f64> {
        let zcfg = self.config.zcfg(switches);
        let (feats, labels) = self.test_view(classes, zcfg)?;
        let w = tuned.class_rows(&self.params)?;
        evaluate(&feats, &labels, &w, self.config.weights.tau)
    }

    /// `k`-shot tuning on all classes, scored on the full test split.
    pub fn few_shot(&mut self, k: usize, seed: u64, switches: Switches) -> Result<(MetricsRecord, TunedPrompts)> {
        let all: Vec<usize> = (0..self.dataset.num_classes()).collect();
        let tuned = self.tune(&all, k, seed, switches, Benchmark::FewShot)?;
        let acc = self.score(&tuned.learner, &all, switches)?;
        let record = MetricsRecord {
            dataset: self.dataset.name.clone(),
            benchmark: Benchmark::FewShot,
            k_shot: k,
            seed,
            switches: switches.to_string(),
            accuracy: Some(acc),
            base_acc: None,
            novel_acc: None,
            hm: None,
        };
        Ok((record, tuned))
    }

    /// Tunes on base classes, then scores base and novel classes separately.
    pub fn base_to_novel(&mut self, k: usize, seed: u64, switches: Switches) -> Result<MetricsRecord> {
        let (base, novel) = split_base_novel(&self.dataset.class_names)?;
        let tuned = self.tune(&base, k, seed, switches, Benchmark::BaseToNovel)?;
        let base_acc = self.score(&tuned.learner, &base, switches)?;
        let novel_names: Vec<String> = novel.iter().map(|&c| self.dataset.class_names[c].clone()).collect();
        let novel_learner = tuned.learner.for_classes(&self.spec, &novel_names, &self.tokenizer)?;
        let novel_acc = self.score(&novel_learner, &novel, switches)?;
        Ok(MetricsRecord {
            dataset: self.dataset.name.clone(),
            benchmark: Benchmark::BaseToNovel,
            k_shot: k,
            seed,
            switches: switches.to_string(),
            accuracy: None,
            base_acc: Some(base_acc),
            novel_acc: Some(novel_acc),
            hm: Some(harmonic_mean(base_acc, novel_acc)),
        })
    }

    /// One few-shot record per switch combination, `NONE` first.
    pub fn ablation(&mut self, k: usize, seed: u64) -> Result<Vec<MetricsRecord>> {
        Switches::combinations()
            .into_iter()
            .map(|s| self.few_shot(k, seed, s).map(|(r, _)| r))
            .collect()
    }
}
