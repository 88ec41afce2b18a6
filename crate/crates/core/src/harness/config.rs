use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::text::ClassPosition;
use crate::vision::ZeroPromptConfig;

/// Component switches: zero-vector prompts, clinical template init, L1 and KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Switches {
    pub zsp: bool,
    pub cpt: bool,
    pub l1: bool,
    pub kl: bool,
}

impl Switches {
    pub const ALL: Self = Self {
        zsp: true,
        cpt: true,
        l1: true,
        kl: true,
    };

    /// Context tuning with cross-entropy only from a random start.
    pub const NONE: Self = Self {
        zsp: false,
        cpt: false,
        l1: false,
        kl: false,
    };

    /// All 16 on/off combinations, `NONE` first, `ALL` last.
    pub fn combinations() -> Vec<Self> {
        (0..16u8)
            .map(|m| Self {
                zsp: m & 8 != 0,
                cpt: m & 4 != 0,
                l1: m & 2 != 0,
                kl: m & 1 != 0,
            })
            .collect()
    }
}

impl fmt::Display for Switches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [
            (self.zsp, "zsp"),
            (self.cpt, "cpt"),
            (self.l1, "l1"),
            (self.kl, "kl"),
        ]
        .into_iter()
        .filter_map(|(b, n)| b.then_some(n))
        .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

impl FromStr for Switches {
    type Err = Error;

    /// Comma-separated subset of `zsp,cpt,l1,kl`; `none` or empty disables all.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "zsp" => out.zsp = true,
                "cpt" => out.cpt = true,
                "l1" => out.l1 = true,
                "kl" => out.kl = true,
                "none" => {}
                "all" => out = Self::ALL,
                other => return Err(Error::Config(format!("unknown switch `{other}`"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    FewShot,
    BaseToNovel,
    ZeroShot,
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FewShot => "few_shot",
            Self::BaseToNovel => "base_to_novel",
            Self::ZeroShot => "zero_shot",
        })
    }
}

/// Contrastive pretraining of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 5e-4,
            batch_size: 16,
            tau: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_few_shot: usize,
    pub epochs_base_novel: usize,
    pub seeds: Vec<u64>,
    pub k_shot: usize,
    /// Prompts per class taken from the bank.
    pub n_prompts: usize,
    /// Loss weights for few-shot runs.
    pub weights: LossWeights,
    /// Loss weights for base-to-novel runs; `tau` is shared with `weights`.
    pub weights_base_novel: LossWeights,
    pub switches: Switches,
    /// Zero prompts used when the `zsp` switch is on.
    pub zero_prompts: ZeroPromptConfig,
    pub class_position: ClassPosition,
    /// Key into the template and lambda tables.
    pub dataset: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            lr: 0.0025,
            batch_size: 4,
            epochs_few_shot: 100,
            epochs_base_novel: 50,
            seeds: vec![1, 2, 3],
            k_shot: 16,
            n_prompts: 50,
            weights: LossWeights::default(),
            weights_base_novel: LossWeights::default(),
            switches: Switches::ALL,
            zero_prompts: ZeroPromptConfig::kv_sink(1),
            class_position: ClassPosition::End,
            dataset: "synthetic".into(),
        }
    }
}

/// Every key accepted by [`RunConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "model.d_model",
    "model.d_text",
    "model.feature_dim",
    "model.vision_layers",
    "model.text_layers",
    "model.heads",
    "model.mlp_ratio",
    "model.patch",
    "model.image_size",
    "model.channels",
    "model.context_window",
    "model.ln_eps",
    "model.init_seed",
    "train.lr",
    "train.batch_size",
    "train.epochs_few_shot",
    "train.epochs_base_novel",
    "train.seeds",
    "train.k_shot",
    "train.pretrain_epochs",
    "train.pretrain_lr",
    "train.pretrain_batch_size",
    "train.pretrain_tau",
    "train.pretrain_seed",
    "loss.lambda1",
    "loss.lambda2",
    "loss.tau",
    "loss.b2n_lambda1",
    "loss.b2n_lambda2",
    "prompt.n_prompts",
    "prompt.class_position",
    "prompt.switches",
    "prompt.zero_prompts",
    "prompt.zero_mode",
    "data.dataset",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = `{value}`: {e}")))
}

impl RunConfig {
    /// Applies one `key = value` setting. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let m = &mut self.model;
        match key {
            "model.d_model" => m.d_model = parse(key, value)?,
            "model.d_text" => m.d_text = parse(key, value)?,
            "model.feature_dim" => m.feature_dim = parse(key, value)?,
            "model.vision_layers" => m.vision_layers = parse(key, value)?,
            "model.text_layers" => m.text_layers = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.patch" => m.patch = parse(key, value)?,
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.context_window" => m.context_window = parse(key, value)?,
            "model.ln_eps" => m.ln_eps = parse(key, value)?,
            "model.init_seed" => m.init_seed = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.epochs_few_shot" => self.epochs_few_shot = parse(key, value)?,
            "train.epochs_base_novel" => self.epochs_base_novel = parse(key, value)?,
            "train.seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "train.k_shot" => self.k_shot = parse(key, value)?,
            "train.pretrain_epochs" => self.pretrain.epochs = parse(key, value)?,
            "train.pretrain_lr" => self.pretrain.lr = parse(key, value)?,
            "train.pretrain_batch_size" => self.pretrain.batch_size = parse(key, value)?,
            "train.pretrain_tau" => self.pretrain.tau = parse(key, value)?,
            "train.pretrain_seed" => self.pretrain.seed = parse(key, value)?,
            "loss.lambda1" => self.weights.lambda1 = parse(key, value)?,
            "loss.lambda2" => self.weights.lambda2 = parse(key, value)?,
            "loss.tau" => {
                self.weights.tau = parse(key, value)?;
                self.weights_base_novel.tau = self.weights.tau;
            }
            "loss.b2n_lambda1" => self.weights_base_novel.lambda1 = parse(key, value)?,
            "loss.b2n_lambda2" => self.weights_base_novel.lambda2 = parse(key, value)?,
            "prompt.n_prompts" => self.n_prompts = parse(key, value)?,
            "prompt.class_position" => self.class_position = parse(key, value)?,
            "prompt.switches" => self.switches = parse(key, value)?,
            "prompt.zero_prompts" => self.zero_prompts.count = parse(key, value)?,
            "prompt.zero_mode" => self.zero_prompts.mode = parse(key, value)?,
            "data.dataset" => self.dataset = value.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.weights_base_novel.validate()?;
        let checks = [
            (self.lr > 0.0, "train.lr must be > 0"),
            (self.batch_size >= 1, "train.batch_size must be >= 1"),
            (!self.seeds.is_empty(), "train.seeds must not be empty"),
            (self.k_shot >= 1, "train.k_shot must be >= 1"),
            (self.n_prompts >= 1, "prompt.n_prompts must be >= 1"),
            (self.pretrain.lr > 0.0, "train.pretrain_lr must be > 0"),
            (self.pretrain.tau > 0.0, "train.pretrain_tau must be > 0"),
            (
                self.pretrain.batch_size >= 2,
                "train.pretrain_batch_size must be >= 2",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Loss weights for `benchmark` with switched-off terms zeroed.
    pub fn effective_weights(&self, benchmark: Benchmark, switches: Switches) -> LossWeights {
        let w = match benchmark {
            Benchmark::BaseToNovel => self.weights_base_novel,
            _ => self.weights,
        };
        LossWeights {
            lambda1: if switches.l1 { w.lambda1 } else { 0.0 },
            lambda2: if switches.kl { w.lambda2 } else { 0.0 },
            tau: self.weights.tau,
        }
    }

    /// Vision prompt setting under `switches`.
    pub fn zcfg(&self, switches: Switches) -> ZeroPromptConfig {
        if switches.zsp {
            self.zero_prompts
        } else {
            ZeroPromptConfig::OFF
        }
    }

    pub fn epochs(&self, benchmark: Benchmark) -> usize {
        match benchmark {
            Benchmark::BaseToNovel => self.epochs_base_novel,
            _ => self.epochs_few_shot,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.lr, 0.0025);
        assert_eq!(c.batch_size, 4);
        assert_eq!((c.epochs_few_shot, c.epochs_base_novel), (100, 50));
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.n_prompts, 50);
        c.validate().unwrap();
    }

    #[test]
    fn switches_parse_and_print() {
        assert_eq!("zsp,cpt,l1,kl".parse::<Switches>().unwrap(), Switches::ALL);
        assert_eq!("".parse::<Switches>().unwrap(), Switches::NONE);
        let s: Switches = "kl, zsp".parse().unwrap();
        assert_eq!(s.to_string(), "zsp,kl");
        assert_eq!(s.to_string().parse::<Switches>().unwrap(), s);
        assert!("zsp,foo".parse::<Switches>().is_err());
        let all = Switches::combinations();
        assert_eq!(all.len(), 16);
        assert_eq!((all[0], all[15]), (Switches::NONE, Switches::ALL));
    }

    #[test]
    fn switched_off_terms_are_zeroed() {
        let c = RunConfig::default();
        let w = c.effective_weights(Benchmark::FewShot, Switches::NONE);
        assert_eq!((w.lambda1, w.lambda2), (0.0, 0.0));
        assert_eq!(c.zcfg(Switches::NONE), ZeroPromptConfig::OFF);
        assert_eq!(c.effective_weights(Benchmark::FewShot, Switches::ALL).lambda1, 12.5);
    }

    #[test]
    fn set_keys() {
        let mut c = RunConfig::default();
        for key in CONFIG_KEYS {
            let value = match *key {
                "prompt.class_position" => "mid",
                "prompt.switches" => "zsp,kl",
                "prompt.zero_mode" => "concat",
                "data.dataset" => "BTMRI",
                "train.seeds" => "4, 5",
                "loss.tau" | "train.lr" | "model.ln_eps" => "0.5",
                _ => "2",
            };
            assert!(c.set(key, value).unwrap(), "{key}");
        }
        assert_eq!(c.seeds, vec![4, 5]);
        assert!(!c.set("model.nope", "1").unwrap());
        assert!(matches!(c.set("train.lr", "fast"), Err(Error::Config(_))));
    }
}
