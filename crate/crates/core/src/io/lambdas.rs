//! Per-dataset defaults for the L1 and KL weights.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Benchmark, RunConfig};

const BUILTIN_LAMBDAS: &str = include_str!("../../assets/lambdas.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPair {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLambdas {
    pub few_shot: Option<LambdaPair>,
    pub base_to_novel: Option<LambdaPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub default: LambdaPair,
    pub datasets: BTreeMap<String, DatasetLambdas>,
}

impl LambdaTable {
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_LAMBDAS).expect("shipped lambda table parses")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ingest(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Weights for `dataset` on `benchmark`; unknown datasets and missing
    /// entries fall back to the table default.
    pub fn lookup(&self, dataset: &str, benchmark: Benchmark) -> LambdaPair {
        let entry = self.datasets.get(dataset);
        let pair = match benchmark {
            Benchmark::BaseToNovel => entry.and_then(|e| e.base_to_novel),
            _ => entry.and_then(|e| e.few_shot),
        };
        pair.unwrap_or(self.default)
    }

    /// Sets both benchmarks' lambdas of `config` from its dataset's entries.
    pub fn apply(&self, config: &mut RunConfig) {
        let fs = self.lookup(&config.dataset, Benchmark::FewShot);
        let bn = self.lookup(&config.dataset, Benchmark::BaseToNovel);
        (config.weights.lambda1, config.weights.lambda2) = (fs.lambda1, fs.lambda2);
        (config.weights_base_novel.lambda1, config.weights_base_novel.lambda2) = (bn.lambda1, bn.lambda2);
    }
}
