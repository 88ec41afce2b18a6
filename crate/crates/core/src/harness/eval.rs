use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::Benchmark;
use crate::error::{Error, Result};
use crate::loss::{class_probs, predict};
use crate::tensor::Tensor;

/// Predicted class per feature row.
pub fn predictions(features: &Tensor, class_rows: &Tensor, tau: f64) -> Result<Vec<usize>> {
    let (n, _) = features.dims2();
    (0..n)
        .map(|i| class_probs(class_rows, features.row(i), tau).map(|p| predict(&p)))
        .collect()
}

/// `100 * correct / total`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Accuracy of classifying `features` against `class_rows`.
pub fn evaluate(features: &Tensor, labels: &[usize], class_rows: &Tensor, tau: f64) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    accuracy(&predictions(features, class_rows, tau)?, labels)
}

/// `2bn / (b + n)`, and 0 when either side is 0.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base <= 0.0 || novel <= 0.0 {
        0.0
    } else {
        2.0 * base * novel / (base + novel)
    }
}

/// One evaluated run, serialized as a JSON Lines row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub benchmark: Benchmark,
    pub k_shot: usize,
    pub seed: u64,
    pub switches: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hm: Option<f64>,
}

impl MetricsRecord {
    /// The headline number: accuracy, or HM for base-to-novel rows.
    pub fn score(&self) -> Option<f64> {
        self.accuracy.or(self.hm)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Mean score of one (dataset, benchmark, switches, k) cell with the per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub dataset: String,
    pub benchmark: Benchmark,
    pub k_shot: usize,
    pub switches: String,
    pub mean: f64,
    pub per_seed: Vec<(u64, f64)>,
}

/// Groups records by cell and averages their scores over seeds.
pub fn aggregate_seeds(records: &[MetricsRecord]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(String, String, usize, String), Vec<(u64, f64)>> = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    for r in records {
        let Some(score) = r.score() else { continue };
        let key = (
            r.dataset.clone(),
            r.benchmark.to_string(),
            r.k_shot,
            r.switches.clone(),
        );
        kinds.insert(key.clone(), r.benchmark);
        cells.entry(key).or_default().push((r.seed, score));
    }
    cells
        .into_iter()
        .map(|(key, per_seed)| {
            let mean = per_seed.iter().map(|(_, s)| s).sum::<f64>() / per_seed.len() as f64;
            CellSummary {
                benchmark: kinds[&key],
                dataset: key.0,
                k_shot: key.2,
                switches: key.3,
                mean,
                per_seed,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            dataset: "synthetic".into(),
            benchmark: Benchmark::FewShot,
            k_shot: 16,
            seed,
            switches: "zsp,cpt,l1,kl".into(),
            accuracy: Some(acc),
            base_acc: None,
            novel_acc: None,
            hm: None,
        }
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(42.0, 42.0), 42.0);
        assert_eq!(harmonic_mean(100.0, 0.0), 0.0);
        assert!((harmonic_mean(74.28, 67.93) - 70.96).abs() < 5e-3);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1], &[1]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 1]).unwrap(), 50.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn identical_rows_predict_class_zero() {
        let w = Tensor::from_rows(&[vec![1.0, 0.5], vec![1.0, 0.5]]).unwrap();
        let f = Tensor::from_rows(&[vec![0.3, 0.1], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(predictions(&f, &w, 0.01).unwrap(), vec![0, 0]);
        assert_eq!(evaluate(&f, &[0, 1], &w, 0.01).unwrap(), 50.0);
    }

    #[test]
    fn aggregate_means() {
        let rs = vec![record(1, 50.0), record(2, 60.0), record(3, 70.0)];
        let s = aggregate_seeds(&rs);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, 60.0);
        assert_eq!(s[0].per_seed.len(), 3);
        assert_eq!(aggregate_seeds(&rs[..1])[0].mean, 50.0);
    }

    #[test]
    fn jsonl_omits_missing_fields() {
        let line = record(1, 87.5).to_json_line();
        assert!(!line.contains("\"hm\""));
        let back: MetricsRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, record(1, 87.5));
    }
}
