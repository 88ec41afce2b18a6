//! File formats, dataset ingestion and the synthetic benchmark generator.

mod bank;
mod config;
mod dataset;
mod lambdas;
mod metrics;
mod pnm;
pub mod synth;
mod weights;

pub use bank::{load_prompt_bank, parse_prompt_bank, save_prompt_bank};
pub use config::{load_config, parse_config};
pub use dataset::{load_dataset, save_dataset, Manifest, ManifestItem, MANIFEST};
pub use lambdas::{DatasetLambdas, LambdaPair, LambdaTable};
pub use metrics::{append_metrics, read_metrics, write_metrics};
pub use pnm::{decode_pnm, encode_pgm, encode_pnm, read_pnm, write_pnm};
pub use weights::{apply_weights, decode_weights, encode_weights, load_weights, save_weights};
