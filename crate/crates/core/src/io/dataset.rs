//! Dataset directories: a `manifest.json` plus one image file per item.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pnm::{encode_pnm, read_pnm};
use crate::error::{Error, Result};
use crate::harness::{Dataset, Item};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// Path relative to the dataset directory.
    pub image: String,
    pub label: usize,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub classes: Vec<String>,
    pub train: Vec<ManifestItem>,
    pub test: Vec<ManifestItem>,
}

impl Manifest {
    pub fn of(dataset: &Dataset) -> Self {
        let items = |items: &[Item]| {
            items
                .iter()
                .map(|i| ManifestItem {
                    image: i.path.clone(),
                    label: i.label,
                    caption: i.caption.clone(),
                })
                .collect()
        };
        Self {
            name: dataset.name.clone(),
            classes: dataset.class_names.clone(),
            train: items(&dataset.train),
            test: items(&dataset.test),
        }
    }
}

/// Writes every image and the manifest under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for item in dataset.train.iter().chain(&dataset.test) {
        let path = dir.join(&item.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, encode_pnm(&item.image)).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = serde_json::to_string_pretty(&Manifest::of(dataset)).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory, items in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ingest(&path, e.to_string()))?;
    let k = manifest.classes.len();
    let load = |items: &[ManifestItem]| -> Result<Vec<Item>> {
        items
            .par_iter()
            .map(|m| {
                let file = dir.join(&m.image);
                if m.label >= k {
                    return Err(Error::ingest(
                        &file,
                        format!("label {} but the manifest lists {k} classes", m.label),
                    ));
                }
                Ok(Item {
                    path: m.image.clone(),
                    label: m.label,
                    caption: m.caption.clone(),
                    image: read_pnm(&file)?,
                })
            })
            .collect()
    };
    let dataset = Dataset {
        name: manifest.name.clone(),
        class_names: manifest.classes.clone(),
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    };
    dataset
        .validate()
        .map_err(|e| Error::ingest(&path, e.to_string()))?;
    Ok(dataset)
}
