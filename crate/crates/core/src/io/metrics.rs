//! JSON Lines metrics files.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::MetricsRecord;

fn lines(records: &[MetricsRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

/// Replaces `path` with `records`, one per line.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, lines(records)).map_err(|e| Error::io(path, e))
}

pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(lines(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::ingest(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Benchmark;

    #[test]
    fn append_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let r = MetricsRecord {
            dataset: "synthetic".into(),
            benchmark: Benchmark::BaseToNovel,
            k_shot: 16,
            seed: 2,
            switches: "none".into(),
            accuracy: None,
            base_acc: Some(90.0),
            novel_acc: Some(45.0),
            hm: Some(60.0),
        };
        append_metrics(&path, &[r.clone()]).unwrap();
        append_metrics(&path, &[r.clone()]).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![r.clone(), r]);
        std::fs::write(&path, "{oops\n").unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Ingestion { .. })));
    }
}
