use std::path::Path;

use crate::error::{Error, Result};
use crate::text::PromptBank;

/// Parses a prompt-bank file and validates it against `class_names`.
/// `strict` requires the same number of prompts for every class.
pub fn parse_prompt_bank(text: &str, origin: &Path, class_names: &[String], strict: bool) -> Result<PromptBank> {
    let bank: PromptBank =
        serde_json::from_str(text).map_err(|e| Error::ingest(origin, format!("prompt bank: {e}")))?;
    bank.validate(class_names, strict)
        .map_err(|e| Error::ingest(origin, e.to_string()))?;
    Ok(bank)
}

pub fn load_prompt_bank(path: &Path, class_names: &[String], strict: bool) -> Result<PromptBank> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompt_bank(&text, path, class_names, strict)
}

pub fn save_prompt_bank(bank: &PromptBank, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(bank).expect("bank serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{synthetic_bank, SYNTH_CLASSES};

    fn names() -> Vec<String> {
        SYNTH_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn full_bank_accepted_at_every_size() {
        for n in [10, 20, 30, 40, 50] {
            let text = serde_json::to_string(&synthetic_bank(n, 0.0, 1)).unwrap();
            let bank = parse_prompt_bank(&text, Path::new("b.json"), &names(), true).unwrap();
            assert!(bank.classes.iter().all(|c| c.prompts.len() == n));
        }
    }

    #[test]
    fn missing_class_and_bad_json() {
        let mut bank = synthetic_bank(5, 0.0, 1);
        bank.classes.retain(|c| c.name != "ring");
        let text = serde_json::to_string(&bank).unwrap();
        let err = parse_prompt_bank(&text, Path::new("b.json"), &names(), false).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
        assert!(err.to_string().contains("ring"));
        assert!(parse_prompt_bank("{\"classes\": [", Path::new("b.json"), &names(), false).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let bank = synthetic_bank(3, 0.2, 9);
        save_prompt_bank(&bank, &path).unwrap();
        assert_eq!(load_prompt_bank(&path, &names(), true).unwrap(), bank);
    }
}
