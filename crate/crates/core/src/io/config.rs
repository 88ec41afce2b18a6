//! Flat `key = value` run configuration files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::RunConfig;

/// Applies the settings in `text` on top of `base`. Blank lines and lines
/// starting with `#` are skipped. Unknown keys are an error in `strict` mode
/// and a warning otherwise.
pub fn parse_config(text: &str, base: RunConfig, strict: bool) -> Result<RunConfig> {
    let mut config = base;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !config.set(key, value)? {
            if strict {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1)));
            }
            log::warn!("ignoring unknown config key `{key}`");
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, base: RunConfig, strict: bool) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, base, strict)
}
