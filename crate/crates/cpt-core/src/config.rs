//! Line-oriented `key = value` config text.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! This format is shared by config files, the resolved-config echo, and the
//! config block embedded in checkpoints, so a round trip through
//! [`format_kv`] and [`parse_kv_text`] is exact.

use crate::error::{Error, Result};

/// Parses config text into ordered pairs. `origin` names the source in
/// parse errors (a file path or a synthetic label like `--set`).
pub fn parse_kv_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            detail: format!("expected `key = value`, got {line:?}"),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
