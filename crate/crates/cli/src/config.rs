//! `key=value` config files merged underneath command-line flags.
//!
//! Each key names a long flag of the chosen subcommand (or a global flag).
//! Config values are spliced in right after the subcommand name, ahead of
//! the user's own flags, and the parser lets later occurrences win.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got {raw:?}", origin.display(), i + 1);
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            bail!("{}:{}: invalid key {key:?}", origin.display(), i + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Turns config entries into flags. `true` enables a switch, `false` drops it.
pub fn to_flags(entries: &[(String, String)]) -> Vec<String> {
    let mut flags = Vec::new();
    for (key, value) in entries {
        match value.as_str() {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            _ => {
                flags.push(format!("--{key}"));
                flags.push(value.clone());
            }
        }
    }
    flags
}

/// Returns `argv` with the `--config FILE` contents spliced after the
/// subcommand name. The `--config` flag itself stays in place.
pub fn merge_args(argv: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let mut config_path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            config_path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let flags = to_flags(&parse(&text, path)?);
    let Some(pos) = argv.iter().skip(1).position(|a| subcommands.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let at = pos + 2;
    let mut merged = argv[..at].to_vec();
    merged.extend(flags);
    merged.extend_from_slice(&argv[at..]);
    Ok(merged)
}
