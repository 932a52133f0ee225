//! `key=value` configuration files.
//!
//! Keys are long flag names without the dashes (`snr-db = 20`).  Blank
//! lines and lines starting with `#` are skipped.  Values from the file are
//! inserted ahead of the command-line flags, which therefore win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {line:?}", i + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn takes_value(arg: &clap::Arg) -> bool {
    arg.get_num_args().is_none_or(|n| n.takes_values())
}

/// Rewrites `args` so that the options in the `--config` file (if any)
/// precede the user's own flags for the selected subcommand.  Keys that
/// belong to another subcommand are skipped; keys no subcommand knows are
/// an error.
pub fn expand_args(cmd: &Command, args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    if let Some(bin) = it.next() {
        rest.push(bin);
    }
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a path")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let pairs = parse(&text).with_context(|| format!("in config {path}"))?;

    let Some(pos) = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(rest);
    };
    let Some(sub) = cmd.find_subcommand(&rest[pos]) else { return Ok(rest) };
    let mut inserted = Vec::new();
    for (key, value) in pairs {
        if let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) {
            if takes_value(arg) {
                inserted.push(format!("--{key}={value}"));
            } else if value.parse::<bool>().with_context(|| format!("{key} in {path} must be true or false"))? {
                inserted.push(format!("--{key}"));
            }
        } else if !cmd.get_subcommands().any(|s| s.get_arguments().any(|a| a.get_long() == Some(key.as_str()))) {
            bail!("unknown key {key:?} in config {path}");
        }
    }
    rest.splice(pos + 1..pos + 1, inserted);
    Ok(rest)
}
