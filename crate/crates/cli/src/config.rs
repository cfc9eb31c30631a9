// SPDX-License-Identifier: Apache-2.0

//! `--config FILE` support.
//!
//! The file is TOML. Top-level keys and keys under a table named after the
//! subcommand become long flags (`theta_geo = 24` is `--theta-geo 24`).
//! They are inserted right after the subcommand, so flags given on the
//! command line win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use toml::Value;

use crate::Invalid;

/// Returns `args` with any config file expanded into flags.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(sub_pos) = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
    else {
        return Ok(args);
    };
    let subcommand = args[sub_pos].to_string_lossy().into_owned();
    let mut path = None;
    let mut i = sub_pos + 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            path = args.get(i + 1).cloned();
            i += 1;
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.into());
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let flags = flags_from_file(Path::new(&path), &subcommand)?;
    let mut out = args[..=sub_pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[sub_pos + 1..]);
    Ok(out)
}

fn flags_from_file(path: &Path, subcommand: &str) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Invalid(format!("config {}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (k, v) in &table {
        if !v.is_table() {
            push_flag(&mut flags, k, v)?;
        }
    }
    if let Some(Value::Table(section)) = table.get(subcommand) {
        for (k, v) in section {
            push_flag(&mut flags, k, v)?;
        }
    }
    Ok(flags)
}

fn push_flag(flags: &mut Vec<OsString>, key: &str, value: &Value) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| -> Result<String> {
        Ok(match v {
            Value::String(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Float(f) => f.to_string(),
            Value::Boolean(b) => b.to_string(),
            Value::Datetime(d) => d.to_string(),
            _ => bail!(Invalid(format!(
                "config key {key}: nested values are not supported"
            ))),
        })
    };
    match value {
        Value::Boolean(true) => flags.push(flag.into()),
        Value::Boolean(false) => {}
        Value::Array(items) => {
            let joined = items
                .iter()
                .map(scalar)
                .collect::<Result<Vec<_>>>()?
                .join(",");
            flags.push(flag.into());
            flags.push(joined.into());
        }
        v => {
            flags.push(flag.into());
            flags.push(scalar(v)?.into());
        }
    }
    Ok(())
}
