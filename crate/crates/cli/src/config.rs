//! Optional TOML config file. Each subcommand reads the table named after
//! it; keys are flag names (`grid_step` or `grid-step`). A top-level `jobs`
//! key is also accepted. Values are turned into flags and placed before the
//! user's own flags, except where the user already passed that flag.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

const GLOBAL_WITH_VALUE: [&str; 2] = ["--config", "--jobs"];

/// Locate `--config` and the subcommand in raw arguments.
fn scan(args: &[OsString]) -> (Option<PathBuf>, Option<usize>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if GLOBAL_WITH_VALUE.contains(&a.as_ref()) {
            i += 1;
        } else if a == "--" {
            break;
        } else if !a.starts_with('-') && sub.is_none() {
            sub = Some(i);
            // `--config` may also follow the subcommand
        }
        i += 1;
    }
    (config, sub)
}

fn flag_given(args: &[OsString], flag: &str) -> bool {
    let with_eq = format!("{flag}=");
    args.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&with_eq)
    })
}

fn value_to_string(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(|x| value_to_string(key, x))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => bail!("config key {key:?} has an unsupported value type"),
    })
}

fn flags_for(
    key: &str,
    value: &toml::Value,
    args: &[OsString],
    out: &mut Vec<OsString>,
) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    if flag_given(args, &flag) {
        return Ok(());
    }
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::Array(items) if items.iter().any(|x| x.is_str()) && !items.is_empty() => {
            for item in items {
                out.push(flag.clone().into());
                out.push(value_to_string(key, item)?.into());
            }
        }
        other => {
            out.push(flag.into());
            out.push(value_to_string(key, other)?.into());
        }
    }
    Ok(())
}

/// Arguments with config-file values merged in.
pub fn merge(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let (path, sub) = scan(&args);
    let (Some(path), Some(sub)) = (path, sub) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let name = args[sub].to_string_lossy().into_owned();
    let mut injected = Vec::new();
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) if *key == name => {
                for (k, v) in section {
                    flags_for(k, v, &args, &mut injected)?;
                }
            }
            toml::Value::Table(_) => {}
            v if key == "jobs" => flags_for(key, v, &args, &mut injected)?,
            _ => bail!("unknown top-level config key {key:?}"),
        }
    }
    let mut merged = args[..=sub].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&args[sub + 1..]);
    Ok(merged)
}
