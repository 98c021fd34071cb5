//! Config files mirror the command-line flags: top-level keys are global
//! flags, a table named after the subcommand holds that command's flags.
//! Values from the file are turned into arguments and only used for flags
//! not given on the command line.

use std::path::Path;

use clap::Parser;
use serde_json::Value;

use crate::args::Cli;

pub enum ParseFailure {
    Clap(clap::Error),
    Config(String),
}

fn load(path: &Path) -> Result<serde_json::Map<String, Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?
    } else {
        let table: toml::Table = text.parse().map_err(|e| format!("config {}: {e}", path.display()))?;
        serde_json::to_value(table).map_err(|e| format!("config {}: {e}", path.display()))?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(format!("config {} must be a table", path.display())),
    }
}

fn flag_given(argv: &[String], flag: &str) -> bool {
    argv.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

fn scalar(key: &str, v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("config key `{key}`: unsupported value {other}")),
    }
}

/// Arguments for the flags in `table` that `user_argv` does not set.
/// Nested tables are skipped here (they belong to subcommands).
pub fn to_args(table: &serde_json::Map<String, Value>, user_argv: &[String]) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        if key == "config" || value.is_object() || flag_given(user_argv, &flag) {
            continue;
        }
        match value {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    out.push(flag.clone());
                    out.push(scalar(key, item)?);
                }
            }
            other => {
                out.push(flag);
                out.push(scalar(key, other)?);
            }
        }
    }
    Ok(out)
}

pub fn parse_with_config(argv: &[String]) -> Result<Cli, ParseFailure> {
    let first = Cli::try_parse_from(argv).map_err(ParseFailure::Clap)?;
    let Some(path) = first.global.config.clone() else {
        return Ok(first);
    };
    let table = load(&path).map_err(ParseFailure::Config)?;
    let user = &argv[1..];
    let global = to_args(&table, user).map_err(ParseFailure::Config)?;
    let command = match table.get(first.command.name()) {
        Some(Value::Object(t)) => to_args(t, user).map_err(ParseFailure::Config)?,
        Some(_) => {
            return Err(ParseFailure::Config(format!(
                "config key `{}` must be a table",
                first.command.name()
            )))
        }
        None => Vec::new(),
    };
    let mut merged = vec![argv[0].clone()];
    merged.extend(global);
    merged.extend(user.iter().cloned());
    merged.extend(command);
    Cli::try_parse_from(merged).map_err(ParseFailure::Clap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::Command;

    fn argv(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_fills_unset_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kubench.toml");
        std::fs::write(
            &path,
            "seed = 7\nout_dir = \"from-config\"\n[evaluate]\nmodel = [\"a\", \"b\"]\nn = 6\n[coverage]\nalpha = 0.01\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let cli = parse_with_config(&argv(&[
            "kubench", "--config", p, "--seed", "3", "evaluate", "--n", "8",
        ]))
        .ok()
        .unwrap();
        assert_eq!(cli.global.seed, 3);
        assert_eq!(cli.global.out_dir, Path::new("from-config"));
        let Command::Evaluate(e) = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(e.model, ["a", "b"]);
        assert_eq!(e.n, 8);
    }

    #[test]
    fn json_config_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"gateway": "live", "coverage": {"reference": "pooled"}}"#).unwrap();
        let p = path.to_str().unwrap();
        let cli = parse_with_config(&argv(&["kubench", "coverage", "--config", p]))
            .ok()
            .unwrap();
        assert_eq!(cli.global.gateway, crate::args::GatewayArg::Live);
        std::fs::write(&path, r#"{"seed": {"x": 1}, "coverage": 3}"#).unwrap();
        assert!(matches!(
            parse_with_config(&argv(&["kubench", "coverage", "--config", p])),
            Err(ParseFailure::Config(_))
        ));
    }
}
