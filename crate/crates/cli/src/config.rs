//! Flat `key = value` config files merged into the argument list.
//!
//! Keys are long flag names without dashes. Values for the chosen subcommand
//! are spliced in right after the subcommand token and global ones right
//! after the program name, so anything given on the command line comes later
//! and overrides them.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

#[derive(Debug, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

const GLOBAL_VALUED: [&str; 3] = ["--seed", "--log-level", "--config"];

/// `(key, value, line number)` entries of a config file.
pub fn parse(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected key = value", i + 1)));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", i + 1)));
        }
        out.push((key.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Path given with `--config`, if any.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            return None;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(rest.into());
        }
    }
    None
}

/// Position of the subcommand token.
fn subcommand_pos(args: &[OsString], cmd: &Command) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if GLOBAL_VALUED.contains(&a.as_ref()) {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            return cmd.find_subcommand(a.as_ref()).map(|_| i);
        }
        i += 1;
    }
    None
}

fn as_flag(
    cmd: &Command,
    key: &str,
    value: &str,
    line: usize,
) -> Result<Option<OsString>, ConfigError> {
    let arg = cmd
        .get_arguments()
        .find(|a| a.get_long() == Some(key))
        .ok_or_else(|| ConfigError(format!("line {line}: unknown key {key:?}")))?;
    if matches!(arg.get_action(), ArgAction::SetTrue) {
        return match value {
            "true" => Ok(Some(format!("--{key}").into())),
            "false" => Ok(None),
            other => Err(ConfigError(format!(
                "line {line}: {key} expects true or false, got {other:?}"
            ))),
        };
    }
    Ok(Some(format!("--{key}={value}").into()))
}

/// Returns `args` with config-file values spliced in.
pub fn merge(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| ConfigError(format!("{}: {e}", Path::new(&path).display())))?;
    let entries = parse(&text)?;

    let sub_at = subcommand_pos(&args, cmd);
    let sub = sub_at.and_then(|i| cmd.find_subcommand(args[i].to_string_lossy().as_ref()));
    let mut global = Vec::new();
    let mut local = Vec::new();
    for (key, value, line) in entries {
        if key == "config" {
            return Err(ConfigError(format!(
                "line {line}: config files cannot nest"
            )));
        }
        if cmd
            .get_arguments()
            .any(|a| a.get_long() == Some(key.as_str()))
        {
            global.extend(as_flag(cmd, &key, &value, line)?);
            continue;
        }
        match sub {
            Some(sc) => local.extend(as_flag(sc, &key, &value, line)?),
            None => return Err(ConfigError(format!("line {line}: unknown key {key:?}"))),
        }
    }

    let mut out = Vec::with_capacity(args.len() + global.len() + local.len());
    out.push(args[0].clone());
    out.extend(global);
    match sub_at {
        Some(i) => {
            out.extend(args[1..=i].iter().cloned());
            out.extend(local);
            out.extend(args[i + 1..].iter().cloned());
        }
        None => out.extend(args[1..].iter().cloned()),
    }
    Ok(out)
}
