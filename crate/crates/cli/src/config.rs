//! `key = value` config files with `[section]` headers.
//!
//! Keys before the first header, or under `[global]`, apply to global
//! flags; `[<command>]` sections apply to that subcommand. Keys are long
//! flag names (`run-dir` or `run_dir`). Flags on the command line win.

use std::ffi::OsString;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Command};
use indexmap::IndexMap;

#[derive(Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub sections: IndexMap<String, IndexMap<String, String>>,
}

pub fn parse(text: &str) -> Result<ConfigFile> {
    let mut cfg = ConfigFile::default();
    let mut section = "global".to_string();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`, got `{raw}`", i + 1);
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        cfg.sections.entry(section.clone()).or_default().insert(key, value);
    }
    Ok(cfg)
}

fn from_command_line(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

/// Appends config values for every flag the command line left unset.
fn fill(cmd: &Command, m: &ArgMatches, values: &IndexMap<String, String>, section: &str, out: &mut Vec<OsString>) -> Result<()> {
    for (key, value) in values {
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            bail!("config [{section}]: `{key}` is not a flag of this command");
        };
        if from_command_line(m, arg.get_id().as_str()) {
            continue;
        }
        if arg.get_action().takes_values() {
            out.push(format!("--{key}={value}").into());
        } else {
            match value.as_str() {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => bail!("config [{section}]: `{key}` is a switch, expected true or false"),
            }
        }
    }
    Ok(())
}

/// Rewrites `argv` so that values from `--config` fill unset flags.
pub fn merge_args(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>> {
    // Required flags may come from the file, so the first pass is lenient.
    let m = cmd.clone().ignore_errors(true).try_get_matches_from(argv.clone())?;
    let Some(path) = m.get_one::<std::path::PathBuf>("config") else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = parse(&text)?;
    let Some((name, sub)) = m.subcommand() else {
        return Ok(argv);
    };
    let subcmd = cmd.find_subcommand(name).expect("matched subcommand exists");
    let mut out = argv;
    for (section, values) in &cfg.sections {
        if section == "global" {
            fill(cmd, &m, values, section, &mut out)?;
        } else if section == name {
            fill(subcmd, sub, values, section, &mut out)?;
        } else if cmd.find_subcommand(section).is_none() {
            bail!("config section [{section}] names no command");
        }
    }
    Ok(out)
}

/// Resolved values of every argument the subcommand received, in
/// declaration order; the run directory and config path are left out.
pub fn resolved(cmd: &Command, m: &ArgMatches) -> IndexMap<String, String> {
    let mut out = IndexMap::new();
    let mut push = |c: &Command, m: &ArgMatches| {
        for arg in c.get_arguments() {
            let id = arg.get_id().as_str();
            if matches!(id, "config" | "run_dir" | "help" | "version") {
                continue;
            }
            if let Ok(Some(vals)) = m.try_get_raw(id) {
                let v: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
                out.insert(arg.get_long().unwrap_or(id).to_string(), v.join(","));
            } else if !arg.get_action().takes_values() {
                if let Ok(Some(b)) = m.try_get_one::<bool>(id) {
                    out.insert(arg.get_long().unwrap_or(id).to_string(), b.to_string());
                }
            }
        }
    };
    push(cmd, m);
    if let Some((name, sub)) = m.subcommand() {
        push(cmd.find_subcommand(name).expect("matched subcommand exists"), sub);
    }
    out
}
