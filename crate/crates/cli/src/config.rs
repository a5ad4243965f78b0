//! `key=value` defaults. A key names a long flag; `sub.key` applies only
//! to that subcommand. Flags given on the command line win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

pub const CONFIG_ENV: &str = "ADAPTNMT_CONFIG";

#[derive(Debug)]
pub enum ConfigError {
    Read(PathBuf, std::io::Error),
    Syntax(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(p, e) => write!(f, "cannot read config {}: {e}", p.display()),
            ConfigError::Syntax(m) => f.write_str(m),
        }
    }
}

/// `--config PATH` from argv, else the environment variable.
pub fn locate(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

pub fn parse(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
    parse(&text)
}

fn leaf<'a>(mut cmd: &'a Command, mut m: &'a ArgMatches) -> (Vec<String>, &'a Command, &'a ArgMatches) {
    let mut path = Vec::new();
    while let Some((name, sub)) = m.subcommand() {
        path.push(name.to_string());
        cmd = cmd.find_subcommand(name).expect("matched subcommand exists");
        m = sub;
    }
    (path, cmd, m)
}

fn truthy(v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::Syntax(format!("expected a boolean, got {v:?}"))),
    }
}

/// Extra argv tokens for config entries the command line left unset.
/// Namespaced keys for other subcommands are skipped, as are bare keys the
/// active subcommand does not have; a namespaced key it does not have is
/// reported so typos surface.
pub fn defaults(
    root: &Command,
    matches: &ArgMatches,
    entries: &[(String, String)],
) -> Result<Vec<OsString>, ConfigError> {
    let (path, cmd, m) = leaf(root, matches);
    let mut extra = Vec::new();
    for (key, value) in entries {
        let (scope, name) = match key.rsplit_once('.') {
            Some((s, n)) => (Some(s), n),
            None => (None, key.as_str()),
        };
        if let Some(s) = scope {
            if !path.iter().any(|p| p == s) {
                continue;
            }
        }
        if name == "config" {
            continue;
        }
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(name)) else {
            if scope.is_some() {
                return Err(ConfigError::Syntax(format!("config key {key}: no such flag --{name}")));
            }
            continue;
        };
        let id = arg.get_id().as_str();
        if m.value_source(id) == Some(ValueSource::CommandLine) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(OsString::from(format!("--{name}")));
            extra.push(OsString::from(value));
        } else if truthy(value).map_err(|e| ConfigError::Syntax(format!("config key {key}: {e}")))? {
            extra.push(OsString::from(format!("--{name}")));
        }
    }
    Ok(extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let e = parse("# c\n\nseed = 3\ntrain.epochs=2\n").unwrap();
        assert_eq!(e, vec![("seed".into(), "3".into()), ("train.epochs".into(), "2".into())]);
        assert!(parse("novalue\n").is_err());
        assert!(parse("=1\n").is_err());
    }

    #[test]
    fn command_line_flag_beats_config_file() {
        let cmd = Command::new("t").subcommand(
            Command::new("run")
                .arg(clap::Arg::new("epochs").long("epochs"))
                .arg(clap::Arg::new("seed").long("seed")),
        );
        let m = cmd.clone().get_matches_from(["t", "run", "--epochs", "5"]);
        let entries = vec![("epochs".into(), "9".into()), ("run.seed".into(), "4".into()), ("other.x".into(), "1".into())];
        let extra = defaults(&cmd, &m, &entries).unwrap();
        assert_eq!(extra, vec![OsString::from("--seed"), OsString::from("4")]);
        let bad = vec![("run.nope".into(), "1".into())];
        assert!(defaults(&cmd, &m, &bad).is_err());
    }
}
