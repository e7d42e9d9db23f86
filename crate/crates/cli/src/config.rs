//! Run files: flag defaults read from a `key = value` text file.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment                 blank lines and comments are ignored
//! [train-koopman]           later keys apply to that command only
//! seed = 7                  key is a long flag name without the dashes
//! losses = "generator,consistency"
//! plateau = true            switches take true or false
//! ```
//!
//! Keys above the first section apply to every command that has the flag
//! and are skipped by the others. A key inside a section must be a flag of
//! that command. Flags given on the command line win over the file.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunFile {
    pub entries: Vec<Entry>,
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut section = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| CliError::Usage(format!("config line {}: {what}: `{raw}`", i + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| bad("unclosed section"))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let key = key.trim();
            if key.is_empty() || key.starts_with('-') {
                return Err(bad("bad key"));
            }
            entries.push(Entry {
                section: section.clone(),
                key: key.to_string(),
                value: unquote(value.trim()).to_string(),
                line: i + 1,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Flag arguments for `cmd`, leaving out keys in `given`.
    pub fn args_for(&self, cmd: &Command, given: &HashSet<String>) -> Result<Vec<String>, CliError> {
        let name = cmd.get_name();
        let mut out = Vec::new();
        for e in &self.entries {
            match &e.section {
                Some(s) if s != name => continue,
                _ => {}
            }
            let arg = cmd.get_arguments().find(|a| a.get_long() == Some(e.key.as_str()));
            let Some(arg) = arg else {
                if e.section.is_some() {
                    return Err(CliError::Usage(format!(
                        "config line {}: `{name}` has no flag --{}",
                        e.line, e.key
                    )));
                }
                continue;
            };
            if given.contains(&e.key) {
                continue;
            }
            if matches!(arg.get_action(), ArgAction::SetTrue) {
                match e.value.as_str() {
                    "true" => out.push(format!("--{}", e.key)),
                    "false" => {}
                    v => {
                        return Err(CliError::Usage(format!(
                            "config line {}: switch {} takes true or false, got `{v}`",
                            e.line, e.key
                        )))
                    }
                }
            } else {
                out.push(format!("--{}", e.key));
                out.push(e.value.clone());
            }
        }
        Ok(out)
    }
}

/// Long flag names present in `args`.
fn given_flags(args: &[OsString]) -> HashSet<String> {
    args.iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect()
}

/// Removes `--config FILE` from `argv` and splices the file's flags in right
/// after the subcommand name. `root` is the full command tree.
pub fn expand_argv(argv: Vec<OsString>, root: &Command) -> Result<Vec<OsString>, CliError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => {
                let path = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
                config = Some(path);
            }
            Some(s) if s.starts_with("--config=") => config = Some(s["--config=".len()..].into()),
            _ => rest.push(a),
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let file = RunFile::load(Path::new(&path))?;
    let pos = rest
        .iter()
        .skip(1)
        .position(|a| a.to_str().is_some_and(|s| root.find_subcommand(s).is_some()))
        .map(|p| p + 1);
    let Some(pos) = pos else {
        return Ok(rest);
    };
    let sub = root
        .find_subcommand(rest[pos].to_str().expect("matched as str"))
        .expect("matched above");
    let extra = file.args_for(sub, &given_flags(&rest[pos + 1..]))?;
    let tail = rest.split_off(pos + 1);
    rest.extend(extra.into_iter().map(OsString::from));
    rest.extend(tail);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, ArgAction};

    fn root() -> Command {
        Command::new("kflow").subcommand(
            Command::new("train")
                .arg(Arg::new("seed").long("seed"))
                .arg(Arg::new("steps").long("steps"))
                .arg(Arg::new("fast").long("fast").action(ArgAction::SetTrue)),
        )
    }

    fn argv(s: &str) -> Vec<OsString> {
        s.split_whitespace().map(OsString::from).collect()
    }

    #[test]
    fn parses_sections_comments_and_quotes() {
        let f = RunFile::parse("# top\nseed = 3\n\n[train]\nsteps=\"10\"\n").unwrap();
        assert_eq!(f.entries.len(), 2);
        assert_eq!(f.entries[0].section, None);
        assert_eq!(f.entries[1].section.as_deref(), Some("train"));
        assert_eq!(f.entries[1].value, "10");
        assert!(RunFile::parse("seed 3").is_err());
        assert!(RunFile::parse("[train\nseed=1").is_err());
    }

    #[test]
    fn command_line_wins_and_unknown_global_keys_are_skipped() {
        let f = RunFile::parse("seed = 3\nsteps = 5\nunrelated = 1\nfast = true\n").unwrap();
        let cmd = root();
        let sub = cmd.find_subcommand("train").unwrap();
        let given: HashSet<String> = ["steps".to_string()].into();
        assert_eq!(f.args_for(sub, &given).unwrap(), ["--seed", "3", "--fast"]);
    }

    #[test]
    fn section_keys_must_exist() {
        let f = RunFile::parse("[train]\nnope = 1\n").unwrap();
        let cmd = root();
        let err = f.args_for(cmd.find_subcommand("train").unwrap(), &HashSet::new());
        assert!(matches!(err, Err(CliError::Usage(_))));
    }

    #[test]
    fn expands_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 3\nsteps = 5\n").unwrap();
        let mut a = argv("kflow train --steps 9 --config");
        a.push(path.into_os_string());
        let out = expand_argv(a, &root()).unwrap();
        assert_eq!(out, argv("kflow train --seed 3 --steps 9"));
    }
}
