//! Flag > config file > default resolution, with a record of what was
//! used so outputs can echo their effective configuration.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub struct Settings {
    command: String,
    file: BTreeMap<String, (usize, String)>,
    used: RefCell<BTreeSet<String>>,
    echoed: RefCell<Vec<(String, String)>>,
}

impl Settings {
    pub fn new(command: &str, config: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1))
                })?;
                // flag spelling and underscore spelling are both accepted
                let key = k.trim().trim_start_matches("--").replace('-', "_");
                file.insert(key, (i + 1, v.trim().to_string()));
            }
        }
        Ok(Settings {
            command: command.to_string(),
            file,
            used: RefCell::default(),
            echoed: RefCell::default(),
        })
    }

    fn lookup<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        self.used.borrow_mut().insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config line {line}: bad value for {key}: {v:?}"))),
            None => Ok(None),
        }
    }

    /// Adds a derived setting to the echo.
    pub fn note(&self, key: &str, value: impl Display) {
        self.echo(key, value.to_string());
    }

    fn echo(&self, key: &str, value: String) {
        self.echoed.borrow_mut().push((key.to_string(), value));
    }

    /// A tunable with a built-in default.
    pub fn get<T: FromStr + Display>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.echo(key, v.to_string());
        Ok(v)
    }

    /// A tunable that may stay unset.
    pub fn opt<T: FromStr + Display>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let v = self.lookup(key, flag)?;
        self.echo(key, v.as_ref().map_or("none".into(), T::to_string));
        Ok(v)
    }

    /// A value with no default; its absence is a usage error.
    pub fn require<T: FromStr + Display>(&self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        let v = self
            .lookup(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("{}: --{} is required", self.command, key.replace('_', "-"))))?;
        self.echo(key, v.to_string());
        Ok(v)
    }

    /// Resolved but not echoed: settings that cannot change results.
    pub fn silent<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        self.lookup(key, flag)
    }

    /// Paths are resolved like tunables but left out of the echo, so that
    /// reports do not depend on where files live.
    pub fn path(&self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        self.lookup(key, flag)
    }

    pub fn require_path(&self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("{}: --{} is required", self.command, key.replace('_', "-"))))
    }

    pub fn flag(&self, key: &str, set: bool) -> Result<bool, CliError> {
        let v = set || self.lookup::<bool>(key, None)?.unwrap_or(false);
        self.echo(key, v.to_string());
        Ok(v)
    }

    /// Rejects config keys the command never asked for.
    pub fn finish(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        if let Some((k, (line, _))) = self.file.iter().find(|(k, _)| !used.contains(*k)) {
            return Err(CliError::Usage(format!(
                "config line {line}: {k} is not a setting of {}",
                self.command
            )));
        }
        Ok(())
    }

    /// `# mrasp <command>` followed by one `# key=value` line per setting.
    pub fn header(&self) -> String {
        let mut s = format!("# mrasp {}\n", self.command);
        for (k, v) in self.echoed.borrow().iter() {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_config_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "# comment\nlr=0.5\n--steps=7\nwarmup = 2\n").unwrap();
        let s = Settings::new("pretrain", Some(&p)).unwrap();
        assert_eq!(s.get("lr", Some(0.1), 1.0).unwrap(), 0.1);
        assert_eq!(s.get("steps", None, 100u64).unwrap(), 7);
        assert_eq!(s.get("dropout", None, 0.3).unwrap(), 0.3);
        assert!(matches!(s.finish(), Err(CliError::Usage(_))));
        assert_eq!(s.get("warmup", None, 0u64).unwrap(), 2);
        s.finish().unwrap();
        assert_eq!(s.header(), "# mrasp pretrain\n# lr=0.1\n# steps=7\n# dropout=0.3\n# warmup=2\n");
    }

    #[test]
    fn bad_values_and_missing_requirements_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "lr=fast\n").unwrap();
        let s = Settings::new("x", Some(&p)).unwrap();
        assert!(matches!(s.get("lr", None, 1.0), Err(CliError::Usage(_))));
        assert!(matches!(s.require::<u64>("seed", None), Err(CliError::Usage(m)) if m.contains("--seed")));
        fs::write(&p, "no equals sign\n").unwrap();
        assert!(matches!(Settings::new("x", Some(&p)), Err(CliError::Usage(_))));
    }
}
