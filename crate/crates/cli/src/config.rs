//! Flat `key = value` run configuration. Flags override config-file entries;
//! every key is checked against the subcommand that reads it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mpme_core::{DensityProfile, GFunction, Kernel};
use serde::Serialize;

/// A failure attributable to the user's input, reported with exit code 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub type Checked<T> = std::result::Result<T, Invalid>;

fn invalid<T>(key: &str, reason: impl fmt::Display) -> Checked<T> {
    Err(Invalid(format!("invalid value for `{key}`: {reason}")))
}

/// Resolved parameters of one invocation.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub params: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            params: BTreeMap::new(),
        }
    }

    /// Reads `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn merge_file(&mut self, path: &Path, allowed: &[&str]) -> Checked<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config file {}: {e}", path.display())))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Invalid(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    n + 1
                )));
            };
            let key = key.trim();
            if !allowed.contains(&key) {
                return Err(Invalid(format!(
                    "{}:{}: unknown key `{key}` for `{}`",
                    path.display(),
                    n + 1,
                    self.subcommand
                )));
            }
            self.params
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.params.insert(key.to_string(), value.into());
    }

    pub fn set_default(&mut self, key: &str, value: impl Into<String>) {
        self.params
            .entry(key.to_string())
            .or_insert_with(|| value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn has(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn require(&self, key: &str) -> Checked<&str> {
        self.raw(key)
            .ok_or_else(|| Invalid(format!("missing required parameter `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Checked<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .or_else(|e| invalid(key, format!("`{raw}`: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Checked<T>
    where
        T::Err: fmt::Display,
    {
        if self.has(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Checked<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        let items = raw
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().or_else(|e| invalid(key, format!("`{s}`: {e}"))))
            .collect::<Checked<Vec<T>>>()?;
        if items.is_empty() {
            return invalid(key, "empty list");
        }
        Ok(items)
    }

    /// `g = example1|example2|example3|file:<path>` with its parameter.
    pub fn g_function(&self) -> Checked<GFunction> {
        let family = self.require("g")?;
        let built = match family {
            "example1" => GFunction::example1(self.get("q")?),
            "example2" => GFunction::example2(self.get("beta")?),
            "example3" => GFunction::example3(self.get("gamma")?),
            other => match other.strip_prefix("file:") {
                Some(path) => GFunction::from_table_file(Path::new(path)),
                None => return invalid("g", format!("unknown family `{other}`")),
            },
        };
        built.or_else(|e| invalid("g", e))
    }

    /// `m = 2|3|zero-range`.
    pub fn kernel(&self) -> Checked<Kernel> {
        match self.require("m")? {
            "zero-range" | "zr" => Ok(Kernel::ZeroRange),
            raw => {
                let m: u32 = raw
                    .parse()
                    .or_else(|e| invalid("m", format!("`{raw}`: {e}")))?;
                Kernel::from_m(m).or_else(|e| invalid("m", e))
            }
        }
    }

    pub fn profile(&self, key: &str, dim: usize) -> Checked<DensityProfile> {
        DensityProfile::parse(self.require(key)?, dim).or_else(|e| invalid(key, e))
    }

    /// `# key = value` lines for CSV and text outputs.
    pub fn comment_header(&self) -> String {
        let mut out = format!("# subcommand = {}\n", self.subcommand);
        for (k, v) in &self.params {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_entries_are_overridden_by_later_sets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# plan\nN = 64\nt=0.1 # macro\n\n").unwrap();
        let mut cfg = RunConfig::new("simulate");
        cfg.merge_file(&path, &["N", "t"]).unwrap();
        cfg.set("N", "128");
        assert_eq!(cfg.get::<usize>("N").unwrap(), 128);
        assert_eq!(cfg.get::<f64>("t").unwrap(), 0.1);
    }

    #[test]
    fn unknown_file_key_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "bogus = 1\n").unwrap();
        let err = RunConfig::new("pde").merge_file(&path, &["N"]).unwrap_err();
        assert!(err.0.contains("bogus"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::new("pde");
        cfg.set("M", "many");
        assert!(cfg.get::<usize>("M").unwrap_err().0.contains("`M`"));
        cfg.set("N", "64,x");
        assert!(cfg.list::<usize>("N").unwrap_err().0.contains("`N`"));
        cfg.set("g", "example9");
        assert!(cfg.g_function().is_err());
    }

    #[test]
    fn kernels_parse() {
        let mut cfg = RunConfig::new("simulate");
        for (raw, kernel) in [
            ("2", Kernel::Quadratic),
            ("3", Kernel::Cubic),
            ("zero-range", Kernel::ZeroRange),
        ] {
            cfg.set("m", raw);
            assert_eq!(cfg.kernel().unwrap(), kernel);
        }
        cfg.set("m", "4");
        assert!(cfg.kernel().is_err());
    }
}
