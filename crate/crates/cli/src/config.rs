//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are
//! case-insensitive; `-` and `_` are interchangeable. Later duplicates
//! override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use twostage::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl Config {
    /// Parses `text`, rejecting any key not in `allowed`.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key = value, got '{content}'"),
            })?;
            let key = normalize(key);
            if key.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty key".into(),
                });
            }
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key '{key}' (allowed: {})", allowed.join(", ")),
                });
            }
            entries.insert(key, (value.trim().to_string(), line));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path, allowed: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::parse(&text, allowed)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize(key)).map(|(v, _)| v.as_str())
    }

    /// Parses the value of `key`, naming the key and line on failure.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((value, line)) = self.entries.get(&normalize(key)) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|e| Error::Parse {
            line: *line,
            message: format!("invalid value '{value}' for key '{key}': {e}"),
        })
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((value, line)) = self.entries.get(&normalize(key)) else {
            return Ok(None);
        };
        value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                item.parse().map_err(|e| Error::Parse {
                    line: *line,
                    message: format!("invalid item '{item}' for key '{key}': {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let cfg = Config::parse("# grid\nreps = 20\n\nsigma-c = 0.1, 0.2\n", &["reps", "sigma_c"]).unwrap();
        assert_eq!(cfg.get::<usize>("reps").unwrap(), Some(20));
        assert_eq!(cfg.get_list::<f64>("sigma_c").unwrap(), Some(vec![0.1, 0.2]));
        assert_eq!(cfg.get::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn errors_name_keys_and_lines() {
        let err = Config::parse("reps = 2\nrepz = 3\n", &["reps"]).unwrap_err();
        assert!(matches!(&err, Error::Parse { line: 2, message } if message.contains("'repz'")), "{err}");
        let cfg = Config::parse("reps = many\n", &["reps"]).unwrap();
        let err = cfg.get::<usize>("reps").unwrap_err();
        assert!(err.to_string().contains("'reps'"), "{err}");
        assert!(Config::parse("just words\n", &["reps"]).is_err());
    }
}
