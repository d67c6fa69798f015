//! Flat `key=value` settings, from a file or from command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Keys are lowercase with `-` folded to `_`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl Settings {
    pub fn new() -> Self {
        Settings::default()
    }

    /// Parses one `key=value` per line. Blank lines and lines starting
    /// with `#` are skipped; a key may appear only once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", n + 1))?;
            let key = normalize_key(k);
            if key.is_empty() {
                bail!("line {}: empty key", n + 1);
            }
            if s.map.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("line {}: `{key}` given twice", n + 1);
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Settings::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.map.insert(normalize_key(key), value.into());
    }

    /// Parses `key=value` as given to `--set`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| anyhow!("expected key=value, got `{pair}`"))?;
        self.set(k, v.trim());
        Ok(())
    }

    /// Entries of `other` replace ours.
    pub fn merge(&mut self, other: Settings) {
        self.map.extend(other.map);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn take_parsed<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.take(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("`{key}={v}`: {e}")))
            .transpose()
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take_parsed(key)?.unwrap_or(default))
    }

    /// Comma-separated list; `None` if the key is absent.
    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(v) = self.take(key) else { return Ok(None) };
        let items = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| anyhow!("`{key}`: bad entry `{s}`: {e}")))
            .collect::<Result<Vec<T>>>()?;
        if items.is_empty() {
            bail!("`{key}` is empty");
        }
        Ok(Some(items))
    }

    pub fn take_bool(&mut self, key: &str) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(false),
            Some("true" | "1" | "yes" | "on" | "") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(other) => bail!("`{key}` must be true or false, got `{other}`"),
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self, context: &str) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let keys: Vec<_> = self.map.into_keys().collect();
        bail!("unknown key(s) for {context}: {}", keys.join(", "))
    }
}

/// Accepts decimal numbers and fractions such as `1/16`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fraction(pub f64);

impl FromStr for Fraction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
        match s.split_once('/') {
            Some((a, b)) => Ok(Fraction(num(a)? / num(b)?)),
            None => num(s).map(Fraction),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_blanks() {
        let s = Settings::parse("# sweep\napp = wordcount\n\nn-particles=10\n").unwrap();
        assert_eq!(s.get("app"), Some("wordcount"));
        assert_eq!(s.get("n_particles"), Some("10"));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Settings::parse("novalue").is_err());
        assert!(Settings::parse("a=1\na=2").is_err());
        assert!(Settings::parse("=3").is_err());
    }

    #[test]
    fn typed_access() {
        let mut s = Settings::parse("ranks=8, 16,32\nalpha=1/16\nflag=yes\nx=abc").unwrap();
        assert_eq!(s.take_list::<usize>("ranks").unwrap(), Some(vec![8, 16, 32]));
        assert_eq!(s.take_or("alpha", Fraction(0.5)).unwrap(), Fraction(0.0625));
        assert!(s.take_bool("flag").unwrap());
        assert!(s.take_parsed::<u32>("x").is_err());
        s.finish("test").unwrap();
    }

    #[test]
    fn leftovers_are_reported() {
        let mut s = Settings::parse("a=1\nb=2").unwrap();
        s.take("a");
        let e = s.finish("wordcount").unwrap_err().to_string();
        assert!(e.contains('b') && e.contains("wordcount"));
    }

    #[test]
    fn later_settings_win() {
        let mut s = Settings::parse("seed=1\nreps=2").unwrap();
        let mut flags = Settings::new();
        flags.set("seed", "9");
        s.merge(flags);
        assert_eq!(s.get("seed"), Some("9"));
        assert_eq!(s.get("reps"), Some("2"));
    }

    proptest! {
        #[test]
        fn round_trip(entries in prop::collection::btree_map("[a-z][a-z0-9_]{0,8}", "[A-Za-z0-9.,:/ ]{0,12}", 0..10)) {
            let text: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
            let s = Settings::parse(&text).unwrap();
            for (k, v) in &entries {
                prop_assert_eq!(s.get(k), Some(v.trim()));
            }
        }
    }
}
