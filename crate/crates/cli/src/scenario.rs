//! Line-oriented scenario files: `key = value` entries grouped under
//! `[section]` headers, `#` comments. Every key must be consumed by the
//! command that runs the scenario; leftovers are configuration errors, so
//! typos never silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub struct ConfigError {
    pub message: String,
}

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError { message: msg.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    consumed: std::cell::Cell<bool>,
}

/// A parsed scenario file.
#[derive(Debug, Default)]
pub struct Scenario {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current = String::new();
        sections.entry(current.clone()).or_default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        ConfigError::new(format!("line {line_no}: unterminated section header"))
                    })?
                    .trim()
                    .to_string();
                if name.is_empty() {
                    return Err(ConfigError::new(format!("line {line_no}: empty section name")));
                }
                current = name;
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::new(format!(
                    "line {line_no}: expected `key = value`, got `{line}`"
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::new(format!("line {line_no}: empty key")));
            }
            let section = sections.entry(current.clone()).or_default();
            if section
                .insert(
                    key.clone(),
                    Entry { value, line: line_no, consumed: std::cell::Cell::new(false) },
                )
                .is_some()
            {
                return Err(ConfigError::new(format!(
                    "line {line_no}: duplicate key `{key}` in section [{current}]"
                )));
            }
        }
        Ok(Scenario { sections })
    }

    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?;
        Scenario::parse(&text)
    }

    pub fn section(&self, name: &str) -> Section<'_> {
        Section { scenario: self, name: name.to_string() }
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.get(name).is_some_and(|s| !s.is_empty())
    }

    /// Error on any key no command consumed.
    pub fn check_consumed(&self) -> Result<(), ConfigError> {
        for (section, entries) in &self.sections {
            for (key, entry) in entries {
                if !entry.consumed.get() {
                    let place = if section.is_empty() {
                        "top level".to_string()
                    } else {
                        format!("section [{section}]")
                    };
                    return Err(ConfigError::new(format!(
                        "line {}: unknown key `{key}` in {place} for this command",
                        entry.line
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical serialization of the effective configuration, hashed into
    /// the manifest.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        for (section, entries) in &self.sections {
            for (key, entry) in entries {
                out.push_str(section);
                out.push('.');
                out.push_str(key);
                out.push('=');
                out.push_str(&entry.value);
                out.push('\n');
            }
        }
        out
    }
}

pub struct Section<'a> {
    scenario: &'a Scenario,
    name: String,
}

impl<'a> Section<'a> {
    fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.scenario.sections.get(&self.name).and_then(|s| s.get(key))
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.entry(key).map(|e| {
            e.consumed.set(true);
            e.value.clone()
        })
    }

    pub fn require_str(&self, key: &str) -> Result<String, ConfigError> {
        self.get_str(key).ok_or_else(|| {
            ConfigError::new(format!("missing key `{key}` in section [{}]", self.name))
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => {
                e.consumed.set(true);
                e.value.parse::<f64>().map(Some).map_err(|_| {
                    ConfigError::new(format!(
                        "line {}: key `{key}` must be a number, got `{}`",
                        e.line, e.value
                    ))
                })
            }
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.get_f64(key)?.unwrap_or(default))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get_f64(key)?.ok_or_else(|| {
            ConfigError::new(format!("missing key `{key}` in section [{}]", self.name))
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => {
                e.consumed.set(true);
                e.value.parse::<usize>().map(Some).map_err(|_| {
                    ConfigError::new(format!(
                        "line {}: key `{key}` must be a nonnegative integer, got `{}`",
                        e.line, e.value
                    ))
                })
            }
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.get_usize(key)?.unwrap_or(default))
    }

    pub fn get_i64(&self, key: &str) -> Result<Option<i64>, ConfigError> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => {
                e.consumed.set(true);
                e.value.parse::<i64>().map(Some).map_err(|_| {
                    ConfigError::new(format!(
                        "line {}: key `{key}` must be an integer, got `{}`",
                        e.line, e.value
                    ))
                })
            }
        }
    }

    pub fn i64_or(&self, key: &str, default: i64) -> Result<i64, ConfigError> {
        Ok(self.get_i64(key)?.unwrap_or(default))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        Ok(self.get_i64(key)?.map(|v| v as u64))
    }
}

/// FNV-1a over the canonical config text; recorded in every manifest so a
/// changed tolerance changes the hash.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
