//! Effective run configuration: defaults, then a config file (flat dotted
//! `key=value` lines or a previously emitted `manifest.json`), then flag
//! overrides. The merged map is echoed into every output manifest, and a
//! manifest alone is enough to re-run the command.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde_json::Value;

/// Exit code 2: argument/config errors. Exit code 1: runtime failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<voxbayes::Error> for CliError {
    fn from(e: voxbayes::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Default)]
pub struct Cfg {
    map: BTreeMap<String, String>,
}

impl Cfg {
    pub fn new() -> Self {
        Cfg::default()
    }

    pub fn set_default(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn set_flag<T: Display>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.map.insert(key.to_string(), v.to_string());
        }
    }

    pub fn set_flag_bool(&mut self, key: &str, value: bool) {
        if value {
            self.map.insert(key.to_string(), "true".to_string());
        }
    }

    /// Merge a config file: either `key=value` lines ('#' comments) or a
    /// manifest JSON produced by an earlier run of the same command.
    pub fn merge_file(&mut self, path: &Path, command: &str) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad manifest {}: {e}", path.display())))?;
            let cmd = v.get("command").and_then(Value::as_str).unwrap_or("");
            if cmd != command {
                return Err(CliError::Usage(format!(
                    "manifest {} was produced by '{cmd}', not '{command}'",
                    path.display()
                )));
            }
            let Some(cfg) = v.get("config").and_then(Value::as_object) else {
                return Err(CliError::Usage(format!(
                    "manifest {} has no config object",
                    path.display()
                )));
            };
            for (k, val) in cfg {
                let s = match val {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                self.map.insert(k.clone(), s);
            }
            return Ok(());
        }
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> CliResult<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required field: {key}")))
    }

    pub fn require_path(&self, key: &str) -> CliResult<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| {
            CliError::Usage(format!("field {key}: cannot parse '{raw}'"))
        })
    }

    pub fn get_bool(&self, key: &str) -> CliResult<bool> {
        match self.get(key) {
            None => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(CliError::Usage(format!(
                "field {key}: expected true/false, got '{other}'"
            ))),
        }
    }

    /// `XxYxZ` triple.
    pub fn get_shape(&self, key: &str) -> CliResult<[usize; 3]> {
        let raw = self.require(key)?;
        let parts: Vec<&str> = raw.split('x').collect();
        if parts.len() != 3 {
            return Err(CliError::Usage(format!(
                "field {key}: expected XxYxZ, got '{raw}'"
            )));
        }
        let mut out = [0usize; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p
                .parse()
                .map_err(|_| CliError::Usage(format!("field {key}: bad extent '{p}'")))?;
        }
        Ok(out)
    }

    /// Comma-separated float list.
    pub fn get_f64_list(&self, key: &str) -> CliResult<Vec<f64>> {
        let raw = self.require(key)?;
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("field {key}: bad number '{p}'")))
            })
            .collect()
    }

    /// Deterministic manifest document for this run.
    pub fn manifest_json(&self, command: &str) -> String {
        let mut root = serde_json::Map::new();
        root.insert("command".into(), Value::String(command.into()));
        root.insert(
            "version".into(),
            Value::String(env!("CARGO_PKG_VERSION").into()),
        );
        let mut cfg = serde_json::Map::new();
        for (k, v) in &self.map {
            cfg.insert(k.clone(), Value::String(v.clone()));
        }
        root.insert("config".into(), Value::Object(cfg));
        serde_json::to_string_pretty(&Value::Object(root)).expect("static structure") + "\n"
    }
}
