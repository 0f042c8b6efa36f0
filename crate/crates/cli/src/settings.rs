//! Effective configuration: preset, then config file, then flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thct_core::ModelConfig;

use crate::error::{CliError, Result};

/// Config-file keys that belong to the harness rather than the model.
pub const HARNESS_KEYS: [&str; 10] = [
    "data",
    "out",
    "checkpoint",
    "per_class",
    "val_per_class",
    "noise",
    "split",
    "sweep_fusion",
    "resume",
    "fault",
];

#[derive(Clone, Debug)]
pub struct Settings {
    pub model: ModelConfig,
    harness: BTreeMap<String, String>,
}

impl Settings {
    /// Applies the `key = value` file at `path` (if any) on top of `base`.
    pub fn load(path: Option<&Path>, base: ModelConfig) -> Result<Self> {
        let mut out = Self {
            model: base,
            harness: BTreeMap::new(),
        };
        let Some(path) = path else {
            return Ok(out);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut model_text = String::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let harness_key = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, _)| HARNESS_KEYS.contains(k));
            match harness_key {
                Some((k, v)) => {
                    out.harness.insert(k.to_string(), v.to_string());
                    model_text.push('\n');
                }
                // Blank stand-ins keep line numbers intact for model-key errors.
                None => {
                    model_text.push_str(raw);
                    model_text.push('\n');
                }
            }
        }
        out.model
            .apply_text(&model_text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(out)
    }

    /// Overrides a model key with a flag value.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        if let Some(v) = value {
            self.model
                .set(key, &v.to_string())
                .map_err(|e| CliError::Usage(format!("--{}: {e}", flag_name(key))))?;
        }
        Ok(())
    }

    /// Overrides a harness key with a flag value.
    pub fn harness_flag<T: ToString>(&mut self, key: &str, value: Option<T>) {
        debug_assert!(HARNESS_KEYS.contains(&key));
        if let Some(v) = value {
            self.harness.insert(key.to_string(), v.to_string());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.harness
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("invalid value {v:?} for {key}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn render(&self) -> String {
        let mut s = self.model.to_text();
        for (k, v) in &self.harness {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

fn flag_name(key: &str) -> &str {
    match key {
        "train.seed" => "seed",
        "train.epochs" => "epochs",
        "train.lr" => "lr",
        "train.batch_size" => "batch",
        "fusion.weight" => "fusion-weight",
        "num_classes" => "classes",
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "train.lr = 0.5\nout = runs/a  # artifacts\nwindow = 10,5,1\n").unwrap();
        let mut s = Settings::load(Some(&path), ModelConfig::default()).unwrap();
        assert_eq!(s.model.train.lr, 0.5);
        assert_eq!(s.get::<String>("out").unwrap().as_deref(), Some("runs/a"));
        s.flag("train.lr", Some(0.25)).unwrap();
        s.harness_flag("out", Some("runs/b"));
        assert_eq!(s.model.train.lr, 0.25);
        assert_eq!(s.get::<String>("out").unwrap().as_deref(), Some("runs/b"));
        assert!(s.render().contains("window = 10,5,1"));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut s = Settings::load(None, ModelConfig::default()).unwrap();
        s.flag("fusion.weight", Some(3.0)).unwrap();
        assert!(matches!(s.validate(), Err(CliError::Usage(_))));
        assert!(matches!(s.flag("window", Some("2,x,1")), Err(CliError::Usage(_))));
        s.harness_flag("per_class", Some("many"));
        assert!(s.get::<usize>("per_class").is_err());
    }
}
