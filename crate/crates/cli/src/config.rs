//! Flat `key = value` run configuration with layered overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use scorp_core::gradcore::AdamConfig;
use scorp_core::models::Mode;
use scorp_core::training::TrainConfig;
use scorp_core::{Error, Result};

pub const SEED_ENV: &str = "SCORP_SEED";

/// Every recognized key with its default (`""` = unset).
const DEFAULTS: &[(&str, &str)] = &[
    ("kb", ""),
    ("defs", ""),
    ("embeddings", ""),
    ("freq", ""),
    ("out", "out"),
    ("manifest", ""),
    ("inventory", ""),
    ("min_count", "5"),
    ("split", "8:1:1"),
    ("folds", "0"),
    ("fold", "0"),
    ("require_embedding", "true"),
    ("mode", "scorp"),
    ("hidden", "256"),
    ("lr", "0.001"),
    ("batch_size", "64"),
    ("max_epochs", "50"),
    ("patience", "5"),
    ("dropout", "0.5"),
    ("seed", "0"),
    ("bucket_by_length", "false"),
    ("literal_loss", "false"),
    ("resume", "false"),
    ("run_name", ""),
    ("checkpoint", ""),
    ("buckets", ""),
    ("top_k", "6"),
    ("full_dump", "true"),
    ("spwe_decay", "0.8"),
    ("spwe_neighbors", "100"),
    ("lambda_a", "1"),
    ("lambda_b", "10"),
    ("raw_ensemble", "false"),
    ("ensemble_a", ""),
    ("ensemble_b", ""),
    ("ensemble_out", ""),
    (
        "modes",
        "mc,scorp,scorp pool=mean,scorp pool=attn,scorp +tw,scorp +se,scorp +tw +se",
    ),
    ("words", ""),
    ("word", ""),
    ("definition", ""),
    ("explain", "false"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `SCORP_SEED`, then the config file, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", seed.trim())
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.merge_text(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn merge_text(&mut self, text: &str, src: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(src, i + 1, "expected `key = value`"))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(src, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("config key `{key}` has invalid value `{v}`")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!(
                "config key `{key}` expects a boolean, got `{v}`"
            ))),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.opt(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("config key `{key}` is required")))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.opt("manifest")
            .map_or_else(|| self.out_dir().join("manifest.tsv"), PathBuf::from)
    }

    pub fn inventory_path(&self) -> PathBuf {
        self.opt("inventory")
            .map_or_else(|| self.out_dir().join("inventory.tsv"), PathBuf::from)
    }

    pub fn mode(&self) -> Result<Mode> {
        self.get("mode").parse()
    }

    pub fn run_name(&self) -> Result<String> {
        Ok(match self.opt("run_name") {
            Some(r) => r.to_string(),
            None => self.mode()?.slug(),
        })
    }

    pub fn split_ratios(&self) -> Result<[usize; 3]> {
        let parts: Vec<&str> = self.get("split").split(':').collect();
        let bad = || Error::Config(format!("split `{}` is not `a:b:c`", self.get("split")));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut out = [0; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.trim().parse().map_err(|_| bad())?;
        }
        Ok(out)
    }

    pub fn modes(&self) -> Result<Vec<Mode>> {
        self.get("modes")
            .split(',')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(str::parse)
            .collect()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            mode: self.mode()?,
            hidden: self.parse("hidden")?,
            adam: AdamConfig {
                lr: self.parse("lr")?,
                ..AdamConfig::default()
            },
            batch_size: self.parse("batch_size")?,
            max_epochs: self.parse("max_epochs")?,
            patience: self.parse("patience")?,
            dropout: self.parse("dropout")?,
            seed: self.parse("seed")?,
            bucket_by_length: self.flag("bucket_by_length")?,
            literal_loss: self.flag("literal_loss")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.mode()?;
        self.modes()?;
        self.split_ratios()?;
        self.train_config()?;
        for key in ["min_count", "folds", "fold", "top_k", "spwe_neighbors"] {
            self.parse::<usize>(key)?;
        }
        for key in ["spwe_decay", "lambda_a", "lambda_b"] {
            let v: f64 = self.parse(key)?;
            if !v.is_finite() {
                return Err(Error::Config(format!("config key `{key}` must be finite")));
            }
        }
        for key in ["require_embedding", "resume", "full_dump", "raw_ensemble", "explain"] {
            self.flag(key)?;
        }
        for b in self.get("buckets").split(',').map(str::trim).filter(|b| !b.is_empty()) {
            if b != "freq" && b != "oov" {
                return Err(Error::Config(format!(
                    "unknown bucket scheme `{b}` (expected freq or oov)"
                )));
            }
        }
        Ok(())
    }

    /// Sorted `key = value` lines; loading them back reproduces this config.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_resolved(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_roundtrip() {
        let mut c = RunConfig::default();
        c.merge_text("# comment\nmode = scorp +tw\nhidden=8\n", "f").unwrap();
        c.set("hidden", "12").unwrap();
        assert_eq!(c.parse::<usize>("hidden").unwrap(), 12);
        assert_eq!(c.mode().unwrap().to_string(), "scorp +tw pool=max");
        let mut d = RunConfig::default();
        d.merge_text(&c.to_text(), "echo").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c
            .merge_text("hidden = 3\nbogus = 1\n", "run.cfg")
            .unwrap_err()
            .to_string();
        assert!(e.contains("run.cfg:2"), "{e}");
        assert!(c.merge_text("novalue\n", "x").is_err());
    }

    #[test]
    fn derived_values() {
        let mut c = RunConfig::default();
        c.set("out", "o").unwrap();
        assert_eq!(c.manifest_path(), PathBuf::from("o/manifest.tsv"));
        assert_eq!(c.run_name().unwrap(), "scorp_max");
        c.set("split", "8:1").unwrap();
        assert!(c.split_ratios().is_err());
        c.set("modes", "mc, scorp pool=mean").unwrap();
        assert_eq!(c.modes().unwrap().len(), 2);
    }
}
