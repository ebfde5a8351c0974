//! Run configuration: built-in defaults, then a TOML file, then flags.
//!
//! ```toml
//! [synth]
//! separation = 5.0
//!
//! [train]
//! mode = "full"
//!
//! [train.dims]
//! input = 32
//! ```
//!
//! Unknown keys are rejected so typos do not silently fall back to defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Protocol, SynthConfig};
use crate::error::{GtlError, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `all-way` or `N-way`.
    pub protocol: String,
    /// Support shots per class; each value is evaluated separately.
    pub shots: Vec<usize>,
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: "all-way".into(),
            shots: vec![1, 5],
            episodes: 10,
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self) -> Result<Protocol> {
        self.protocol.parse()
    }
}

/// Input files. Unset paths resolve inside the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub base: Option<PathBuf>,
    pub novel: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Latent-domain counts for `sweep-d`.
    pub domains: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            domains: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.protocol()?;
        if self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            return Err(GtlError::Config("eval.shots must be a non-empty list of positive counts".into()));
        }
        if self.eval.episodes == 0 {
            return Err(GtlError::Config("eval.episodes must be positive".into()));
        }
        if self.sweep.domains.is_empty() || self.sweep.domains.contains(&0) {
            return Err(GtlError::Config("sweep.domains must be a non-empty list of positive counts".into()));
        }
        Ok(())
    }

    /// Overrides both seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    /// Layers `file` and then `overrides` over the defaults.
    pub fn layered(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
        let mut table = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            other => return Err(GtlError::Config(format!("cannot serialize defaults: {other:?}"))),
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| GtlError::Config(format!("cannot read {}: {e}", path.display())))?;
            let from_file: toml::Table = toml::from_str(&text)
                .map_err(|e| GtlError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, from_file);
        }
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| GtlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GtlError::Config(e.to_string()))
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(GtlError::Config(format!("bad key '{key}'")));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry((*s).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(GtlError::Config(format!("'{s}' in '{key}' is not a section"))),
        };
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

/// Parses `section.key=value`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn parse_override(arg: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| GtlError::Config(format!("expected section.key=value, got '{arg}'")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainMode;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::layered(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn three_layer_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "[train]\nepochs = 7\nlr_cls = 0.01\n\n[train.dims]\nhidden = 20\n\n[eval]\nepisodes = 3\n",
        )
        .unwrap();
        let flags = vec![
            parse_override("train.epochs=9").unwrap(),
            parse_override("train.mode=no_zm").unwrap(),
        ];
        let cfg = RunConfig::layered(Some(&path), &flags).unwrap();
        // flag beats file
        assert_eq!(cfg.train.epochs, 9);
        // file beats default
        assert_eq!(cfg.train.lr_cls, 0.01);
        assert_eq!(cfg.train.dims.hidden, 20);
        assert_eq!(cfg.eval.episodes, 3);
        // untouched default
        assert_eq!(cfg.train.lr_repr, 1e-3);
        assert_eq!(cfg.train.dims.input, 1280);
        assert_eq!(cfg.train.mode, TrainMode::NoZm);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        assert!(parse_override("no_equals").is_err());
        let typo = vec![parse_override("train.epoch=3").unwrap()];
        assert!(matches!(RunConfig::layered(None, &typo), Err(GtlError::Config(_))));
        let wrong_type = vec![parse_override("train.epochs=\"many\"").unwrap()];
        assert!(RunConfig::layered(None, &wrong_type).is_err());
        let bad_protocol = vec![parse_override("eval.protocol=sideways").unwrap()];
        assert!(RunConfig::layered(None, &bad_protocol).is_err());
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("a.b=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(parse_override("a.b=[1, 5]").unwrap().1.as_array().unwrap().len(), 2);
        assert_eq!(parse_override("a.b=5-way").unwrap().1, toml::Value::String("5-way".into()));
    }
}
