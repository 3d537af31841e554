//! Run configuration file (TOML) and command-line overrides.

use std::path::{Path, PathBuf};

use rehit::model::ModelConfig;
use rehit::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum NumericMode {
    /// 32-bit floats.
    #[default]
    Fast,
    /// 64-bit floats.
    Verify,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset manifest used by `train`.
    pub manifest: Option<PathBuf>,
    /// Weights to start from (`train`) or to run (`infer`).
    pub checkpoint: Option<PathBuf>,
    /// Where checkpoints, logs and the resolved config are written.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: NumericMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

/// Name of the resolved config written next to checkpoints.
pub const RESOLVED_CONFIG: &str = "config.toml";

impl RunConfig {
    /// Parses `text`, then applies `key=value` overrides (dotted keys, TOML values).
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> CliResult<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = if overrides.is_empty() {
            toml::from_str(text)
        } else {
            table.try_into()
        }
        .map_err(|e: toml::de::Error| CliError::config(format!("{origin}: {e}")))?;
        cfg.model
            .validate()
            .map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string(), overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.manifest,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if let Ok(abs) = std::path::absolute(&*p) {
                *p = abs;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> CliResult {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {item:?} is not key=value")))?;
    // Anything that is not a TOML literal is taken as a bare string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::config(format!("empty key in {item:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", "t", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::parse(&c.to_toml(), "t", &[]).unwrap(), c);
    }

    #[test]
    fn unknown_key_reports_position() {
        let e = RunConfig::parse("[train]\niters = 3\nbogus = 1\n", "run.toml", &[]).unwrap_err();
        assert_eq!(e.code, CliError::CONFIG);
        assert!(e.message.contains("line 3"), "{}", e.message);
        assert!(e.message.contains("bogus"), "{}", e.message);
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::parse(
            "mode = \"fast\"\n[train]\niters = 3\n",
            "t",
            &[
                "train.iters=7".into(),
                "mode=verify".into(),
                "model.heads=[1,1,1]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.iters, 7);
        assert_eq!(c.mode, NumericMode::Verify);
        assert_eq!(c.model.heads, vec![1, 1, 1]);
        assert!(RunConfig::parse("", "t", &["train.nope=1".into()]).is_err());
        assert!(RunConfig::parse("", "t", &["train.crop=5".into()]).is_err());
        let off = RunConfig::parse("", "t", &["train.clip_norm=none".into()]).unwrap();
        assert_eq!(off.train.clip_norm, None);
        assert_eq!(RunConfig::parse(&off.to_toml(), "t", &[]).unwrap(), off);
        assert!(RunConfig::parse("[train]\nclip_norm = \"off\"\n", "t", &[]).is_err());
    }
}
