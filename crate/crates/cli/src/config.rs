//! Experiment configuration: TOML file, `VMAE_*` environment overrides and
//! command-line flags, in increasing priority.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vesselmae::evaluation::EvalConfig;
use vesselmae::model::ModelConfig;
use vesselmae::synthvasc::PhantomParams;
use vesselmae::training::{FinetuneConfig, PretrainConfig};

pub const ENV_PREFIX: &str = "VMAE_";

const SECTIONS: [&str; 7] = ["phantom", "model", "pretrain", "finetune", "eval", "paths", "ablation"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset folder written by `synth` and read by the training commands.
    pub data_dir: PathBuf,
    /// Root for run outputs.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            work_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    /// Variants kept when the reduced budget is requested.
    pub reduced_variants: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: ["A", "D", "E", "F", "G"].map(String::from).to_vec(),
            reduced_variants: ["A", "G"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives phantom generation, initialisation, crops, masks and the
    /// permutation test.
    pub seed: u64,
    /// Number of cases held out for evaluation; the rest are training cases.
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub phantom: PhantomParams,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_n_test() -> usize {
    20
}

impl ExperimentConfig {
    /// Copies the experiment seed into every sub-configuration.
    fn propagate_seed(&mut self) {
        self.phantom.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(self.eval.t_iou > 0.0 && self.eval.t_iou <= 1.0) {
            bail!("eval.t_iou must lie in (0, 1]");
        }
        if self.eval.fpr_budget < 0.0 {
            bail!("eval.fpr_budget must be non-negative");
        }
        if self.eval.strata_edges_mm[0] > self.eval.strata_edges_mm[1] {
            bail!("eval.strata_edges_mm must be ascending");
        }
        if self.eval.infer.stride == 0 {
            bail!("eval.infer.stride must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `VMAE_<SECTION>_<KEY>=value` (or `VMAE_<KEY>` for top-level keys)
/// to a parsed table. Flag variables (`VMAE_CONFIG`, `VMAE_WORKERS`, ...)
/// are handled by the argument parser and skipped here.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) {
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (k, v) in vars {
        let name = k[ENV_PREFIX.len()..].to_ascii_lowercase();
        if matches!(name.as_str(), "config" | "workers" | "force" | "log") {
            continue;
        }
        let (section, key) = match name.split_once('_') {
            Some((s, rest)) if SECTIONS.contains(&s) => (Some(s.to_string()), rest.to_string()),
            _ => (None, name),
        };
        let value = parse_value(&v);
        match section {
            Some(s) => {
                let entry = table.entry(s).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                if let toml::Value::Table(t) = entry {
                    t.insert(key, value);
                }
            }
            None => {
                table.insert(key, value);
            }
        }
    }
}

/// Loads the experiment configuration. The seed must come from the file,
/// the environment or `--seed`.
pub fn load(path: Option<&Path>, seed: Option<u64>, vars: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    apply_env(&mut table, vars);
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if !table.contains_key("seed") {
        bail!("no seed given: set `seed` in the config, {ENV_PREFIX}SEED or --seed");
    }
    let mut cfg: ExperimentConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(load(None, None, vec![]).is_err());
        let c = load(None, Some(7), vec![]).unwrap();
        assert_eq!((c.seed, c.phantom.seed, c.pretrain.seed), (7, 7, 7));
    }

    #[test]
    fn env_overrides() {
        let c = load(
            None,
            None,
            vars(&[
                ("VMAE_SEED", "3"),
                ("VMAE_PRETRAIN_EPOCHS", "2"),
                ("VMAE_PHANTOM_VOLUME_DIMS", "[64, 64, 64]"),
                ("VMAE_PATHS_DATA_DIR", "somewhere/else"),
                ("VMAE_WORKERS", "4"),
                ("OTHER_SEED", "9"),
            ]),
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.pretrain.epochs, 2);
        assert_eq!(c.phantom.volume_dims, [64, 64, 64]);
        assert_eq!(c.paths.data_dir, PathBuf::from("somewhere/else"));
    }

    #[test]
    fn flag_beats_env_and_unknown_keys_fail() {
        let c = load(None, Some(5), vars(&[("VMAE_SEED", "3")])).unwrap();
        assert_eq!(c.seed, 5);
        assert!(load(None, Some(5), vars(&[("VMAE_PRETRAIN_EPOCS", "2")])).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = load(None, Some(1), vec![]).unwrap();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
