//! Run configuration: presets, TOML files and command-line overrides.

use std::path::Path;

use msegnn::{EncoderKind, MetaConfig, ModelConfig, SyntheticConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const DEFAULT_PRESET: &str = "synthetic-2way5shot";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Train/validation/test class counts.
    pub split: [usize; 3],
    pub split_seed: u64,
    pub generator: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 500,
            split: [5, 2, 3],
            split_seed: 0,
            generator: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episodes exported by `explain`.
    pub explain_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            explain_episodes: 1,
        }
    }
}

/// Everything a run depends on. Serialized into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(DEFAULT_PRESET).expect("default preset exists")
    }
}

impl RunConfig {
    /// Named starting points. `synthetic-2way5shot` is the 2-way 5-shot
    /// experiment on the 10-class synthetic set with a 5/2/3 class split.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "synthetic-2way5shot" => Ok(Self {
                seed: 0,
                data: DataConfig::default(),
                model: ModelConfig {
                    encoder: EncoderKind::Gin,
                    layers: 2,
                    hidden: 32,
                    feature_dim: 8,
                    n_way: 2,
                    mask_hidden: 32,
                    predictor_hidden: 256,
                },
                meta: MetaConfig {
                    max_meta_iterations: 2000,
                    eval_every: 100,
                    val_episodes: 40,
                    ..MetaConfig::default()
                },
                eval: EvalConfig::default(),
            }),
            other => Err(CliError::Config(format!(
                "unknown preset '{other}' (available: {DEFAULT_PRESET})"
            ))),
        }
    }

    /// Reads a TOML file; keys it does not mention keep their values from
    /// `self`.
    pub fn merge_file(&self, path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let patch: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut base = toml::Table::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        merge_tables(&mut base, patch);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Copies the run seed and episode width into the sections that
    /// consume them.
    pub fn normalize(&mut self) {
        self.meta.seed = self.seed;
        self.model.n_way = self.meta.n_way;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field =
            |name: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{name}: {e}"));
        self.data
            .generator
            .validate()
            .map_err(|e| field("data.generator", &e))?;
        if self.data.classes < 2 {
            return Err(CliError::Config(format!(
                "data.classes: need at least 2 classes, got {}",
                self.data.classes
            )));
        }
        if self.data.per_class == 0 {
            return Err(CliError::Config("data.per_class: must be positive".into()));
        }
        if self.data.split.iter().sum::<usize>() != self.data.classes {
            return Err(CliError::Config(format!(
                "data.split: {:?} does not sum to data.classes = {}",
                self.data.split, self.data.classes
            )));
        }
        self.model.validate().map_err(|e| field("model", &e))?;
        self.meta.validate().map_err(|e| field("meta", &e))?;
        if self.model.n_way != self.meta.n_way {
            return Err(CliError::Config(format!(
                "model.n_way ({}) differs from meta.n_way ({})",
                self.model.n_way, self.meta.n_way
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `{ "fingerprint": ..., "config": ... }` as embedded in artifacts.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "config_fingerprint": self.fingerprint(),
            "run_config": self,
        })
    }

    /// Recovers the configuration embedded by [`provenance`](Self::provenance).
    pub fn from_provenance(value: &serde_json::Value) -> Option<Self> {
        serde_json::from_value(value.get("run_config")?.clone()).ok()
    }

    /// Seed of the evaluation episode stream, kept apart from training.
    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(0x00e7_a15e_ed00)
    }
}

fn merge_tables(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge_tables(b, p),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Model hyperparameters on which `a` and `b` disagree, as `field: a vs b`.
pub fn model_mismatches(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (ja, jb) = (
        serde_json::to_value(a).expect("model config serializes"),
        serde_json::to_value(b).expect("model config serializes"),
    );
    let (Some(ma), Some(mb)) = (ja.as_object(), jb.as_object()) else {
        return Vec::new();
    };
    ma.iter()
        .filter(|(k, v)| mb.get(*k) != Some(v))
        .map(|(k, v)| {
            format!(
                "model.{k}: {v} vs {}",
                mb.get(k).cloned().unwrap_or_default()
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_validates() {
        let mut c = RunConfig::default();
        c.normalize();
        c.validate().unwrap();
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn toml_round_trip_and_partial_merge() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\n[meta]\nlocal_steps = 3\n[meta.global_weights]\ngamma = 0.3\n",
        )
        .unwrap();
        let merged = c.merge_file(&path).unwrap();
        assert_eq!(merged.seed, 9);
        assert_eq!(merged.meta.local_steps, 3);
        assert_eq!(merged.meta.global_weights.gamma, 0.3);
        assert_eq!(merged.meta.k_shot, c.meta.k_shot);
        assert_eq!(merged.model, c.model);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[meta]\nlocal_stepz = 3\n").unwrap();
        let err = RunConfig::default().merge_file(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("local_stepz"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.meta.local_steps = 0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .starts_with("configuration error: meta"));
        let mut c = RunConfig::default();
        c.data.classes = 1;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("data.classes"));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.meta.global_lr = 0.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(RunConfig::from_provenance(&a.provenance()), Some(a));
    }

    #[test]
    fn mismatches_list_fields() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.hidden = 16;
        let m = model_mismatches(&a, &b);
        assert_eq!(m.len(), 1);
        assert!(m[0].starts_with("model.hidden"));
    }
}
