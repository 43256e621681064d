//! Experiment configuration: TOML schema, validation, presets and hashing.
//!
//! Unknown keys are rejected everywhere. A config fully determines a run
//! together with its master seed; the resolved config is hashed into every
//! output manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agg::{AggregatorConfig, AggregatorKind};
use crate::error::{Error, Result};
use crate::watermark::{parse_hex_key, KeyFile, KgwSpec, KthSpec, WatermarkSpec};

/// Environment variable naming the root under which relative `output_dir`
/// values are placed.
pub const OUTPUT_ROOT_ENV: &str = "FEDMARK_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub corpus: CorpusConfig,
    pub generator_model: ModelConfig,
    pub global_model: ModelConfig,
    pub watermark: WatermarkConfig,
    pub data: DataConfig,
    pub fl: FlConfig,
    pub aggregator: AggregatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// Document length in characters.
    pub doc_len: usize,
    /// Documents reserved for pretraining, taken before client shards.
    pub pretrain_docs: usize,
    pub val_docs: usize,
    pub test_docs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub context: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_docs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkConfig {
    pub scheme: String,
    /// Inline 64-bit key as 0x-prefixed hex. Ignored when `key_file` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    /// Load key and hyperparameters from a key file instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kgram: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_perm: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_edit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_search: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_slice: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanData {
    Natural,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Characters treated as the prompt of each document.
    pub prompt_tokens: usize,
    pub clean_data: CleanData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// "Worsening" compares each round to the immediately previous round.
    Previous,
    /// "Worsening" compares each round to the best loss seen so far.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub clients: usize,
    pub watermark_clients: usize,
    pub docs_per_client: usize,
    pub server_lr: f64,
    pub client_lr: f64,
    /// Local steps J. Ignored when `local_epoch` is set.
    pub local_steps: usize,
    /// One local epoch: J = ceil(docs_per_client / batch).
    #[serde(default)]
    pub local_epoch: bool,
    /// Documents per local batch; 0 = full shard.
    pub batch_docs: usize,
    pub patience: usize,
    pub max_rounds: usize,
    pub stop_mode: StopMode,
    /// Report the best-validation checkpoint instead of the last one.
    #[serde(default)]
    pub rollback_best: bool,
    /// Significance level for detection decisions.
    pub alpha: f64,
}

impl FlConfig {
    pub fn epsilon(&self) -> f64 {
        self.watermark_clients as f64 / self.clients as f64
    }

    /// Effective local steps for a shard of `docs` documents.
    pub fn effective_steps(&self, docs: usize) -> usize {
        if self.local_epoch {
            let b = if self.batch_docs == 0 { docs } else { self.batch_docs.min(docs) };
            docs.div_ceil(b)
        } else {
            self.local_steps
        }
    }
}

/// Cross-product sweep; each cell is one full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watermark_clients: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregators: Option<Vec<AggregatorKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_data: Option<Vec<CleanData>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub trials: usize,
    pub epsilon: f64,
    pub clients: usize,
    /// Distance of planted outliers in units of the clean per-coordinate
    /// standard deviation.
    pub outlier_distance: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: vec![100, 1_000, 10_000, 100_000],
            trials: 20,
            epsilon: 0.1,
            clients: 30,
            outlier_distance: 100.0,
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Key files are resolved relative to the config file.
        if let Some(kf) = &cfg.watermark.key_file {
            if kf.is_relative() {
                if let Some(parent) = path.parent() {
                    cfg.watermark.key_file = Some(parent.join(kf));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let c = &self.corpus;
        if c.doc_len < 2 {
            return Err(Error::Config("corpus.doc_len must be >= 2".into()));
        }
        for (name, m) in [("generator_model", &self.generator_model), ("global_model", &self.global_model)] {
            if m.context == 0 || m.hidden == 0 || m.hidden_layers == 0 {
                return Err(Error::Config(format!("{name}: context, hidden, hidden_layers must be >= 1")));
            }
            if m.pretrain_lr <= 0.0 {
                return Err(Error::Config(format!("{name}.pretrain_lr must be > 0")));
            }
        }
        let fl = &self.fl;
        if fl.clients == 0 {
            return Err(Error::Config("fl.clients must be >= 1".into()));
        }
        if fl.watermark_clients * 2 >= fl.clients && fl.watermark_clients > 0 {
            return Err(Error::Config(format!(
                "fl.watermark_clients must satisfy W < N/2, got W={} N={}",
                fl.watermark_clients, fl.clients
            )));
        }
        if fl.docs_per_client == 0 {
            return Err(Error::Config("fl.docs_per_client must be >= 1".into()));
        }
        if fl.patience == 0 {
            return Err(Error::Config("fl.patience must be >= 1".into()));
        }
        if fl.max_rounds == 0 {
            return Err(Error::Config("fl.max_rounds must be >= 1".into()));
        }
        if !fl.local_epoch && fl.local_steps == 0 {
            return Err(Error::Config("fl.local_steps must be >= 1 (or set local_epoch)".into()));
        }
        if fl.server_lr <= 0.0 || fl.client_lr <= 0.0 {
            return Err(Error::Config("fl learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&fl.alpha) || fl.alpha <= 0.0 {
            return Err(Error::Config("fl.alpha must be in (0, 1)".into()));
        }
        if self.data.prompt_tokens == 0 || self.data.prompt_tokens >= c.doc_len {
            return Err(Error::Config(
                "data.prompt_tokens must be >= 1 and smaller than corpus.doc_len".into(),
            ));
        }
        self.aggregator.validate()?;
        if let Some(sweep) = &self.sweep {
            if let Some(ws) = &sweep.watermark_clients {
                for &w in ws {
                    if w * 2 >= fl.clients {
                        return Err(Error::Config(format!(
                            "sweep.watermark_clients entry {w} violates W < N/2 for N={}",
                            fl.clients
                        )));
                    }
                }
            }
        }
        if let Some(b) = &self.bench {
            if b.dims.is_empty() || b.trials == 0 || b.clients < 3 {
                return Err(Error::Config("bench needs dims, trials >= 1 and clients >= 3".into()));
            }
            if !(0.0..0.5).contains(&b.epsilon) {
                return Err(Error::Config("bench.epsilon must be in [0, 0.5)".into()));
            }
        }
        // Watermark section must produce a valid spec (vocab-independent).
        self.watermark_spec_unresolved()?;
        Ok(())
    }

    /// Build the watermark spec from the inline section (no key-file I/O).
    fn watermark_spec_unresolved(&self) -> Result<WatermarkSpec> {
        let w = &self.watermark;
        if w.key_file.is_some() {
            // Defer to load time; use a placeholder key for validation only.
            return placeholder_spec(&w.scheme);
        }
        let key = parse_hex_key(
            w.key
                .as_deref()
                .ok_or_else(|| Error::Config("watermark.key or watermark.key_file required".into()))?,
        )?;
        build_spec(w, key)
    }

    /// Resolve the watermark spec, reading the key file when configured.
    pub fn watermark_spec(&self) -> Result<WatermarkSpec> {
        if let Some(path) = &self.watermark.key_file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("watermark.key_file {}: {e}", path.display()))
            })?;
            let kf: KeyFile = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("key file parse: {e}")))?;
            let spec = kf.into_spec()?;
            if spec.scheme_name() != self.watermark.scheme {
                return Err(Error::Config(format!(
                    "key file scheme {} does not match config scheme {}",
                    spec.scheme_name(),
                    self.watermark.scheme
                )));
            }
            return Ok(spec);
        }
        self.watermark_spec_unresolved()
    }

    /// Canonical TOML of the resolved config.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory with the `FEDMARK_OUTPUT_ROOT` prefix applied to
    /// relative paths.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }
}

fn build_spec(w: &WatermarkConfig, key: u64) -> Result<WatermarkSpec> {
    match w.scheme.as_str() {
        "kgw" => Ok(WatermarkSpec::Kgw(KgwSpec::new(
            key,
            w.gamma.ok_or_else(|| Error::Config("watermark.gamma required for kgw".into()))?,
            w.delta.ok_or_else(|| Error::Config("watermark.delta required for kgw".into()))?,
            w.kgram.ok_or_else(|| Error::Config("watermark.kgram required for kgw".into()))?,
            w.temperature
                .ok_or_else(|| Error::Config("watermark.temperature required for kgw".into()))?,
        )?)),
        "kth" => Ok(WatermarkSpec::Kth(KthSpec::new(
            key,
            w.key_len.ok_or_else(|| Error::Config("watermark.key_len required for kth".into()))?,
            w.t_perm.ok_or_else(|| Error::Config("watermark.t_perm required for kth".into()))?,
            w.gamma_edit.unwrap_or(0.0),
            w.block_search.unwrap_or(true),
            w.shift_slice.unwrap_or(true),
        )?)),
        other => Err(Error::Config(format!("unknown watermark scheme {other:?}"))),
    }
}

fn placeholder_spec(scheme: &str) -> Result<WatermarkSpec> {
    match scheme {
        "kgw" => Ok(WatermarkSpec::Kgw(KgwSpec::new(0, 0.25, 3.0, 2, 0.8)?)),
        "kth" => Ok(WatermarkSpec::Kth(KthSpec::new(0, 64, 9, 0.0, true, true)?)),
        other => Err(Error::Config(format!("unknown watermark scheme {other:?}"))),
    }
}

/// Built-in presets. Corpus paths are relative to the repository root.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = match name {
        "desk-vanilla-kgw" => include_str!("presets/desk_vanilla_kgw.toml"),
        "desk-active-kgw" => include_str!("presets/desk_active_kgw.toml"),
        "desk-vanilla-kth" => include_str!("presets/desk_vanilla_kth.toml"),
        "table3-desk" => include_str!("presets/table3_desk.toml"),
        "table4-desk" => include_str!("presets/table4_desk.toml"),
        "paper-shape" => include_str!("presets/paper_shape.toml"),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: desk-vanilla-kgw, desk-active-kgw, \
                 desk-vanilla-kth, table3-desk, table4-desk, paper-shape"
            )))
        }
    };
    let mut cfg = ExperimentConfig::from_toml_str(text)?;
    cfg.preset = Some(name.to_string());
    Ok(cfg)
}

pub const PRESET_NAMES: &[&str] = &[
    "desk-vanilla-kgw",
    "desk-active-kgw",
    "desk-vanilla-kth",
    "table3-desk",
    "table4-desk",
    "paper-shape",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap_or_else(|e| panic!("preset {name}: {e}"));
            assert_eq!(cfg.preset.as_deref(), Some(*name));
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = preset("desk-vanilla-kgw").unwrap().canonical_toml();
        text.push_str("\nbogus_key = 1\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn w_less_than_half_n_enforced() {
        let mut cfg = preset("desk-vanilla-kgw").unwrap();
        cfg.fl.watermark_clients = cfg.fl.clients / 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let cfg = preset("desk-vanilla-kgw").unwrap();
        let a = cfg.hash();
        let b = preset("desk-vanilla-kgw").unwrap().hash();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed += 1;
        assert_ne!(a, cfg2.hash());
    }

    #[test]
    fn paper_shape_uses_paper_learning_rate() {
        let cfg = preset("paper-shape").unwrap();
        assert_eq!(cfg.fl.client_lr, 1e-5);
        assert_eq!(cfg.fl.server_lr, 1e-5);
        assert_eq!(cfg.fl.clients, 30);
        assert!(cfg.fl.local_epoch);
        assert_eq!(cfg.fl.patience, 3);
    }
}
