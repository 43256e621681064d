//! Watermark generation and detection.
//!
//! Two schemes are implemented:
//! - `kgw`: green-list watermark. A keyed hash of the previous k tokens
//!   partitions the vocabulary; green logits get a bias before sampling, and
//!   detection counts green tokens against a binomial null.
//! - `kth`: inverse-transform-sampling watermark driven by a secret key
//!   sequence of (uniform, permutation) pairs. It is distortion-free and is
//!   detected with an alignment cost plus a nonparametric permutation test.
//!
//! Both schemes expose a "radioactivity" detector that scores a suspect
//! model's own predictions on watermarked documents instead of the documents
//! themselves.

pub mod kgw;
pub mod kth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kgw::KgwSpec;
pub use kth::{KthKey, KthSpec};

/// Outcome of one detection call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Accumulated score: green count for kgw, observed minimum alignment
    /// cost for kth.
    pub score: f64,
    /// Effective sample size: deduplicated scored positions for kgw,
    /// documents tested for kth.
    pub effective_count: usize,
    /// z statistic where one exists (kgw only).
    pub z: Option<f64>,
    /// One-sided p-value in [0, 1].
    pub p_value: f64,
    /// Whether the p-value was computed by an exact tail sum (kgw) or is a
    /// permutation-test estimate (kth).
    pub exact: bool,
    /// Significance level the decision was taken at.
    pub alpha: f64,
    /// decision == (p_value < alpha)
    pub decision: bool,
    /// Per-document contributions, in dataset order.
    pub per_doc: Vec<DocScore>,
}

impl DetectionResult {
    pub fn new(
        score: f64,
        effective_count: usize,
        z: Option<f64>,
        p_value: f64,
        exact: bool,
        alpha: f64,
        per_doc: Vec<DocScore>,
    ) -> DetectionResult {
        let p_value = p_value.clamp(0.0, 1.0);
        DetectionResult {
            score,
            effective_count,
            z,
            p_value,
            exact,
            alpha,
            decision: p_value < alpha,
            per_doc,
        }
    }
}

/// Score contribution of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc: usize,
    /// Green hits (kgw) or observed alignment cost (kth).
    pub score: f64,
    /// Positions contributed (kgw) or regenerated length (kth).
    pub count: usize,
    /// Per-document p-value (kth only; kgw accumulates a single statistic).
    pub p_value: Option<f64>,
}

/// Scheme choice plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum WatermarkSpec {
    Kgw(KgwSpec),
    Kth(KthSpec),
}

impl WatermarkSpec {
    pub fn scheme_name(&self) -> &'static str {
        match self {
            WatermarkSpec::Kgw(_) => "kgw",
            WatermarkSpec::Kth(_) => "kth",
        }
    }
}

/// On-disk key file: scheme tag, hex key and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyFile {
    pub format_version: u32,
    pub scheme: String,
    /// 64-bit secret, written as 0x-prefixed hex.
    pub key: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kgram: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_perm: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_edit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_search: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_slice: Option<bool>,
}

pub fn parse_hex_key(s: &str) -> Result<u64> {
    let trimmed = s.trim().trim_start_matches("0x").trim_start_matches("0X");
    u64::from_str_radix(trimmed, 16)
        .map_err(|e| Error::Watermark(format!("bad hex key {s:?}: {e}")))
}

pub fn format_hex_key(key: u64) -> String {
    format!("{key:#018x}")
}

impl KeyFile {
    pub fn from_spec(spec: &WatermarkSpec) -> KeyFile {
        match spec {
            WatermarkSpec::Kgw(s) => KeyFile {
                format_version: 1,
                scheme: "kgw".into(),
                key: format_hex_key(s.key),
                gamma: Some(s.gamma),
                delta: Some(s.delta),
                kgram: Some(s.kgram),
                temperature: Some(s.temperature),
                key_len: None,
                t_perm: None,
                gamma_edit: None,
                block_search: None,
                shift_slice: None,
            },
            WatermarkSpec::Kth(s) => KeyFile {
                format_version: 1,
                scheme: "kth".into(),
                key: format_hex_key(s.key_seed),
                gamma: None,
                delta: None,
                kgram: None,
                temperature: None,
                key_len: Some(s.key_len),
                t_perm: Some(s.t_perm),
                gamma_edit: Some(s.gamma_edit),
                block_search: Some(s.block_search),
                shift_slice: Some(s.shift_slice),
            },
        }
    }

    pub fn into_spec(self) -> Result<WatermarkSpec> {
        let key = parse_hex_key(&self.key)?;
        match self.scheme.as_str() {
            "kgw" => {
                let spec = KgwSpec::new(
                    key,
                    self.gamma.ok_or_else(|| miss("gamma"))?,
                    self.delta.ok_or_else(|| miss("delta"))?,
                    self.kgram.ok_or_else(|| miss("kgram"))?,
                    self.temperature.ok_or_else(|| miss("temperature"))?,
                )?;
                Ok(WatermarkSpec::Kgw(spec))
            }
            "kth" => {
                let spec = KthSpec::new(
                    key,
                    self.key_len.ok_or_else(|| miss("key_len"))?,
                    self.t_perm.ok_or_else(|| miss("t_perm"))?,
                    self.gamma_edit.ok_or_else(|| miss("gamma_edit"))?,
                    self.block_search.unwrap_or(true),
                    self.shift_slice.unwrap_or(true),
                )?;
                Ok(WatermarkSpec::Kth(spec))
            }
            other => Err(Error::Watermark(format!("unknown watermark scheme {other:?}"))),
        }
    }
}

fn miss(field: &str) -> Error {
    Error::Watermark(format!("key file is missing field {field:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_file_roundtrip() {
        let spec = WatermarkSpec::Kgw(KgwSpec::new(0xDEAD_BEEF, 0.25, 3.0, 2, 0.8).unwrap());
        let kf = KeyFile::from_spec(&spec);
        let text = toml::to_string_pretty(&kf).unwrap();
        let back: KeyFile = toml::from_str(&text).unwrap();
        let spec2 = back.into_spec().unwrap();
        assert_eq!(spec, spec2);
    }

    #[test]
    fn hex_key_parsing() {
        assert_eq!(parse_hex_key("0x00000000deadbeef").unwrap(), 0xDEAD_BEEF);
        assert_eq!(parse_hex_key(&format_hex_key(u64::MAX)).unwrap(), u64::MAX);
        assert!(parse_hex_key("zz").is_err());
    }
}
