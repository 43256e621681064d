//! Evaluation-side metrics: evasion rate, overfiltering rate and utility
//! summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{cross_entropy, ModelParams, TokenSeq};

/// Which clients one layer's filter caught, next to which clients were
/// watermarking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFilterRecord {
    pub layer: usize,
    pub watermarking: BTreeSet<usize>,
    pub filtered: BTreeSet<usize>,
}

/// Mean over layers of the fraction of watermarking clients that survive the
/// filter: `ER = (1/L) * sum(1 - |W ∩ F| / |W|)`.
///
/// Undefined (error) when any layer has no watermarking clients.
pub fn evasion_rate(records: &[LayerFilterRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("evasion rate over zero layers".into()));
    }
    let mut sum = 0.0;
    for r in records {
        if r.watermarking.is_empty() {
            return Err(Error::Metric(format!(
                "evasion rate undefined: layer {} has no watermarking clients",
                r.layer
            )));
        }
        let caught = r.watermarking.intersection(&r.filtered).count() as f64;
        sum += 1.0 - caught / r.watermarking.len() as f64;
    }
    Ok(sum / records.len() as f64)
}

/// Mean over layers of the fraction of filtered clients that are clean:
/// `OFR = (1/L) * sum(1 - |W ∩ F| / |F|)`. A layer that filtered nobody
/// contributes 0 and still counts in L; the number of such layers is
/// reported alongside in round records.
pub fn overfiltering_rate(records: &[LayerFilterRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("overfiltering rate over zero layers".into()));
    }
    let mut sum = 0.0;
    for r in records {
        if r.filtered.is_empty() {
            continue;
        }
        let caught = r.watermarking.intersection(&r.filtered).count() as f64;
        sum += 1.0 - caught / r.filtered.len() as f64;
    }
    Ok(sum / records.len() as f64)
}

/// Layers with an empty filtered set (reported next to OFR).
pub fn empty_filter_layers(records: &[LayerFilterRecord]) -> usize {
    records.iter().filter(|r| r.filtered.is_empty()).count()
}

/// Cross-entropy of one model over several named evaluation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySummary {
    pub entropy_loss: Vec<(String, f64)>,
}

pub fn utility_summary(
    model: &ModelParams,
    eval_sets: &[(&str, &[TokenSeq])],
) -> Result<UtilitySummary> {
    let mut entropy_loss = Vec::with_capacity(eval_sets.len());
    for (name, set) in eval_sets {
        entropy_loss.push((name.to_string(), cross_entropy(model, set)?));
    }
    Ok(UtilitySummary { entropy_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layer: usize, w: &[usize], f: &[usize]) -> LayerFilterRecord {
        LayerFilterRecord {
            layer,
            watermarking: w.iter().copied().collect(),
            filtered: f.iter().copied().collect(),
        }
    }

    #[test]
    fn er_extremes() {
        // Every watermarking client filtered in every layer.
        let records = vec![rec(0, &[1, 2], &[1, 2, 3]), rec(1, &[1, 2], &[1, 2])];
        assert_eq!(evasion_rate(&records).unwrap(), 0.0);
        // No watermarking client ever filtered.
        let records = vec![rec(0, &[1, 2], &[3]), rec(1, &[1, 2], &[])];
        assert_eq!(evasion_rate(&records).unwrap(), 1.0);
    }

    #[test]
    fn er_formula_case() {
        // Layer 1 catches 1 of 2, layer 2 catches 2 of 2.
        let records = vec![rec(0, &[1, 2], &[2, 5]), rec(1, &[1, 2], &[1, 2, 3])];
        let er = evasion_rate(&records).unwrap();
        assert!((er - 0.25).abs() < 1e-15);
    }

    #[test]
    fn er_requires_watermarking_clients() {
        let records = vec![rec(0, &[], &[1])];
        assert!(evasion_rate(&records).is_err());
    }

    #[test]
    fn ofr_extremes_and_empty_layer_convention() {
        let records = vec![rec(0, &[1, 2], &[1, 2])];
        assert_eq!(overfiltering_rate(&records).unwrap(), 0.0);

        let records = vec![rec(0, &[1], &[2, 3]), rec(1, &[1], &[4])];
        assert_eq!(overfiltering_rate(&records).unwrap(), 1.0);

        // F1 = {1,2,3} with W1 = {1}; F2 empty contributes 0 but counts in L.
        let records = vec![rec(0, &[1], &[1, 2, 3]), rec(1, &[1], &[])];
        let ofr = overfiltering_rate(&records).unwrap();
        assert!((ofr - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(empty_filter_layers(&records), 1);
    }

    #[test]
    fn rates_invariant_under_relabeling() {
        let records = vec![rec(0, &[1, 2], &[2, 5]), rec(1, &[1, 2], &[1, 2, 3])];
        // Relabel clients by i -> 10 - i.
        let relabeled: Vec<LayerFilterRecord> = records
            .iter()
            .map(|r| LayerFilterRecord {
                layer: r.layer,
                watermarking: r.watermarking.iter().map(|i| 10 - i).collect(),
                filtered: r.filtered.iter().map(|i| 10 - i).collect(),
            })
            .collect();
        assert_eq!(evasion_rate(&records).unwrap(), evasion_rate(&relabeled).unwrap());
        assert_eq!(
            overfiltering_rate(&records).unwrap(),
            overfiltering_rate(&relabeled).unwrap()
        );
    }

    #[test]
    fn utility_summary_is_deterministic() {
        use crate::lm::{build_model, ArchConfig, Origin};
        let arch = ArchConfig { vocab_size: 6, context: 3, hidden: 4, hidden_layers: 1 };
        let m = build_model(&arch, 2).unwrap();
        let set = vec![TokenSeq::new(vec![0, 1, 2, 3, 4, 5], Origin::Natural)];
        let a = utility_summary(&m, &[("val", &set)]).unwrap();
        let b = utility_summary(&m, &[("val", &set)]).unwrap();
        assert_eq!(a, b);
    }
}
