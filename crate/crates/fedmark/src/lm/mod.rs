//! Trainable toy autoregressive language model.
//!
//! The model is a fixed-context MLP over token embeddings: the last
//! `context` token embeddings are concatenated, pushed through `hidden_layers`
//! tanh layers, and projected back onto the vocabulary. It is small enough to
//! train in seconds on a CPU while still exposing several named parameter
//! layers, which is what per-layer update filtering needs.

mod model;
mod train;

pub use model::{build_model, generate, logits, sample_next, softmax};
pub use train::{cross_entropy, grad, local_train, pretrain, PretrainOpts};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense, contiguous token id space over a character alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    /// Alphabet = sorted set of distinct characters in `text`.
    pub fn from_corpus(text: &str) -> Result<Vocab> {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        if chars.len() < 2 {
            return Err(Error::Corpus(format!(
                "corpus alphabet has {} distinct characters, need at least 2",
                chars.len()
            )));
        }
        Ok(Vocab { chars })
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Vocab> {
        if chars.len() < 2 {
            return Err(Error::Corpus("alphabet needs at least 2 characters".into()));
        }
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != chars {
            return Err(Error::Corpus("alphabet must be sorted and duplicate-free".into()));
        }
        Ok(Vocab { chars })
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map(|i| i as u32)
                    .map_err(|_| Error::Corpus(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.chars.get(t as usize).copied().unwrap_or('\u{FFFD}'))
            .collect()
    }
}

/// Where a token sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Natural,
    SyntheticClean,
    SyntheticWatermarked,
}

/// A token sequence together with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub origin: Origin,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, origin: Origin) -> TokenSeq {
        TokenSeq { tokens, origin }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// How the next token is drawn from the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodingPolicy {
    /// Argmax with lowest-token-id tie-break. Equivalent to temperature 0.
    Greedy,
    /// Sample from `softmax(logits / temperature)`.
    Multinomial { temperature: f64 },
}

impl DecodingPolicy {
    /// Temperature 0 means greedy.
    pub fn from_temperature(t: f64) -> Result<DecodingPolicy> {
        if t < 0.0 {
            return Err(Error::Model(format!("temperature must be >= 0, got {t}")));
        }
        if t == 0.0 {
            Ok(DecodingPolicy::Greedy)
        } else {
            Ok(DecodingPolicy::Multinomial { temperature: t })
        }
    }
}

/// Architecture description: embedding width equals `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub context: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

/// One named flat parameter segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub dim: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Model("vocab_size must be >= 2".into()));
        }
        if self.context == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::Model(
                "context, hidden and hidden_layers must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Named layer partition. Weights and bias of a dense layer live in one
    /// segment, weight block first.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let v = self.vocab_size;
        let c = self.context;
        let h = self.hidden;
        let mut specs = vec![LayerSpec { name: "embed".into(), dim: v * h }];
        specs.push(LayerSpec { name: "hidden0".into(), dim: c * h * h + h });
        for l in 1..self.hidden_layers {
            specs.push(LayerSpec { name: format!("hidden{l}"), dim: h * h + h });
        }
        specs.push(LayerSpec { name: "output".into(), dim: h * v + v });
        specs
    }

    /// Total parameter count d.
    pub fn param_count(&self) -> usize {
        self.layer_specs().iter().map(|s| s.dim).sum()
    }
}

/// Model parameters partitioned by layer; `layers[i]` matches
/// `arch.layer_specs()[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub layers: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.arch.layer_specs().into_iter().map(|s| s.name).collect()
    }

    /// All entries finite?
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|x| x.is_finite()))
    }

    pub fn apply_delta(&mut self, delta: &UpdateVector, scale: f64) {
        assert_eq!(self.layers.len(), delta.layers.len());
        for (p, d) in self.layers.iter_mut().zip(&delta.layers) {
            assert_eq!(p.len(), d.len());
            for (pi, di) in p.iter_mut().zip(d) {
                *pi += scale * di;
            }
        }
    }
}

/// Per-layer parameter delta, aligned with the owning model's partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateVector {
    pub layers: Vec<Vec<f64>>,
}

impl UpdateVector {
    pub fn zeros_like(model: &ModelParams) -> UpdateVector {
        UpdateVector {
            layers: model.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_architecture_formula() {
        // vocab=64, context=16, hidden=32, 2 hidden layers.
        let arch = ArchConfig { vocab_size: 64, context: 16, hidden: 32, hidden_layers: 2 };
        let v = 64;
        let c = 16;
        let h = 32;
        let expected = v * h + (c * h * h + h) + (h * h + h) + (h * v + v);
        assert_eq!(arch.param_count(), expected);
        assert_eq!(expected, 21_632);
        let specs = arch.layer_specs();
        assert_eq!(
            specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
            vec!["embed", "hidden0", "hidden1", "output"]
        );
    }

    #[test]
    fn degenerate_arch_rejected() {
        let arch = ArchConfig { vocab_size: 64, context: 16, hidden: 0, hidden_layers: 2 };
        assert!(arch.validate().is_err());
        let arch = ArchConfig { vocab_size: 1, context: 16, hidden: 8, hidden_layers: 1 };
        assert!(arch.validate().is_err());
    }

    #[test]
    fn vocab_roundtrip() {
        let v = Vocab::from_corpus("hello world").unwrap();
        let ids = v.encode("hello").unwrap();
        assert_eq!(v.decode(&ids), "hello");
        assert!(v.encode("xyz!").is_err());
    }
}
