//! Corpus ingestion, IID sharding and client dataset materialization.
//!
//! Client datasets are JSON files written once by the generate stage and
//! read back by the run stage, so the exact training data of every run is
//! auditable on disk.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CleanData, ExperimentConfig};
use crate::error::{Error, Result};
use crate::lm::{ModelParams, Origin, TokenSeq, Vocab};
use crate::rng::rng_for;
use crate::watermark::{kgw, kth, WatermarkSpec};

/// One training document: tokens plus the prompt boundary used when it was
/// generated (natural documents keep the configured prompt length for
/// symmetry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Doc {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub origin: Origin,
    /// Key offset used for key-sequence watermarks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_offset: Option<u64>,
}

impl Doc {
    pub fn to_seq(&self) -> TokenSeq {
        TokenSeq::new(self.tokens.clone(), self.origin)
    }
}

/// One client and its local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    pub is_watermarking: bool,
    pub data_origin: Origin,
    pub docs: Vec<Doc>,
}

/// Everything the run stage needs: client shards plus clean held-out splits.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub clients: Vec<ClientProfile>,
    pub val: Vec<TokenSeq>,
    pub test: Vec<TokenSeq>,
}

/// Corpus documents split by role.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub vocab: Vocab,
    pub pretrain: Vec<TokenSeq>,
    pub shards: Vec<Vec<Vec<u32>>>,
    pub val: Vec<TokenSeq>,
    pub test: Vec<TokenSeq>,
}

/// Read a UTF-8 corpus and cut it into fixed-length documents.
pub fn load_corpus(path: &Path, doc_len: usize) -> Result<(Vocab, Vec<Vec<u32>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("cannot read corpus {}: {e}", path.display())))?;
    let vocab = Vocab::from_corpus(&text)?;
    let tokens = vocab.encode(&text)?;
    let docs: Vec<Vec<u32>> = tokens
        .chunks_exact(doc_len)
        .map(|c| c.to_vec())
        .collect();
    if docs.is_empty() {
        return Err(Error::Corpus(format!(
            "corpus {} is shorter than one document ({doc_len} tokens)",
            path.display()
        )));
    }
    Ok((vocab, docs))
}

/// Shuffle documents and deal them out: pretraining pool, N equal client
/// shards, validation, test.
pub fn split_corpus(cfg: &ExperimentConfig) -> Result<CorpusSplit> {
    let (vocab, mut docs) = load_corpus(&cfg.corpus.path, cfg.corpus.doc_len)?;
    let needed = cfg.corpus.pretrain_docs
        + cfg.fl.clients * cfg.fl.docs_per_client
        + cfg.corpus.val_docs
        + cfg.corpus.test_docs;
    if docs.len() < needed {
        return Err(Error::Corpus(format!(
            "corpus too small: {} documents of length {} available, {} required \
             (pretrain {} + clients {}x{} + val {} + test {})",
            docs.len(),
            cfg.corpus.doc_len,
            needed,
            cfg.corpus.pretrain_docs,
            cfg.fl.clients,
            cfg.fl.docs_per_client,
            cfg.corpus.val_docs,
            cfg.corpus.test_docs
        )));
    }
    docs.shuffle(&mut rng_for(cfg.seed, "corpus-shuffle", &[]));
    let mut iter = docs.into_iter();
    let take = |it: &mut std::vec::IntoIter<Vec<u32>>, n: usize| -> Vec<Vec<u32>> {
        it.by_ref().take(n).collect()
    };
    let pretrain: Vec<TokenSeq> = take(&mut iter, cfg.corpus.pretrain_docs)
        .into_iter()
        .map(|t| TokenSeq::new(t, Origin::Natural))
        .collect();
    let mut shards = Vec::with_capacity(cfg.fl.clients);
    for _ in 0..cfg.fl.clients {
        shards.push(take(&mut iter, cfg.fl.docs_per_client));
    }
    let val = take(&mut iter, cfg.corpus.val_docs)
        .into_iter()
        .map(|t| TokenSeq::new(t, Origin::Natural))
        .collect();
    let test = take(&mut iter, cfg.corpus.test_docs)
        .into_iter()
        .map(|t| TokenSeq::new(t, Origin::Natural))
        .collect();
    Ok(CorpusSplit { vocab, pretrain, shards, val, test })
}

/// Decode temperature for clean synthetic documents: greedy next to the
/// biased green-list scheme, standard multinomial next to the
/// inverse-transform scheme.
pub fn clean_synthetic_temperature(spec: &WatermarkSpec) -> f64 {
    match spec {
        WatermarkSpec::Kgw(_) => 0.0,
        WatermarkSpec::Kth(_) => 1.0,
    }
}

/// Materialize client profiles from the shards: watermarking clients replace
/// every document with a watermarked generation (first `prompt_tokens` as
/// prompt, continuation to the original length); clean clients keep natural
/// text or synthesize clean generations, per config. Returns the profiles
/// and the number of documents skipped for being shorter than the prompt.
pub fn prepare_clients(
    split: &CorpusSplit,
    cfg: &ExperimentConfig,
    spec: &WatermarkSpec,
    generator: &ModelParams,
) -> Result<(Vec<ClientProfile>, usize)> {
    let prompt_len = cfg.data.prompt_tokens;
    let w = cfg.fl.watermark_clients;
    let kth_key = match spec {
        WatermarkSpec::Kth(s) => Some(s.key(generator.arch.vocab_size)?),
        WatermarkSpec::Kgw(_) => None,
    };
    let mut skipped = 0usize;
    let mut clients = Vec::with_capacity(split.shards.len());
    for (id, shard) in split.shards.iter().enumerate() {
        let is_watermarking = id < w;
        let synth_clean = cfg.data.clean_data == CleanData::Synthetic;
        let mut docs = Vec::with_capacity(shard.len());
        for (di, original) in shard.iter().enumerate() {
            if original.len() <= prompt_len {
                eprintln!(
                    "warning: client {id} document {di} has {} tokens, shorter than the \
                     {prompt_len}-token prompt; skipped",
                    original.len()
                );
                skipped += 1;
                continue;
            }
            let gen_len = original.len() - prompt_len;
            let prompt = &original[..prompt_len];
            let doc = if is_watermarking {
                match spec {
                    WatermarkSpec::Kgw(s) => {
                        let mut rng = rng_for(cfg.seed, "wm-gen", &[id as u64, di as u64]);
                        let seq = kgw::kgw_generate(generator, prompt, gen_len, s, &mut rng)?;
                        Doc {
                            tokens: seq.tokens,
                            prompt_len,
                            origin: Origin::SyntheticWatermarked,
                            key_offset: None,
                        }
                    }
                    WatermarkSpec::Kth(s) => {
                        let key = kth_key.as_ref().expect("key built above");
                        let mut rng = rng_for(cfg.seed, "wm-offset", &[id as u64, di as u64]);
                        let offset = rng.random_range(0..key.len());
                        let seq = kth::kth_generate_its(
                            generator,
                            prompt,
                            gen_len,
                            key,
                            offset,
                            s.shift_slice,
                        )?;
                        Doc {
                            tokens: seq.tokens,
                            prompt_len,
                            origin: Origin::SyntheticWatermarked,
                            key_offset: Some(offset as u64),
                        }
                    }
                }
            } else if synth_clean {
                let mut rng = rng_for(cfg.seed, "clean-gen", &[id as u64, di as u64]);
                let t = clean_synthetic_temperature(spec);
                let seq = kgw::plain_generate(generator, prompt, gen_len, t, &mut rng)?;
                Doc {
                    tokens: seq.tokens,
                    prompt_len,
                    origin: Origin::SyntheticClean,
                    key_offset: None,
                }
            } else {
                Doc {
                    tokens: original.clone(),
                    prompt_len,
                    origin: Origin::Natural,
                    key_offset: None,
                }
            };
            docs.push(doc);
        }
        let data_origin = if is_watermarking {
            Origin::SyntheticWatermarked
        } else if synth_clean {
            Origin::SyntheticClean
        } else {
            Origin::Natural
        };
        clients.push(ClientProfile { id, is_watermarking, data_origin, docs });
    }
    Ok((clients, skipped))
}

// --- dataset files -----------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientFile {
    format_version: u32,
    #[serde(flatten)]
    profile: ClientProfile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    format_version: u32,
    name: String,
    docs: Vec<Vec<u32>>,
}

pub fn write_datasets(dir: &Path, data: &PreparedData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for client in &data.clients {
        let file = ClientFile { format_version: 1, profile: client.clone() };
        let path = dir.join(format!("client_{:03}.json", client.id));
        std::fs::write(&path, serde_json::to_vec_pretty(&file).expect("serializable"))?;
    }
    for (name, docs) in [("val", &data.val), ("test", &data.test)] {
        let file = SplitFile {
            format_version: 1,
            name: name.to_string(),
            docs: docs.iter().map(|d| d.tokens.clone()).collect(),
        };
        std::fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_vec_pretty(&file).expect("serializable"),
        )?;
    }
    Ok(())
}

pub fn read_datasets(dir: &Path, n_clients: usize) -> Result<PreparedData> {
    let mut clients = Vec::with_capacity(n_clients);
    for id in 0..n_clients {
        let path = dir.join(format!("client_{id:03}.json"));
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Config(format!(
                "dataset file {} missing ({e}); run the generate stage first",
                path.display()
            ))
        })?;
        let file: ClientFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
        if file.profile.id != id {
            return Err(Error::Format {
                path,
                reason: format!("client id {} in file named for {id}", file.profile.id),
            });
        }
        clients.push(file.profile);
    }
    let mut splits = Vec::new();
    for name in ["val", "test"] {
        let path = dir.join(format!("{name}.json"));
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Config(format!("split file {} missing ({e})", path.display()))
        })?;
        let file: SplitFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
        splits.push(
            file.docs
                .into_iter()
                .map(|t| TokenSeq::new(t, Origin::Natural))
                .collect::<Vec<_>>(),
        );
    }
    let test = splits.pop().expect("two splits");
    let val = splits.pop().expect("two splits");
    Ok(PreparedData { clients, val, test })
}
