//! Green-list watermark: generation, text scoring, exact binomial p-values
//! and the radioactivity variant that scores a suspect model's predictions.
//!
//! Green-list derivation is fully specified so that independent
//! implementations can reproduce it: the secret key and the k context token
//! ids are folded through the SplitMix64 finalizer (`mix64`) to obtain a
//! 64-bit seed, which drives a counter-based SplitMix64 stream performing a
//! partial Fisher-Yates draw of exactly `floor(gamma * |V|)` green tokens.
//! Frozen test vectors live in `tests/data/kgw_green_list_vectors.json`.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::lm::{generate, logits, sample_next, DecodingPolicy, ModelParams, Origin, TokenSeq};
use crate::rng::{mix64, SplitMix64};

use super::{DetectionResult, DocScore};

/// Exact binomial tail sums are used up to this N; beyond it the z
/// approximation takes over.
pub const EXACT_TAIL_MAX_N: usize = 10_000;

/// Green-list watermark parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KgwSpec {
    /// 64-bit secret key s.
    pub key: u64,
    /// Green fraction, 0 < gamma < 1.
    pub gamma: f64,
    /// Logit bias added to green tokens, >= 0.
    pub delta: f64,
    /// Context width of the keyed hash, >= 1.
    pub kgram: usize,
    /// Sampling temperature; 0 means greedy.
    pub temperature: f64,
}

impl KgwSpec {
    pub fn new(key: u64, gamma: f64, delta: f64, kgram: usize, temperature: f64) -> Result<KgwSpec> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Watermark(format!("gamma must be in (0,1), got {gamma}")));
        }
        if delta < 0.0 {
            return Err(Error::Watermark(format!("delta must be >= 0, got {delta}")));
        }
        if kgram == 0 {
            return Err(Error::Watermark("kgram must be >= 1".into()));
        }
        if temperature < 0.0 {
            return Err(Error::Watermark(format!("temperature must be >= 0, got {temperature}")));
        }
        Ok(KgwSpec { key, gamma, delta, kgram, temperature })
    }

    pub fn green_count(&self, vocab: usize) -> usize {
        (self.gamma * vocab as f64).floor() as usize
    }

    /// The exact per-token green probability `floor(gamma |V|) / |V|`. The
    /// binomial null must use this rather than the nominal gamma: at small
    /// vocabularies the floor is a visible fraction of gamma and would bias
    /// every null p-value upward.
    pub fn effective_gamma(&self, vocab: usize) -> f64 {
        self.green_count(vocab) as f64 / vocab as f64
    }
}

/// Boolean green mask of length `vocab` for a k-token context.
///
/// Exactly `floor(gamma * vocab)` entries are true, deterministically in
/// `(key, context)`.
pub fn green_list(spec: &KgwSpec, context: &[u32], vocab: usize) -> Result<Vec<bool>> {
    if context.len() != spec.kgram {
        return Err(Error::Watermark(format!(
            "green_list needs exactly {} context tokens, got {}",
            spec.kgram,
            context.len()
        )));
    }
    let mut h = mix64(spec.key ^ 0x6772_6565_6e6c_6973); // domain separator
    for &t in context {
        h = mix64(h ^ u64::from(t).wrapping_add(0xA076_1D64_78BD_642F));
    }
    let g = spec.green_count(vocab);
    let mut stream = SplitMix64::new(h);
    let mut ids: Vec<u32> = (0..vocab as u32).collect();
    let mut mask = vec![false; vocab];
    // Partial Fisher-Yates: the first g entries are a uniform g-subset.
    for i in 0..g.min(vocab) {
        let j = i + stream.next_below((vocab - i) as u64) as usize;
        ids.swap(i, j);
        mask[ids[i] as usize] = true;
    }
    Ok(mask)
}

/// The k-token hash context ending just before the next generated position,
/// left-padded with token 0 when fewer than k tokens exist yet.
fn kgram_context(tokens: &[u32], k: usize) -> Vec<u32> {
    let mut ctx = vec![0u32; k.saturating_sub(tokens.len())];
    ctx.extend_from_slice(&tokens[tokens.len().saturating_sub(k)..]);
    ctx
}

/// Watermarked generation: at each step the green logits (keyed by the
/// previous k tokens) are shifted by delta before temperature sampling.
///
/// With delta = 0 this consumes the RNG exactly like plain [`generate`], so
/// the token stream is identical.
pub fn kgw_generate(
    model: &ModelParams,
    prompt: &[u32],
    length: usize,
    spec: &KgwSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSeq> {
    if length == 0 {
        return Err(Error::Model("generation length must be >= 1".into()));
    }
    let vocab = model.arch.vocab_size;
    let policy = DecodingPolicy::from_temperature(spec.temperature)?;
    let mut tokens = prompt.to_vec();
    for _ in 0..length {
        let mut l = logits(model, &tokens)?;
        let mask = green_list(spec, &kgram_context(&tokens, spec.kgram), vocab)?;
        for (li, green) in l.iter_mut().zip(&mask) {
            if *green {
                *li += spec.delta;
            }
        }
        tokens.push(sample_next(&l, policy, rng)?);
    }
    Ok(TokenSeq::new(tokens, Origin::SyntheticWatermarked))
}

/// Accumulates (S, N) over scored positions with the repetition rule: a
/// `(k-gram, token)` pair contributes only the first time it is seen within
/// one detection call.
pub struct KgwScorer {
    spec: KgwSpec,
    vocab: usize,
    seen: HashSet<(Vec<u32>, u32)>,
    green_hits: usize,
    scored: usize,
}

impl KgwScorer {
    pub fn new(spec: &KgwSpec, vocab: usize) -> KgwScorer {
        KgwScorer { spec: *spec, vocab, seen: HashSet::new(), green_hits: 0, scored: 0 }
    }

    /// Score one position; returns (contributed, green) for bookkeeping.
    pub fn score_position(&mut self, kgram: &[u32], token: u32) -> Result<(bool, bool)> {
        debug_assert_eq!(kgram.len(), self.spec.kgram);
        if !self.seen.insert((kgram.to_vec(), token)) {
            return Ok((false, false));
        }
        let mask = green_list(&self.spec, kgram, self.vocab)?;
        let green = mask[token as usize];
        self.scored += 1;
        if green {
            self.green_hits += 1;
        }
        Ok((true, green))
    }

    pub fn totals(&self) -> (usize, usize) {
        (self.green_hits, self.scored)
    }
}

/// Count green tokens in a text: positions k..len, deduplicated. Texts of
/// length <= k score (0, 0), which downstream becomes p = 1.
pub fn kgw_score_text(text: &[u32], spec: &KgwSpec, vocab: usize) -> Result<(usize, usize)> {
    let mut scorer = KgwScorer::new(spec, vocab);
    score_text_into(text, &mut scorer)?;
    Ok(scorer.totals())
}

fn score_text_into(text: &[u32], scorer: &mut KgwScorer) -> Result<(usize, usize)> {
    let k = scorer.spec.kgram;
    let before = scorer.totals();
    if text.len() > k {
        for i in k..text.len() {
            scorer.score_position(&text[i - k..i], text[i])?;
        }
    }
    let after = scorer.totals();
    Ok((after.0 - before.0, after.1 - before.1))
}

/// One-sided p-value for S green hits among N scored positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PValue {
    pub p: f64,
    pub z: Option<f64>,
    /// True when computed by the exact tail sum.
    pub exact: bool,
}

/// P[Binomial(N, gamma) >= S]: exact tail sum for N <= `EXACT_TAIL_MAX_N`,
/// z approximation above. N = 0 returns p = 1 by convention.
pub fn kgw_pvalue(s: usize, n: usize, gamma: f64) -> Result<PValue> {
    if s > n {
        return Err(Error::Watermark(format!("S={s} exceeds N={n}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Watermark(format!("gamma must be in (0,1), got {gamma}")));
    }
    if n == 0 {
        return Ok(PValue { p: 1.0, z: None, exact: true });
    }
    let nf = n as f64;
    let sf = s as f64;
    let z = (sf - gamma * nf) / (nf * gamma * (1.0 - gamma)).sqrt();
    if n <= EXACT_TAIL_MAX_N {
        Ok(PValue { p: binomial_tail_upper(n as u64, s as u64, gamma), z: Some(z), exact: true })
    } else {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Ok(PValue { p: normal.sf(z).clamp(0.0, 1.0), z: Some(z), exact: false })
    }
}

/// Exact P[Binomial(n, gamma) >= s] by a stable upward tail sum from the
/// boundary term.
pub fn binomial_tail_upper(n: u64, s: u64, gamma: f64) -> f64 {
    if s == 0 {
        return 1.0;
    }
    if s > n {
        return 0.0;
    }
    if s == n {
        // Closed form for the extreme tail.
        return gamma.powi(n as i32);
    }
    let nf = n as f64;
    let sf = s as f64;
    let ln_term = ln_gamma(nf + 1.0) - ln_gamma(sf + 1.0) - ln_gamma(nf - sf + 1.0)
        + sf * gamma.ln()
        + (nf - sf) * (1.0 - gamma).ln();
    let mut term = ln_term.exp();
    let mut sum = term;
    let ratio = gamma / (1.0 - gamma);
    for i in (s + 1)..=n {
        term *= (n - i + 1) as f64 / i as f64 * ratio;
        sum += term;
        if term < sum * 1e-18 && i as f64 > nf * gamma {
            break;
        }
    }
    sum.min(1.0)
}

fn result_from_counts(
    green: usize,
    scored: usize,
    gamma: f64,
    alpha: f64,
    per_doc: Vec<DocScore>,
) -> Result<DetectionResult> {
    let pv = kgw_pvalue(green, scored, gamma)?;
    Ok(DetectionResult::new(green as f64, scored, pv.z, pv.p, pv.exact, alpha, per_doc))
}

/// Text-level detection of a single sequence.
pub fn kgw_detect_text(
    text: &[u32],
    spec: &KgwSpec,
    vocab: usize,
    alpha: f64,
) -> Result<DetectionResult> {
    let (green, scored) = kgw_score_text(text, spec, vocab)?;
    let per_doc =
        vec![DocScore { doc: 0, score: green as f64, count: scored, p_value: None }];
    result_from_counts(green, scored, spec.effective_gamma(vocab), alpha, per_doc)
}

/// Radioactivity detection: for every position of every document, feed the
/// true preceding context to the suspect model, take its greedy prediction,
/// and score that prediction against the green list keyed by the k true
/// context tokens. (S, N) accumulate across documents under one global
/// repetition filter, processed in dataset order.
pub fn kgw_radioactivity_detect(
    suspect: &ModelParams,
    dataset: &[&[u32]],
    spec: &KgwSpec,
    alpha: f64,
) -> Result<DetectionResult> {
    if dataset.is_empty() {
        return Err(Error::Watermark("radioactivity detection needs documents".into()));
    }
    let vocab = suspect.arch.vocab_size;
    let k = spec.kgram;
    let mut scorer = KgwScorer::new(spec, vocab);
    let mut per_doc = Vec::with_capacity(dataset.len());
    for (d, doc) in dataset.iter().enumerate() {
        let mut green = 0usize;
        let mut scored = 0usize;
        if doc.len() > k {
            for i in k..doc.len() {
                let l = logits(suspect, &doc[..i])?;
                let mut best = 0usize;
                for (t, &lv) in l.iter().enumerate() {
                    if lv > l[best] {
                        best = t;
                    }
                }
                let (contributed, is_green) =
                    scorer.score_position(&doc[i - k..i], best as u32)?;
                if contributed {
                    scored += 1;
                    if is_green {
                        green += 1;
                    }
                }
            }
        }
        per_doc.push(DocScore { doc: d, score: green as f64, count: scored, p_value: None });
    }
    let (green, scored) = scorer.totals();
    result_from_counts(green, scored, spec.effective_gamma(vocab), alpha, per_doc)
}

/// Plain (non-radioactive) generation helper used for clean synthetic data:
/// identical to [`kgw_generate`] with delta = 0 but without touching green
/// lists at all.
pub fn plain_generate(
    model: &ModelParams,
    prompt: &[u32],
    length: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSeq> {
    let policy = DecodingPolicy::from_temperature(temperature)?;
    generate(model, prompt, length, policy, rng)
}
