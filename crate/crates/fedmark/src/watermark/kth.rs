//! Inverse-transform-sampling watermark keyed by a secret sequence of
//! (uniform, permutation) pairs, with alignment-cost detection and a
//! nonparametric permutation test.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::{logits, softmax, ModelParams, Origin, TokenSeq};
use crate::rng::{derive_seed, rng_for};

use super::{DetectionResult, DocScore};

/// One key sequence element: a uniform draw and a vocabulary permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct KthKeyEntry {
    pub u: f64,
    /// order[r] = token id at rank r.
    pub order: Vec<u32>,
    /// rank[token] = rank of the token under the permutation.
    pub rank: Vec<u32>,
}

impl KthKeyEntry {
    fn random(rng: &mut rand_chacha::ChaCha8Rng, vocab: usize) -> KthKeyEntry {
        let u: f64 = rng.random::<f64>();
        let mut order: Vec<u32> = (0..vocab as u32).collect();
        for i in (1..vocab).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut rank = vec![0u32; vocab];
        for (r, &t) in order.iter().enumerate() {
            rank[t as usize] = r as u32;
        }
        KthKeyEntry { u, order, rank }
    }
}

/// The materialized key sequence xi.
#[derive(Debug, Clone, PartialEq)]
pub struct KthKey {
    pub entries: Vec<KthKeyEntry>,
    pub vocab: usize,
}

impl KthKey {
    /// Derive a key sequence of length `n` over `vocab` tokens from a seed.
    pub fn generate(seed: u64, n: usize, vocab: usize) -> Result<KthKey> {
        if vocab < 2 {
            return Err(Error::Watermark("kth needs vocab >= 2".into()));
        }
        if n == 0 {
            return Err(Error::Watermark("kth key length must be >= 1".into()));
        }
        let mut rng = rng_for(seed, "kth-key", &[]);
        let entries = (0..n).map(|_| KthKeyEntry::random(&mut rng, vocab)).collect();
        Ok(KthKey { entries, vocab })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Key-sequence watermark parameters. The key itself is derived from
/// `key_seed`, so the secret stays a single 64-bit value.
#[derive(Debug, Clone, PartialEq)]
pub struct KthSpec {
    pub key_seed: u64,
    pub key_len: usize,
    /// Resample count of the permutation test.
    pub t_perm: usize,
    /// Per-indel penalty of the edit-robust alignment cost.
    pub gamma_edit: f64,
    /// Detection scans all circular key offsets when true.
    pub block_search: bool,
    /// Generation may wrap past the end of the key when true.
    pub shift_slice: bool,
}

impl KthSpec {
    pub fn new(
        key_seed: u64,
        key_len: usize,
        t_perm: usize,
        gamma_edit: f64,
        block_search: bool,
        shift_slice: bool,
    ) -> Result<KthSpec> {
        if key_len == 0 {
            return Err(Error::Watermark("key_len must be >= 1".into()));
        }
        if t_perm == 0 {
            return Err(Error::Watermark("t_perm must be >= 1".into()));
        }
        if gamma_edit < 0.0 {
            return Err(Error::Watermark(format!("gamma_edit must be >= 0, got {gamma_edit}")));
        }
        Ok(KthSpec { key_seed, key_len, t_perm, gamma_edit, block_search, shift_slice })
    }

    pub fn key(&self, vocab: usize) -> Result<KthKey> {
        KthKey::generate(self.key_seed, self.key_len, vocab)
    }
}

/// eta maps a 0-indexed permutation rank onto [0, 1].
pub fn eta(rank: u32, vocab: usize) -> f64 {
    f64::from(rank) / (vocab - 1) as f64
}

/// Inverse-transform generation: at step i, token probabilities are walked
/// in the order given by pi_i and the first token whose cumulative mass
/// exceeds u_i is emitted. Marginalized over random keys, the output
/// distribution equals the model's.
///
/// `offset` selects where in the key the generation starts. Running past the
/// end wraps around when `shift_slice` is set and errors otherwise.
pub fn kth_generate_its(
    model: &ModelParams,
    prompt: &[u32],
    length: usize,
    key: &KthKey,
    offset: usize,
    shift_slice: bool,
) -> Result<TokenSeq> {
    if length == 0 {
        return Err(Error::Model("generation length must be >= 1".into()));
    }
    if model.arch.vocab_size != key.vocab {
        return Err(Error::Watermark(format!(
            "key vocab {} does not match model vocab {}",
            key.vocab, model.arch.vocab_size
        )));
    }
    let n = key.len();
    if !shift_slice && offset + length > n {
        return Err(Error::Watermark(format!(
            "key exhausted: offset {offset} + length {length} > key length {n} \
             and shift slicing is disabled"
        )));
    }
    let mut tokens = prompt.to_vec();
    for i in 0..length {
        let entry = &key.entries[(offset + i) % n];
        let p = softmax(&logits(model, &tokens)?);
        tokens.push(its_pick(&p, entry));
    }
    Ok(TokenSeq::new(tokens, Origin::SyntheticWatermarked))
}

/// First token in permutation order whose cumulative probability exceeds u.
pub fn its_pick(probs: &[f64], entry: &KthKeyEntry) -> u32 {
    let mut cum = 0.0;
    for &tok in &entry.order {
        cum += probs[tok as usize];
        if cum > entry.u {
            return tok;
        }
    }
    *entry.order.last().expect("nonempty permutation")
}

/// Simple positional alignment cost: sum over i of |u_i - eta(rank(y_i))|.
/// Lengths must match.
pub fn kth_alignment_cost_simple(y: &[u32], slice: &[&KthKeyEntry], vocab: usize) -> Result<f64> {
    if vocab < 2 {
        return Err(Error::Watermark("alignment cost needs vocab >= 2".into()));
    }
    if y.len() != slice.len() {
        return Err(Error::Watermark(format!(
            "simple alignment cost needs equal lengths, got {} vs {}",
            y.len(),
            slice.len()
        )));
    }
    Ok(y.iter()
        .zip(slice)
        .map(|(&t, e)| (e.u - eta(e.rank[t as usize], vocab)).abs())
        .sum())
}

/// Edit-robust alignment cost: minimum over Levenshtein-style alignments
/// where skipping a text token or a key entry costs `gamma_edit`. With
/// `gamma_edit = inf` and equal lengths this reduces to the simple cost.
pub fn kth_alignment_cost_edit(
    y: &[u32],
    slice: &[&KthKeyEntry],
    gamma_edit: f64,
    vocab: usize,
) -> Result<f64> {
    if vocab < 2 {
        return Err(Error::Watermark("alignment cost needs vocab >= 2".into()));
    }
    let m = y.len();
    let n = slice.len();
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    let mut dp = vec![f64::INFINITY; (m + 1) * (n + 1)];
    dp[idx(0, 0)] = 0.0;
    for i in 1..=m {
        dp[idx(i, 0)] = i as f64 * gamma_edit;
    }
    for j in 1..=n {
        dp[idx(0, j)] = j as f64 * gamma_edit;
    }
    for i in 1..=m {
        for j in 1..=n {
            let e = slice[j - 1];
            let match_cost = (e.u - eta(e.rank[y[i - 1] as usize], vocab)).abs();
            let diag = dp[idx(i - 1, j - 1)] + match_cost;
            let del = dp[idx(i - 1, j)] + gamma_edit;
            let ins = dp[idx(i, j - 1)] + gamma_edit;
            dp[idx(i, j)] = diag.min(del).min(ins);
        }
    }
    Ok(dp[idx(m, n)])
}

/// Test statistic phi: minimum simple alignment cost over circular key
/// blocks of the text's length (all offsets when `block_search`, offset 0
/// only otherwise).
pub fn kth_statistic(y: &[u32], key: &KthKey, block_search: bool) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Watermark("statistic of an empty sequence".into()));
    }
    let n = key.len();
    let vocab = key.vocab;
    let offsets: Box<dyn Iterator<Item = usize>> =
        if block_search { Box::new(0..n) } else { Box::new(std::iter::once(0)) };
    let mut best = f64::INFINITY;
    for off in offsets {
        let mut cost = 0.0;
        for (i, &t) in y.iter().enumerate() {
            let e = &key.entries[(off + i) % n];
            cost += (e.u - eta(e.rank[t as usize], vocab)).abs();
            if cost >= best {
                break;
            }
        }
        best = best.min(cost);
    }
    Ok(best)
}

/// Permutation-test p-value for a single sequence against the key.
///
/// `p_hat = (1 + #{phi(y, xi_t) <= phi(y, xi)}) / (T + 1)` where the
/// resampled keys are i.i.d. draws from the key distribution. The reference
/// keys can be shared across documents of one detection call; pass `None`
/// to derive them from the spec.
pub fn kth_permutation_test(
    y: &[u32],
    spec: &KthSpec,
    key: &KthKey,
    nulls: Option<&[KthKey]>,
    alpha: f64,
) -> Result<DetectionResult> {
    let observed = kth_statistic(y, key, spec.block_search)?;
    let owned;
    let nulls = match nulls {
        Some(n) => n,
        None => {
            owned = resample_keys(spec, key.vocab)?;
            &owned
        }
    };
    let mut leq = 0usize;
    for nk in nulls {
        if kth_statistic(y, nk, spec.block_search)? <= observed {
            leq += 1;
        }
    }
    let p_hat = (1.0 + leq as f64) / (nulls.len() as f64 + 1.0);
    Ok(DetectionResult::new(
        observed,
        y.len(),
        None,
        p_hat,
        false,
        alpha,
        vec![DocScore { doc: 0, score: observed, count: y.len(), p_value: Some(p_hat) }],
    ))
}

/// Draw the T reference keys of the permutation test.
pub fn resample_keys(spec: &KthSpec, vocab: usize) -> Result<Vec<KthKey>> {
    (0..spec.t_perm)
        .map(|t| {
            KthKey::generate(
                derive_seed(spec.key_seed, "kth-null-resample", &[t as u64]),
                spec.key_len,
                vocab,
            )
        })
        .collect()
}

/// Radioactivity detection: each watermarked document is regenerated from
/// its prompt by the suspect model (greedy), the regenerated continuation is
/// tested against the key, and the per-document p-values are combined by
/// Bonferroni over their minimum. There is deliberately no score
/// accumulation across documents.
///
/// Documents are `(tokens, prompt_len)`. Regenerations of length <= 1 score
/// p = 1 by convention.
pub fn kth_radioactivity_detect(
    suspect: &ModelParams,
    dataset: &[(&[u32], usize)],
    spec: &KthSpec,
    alpha: f64,
) -> Result<DetectionResult> {
    if dataset.is_empty() {
        return Err(Error::Watermark("radioactivity detection needs documents".into()));
    }
    let vocab = suspect.arch.vocab_size;
    let key = spec.key(vocab)?;
    let nulls = resample_keys(spec, vocab)?;
    let mut per_doc = Vec::with_capacity(dataset.len());
    let mut min_p = 1.0f64;
    let mut min_cost = f64::INFINITY;
    for (d, (tokens, prompt_len)) in dataset.iter().enumerate() {
        let prompt_len = (*prompt_len).min(tokens.len());
        let gen_len = tokens.len() - prompt_len;
        if prompt_len == 0 || gen_len <= 1 {
            per_doc.push(DocScore { doc: d, score: f64::NAN, count: 0, p_value: Some(1.0) });
            continue;
        }
        let mut regen = tokens[..prompt_len].to_vec();
        for _ in 0..gen_len {
            let l = logits(suspect, &regen)?;
            let mut best = 0usize;
            for (t, &lv) in l.iter().enumerate() {
                if lv > l[best] {
                    best = t;
                }
            }
            regen.push(best as u32);
        }
        let y = &regen[prompt_len..];
        let r = kth_permutation_test(y, spec, &key, Some(&nulls), alpha)?;
        min_p = min_p.min(r.p_value);
        if r.score < min_cost {
            min_cost = r.score;
        }
        per_doc.push(DocScore { doc: d, score: r.score, count: y.len(), p_value: Some(r.p_value) });
    }
    let tested = per_doc.iter().filter(|d| d.count > 0).count().max(1);
    let corrected = (min_p * tested as f64).min(1.0);
    Ok(DetectionResult::new(min_cost, per_doc.len(), None, corrected, false, alpha, per_doc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{build_model, ArchConfig};

    #[test]
    fn two_token_inverse_cdf_by_hand() {
        let order = vec![0u32, 1];
        let rank = vec![0u32, 1];
        let p = [0.5, 0.5];
        let low = KthKeyEntry { u: 0.3, order: order.clone(), rank: rank.clone() };
        let high = KthKeyEntry { u: 0.7, order, rank };
        assert_eq!(its_pick(&p, &low), 0);
        assert_eq!(its_pick(&p, &high), 1);
    }

    #[test]
    fn generation_is_deterministic_and_respects_key_exhaustion() {
        let arch = ArchConfig { vocab_size: 8, context: 4, hidden: 6, hidden_layers: 1 };
        let m = build_model(&arch, 9).unwrap();
        let key = KthKey::generate(5, 32, 8).unwrap();
        let a = kth_generate_its(&m, &[1, 2], 20, &key, 0, false).unwrap();
        let b = kth_generate_its(&m, &[1, 2], 20, &key, 0, false).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(kth_generate_its(&m, &[1, 2], 40, &key, 0, false).is_err());
        assert!(kth_generate_its(&m, &[1, 2], 40, &key, 0, true).is_ok());
    }

    #[test]
    fn exact_match_costs_zero() {
        let key = KthKey::generate(3, 1, 8).unwrap();
        let mut e = key.entries[0].clone();
        // Choose the token whose eta equals u exactly.
        let target_rank = 3u32;
        e.u = eta(target_rank, 8);
        let token = e.order[target_rank as usize];
        let cost = kth_alignment_cost_simple(&[token], &[&e], 8).unwrap();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn infinite_indel_penalty_reduces_to_simple_cost() {
        let key = KthKey::generate(11, 6, 8).unwrap();
        let refs: Vec<&KthKeyEntry> = key.entries.iter().collect();
        let y = vec![3, 1, 7, 0, 2, 5];
        let simple = kth_alignment_cost_simple(&y, &refs, 8).unwrap();
        let edit = kth_alignment_cost_edit(&y, &refs, f64::INFINITY, 8).unwrap();
        assert!((simple - edit).abs() < 1e-12);
    }

    #[test]
    fn permutation_test_formula_edge() {
        // With T = 1 and the observed cost strictly smallest, p = 0.5.
        let arch = ArchConfig { vocab_size: 8, context: 4, hidden: 6, hidden_layers: 1 };
        let m = build_model(&arch, 9).unwrap();
        let spec = KthSpec::new(21, 64, 1, 0.0, true, true).unwrap();
        let key = spec.key(8).unwrap();
        let y = kth_generate_its(&m, &[1], 40, &key, 0, true).unwrap();
        let r = kth_permutation_test(&y.tokens[1..], &spec, &key, None, 0.05).unwrap();
        // Either the null beats the observed (p = 1) or not (p = 0.5); for a
        // 40-token watermarked text the observed cost wins overwhelmingly.
        assert_eq!(r.p_value, 0.5);
    }

    #[test]
    fn detection_on_watermarked_text_hits_grid_minimum() {
        let arch = ArchConfig { vocab_size: 8, context: 4, hidden: 6, hidden_layers: 1 };
        let m = build_model(&arch, 9).unwrap();
        let spec = KthSpec::new(77, 256, 99, 0.0, true, true).unwrap();
        let key = spec.key(8).unwrap();
        let y = kth_generate_its(&m, &[2], 200, &key, 13, true).unwrap();
        let r = kth_permutation_test(&y.tokens[1..], &spec, &key, None, 0.05).unwrap();
        assert_eq!(r.p_value, 1.0 / 100.0);
        assert!(r.decision);
    }

    #[test]
    fn empty_regeneration_scores_one() {
        let arch = ArchConfig { vocab_size: 8, context: 4, hidden: 6, hidden_layers: 1 };
        let m = build_model(&arch, 9).unwrap();
        let spec = KthSpec::new(7, 64, 9, 0.0, true, true).unwrap();
        let doc: Vec<u32> = vec![1, 2, 3];
        let r = kth_radioactivity_detect(&m, &[(&doc, 3)], &spec, 0.05).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.decision);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KthSpec::new(1, 0, 9, 0.0, true, true).is_err());
        assert!(KthSpec::new(1, 64, 0, 0.0, true, true).is_err());
        assert!(KthSpec::new(1, 64, 9, -1.0, true, true).is_err());
        assert!(KthKey::generate(1, 8, 1).is_err());
    }
}
