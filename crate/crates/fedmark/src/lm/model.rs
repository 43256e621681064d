//! Forward pass, sampling and autoregressive generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::{ArchConfig, DecodingPolicy, ModelParams, Origin, TokenSeq};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Build a model with deterministic seeded initialization: weights are
/// uniform in `±1/sqrt(fan_in)`, biases zero, drawn in layer order.
pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = rng_for(seed, "model-init", &[]);
    let v = arch.vocab_size;
    let c = arch.context;
    let h = arch.hidden;

    let mut layers = Vec::new();
    layers.push(draw_uniform(&mut rng, v * h, 1.0 / (h as f64).sqrt()));
    layers.push(dense_init(&mut rng, c * h, h));
    for _ in 1..arch.hidden_layers {
        layers.push(dense_init(&mut rng, h, h));
    }
    layers.push(dense_init(&mut rng, h, v));

    Ok(ModelParams { arch: *arch, layers })
}

fn draw_uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dense_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut seg = draw_uniform(rng, fan_in * fan_out, 1.0 / (fan_in as f64).sqrt());
    seg.extend(std::iter::repeat(0.0).take(fan_out));
    seg
}

/// Activations cached by the forward pass, consumed by backprop.
pub(super) struct ForwardCache {
    /// Concatenated context embedding, length `context * hidden`.
    pub x: Vec<f64>,
    /// Context token for each slot; `None` for zero-padded slots.
    pub slots: Vec<Option<u32>>,
    /// Post-tanh activations per hidden layer.
    pub acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Forward pass over the last `context` tokens of `context_tokens`.
/// Older-than-available slots contribute a zero embedding.
pub(super) fn forward(model: &ModelParams, context_tokens: &[u32]) -> Result<ForwardCache> {
    if context_tokens.is_empty() {
        return Err(Error::Model("context must be nonempty".into()));
    }
    let arch = &model.arch;
    let v = arch.vocab_size;
    let c = arch.context;
    let h = arch.hidden;

    let tail = &context_tokens[context_tokens.len().saturating_sub(c)..];
    let mut slots: Vec<Option<u32>> = vec![None; c];
    for (j, &t) in tail.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::Model(format!("token id {t} out of vocabulary {v}")));
        }
        slots[c - tail.len() + j] = Some(t);
    }

    let embed = &model.layers[0];
    let mut x = vec![0.0; c * h];
    for (s, slot) in slots.iter().enumerate() {
        if let Some(t) = slot {
            let row = &embed[(*t as usize) * h..(*t as usize + 1) * h];
            x[s * h..(s + 1) * h].copy_from_slice(row);
        }
    }

    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(arch.hidden_layers);
    let mut input: &[f64] = &x;
    for l in 0..arch.hidden_layers {
        let (w, b) = dense_parts(&model.layers[1 + l], input.len(), h);
        let mut a = vec![0.0; h];
        for (o, ao) in a.iter_mut().enumerate() {
            let row = &w[o * input.len()..(o + 1) * input.len()];
            let z: f64 = row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>() + b[o];
            *ao = z.tanh();
        }
        acts.push(a);
        input = acts.last().unwrap();
    }

    let (wout, bout) = dense_parts(model.layers.last().unwrap(), h, v);
    let hlast = acts.last().unwrap();
    let mut logits = vec![0.0; v];
    for (o, lo) in logits.iter_mut().enumerate() {
        let row = &wout[o * h..(o + 1) * h];
        *lo = row.iter().zip(hlast).map(|(wi, hi)| wi * hi).sum::<f64>() + bout[o];
    }

    Ok(ForwardCache { x, slots, acts, logits })
}

/// Split a dense layer segment into its weight and bias parts.
pub(super) fn dense_parts(seg: &[f64], fan_in: usize, fan_out: usize) -> (&[f64], &[f64]) {
    let split = fan_in * fan_out;
    (&seg[..split], &seg[split..split + fan_out])
}

/// Next-token logits for a context (truncated to the model's window).
pub fn logits(model: &ModelParams, context: &[u32]) -> Result<Vec<f64>> {
    Ok(forward(model, context)?.logits)
}

/// Draw one token id from a logit vector under a decoding policy.
///
/// Greedy returns the argmax, breaking ties toward the lowest token id.
pub fn sample_next(
    logit_vec: &[f64],
    policy: DecodingPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    if logit_vec.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("non-finite logits in sample_next".into()));
    }
    match policy {
        DecodingPolicy::Greedy => {
            let mut best = 0usize;
            for (i, &l) in logit_vec.iter().enumerate() {
                if l > logit_vec[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
        DecodingPolicy::Multinomial { temperature } => {
            if temperature <= 0.0 {
                return Err(Error::Model(format!(
                    "multinomial sampling needs temperature > 0, got {temperature}"
                )));
            }
            let scaled: Vec<f64> = logit_vec.iter().map(|&l| l / temperature).collect();
            let probs = softmax(&scaled);
            let u: f64 = rng.random::<f64>();
            let mut cum = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    return Ok(i as u32);
                }
            }
            Ok((probs.len() - 1) as u32)
        }
    }
}

/// Autoregressive generation: returns the prompt plus exactly `length` new
/// tokens. Greedy decoding is a pure function of `(model, prompt)`.
pub fn generate(
    model: &ModelParams,
    prompt: &[u32],
    length: usize,
    policy: DecodingPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSeq> {
    if length == 0 {
        return Err(Error::Model("generation length must be >= 1".into()));
    }
    let mut tokens = prompt.to_vec();
    for _ in 0..length {
        let l = logits(model, &tokens)?;
        tokens.push(sample_next(&l, policy, rng)?);
    }
    Ok(TokenSeq::new(tokens, Origin::SyntheticClean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn tiny_arch() -> ArchConfig {
        ArchConfig { vocab_size: 8, context: 4, hidden: 6, hidden_layers: 1 }
    }

    #[test]
    fn seeded_build_is_bit_identical() {
        let arch = tiny_arch();
        let a = build_model(&arch, 7).unwrap();
        let b = build_model(&arch, 7).unwrap();
        assert_eq!(a, b);
        let c = build_model(&arch, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_model_gives_uniform_distribution() {
        let arch = tiny_arch();
        let mut m = build_model(&arch, 1).unwrap();
        for l in &mut m.layers {
            l.iter_mut().for_each(|x| *x = 0.0);
        }
        let p = softmax(&logits(&m, &[3, 1]).unwrap());
        for pi in p {
            assert!((pi - 1.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let arch = tiny_arch();
        let m = build_model(&arch, 3).unwrap();
        for ctx in [&[0u32][..], &[1, 2, 3, 4, 5, 6][..], &[7][..]] {
            let p = softmax(&logits(&m, ctx).unwrap());
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn greedy_argmax_and_tie_break() {
        let mut rng = rng_for(0, "t", &[]);
        assert_eq!(sample_next(&[0.0, 5.0, 0.0, 0.0], DecodingPolicy::Greedy, &mut rng).unwrap(), 1);
        assert_eq!(sample_next(&[2.0, 2.0, 2.0], DecodingPolicy::Greedy, &mut rng).unwrap(), 0);
    }

    #[test]
    fn negative_temperature_rejected() {
        assert!(DecodingPolicy::from_temperature(-0.5).is_err());
        let mut rng = rng_for(0, "t", &[]);
        let r = sample_next(&[0.0, 1.0], DecodingPolicy::Multinomial { temperature: -1.0 }, &mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn multinomial_frequency_matches_softmax() {
        // logits [0, ln 3] at T=1: P(token 1) = 3/4.
        let mut rng = rng_for(99, "mc", &[]);
        let logit_vec = [0.0, 3.0_f64.ln()];
        let n = 100_000;
        let mut ones = 0usize;
        for _ in 0..n {
            if sample_next(&logit_vec, DecodingPolicy::Multinomial { temperature: 1.0 }, &mut rng)
                .unwrap()
                == 1
            {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq={freq}");
    }

    #[test]
    fn generate_appends_exactly_length_tokens() {
        let m = build_model(&tiny_arch(), 5).unwrap();
        let mut rng = rng_for(0, "g", &[]);
        let out = generate(&m, &[1, 2], 1, DecodingPolicy::Greedy, &mut rng).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(&out.tokens[..2], &[1, 2]);
        assert!(generate(&m, &[1], 0, DecodingPolicy::Greedy, &mut rng).is_err());
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = build_model(&tiny_arch(), 5).unwrap();
        let mut r1 = rng_for(1, "a", &[]);
        let mut r2 = rng_for(2, "b", &[]);
        let a = generate(&m, &[3, 4], 20, DecodingPolicy::Greedy, &mut r1).unwrap();
        let b = generate(&m, &[3, 4], 20, DecodingPolicy::Greedy, &mut r2).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn empty_context_rejected() {
        let m = build_model(&tiny_arch(), 5).unwrap();
        assert!(logits(&m, &[]).is_err());
    }
}
