//! Loss, analytic gradients, normalized-SGD local training and centralized
//! pretraining.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamParams};
use crate::rng::rng_for;

use super::model::{dense_parts, forward, softmax};
use super::{ModelParams, TokenSeq, UpdateVector};

/// Mean next-token negative log-likelihood in nats over every position of
/// every document (position t is predicted from tokens 0..t).
pub fn cross_entropy(model: &ModelParams, dataset: &[TokenSeq]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Model("cross_entropy needs a nonempty dataset".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in dataset {
        for t in 1..doc.tokens.len() {
            let cache = forward(model, &doc.tokens[..t])?;
            let p = softmax(&cache.logits);
            let target = doc.tokens[t] as usize;
            total -= p[target].ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Model("no scorable positions (all documents too short)".into()));
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("cross entropy is not finite: {loss}")));
    }
    Ok(loss)
}

/// Mean loss and mean analytic gradient over all next-token positions of a
/// batch of documents.
pub fn grad(model: &ModelParams, docs: &[&[u32]]) -> Result<(f64, UpdateVector)> {
    let arch = &model.arch;
    let h = arch.hidden;
    let v = arch.vocab_size;
    let c = arch.context;

    let mut g = UpdateVector::zeros_like(model);
    let mut total = 0.0;
    let mut count = 0usize;

    for doc in docs {
        for t in 1..doc.len() {
            let cache = forward(model, &doc[..t])?;
            let p = softmax(&cache.logits);
            let target = doc[t] as usize;
            total -= p[target].ln();
            count += 1;

            // dL/dlogits = p - onehot(target)
            let mut dlogits = p;
            dlogits[target] -= 1.0;

            // Output layer.
            let hidden_last = cache.acts.last().unwrap();
            {
                let seg = &mut g.layers[arch.hidden_layers + 1];
                for o in 0..v {
                    for i in 0..h {
                        seg[o * h + i] += dlogits[o] * hidden_last[i];
                    }
                    seg[v * h + o] += dlogits[o];
                }
            }
            let (wout, _) = dense_parts(&model.layers[arch.hidden_layers + 1], h, v);
            let mut dact = vec![0.0; h];
            for o in 0..v {
                for i in 0..h {
                    dact[i] += dlogits[o] * wout[o * h + i];
                }
            }

            // Hidden layers, last to first.
            for l in (0..arch.hidden_layers).rev() {
                let fan_in = if l == 0 { c * h } else { h };
                let input: &[f64] = if l == 0 { &cache.x } else { &cache.acts[l - 1] };
                let act = &cache.acts[l];
                // dz = dact * (1 - act^2)
                let dz: Vec<f64> =
                    dact.iter().zip(act).map(|(da, a)| da * (1.0 - a * a)).collect();
                {
                    let seg = &mut g.layers[1 + l];
                    for o in 0..h {
                        for i in 0..fan_in {
                            seg[o * fan_in + i] += dz[o] * input[i];
                        }
                        seg[h * fan_in + o] += dz[o];
                    }
                }
                let (w, _) = dense_parts(&model.layers[1 + l], fan_in, h);
                let mut dinput = vec![0.0; fan_in];
                for o in 0..h {
                    for i in 0..fan_in {
                        dinput[i] += dz[o] * w[o * fan_in + i];
                    }
                }
                if l == 0 {
                    // Scatter into the embedding rows used by each slot.
                    let seg = &mut g.layers[0];
                    for (s, slot) in cache.slots.iter().enumerate() {
                        if let Some(tok) = slot {
                            let row = (*tok as usize) * h;
                            for j in 0..h {
                                seg[row + j] += dinput[s * h + j];
                            }
                        }
                    }
                } else {
                    dact = dinput;
                }
            }
        }
    }

    if count == 0 {
        return Err(Error::Model("gradient over an empty batch".into()));
    }
    let inv = 1.0 / count as f64;
    for layer in &mut g.layers {
        for x in layer.iter_mut() {
            *x *= inv;
            if !x.is_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
    }
    Ok((total * inv, g))
}

/// Normalized SGD: J steps of `theta -= lr * g / (||g||_2 + 1e-12)`, batches
/// cycling deterministically through the dataset. Returns the resulting
/// parameter delta per layer.
///
/// `batch_docs = 0` means full-batch.
pub fn local_train(
    model: &ModelParams,
    dataset: &[TokenSeq],
    steps: usize,
    lr: f64,
    batch_docs: usize,
) -> Result<UpdateVector> {
    if steps == 0 {
        return Err(Error::Model("local_train needs steps >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Model("local_train needs a nonempty dataset".into()));
    }
    let n = dataset.len();
    let batch = if batch_docs == 0 { n } else { batch_docs.min(n) };

    let mut local = model.clone();
    for j in 0..steps {
        let start = (j * batch) % n;
        let docs: Vec<&[u32]> =
            (0..batch).map(|i| dataset[(start + i) % n].tokens.as_slice()).collect();
        let (_, g) = grad(&local, &docs)?;
        let norm = g.l2_norm();
        let scale = lr / (norm + 1e-12);
        for (layer, glayer) in local.layers.iter_mut().zip(&g.layers) {
            for (x, gx) in layer.iter_mut().zip(glayer) {
                *x -= scale * gx;
            }
        }
    }

    let layers = local
        .layers
        .iter()
        .zip(&model.layers)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    Ok(UpdateVector { layers })
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_docs: usize,
    pub adam: AdamParams,
}

/// Centralized Adam pretraining with a per-epoch reshuffle. Returns the
/// trained model and the mean training loss per epoch.
pub fn pretrain(
    mut model: ModelParams,
    docs: &[TokenSeq],
    seed: u64,
    opts: &PretrainOpts,
) -> Result<(ModelParams, Vec<f64>)> {
    if docs.is_empty() {
        return Err(Error::Corpus("pretraining corpus is empty".into()));
    }
    let batch = if opts.batch_docs == 0 { docs.len() } else { opts.batch_docs.min(docs.len()) };
    let mut adam = Adam::new(&model, opts.adam);
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng_for(seed, "pretrain-shuffle", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let batch_docs: Vec<&[u32]> =
                chunk.iter().map(|&i| docs[i].tokens.as_slice()).collect();
            let (loss, g) = grad(&model, &batch_docs)?;
            adam.apply(&mut model, &g, opts.lr);
            epoch_loss += loss;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{build_model, ArchConfig, Origin};

    fn tiny_arch() -> ArchConfig {
        ArchConfig { vocab_size: 8, context: 3, hidden: 4, hidden_layers: 1 }
    }

    fn seq(tokens: Vec<u32>) -> TokenSeq {
        TokenSeq::new(tokens, Origin::Natural)
    }

    #[test]
    fn zero_model_cross_entropy_is_ln_vocab() {
        let arch = tiny_arch();
        let mut m = build_model(&arch, 0).unwrap();
        for l in &mut m.layers {
            l.iter_mut().for_each(|x| *x = 0.0);
        }
        let ce = cross_entropy(&m, &[seq(vec![0, 1, 2, 3, 4])]).unwrap();
        assert!((ce - 8.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = build_model(&tiny_arch(), 0).unwrap();
        assert!(cross_entropy(&m, &[]).is_err());
    }

    #[test]
    fn stationary_point_gives_zero_update() {
        // All-zero model predicts uniformly; on a dataset whose targets are
        // exactly uniform, every gradient component vanishes.
        let arch = tiny_arch();
        let mut m = build_model(&arch, 0).unwrap();
        for l in &mut m.layers {
            l.iter_mut().for_each(|x| *x = 0.0);
        }
        let v = arch.vocab_size as u32;
        let tokens: Vec<u32> = (0..2 * v + 1).map(|i| i % v).collect();
        let delta = local_train(&m, &[seq(tokens)], 3, 0.5, 0).unwrap();
        assert!(delta.l2_norm() < 1e-12);
    }

    #[test]
    fn single_step_matches_normalized_gradient() {
        let arch = tiny_arch();
        let m = build_model(&arch, 11).unwrap();
        let data = [seq(vec![1, 4, 2, 7, 7, 0, 3])];
        let docs: Vec<&[u32]> = data.iter().map(|d| d.tokens.as_slice()).collect();
        let (_, g) = grad(&m, &docs).unwrap();
        let norm = g.l2_norm();
        let lr = 0.3;
        let delta = local_train(&m, &data, 1, lr, 0).unwrap();
        for (dl, gl) in delta.layers.iter().zip(&g.layers) {
            for (d, gx) in dl.iter().zip(gl) {
                let expect = -lr * gx / (norm + 1e-12);
                assert!((d - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_partition_matches_model_partition() {
        let arch = ArchConfig { vocab_size: 9, context: 5, hidden: 6, hidden_layers: 2 };
        let m = build_model(&arch, 3).unwrap();
        let delta = local_train(&m, &[seq(vec![1, 2, 3, 4, 5, 6, 7, 8])], 2, 0.1, 0).unwrap();
        assert_eq!(delta.layers.len(), m.layers.len());
        for (d, p) in delta.layers.iter().zip(&m.layers) {
            assert_eq!(d.len(), p.len());
        }
    }

    #[test]
    fn pretraining_loss_trends_down() {
        let arch = tiny_arch();
        let m = build_model(&arch, 42).unwrap();
        // Tiny repetitive corpus: 0 1 2 3 0 1 2 3 ...
        let docs: Vec<TokenSeq> =
            (0..6).map(|_| seq((0..32).map(|i| i % 4).collect())).collect();
        let opts = PretrainOpts {
            epochs: 12,
            lr: 0.02,
            batch_docs: 3,
            adam: AdamParams::default(),
        };
        let (_, curve) = pretrain(m, &docs, 42, &opts).unwrap();
        let first: f64 = curve[..3].iter().sum::<f64>() / 3.0;
        let last: f64 = curve[curve.len() - 3..].iter().sum::<f64>() / 3.0;
        assert!(last < first, "curve={curve:?}");
    }
}
