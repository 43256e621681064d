//! Aggregation over per-layer client updates: plain averaging and an
//! iterative strong robust filter.
//!
//! The filter loops per layer: estimate the top covariance eigenvalue of the
//! surviving update set, stop once it falls under a supplied clean-variance
//! bound or stabilizes to within a relative tolerance, otherwise drop the
//! client with the largest absolute projection on the top eigendirection.
//! The loop is capped at `2 * ceil(epsilon * N)` removals per layer; chunks
//! of one layer share that budget. Eigenvalues are estimated with power
//! iteration against the N x d update matrix only, so no d x d matrix is
//! ever materialized.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::UpdateVector;
use crate::rng::{derive_seed, SplitMix64};

/// Relative eigenvalue tolerance of the inner power iteration.
const EIGEN_TOL: f64 = 1e-9;
/// Eigenvalues below this count as zero variance.
const LAMBDA_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Average,
    RobustFilter,
}

/// Server-side aggregation settings. `epsilon` is the server's belief about
/// the corrupted fraction; it is allowed to be wrong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub epsilon: f64,
    pub eigen_iters: usize,
    pub convergence_tol: f64,
    pub chunk_factor: usize,
    /// Multiplier k applied to a supplied clean-variance bound.
    pub gamma_multiplier: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: AggregatorKind::RobustFilter,
            epsilon: 0.1,
            eigen_iters: 100,
            convergence_tol: 1e-3,
            chunk_factor: 1,
            gamma_multiplier: 9.0,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "aggregator epsilon must be in [0, 0.5), got {}",
                self.epsilon
            )));
        }
        if self.eigen_iters == 0 {
            return Err(Error::Config("eigen_iters must be >= 1".into()));
        }
        if self.convergence_tol <= 0.0 {
            return Err(Error::Config("convergence_tol must be > 0".into()));
        }
        if self.chunk_factor == 0 {
            return Err(Error::Config("chunk_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-layer removal budget 2 * ceil(epsilon * N).
    pub fn removal_cap(&self, n_clients: usize) -> usize {
        2 * (self.epsilon * n_clients as f64).ceil() as usize
    }
}

/// Arithmetic mean per layer.
pub fn average(updates: &[UpdateVector]) -> Result<UpdateVector> {
    if updates.is_empty() {
        return Err(Error::Aggregation("average of an empty update set".into()));
    }
    let n = updates.len() as f64;
    let mut layers = updates[0].layers.clone();
    for u in &updates[1..] {
        for (acc, l) in layers.iter_mut().zip(&u.layers) {
            for (a, x) in acc.iter_mut().zip(l) {
                *a += x;
            }
        }
    }
    for l in &mut layers {
        for a in l.iter_mut() {
            *a /= n;
        }
    }
    Ok(UpdateVector { layers })
}

fn mean_of(rows: &[&[f64]], idx: &[usize]) -> Vec<f64> {
    let d = rows[0].len();
    let mut mu = vec![0.0; d];
    for &i in idx {
        for (m, x) in mu.iter_mut().zip(rows[i]) {
            *m += x;
        }
    }
    let inv = 1.0 / idx.len() as f64;
    mu.iter_mut().for_each(|m| *m *= inv);
    mu
}

/// Power-iteration estimate of the dominant eigenpair.
#[derive(Debug, Clone)]
pub struct EigenEstimate {
    pub lambda: f64,
    pub direction: Vec<f64>,
    pub iterations: usize,
    /// Number of f64 work entries this call allocated; stays O(d).
    pub work_f64: usize,
}

/// Dominant eigenvalue/vector of the sample covariance (1/(N-1) convention)
/// of the rows indexed by `idx`, via power iteration using only
/// matrix-vector products against the row set. Never forms a d x d matrix.
pub fn dominant_eigen(
    rows: &[&[f64]],
    idx: &[usize],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenEstimate> {
    if idx.len() < 2 {
        return Err(Error::Aggregation(format!(
            "covariance eigenvalue needs >= 2 vectors, got {}",
            idx.len()
        )));
    }
    let d = rows[0].len();
    let n = idx.len() as f64;
    let mut work_f64 = 0usize;

    let mu = mean_of(rows, idx);
    work_f64 += d;

    // Random unit start.
    let mut stream = SplitMix64::new(seed);
    let mut v: Vec<f64> = (0..d)
        .map(|_| {
            // Map to (-1, 1); exact distribution is irrelevant here.
            (stream.next_u64() >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
        })
        .collect();
    work_f64 += d;
    normalize(&mut v);

    let mut y = vec![0.0; d];
    work_f64 += d;

    let mut lambda = 0.0;
    let mut iterations = 0;
    for it in 0..iters {
        iterations = it + 1;
        let mu_dot_v: f64 = dot(&mu, &v);
        y.iter_mut().for_each(|x| *x = 0.0);
        let mut s_sum = 0.0;
        for &i in idx {
            let s = dot(rows[i], &v) - mu_dot_v;
            s_sum += s;
            for (yj, xj) in y.iter_mut().zip(rows[i]) {
                *yj += s * xj;
            }
        }
        for (yj, mj) in y.iter_mut().zip(&mu) {
            *yj = (*yj - s_sum * mj) / (n - 1.0);
        }
        let new_lambda = dot(&y, &v).max(0.0);
        let ynorm = dot(&y, &y).sqrt();
        if ynorm <= LAMBDA_FLOOR {
            // Zero-variance set: lambda 0, keep current (arbitrary) unit v.
            lambda = 0.0;
            break;
        }
        for (vj, yj) in v.iter_mut().zip(&y) {
            *vj = yj / ynorm;
        }
        let converged = (new_lambda - lambda).abs() <= tol * new_lambda.max(LAMBDA_FLOOR);
        lambda = new_lambda;
        if converged && it > 0 {
            break;
        }
    }
    Ok(EigenEstimate { lambda, direction: v, iterations, work_f64 })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
}

/// Projections of each surviving row (minus the survivor mean) on `v`.
pub fn projections(rows: &[&[f64]], idx: &[usize], v: &[f64]) -> Vec<(usize, f64)> {
    let mu = mean_of(rows, idx);
    let mu_dot_v = dot(&mu, v);
    idx.iter().map(|&i| (i, dot(rows[i], v) - mu_dot_v)).collect()
}

/// Remove the `count` clients with the largest absolute projection along
/// `v`, ties broken toward the lower client index. Returns the removed
/// indices; `survivors` is updated in place.
pub fn outlier_removal_step(
    rows: &[&[f64]],
    survivors: &mut Vec<usize>,
    v: &[f64],
    count: usize,
) -> Vec<usize> {
    let mut projs = projections(rows, survivors, v);
    // Sort by |projection| descending, index ascending on ties.
    projs.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let removed: Vec<usize> = projs.iter().take(count).map(|(i, _)| *i).collect();
    survivors.retain(|i| !removed.contains(i));
    removed
}

/// One filtering pass recorded for the offline update dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub layer: usize,
    pub chunk: usize,
    pub iteration: usize,
    pub lambda: f64,
    pub removed: Vec<usize>,
    /// (client, projection on the top eigendirection) for each survivor
    /// entering this iteration.
    pub projections: Vec<(usize, f64)>,
}

/// Result of filtering one set of layered updates.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub mean: UpdateVector,
    /// Clients removed per layer (sorted, deduplicated across chunks).
    pub filtered_per_layer: Vec<Vec<usize>>,
    /// Filter loop iterations per layer, summed over chunks.
    pub iterations_per_layer: Vec<usize>,
    /// Final (maximum over chunks) eigenvalue estimate per layer.
    pub lambda_per_layer: Vec<f64>,
    pub trace: Vec<RemovalRecord>,
}

struct ChunkResult {
    mean: Vec<f64>,
    removed: BTreeSet<usize>,
    iterations: usize,
    lambda_final: f64,
    budget_used: usize,
    trace: Vec<RemovalRecord>,
}

/// Filter one chunk of rows, spending at most `budget` removals.
fn filter_chunk(
    rows: &[&[f64]],
    cfg: &AggregatorConfig,
    clean_variance_bound: Option<f64>,
    budget: usize,
    seed: u64,
    layer: usize,
    chunk: usize,
) -> Result<ChunkResult> {
    let n = rows.len();
    let mut survivors: Vec<usize> = (0..n).collect();
    let mut removed = BTreeSet::new();
    let mut trace = Vec::new();
    let mut lambda_prev: Option<f64> = None;
    let mut lambda_final = 0.0;
    let mut iterations = 0;
    let gamma_bound = clean_variance_bound.map(|b| cfg.gamma_multiplier * b);

    while removed.len() < budget && survivors.len() >= 3 {
        let eig = dominant_eigen(
            rows,
            &survivors,
            cfg.eigen_iters,
            EIGEN_TOL,
            derive_seed(seed, "eigen-start", &[layer as u64, chunk as u64, iterations as u64]),
        )?;
        iterations += 1;
        lambda_final = eig.lambda;
        if let Some(g) = gamma_bound {
            if eig.lambda <= g {
                break;
            }
        }
        if eig.lambda <= LAMBDA_FLOOR {
            break;
        }
        if let Some(prev) = lambda_prev {
            if (eig.lambda - prev).abs() < cfg.convergence_tol * prev.abs().max(LAMBDA_FLOOR) {
                break;
            }
        }
        lambda_prev = Some(eig.lambda);
        let projs = projections(rows, &survivors, &eig.direction);
        let dropped = outlier_removal_step(rows, &mut survivors, &eig.direction, 1);
        trace.push(RemovalRecord {
            layer,
            chunk,
            iteration: iterations - 1,
            lambda: eig.lambda,
            removed: dropped.clone(),
            projections: projs,
        });
        removed.extend(dropped);
    }

    let mean = mean_of(rows, &survivors);
    Ok(ChunkResult {
        mean,
        budget_used: removed.len(),
        removed,
        iterations,
        lambda_final,
        trace,
    })
}

/// Contiguous equal-as-possible partition of `0..dim` into at most
/// `chunk_factor` pieces.
pub fn chunk_layer(dim: usize, chunk_factor: usize) -> Vec<std::ops::Range<usize>> {
    let parts = chunk_factor.max(1).min(dim.max(1));
    let base = dim / parts;
    let rem = dim % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < rem);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// The strong robust filter over layered client updates.
///
/// Layers are filtered independently (in parallel); the chunks of one layer
/// run sequentially and share the layer's removal budget, so
/// `|F_layer| <= 2 * ceil(epsilon * N)` always holds. With fewer than 3
/// clients no removal is attempted and the result equals the plain mean.
pub fn robust_filter(
    updates: &[UpdateVector],
    cfg: &AggregatorConfig,
    clean_variance_bound: Option<f64>,
    seed: u64,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    if updates.is_empty() {
        return Err(Error::Aggregation("robust_filter on an empty update set".into()));
    }
    let n = updates.len();
    let n_layers = updates[0].layers.len();
    for u in updates {
        if u.layers.len() != n_layers {
            return Err(Error::Aggregation("clients disagree on layer partition".into()));
        }
    }
    let cap = cfg.removal_cap(n);

    let per_layer: Result<Vec<_>> = (0..n_layers)
        .into_par_iter()
        .map(|l| {
            let dim = updates[0].layers[l].len();
            if dim == 0 {
                return Err(Error::Aggregation(format!("layer {l} has dimension 0")));
            }
            let mut removed = BTreeSet::new();
            let mut iterations = 0;
            let mut lambda = 0.0f64;
            let mut mean = Vec::with_capacity(dim);
            let mut trace = Vec::new();
            for (c, range) in chunk_layer(dim, cfg.chunk_factor).into_iter().enumerate() {
                let rows: Vec<&[f64]> =
                    updates.iter().map(|u| &u.layers[l][range.clone()]).collect();
                let budget = cap - removed.len();
                let r = filter_chunk(&rows, cfg, clean_variance_bound, budget, seed, l, c)?;
                debug_assert!(r.budget_used <= budget);
                removed.extend(r.removed);
                iterations += r.iterations;
                lambda = lambda.max(r.lambda_final);
                mean.extend(r.mean);
                trace.extend(r.trace);
            }
            debug_assert!(removed.len() <= cap);
            Ok((mean, removed.into_iter().collect::<Vec<usize>>(), iterations, lambda, trace))
        })
        .collect();
    let per_layer = per_layer?;

    let mut outcome = FilterOutcome {
        mean: UpdateVector { layers: Vec::with_capacity(n_layers) },
        filtered_per_layer: Vec::with_capacity(n_layers),
        iterations_per_layer: Vec::with_capacity(n_layers),
        lambda_per_layer: Vec::with_capacity(n_layers),
        trace: Vec::new(),
    };
    for (mean, removed, iterations, lambda, trace) in per_layer {
        outcome.mean.layers.push(mean);
        outcome.filtered_per_layer.push(removed);
        outcome.iterations_per_layer.push(iterations);
        outcome.lambda_per_layer.push(lambda);
        outcome.trace.extend(trace);
    }
    Ok(outcome)
}

/// Evaluation-side bias against the clean mean: the l2 distance and its
/// ratio to sqrt of the clean covariance spectral norm. A zero-variance
/// clean set with nonzero bias reports an infinite ratio explicitly.
pub fn bias(filter_mean: &[f64], clean_mean: &[f64], clean_cov_spectral_norm: f64) -> (f64, f64) {
    let dist: f64 = filter_mean
        .iter()
        .zip(clean_mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let denom = clean_cov_spectral_norm.max(0.0).sqrt();
    let beta_hat = if denom <= LAMBDA_FLOOR {
        if dist <= LAMBDA_FLOOR {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dist / denom
    };
    (dist, beta_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(layers: Vec<Vec<f64>>) -> UpdateVector {
        UpdateVector { layers }
    }

    #[test]
    fn average_trivial_cases() {
        let a = upd(vec![vec![1.0, 2.0], vec![3.0]]);
        let avg = average(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(avg, a);

        let v = upd(vec![vec![1.0, -2.0]]);
        let neg = upd(vec![vec![-1.0, 2.0]]);
        let avg = average(&[v, neg]).unwrap();
        assert_eq!(avg.layers[0], vec![0.0, 0.0]);

        assert!(average(&[]).is_err());
    }

    #[test]
    fn rank_one_eigen_closed_form() {
        // Rows a_i * w: top eigenvalue is var(a) * ||w||^2 (sample variance).
        let w = [1.0, -2.0, 0.5];
        let coeffs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let rows_data: Vec<Vec<f64>> =
            coeffs.iter().map(|a| w.iter().map(|x| a * x).collect()).collect();
        let rows: Vec<&[f64]> = rows_data.iter().map(|r| r.as_slice()).collect();
        let idx: Vec<usize> = (0..rows.len()).collect();
        let eig = dominant_eigen(&rows, &idx, 200, 1e-12, 7).unwrap();
        let mean_a = 2.0;
        let var_a =
            coeffs.iter().map(|a| (a - mean_a) * (a - mean_a)).sum::<f64>() / (coeffs.len() - 1) as f64;
        let w_norm2: f64 = w.iter().map(|x| x * x).sum();
        assert!((eig.lambda - var_a * w_norm2).abs() < 1e-9 * var_a * w_norm2);
        // Direction aligns with +-w.
        let cos = dot(&eig.direction, &w) / w_norm2.sqrt();
        assert!(cos.abs() > 1.0 - 1e-9, "cos={cos}");
    }

    #[test]
    fn zero_variance_gives_zero_lambda() {
        let rows_data = vec![vec![1.0, 1.0]; 4];
        let rows: Vec<&[f64]> = rows_data.iter().map(|r| r.as_slice()).collect();
        let idx = vec![0, 1, 2, 3];
        let eig = dominant_eigen(&rows, &idx, 50, 1e-9, 3).unwrap();
        assert_eq!(eig.lambda, 0.0);
        let norm = dot(&eig.direction, &eig.direction).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_memory_stays_linear_in_d() {
        for d in [8usize, 256, 4096] {
            let rows_data: Vec<Vec<f64>> = (0..6)
                .map(|i| (0..d).map(|j| ((i * j) % 7) as f64).collect())
                .collect();
            let rows: Vec<&[f64]> = rows_data.iter().map(|r| r.as_slice()).collect();
            let idx: Vec<usize> = (0..6).collect();
            let eig = dominant_eigen(&rows, &idx, 30, 1e-9, 1).unwrap();
            assert!(eig.work_f64 <= 4 * d + 16, "work={} d={d}", eig.work_f64);
        }
    }

    #[test]
    fn planted_outlier_removed_first() {
        let mut rows_data: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![(i % 3) as f64 * 0.01, (i % 2) as f64 * 0.01])
            .collect();
        rows_data[5] = vec![100.0, -80.0];
        let rows: Vec<&[f64]> = rows_data.iter().map(|r| r.as_slice()).collect();
        let idx: Vec<usize> = (0..8).collect();
        let eig = dominant_eigen(&rows, &idx, 100, 1e-9, 11).unwrap();
        let mut survivors = idx.clone();
        let removed = outlier_removal_step(&rows, &mut survivors, &eig.direction, 1);
        assert_eq!(removed, vec![5]);
        assert_eq!(survivors.len(), 7);
    }

    #[test]
    fn equal_projections_tie_break_lowest_index() {
        // Two rows mirrored around the mean: equal |projection|.
        let rows_data = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let rows: Vec<&[f64]> = rows_data.iter().map(|r| r.as_slice()).collect();
        let mut survivors = vec![0, 1, 2, 3];
        let removed = outlier_removal_step(&rows, &mut survivors, &[1.0, 0.0], 1);
        assert_eq!(removed, vec![0]);
    }

    #[test]
    fn tight_cluster_is_a_no_op() {
        // Degenerate tight cluster: identical points, zero variance. The
        // filter breaks out on the first iteration without removing anyone.
        let updates: Vec<UpdateVector> = (0..12).map(|_| upd(vec![vec![0.5; 6]])).collect();
        let cfg = AggregatorConfig { epsilon: 0.25, ..AggregatorConfig::default() };
        let out = robust_filter(&updates, &cfg, None, 5).unwrap();
        assert!(out.iterations_per_layer[0] <= 2, "iters={:?}", out.iterations_per_layer);
        assert!(out.filtered_per_layer[0].is_empty());
        assert_eq!(out.mean.layers[0], vec![0.5; 6]);
    }

    #[test]
    fn clean_cluster_with_variance_bound_is_a_no_op() {
        // A jittered cluster whose top eigenvalue sits below the supplied
        // clean-variance bound: the filter stops before removing anyone and
        // the output equals the plain mean.
        let mut stream = SplitMix64::new(99);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                (0..6)
                    .map(|_| (stream.next_u64() >> 11) as f64 / (1u64 << 52) as f64 * 1e-3)
                    .collect()
            })
            .collect();
        let updates: Vec<UpdateVector> = rows.into_iter().map(|r| upd(vec![r])).collect();
        let rows_ref: Vec<&[f64]> = updates.iter().map(|u| u.layers[0].as_slice()).collect();
        let idx: Vec<usize> = (0..12).collect();
        let lambda_clean = dominant_eigen(&rows_ref, &idx, 200, 1e-12, 3).unwrap().lambda;
        let cfg = AggregatorConfig { epsilon: 0.25, ..AggregatorConfig::default() };
        let out = robust_filter(&updates, &cfg, Some(lambda_clean), 5).unwrap();
        assert_eq!(out.iterations_per_layer[0], 1);
        assert!(out.filtered_per_layer[0].is_empty());
        let avg = average(&updates).unwrap();
        let (dist, _) = bias(&out.mean.layers[0], &avg.layers[0], lambda_clean);
        assert!(dist < 1e-12);
    }

    #[test]
    fn iteration_cap_formula() {
        let cfg = AggregatorConfig { epsilon: 0.066, ..AggregatorConfig::default() };
        assert_eq!(cfg.removal_cap(30), 4);
        let cfg = AggregatorConfig { epsilon: 0.3, ..AggregatorConfig::default() };
        assert_eq!(cfg.removal_cap(10), 6);
    }

    #[test]
    fn single_client_filter_equals_average() {
        let u = upd(vec![vec![0.5, -0.25], vec![1.0]]);
        let cfg = AggregatorConfig { epsilon: 0.4, ..AggregatorConfig::default() };
        let out = robust_filter(std::slice::from_ref(&u), &cfg, None, 1).unwrap();
        let avg = average(std::slice::from_ref(&u)).unwrap();
        assert_eq!(out.mean, avg);
        assert!(out.filtered_per_layer.iter().all(|f| f.is_empty()));
    }

    #[test]
    fn chunk_partition_arithmetic() {
        assert_eq!(chunk_layer(10, 1), vec![0..10]);
        let chunks = chunk_layer(10, 3);
        let sizes: Vec<usize> = chunks.iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(chunks.last().unwrap().end, 10);
        // More chunks than entries degrades to singletons.
        assert_eq!(chunk_layer(2, 5).len(), 2);
    }

    #[test]
    fn chunked_filter_unions_removals_under_shared_budget() {
        // Outlier in coordinate 0 (chunk 0) for client 4, outlier in
        // coordinate 3 (chunk 1) for client 2: both are filtered at the
        // layer level, and the cap still binds the union.
        let mut rows: Vec<Vec<f64>> = (0..9).map(|i| vec![0.01 * (i % 2) as f64; 4]).collect();
        rows[4][0] = 50.0;
        rows[2][3] = -60.0;
        let updates: Vec<UpdateVector> = rows.into_iter().map(|r| upd(vec![r])).collect();
        let cfg = AggregatorConfig {
            epsilon: 0.2,
            chunk_factor: 2,
            ..AggregatorConfig::default()
        };
        let out = robust_filter(&updates, &cfg, None, 3).unwrap();
        let filtered = &out.filtered_per_layer[0];
        assert!(filtered.contains(&4), "filtered={filtered:?}");
        assert!(filtered.contains(&2), "filtered={filtered:?}");
        assert!(filtered.len() <= cfg.removal_cap(9));
    }

    #[test]
    fn bias_trivial_and_hand_case() {
        let (b, beta) = bias(&[1.0, 2.0], &[1.0, 2.0], 4.0);
        assert_eq!(b, 0.0);
        assert_eq!(beta, 0.0);

        // Hand-built two-vector case: distance sqrt(0.5^2 + 1.0^2).
        let (b, beta) = bias(&[1.5, 1.0], &[1.0, 2.0], 4.0);
        assert!((b - (0.25f64 + 1.0).sqrt()).abs() < 1e-12);
        assert!((beta - b / 2.0).abs() < 1e-12);

        let (_, beta) = bias(&[1.0], &[0.0], 0.0);
        assert!(beta.is_infinite());
        let (_, beta) = bias(&[0.0], &[0.0], 0.0);
        assert_eq!(beta, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AggregatorConfig::default();
        cfg.epsilon = 0.5;
        assert!(cfg.validate().is_err());
        cfg = AggregatorConfig { chunk_factor: 0, ..AggregatorConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
