//! Synthetic corrupted-Gaussian benchmark for the robust aggregator: plants
//! an epsilon fraction of far outliers among unit-variance Gaussian clients
//! and measures the filter's bias against the clean mean across dimensions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agg::{self, AggregatorConfig, AggregatorKind};
use crate::config::BenchConfig;
use crate::error::Result;
use crate::lm::UpdateVector;
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTrial {
    pub d: usize,
    pub trial: usize,
    pub bias: f64,
    pub beta_hat: f64,
    pub removed: usize,
    /// Planted outliers among the removed clients.
    pub caught_outliers: usize,
    pub planted_outliers: usize,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchDimSummary {
    pub d: usize,
    pub trials: usize,
    pub mean_beta_hat: f64,
    pub frac_beta_le_9: f64,
    pub median_wall_secs: f64,
}

/// One benchmark cell: filter an epsilon-corrupted Gaussian sample.
fn run_trial(cfg: &BenchConfig, d: usize, trial: usize) -> Result<BenchTrial> {
    let n = cfg.clients;
    let planted = (cfg.epsilon * n as f64).floor() as usize;
    let n_clean = n - planted;
    let mut rng = rng_for(cfg.seed, "bench", &[d as u64, trial as u64]);

    // Clean clients: N(0, I_d).
    let mut rows: Vec<Vec<f64>> = (0..n_clean)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    // Outlier cluster at `outlier_distance` along a random direction.
    let mut direction: Vec<f64> =
        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|x| *x *= cfg.outlier_distance / norm);
    for _ in 0..planted {
        let row: Vec<f64> = direction
            .iter()
            .map(|x| x + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        rows.push(row);
    }
    // Outliers sit at indices n_clean..n.

    let clean_refs: Vec<&[f64]> = rows[..n_clean].iter().map(|r| r.as_slice()).collect();
    let clean_idx: Vec<usize> = (0..n_clean).collect();
    let clean_lambda = agg::dominant_eigen(
        &clean_refs,
        &clean_idx,
        200,
        1e-9,
        derive_seed(cfg.seed, "bench-clean-eigen", &[d as u64, trial as u64]),
    )?
    .lambda;
    let clean_mean: Vec<f64> = {
        let mut mu = vec![0.0; d];
        for r in &rows[..n_clean] {
            for (m, x) in mu.iter_mut().zip(r) {
                *m += x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n_clean as f64);
        mu
    };

    let updates: Vec<UpdateVector> =
        rows.into_iter().map(|r| UpdateVector { layers: vec![r] }).collect();
    let agg_cfg = AggregatorConfig {
        kind: AggregatorKind::RobustFilter,
        epsilon: cfg.epsilon,
        ..AggregatorConfig::default()
    };
    let start = std::time::Instant::now();
    let out = agg::robust_filter(
        &updates,
        &agg_cfg,
        Some(clean_lambda),
        derive_seed(cfg.seed, "bench-filter", &[d as u64, trial as u64]),
    )?;
    let wall_secs = start.elapsed().as_secs_f64();

    let removed = &out.filtered_per_layer[0];
    let caught = removed.iter().filter(|&&i| i >= n_clean).count();
    let (bias, beta_hat) = agg::bias(&out.mean.layers[0], &clean_mean, clean_lambda);
    Ok(BenchTrial {
        d,
        trial,
        bias,
        beta_hat,
        removed: removed.len(),
        caught_outliers: caught,
        planted_outliers: planted,
        wall_secs,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchTrial>> {
    let mut trials = Vec::with_capacity(cfg.dims.len() * cfg.trials);
    for &d in &cfg.dims {
        for t in 0..cfg.trials {
            trials.push(run_trial(cfg, d, t)?);
        }
    }
    Ok(trials)
}

pub fn summarize(trials: &[BenchTrial]) -> Vec<BenchDimSummary> {
    let mut dims: Vec<usize> = trials.iter().map(|t| t.d).collect();
    dims.sort_unstable();
    dims.dedup();
    dims.into_iter()
        .map(|d| {
            let rows: Vec<&BenchTrial> = trials.iter().filter(|t| t.d == d).collect();
            let mut walls: Vec<f64> = rows.iter().map(|t| t.wall_secs).collect();
            walls.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let n = rows.len();
            BenchDimSummary {
                d,
                trials: n,
                mean_beta_hat: rows.iter().map(|t| t.beta_hat).sum::<f64>() / n as f64,
                frac_beta_le_9: rows.iter().filter(|t| t.beta_hat <= 9.0).count() as f64
                    / n as f64,
                median_wall_secs: walls[n / 2],
            }
        })
        .collect()
}

/// Ordinary least-squares slope of y against x, with the standard error of
/// the slope. Used to check that beta_hat shows no positive trend in log d.
pub fn slope_with_stderr(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let e = yi - (intercept + slope * xi);
            e * e
        })
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (slope, se)
}

pub fn bench_csv(trials: &[BenchTrial]) -> String {
    let mut out =
        String::from("d,trial,bias,beta_hat,removed,caught_outliers,planted_outliers,wall_secs\n");
    for t in trials {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t.d, t.trial, t.bias, t.beta_hat, t.removed, t.caught_outliers, t.planted_outliers,
            t.wall_secs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_catches_outliers_and_bounds_bias() {
        let cfg = BenchConfig {
            dims: vec![20],
            trials: 8,
            epsilon: 0.1,
            clients: 30,
            outlier_distance: 100.0,
            seed: 3,
        };
        let trials = run_bench(&cfg).unwrap();
        assert_eq!(trials.len(), 8);
        for t in &trials {
            assert_eq!(t.planted_outliers, 3);
            assert_eq!(t.caught_outliers, 3, "outliers not filtered: {t:?}");
            assert!(t.beta_hat <= 9.0, "beta_hat={}", t.beta_hat);
        }
    }

    #[test]
    fn slope_fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.1, 5.9, 8.0];
        let (slope, se) = slope_with_stderr(&x, &y);
        assert!((slope - 2.0).abs() < 0.1, "slope={slope}");
        assert!(se < 0.2);
    }
}
