//! Federated fine-tuning orchestration: per-round parallel local training,
//! server aggregation (averaging or robust filtering), a persistent Adam
//! server step, early stopping on a clean held-out validation split, and
//! final radioactivity detection.
//!
//! The aggregation path receives update vectors only; client labels and
//! datasets stay on the evaluation side of the interface.

pub mod dataset;

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agg::{self, AggregatorKind, RemovalRecord};
use crate::config::{ExperimentConfig, StopMode};
use crate::error::{Error, Result};
use crate::lm::{cross_entropy, local_train, ModelParams, TokenSeq, UpdateVector};
use crate::metrics::{empty_filter_layers, evasion_rate, overfiltering_rate, LayerFilterRecord};
use crate::optim::{Adam, AdamParams};
use crate::rng::derive_seed;
use crate::watermark::{
    kgw::kgw_radioactivity_detect, kth::kth_radioactivity_detect, DetectionResult, WatermarkSpec,
};

pub use dataset::{ClientProfile, Doc, PreparedData};

/// Early-stopping state: training stops after `patience` consecutive rounds
/// of worsening validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub mode: StopMode,
    pub losses: Vec<(usize, f64)>,
    pub streak: usize,
    pub best_round: usize,
    pub best_loss: f64,
    pub stopped_at: Option<usize>,
}

impl EarlyStopper {
    pub fn new(patience: usize, mode: StopMode) -> EarlyStopper {
        EarlyStopper {
            patience,
            mode,
            losses: Vec::new(),
            streak: 0,
            best_round: 0,
            best_loss: f64::INFINITY,
            stopped_at: None,
        }
    }

    /// Record a round's validation loss; returns true when training should
    /// stop after this round.
    pub fn observe(&mut self, round: usize, loss: f64) -> bool {
        let reference = match self.mode {
            StopMode::Previous => self.losses.last().map(|(_, l)| *l),
            StopMode::Best => (self.best_loss < f64::INFINITY).then_some(self.best_loss),
        };
        let worsened = reference.is_some_and(|r| loss > r);
        self.streak = if worsened { self.streak + 1 } else { 0 };
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_round = round;
        }
        self.losses.push((round, loss));
        if self.streak >= self.patience && self.stopped_at.is_none() {
            self.stopped_at = Some(round);
        }
        self.stopped_at.is_some()
    }
}

/// Per-round evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub val_loss: f64,
    /// None when the run has no watermarking clients.
    pub er: Option<f64>,
    pub ofr: Option<f64>,
    pub empty_filter_layers: usize,
    /// l2 distance between the aggregate and the clean-update mean.
    pub bias: Option<f64>,
    /// bias / sqrt(spectral norm of the clean update covariance); None when
    /// undefined, with `beta_hat_infinite` marking a zero-variance clean set.
    pub beta_hat: Option<f64>,
    #[serde(default)]
    pub beta_hat_infinite: bool,
    pub watermark_clients: Vec<usize>,
    pub filtered_per_layer: Vec<Vec<usize>>,
    pub iterations_per_layer: Vec<usize>,
    pub lambda_per_layer: Vec<f64>,
}

/// Everything a round produced beyond its report.
pub struct RoundOutput {
    pub report: RoundReport,
    /// Client updates of this round (kept only on request).
    pub updates: Option<Vec<UpdateVector>>,
    pub agg_trace: Vec<RemovalRecord>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub aggregated: DetectionResult,
    pub per_client: Vec<(usize, DetectionResult)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopInfo {
    pub stopped_round: usize,
    pub best_round: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub scheme: String,
    pub config_hash: String,
    pub seed: u64,
    pub stop: StopInfo,
    pub rounds: Vec<RoundReport>,
    /// Headline metrics read from the first fine-tuning round.
    pub headline_er: Option<f64>,
    pub headline_ofr: Option<f64>,
    pub detection_before: Option<DetectionSet>,
    pub detection_after: Option<DetectionSet>,
    /// (set name, cross-entropy in nats)
    pub utility: Vec<(String, f64)>,
}

/// Serializable mid-run state for resumable runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub round: usize,
    pub global: ModelParams,
    pub adam: Adam,
    pub stopper: EarlyStopper,
    pub best_params: Option<ModelParams>,
    pub rounds: Vec<RoundReport>,
}

/// Run one communication round: broadcast, parallel local training,
/// aggregation, Adam server step. Labels are used only to fill the
/// evaluation fields of the report.
pub fn run_round(
    global: &mut ModelParams,
    adam: &mut Adam,
    clients: &[ClientProfile],
    cfg: &ExperimentConfig,
    round: usize,
    val: &[TokenSeq],
    keep_updates: bool,
) -> Result<RoundOutput> {
    let start = Instant::now();
    let fl = &cfg.fl;

    // Local training on a private copy per client, in parallel.
    let updates: Result<Vec<UpdateVector>> = clients
        .par_iter()
        .map(|c| {
            let docs: Vec<TokenSeq> = c.docs.iter().map(Doc::to_seq).collect();
            local_train(
                &*global,
                &docs,
                fl.effective_steps(c.docs.len()),
                fl.client_lr,
                fl.batch_docs,
            )
            .map_err(|e| Error::Numerical(format!("client {} round {round}: {e}", c.id)))
        })
        .collect();
    let updates = updates?;

    // Aggregate. The aggregation functions see vectors only.
    let n_layers = global.layers.len();
    let (agg_mean, filtered_per_layer, iterations_per_layer, lambda_per_layer, agg_trace) =
        match cfg.aggregator.kind {
            AggregatorKind::Average => (
                agg::average(&updates)?,
                vec![Vec::new(); n_layers],
                vec![0; n_layers],
                vec![0.0; n_layers],
                Vec::new(),
            ),
            AggregatorKind::RobustFilter => {
                let out = agg::robust_filter(
                    &updates,
                    &cfg.aggregator,
                    None,
                    derive_seed(cfg.seed, "filter", &[round as u64]),
                )?;
                (
                    out.mean,
                    out.filtered_per_layer,
                    out.iterations_per_layer,
                    out.lambda_per_layer,
                    out.trace,
                )
            }
        };

    // Evaluation-side bookkeeping (labels allowed from here on).
    let watermark_clients: Vec<usize> =
        clients.iter().filter(|c| c.is_watermarking).map(|c| c.id).collect();
    let records: Vec<LayerFilterRecord> = filtered_per_layer
        .iter()
        .enumerate()
        .map(|(layer, filtered)| LayerFilterRecord {
            layer,
            watermarking: watermark_clients.iter().copied().collect::<BTreeSet<_>>(),
            filtered: filtered.iter().copied().collect(),
        })
        .collect();
    let (er, ofr) = if watermark_clients.is_empty() {
        (None, None)
    } else {
        (Some(evasion_rate(&records)?), Some(overfiltering_rate(&records)?))
    };

    let clean_idx: Vec<usize> = clients
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_watermarking)
        .map(|(i, _)| i)
        .collect();
    let (bias_val, beta_hat, beta_inf) = if clean_idx.len() >= 2 {
        let flat_updates: Vec<Vec<f64>> = updates.iter().map(UpdateVector::flatten).collect();
        let rows: Vec<&[f64]> = flat_updates.iter().map(|u| u.as_slice()).collect();
        let clean_mean = {
            let d = rows[0].len();
            let mut mu = vec![0.0; d];
            for &i in &clean_idx {
                for (m, x) in mu.iter_mut().zip(rows[i]) {
                    *m += x;
                }
            }
            mu.iter_mut().for_each(|m| *m /= clean_idx.len() as f64);
            mu
        };
        let clean_lambda = agg::dominant_eigen(
            &rows,
            &clean_idx,
            cfg.aggregator.eigen_iters,
            1e-9,
            derive_seed(cfg.seed, "eval-clean-eigen", &[round as u64]),
        )?
        .lambda;
        let (b, bh) = agg::bias(&agg_mean.flatten(), &clean_mean, clean_lambda);
        if bh.is_infinite() {
            (Some(b), None, true)
        } else {
            (Some(b), Some(bh), false)
        }
    } else {
        (None, None, false)
    };

    // Server step: Adam on the negated aggregate, moments persisting across
    // rounds.
    let neg: UpdateVector = UpdateVector {
        layers: agg_mean.layers.iter().map(|l| l.iter().map(|x| -x).collect()).collect(),
    };
    adam.apply(global, &neg, fl.server_lr);
    if !global.is_finite() {
        return Err(Error::Numerical(format!("non-finite parameters after round {round}")));
    }

    let val_loss = cross_entropy(global, val)?;

    let report = RoundReport {
        round,
        val_loss,
        er,
        ofr,
        empty_filter_layers: empty_filter_layers(&records),
        bias: bias_val,
        beta_hat,
        beta_hat_infinite: beta_inf,
        watermark_clients,
        filtered_per_layer,
        iterations_per_layer,
        lambda_per_layer,
    };
    Ok(RoundOutput {
        report,
        updates: keep_updates.then_some(updates),
        agg_trace,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Run the scheme's radioactivity detector for every watermarking client and
/// for the union of their datasets (fresh repetition filter per invocation).
pub fn detect_all(
    model: &ModelParams,
    clients: &[ClientProfile],
    spec: &WatermarkSpec,
    alpha: f64,
) -> Result<DetectionSet> {
    let wm_clients: Vec<&ClientProfile> =
        clients.iter().filter(|c| c.is_watermarking).collect();
    if wm_clients.is_empty() {
        return Err(Error::Watermark("detection needs at least one watermarking client".into()));
    }
    let detect = |docs: &[&Doc]| -> Result<DetectionResult> {
        match spec {
            WatermarkSpec::Kgw(s) => {
                let slices: Vec<&[u32]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
                kgw_radioactivity_detect(model, &slices, s, alpha)
            }
            WatermarkSpec::Kth(s) => {
                let pairs: Vec<(&[u32], usize)> =
                    docs.iter().map(|d| (d.tokens.as_slice(), d.prompt_len)).collect();
                kth_radioactivity_detect(model, &pairs, s, alpha)
            }
        }
    };
    let mut per_client = Vec::with_capacity(wm_clients.len());
    for c in &wm_clients {
        let docs: Vec<&Doc> = c.docs.iter().collect();
        per_client.push((c.id, detect(&docs)?));
    }
    let union: Vec<&Doc> = wm_clients.iter().flat_map(|c| c.docs.iter()).collect();
    let aggregated = detect(&union)?;
    Ok(DetectionSet { aggregated, per_client })
}

/// Hooks let the CLI persist state and update dumps without the orchestration
/// loop knowing about files.
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Called after every round with the round output and the state needed
    /// to resume after it.
    #[allow(clippy::type_complexity)]
    pub on_round: Option<Box<dyn FnMut(&RoundOutput, &RunState) -> Result<()> + 'a>>,
    /// Keep raw client updates in each `RoundOutput`.
    pub keep_updates: bool,
}

/// Run a full experiment from an initial global model. `resume_from`
/// restarts after a previously persisted round.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    global_init: &ModelParams,
    spec: &WatermarkSpec,
    hooks: &mut RunHooks,
    resume_from: Option<RunState>,
) -> Result<ExperimentReport> {
    let fl = &cfg.fl;
    for c in &data.clients {
        if c.docs.is_empty() {
            return Err(Error::Config(format!("client {} has no documents", c.id)));
        }
    }
    let has_watermark = data.clients.iter().any(|c| c.is_watermarking);

    let config_hash = cfg.hash();
    let (mut global, mut adam, mut stopper, mut best_params, mut rounds, start_round) =
        match resume_from {
            Some(state) => {
                if state.config_hash != config_hash {
                    return Err(Error::Config(
                        "saved state belongs to a different config; refusing to resume".into(),
                    ));
                }
                (
                    state.global,
                    state.adam,
                    state.stopper,
                    state.best_params,
                    state.rounds,
                    state.round + 1,
                )
            }
            None => {
                let mut stopper = EarlyStopper::new(fl.patience, fl.stop_mode);
                let initial_loss = cross_entropy(global_init, &data.val)?;
                stopper.observe(0, initial_loss);
                (
                    global_init.clone(),
                    Adam::new(global_init, AdamParams::default()),
                    stopper,
                    fl.rollback_best.then(|| global_init.clone()),
                    Vec::new(),
                    1,
                )
            }
        };

    let detection_before = if has_watermark {
        Some(detect_all(global_init, &data.clients, spec, fl.alpha)?)
    } else {
        None
    };

    let mut reason = "max_rounds".to_string();
    for round in start_round..=fl.max_rounds {
        let out = run_round(
            &mut global,
            &mut adam,
            &data.clients,
            cfg,
            round,
            &data.val,
            hooks.keep_updates,
        )?;
        let stop = stopper.observe(round, out.report.val_loss);
        if fl.rollback_best && stopper.best_round == round {
            best_params = Some(global.clone());
        }
        rounds.push(out.report.clone());
        if let Some(cb) = hooks.on_round.as_mut() {
            let state = RunState {
                config_hash: config_hash.clone(),
                round,
                global: global.clone(),
                adam: adam.clone(),
                stopper: stopper.clone(),
                best_params: best_params.clone(),
                rounds: rounds.clone(),
            };
            cb(&out, &state)?;
        }
        if stop {
            reason = "patience".to_string();
            break;
        }
    }

    let final_model = if fl.rollback_best {
        best_params.as_ref().unwrap_or(&global)
    } else {
        &global
    };

    let detection_after = if has_watermark {
        Some(detect_all(final_model, &data.clients, spec, fl.alpha)?)
    } else {
        None
    };

    let train_docs: Vec<TokenSeq> = data
        .clients
        .iter()
        .flat_map(|c| c.docs.iter().map(Doc::to_seq))
        .collect();
    let mut utility = vec![
        ("val".to_string(), cross_entropy(final_model, &data.val)?),
        ("test".to_string(), cross_entropy(final_model, &data.test)?),
    ];
    if !train_docs.is_empty() {
        utility.push(("train".to_string(), cross_entropy(final_model, &train_docs)?));
    }

    let stopped_round = rounds.last().map(|r| r.round).unwrap_or(0);
    Ok(ExperimentReport {
        format_version: 1,
        scheme: spec.scheme_name().to_string(),
        config_hash,
        seed: cfg.seed,
        stop: StopInfo { stopped_round, best_round: stopper.best_round, reason },
        headline_er: rounds.first().and_then(|r| r.er),
        headline_ofr: rounds.first().and_then(|r| r.ofr),
        rounds,
        detection_before,
        detection_after,
        utility,
    })
}
