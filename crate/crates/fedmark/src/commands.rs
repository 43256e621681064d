//! Implementations of the CLI subcommands: pretrain, generate, run and
//! bench-agg. Each stage writes its outputs plus a manifest under the
//! config's output directory, so a full experiment is an auditable chain of
//! files.

use std::path::{Path, PathBuf};

use crate::agg::AggregatorKind;
use crate::bench;
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::{CleanData, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fedsim::dataset::{prepare_clients, read_datasets, split_corpus, write_datasets, PreparedData};
use crate::fedsim::{run_experiment, ExperimentReport, RunHooks, RunState};
use crate::lm::{build_model, pretrain, ArchConfig, ModelParams, PretrainOpts, Vocab};
use crate::optim::AdamParams;
use crate::report::{
    write_manifest, write_report_json, write_rounds_csv, write_timings_csv, Manifest,
    UpdateDumpWriter,
};
use crate::watermark::{KeyFile, WatermarkSpec};

pub struct RunFlags {
    pub dump_updates: bool,
    pub resume: bool,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn write_resolved_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(out.join("config.resolved.toml"), cfg.canonical_toml())?;
    Ok(())
}

fn stage_manifest(out: &Path, stage: &str, cfg: &ExperimentConfig) -> Result<()> {
    write_manifest(
        &out.join(format!("manifest.{stage}.json")),
        &Manifest::new(stage, cfg.hash(), cfg.seed, cfg.preset.clone()),
    )
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Train the generator and the initial global model on the pretraining pool
/// and write both checkpoints plus their training curves.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.resolved_output_dir();
    ensure_dir(&checkpoint_dir(&out))?;
    write_resolved_config(&out, cfg)?;

    let split = split_corpus(cfg)?;
    println!(
        "corpus: {} ({} distinct characters); pretraining on {} documents",
        cfg.corpus.path.display(),
        split.vocab.size(),
        split.pretrain.len()
    );

    for (role, mc) in
        [("generator", &cfg.generator_model), ("global_init", &cfg.global_model)]
    {
        let arch = ArchConfig {
            vocab_size: split.vocab.size(),
            context: mc.context,
            hidden: mc.hidden,
            hidden_layers: mc.hidden_layers,
        };
        let model = build_model(&arch, mc.seed)?;
        let opts = PretrainOpts {
            epochs: mc.pretrain_epochs,
            lr: mc.pretrain_lr,
            batch_docs: mc.pretrain_batch_docs,
            adam: AdamParams::default(),
        };
        let (trained, curve) = pretrain(model, &split.pretrain, mc.seed, &opts)?;
        let ckpt = checkpoint_dir(&out).join(format!("{role}.ckpt"));
        write_checkpoint(&ckpt, &trained, &split.vocab, mc.seed, role)?;
        let mut csv = String::from("epoch,train_loss\n");
        for (e, loss) in curve.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", e + 1, loss));
        }
        std::fs::write(checkpoint_dir(&out).join(format!("{role}_curve.csv")), csv)?;
        println!(
            "{role}: d={} params, {} epochs, loss {:.4} -> {:.4}, wrote {}",
            arch.param_count(),
            curve.len(),
            curve.first().copied().unwrap_or(f64::NAN),
            curve.last().copied().unwrap_or(f64::NAN),
            ckpt.display()
        );
    }
    stage_manifest(&out, "pretrain", cfg)
}

fn load_model(out: &Path, role: &str) -> Result<(ModelParams, Vocab)> {
    let path = checkpoint_dir(out).join(format!("{role}.ckpt"));
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} not found; run the pretrain stage first",
            path.display()
        )));
    }
    let (model, vocab, _) = read_checkpoint(&path)?;
    Ok((model, vocab))
}

/// One experiment cell. Sweeps expand into several cells; a plain config is
/// a single unnamed cell.
pub struct Cell {
    pub name: Option<String>,
    pub cfg: ExperimentConfig,
}

pub fn expand_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let Some(sweep) = &cfg.sweep else {
        return vec![Cell { name: None, cfg: cfg.clone() }];
    };
    let ws = sweep
        .watermark_clients
        .clone()
        .unwrap_or_else(|| vec![cfg.fl.watermark_clients]);
    let aggs = sweep.aggregators.clone().unwrap_or_else(|| vec![cfg.aggregator.kind]);
    let cleans = sweep.clean_data.clone().unwrap_or_else(|| vec![cfg.data.clean_data]);
    let mut cells = Vec::new();
    for &w in &ws {
        for &a in &aggs {
            for &c in &cleans {
                let mut cell_cfg = cfg.clone();
                cell_cfg.sweep = None;
                cell_cfg.fl.watermark_clients = w;
                cell_cfg.aggregator.kind = a;
                cell_cfg.data.clean_data = c;
                let mut parts = Vec::new();
                if sweep.watermark_clients.is_some() {
                    parts.push(format!("w{w}"));
                }
                if sweep.aggregators.is_some() {
                    parts.push(
                        match a {
                            AggregatorKind::Average => "average",
                            AggregatorKind::RobustFilter => "robust",
                        }
                        .to_string(),
                    );
                }
                if sweep.clean_data.is_some() {
                    parts.push(
                        match c {
                            CleanData::Natural => "natural",
                            CleanData::Synthetic => "synthetic",
                        }
                        .to_string(),
                    );
                }
                cells.push(Cell { name: Some(parts.join("_")), cfg: cell_cfg });
            }
        }
    }
    cells
}

fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    match &cell.name {
        Some(name) => out.join("cells").join(name),
        None => out.to_path_buf(),
    }
}

/// Materialize client datasets (and the key file) for every cell.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.resolved_output_dir();
    ensure_dir(&out)?;
    write_resolved_config(&out, cfg)?;
    let (generator, vocab) = load_model(&out, "generator")?;
    let spec = cfg.watermark_spec()?;
    match &spec {
        WatermarkSpec::Kgw(s) => {
            if s.green_count(vocab.size()) == 0 {
                return Err(Error::Config(format!(
                    "gamma {} leaves an empty green list at vocab {}",
                    s.gamma,
                    vocab.size()
                )));
            }
        }
        WatermarkSpec::Kth(_) => {}
    }

    for cell in expand_cells(cfg) {
        let dir = cell_dir(&out, &cell);
        let data_dir = dir.join("datasets");
        ensure_dir(&data_dir)?;
        let split = split_corpus(&cell.cfg)?;
        let (clients, skipped) = prepare_clients(&split, &cell.cfg, &spec, &generator)?;
        let data = PreparedData { clients, val: split.val, test: split.test };
        write_datasets(&data_dir, &data)?;
        let key_file = KeyFile::from_spec(&spec);
        std::fs::write(
            data_dir.join("key.toml"),
            toml::to_string_pretty(&key_file).expect("key file serializes"),
        )?;
        let label = cell.name.as_deref().unwrap_or("base");
        let wm_docs: usize = data
            .clients
            .iter()
            .filter(|c| c.is_watermarking)
            .map(|c| c.docs.len())
            .sum();
        println!(
            "cell {label}: {} clients ({} watermarking, {wm_docs} watermarked documents), \
             {} skipped short documents -> {}",
            data.clients.len(),
            cell.cfg.fl.watermark_clients,
            skipped,
            data_dir.display()
        );
    }
    stage_manifest(&out, "generate", cfg)
}

fn state_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round:04}.json"))
}

fn load_resume_state(state_dir: &Path, config_hash: &str) -> Result<Option<RunState>> {
    if !state_dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(state_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(num) = name.strip_prefix("round_").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(round) = num.parse::<usize>() {
                if best.as_ref().is_none_or(|(r, _)| round > *r) {
                    best = Some((round, path));
                }
            }
        }
    }
    let Some((_, path)) = best else { return Ok(None) };
    let bytes = std::fs::read(&path)?;
    let state: RunState = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format { path, reason: e.to_string() })?;
    if state.config_hash != config_hash {
        return Err(Error::Config(
            "saved state was produced by a different config; remove the state directory \
             or rerun without --resume"
                .into(),
        ));
    }
    Ok(Some(state))
}

/// Run one cell end to end; returns its report.
fn run_cell(cell: &Cell, out: &Path, flags: &RunFlags) -> Result<ExperimentReport> {
    let dir = cell_dir(out, cell);
    let run_dir = dir.join("run");
    let state_dir = run_dir.join("state");
    ensure_dir(&state_dir)?;

    let (global_init, _vocab) = load_model(out, "global_init")?;
    let data = read_datasets(&dir.join("datasets"), cell.cfg.fl.clients)?;
    let spec = cell.cfg.watermark_spec()?;
    let config_hash = cell.cfg.hash();

    let resume_state =
        if flags.resume { load_resume_state(&state_dir, &config_hash)? } else { None };
    if let Some(s) = &resume_state {
        println!("resuming after round {}", s.round);
    }

    let mut dump = if flags.dump_updates {
        let specs = global_init.arch.layer_specs();
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let dims: Vec<usize> = specs.iter().map(|s| s.dim).collect();
        Some(UpdateDumpWriter::create(
            &run_dir.join("updates.bin"),
            cell.cfg.fl.clients,
            &names,
            &dims,
        )?)
    } else {
        None
    };
    let mut timings: Vec<(usize, f64)> = Vec::new();
    let mut hooks = RunHooks {
        keep_updates: flags.dump_updates,
        on_round: Some(Box::new(|out_round, state| {
            timings.push((out_round.report.round, out_round.wall_secs));
            if let (Some(w), Some(updates)) = (dump.as_mut(), out_round.updates.as_ref()) {
                w.write_round(out_round.report.round, updates, &out_round.agg_trace)?;
            }
            let bytes = serde_json::to_vec(state).expect("state serializes");
            std::fs::write(state_path(&state_dir, state.round), bytes)?;
            let r = &out_round.report;
            println!(
                "round {:>3}: val_loss {:.4}{}{}",
                r.round,
                r.val_loss,
                r.er.map(|e| format!("  er {e:.3}")).unwrap_or_default(),
                r.ofr.map(|o| format!("  ofr {o:.3}")).unwrap_or_default(),
            );
            Ok(())
        })),
    };

    let report = run_experiment(&cell.cfg, &data, &global_init, &spec, &mut hooks, resume_state)?;
    drop(hooks);
    if let Some(w) = dump {
        w.finish()?;
    }

    write_report_json(&run_dir.join("report.json"), &report)?;
    write_rounds_csv(&run_dir.join("rounds.csv"), &report.rounds)?;
    write_timings_csv(&run_dir.join("timings.csv"), &timings)?;

    if let Some(d) = &report.detection_after {
        println!(
            "detection: before p={}  after p={}  (alpha {})",
            report
                .detection_before
                .as_ref()
                .map(|b| b.aggregated.p_value.to_string())
                .unwrap_or_else(|| "-".into()),
            d.aggregated.p_value,
            d.aggregated.alpha
        );
    }
    Ok(report)
}

fn sweep_csv(cells: &[(Cell, ExperimentReport)]) -> String {
    let mut out = String::from(
        "cell,clients,watermark_clients,epsilon,aggregator,clean_data,\
         p_before,p_after,headline_er,headline_ofr,stopped_round,val_loss\n",
    );
    for (cell, report) in cells {
        let cfg = &cell.cfg;
        let p_before = report
            .detection_before
            .as_ref()
            .map(|d| d.aggregated.p_value.to_string())
            .unwrap_or_default();
        let p_after = report
            .detection_after
            .as_ref()
            .map(|d| d.aggregated.p_value.to_string())
            .unwrap_or_default();
        let val = report
            .utility
            .iter()
            .find(|(n, _)| n == "val")
            .map(|(_, l)| l.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            cell.name.as_deref().unwrap_or("base"),
            cfg.fl.clients,
            cfg.fl.watermark_clients,
            cfg.fl.epsilon(),
            match cfg.aggregator.kind {
                AggregatorKind::Average => "average",
                AggregatorKind::RobustFilter => "robust_filter",
            },
            match cfg.data.clean_data {
                CleanData::Natural => "natural",
                CleanData::Synthetic => "synthetic",
            },
            p_before,
            p_after,
            report.headline_er.map(|e| e.to_string()).unwrap_or_default(),
            report.headline_ofr.map(|o| o.to_string()).unwrap_or_default(),
            report.stop.stopped_round,
            val
        ));
    }
    out
}

/// Execute every cell of the config and write reports (plus `sweep.csv` when
/// the config defines a sweep).
pub fn cmd_run(cfg: &ExperimentConfig, flags: &RunFlags) -> Result<()> {
    let out = cfg.resolved_output_dir();
    ensure_dir(&out)?;
    write_resolved_config(&out, cfg)?;
    let cells = expand_cells(cfg);
    let is_sweep = cfg.sweep.is_some();
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        if let Some(name) = &cell.name {
            println!("=== cell {name} ===");
        }
        let report = run_cell(&cell, &out, flags)?;
        results.push((cell, report));
    }
    if is_sweep {
        std::fs::write(out.join("sweep.csv"), sweep_csv(&results))?;
        println!("sweep summary -> {}", out.join("sweep.csv").display());
    }
    stage_manifest(&out, "run", cfg)
}

/// Synthetic corrupted-Gaussian benchmark of the robust aggregator.
pub fn cmd_bench_agg(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.resolved_output_dir();
    ensure_dir(&out)?;
    let bench_cfg = cfg.bench.clone().unwrap_or_default();
    let trials = bench::run_bench(&bench_cfg)?;
    std::fs::write(out.join("bench.csv"), bench::bench_csv(&trials))?;
    println!("d,trials,mean_beta_hat,frac_beta_le_9,median_wall_secs");
    for s in bench::summarize(&trials) {
        println!(
            "{},{},{:.4},{:.2},{:.6}",
            s.d, s.trials, s.mean_beta_hat, s.frac_beta_le_9, s.median_wall_secs
        );
    }
    stage_manifest(&out, "bench-agg", cfg)
}
