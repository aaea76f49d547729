//! Command implementations shared by the binary and the test suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use graft::data::{generate_synthetic, load_directory, save_directory, DatasetSplit};
use graft::error::{Error, Result};
use graft::eval::{evaluate, MetricReport};
use graft::prune::{iterative_prune_finetune, pareto_csv, PruneOutcome};
use graft::train::{
    run_stage, run_warmstart, JsonlSink, NullSink, RunStageOpts, StepSink, TrainContext,
};

use crate::config::{DataKind, RunConfig};
use crate::ledger::{Ledger, LedgerRecord};

/// Output root: `GRAFT_OUT_DIR` or `./runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os("GRAFT_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Default run directory under the root, derived from the command name and
/// the config hash.
pub fn default_out_dir(command: &str, hash: &str) -> PathBuf {
    out_root().join(format!("{command}-{}", &hash[..12.min(hash.len())]))
}

pub fn load_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    match cfg.data.kind {
        DataKind::Synthetic => generate_synthetic(&cfg.data.synthetic),
        DataKind::Directory => {
            let dir = cfg
                .data
                .directory
                .as_ref()
                .ok_or_else(|| Error::config("data.directory not set"))?;
            load_directory(dir)
        }
    }
}

/// Sampler/scheme/augment options for `run_stage`, from the config.
pub fn stage_opts(cfg: &RunConfig) -> Result<RunStageOpts> {
    Ok(RunStageOpts {
        batch_triplets: cfg.train.batch_triplets,
        positives_per_anchor: cfg.train.positives_per_anchor,
        scheme: cfg.loss.triplet_scheme()?,
        center_metric: cfg.loss.center_metric,
        augment: cfg.train.augment,
        steps_per_epoch: cfg.train.steps_per_epoch,
        out_dir: None,
        resume_from: None,
    })
}

fn evaluate_cfg(cfg: &RunConfig, ctx: &TrainContext, split: &DatasetSplit) -> Result<MetricReport> {
    evaluate(
        &ctx.model,
        &split.query,
        &split.gallery,
        cfg.eval.metric,
        cfg.eval.exclude_same_view,
        cfg.eval.batch_size,
    )
}

/// Full in-memory pipeline: warmstart, stage one, stage two, final
/// retrieval metrics. The workhorse behind `train` and every ablation cell.
pub fn run_experiment(cfg: &RunConfig, sink: &mut dyn StepSink) -> Result<MetricReport> {
    let split = load_data(cfg)?;
    run_experiment_on(cfg, &split, sink)
}

/// As [`run_experiment`] but over an already materialized dataset (the
/// modality-scaling suite trains subsets of one generated dataset).
pub fn run_experiment_on(
    cfg: &RunConfig,
    split: &DatasetSplit,
    sink: &mut dyn StepSink,
) -> Result<MetricReport> {
    let mut ctx = TrainContext::new(&cfg.model, split, cfg.seed)?;
    run_warmstart(&mut ctx, split, &cfg.warmstart, cfg.seed, sink)?;
    let opts = stage_opts(cfg)?;
    run_stage(&mut ctx, split, &cfg.stage_one_config(), &opts, sink)?;
    run_stage(&mut ctx, split, &cfg.stage_two_config(), &opts, sink)?;
    evaluate_cfg(cfg, &ctx, split)
}

fn write_meta(dir: &Path, hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::json!({ "config_hash": hash });
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

/// Warns or refuses when a checkpoint's recorded config hash does not match
/// the active config.
fn check_meta(ckpt: &Path, hash: &str, force: bool) -> Result<()> {
    let Some(dir) = ckpt.parent() else {
        return Ok(());
    };
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(&meta_path)?;
    let meta: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("meta decode: {e}")))?;
    let recorded = meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
    if recorded != hash {
        if force {
            eprintln!(
                "warning: checkpoint {} was written under config {recorded}, current is {hash}; \
                 proceeding because of --force",
                ckpt.display()
            );
            return Ok(());
        }
        return Err(Error::config(format!(
            "checkpoint {} was written under config hash {recorded}, current config hashes to \
             {hash}; pass --force to proceed anyway",
            ckpt.display()
        )));
    }
    Ok(())
}

fn metrics_json(report: &MetricReport) -> serde_json::Value {
    serde_json::json!({
        "map": report.map,
        "r1": report.rank(1),
        "r5": report.rank(5),
        "r10": report.rank(10),
        "excluded_queries": report.excluded_queries,
        "scored_queries": report.scored_queries,
    })
}

fn write_metrics(out_dir: &Path, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics_json(report)).unwrap(),
    )?;
    Ok(())
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path, force: bool, ledger: &Ledger) -> Result<()> {
    if cfg.data.kind != DataKind::Synthetic {
        return Err(Error::config("gen-data needs data.kind = \"synthetic\""));
    }
    if out_dir.exists() && std::fs::read_dir(out_dir)?.next().is_some() && !force {
        return Err(Error::config(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out_dir.display()
        )));
    }
    let split = generate_synthetic(&cfg.data.synthetic)?;
    save_directory(out_dir, &split)?;
    cfg.write_resolved(out_dir)?;
    let hash = cfg.hash()?;
    let mut record = LedgerRecord::new("gen-data", &hash, cfg.seed, out_dir);
    record.extra.insert("train".into(), split.train.len().to_string());
    record.extra.insert("query".into(), split.query.len().to_string());
    record.extra.insert("gallery".into(), split.gallery.len().to_string());
    ledger.append(&record)?;
    println!(
        "wrote {} train / {} query / {} gallery tuples x {} modalities to {}",
        split.train.len(),
        split.query.len(),
        split.gallery.len(),
        split.modality_names.len(),
        out_dir.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Both,
}

pub struct TrainOutcome {
    pub metrics: MetricReport,
    pub out_dir: PathBuf,
}

pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    stage: StageSel,
    resume: Option<&Path>,
    from_scratch: bool,
    ledger: &Ledger,
) -> Result<TrainOutcome> {
    let hash = cfg.hash()?;
    cfg.write_resolved(out_dir)?;
    let split = load_data(cfg)?;
    let mut ctx = TrainContext::new(&cfg.model, &split, cfg.seed)?;
    let mut sink = JsonlSink::create(&out_dir.join("log.jsonl"))?;
    let base_opts = stage_opts(cfg)?;

    let stage1_dir = out_dir.join("stage1");
    let stage2_dir = out_dir.join("stage2");

    if matches!(stage, StageSel::One | StageSel::Both) {
        run_warmstart(&mut ctx, &split, &cfg.warmstart, cfg.seed, &mut sink)?;
        let mut opts = base_opts.clone();
        opts.out_dir = Some(stage1_dir.clone());
        if matches!(stage, StageSel::One) {
            opts.resume_from = resume.map(Path::to_path_buf);
        }
        run_stage(&mut ctx, &split, &cfg.stage_one_config(), &opts, &mut sink)?;
        write_meta(&stage1_dir, &hash)?;
    }

    if matches!(stage, StageSel::Two | StageSel::Both) {
        let mut opts = base_opts.clone();
        opts.out_dir = Some(stage2_dir.clone());
        if matches!(stage, StageSel::Two) {
            if let Some(r) = resume {
                opts.resume_from = Some(r.to_path_buf());
            } else {
                let stage1_ckpt = stage1_dir.join("model.ckpt");
                if stage1_ckpt.exists() {
                    ctx.load_checkpoint(&stage1_ckpt)?;
                } else if !from_scratch {
                    return Err(Error::config(format!(
                        "stage two requires the stage-one checkpoint at {}; run --stage 1 first \
                         or pass --from-scratch",
                        stage1_ckpt.display()
                    )));
                }
            }
        }
        run_stage(&mut ctx, &split, &cfg.stage_two_config(), &opts, &mut sink)?;
        write_meta(&stage2_dir, &hash)?;
    }

    let metrics = evaluate_cfg(cfg, &ctx, &split)?;
    write_metrics(out_dir, &metrics)?;
    ledger.append(&LedgerRecord::new("train", &hash, cfg.seed, out_dir).with_metrics(&metrics))?;
    println!(
        "final retrieval: mAP {:.4}  R1 {:.4}  R5 {:.4}  R10 {:.4}  ({} queries, {} excluded)",
        metrics.map,
        metrics.rank(1),
        metrics.rank(5),
        metrics.rank(10),
        metrics.scored_queries,
        metrics.excluded_queries
    );
    Ok(TrainOutcome {
        metrics,
        out_dir: out_dir.to_path_buf(),
    })
}

// ── eval ────────────────────────────────────────────────────────────

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    force: bool,
    ledger: &Ledger,
) -> Result<MetricReport> {
    let hash = cfg.hash()?;
    check_meta(checkpoint, &hash, force)?;
    let split = load_data(cfg)?;
    let ctx = TrainContext::new(&cfg.model, &split, cfg.seed)?;
    ctx.load_checkpoint(checkpoint)?;
    let metrics = evaluate_cfg(cfg, &ctx, &split)?;
    cfg.write_resolved(out_dir)?;
    write_metrics(out_dir, &metrics)?;
    ledger.append(&LedgerRecord::new("eval", &hash, cfg.seed, out_dir).with_metrics(&metrics))?;
    println!(
        "mAP {:.4}  R1 {:.4}  R5 {:.4}  R10 {:.4}  ({} queries, {} excluded)",
        metrics.map,
        metrics.rank(1),
        metrics.rank(5),
        metrics.rank(10),
        metrics.scored_queries,
        metrics.excluded_queries
    );
    Ok(metrics)
}

// ── prune ───────────────────────────────────────────────────────────

pub fn cmd_prune(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    force: bool,
    ledger: &Ledger,
) -> Result<PruneOutcome> {
    let hash = cfg.hash()?;
    check_meta(checkpoint, &hash, force)?;
    let split = load_data(cfg)?;
    let mut ctx = TrainContext::new(&cfg.model, &split, cfg.seed)?;
    ctx.load_checkpoint(checkpoint)?;
    cfg.write_resolved(out_dir)?;
    let mut sink = JsonlSink::create(&out_dir.join("log.jsonl"))?;
    let opts = stage_opts(cfg)?;
    let outcome = iterative_prune_finetune(
        &mut ctx,
        &split,
        &cfg.prune,
        &cfg.stage_two_config(),
        &opts,
        cfg.eval.metric,
        cfg.eval.batch_size,
        &mut sink,
    )?;
    std::fs::write(out_dir.join("pareto.csv"), pareto_csv(&outcome.reports))?;
    ctx.save_checkpoint(&out_dir.join("pruned_model.ckpt"))?;
    write_meta(out_dir, &hash)?;
    for report in &outcome.reports {
        let mut rec = LedgerRecord::new("prune", &hash, cfg.seed, out_dir).with_metrics(&report.metrics);
        rec.extra.insert("ladder_step".into(), report.ladder_step.to_string());
        rec.extra.insert("sparsity".into(), format!("{:.6}", report.sparsity));
        rec.extra
            .insert("nonzero_params".into(), report.nonzero_params.to_string());
        ledger.append(&rec)?;
    }
    if let Some(msg) = &outcome.aborted {
        eprintln!("warning: pruning ladder stopped early: {msg}");
    }
    println!("{}", pareto_csv(&outcome.reports).trim_end());
    Ok(outcome)
}

/// In-memory variant used by tests: trains a dense model first, then runs
/// the ladder, returning the Pareto rows.
pub fn prune_pipeline(cfg: &RunConfig) -> Result<PruneOutcome> {
    let split = load_data(cfg)?;
    let mut ctx = TrainContext::new(&cfg.model, &split, cfg.seed)?;
    let mut sink = NullSink;
    run_warmstart(&mut ctx, &split, &cfg.warmstart, cfg.seed, &mut sink)?;
    let opts = stage_opts(cfg)?;
    run_stage(&mut ctx, &split, &cfg.stage_one_config(), &opts, &mut sink)?;
    run_stage(&mut ctx, &split, &cfg.stage_two_config(), &opts, &mut sink)?;
    iterative_prune_finetune(
        &mut ctx,
        &split,
        &cfg.prune,
        &cfg.stage_two_config(),
        &opts,
        cfg.eval.metric,
        cfg.eval.batch_size,
        &mut sink,
    )
}

/// One row of a metric table, used by the ablation suites.
pub fn report_row(label: &str, metrics: &MetricReport) -> BTreeMap<String, String> {
    let mut row = BTreeMap::new();
    row.insert("label".into(), label.to_string());
    row.insert("map".into(), format!("{:.6}", metrics.map));
    row.insert("r1".into(), format!("{:.6}", metrics.rank(1)));
    row.insert("r5".into(), format!("{:.6}", metrics.rank(5)));
    row.insert("r10".into(), format!("{:.6}", metrics.rank(10)));
    row
}
