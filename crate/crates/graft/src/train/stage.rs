//! Stage execution: the training loop, freezing, warmstart, and
//! checkpoint/resume plumbing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentPolicy};
use crate::data::dataset::{DatasetSplit, MultimodalSample};
use crate::data::sampler::TripletSampler;
use crate::error::{Error, Result};
use crate::eval::batch_refs;
use crate::losses::{
    center_loss, cross_entropy_label_smoothing, select_triplet_embeddings, soft_margin_triplet,
    total_loss, CenterMetric, Centroids, LossTerms, TripletScheme,
};
use crate::model::{ForwardOpts, GraftConfig, GraftModel};
use crate::numerics::checkpoint::{self, CkptEntry};
use crate::numerics::optim::Moments;
use crate::numerics::rng::RngState;
use crate::numerics::{AdamW, AdamWConfig, Parameter, SeededRng};

use super::schedule::{lr_at_step, StageConfig};

/// Model plus the trainables that live outside it (centroids) and the
/// identity-to-class mapping used for classification and center loss.
pub struct TrainContext {
    pub model: GraftModel,
    pub centroids: Centroids,
    /// Train-split identity -> dense class label.
    pub labels: BTreeMap<u64, usize>,
}

impl TrainContext {
    pub fn new(cfg: &GraftConfig, split: &DatasetSplit, seed: u64) -> Result<Self> {
        let ids: std::collections::BTreeSet<u64> = split.train.iter().map(|s| s.id).collect();
        if ids.len() > cfg.n_classes {
            return Err(Error::config(format!(
                "model.n_classes {} too small for {} training identities",
                cfg.n_classes,
                ids.len()
            )));
        }
        let labels = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut rng = SeededRng::derive(seed, "init");
        let model = GraftModel::new(cfg, &mut rng)?;
        let centroids = Centroids::new(cfg.n_classes, cfg.embed_width(), &mut rng);
        Ok(TrainContext {
            model,
            centroids,
            labels,
        })
    }

    pub fn all_parameters(&self) -> Vec<Parameter> {
        let mut params = self.model.parameters();
        params.push(self.centroids.table.clone());
        params
    }

    pub fn checkpoint_entries(&self) -> Vec<CkptEntry> {
        let mut entries = self.model.checkpoint_entries();
        entries.push(CkptEntry::from_parameter(&self.centroids.table));
        entries
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries())
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        let (centroid_entries, model_entries): (Vec<_>, Vec<_>) = entries
            .into_iter()
            .partition(|e| e.name.starts_with("centroids."));
        self.model.load_checkpoint_entries(&model_entries)?;
        for e in centroid_entries {
            if e.name == "centroids.table" {
                e.apply_to(&self.centroids.table)?;
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor {:?}", e.name)));
            }
        }
        Ok(())
    }
}

/// Sets the frozen flag on every backbone and patch-embed parameter.
/// Modality encoders, fusion token, head and centroids are never touched.
/// Frozen parameters also stop tracking gradients, so the backward pass
/// skips the shared extractor entirely while it is frozen.
pub fn freeze_backbone(model: &GraftModel, frozen: bool) {
    for p in model.parameters() {
        if p.name().starts_with("backbone.") || p.name().starts_with("patch.") {
            p.set_frozen(frozen);
        }
    }
}

/// Names of the currently trainable (non-frozen) parameters.
pub fn trainable_names(model: &GraftModel) -> Vec<String> {
    model
        .parameters()
        .iter()
        .filter(|p| !p.frozen())
        .map(|p| p.name().to_string())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub l_triplet: f64,
    pub l_center: f64,
    pub l_ce: f64,
    pub l_total: f64,
}

pub trait StepSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;
}

/// Line-delimited JSON records.
pub struct JsonlSink {
    w: std::io::BufWriter<fs::File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlSink {
            w: std::io::BufWriter::new(file),
        })
    }
}

impl StepSink for JsonlSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::numeric(e.to_string()))?;
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }
}

#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<StepRecord>,
}

impl StepSink for MemorySink {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

pub struct NullSink;

impl StepSink for NullSink {
    fn record(&mut self, _rec: &StepRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BestSnapshot {
    pub metric: f64,
    pub checkpoint: PathBuf,
}

/// Serializable training position; together with the model and optimizer
/// checkpoints this resumes a run bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainState {
    pub stage: String,
    pub epochs_completed: usize,
    pub global_step: u64,
    pub rng: RngState,
    pub adamw_step: u64,
    pub best: Option<BestSnapshot>,
}

#[derive(Debug, Clone)]
pub struct RunStageOpts {
    pub batch_triplets: usize,
    pub positives_per_anchor: usize,
    pub scheme: TripletScheme,
    pub center_metric: CenterMetric,
    pub augment: AugmentPolicy,
    /// Defaults to ceil(train size / batch_triplets).
    pub steps_per_epoch: Option<usize>,
    /// Checkpoint bundle directory, written every epoch.
    pub out_dir: Option<PathBuf>,
    /// Resume from a bundle previously written by this stage.
    pub resume_from: Option<PathBuf>,
    /// Stop after this many completed epochs (the learning-rate schedule
    /// still spans the configured total). Emulates an interruption; the
    /// checkpoint bundle then resumes the remainder.
    pub stop_after_epochs: Option<usize>,
}

impl Default for RunStageOpts {
    fn default() -> Self {
        RunStageOpts {
            batch_triplets: 26,
            positives_per_anchor: 8,
            scheme: TripletScheme::default(),
            center_metric: CenterMetric::Euclidean,
            augment: AugmentPolicy::default(),
            steps_per_epoch: None,
            out_dir: None,
            resume_from: None,
            stop_after_epochs: None,
        }
    }
}

const MODEL_FILE: &str = "model.ckpt";
const OPTIM_FILE: &str = "optim.ckpt";
const STATE_FILE: &str = "state.json";

fn optimizer_entries(opt: &AdamW) -> Vec<CkptEntry> {
    let mut names: Vec<&String> = opt.moments.keys().collect();
    names.sort();
    let mut entries = Vec::with_capacity(names.len() * 2);
    for name in names {
        let m = &opt.moments[name];
        entries.push(CkptEntry::buffer(format!("m.{name}"), m.m.clone()));
        entries.push(CkptEntry::buffer(format!("v.{name}"), m.v.clone()));
    }
    entries
}

fn load_optimizer(path: &Path, opt: &mut AdamW) -> Result<()> {
    let entries = checkpoint::load(path)?;
    opt.moments.clear();
    let mut halves: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for e in entries {
        if let Some(name) = e.name.strip_prefix("m.") {
            halves.entry(name.to_string()).or_default().0 = Some(e.data);
        } else if let Some(name) = e.name.strip_prefix("v.") {
            halves.entry(name.to_string()).or_default().1 = Some(e.data);
        } else {
            return Err(Error::Checkpoint(format!(
                "optimizer checkpoint: unexpected entry {:?}",
                e.name
            )));
        }
    }
    for (name, (m, v)) in halves {
        match (m, v) {
            (Some(m), Some(v)) => {
                opt.moments.insert(name, Moments { m, v });
            }
            _ => {
                return Err(Error::Checkpoint(format!(
                    "optimizer checkpoint: incomplete moments for {name:?}"
                )))
            }
        }
    }
    Ok(())
}

pub fn save_bundle(dir: &Path, ctx: &TrainContext, opt: &AdamW, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    ctx.save_checkpoint(&dir.join(MODEL_FILE))?;
    checkpoint::save(&dir.join(OPTIM_FILE), &optimizer_entries(opt))?;
    let text = serde_json::to_string_pretty(state).map_err(|e| Error::numeric(e.to_string()))?;
    fs::write(dir.join(STATE_FILE), text)?;
    Ok(())
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(dir.join(STATE_FILE))
        .map_err(|e| Error::Checkpoint(format!("missing {}: {e}", dir.join(STATE_FILE).display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("state decode: {e}")))
}

/// Runs one training stage. Per step: sample a triplet batch, augment,
/// forward all anchors/positives/negatives at once, select the triplet
/// embeddings per the scheme, combine the stage losses, backprop and step
/// AdamW honoring freezes and masks. Checkpoints every epoch when an output
/// directory is set; aborts with the last good checkpoint on a non-finite
/// loss.
pub fn run_stage(
    ctx: &mut TrainContext,
    split: &DatasetSplit,
    cfg: &StageConfig,
    opts: &RunStageOpts,
    sink: &mut dyn StepSink,
) -> Result<TrainState> {
    cfg.validate()?;
    freeze_backbone(&ctx.model, cfg.backbone_frozen);
    let sampler = TripletSampler::new(&split.train, opts.batch_triplets, opts.positives_per_anchor)?;
    for id in &sampler.excluded_single_sample_ids {
        eprintln!("warning: identity {id} has a single sample and is excluded from the anchor role");
    }
    let spe = opts
        .steps_per_epoch
        .unwrap_or_else(|| split.train.len().div_ceil(opts.batch_triplets))
        .max(1);
    let total_steps = (cfg.epochs * spe) as u64;
    // Surface schedule misconfiguration before doing any work.
    lr_at_step(0, total_steps, cfg)?;

    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = SeededRng::derive(cfg.seed, &format!("stage-{}", cfg.stage.name()));
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    let mut best: Option<BestSnapshot> = None;
    let mut last_good: Option<PathBuf> = None;

    if let Some(dir) = &opts.resume_from {
        let state = load_state(dir)?;
        if state.stage != cfg.stage.name() {
            return Err(Error::config(format!(
                "resume: bundle is for stage {:?}, requested stage {:?}",
                state.stage,
                cfg.stage.name()
            )));
        }
        ctx.load_checkpoint(&dir.join(MODEL_FILE))?;
        load_optimizer(&dir.join(OPTIM_FILE), &mut optimizer)?;
        optimizer.step_count = state.adamw_step;
        rng = SeededRng::restore(state.rng);
        start_epoch = state.epochs_completed;
        global_step = state.global_step;
        best = state.best;
        last_good = Some(dir.join(MODEL_FILE));
        // A resumed bundle may carry freeze flags from its stage; re-apply.
        freeze_backbone(&ctx.model, cfg.backbone_frozen);
    }

    let params = ctx.all_parameters();
    let m_count = ctx.model.cfg.n_modalities;

    for epoch in start_epoch..cfg.epochs {
        for _ in 0..spe {
            let lr = lr_at_step(global_step, total_steps, cfg)?;
            let batch = sampler.next_batch(&split.train, &mut rng);
            let bt = batch.len();
            let mut tuples: Vec<MultimodalSample> = Vec::with_capacity(3 * bt);
            for group in [&batch.anchors, &batch.positives, &batch.negatives] {
                for &i in group.iter() {
                    tuples.push(augment(&split.train[i], &mut rng, &opts.augment));
                }
            }
            let labels: Vec<usize> = tuples.iter().map(|t| ctx.labels[&t.id]).collect();
            let refs: Vec<&MultimodalSample> = tuples.iter().collect();
            let mbatch = batch_refs(&refs, m_count);

            let w = cfg.loss_weights;
            let step_result = (|| -> Result<_> {
                let out = {
                    let mut fw = ForwardOpts {
                        train: true,
                        dropout_rng: Some(&mut rng),
                        ablate_fusion: false,
                    };
                    ctx.model.forward(&mbatch, &mut fw)?
                };
                let (fa, fp, fnn) =
                    select_triplet_embeddings(&opts.scheme, &out.embed, &out.data_tokens)?;
                let terms = LossTerms {
                    triplet: if w.alpha != 0.0 {
                        Some(soft_margin_triplet(&fa, &fp, &fnn)?)
                    } else {
                        None
                    },
                    center: if w.beta != 0.0 {
                        let anchors_embed = out.embed.split(0, &[bt, 2 * bt])?.swap_remove(0);
                        Some(center_loss(
                            &anchors_embed,
                            &labels[..bt],
                            &ctx.centroids,
                            opts.center_metric,
                        )?)
                    } else {
                        None
                    },
                    ce: if w.gamma != 0.0 {
                        Some(cross_entropy_label_smoothing(
                            &out.logits,
                            &labels,
                            cfg.label_smoothing,
                        )?)
                    } else {
                        None
                    },
                };
                total_loss(&terms, &w)
            })();
            let (total, breakdown) = match step_result {
                Ok(v) => v,
                // Non-finite values surface as numeric errors inside the ops;
                // treat them as divergence and point at the last checkpoint.
                Err(Error::Numeric(_)) => {
                    return Err(Error::Divergence {
                        step: global_step,
                        last_good,
                    })
                }
                Err(e) => return Err(e),
            };
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence {
                    step: global_step,
                    last_good,
                });
            }
            total.backward()?;
            optimizer.step(&params, lr);
            sink.record(&StepRecord {
                stage: cfg.stage.name().to_string(),
                epoch,
                step: global_step,
                lr,
                l_triplet: breakdown.triplet,
                l_center: breakdown.center,
                l_ce: breakdown.ce,
                l_total: breakdown.total,
            })?;
            global_step += 1;
        }
        if let Some(dir) = &opts.out_dir {
            let state = TrainState {
                stage: cfg.stage.name().to_string(),
                epochs_completed: epoch + 1,
                global_step,
                rng: rng.state(),
                adamw_step: optimizer.step_count,
                best: best.clone(),
            };
            save_bundle(dir, ctx, &optimizer, &state)?;
            last_good = Some(dir.join(MODEL_FILE));
        }
        if opts.stop_after_epochs == Some(epoch + 1) {
            break;
        }
    }

    Ok(TrainState {
        stage: cfg.stage.name().to_string(),
        epochs_completed: cfg.epochs,
        global_step,
        rng: rng.state(),
        adamw_step: optimizer.step_count,
        best,
    })
}

/// Warmstart configuration: a brief plain-classification phase that stands
/// in for backbone pretraining (no external weights ship with the crate).
/// The snapshot it leaves behind is what stage one freezes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmstartConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for WarmstartConfig {
    fn default() -> Self {
        WarmstartConfig {
            epochs: 3,
            base_lr: 3e-4,
            batch_size: 24,
            weight_decay: 0.01,
        }
    }
}

/// Trains the whole model (nothing frozen) with cross-entropy only, in
/// shuffled classification batches.
pub fn run_warmstart(
    ctx: &mut TrainContext,
    split: &DatasetSplit,
    cfg: &WarmstartConfig,
    seed: u64,
    sink: &mut dyn StepSink,
) -> Result<()> {
    if cfg.epochs == 0 {
        return Ok(());
    }
    if cfg.batch_size < 2 {
        return Err(Error::config("warmstart: batch_size must be >= 2 for batch norm"));
    }
    freeze_backbone(&ctx.model, false);
    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = SeededRng::derive(seed, "warmstart");
    let params = ctx.all_parameters();
    let m_count = ctx.model.cfg.n_modalities;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&MultimodalSample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|s| ctx.labels[&s.id]).collect();
            let mbatch = batch_refs(&refs, m_count);
            let out = {
                let mut fw = ForwardOpts {
                    train: true,
                    dropout_rng: Some(&mut rng),
                    ablate_fusion: false,
                };
                ctx.model.forward(&mbatch, &mut fw)?
            };
            let loss = cross_entropy_label_smoothing(&out.logits, &labels, 0.0)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    last_good: None,
                });
            }
            loss.backward()?;
            optimizer.step(&params, cfg.base_lr);
            sink.record(&StepRecord {
                stage: "warmstart".to_string(),
                epoch,
                step,
                lr: cfg.base_lr,
                l_triplet: 0.0,
                l_center: 0.0,
                l_ce: value,
                l_total: value,
            })?;
            step += 1;
        }
    }
    Ok(())
}
