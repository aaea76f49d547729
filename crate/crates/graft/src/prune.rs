//! Few-shot iterative magnitude pruning of the backbone weight matrices,
//! with fine-tuning between ladder steps and Pareto reporting.
//!
//! Pruning is layer-wise and unstructured: each in-scope tensor zeroes its
//! own smallest-magnitude entries. Masks only ever gain zeros across
//! iterations and are enforced through all subsequent optimizer steps.

use serde::{Deserialize, Serialize};

use crate::data::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DistanceMetric, MetricReport};
use crate::numerics::Parameter;
use crate::train::{run_stage, RunStageOpts, StageConfig, StepSink, TrainContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrunePlan {
    /// Final fraction of each in-scope tensor set to zero.
    pub target_sparsity: f64,
    pub n_iterations: usize,
    /// Fine-tuning epochs between ladder steps.
    pub finetune_epochs: usize,
    /// Name prefixes selecting the parameters to prune; only 2-D weight
    /// matrices under these prefixes are touched (attention Q/K/V/output
    /// projections and MLP weights — not norms or biases).
    pub scope: Vec<String>,
    /// Explicit per-step sparsities; when empty, a compounding ladder
    /// `1 - (1-target)^(k/n)` is used.
    pub ladder: Vec<f64>,
}

impl Default for PrunePlan {
    fn default() -> Self {
        PrunePlan {
            target_sparsity: 0.5,
            n_iterations: 3,
            finetune_epochs: 2,
            scope: vec!["backbone.".to_string()],
            ladder: Vec::new(),
        }
    }
}

impl PrunePlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::config("prune.target_sparsity must be in [0, 1)"));
        }
        if self.n_iterations == 0 {
            return Err(Error::config("prune.n_iterations must be >= 1"));
        }
        if self.scope.is_empty() {
            return Err(Error::config("prune.scope must name at least one prefix"));
        }
        let ladder = self.resolved_ladder();
        if ladder.windows(2).any(|w| w[1] <= w[0]) || ladder.last().copied().unwrap_or(0.0) > self.target_sparsity + 1e-12 {
            return Err(Error::config(format!(
                "prune.ladder must be strictly increasing up to the target; got {ladder:?}"
            )));
        }
        Ok(())
    }

    /// The sparsity each ladder step prunes to.
    pub fn resolved_ladder(&self) -> Vec<f64> {
        if !self.ladder.is_empty() {
            return self.ladder.clone();
        }
        let n = self.n_iterations as f64;
        (1..=self.n_iterations)
            .map(|k| 1.0 - (1.0 - self.target_sparsity).powf(k as f64 / n))
            .collect()
    }

    /// In-scope parameters of a model: matching prefix and 2-D shape.
    pub fn select<'a>(&self, params: &'a [Parameter]) -> Vec<&'a Parameter> {
        params
            .iter()
            .filter(|p| {
                p.shape().len() == 2 && self.scope.iter().any(|prefix| p.name().starts_with(prefix))
            })
            .collect()
    }
}

/// Computes and installs the mask that zeroes the `floor(sparsity * n)`
/// smallest-magnitude entries of the parameter. Already-masked positions
/// stay masked (monotone growth); remaining quota goes by ascending |w|
/// with ties broken toward lower indices. Returns the new mask.
pub fn magnitude_prune(param: &Parameter, sparsity: f64) -> Result<Vec<u8>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let n = param.numel();
    let quota = (sparsity * n as f64).floor() as usize;
    let prev_mask = param.mask().unwrap_or_else(|| vec![1u8; n]);
    let prev_zeros = prev_mask.iter().filter(|m| **m == 0).count();
    if quota < prev_zeros {
        return Err(Error::config(format!(
            "requested sparsity {sparsity} would unprune {} positions",
            prev_zeros - quota
        )));
    }
    let data = param.tensor().data_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let masked_a = prev_mask[a] == 0;
        let masked_b = prev_mask[b] == 0;
        masked_b
            .cmp(&masked_a) // already-masked first
            .then(data[a].abs().total_cmp(&data[b].abs()))
            .then(a.cmp(&b))
    });
    let mut mask = vec![1u8; n];
    for &i in order.iter().take(quota) {
        mask[i] = 0;
    }
    param.set_mask(mask.clone());
    Ok(mask)
}

/// Achieved sparsity of a mask.
pub fn mask_sparsity(mask: &[u8]) -> f64 {
    mask.iter().filter(|m| **m == 0).count() as f64 / mask.len().max(1) as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneStepReport {
    /// 0 is the dense model; ladder steps count from 1.
    pub ladder_step: usize,
    pub sparsity: f64,
    pub nonzero_params: usize,
    pub total_params: usize,
    pub metrics: MetricReport,
}

#[derive(Debug)]
pub struct PruneOutcome {
    pub reports: Vec<PruneStepReport>,
    /// Set when a fine-tune diverged; the ladder stops there and the model
    /// holds the last good snapshot.
    pub aborted: Option<String>,
}

/// Runs the prune -> fine-tune -> evaluate ladder. Fine-tuning uses the
/// given stage-two configuration with `finetune_epochs` substituted. The
/// first report row is the dense model as handed in.
#[allow(clippy::too_many_arguments)]
pub fn iterative_prune_finetune(
    ctx: &mut TrainContext,
    split: &DatasetSplit,
    plan: &PrunePlan,
    finetune_cfg: &StageConfig,
    opts: &RunStageOpts,
    distance: DistanceMetric,
    eval_batch: usize,
    sink: &mut dyn StepSink,
) -> Result<PruneOutcome> {
    plan.validate()?;
    let all_params = ctx.all_parameters();
    let scoped = plan.select(&all_params);
    if scoped.is_empty() {
        return Err(Error::config(format!(
            "prune scope {:?} matches no 2-D parameters",
            plan.scope
        )));
    }
    let scoped: Vec<Parameter> = scoped.into_iter().cloned().collect();

    let mut reports = Vec::new();
    let dense_metrics = evaluate(
        &ctx.model,
        &split.query,
        &split.gallery,
        distance,
        false,
        eval_batch,
    )?;
    reports.push(PruneStepReport {
        ladder_step: 0,
        sparsity: 0.0,
        nonzero_params: ctx.model.total_nonzero_parameters(),
        total_params: ctx.model.total_parameters(),
        metrics: dense_metrics,
    });

    let mut snapshot = ctx.checkpoint_entries();
    let mut cfg = finetune_cfg.clone();
    cfg.epochs = plan.finetune_epochs.max(1);

    for (k, &sparsity) in plan.resolved_ladder().iter().enumerate() {
        for p in &scoped {
            magnitude_prune(p, sparsity)?;
        }
        let mut step_cfg = cfg.clone();
        step_cfg.seed = cfg.seed.wrapping_add(k as u64 + 1);
        let mut ft_opts = opts.clone();
        ft_opts.out_dir = None;
        ft_opts.resume_from = None;
        match run_stage(ctx, split, &step_cfg, &ft_opts, sink) {
            Ok(_) => {}
            Err(Error::Divergence { step, .. }) => {
                // Keep the previous snapshot; report what we have.
                restore_snapshot(ctx, &snapshot)?;
                return Ok(PruneOutcome {
                    reports,
                    aborted: Some(format!(
                        "fine-tune diverged at step {step} of ladder step {}",
                        k + 1
                    )),
                });
            }
            Err(e) => return Err(e),
        }
        let metrics = evaluate(
            &ctx.model,
            &split.query,
            &split.gallery,
            distance,
            false,
            eval_batch,
        )?;
        reports.push(PruneStepReport {
            ladder_step: k + 1,
            sparsity,
            nonzero_params: ctx.model.total_nonzero_parameters(),
            total_params: ctx.model.total_parameters(),
            metrics,
        });
        snapshot = ctx.checkpoint_entries();
    }
    Ok(PruneOutcome {
        reports,
        aborted: None,
    })
}

fn restore_snapshot(ctx: &TrainContext, snapshot: &[crate::numerics::checkpoint::CkptEntry]) -> Result<()> {
    let (centroid_entries, model_entries): (Vec<_>, Vec<_>) = snapshot
        .iter()
        .cloned()
        .partition(|e| e.name.starts_with("centroids."));
    ctx.model.load_checkpoint_entries(&model_entries)?;
    for e in centroid_entries {
        e.apply_to(&ctx.centroids.table)?;
    }
    Ok(())
}

/// Pareto table rows as CSV (params descending down the ladder).
pub fn pareto_csv(reports: &[PruneStepReport]) -> String {
    let mut out = String::from("ladder_step,sparsity,nonzero_params,total_params,map,r1,r5,r10\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.ladder_step,
            r.sparsity,
            r.nonzero_params,
            r.total_params,
            r.metrics.map,
            r.metrics.rank(1),
            r.metrics.rank(5),
            r.metrics.rank(10)
        ));
    }
    out
}
