//! Run configuration: one TOML file wiring every module together.
//!
//! Unknown keys are rejected. `resolve` folds the master seed into the
//! stages and the synthetic data spec and returns a fully defaulted copy;
//! its TOML serialization hashes to the run's identity.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use graft::data::{AugmentPolicy, SyntheticSpec};
use graft::error::{Error, Result};
use graft::eval::DistanceMetric;
use graft::losses::{CenterMetric, LossWeights, TripletScheme};
use graft::model::GraftConfig;
use graft::prune::PrunePlan;
use graft::train::{Schedule, StageConfig, WarmstartConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub synthetic: SyntheticSpec,
    /// Dataset root for `kind = "directory"`.
    pub directory: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            synthetic: SyntheticSpec::default(),
            directory: None,
        }
    }
}

/// Partial stage section: unset fields take the stage's own defaults, so a
/// `[stage2]` block listing only `epochs` still gets the unfrozen backbone,
/// constant schedule and stage-two loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StageOverrides {
    pub epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub loss_weights: Option<LossWeights>,
    pub label_smoothing: Option<f64>,
    pub backbone_frozen: Option<bool>,
    pub schedule: Option<Schedule>,
    pub warmup_steps: Option<usize>,
    pub cooldown_fraction: Option<f64>,
}

impl StageOverrides {
    pub fn apply(&self, mut base: StageConfig) -> StageConfig {
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.base_lr {
            base.base_lr = v;
        }
        if let Some(v) = self.weight_decay {
            base.weight_decay = v;
        }
        if let Some(v) = self.loss_weights {
            base.loss_weights = v;
        }
        if let Some(v) = self.label_smoothing {
            base.label_smoothing = v;
        }
        if let Some(v) = self.backbone_frozen {
            base.backbone_frozen = v;
        }
        if let Some(v) = self.schedule {
            base.schedule = v;
        }
        if let Some(v) = self.warmup_steps {
            base.warmup_steps = v;
        }
        if let Some(v) = self.cooldown_fraction {
            base.cooldown_fraction = v;
        }
        base
    }

    fn materialize(cfg: &StageConfig) -> Self {
        StageOverrides {
            epochs: Some(cfg.epochs),
            base_lr: Some(cfg.base_lr),
            weight_decay: Some(cfg.weight_decay),
            loss_weights: Some(cfg.loss_weights),
            label_smoothing: Some(cfg.label_smoothing),
            backbone_frozen: Some(cfg.backbone_frozen),
            schedule: Some(cfg.schedule),
            warmup_steps: Some(cfg.warmup_steps),
            cooldown_fraction: Some(cfg.cooldown_fraction),
        }
    }
}

/// Triplet-loss selection scheme plus the center-loss metric switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Three letters over {F, D}: anchor, positive, negative sources.
    pub scheme: String,
    pub data_token_index: usize,
    pub center_metric: CenterMetric,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scheme: "FFD".to_string(),
            data_token_index: 0,
            center_metric: CenterMetric::Euclidean,
        }
    }
}

impl LossConfig {
    pub fn triplet_scheme(&self) -> Result<TripletScheme> {
        TripletScheme::parse(&self.scheme, self.data_token_index)
    }
}

/// Sampler and augmentation knobs shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_triplets: usize,
    pub positives_per_anchor: usize,
    pub steps_per_epoch: Option<usize>,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_triplets: 26,
            positives_per_anchor: 8,
            steps_per_epoch: None,
            augment: AugmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metric: DistanceMetric,
    pub exclude_same_view: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metric: DistanceMetric::Euclidean,
            exclude_same_view: false,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: GraftConfig,
    pub data: DataConfig,
    pub warmstart: WarmstartConfig,
    pub stage1: StageOverrides,
    pub stage2: StageOverrides,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub prune: PrunePlan,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn example() -> Self {
        RunConfig {
            seed: 7,
            ..RunConfig::default()
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Effective stage-one configuration (overrides over the stage-one
    /// defaults, master seed applied).
    pub fn stage_one_config(&self) -> StageConfig {
        let mut cfg = self.stage1.apply(StageConfig::stage_one());
        cfg.seed = self.seed;
        cfg
    }

    pub fn stage_two_config(&self) -> StageConfig {
        let mut cfg = self.stage2.apply(StageConfig::stage_two());
        cfg.seed = self.seed;
        cfg
    }

    /// Fully defaulted copy with the master seed folded into the stages and
    /// the synthetic data spec, and the stage sections materialized to
    /// their effective values. Validates everything.
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<RunConfig> {
        let mut cfg = self.clone();
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.data.synthetic.seed = cfg.seed;
        cfg.stage1 = StageOverrides::materialize(&cfg.stage_one_config());
        cfg.stage2 = StageOverrides::materialize(&cfg.stage_two_config());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match self.data.kind {
            DataKind::Synthetic => {
                self.data.synthetic.validate()?;
                let s = &self.data.synthetic;
                if s.n_modalities != self.model.n_modalities
                    || s.channels != self.model.channels
                    || s.height != self.model.height
                    || s.width != self.model.width
                {
                    return Err(Error::config(format!(
                        "data.synthetic {}x{}x{}x{} does not match model {}x{}x{}x{}",
                        s.n_modalities,
                        s.channels,
                        s.height,
                        s.width,
                        self.model.n_modalities,
                        self.model.channels,
                        self.model.height,
                        self.model.width
                    )));
                }
            }
            DataKind::Directory => {
                if self.data.directory.is_none() {
                    return Err(Error::config(
                        "data.kind = \"directory\" requires data.directory to be set",
                    ));
                }
            }
        }
        self.stage_one_config().validate()?;
        self.stage_two_config().validate()?;
        let scheme = self.loss.triplet_scheme()?;
        if scheme.data_token_index >= self.model.n_data_tokens() && scheme.uses_data() {
            return Err(Error::config(format!(
                "loss.data_token_index {} out of range for {} data tokens",
                scheme.data_token_index,
                self.model.n_data_tokens()
            )));
        }
        if self.train.batch_triplets == 0 || self.train.positives_per_anchor == 0 {
            return Err(Error::config("train.batch_triplets and positives_per_anchor must be >= 1"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be >= 1"));
        }
        self.prune.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config encode: {e}")))
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Writes the resolved copy next to the run outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("resolved.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = RunConfig::example().resolve(None).unwrap();
        assert_eq!(cfg.stage_one_config().seed, 7);
        assert_eq!(cfg.data.synthetic.seed, 7);
        assert!(cfg.stage_one_config().backbone_frozen);
        assert!(!cfg.stage_two_config().backbone_frozen);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_stage_two_section_keeps_stage_two_defaults() {
        let text = "seed = 1\n[stage2]\nepochs = 5\nbase_lr = 1e-4\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let s2 = cfg.stage_two_config();
        assert_eq!(s2.epochs, 5);
        assert!(!s2.backbone_frozen);
        assert_eq!(s2.loss_weights.beta, 0.0005);
        assert_eq!(s2.label_smoothing, 0.1);
    }

    #[test]
    fn roundtrip_equals_itself() {
        let cfg = RunConfig::example().resolve(Some(11)).unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = "seed = 1\n[model]\nnot_a_field = 3\n";
        let err = toml::from_str::<RunConfig>(text).unwrap_err().to_string();
        assert!(err.contains("not_a_field"), "got: {err}");
    }

    #[test]
    fn seed_override_changes_hash() {
        let a = RunConfig::example().resolve(Some(1)).unwrap();
        let b = RunConfig::example().resolve(Some(2)).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn mismatched_data_and_model_dims_rejected() {
        let mut cfg = RunConfig::example();
        cfg.data.synthetic.height = 64;
        assert!(cfg.resolve(None).is_err());
    }

    #[test]
    fn directory_kind_requires_path() {
        let mut cfg = RunConfig::example();
        cfg.data.kind = DataKind::Directory;
        assert!(cfg.resolve(None).is_err());
        cfg.data.directory = Some(PathBuf::from("/tmp/data"));
        cfg.resolve(None).unwrap();
    }
}
