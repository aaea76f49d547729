//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-modality streams are combined into one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    /// Learnable fusion tokens averaged across modality encoders.
    #[default]
    FusionToken,
    /// All modalities' tokens concatenated with a CLS token into one
    /// encoder; the CLS output is the embedding.
    VanillaCls,
    /// As above without the CLS token; the embedding is the mean of all
    /// output tokens.
    VanillaAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraftConfig {
    /// Number of modalities M.
    pub n_modalities: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub backbone_depth: usize,
    pub backbone_heads: usize,
    pub n_modality_encoder_layers: usize,
    pub n_fusion_tokens: usize,
    pub n_classes: usize,
    /// Heads in each modality encoder layer.
    pub encoder_heads: usize,
    pub dropout: f64,
    pub mlp_ratio: usize,
    pub fusion_method: FusionMethod,
}

impl Default for GraftConfig {
    fn default() -> Self {
        GraftConfig {
            n_modalities: 2,
            channels: 3,
            height: 32,
            width: 32,
            patch_size: 8,
            embed_dim: 64,
            backbone_depth: 2,
            backbone_heads: 4,
            n_modality_encoder_layers: 1,
            n_fusion_tokens: 1,
            n_classes: 10,
            encoder_heads: 4,
            dropout: 0.0,
            mlp_ratio: 4,
            fusion_method: FusionMethod::FusionToken,
        }
    }
}

impl GraftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modalities == 0 {
            return Err(Error::config("model.n_modalities must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("model.channels must be >= 1"));
        }
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::config(format!(
                "model: image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.backbone_heads == 0 || self.embed_dim % self.backbone_heads != 0 {
            return Err(Error::config(format!(
                "model: embed_dim {} not divisible by backbone_heads {}",
                self.embed_dim, self.backbone_heads
            )));
        }
        if self.encoder_heads == 0 || self.embed_dim % self.encoder_heads != 0 {
            return Err(Error::config(format!(
                "model: embed_dim {} not divisible by encoder_heads {}",
                self.embed_dim, self.encoder_heads
            )));
        }
        if self.n_fusion_tokens == 0 {
            return Err(Error::config("model.n_fusion_tokens must be >= 1"));
        }
        if self.n_modality_encoder_layers == 0 {
            return Err(Error::config("model.n_modality_encoder_layers must be >= 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("model.n_classes must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must be in [0, 1)"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("model.mlp_ratio must be >= 1"));
        }
        Ok(())
    }

    /// Number of data tokens per modality: L_d = H*W / P^2.
    pub fn n_data_tokens(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Retrieval embedding width: L_f * D for fusion-token models, D for
    /// the vanilla baselines.
    pub fn embed_width(&self) -> usize {
        match self.fusion_method {
            FusionMethod::FusionToken => self.n_fusion_tokens * self.embed_dim,
            FusionMethod::VanillaCls | FusionMethod::VanillaAverage => self.embed_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        GraftConfig::default().validate().unwrap();
    }

    #[test]
    fn patch_count_examples() {
        let mut cfg = GraftConfig {
            height: 224,
            width: 224,
            patch_size: 16,
            ..GraftConfig::default()
        };
        assert_eq!(cfg.n_data_tokens(), 196);
        cfg.height = 32;
        cfg.width = 32;
        assert_eq!(cfg.n_data_tokens(), 4);
    }

    #[test]
    fn rejects_indivisible_patch() {
        let cfg = GraftConfig {
            height: 30,
            ..GraftConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
