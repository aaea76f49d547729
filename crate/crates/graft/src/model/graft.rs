//! The gradual-fusion model: shared patch embedding and backbone, learnable
//! fusion tokens threaded through per-modality encoders, and a BNNeck head.
//!
//! Cross-modal information flows only through the fusion state: each encoder
//! layer sees its own modality's data tokens plus the shared fusion tokens,
//! and the per-modality fusion outputs are averaged between layers. The
//! retrieval embedding is the flattened fused token before batch norm; BN
//! and the classifier affect only the logits.

use std::collections::BTreeMap;

use crate::data::image::ImageBuf;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::CkptEntry;
use crate::numerics::{xavier_init, BatchNorm1d, Linear, Parameter, SeededRng, Tensor};

use super::config::{FusionMethod, GraftConfig};
use super::layers::EncoderBlock;
use super::patch::PatchEmbed;

/// Bias-free BN followed by a bias-free linear classifier. Retrieval uses
/// the pre-BN embedding; this head only produces logits.
#[derive(Debug)]
pub struct BnNeckHead {
    pub bn: BatchNorm1d,
    pub fc: Linear,
}

impl BnNeckHead {
    fn new(embed_width: usize, n_classes: usize, rng: &mut SeededRng) -> Self {
        BnNeckHead {
            bn: BatchNorm1d::new("head.bn", embed_width),
            fc: Linear::new("head.fc", embed_width, n_classes, false, rng),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.bn.gain.clone()];
        out.extend(self.fc.parameters());
        out
    }
}

/// The fusion mechanism: the gradual fusion-token path, or one of the
/// vanilla single-encoder baselines used in the fusion ablation.
#[derive(Debug)]
pub enum Fuser {
    Token {
        token: Parameter,
        /// `encoders[m][l]`: modality m's l-th encoder layer. No parameters
        /// are shared between modalities.
        encoders: Vec<Vec<EncoderBlock>>,
    },
    Vanilla {
        /// Present for the CLS variant, absent for the averaged variant.
        cls: Option<Parameter>,
        encoder: Vec<EncoderBlock>,
    },
}

pub struct ForwardOpts<'a> {
    pub train: bool,
    pub dropout_rng: Option<&'a mut SeededRng>,
    /// Zeroes the fused state after every averaging step. Used to verify
    /// that cross-modal information flows only through the fusion token.
    pub ablate_fusion: bool,
}

impl ForwardOpts<'_> {
    pub fn infer() -> Self {
        ForwardOpts {
            train: false,
            dropout_rng: None,
            ablate_fusion: false,
        }
    }

    pub fn train() -> Self {
        ForwardOpts {
            train: true,
            dropout_rng: None,
            ablate_fusion: false,
        }
    }
}

pub struct ForwardOutput {
    /// `[B, embed_width]` retrieval embeddings (pre-BN fused tokens).
    pub embed: Tensor,
    /// `data_tokens[m][b]`: final `[L_d, D]` data tokens of modality m.
    pub data_tokens: Vec<Vec<Tensor>>,
    /// `[B, n_classes]` classifier outputs.
    pub logits: Tensor,
}

pub struct GraftModel {
    pub cfg: GraftConfig,
    pub patch: PatchEmbed,
    pub backbone: Vec<EncoderBlock>,
    pub fuser: Fuser,
    pub head: BnNeckHead,
}

impl GraftModel {
    pub fn new(cfg: &GraftConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let patch = PatchEmbed::new(
            cfg.channels,
            cfg.height,
            cfg.width,
            cfg.patch_size,
            cfg.embed_dim,
            rng,
        )?;
        let backbone = (0..cfg.backbone_depth)
            .map(|i| {
                EncoderBlock::new(
                    &format!("backbone.block{i}"),
                    cfg.embed_dim,
                    cfg.backbone_heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fuser = match cfg.fusion_method {
            FusionMethod::FusionToken => {
                let token = Parameter::new(
                    "fusion.token",
                    xavier_init(&[cfg.n_fusion_tokens, cfg.embed_dim], rng),
                );
                let encoders = (0..cfg.n_modalities)
                    .map(|m| {
                        (0..cfg.n_modality_encoder_layers)
                            .map(|l| {
                                EncoderBlock::new(
                                    &format!("enc{m}.layer{l}"),
                                    cfg.embed_dim,
                                    cfg.encoder_heads,
                                    cfg.mlp_ratio,
                                    rng,
                                )
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Fuser::Token { token, encoders }
            }
            FusionMethod::VanillaCls | FusionMethod::VanillaAverage => {
                let cls = matches!(cfg.fusion_method, FusionMethod::VanillaCls).then(|| {
                    Parameter::new("vanilla.cls", xavier_init(&[1, cfg.embed_dim], rng))
                });
                let encoder = (0..cfg.n_modality_encoder_layers)
                    .map(|l| {
                        EncoderBlock::new(
                            &format!("vanilla.layer{l}"),
                            cfg.embed_dim,
                            cfg.encoder_heads,
                            cfg.mlp_ratio,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Fuser::Vanilla { cls, encoder }
            }
        };
        let head = BnNeckHead::new(cfg.embed_width(), cfg.n_classes, rng);
        Ok(GraftModel {
            cfg: cfg.clone(),
            patch,
            backbone,
            fuser,
            head,
        })
    }

    /// Shape-preserving pass through the shared backbone stack. Depth 0 is
    /// the identity map.
    pub fn backbone_forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut x = tokens.clone();
        for block in &self.backbone {
            x = block.forward(&x, None)?;
        }
        Ok(x)
    }

    /// Full forward over an M-tuple of aligned image batches
    /// (`batch[m][b]`). Returns embeddings, final data tokens and logits.
    pub fn forward(&self, batch: &[Vec<&ImageBuf>], opts: &mut ForwardOpts) -> Result<ForwardOutput> {
        if batch.len() != self.cfg.n_modalities {
            return Err(Error::config(format!(
                "forward: got {} modalities, model configured for {}",
                batch.len(),
                self.cfg.n_modalities
            )));
        }
        let b = batch[0].len();
        if b == 0 || batch.iter().any(|m| m.len() != b) {
            return Err(Error::config("forward: modality batches must be non-empty and aligned"));
        }
        let m_count = self.cfg.n_modalities;
        let mut embeds: Vec<Tensor> = Vec::with_capacity(b);
        let mut data_tokens: Vec<Vec<Tensor>> = vec![Vec::with_capacity(b); m_count];

        for s in 0..b {
            let mut streams: Vec<Tensor> = Vec::with_capacity(m_count);
            for modality in batch {
                let tokens = self.patch.forward(modality[s])?;
                streams.push(self.backbone_forward(&tokens)?);
            }
            let (embed_row, finals) = match &self.fuser {
                Fuser::Token { token, encoders } => {
                    self.fuse_token_sample(token, encoders, streams, opts)?
                }
                Fuser::Vanilla { cls, encoder } => {
                    self.fuse_vanilla_sample(cls.as_ref(), encoder, streams, opts)?
                }
            };
            embeds.push(embed_row);
            for (m, t) in finals.into_iter().enumerate() {
                data_tokens[m].push(t);
            }
        }

        let embed = Tensor::concat(&embeds, 0)?;
        let bn_out = self.head.bn.forward(&embed, opts.train)?;
        let logits = self.head.fc.forward(&bn_out)?;
        Ok(ForwardOutput {
            embed,
            data_tokens,
            logits,
        })
    }

    /// Gradual fusion for one sample: at every encoder layer each modality
    /// attends over `[fusion_state; own data tokens]`, then the fusion
    /// outputs are averaged to form the next layer's fusion state.
    fn fuse_token_sample(
        &self,
        token: &Parameter,
        encoders: &[Vec<EncoderBlock>],
        mut streams: Vec<Tensor>,
        opts: &mut ForwardOpts,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let l_f = self.cfg.n_fusion_tokens;
        let d = self.cfg.embed_dim;
        let mut fusion_state = token.tensor().clone();
        for l in 0..self.cfg.n_modality_encoder_layers {
            let mut fusion_outs = Vec::with_capacity(streams.len());
            for (m, stream) in streams.iter_mut().enumerate() {
                let (zf, zd) = modality_encoder_layer(
                    &encoders[m][l],
                    &fusion_state,
                    stream,
                    self.drop(opts),
                )?;
                fusion_outs.push(zf);
                *stream = zd;
            }
            fusion_state = fuse_average(&fusion_outs)?;
            if opts.ablate_fusion {
                fusion_state = Tensor::zeros(&[l_f, d]);
            }
        }
        let embed_row = fusion_state.reshape(&[1, l_f * d])?;
        Ok((embed_row, streams))
    }

    /// Vanilla baselines: concatenate every modality's tokens (plus a CLS
    /// token for the CLS variant) into one encoder.
    fn fuse_vanilla_sample(
        &self,
        cls: Option<&Parameter>,
        encoder: &[EncoderBlock],
        streams: Vec<Tensor>,
        opts: &mut ForwardOpts,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let l_d = self.cfg.n_data_tokens();
        let m_count = streams.len();
        let mut x = match cls {
            Some(c) => {
                let mut parts = vec![c.tensor().clone()];
                parts.extend(streams);
                Tensor::concat(&parts, 0)?
            }
            None => Tensor::concat(&streams, 0)?,
        };
        for block in encoder {
            x = block.forward(&x, self.drop(opts))?;
        }
        let d = self.cfg.embed_dim;
        match cls {
            Some(_) => {
                let mut sizes = vec![1];
                sizes.extend(std::iter::repeat(l_d).take(m_count));
                let mut parts = x.split(0, &sizes)?;
                let embed_row = parts.remove(0).reshape(&[1, d])?;
                Ok((embed_row, parts))
            }
            None => {
                let embed_row = x.mean_axis(0)?.reshape(&[1, d])?;
                let parts = x.split(0, &vec![l_d; m_count])?;
                Ok((embed_row, parts))
            }
        }
    }

    fn drop<'a>(&self, opts: &'a mut ForwardOpts) -> Option<(f64, &'a mut SeededRng)> {
        if !opts.train || self.cfg.dropout <= 0.0 {
            return None;
        }
        opts.dropout_rng.as_deref_mut().map(|rng| (self.cfg.dropout, rng))
    }

    /// All parameters in a fixed order (stable across runs and processes).
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.patch.parameters();
        for block in &self.backbone {
            out.extend(block.parameters());
        }
        match &self.fuser {
            Fuser::Token { token, encoders } => {
                out.push(token.clone());
                for enc in encoders {
                    for block in enc {
                        out.extend(block.parameters());
                    }
                }
            }
            Fuser::Vanilla { cls, encoder } => {
                if let Some(c) = cls {
                    out.push(c.clone());
                }
                for block in encoder {
                    out.extend(block.parameters());
                }
            }
        }
        out.extend(self.head.parameters());
        out
    }

    /// The learnable fusion token, when this model uses token fusion.
    pub fn fusion_token(&self) -> Option<&Parameter> {
        match &self.fuser {
            Fuser::Token { token, .. } => Some(token),
            Fuser::Vanilla { .. } => None,
        }
    }

    /// Parameter counts grouped by the first `depth` name segments.
    pub fn parameter_counts(&self, depth: usize, nonzero_only: bool) -> BTreeMap<String, usize> {
        let mut table = BTreeMap::new();
        for p in self.parameters() {
            let group: String = p
                .name()
                .split('.')
                .take(depth.max(1))
                .collect::<Vec<_>>()
                .join(".");
            let count = if nonzero_only { p.count_nonzero() } else { p.numel() };
            *table.entry(group).or_insert(0) += count;
        }
        table
    }

    pub fn total_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn total_nonzero_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.count_nonzero()).sum()
    }

    // ── Checkpointing ───────────────────────────────────────────────

    pub fn checkpoint_entries(&self) -> Vec<CkptEntry> {
        let mut entries: Vec<CkptEntry> = self
            .parameters()
            .iter()
            .map(CkptEntry::from_parameter)
            .collect();
        for (name, data) in self.head.bn.buffers() {
            entries.push(CkptEntry::buffer(name, data));
        }
        entries
    }

    /// Restores parameters and BN buffers from checkpoint entries. Every
    /// model tensor must be present; unknown names are rejected.
    pub fn load_checkpoint_entries(&self, entries: &[CkptEntry]) -> Result<()> {
        let params = self.parameters();
        let by_name: BTreeMap<&str, &Parameter> =
            params.iter().map(|p| (p.name(), p)).collect();
        let mut seen = std::collections::HashSet::new();
        let mut bn_mean: Option<Vec<f64>> = None;
        let mut bn_var: Option<Vec<f64>> = None;
        for e in entries {
            if e.name == "head.bn.running_mean" {
                bn_mean = Some(e.data.clone());
            } else if e.name == "head.bn.running_var" {
                bn_var = Some(e.data.clone());
            } else if let Some(p) = by_name.get(e.name.as_str()) {
                e.apply_to(p)?;
            } else {
                return Err(Error::Checkpoint(format!(
                    "unknown tensor {:?} in checkpoint",
                    e.name
                )));
            }
            seen.insert(e.name.clone());
        }
        if let Some(missing) = by_name.keys().find(|n| !seen.contains(**n)) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing tensor {missing:?}"
            )));
        }
        match (bn_mean, bn_var) {
            (Some(m), Some(v)) => self.head.bn.load_buffers(m, v),
            _ => {
                return Err(Error::Checkpoint(
                    "checkpoint is missing batch-norm running stats".into(),
                ))
            }
        }
        Ok(())
    }
}

/// One modality-encoder layer step: fusion tokens concatenated before the
/// data tokens, one pre-norm encoder block, split back at the fusion width.
pub fn modality_encoder_layer(
    block: &EncoderBlock,
    fusion_in: &Tensor,
    data_in: &Tensor,
    dropout: Option<(f64, &mut SeededRng)>,
) -> Result<(Tensor, Tensor)> {
    let l_f = fusion_in.shape()[0];
    let l_d = data_in.shape()[0];
    let joined = Tensor::concat(&[fusion_in.clone(), data_in.clone()], 0)?;
    let out = block.forward(&joined, dropout)?;
    let mut parts = out.split(0, &[l_f, l_d])?;
    let zd = parts.pop().expect("two parts");
    let zf = parts.pop().expect("two parts");
    Ok((zf, zd))
}

/// Elementwise mean of the per-modality fusion outputs. The accumulation
/// order is canonicalized so the result is independent of modality order.
pub fn fuse_average(fusion_outputs: &[Tensor]) -> Result<Tensor> {
    Tensor::mean_of(fusion_outputs)
}
