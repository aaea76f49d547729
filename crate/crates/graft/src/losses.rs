//! Training losses and the token-selection schemes that feed them.
//!
//! The triplet path works on batches laid out as aligned anchor / positive /
//! negative thirds: a forward pass runs over all `3*B` samples at once and
//! [`select_triplet_embeddings`] carves the three sub-batches out of the
//! requested token source (fused embedding or a sampled data token averaged
//! across modalities).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_init, Parameter, SeededRng, Tensor};

/// Weights for the combined objective `alpha*L_T + beta*L_C + gamma*L_CE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Where a triplet embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Fusion,
    Data,
}

/// Anchor/positive/negative source combination, e.g. FFD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletScheme {
    pub anchor: TokenSource,
    pub positive: TokenSource,
    pub negative: TokenSource,
    /// Which data-token row is sampled when a source is `Data`.
    #[serde(default)]
    pub data_token_index: usize,
}

impl Default for TripletScheme {
    fn default() -> Self {
        TripletScheme::parse("FFD", 0).unwrap()
    }
}

impl TripletScheme {
    pub fn parse(label: &str, data_token_index: usize) -> Result<Self> {
        let src = |c: char| match c {
            'F' => Ok(TokenSource::Fusion),
            'D' => Ok(TokenSource::Data),
            _ => Err(Error::config(format!("bad triplet scheme char {c:?} in {label:?}"))),
        };
        let chars: Vec<char> = label.chars().collect();
        if chars.len() != 3 {
            return Err(Error::config(format!("triplet scheme {label:?} must have 3 letters")));
        }
        Ok(TripletScheme {
            anchor: src(chars[0])?,
            positive: src(chars[1])?,
            negative: src(chars[2])?,
            data_token_index,
        })
    }

    pub fn label(&self) -> String {
        [self.anchor, self.positive, self.negative]
            .iter()
            .map(|s| match s {
                TokenSource::Fusion => 'F',
                TokenSource::Data => 'D',
            })
            .collect()
    }

    pub fn uses_data(&self) -> bool {
        [self.anchor, self.positive, self.negative].contains(&TokenSource::Data)
    }

    /// All 8 combinations, in the comparison-table row order.
    pub fn grid() -> Vec<TripletScheme> {
        ["FFD", "DDD", "FFF", "FDD", "DFF", "DFD", "DDF", "FDF"]
            .iter()
            .map(|l| TripletScheme::parse(l, 0).unwrap())
            .collect()
    }
}

/// Learnable per-identity centroids for center loss.
#[derive(Debug, Clone)]
pub struct Centroids {
    pub table: Parameter,
    pub n_classes: usize,
    pub dim: usize,
}

impl Centroids {
    pub fn new(n_classes: usize, dim: usize, rng: &mut SeededRng) -> Self {
        Centroids {
            table: Parameter::new("centroids.table", xavier_init(&[n_classes, dim], rng)),
            n_classes,
            dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CenterMetric {
    #[default]
    Euclidean,
    Cosine,
}

/// Soft-margin triplet loss: mean over the batch of
/// `softplus(||f_a - f_p||^2 - ||f_a - f_n||^2)`.
pub fn soft_margin_triplet(f_a: &Tensor, f_p: &Tensor, f_n: &Tensor) -> Result<Tensor> {
    let shape = f_a.shape();
    if f_p.shape() != shape || f_n.shape() != shape || shape.len() != 2 {
        return Err(Error::Shape {
            op: "soft_margin_triplet",
            lhs: shape,
            rhs: f_p.shape(),
        });
    }
    let dap = squared_row_distance(f_a, f_p)?;
    let dan = squared_row_distance(f_a, f_n)?;
    Ok(dap.sub(&dan)?.softplus().mean_all())
}

fn squared_row_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    d.mul(&d)?.sum_axis(1)
}

/// Center loss: sum over the batch of the distance between each embedding
/// and the centroid of its identity. Euclidean uses the unsquared L2 norm;
/// cosine uses `1 - cos(f, c)`.
pub fn center_loss(
    f_a: &Tensor,
    labels: &[usize],
    centroids: &Centroids,
    metric: CenterMetric,
) -> Result<Tensor> {
    let shape = f_a.shape();
    if shape.len() != 2 || shape[1] != centroids.dim {
        return Err(Error::Shape {
            op: "center_loss",
            lhs: shape,
            rhs: vec![centroids.n_classes, centroids.dim],
        });
    }
    if shape[0] != labels.len() {
        return Err(Error::numeric(format!(
            "center_loss: {} labels for batch of {}",
            labels.len(),
            shape[0]
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= centroids.n_classes) {
        return Err(Error::numeric(format!(
            "center_loss: label {bad} out of range for {} classes",
            centroids.n_classes
        )));
    }
    let picked = centroids.table.tensor().index_rows(labels)?;
    match metric {
        CenterMetric::Euclidean => {
            let d = f_a.sub(&picked)?;
            Ok(d.mul(&d)?.sum_axis(1)?.sqrt().sum_all())
        }
        CenterMetric::Cosine => {
            let dot = f_a.mul(&picked)?.sum_axis(1)?;
            let na = f_a.mul(f_a)?.sum_axis(1)?.sqrt();
            let nc = picked.mul(&picked)?.sum_axis(1)?.sqrt();
            if na.map_data(|d| d.iter().any(|v| *v == 0.0))
                || nc.map_data(|d| d.iter().any(|v| *v == 0.0))
            {
                return Err(Error::numeric("center_loss: zero vector under cosine metric"));
            }
            let cos = dot.div(&na.mul(&nc)?)?;
            Ok(cos.scale(-1.0).add_scalar(1.0).sum_all())
        }
    }
}

/// Label-smoothed cross-entropy, mean over the batch. The target puts
/// `1 - eps` on the true class and `eps / (K - 1)` everywhere else.
pub fn cross_entropy_label_smoothing(logits: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (b, k) = (shape[0], shape[1]);
    if k < 2 {
        return Err(Error::config("cross_entropy: needs at least 2 classes"));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("cross_entropy: eps {eps} outside [0, 1)")));
    }
    if labels.len() != b {
        return Err(Error::numeric(format!(
            "cross_entropy: {} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::numeric(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let mut q = vec![eps / (k - 1) as f64; b * k];
    for (r, &label) in labels.iter().enumerate() {
        q[r * k + label] = 1.0 - eps;
    }
    let q = Tensor::from_vec(q, &[b, k])?;
    let logp = logits.log_softmax(1)?;
    Ok(q.mul(&logp)?.sum_all().scale(-1.0 / b as f64))
}

/// Builds the per-source embedding tensor and slices out the aligned
/// anchor/positive/negative thirds according to the scheme.
///
/// `fused` is the `[3B, D_e]` fused-token embedding; `data_tokens[m][s]` is
/// sample `s`'s final `[L_d, D]` data-token block for modality `m`. The Data
/// source is the token at `scheme.data_token_index`, averaged across
/// modalities.
pub fn select_triplet_embeddings(
    scheme: &TripletScheme,
    fused: &Tensor,
    data_tokens: &[Vec<Tensor>],
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = fused.shape()[0];
    if n % 3 != 0 || n == 0 {
        return Err(Error::numeric(format!(
            "triplet batch rows {n} not divisible into anchor/positive/negative thirds"
        )));
    }
    let bt = n / 3;
    let fusion_src = fused.clone();
    let data_src = if scheme.uses_data() {
        Some(data_token_source(scheme.data_token_index, data_tokens, n)?)
    } else {
        None
    };
    if let Some(d) = &data_src {
        if d.shape()[1] != fused.shape()[1]
            && [scheme.anchor, scheme.positive, scheme.negative].contains(&TokenSource::Fusion)
        {
            return Err(Error::config(format!(
                "triplet scheme {} mixes fusion dim {} with data dim {}",
                scheme.label(),
                fused.shape()[1],
                d.shape()[1]
            )));
        }
    }
    let pick = |src: TokenSource, third: usize| -> Result<Tensor> {
        let t = match src {
            TokenSource::Fusion => &fusion_src,
            TokenSource::Data => data_src.as_ref().expect("data source built"),
        };
        let parts = t.split(0, &[bt, bt, bt])?;
        Ok(parts[third].clone())
    };
    Ok((
        pick(scheme.anchor, 0)?,
        pick(scheme.positive, 1)?,
        pick(scheme.negative, 2)?,
    ))
}

/// The token at `index` from each modality, averaged across modalities, for
/// every sample: `[N, D]`.
fn data_token_source(index: usize, data_tokens: &[Vec<Tensor>], n: usize) -> Result<Tensor> {
    if data_tokens.is_empty() {
        return Err(Error::numeric("data token source: no modalities"));
    }
    let l_d = data_tokens[0][0].shape()[0];
    if index >= l_d {
        return Err(Error::config(format!(
            "data_token_index {index} out of range for {l_d} data tokens"
        )));
    }
    let mut per_modality = Vec::with_capacity(data_tokens.len());
    for tokens in data_tokens {
        if tokens.len() != n {
            return Err(Error::numeric(format!(
                "data token source: modality has {} samples, expected {n}",
                tokens.len()
            )));
        }
        let rows: Vec<Tensor> = tokens
            .iter()
            .map(|t| t.index_rows(&[index]))
            .collect::<Result<_>>()?;
        per_modality.push(Tensor::concat(&rows, 0)?);
    }
    Tensor::mean_of(&per_modality)
}

/// Unweighted component values plus the weighted total, for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub center: f64,
    pub ce: f64,
    pub total: f64,
}

/// Computed loss terms; a term left as `None` contributes exactly nothing
/// (no value, no gradients).
#[derive(Debug, Default)]
pub struct LossTerms {
    pub triplet: Option<Tensor>,
    pub center: Option<Tensor>,
    pub ce: Option<Tensor>,
}

/// Weighted sum of the present terms. Zero-weighted terms are skipped so
/// they contribute neither value nor gradient.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Tensor> = None;
    let mut push = |t: &Option<Tensor>, w: f64, slot: &mut f64| -> Result<()> {
        if let Some(t) = t {
            *slot = t.item();
            if w != 0.0 {
                let scaled = t.scale(w);
                total = Some(match total.take() {
                    Some(acc) => acc.add(&scaled)?,
                    None => scaled,
                });
            }
        }
        Ok(())
    };
    push(&terms.triplet, weights.alpha, &mut breakdown.triplet)?;
    push(&terms.center, weights.beta, &mut breakdown.center)?;
    push(&terms.ce, weights.gamma, &mut breakdown.ce)?;
    let total = total.unwrap_or_else(|| Tensor::scalar(0.0));
    breakdown.total = total.item();
    Ok((total, breakdown))
}
