//! Layer normalization and bias-free 1-D batch normalization.

use crate::error::{Error, Result};

use super::param::Parameter;
use super::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Normalizes each trailing-dim row of `x` to zero mean / unit variance,
/// then applies the affine `gain * xhat + bias`.
pub fn layer_norm(x: &Tensor, gain: &Parameter, bias: &Parameter, eps: f64) -> Result<Tensor> {
    let shape = x.shape();
    let d = *shape.last().ok_or(Error::Shape {
        op: "layer_norm",
        lhs: shape.clone(),
        rhs: vec![],
    })?;
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: shape,
            rhs: gain.shape(),
        });
    }
    let xhat = normalize_rows(x, d, eps);
    xhat.mul(gain.tensor())?.add(bias.tensor())
}

/// Row-wise standardization as a single graph node with the full
/// layer-norm backward (through mean and variance).
fn normalize_rows(x: &Tensor, d: usize, eps: f64) -> Tensor {
    let shape = x.shape();
    let x_data = x.data_vec();
    let rows = x_data.len() / d;
    let mut out = vec![0.0; x_data.len()];
    let mut inv_stds = vec![0.0; rows];
    for r in 0..rows {
        let row = &x_data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        inv_stds[r] = inv_std;
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * inv_std;
        }
    }
    let xhat = out.clone();
    let backward = Box::new(move |g: &[f64]| {
        let mut dx = vec![0.0; g.len()];
        let df = d as f64;
        for r in 0..rows {
            let gs = &g[r * d..(r + 1) * d];
            let hs = &xhat[r * d..(r + 1) * d];
            let g_sum: f64 = gs.iter().sum();
            let gh_sum: f64 = gs.iter().zip(hs).map(|(a, b)| a * b).sum();
            for i in 0..d {
                dx[r * d + i] = inv_stds[r] / df * (df * gs[i] - g_sum - hs[i] * gh_sum);
            }
        }
        vec![dx]
    });
    Tensor::from_op(vec![x.clone()], out, shape, backward)
}

/// Layer norm parameters bundled with their epsilon.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name_prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Parameter::new(format!("{name_prefix}.g"), Tensor::full(&[dim], 1.0)),
            bias: Parameter::new(format!("{name_prefix}.b"), Tensor::zeros(&[dim])),
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, self.eps)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

/// Bias-free batch normalization over `[B, D]` with running statistics.
///
/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running stats by EMA; inference mode normalizes with the running
/// stats and is batch-size independent. There is no bias parameter.
#[derive(Debug)]
pub struct BatchNorm1d {
    pub gain: Parameter,
    pub running_mean: std::cell::RefCell<Vec<f64>>,
    pub running_var: std::cell::RefCell<Vec<f64>>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(name_prefix: &str, dim: usize) -> Self {
        BatchNorm1d {
            gain: Parameter::new(format!("{name_prefix}.g"), Tensor::full(&[dim], 1.0)),
            running_mean: std::cell::RefCell::new(vec![0.0; dim]),
            running_var: std::cell::RefCell::new(vec![1.0; dim]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.numel()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::Shape {
                op: "batch_norm_1d",
                lhs: shape,
                rhs: vec![self.dim()],
            });
        }
        let (b, d) = (shape[0], shape[1]);
        if train {
            if b < 2 {
                return Err(Error::numeric(format!(
                    "batch_norm_1d: train mode needs batch size >= 2, got {b}"
                )));
            }
            let x_data = x.data_vec();
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for c in 0..d {
                let mut s = 0.0;
                for r in 0..b {
                    s += x_data[r * d + c];
                }
                let m = s / b as f64;
                let mut v = 0.0;
                for r in 0..b {
                    let dv = x_data[r * d + c] - m;
                    v += dv * dv;
                }
                mean[c] = m;
                var[c] = v / b as f64;
            }
            {
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for c in 0..d {
                    rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
                    rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * var[c];
                }
            }
            let xhat = batch_standardize_node(x, &x_data, &mean, &var, b, d, self.eps);
            xhat.mul(self.gain.tensor())
        } else {
            let mean = self.running_mean.borrow().clone();
            let var = self.running_var.borrow().clone();
            // Affine per column with constant stats: (x - mu) * inv_std * gain.
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let mu = Tensor::from_vec(mean, &[d])?;
            let inv_t = Tensor::from_vec(inv, &[d])?;
            x.sub(&mu)?.mul(&inv_t)?.mul(self.gain.tensor())
        }
    }

    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let prefix = self.gain.name().trim_end_matches(".g").to_string();
        vec![
            (format!("{prefix}.running_mean"), self.running_mean.borrow().clone()),
            (format!("{prefix}.running_var"), self.running_var.borrow().clone()),
        ]
    }

    pub fn load_buffers(&self, mean: Vec<f64>, var: Vec<f64>) {
        assert_eq!(mean.len(), self.dim());
        assert_eq!(var.len(), self.dim());
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
    }
}

/// One graph node for train-mode batch standardization over columns, with
/// the full backward through batch mean and variance.
fn batch_standardize_node(
    x: &Tensor,
    x_data: &[f64],
    mean: &[f64],
    var: &[f64],
    b: usize,
    d: usize,
    eps: f64,
) -> Tensor {
    let mut out = vec![0.0; x_data.len()];
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for r in 0..b {
        for c in 0..d {
            out[r * d + c] = (x_data[r * d + c] - mean[c]) * inv_std[c];
        }
    }
    let xhat = out.clone();
    let inv = inv_std.clone();
    let backward = Box::new(move |g: &[f64]| {
        let bf = b as f64;
        let mut dx = vec![0.0; g.len()];
        for c in 0..d {
            let mut g_sum = 0.0;
            let mut gh_sum = 0.0;
            for r in 0..b {
                g_sum += g[r * d + c];
                gh_sum += g[r * d + c] * xhat[r * d + c];
            }
            for r in 0..b {
                dx[r * d + c] =
                    inv[c] / bf * (bf * g[r * d + c] - g_sum - xhat[r * d + c] * gh_sum);
            }
        }
        vec![dx]
    });
    Tensor::from_op(vec![x.clone()], out, vec![b, d], backward)
}
