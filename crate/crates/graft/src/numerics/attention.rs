//! Multi-head scaled dot-product self-attention over one sequence.

use crate::error::{Error, Result};

use super::linear::Linear;
use super::param::Parameter;
use super::rng::SeededRng;
use super::tensor::Tensor;

#[derive(Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, n_heads: usize, rng: &mut SeededRng) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::config(format!(
                "{name}: embed dim {dim} not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, true, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, true, rng),
            n_heads,
            dim,
        })
    }

    /// Full self-attention over an `[L, D]` sequence. No positional term and
    /// no masking, so permuting input rows permutes output rows identically.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;

        let head_sizes = vec![dh; self.n_heads];
        let qs = q.split(1, &head_sizes)?;
        let ks = k.split(1, &head_sizes)?;
        let vs = v.split(1, &head_sizes)?;

        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let scores = qs[h].matmul(&ks[h].transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            heads.push(attn.matmul(&vs[h])?);
        }
        let merged = Tensor::concat(&heads, 1)?;
        self.wo.forward(&merged)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.parameters())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = SeededRng::new(0);
        assert!(MultiHeadAttention::new("attn", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        // With L=1 the attention weight is exactly 1, so the output is the
        // V projection followed by the output projection.
        let mut rng = SeededRng::new(3);
        let mha = MultiHeadAttention::new("attn", 8, 2, &mut rng).unwrap();
        let x = Tensor::from_vec((0..8).map(|i| 0.1 * i as f64).collect(), &[1, 8]).unwrap();
        let out = mha.forward(&x).unwrap();
        let direct = mha.wo.forward(&mha.wv.forward(&x).unwrap()).unwrap();
        let (a, b) = (out.data_vec(), direct.data_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = SeededRng::new(5);
        let mha = MultiHeadAttention::new("attn", 4, 2, &mut rng).unwrap();
        let x = Tensor::from_vec(
            vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 1.0, -1.1, 1.2],
            &[3, 4],
        )
        .unwrap();
        let out = mha.forward(&x).unwrap().data_vec();
        // Swap rows 0 and 2.
        let mut permuted = vec![0.0; 12];
        permuted[0..4].copy_from_slice(&x.data_vec()[8..12]);
        permuted[4..8].copy_from_slice(&x.data_vec()[4..8]);
        permuted[8..12].copy_from_slice(&x.data_vec()[0..4]);
        let xp = Tensor::from_vec(permuted, &[3, 4]).unwrap();
        let outp = mha.forward(&xp).unwrap().data_vec();
        for c in 0..4 {
            assert!((out[c] - outp[8 + c]).abs() < 1e-12);
            assert!((out[8 + c] - outp[c]).abs() < 1e-12);
            assert!((out[4 + c] - outp[4 + c]).abs() < 1e-12);
        }
    }
}
