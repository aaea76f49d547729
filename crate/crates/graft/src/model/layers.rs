//! Transformer encoder building blocks (pre-norm, residual).

use crate::error::Result;
use crate::numerics::{Linear, LayerNorm, MultiHeadAttention, Parameter, SeededRng, Tensor};

#[derive(Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Mlp {
            fc1: Linear::new(&format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.fc1.parameters();
        out.extend(self.fc2.parameters());
        out
    }
}

/// Optional dropout: `(rate, rng)`; absent or rate 0 is the identity.
pub type DropCtx<'a> = Option<(f64, &'a mut SeededRng)>;

/// Pre-norm encoder block:
/// `h = x + Attn(LN1(x))`, `out = h + MLP(LN2(h))`.
#[derive(Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        })
    }

    pub fn forward(&self, x: &Tensor, mut dropout: DropCtx) -> Result<Tensor> {
        let mut attn_out = self.attn.forward(&self.ln1.forward(x)?)?;
        if let Some((rate, rng)) = dropout.as_mut() {
            if *rate > 0.0 {
                attn_out = attn_out.dropout(*rate, rng);
            }
        }
        let h = x.add(&attn_out)?;
        let mut mlp_out = self.mlp.forward(&self.ln2.forward(&h)?)?;
        if let Some((rate, rng)) = dropout.as_mut() {
            if *rate > 0.0 {
                mlp_out = mlp_out.dropout(*rate, rng);
            }
        }
        h.add(&mlp_out)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.ln1.parameters();
        out.extend(self.attn.parameters());
        out.extend(self.ln2.parameters());
        out.extend(self.mlp.parameters());
        out
    }
}
