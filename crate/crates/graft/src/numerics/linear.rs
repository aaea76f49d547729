//! Affine projection `x @ W (+ b)` with an optional bias.

use crate::error::Result;

use super::init::xavier_init;
use super::param::Parameter;
use super::rng::SeededRng;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut SeededRng) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.w"), xavier_init(&[d_in, d_out], rng)),
            bias: bias.then(|| Parameter::new(format!("{name}.b"), Tensor::zeros(&[d_out]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(self.weight.tensor())?;
        match &self.bias {
            Some(b) => y.add(b.tensor()),
            None => Ok(y),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_bias_variant_has_no_bias_parameter() {
        let mut rng = SeededRng::new(0);
        let lin = Linear::new("fc", 4, 3, false, &mut rng);
        assert_eq!(lin.parameters().len(), 1);
        assert!(lin.bias.is_none());
    }

    #[test]
    fn forward_shapes() {
        let mut rng = SeededRng::new(0);
        let lin = Linear::new("fc", 4, 3, true, &mut rng);
        let x = Tensor::zeros(&[2, 4]);
        assert_eq!(lin.forward(&x).unwrap().shape(), vec![2, 3]);
    }
}
