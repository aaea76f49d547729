//! Shared patch embedding: non-overlapping P x P patches linearly projected
//! to the embedding width, plus a learned positional embedding.

use crate::data::image::ImageBuf;
use crate::error::{Error, Result};
use crate::numerics::{normal_init, Linear, Parameter, SeededRng, Tensor};

#[derive(Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    /// Learned positional embedding, one row per data token.
    pub pos: Parameter,
    pub patch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchEmbed {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        patch_size: usize,
        embed_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::config(format!(
                "patch_embed: image {height}x{width} not divisible by patch {patch_size}"
            )));
        }
        let n_tokens = (height / patch_size) * (width / patch_size);
        let patch_dim = patch_size * patch_size * channels;
        Ok(PatchEmbed {
            proj: Linear::new("patch.proj", patch_dim, embed_dim, true, rng),
            pos: Parameter::new("patch.pos", normal_init(&[n_tokens, embed_dim], 0.02, rng)),
            patch_size,
            channels,
            height,
            width,
        })
    }

    pub fn n_tokens(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// `[L_d, P^2*C]` patch matrix of an image, channel-major within each
    /// patch, patches in row-major grid order.
    fn patchify(&self, img: &ImageBuf) -> Result<Tensor> {
        if img.channels != self.channels || img.height != self.height || img.width != self.width {
            return Err(Error::data(format!(
                "patch_embed: image {}x{}x{} does not match configured {}x{}x{}",
                img.channels, img.height, img.width, self.channels, self.height, self.width
            )));
        }
        let p = self.patch_size;
        let (gh, gw) = (self.height / p, self.width / p);
        let patch_dim = p * p * self.channels;
        let mut data = Vec::with_capacity(gh * gw * patch_dim);
        for pr in 0..gh {
            for pc in 0..gw {
                for c in 0..self.channels {
                    for py in 0..p {
                        for px in 0..p {
                            data.push(img.get(c, pr * p + py, pc * p + px));
                        }
                    }
                }
            }
        }
        Tensor::from_vec(data, &[gh * gw, patch_dim])
    }

    /// Projects an image to `[L_d, D]` tokens with positions added.
    pub fn forward(&self, img: &ImageBuf) -> Result<Tensor> {
        let patches = self.patchify(img)?;
        self.proj.forward(&patches)?.add(self.pos.tensor())
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.proj.parameters();
        out.push(self.pos.clone());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_matches_grid() {
        let mut rng = SeededRng::new(0);
        let pe = PatchEmbed::new(1, 32, 32, 16, 8, &mut rng).unwrap();
        assert_eq!(pe.n_tokens(), 4);
        let img = ImageBuf::zeros(1, 32, 32);
        assert_eq!(pe.forward(&img).unwrap().shape(), vec![4, 8]);
    }

    #[test]
    fn zero_image_zero_weights_yields_positional() {
        let mut rng = SeededRng::new(0);
        let pe = PatchEmbed::new(1, 16, 16, 8, 4, &mut rng).unwrap();
        pe.proj.weight.tensor().set_data(vec![0.0; 8 * 8 * 4]);
        let img = ImageBuf::zeros(1, 16, 16);
        let out = pe.forward(&img).unwrap();
        assert_eq!(out.data_vec(), pe.pos.tensor().data_vec());
    }

    #[test]
    fn rejects_mismatched_image() {
        let mut rng = SeededRng::new(0);
        let pe = PatchEmbed::new(1, 16, 16, 8, 4, &mut rng).unwrap();
        let img = ImageBuf::zeros(1, 8, 8);
        assert!(pe.forward(&img).is_err());
    }
}
