//! Flip and random-erasing augmentation.
//!
//! Flips are geometric and shared across all modalities of a tuple (the
//! images are coincidental); random erasing models sensor-local occlusion
//! and is drawn independently per modality.

use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;

use super::dataset::MultimodalSample;
use super::image::ImageBuf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub h_flip_prob: f64,
    pub v_flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, min..max.
    pub erase_area: (f64, f64),
    /// Aspect ratio (h/w) range of the erased box.
    pub erase_aspect: (f64, f64),
    pub erase_fill: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            h_flip_prob: 0.5,
            v_flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.33),
            erase_aspect: (0.3, 3.3),
            erase_fill: 0.0,
        }
    }
}

impl AugmentPolicy {
    /// Identity policy: no flips, no erasing.
    pub fn none() -> Self {
        AugmentPolicy {
            h_flip_prob: 0.0,
            v_flip_prob: 0.0,
            erase_prob: 0.0,
            ..AugmentPolicy::default()
        }
    }
}

pub fn flip_horizontal(img: &mut ImageBuf) {
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width / 2 {
                let a = img.get(c, y, x);
                let b = img.get(c, y, img.width - 1 - x);
                img.set(c, y, x, b);
                img.set(c, y, img.width - 1 - x, a);
            }
        }
    }
}

pub fn flip_vertical(img: &mut ImageBuf) {
    for c in 0..img.channels {
        for y in 0..img.height / 2 {
            for x in 0..img.width {
                let a = img.get(c, y, x);
                let b = img.get(c, img.height - 1 - y, x);
                img.set(c, y, x, b);
                img.set(c, img.height - 1 - y, x, a);
            }
        }
    }
}

fn erase(img: &mut ImageBuf, rng: &mut SeededRng, policy: &AugmentPolicy) {
    let (h, w) = (img.height, img.width);
    for _ in 0..10 {
        let area = rng.uniform(policy.erase_area.0, policy.erase_area.1) * (h * w) as f64;
        let aspect = rng.uniform(policy.erase_aspect.0, policy.erase_aspect.1);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let top = rng.below(h - eh + 1);
        let left = rng.below(w - ew + 1);
        for c in 0..img.channels {
            for y in top..top + eh {
                for x in left..left + ew {
                    img.set(c, y, x, policy.erase_fill);
                }
            }
        }
        return;
    }
}

/// Applies the policy: one flip draw per tuple (same geometry for every
/// modality), independent erasing per modality. Deterministic under `rng`.
pub fn augment(sample: &MultimodalSample, rng: &mut SeededRng, policy: &AugmentPolicy) -> MultimodalSample {
    let mut out = sample.clone();
    let h_flip = policy.h_flip_prob > 0.0 && rng.chance(policy.h_flip_prob);
    let v_flip = policy.v_flip_prob > 0.0 && rng.chance(policy.v_flip_prob);
    for img in &mut out.images {
        if h_flip {
            flip_horizontal(img);
        }
        if v_flip {
            flip_vertical(img);
        }
        if policy.erase_prob > 0.0 && rng.chance(policy.erase_prob) {
            erase(img, rng, policy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_2mod(h: usize, w: usize) -> MultimodalSample {
        let mut rng = SeededRng::new(11);
        let mk = |rng: &mut SeededRng| {
            let pixels = (0..h * w).map(|_| rng.uniform(0.0, 1.0)).collect();
            ImageBuf::from_pixels(1, h, w, pixels).unwrap()
        };
        MultimodalSample {
            id: 1,
            view: 0,
            index: 0,
            images: vec![mk(&mut rng), mk(&mut rng)],
        }
    }

    #[test]
    fn zero_probability_policy_is_identity() {
        let s = sample_2mod(8, 8);
        let mut rng = SeededRng::new(0);
        let out = augment(&s, &mut rng, &AugmentPolicy::none());
        assert_eq!(out, s);
    }

    #[test]
    fn horizontal_flip_is_involution() {
        let s = sample_2mod(8, 6);
        let mut img = s.images[0].clone();
        flip_horizontal(&mut img);
        flip_horizontal(&mut img);
        assert_eq!(img, s.images[0]);
    }

    #[test]
    fn flips_shared_across_modalities() {
        let s = sample_2mod(8, 8);
        let policy = AugmentPolicy {
            h_flip_prob: 1.0,
            v_flip_prob: 0.0,
            erase_prob: 0.0,
            ..AugmentPolicy::default()
        };
        let mut rng = SeededRng::new(3);
        let out = augment(&s, &mut rng, &policy);
        for m in 0..2 {
            let mut expect = s.images[m].clone();
            flip_horizontal(&mut expect);
            assert_eq!(out.images[m], expect);
        }
    }

    #[test]
    fn erased_region_matches_fill_and_bounds() {
        let s = sample_2mod(16, 16);
        let policy = AugmentPolicy {
            h_flip_prob: 0.0,
            v_flip_prob: 0.0,
            erase_prob: 1.0,
            erase_fill: 0.0,
            ..AugmentPolicy::default()
        };
        // The source image has no exact zeros with overwhelming likelihood,
        // so every 0.0 pixel afterwards belongs to the erased box.
        let mut rng = SeededRng::new(5);
        let out = augment(&s, &mut rng, &policy);
        let img = &out.images[0];
        let zeros = img.pixels.iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / img.pixels.len() as f64;
        assert!(zeros > 0, "no erased pixels");
        // Rounded box dims can push the realized area slightly past the
        // configured maximum.
        assert!(frac <= 0.40, "erased fraction {frac}");
        assert!(out.images[0].in_unit_range());
    }

    #[test]
    fn deterministic_under_seed() {
        let s = sample_2mod(8, 8);
        let policy = AugmentPolicy::default();
        let a = augment(&s, &mut SeededRng::new(9), &policy);
        let b = augment(&s, &mut SeededRng::new(9), &policy);
        assert_eq!(a, b);
    }
}
