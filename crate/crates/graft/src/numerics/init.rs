//! Seeded weight initialization.

use super::rng::SeededRng;
use super::tensor::Tensor;

/// Xavier/Glorot uniform: U[-a, a] with a = sqrt(6 / (fan_in + fan_out)).
///
/// For matrices, fan_in is the product of all leading dims and fan_out the
/// trailing dim; a 1-D shape uses its single dim for both fans.
pub fn xavier_init(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    assert!(!shape.is_empty(), "xavier_init: empty shape");
    let (fan_in, fan_out) = if shape.len() == 1 {
        (shape[0], shape[0])
    } else {
        (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1])
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform(-a, a)).collect();
    Tensor::from_vec(data, shape).expect("shape/len consistent")
}

/// Gaussian init, used for positional embeddings.
pub fn normal_init(shape: &[usize], sd: f64, rng: &mut SeededRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.normal(0.0, sd)).collect();
    Tensor::from_vec(data, shape).expect("shape/len consistent")
}

/// The Xavier bound for a shape, exposed for tests.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = if shape.len() == 1 {
        (shape[0], shape[0])
    } else {
        (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1])
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_within_bound() {
        let mut rng = SeededRng::new(1);
        let t = xavier_init(&[8, 16], &mut rng);
        let a = xavier_bound(&[8, 16]);
        assert!(t.map_data(|d| d.iter().all(|v| v.abs() <= a)));
    }

    #[test]
    fn deterministic_under_seed() {
        let mut r1 = SeededRng::new(9);
        let mut r2 = SeededRng::new(9);
        let a = xavier_init(&[4, 4], &mut r1);
        let b = xavier_init(&[4, 4], &mut r2);
        assert_eq!(a.data_vec(), b.data_vec());
    }

    #[test]
    fn empirical_variance_matches_analytic() {
        // Var(U[-a, a]) = a^2 / 3 = 2 / (fan_in + fan_out).
        let mut rng = SeededRng::new(123);
        let t = xavier_init(&[500, 200], &mut rng); // 1e5 samples
        let data = t.data_vec();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        let expected = 2.0 / (500.0 + 200.0);
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} vs expected {expected}"
        );
    }
}
