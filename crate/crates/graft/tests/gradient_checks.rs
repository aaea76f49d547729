//! Finite-difference gradient checks for every differentiable op, the three
//! losses, and the full model with respect to the fusion token. The oracle
//! (central differences over the forward path) lives in
//! `numerics::gradcheck` and never touches any backward implementation.

use graft::data::ImageBuf;
use graft::losses::{
    center_loss, cross_entropy_label_smoothing, soft_margin_triplet, total_loss, CenterMetric,
    Centroids, LossTerms, LossWeights,
};
use graft::model::{ForwardOpts, GraftConfig, GraftModel};
use graft::numerics::gradcheck::check;
use graft::numerics::{
    layer_norm, BatchNorm1d, Linear, MultiHeadAttention, Parameter, SeededRng, Tensor,
};

const LINEAR_TOL: f64 = 1e-5;
const NONLINEAR_TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    Tensor::from_vec(data, shape).unwrap().requires_grad(true)
}

#[test]
fn matmul_gradients() {
    let mut rng = SeededRng::new(101);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4, 2], &mut rng);
    let err = check(&[a.clone(), b.clone()], || {
        a.matmul(&b).unwrap().sum_all()
    });
    assert!(err < LINEAR_TOL, "matmul rel err {err}");
}

#[test]
fn softmax_gradients() {
    let mut rng = SeededRng::new(102);
    let x = randn(&[5], &mut rng);
    // A non-uniform weighting makes the check sensitive to the full
    // Jacobian, not just the (identically zero) row sums.
    let wdata = Tensor::from_vec(vec![0.9, -0.4, 0.2, 1.3, -0.7], &[5]).unwrap();
    let err = check(&[x.clone()], || {
        x.softmax(0).unwrap().mul(&wdata).unwrap().sum_all()
    });
    assert!(err < LINEAR_TOL, "softmax rel err {err}");
}

#[test]
fn log_softmax_gradients() {
    let mut rng = SeededRng::new(103);
    let x = randn(&[2, 4], &mut rng);
    let w = randn(&[2, 4], &mut rng).requires_grad(false);
    let err = check(&[x.clone()], || {
        x.log_softmax(1).unwrap().mul(&w).unwrap().sum_all()
    });
    assert!(err < NONLINEAR_TOL, "log_softmax rel err {err}");
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = SeededRng::new(104);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    let row = randn(&[4], &mut rng);
    for (name, f, tol) in [
        (
            "add",
            Box::new(|| a.add(&b).unwrap().sum_all()) as Box<dyn Fn() -> Tensor>,
            LINEAR_TOL,
        ),
        ("sub", Box::new(|| a.sub(&b).unwrap().sum_all()), LINEAR_TOL),
        ("mul", Box::new(|| a.mul(&b).unwrap().sum_all()), NONLINEAR_TOL),
        (
            "broadcast-add",
            Box::new(|| a.add(&row).unwrap().sum_all()),
            LINEAR_TOL,
        ),
    ] {
        let err = check(&[a.clone(), b.clone(), row.clone()], f);
        assert!(err < tol, "{name} rel err {err}");
    }
}

#[test]
fn div_gradients() {
    let mut rng = SeededRng::new(105);
    let a = randn(&[6], &mut rng);
    let raw: Vec<f64> = (0..6).map(|_| rng.uniform(0.8, 1.8)).collect();
    let b = Tensor::from_vec(raw, &[6]).unwrap().requires_grad(true);
    let err = check(&[a.clone(), b.clone()], || a.div(&b).unwrap().sum_all());
    assert!(err < NONLINEAR_TOL, "div rel err {err}");
}

#[test]
fn concat_split_mean_gradients() {
    let mut rng = SeededRng::new(106);
    let a = randn(&[2, 3], &mut rng);
    let b = randn(&[4, 3], &mut rng);
    let err = check(&[a.clone(), b.clone()], || {
        let joined = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
        let parts = joined.split(0, &[3, 3]).unwrap();
        // Weight the halves differently so concat/split boundaries matter.
        parts[0].scale(2.0).sum_all().add(&parts[1].sum_all()).unwrap()
    });
    assert!(err < LINEAR_TOL, "concat/split rel err {err}");

    let c = randn(&[3, 5], &mut rng);
    let err = check(&[c.clone()], || c.mean_axis(1).unwrap().sum_all());
    assert!(err < LINEAR_TOL, "mean rel err {err}");
    let err = check(&[c.clone()], || c.mean_all());
    assert!(err < LINEAR_TOL, "mean_all rel err {err}");
}

#[test]
fn mean_of_gradients() {
    let mut rng = SeededRng::new(107);
    let parts: Vec<Tensor> = (0..3).map(|_| randn(&[2, 2], &mut rng)).collect();
    let weight = randn(&[2, 2], &mut rng).requires_grad(false);
    let err = check(&parts.clone(), || {
        Tensor::mean_of(&parts).unwrap().mul(&weight).unwrap().sum_all()
    });
    assert!(err < LINEAR_TOL, "mean_of rel err {err}");
}

#[test]
fn gelu_softplus_sqrt_gradients() {
    let mut rng = SeededRng::new(108);
    let x = randn(&[8], &mut rng);
    let err = check(&[x.clone()], || x.gelu().sum_all());
    assert!(err < NONLINEAR_TOL, "gelu rel err {err}");
    let err = check(&[x.clone()], || x.softplus().sum_all());
    assert!(err < NONLINEAR_TOL, "softplus rel err {err}");

    let pos: Vec<f64> = (0..8).map(|_| rng.uniform(0.5, 2.0)).collect();
    let p = Tensor::from_vec(pos, &[8]).unwrap().requires_grad(true);
    let err = check(&[p.clone()], || p.sqrt().sum_all());
    assert!(err < NONLINEAR_TOL, "sqrt rel err {err}");
}

#[test]
fn index_rows_gradients() {
    let mut rng = SeededRng::new(109);
    let table = randn(&[5, 3], &mut rng);
    let err = check(&[table.clone()], || {
        table.index_rows(&[4, 0, 4, 2]).unwrap().sum_all()
    });
    assert!(err < LINEAR_TOL, "index_rows rel err {err}");
}

#[test]
fn dropout_gradients_with_fixed_stream() {
    let mut rng = SeededRng::new(110);
    let x = randn(&[16], &mut rng);
    // A fresh generator per forward call keeps the mask identical across
    // the finite-difference evaluations.
    let err = check(&[x.clone()], || {
        let mut mask_rng = SeededRng::new(77);
        x.dropout(0.4, &mut mask_rng).sum_all()
    });
    assert!(err < LINEAR_TOL, "dropout rel err {err}");
}

#[test]
fn linear_layer_gradients() {
    let mut rng = SeededRng::new(111);
    let lin = Linear::new("fc", 4, 3, true, &mut rng);
    let x = randn(&[2, 4], &mut rng);
    let leaves = vec![
        x.clone(),
        lin.weight.tensor().clone(),
        lin.bias.as_ref().unwrap().tensor().clone(),
    ];
    let err = check(&leaves, || lin.forward(&x).unwrap().sum_all());
    assert!(err < LINEAR_TOL, "linear rel err {err}");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = SeededRng::new(112);
    let x = randn(&[3, 6], &mut rng);
    let gain = Parameter::new("ln.g", randn(&[6], &mut rng));
    let bias = Parameter::new("ln.b", randn(&[6], &mut rng));
    let leaves = vec![x.clone(), gain.tensor().clone(), bias.tensor().clone()];
    let err = check(&leaves, || {
        layer_norm(&x, &gain, &bias, 1e-5).unwrap().sum_all()
    });
    assert!(err < NONLINEAR_TOL, "layer_norm rel err {err}");
}

#[test]
fn batch_norm_train_gradients() {
    let mut rng = SeededRng::new(113);
    let bn = BatchNorm1d::new("bn", 4);
    bn.gain.tensor().set_data((0..4).map(|i| 0.5 + 0.3 * i as f64).collect());
    let x = randn(&[5, 4], &mut rng);
    let w = randn(&[5, 4], &mut rng).requires_grad(false);
    let leaves = vec![x.clone(), bn.gain.tensor().clone()];
    let err = check(&leaves, || {
        bn.forward(&x, true).unwrap().mul(&w).unwrap().sum_all()
    });
    assert!(err < NONLINEAR_TOL, "batch_norm rel err {err}");
}

#[test]
fn attention_gradients_wrt_query_weights() {
    let mut rng = SeededRng::new(114);
    let mha = MultiHeadAttention::new("attn", 8, 2, &mut rng).unwrap();
    let x = randn(&[4, 8], &mut rng).requires_grad(false);
    let leaves = vec![
        mha.wq.weight.tensor().clone(),
        mha.wk.weight.tensor().clone(),
        mha.wv.weight.tensor().clone(),
    ];
    let err = check(&leaves, || mha.forward(&x).unwrap().sum_all());
    assert!(err < NONLINEAR_TOL, "attention rel err {err}");
}

#[test]
fn triplet_loss_gradients() {
    let mut rng = SeededRng::new(115);
    let fa = randn(&[3, 4], &mut rng);
    let fp = randn(&[3, 4], &mut rng);
    let fnn = randn(&[3, 4], &mut rng);
    let err = check(&[fa.clone(), fp.clone(), fnn.clone()], || {
        soft_margin_triplet(&fa, &fp, &fnn).unwrap()
    });
    assert!(err < NONLINEAR_TOL, "triplet rel err {err}");
}

#[test]
fn center_loss_gradients() {
    let mut rng = SeededRng::new(116);
    let mut crng = SeededRng::new(1160);
    let centroids = Centroids::new(4, 3, &mut crng);
    let f = randn(&[3, 3], &mut rng);
    let labels = [0usize, 2, 2];
    let leaves = vec![f.clone(), centroids.table.tensor().clone()];
    let err = check(&leaves, || {
        center_loss(&f, &labels, &centroids, CenterMetric::Euclidean).unwrap()
    });
    assert!(err < NONLINEAR_TOL, "center (euclidean) rel err {err}");
    let err = check(&leaves, || {
        center_loss(&f, &labels, &centroids, CenterMetric::Cosine).unwrap()
    });
    assert!(err < NONLINEAR_TOL, "center (cosine) rel err {err}");
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = SeededRng::new(117);
    let logits = randn(&[4, 5], &mut rng);
    let labels = [1usize, 0, 4, 2];
    let err = check(&[logits.clone()], || {
        cross_entropy_label_smoothing(&logits, &labels, 0.1).unwrap()
    });
    assert!(err < NONLINEAR_TOL, "cross_entropy rel err {err}");
}

/// End-to-end check: d(total loss)/d(fusion token) on a tiny config.
#[test]
fn full_model_fusion_token_gradients() {
    let cfg = GraftConfig {
        n_modalities: 2,
        channels: 1,
        height: 16,
        width: 16,
        patch_size: 8,
        embed_dim: 8,
        backbone_depth: 1,
        backbone_heads: 2,
        encoder_heads: 2,
        n_classes: 2,
        ..GraftConfig::default()
    };
    let mut rng = SeededRng::new(118);
    let model = GraftModel::new(&cfg, &mut rng).unwrap();
    let centroids = Centroids::new(2, cfg.embed_width(), &mut rng);

    // Batch of 2 triplets -> 6 aligned samples, random pixels.
    let images: Vec<Vec<ImageBuf>> = (0..2)
        .map(|_| {
            (0..6)
                .map(|_| {
                    let pixels = (0..16 * 16).map(|_| rng.uniform(0.0, 1.0)).collect();
                    ImageBuf::from_pixels(1, 16, 16, pixels).unwrap()
                })
                .collect()
        })
        .collect();
    let batch: Vec<Vec<&ImageBuf>> = images.iter().map(|m| m.iter().collect()).collect();
    let labels = [0usize, 1, 0, 1, 1, 0];

    let token = model.fusion_token().unwrap().tensor().clone();
    let weights = LossWeights {
        alpha: 0.5,
        beta: 0.0005,
        gamma: 0.5,
    };
    let err = check(&[token], || {
        let out = model.forward(&batch, &mut ForwardOpts::train()).unwrap();
        let parts = out.embed.split(0, &[2, 2, 2]).unwrap();
        let triplet = soft_margin_triplet(&parts[0], &parts[1], &parts[2]).unwrap();
        let center = center_loss(&parts[0], &labels[..2], &centroids, CenterMetric::Euclidean).unwrap();
        let ce = cross_entropy_label_smoothing(&out.logits, &labels, 0.1).unwrap();
        let terms = LossTerms {
            triplet: Some(triplet),
            center: Some(center),
            ce: Some(ce),
        };
        total_loss(&terms, &weights).unwrap().0
    });
    assert!(err < 1e-3, "full-model fusion-token rel err {err}");
}
