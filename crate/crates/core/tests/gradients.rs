mod common;

use common::*;

const TOL: f64 = 1e-5;

fn check(name: &str, f: fn(u64) -> f64, tol: f64) {
    for seed in 0..20 {
        let err = f(seed);
        assert!(err < tol, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn conv_matches_finite_differences() {
    // Conv is linear in each argument, so a tighter bound holds.
    check("conv", conv_grad_error, 1e-6);
}

#[test]
fn relu_matches_finite_differences() {
    check("relu", relu_grad_error, TOL);
}

#[test]
fn batchnorm_matches_finite_differences() {
    check("batchnorm", bn_grad_error, TOL);
}

#[test]
fn skip_matches_finite_differences() {
    check("skip", skip_grad_error, TOL);
}

#[test]
fn full_model_matches_finite_differences() {
    check("model", full_model_grad_error, TOL);
}

#[test]
fn single_channel_tiny_model_matches_finite_differences() {
    use win_denoise::model::{Model, ModelSpec};
    use win_denoise::rng::Rng;
    use win_denoise::tensor::Tensor4;
    let model = Model::build(ModelSpec::plain(3, 2, 3, false, true), 11).unwrap();
    let mut rng = Rng::new(5);
    let x = Tensor4::from_fn(shape(1, 1, 9, 9), |_, _, _, _| rng.uniform()).unwrap();
    let y = x.map(|v| v + 0.1);
    let err = model_grad_error(&model, &y, &x);
    assert!(err < TOL, "{err:e}");
}

#[test]
fn bias_feeding_batchnorm_has_zero_gradient() {
    use win_denoise::model::{Model, ModelSpec};
    use win_denoise::rng::Rng;
    use win_denoise::tensor::Tensor4;
    let model = Model::build(ModelSpec::plain(3, 4, 3, true, true), 3).unwrap();
    let mut rng = Rng::new(9);
    let x = Tensor4::from_fn(shape(2, 1, 9, 9), |_, _, _, _| rng.uniform()).unwrap();
    let y = x.map(|v| v + 0.1 * (v * 40.0).sin());
    let (_, grads, _) = model.loss_and_grad(&y, &x).unwrap();
    for l in &grads.layers {
        assert!(l.bias.iter().all(|g| g.abs() < 1e-12), "{:?}", l.bias);
        assert!(l.beta.as_ref().unwrap().iter().any(|g| g.abs() > 1e-6));
    }
}
