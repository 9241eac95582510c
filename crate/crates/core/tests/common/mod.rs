#![allow(dead_code)]

use std::path::PathBuf;

use win_denoise::model::{Mode, Model};
use win_denoise::rng::Rng;
use win_denoise::tensor::{Shape, Tensor4};

pub const FD_STEP: f64 = 1e-5;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

/// Entries uniform in `[-1, 1)`.
pub fn random(s: Shape, rng: &mut Rng) -> Tensor4 {
    Tensor4::from_fn(s, |_, _, _, _| rng.uniform_range(-1.0, 1.0)).unwrap()
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + FD_STEP;
            let plus = f(&buf);
            buf[i] = x[i] - FD_STEP;
            let minus = f(&buf);
            buf[i] = x[i];
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `sum(weights * t)`, the scalar used to probe a layer's backward pass.
pub fn probe(t: &Tensor4, weights: &Tensor4) -> f64 {
    t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Relative error of the model's loss gradients against central
/// differences: the larger of the parameter-vector error and the
/// input-gradient error. Perturbations that
/// flip any ReLU are skipped, since the loss has a kink there.
pub fn model_grad_error(model: &Model, y: &Tensor4, x: &Tensor4) -> f64 {
    let (_, grads, fwd) = model.loss_and_grad(y, x).unwrap();
    let base_pattern = fwd.relu_pattern();
    let eval = |m: &Model, y: &Tensor4| -> (f64, bool) {
        let fwd = m.forward(y, Mode::Train).unwrap();
        let target = m.target(y, x).unwrap();
        let (loss, _) = win_denoise::model::half_mse(&fwd.prediction, &target).unwrap();
        (loss.value(), fwd.relu_pattern() == base_pattern)
    };

    // Parameters are compared as one vector: a conv bias feeding batch norm
    // has an exactly zero gradient, so a per-buffer ratio would only compare
    // rounding noise.
    let (mut a_params, mut n_params) = (Vec::new(), Vec::new());
    let buffers: Vec<Vec<f64>> = grads.buffers().iter().map(|b| b.to_vec()).collect();
    for (bi, analytic) in buffers.iter().enumerate() {
        for (i, &a) in analytic.iter().enumerate() {
            let mut values = [0.0; 2];
            let mut smooth = true;
            for (slot, delta) in [FD_STEP, -FD_STEP].into_iter().enumerate() {
                let mut m = model.clone();
                m.params_mut()[bi].1[i] += delta;
                let (l, same) = eval(&m, y);
                values[slot] = l;
                smooth &= same;
            }
            if smooth {
                a_params.push(a);
                n_params.push((values[0] - values[1]) / (2.0 * FD_STEP));
            }
        }
    }
    let worst = rel_error(&a_params, &n_params);

    let (mut a_kept, mut n_kept) = (Vec::new(), Vec::new());
    for i in 0..y.data().len() {
        let mut values = [0.0; 2];
        let mut smooth = true;
        for (slot, delta) in [FD_STEP, -FD_STEP].into_iter().enumerate() {
            let mut yp = y.clone();
            yp.data_mut()[i] += delta;
            let (l, same) = eval(model, &yp);
            values[slot] = l;
            smooth &= same;
        }
        if smooth {
            a_kept.push(grads.input.data()[i]);
            n_kept.push((values[0] - values[1]) / (2.0 * FD_STEP));
        }
    }
    worst.max(rel_error(&a_kept, &n_kept))
}

/// Conv backward against finite differences on a random case of at most
/// 1x2x9x9 input and 4 filters. Returns the worst buffer error.
pub fn conv_grad_error(seed: u64) -> f64 {
    use win_denoise::nn::{conv2d_backward, conv2d_forward, ConvParams};
    let mut rng = Rng::new(seed);
    let c = 1 + rng.below(2) as usize;
    let k = 1 + rng.below(4) as usize;
    let (h, w) = (3 + rng.below(7) as usize, 3 + rng.below(7) as usize);
    let x = random(shape(1, c, h, w), &mut rng);
    let p = ConvParams::new(random(shape(k, c, 3, 3), &mut rng), (0..k).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
        .unwrap();
    let r = random(shape(1, k, h, w), &mut rng);
    let g = conv2d_backward(&x, &p, 1, &r).unwrap();

    let dx = numeric_grad(x.data(), |v| {
        probe(&conv2d_forward(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap(), &p, 1).unwrap(), &r)
    });
    let dw = numeric_grad(p.weights.data(), |v| {
        let q = ConvParams::new(Tensor4::from_vec(p.weights.shape(), v.to_vec()).unwrap(), p.bias.clone()).unwrap();
        probe(&conv2d_forward(&x, &q, 1).unwrap(), &r)
    });
    let db = numeric_grad(&p.bias, |v| {
        let q = ConvParams::new(p.weights.clone(), v.to_vec()).unwrap();
        probe(&conv2d_forward(&x, &q, 1).unwrap(), &r)
    });
    rel_error(g.input.data(), &dx).max(rel_error(g.weights.data(), &dw)).max(rel_error(&g.bias, &db))
}

/// ReLU backward against finite differences; entries within twice the step
/// of the kink are moved away from it first.
pub fn relu_grad_error(seed: u64) -> f64 {
    use win_denoise::nn::{relu_backward, relu_forward};
    let mut rng = Rng::new(seed);
    let x = random(shape(1, 2, 9, 9), &mut rng).map(|v| if v.abs() < 2.0 * FD_STEP { v + 0.1 } else { v });
    let r = random(x.shape(), &mut rng);
    let g = relu_backward(&x, &r).unwrap();
    let dx = numeric_grad(x.data(), |v| probe(&relu_forward(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap()), &r));
    rel_error(g.data(), &dx)
}

/// Train-mode batch norm backward (input, gamma, beta) against finite
/// differences.
pub fn bn_grad_error(seed: u64) -> f64 {
    use win_denoise::nn::{bn_backward, bn_forward_train, BnParams};
    let mut rng = Rng::new(seed);
    let k = 1 + rng.below(4) as usize;
    let x = random(shape(1 + rng.below(2) as usize, k, 4 + rng.below(6) as usize, 4 + rng.below(6) as usize), &mut rng);
    let mut p = BnParams::new(k);
    for c in 0..k {
        p.gamma[c] = rng.uniform_range(0.5, 1.5);
        p.beta[c] = rng.uniform_range(-0.5, 0.5);
    }
    let r = random(x.shape(), &mut rng);
    let out = bn_forward_train(&x, &p).unwrap();
    let g = bn_backward(&out.cache, &p, &r).unwrap();

    let f = |x: &Tensor4, p: &BnParams| probe(&bn_forward_train(x, p).unwrap().y, &r);
    let dx = numeric_grad(x.data(), |v| f(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap(), &p));
    let dg = numeric_grad(&p.gamma, |v| f(&x, &BnParams { gamma: v.to_vec(), ..p.clone() }));
    let db = numeric_grad(&p.beta, |v| f(&x, &BnParams { beta: v.to_vec(), ..p.clone() }));
    rel_error(g.input.data(), &dx).max(rel_error(&g.gamma, &dg)).max(rel_error(&g.beta, &db))
}

/// Skip connection backward against finite differences for both operands.
pub fn skip_grad_error(seed: u64) -> f64 {
    use win_denoise::nn::{skip_add, skip_backward};
    let mut rng = Rng::new(seed);
    let a = random(shape(1, 2, 9, 9), &mut rng);
    let b = random(a.shape(), &mut rng);
    let r = random(a.shape(), &mut rng);
    let (ga, gb) = skip_backward(&r);
    let da = numeric_grad(a.data(), |v| probe(&skip_add(&Tensor4::from_vec(a.shape(), v.to_vec()).unwrap(), &b).unwrap(), &r));
    let db = numeric_grad(b.data(), |v| probe(&skip_add(&a, &Tensor4::from_vec(b.shape(), v.to_vec()).unwrap()).unwrap(), &r));
    rel_error(ga.data(), &da).max(rel_error(gb.data(), &db))
}

/// Full 3-layer model with 4 filters of size 3 on a 1x2x9x9 input. The
/// variant cycles through plain, skip, skip with BN and residual target.
pub fn full_model_grad_error(seed: u64) -> f64 {
    use win_denoise::model::{ModelSpec, TargetMode};
    let mut spec = match seed % 4 {
        0 => ModelSpec::plain(3, 4, 3, false, false),
        1 => ModelSpec::plain(3, 4, 3, false, true),
        2 => ModelSpec::plain(3, 4, 3, true, true),
        _ => {
            let mut s = ModelSpec::plain(3, 4, 3, false, false);
            s.target_mode = TargetMode::ResidualTarget;
            s
        }
    };
    spec.channels = 2;
    spec.layers.last_mut().unwrap().filters = 2;
    let model = Model::build(spec, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xabcd);
    let x = Tensor4::from_fn(shape(1, 2, 9, 9), |_, _, _, _| rng.uniform()).unwrap();
    let y = Tensor4::from_fn(x.shape(), |n, c, h, w| x.get(n, c, h, w) + 0.2 * rng.gaussian()).unwrap();
    model_grad_error(&model, &y, &x)
}
