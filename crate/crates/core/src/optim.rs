//! SGD with momentum, L2 weight decay, global-norm gradient clipping and a
//! step learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{Grads, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Threshold on the global L2 norm of all gradients.
    pub clip: f64,
    /// Epochs between learning-rate drops.
    pub step_size: usize,
    /// Learning-rate multiplier applied every `step_size` epochs.
    pub gamma: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip: 0.1,
            step_size: 30,
            gamma: 0.1,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return bad("optim.lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("optim.momentum must be in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("optim.weight_decay must be >= 0");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("optim.clip must be > 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("optim.gamma must be in (0, 1]");
        }
        if self.step_size == 0 {
            return bad("optim.step_size must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("optim.batch_size must be >= 1");
        }
        Ok(())
    }
}

/// `base_lr * gamma^floor(epoch / step_size)`.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> f64 {
    let drops = (epoch / cfg.step_size.max(1)) as i32;
    cfg.base_lr * cfg.gamma.powi(drops)
}

/// Rescales every gradient by `clip / norm` when the global L2 norm exceeds
/// `clip`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Grads, clip: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip {
        let s = clip / norm;
        for buf in grads.buffers_mut() {
            for v in buf.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Velocity buffers and the schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Vec<f64>>,
    pub epoch: usize,
    pub lr: f64,
}

impl OptimState {
    pub fn new(model: &mut Model, cfg: &OptimConfig) -> Self {
        let velocity = model.params_mut().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        OptimState { velocity, epoch: 0, lr: lr_at(0, cfg) }
    }

    pub fn set_epoch(&mut self, epoch: usize, cfg: &OptimConfig) {
        self.epoch = epoch;
        self.lr = lr_at(epoch, cfg);
    }
}

/// One update with the current `state.lr`:
/// `v = momentum * v + (g + decay * p)`, `p -= lr * v`.
/// Weight decay applies to conv weights and BN scale/shift, not to biases.
pub fn sgd_step(model: &mut Model, grads: &Grads, state: &mut OptimState, cfg: &OptimConfig) -> Result<()> {
    let lr = state.lr;
    let params = model.params_mut();
    let gbufs = grads.buffers();
    if params.len() != gbufs.len() || params.len() != state.velocity.len() {
        return Err(Error::InvalidSpec("gradient/parameter layout mismatch".into()));
    }
    for (((kind, p), g), v) in params.into_iter().zip(gbufs).zip(state.velocity.iter_mut()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::InvalidSpec("gradient/parameter length mismatch".into()));
        }
        let decay = if kind.decays() { cfg.weight_decay } else { 0.0 };
        for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + (gi + decay * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerGrads, ModelSpec};
    use crate::nn::RunningStats;
    use crate::tensor::{Shape, Tensor4};

    fn cfg(lr: f64, momentum: f64, decay: f64) -> OptimConfig {
        OptimConfig { base_lr: lr, momentum, weight_decay: decay, ..OptimConfig::default() }
    }

    /// Two-layer 1x1 model: exactly one weight and one bias per layer.
    fn scalar_model(w: f64) -> Model {
        let mut spec = ModelSpec::plain(2, 1, 1, false, false);
        spec.layers[0].relu = false;
        let mut m = Model::zeroed(spec).unwrap();
        for l in m.layers_mut() {
            l.conv.weights.data_mut()[0] = w;
        }
        m
    }

    fn grads_like(model: &mut Model, value: f64) -> Grads {
        let layers = model
            .layers()
            .iter()
            .map(|l| LayerGrads {
                weights: Tensor4::filled(l.conv.weights.shape(), value).unwrap(),
                bias: vec![value; l.conv.bias.len()],
                gamma: l.bn.as_ref().map(|b| vec![value; b.channels()]),
                beta: l.bn.as_ref().map(|b| vec![value; b.channels()]),
            })
            .collect();
        Grads { layers, input: Tensor4::zeros(Shape::new(1, 1, 1, 1).unwrap()).unwrap() }
    }

    #[test]
    fn schedule() {
        let c = OptimConfig { step_size: 20, ..OptimConfig::default() };
        assert_eq!(lr_at(0, &OptimConfig::default()), 0.1);
        assert_eq!(lr_at(19, &c), 0.1);
        assert!((lr_at(20, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(45, &c) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let mut m = scalar_model(0.0);
        let mut g = grads_like(&mut m, 0.0);
        g.layers[0].weights.data_mut()[0] = 3.0;
        g.layers[0].bias[0] = 4.0;
        let before = clip_gradients(&mut g, 0.1);
        assert_eq!(before, 5.0);
        assert!((g.layers[0].weights.data()[0] - 0.06).abs() < 1e-15);
        assert!((g.layers[0].bias[0] - 0.08).abs() < 1e-15);

        let mut small = grads_like(&mut m, 0.0);
        small.layers[0].bias[0] = 0.05;
        let copy = small.clone();
        clip_gradients(&mut small, 0.1);
        assert_eq!(small, copy);

        let mut zero = grads_like(&mut m, 0.0);
        clip_gradients(&mut zero, 0.1);
        assert_eq!(zero.global_norm(), 0.0);
    }

    #[test]
    fn plain_sgd_step() {
        let mut m = scalar_model(1.0);
        let c = cfg(1.0, 0.0, 0.0);
        let mut st = OptimState::new(&mut m, &c);
        let g = grads_like(&mut m, 0.25);
        sgd_step(&mut m, &g, &mut st, &c).unwrap();
        assert_eq!(m.layers()[0].conv.weights.data()[0], 0.75);
        assert_eq!(m.layers()[0].conv.bias[0], -0.25);
    }

    #[test]
    fn momentum_two_steps() {
        let (eta, g) = (0.05, 0.3);
        let mut m = scalar_model(1.0);
        let c = cfg(eta, 0.9, 0.0);
        let mut st = OptimState::new(&mut m, &c);
        let grads = grads_like(&mut m, g);
        sgd_step(&mut m, &grads, &mut st, &c).unwrap();
        let after_one = m.layers()[0].conv.weights.data()[0];
        sgd_step(&mut m, &grads, &mut st, &c).unwrap();
        let after_two = m.layers()[0].conv.weights.data()[0];
        // v1 = g, v2 = 0.9 g + g
        assert!((1.0 - after_one - eta * g).abs() < 1e-15);
        assert!((after_one - after_two - eta * 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_biases() {
        let mut m = scalar_model(2.0);
        m.layers_mut()[0].conv.bias[0] = 2.0;
        let c = cfg(0.5, 0.0, 0.1);
        let mut st = OptimState::new(&mut m, &c);
        let g = grads_like(&mut m, 0.0);
        sgd_step(&mut m, &g, &mut st, &c).unwrap();
        assert!((m.layers()[0].conv.weights.data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
        assert_eq!(m.layers()[0].conv.bias[0], 2.0);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut m = Model::build(ModelSpec::plain(3, 2, 3, true, true), 3).unwrap();
        let before = m.clone();
        let c = cfg(0.1, 0.9, 0.0);
        let mut st = OptimState::new(&mut m, &c);
        let g = grads_like(&mut m, 0.0);
        sgd_step(&mut m, &g, &mut st, &c).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn running_stats_untouched() {
        let mut m = Model::build(ModelSpec::plain(3, 2, 3, true, true), 3).unwrap();
        for l in m.layers_mut() {
            l.bn.as_mut().unwrap().running = Some(RunningStats { mean: vec![0.3; l.spec.filters], var: vec![1.7; l.spec.filters] });
        }
        let bits = |m: &Model| -> Vec<u64> {
            m.layers()
                .iter()
                .flat_map(|l| {
                    let r = l.bn.as_ref().unwrap().running.as_ref().unwrap();
                    r.mean.iter().chain(&r.var).map(|v| v.to_bits()).collect::<Vec<_>>()
                })
                .collect()
        };
        let before = bits(&m);
        let c = OptimConfig::default();
        let mut st = OptimState::new(&mut m, &c);
        let g = grads_like(&mut m, 0.7);
        sgd_step(&mut m, &g, &mut st, &c).unwrap();
        assert_eq!(bits(&m), before);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(cfg(0.0, 0.9, 0.0).validate().is_err());
        assert!(cfg(0.1, 1.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.5, -1.0).validate().is_err());
        assert!(OptimConfig { clip: 0.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { gamma: 1.5, ..OptimConfig::default() }.validate().is_err());
    }
}
