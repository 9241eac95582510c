//! WIN network assembly: layer specs, presets, forward/backward through the
//! whole stack, and the half mean-squared-error training loss.
//!
//! A network is a plain chain of `Conv -> [BN] -> [ReLU]` layers with no
//! pooling or fully connected layers, every convolution padded so the
//! spatial size never changes. An optional skip connection adds the noisy
//! input to the network output. Three training targets are supported:
//!
//! * `direct`: the prediction is compared with the clean image.
//! * `residual_skip`: the skip connection is on, so the network learns the
//!   correction `R(y) = x - y` and the prediction is `y + R(y)`.
//! * `residual_target`: the network predicts the noise `y - x` itself and the
//!   clean estimate is `y - prediction`.

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::nn::{
    bn_backward, bn_forward_infer, bn_forward_train, conv2d_backward, conv2d_forward, relu_backward, relu_forward,
    BnCache, BnParams, ConvParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    Direct,
    ResidualSkip,
    ResidualTarget,
}

impl TargetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::Direct => "direct",
            TargetMode::ResidualSkip => "residual_skip",
            TargetMode::ResidualTarget => "residual_target",
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(TargetMode::Direct),
            "residual_skip" => Ok(TargetMode::ResidualSkip),
            "residual_target" => Ok(TargetMode::ResidualTarget),
            other => Err(Error::Config(format!("unknown target mode `{other}`"))),
        }
    }
}

/// One `Conv -> [BN] -> [ReLU]` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub bn: bool,
    pub relu: bool,
}

impl LayerSpec {
    pub fn new(filters: usize, kernel: usize, bn: bool, relu: bool) -> Self {
        LayerSpec { filters, kernel, bn, relu }
    }
}

impl fmt::Display for LayerSpec {
    /// `KxF` followed by `+bn` / `+relu` flags, e.g. `128x7+bn+relu`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.filters, self.kernel)?;
        if self.bn {
            f.write_str("+bn")?;
        }
        if self.relu {
            f.write_str("+relu")?;
        }
        Ok(())
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let dims = parts.next().unwrap_or_default();
        let (k, f) = dims
            .split_once('x')
            .ok_or_else(|| Error::Config(format!("layer `{s}` should look like KxF[+bn][+relu]")))?;
        let parse = |v: &str| {
            v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad number `{v}` in layer `{s}`")))
        };
        let mut layer = LayerSpec::new(parse(k)?, parse(f)?, false, false);
        for flag in parts {
            match flag.trim() {
                "bn" => layer.bn = true,
                "relu" => layer.relu = true,
                other => return Err(Error::Config(format!("unknown layer flag `{other}`"))),
            }
        }
        Ok(layer)
    }
}

/// Declarative description of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Image channels (1 for grayscale). The last layer must produce this many.
    pub channels: usize,
    pub layers: Vec<LayerSpec>,
    pub skip: bool,
    pub target_mode: TargetMode,
}

impl ModelSpec {
    /// `depth` layers of `width` filters of size `kernel`, ReLU on all but
    /// the last layer, which maps back to one channel.
    pub fn plain(depth: usize, width: usize, kernel: usize, bn: bool, skip: bool) -> Self {
        let mut layers: Vec<LayerSpec> =
            (0..depth.saturating_sub(1)).map(|_| LayerSpec::new(width, kernel, bn, true)).collect();
        layers.push(LayerSpec::new(1, kernel, bn, false));
        ModelSpec {
            channels: 1,
            layers,
            skip,
            target_mode: if skip { TargetMode::ResidualSkip } else { TargetMode::Direct },
        }
    }

    /// WIN5: four 128-filter 7x7 layers and a single-filter 7x7 output layer.
    pub fn win5() -> Self {
        Self::plain(5, 128, 7, false, false)
    }

    /// WIN5 with the input-to-output skip connection.
    pub fn win5_r() -> Self {
        Self::plain(5, 128, 7, false, true)
    }

    /// WIN5-R with batch normalization after every convolution.
    pub fn win5_rb() -> Self {
        Self::plain(5, 128, 7, true, true)
    }

    /// Tapered variant: two 128-filter layers, two 64-filter layers, one
    /// output layer, all 7x7, with BN and skip as in WIN5-RB.
    pub fn win5_tapered() -> Self {
        let mut spec = Self::win5_rb();
        for layer in &mut spec.layers[2..4] {
            layer.filters = 64;
        }
        spec
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "win5" => Ok(Self::win5()),
            "win5_r" | "win5-r" => Ok(Self::win5_r()),
            "win5_rb" | "win5-rb" => Ok(Self::win5_rb()),
            "win5_tapered" | "win5-tapered" => Ok(Self::win5_tapered()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.channels == 0 {
            return bad("image channels must be at least 1".into());
        }
        if self.layers.len() < 2 {
            return bad(format!("need at least 2 layers, got {}", self.layers.len()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.filters == 0 {
                return bad(format!("layer {i} has zero filters"));
            }
            if layer.kernel % 2 == 0 {
                return bad(format!("layer {i} kernel size {} is not odd", layer.kernel));
            }
        }
        let last = self.layers.last().expect("checked non-empty");
        if last.filters != self.channels {
            return bad(format!("last layer has {} filters but images have {} channels", last.filters, self.channels));
        }
        if last.relu {
            return bad("last layer must not have a ReLU".into());
        }
        if self.target_mode == TargetMode::ResidualSkip && !self.skip {
            return bad("residual_skip target mode requires the skip connection".into());
        }
        Ok(())
    }

    /// Learnable values: conv weights and biases plus BN scale and shift.
    pub fn param_count(&self) -> usize {
        let mut in_ch = self.channels;
        let mut total = 0;
        for layer in &self.layers {
            total += layer.filters * in_ch * layer.kernel * layer.kernel + layer.filters;
            if layer.bn {
                total += 2 * layer.filters;
            }
            in_ch = layer.filters;
        }
        total
    }

    pub fn has_bn(&self) -> bool {
        self.layers.iter().any(|l| l.bn)
    }

    /// Comma-separated layer list, the inverse of [`ModelSpec::parse_layers`].
    pub fn layers_string(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }
}

/// Parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub conv: ConvParams,
    pub bn: Option<BnParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Values saved during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Tensor4,
    bn: Option<BnCache>,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    /// Value entering the ReLU (post-BN), kept only when the layer has one.
    pre_relu: Option<Tensor4>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub prediction: Tensor4,
    caches: Vec<LayerCache>,
}

impl Forward {
    /// Sign pattern of every ReLU input. Finite-difference checks use this to
    /// discard perturbations that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.caches
            .iter()
            .filter_map(|c| c.pre_relu.as_ref())
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Kind of a learnable buffer, used by the optimizer to decide on decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    pub fn decays(&self) -> bool {
        !matches!(self, ParamKind::Bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Gradients for every learnable buffer, parallel to the model layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
    /// Gradient of the loss with respect to the noisy input.
    pub input: Tensor4,
}

impl Grads {
    /// Buffers in the same order as [`Model::params_mut`].
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weights.data());
            out.push(&l.bias);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.data_mut());
            out.push(&mut l.bias);
            if let (Some(g), Some(b)) = (&mut l.gamma, &mut l.beta) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.buffers().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Half mean-squared error: `sum_i mean_pixels((pred_i - target_i)^2) / (2N)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Loss(pub f64);

impl Loss {
    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Loss between `prediction` and `target` and its gradient with respect to
/// the prediction.
pub fn half_mse(prediction: &Tensor4, target: &Tensor4) -> Result<(Loss, Tensor4)> {
    let diff = prediction.sub(target)?;
    let s = diff.shape();
    let denom = (s.n * s.item_len()) as f64;
    let loss = diff.sum_sq() / (2.0 * denom);
    Ok((Loss(loss), diff.scale(1.0 / denom)))
}

impl Model {
    /// Builds a model with He-normal conv weights seeded from `seed`, zero
    /// biases, and BN layers at `gamma = 1`, `beta = 0`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Self::assemble(spec, |k, c, f| ConvParams::he_normal(k, c, f, &mut rng))
    }

    /// Same layout as [`Model::build`] but every weight and bias is zero.
    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        Self::assemble(spec, ConvParams::zeros)
    }

    fn assemble(spec: ModelSpec, mut conv: impl FnMut(usize, usize, usize) -> Result<ConvParams>) -> Result<Self> {
        spec.validate()?;
        if spec.has_bn() && !spec.skip {
            warn!("batch normalization without the input-to-output skip connection tends to overfit");
        }
        let mut in_ch = spec.channels;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            layers.push(Layer {
                spec: *ls,
                conv: conv(ls.filters, in_ch, ls.kernel)?,
                bn: ls.bn.then(|| BnParams::new(ls.filters)),
            });
            in_ch = ls.filters;
        }
        Ok(Model { spec, layers })
    }

    /// Reassembles a model from stored layers, checking they match `spec`.
    pub fn from_parts(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::InvalidSpec(format!("spec has {} layers, got {}", spec.layers.len(), layers.len())));
        }
        let mut in_ch = spec.channels;
        for (i, (layer, ls)) in layers.iter().zip(&spec.layers).enumerate() {
            let ok = layer.spec == *ls
                && layer.conv.filters() == ls.filters
                && layer.conv.in_channels() == in_ch
                && layer.conv.kernel() == ls.kernel
                && layer.bn.as_ref().map(BnParams::channels) == ls.bn.then_some(ls.filters);
            if !ok {
                return Err(Error::InvalidSpec(format!("layer {i} parameters do not match its spec")));
            }
            in_ch = ls.filters;
        }
        Ok(Model { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Learnable buffers with their kind. BN running statistics are not
    /// included.
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::new();
        for l in &mut self.layers {
            out.push((ParamKind::Weight, l.conv.weights.data_mut()));
            out.push((ParamKind::Bias, &mut l.conv.bias));
            if let Some(bn) = &mut l.bn {
                out.push((ParamKind::Gamma, &mut bn.gamma));
                out.push((ParamKind::Beta, &mut bn.beta));
            }
        }
        out
    }

    /// Gives every BN layer without running statistics a neutral estimate.
    pub fn init_running_stats(&mut self) {
        for bn in self.layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
            bn.init_running();
        }
    }

    fn check_input(&self, y: &Tensor4) -> Result<()> {
        if y.shape().c != self.spec.channels {
            return Err(Error::ChannelMismatch { expected: self.spec.channels, got: y.shape().c });
        }
        Ok(())
    }

    /// Runs the network. In train mode BN uses batch statistics and the
    /// returned caches allow [`Model::backward`]; in infer mode BN uses the
    /// running statistics and no caches are kept.
    pub fn forward(&self, y: &Tensor4, mode: Mode) -> Result<Forward> {
        self.check_input(y)?;
        let mut caches = Vec::new();
        let mut h = y.clone();
        for layer in &self.layers {
            let input = h;
            let mut z = conv2d_forward(&input, &layer.conv, layer.conv.same_pad())?;
            let mut bn_cache = None;
            let mut batch_stats = None;
            if let Some(bn) = &layer.bn {
                z = match mode {
                    Mode::Train => {
                        let out = bn_forward_train(&z, bn)?;
                        bn_cache = Some(out.cache);
                        batch_stats = Some((out.batch_mean, out.batch_var));
                        out.y
                    }
                    Mode::Infer => bn_forward_infer(&z, bn)?,
                };
            }
            let pre_relu = layer.spec.relu.then(|| z.clone());
            h = if layer.spec.relu { relu_forward(&z) } else { z };
            if mode == Mode::Train {
                caches.push(LayerCache { input, bn: bn_cache, batch_stats, pre_relu });
            }
        }
        let prediction = if self.spec.skip { y.add(&h)? } else { h };
        Ok(Forward { prediction, caches })
    }

    /// Training target for noisy input `y` and clean image `x`.
    pub fn target(&self, y: &Tensor4, x: &Tensor4) -> Result<Tensor4> {
        match self.spec.target_mode {
            TargetMode::Direct | TargetMode::ResidualSkip => Ok(x.clone()),
            TargetMode::ResidualTarget => y.sub(x),
        }
    }

    /// Backpropagates `grad_prediction` (dLoss/dPrediction) through a
    /// train-mode forward pass. The input gradient includes the skip path.
    pub fn backward(&self, fwd: &Forward, grad_prediction: &Tensor4) -> Result<Grads> {
        if fwd.caches.len() != self.layers.len() {
            return Err(Error::InvalidSpec("backward needs a train-mode forward pass".into()));
        }
        let mut grad = grad_prediction.clone();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&fwd.caches).rev() {
            if let Some(pre) = &cache.pre_relu {
                grad = relu_backward(pre, &grad)?;
            }
            let (mut gamma, mut beta) = (None, None);
            if let (Some(bn), Some(bc)) = (&layer.bn, &cache.bn) {
                let g = bn_backward(bc, bn, &grad)?;
                gamma = Some(g.gamma);
                beta = Some(g.beta);
                grad = g.input;
            }
            let cg = conv2d_backward(&cache.input, &layer.conv, layer.conv.same_pad(), &grad)?;
            grad = cg.input;
            layer_grads.push(LayerGrads { weights: cg.weights, bias: cg.bias, gamma, beta });
        }
        layer_grads.reverse();
        if self.spec.skip {
            grad.add_assign(grad_prediction)?;
        }
        Ok(Grads { layers: layer_grads, input: grad })
    }

    /// Train-mode loss and gradients for one batch of noisy inputs `y` and
    /// clean images `x`. The forward pass is returned so the caller can fold
    /// its BN batch statistics into the running averages.
    pub fn loss_and_grad(&self, y: &Tensor4, x: &Tensor4) -> Result<(Loss, Grads, Forward)> {
        if y.shape() != x.shape() {
            return Err(Error::ShapeMismatch { left: y.shape().dims(), right: x.shape().dims() });
        }
        let fwd = self.forward(y, Mode::Train)?;
        let target = self.target(y, x)?;
        let (loss, grad_pred) = half_mse(&fwd.prediction, &target)?;
        let mut grads = self.backward(&fwd, &grad_pred)?;
        if self.spec.target_mode == TargetMode::ResidualTarget {
            // The target y - x also moves with y.
            grads.input = grads.input.sub(&grad_pred)?;
        }
        Ok((loss, grads, fwd))
    }

    /// Folds the batch statistics of a train-mode pass into the BN running
    /// averages.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        for (layer, cache) in self.layers.iter_mut().zip(&fwd.caches) {
            if let (Some(bn), Some((mean, var))) = (&mut layer.bn, &cache.batch_stats) {
                bn.update_running(mean, var);
            }
        }
    }

    /// Unclamped clean-image estimate in inference mode.
    pub fn estimate(&self, y: &Tensor4) -> Result<Tensor4> {
        let pred = self.forward(y, Mode::Infer)?.prediction;
        match self.spec.target_mode {
            TargetMode::ResidualTarget => y.sub(&pred),
            _ => Ok(pred),
        }
    }

    /// Clean-image estimate clamped to `[0, 1]`.
    pub fn denoise(&self, y: &Tensor4) -> Result<Tensor4> {
        Ok(self.estimate(y)?.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn tiny(bn: bool, skip: bool) -> ModelSpec {
        ModelSpec::plain(3, 2, 3, bn, skip)
    }

    fn noisy(shape: Shape, seed: u64) -> Tensor4 {
        let mut rng = Rng::new(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.uniform()).unwrap()
    }

    #[test]
    fn win5_parameter_count() {
        let expected = (128 * 49 + 128) + 3 * (128 * 128 * 49 + 128) + (128 * 49 + 1);
        assert_eq!(expected, 2_421_505);
        assert_eq!(ModelSpec::win5().param_count(), expected);
        assert_eq!(ModelSpec::win5_r().param_count(), expected);
        assert_eq!(ModelSpec::win5_rb().param_count(), expected + 2 * (4 * 128 + 1));
    }

    #[test]
    fn presets_have_expected_structure() {
        let s = ModelSpec::win5();
        assert_eq!(s.layers.len(), 5);
        assert!(s.layers[..4].iter().all(|l| l.filters == 128 && l.kernel == 7 && l.relu && !l.bn));
        assert_eq!(s.layers[4], LayerSpec::new(1, 7, false, false));
        assert!(!s.skip);
        assert!(ModelSpec::win5_r().skip);
        assert!(ModelSpec::win5_rb().layers.iter().all(|l| l.bn));
        let t = ModelSpec::win5_tapered();
        let widths: Vec<usize> = t.layers.iter().map(|l| l.filters).collect();
        assert_eq!(widths, vec![128, 128, 64, 64, 1]);
        assert!(ModelSpec::preset("nope").is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny(false, false);
        s.layers[0].kernel = 4;
        assert!(Model::build(s, 0).is_err());
        let mut s = tiny(false, false);
        s.layers.truncate(1);
        s.layers[0] = LayerSpec::new(1, 3, false, false);
        assert!(s.validate().is_err());
        let mut s = tiny(false, false);
        s.layers[2].relu = true;
        assert!(s.validate().is_err());
        let mut s = tiny(false, false);
        s.layers[2].filters = 2;
        assert!(s.validate().is_err());
        let mut s = tiny(false, false);
        s.target_mode = TargetMode::ResidualSkip;
        assert!(s.validate().is_err());
    }

    #[test]
    fn layer_string_round_trip() {
        let spec = ModelSpec::win5_rb();
        let parsed = ModelSpec::parse_layers(&spec.layers_string()).unwrap();
        assert_eq!(parsed, spec.layers);
        assert_eq!("16x3+relu".parse::<LayerSpec>().unwrap(), LayerSpec::new(16, 3, false, true));
        assert!("16by3".parse::<LayerSpec>().is_err());
        assert!("16x3+dropout".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(tiny(true, true), 42).unwrap();
        let b = Model::build(tiny(true, true), 42).unwrap();
        let c = Model::build(tiny(true, true), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn win5_preserves_patch_shape() {
        let model = Model::build(ModelSpec::win5(), 1).unwrap();
        let y = noisy(Shape::new(1, 1, 41, 41).unwrap(), 2);
        let out = model.forward(&y, Mode::Infer).unwrap();
        assert_eq!(out.prediction.shape(), y.shape());
    }

    #[test]
    fn zero_skip_model_returns_input() {
        let model = Model::zeroed(tiny(false, true)).unwrap();
        let y = noisy(Shape::new(2, 1, 6, 5).unwrap(), 3);
        assert_eq!(model.forward(&y, Mode::Infer).unwrap().prediction, y);
        assert_eq!(model.denoise(&y).unwrap(), y.clamp(0.0, 1.0));
    }

    #[test]
    fn zero_last_layer_without_skip_outputs_bias() {
        let mut model = Model::build(tiny(false, false), 5).unwrap();
        let last = model.layers_mut().last_mut().unwrap();
        last.conv = ConvParams::zeros(1, 2, 3).unwrap();
        last.conv.bias = vec![0.3];
        let y = noisy(Shape::new(1, 1, 5, 5).unwrap(), 6);
        let pred = model.forward(&y, Mode::Infer).unwrap().prediction;
        assert!(pred.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn residual_target_zero_weights_subtracts_bias() {
        let mut spec = tiny(false, false);
        spec.target_mode = TargetMode::ResidualTarget;
        let mut model = Model::zeroed(spec).unwrap();
        model.layers_mut().last_mut().unwrap().conv.bias = vec![0.1];
        let y = noisy(Shape::new(1, 1, 4, 4).unwrap(), 7);
        let expected = y.map(|v| v - 0.1).clamp(0.0, 1.0);
        assert_eq!(model.denoise(&y).unwrap(), expected);
    }

    #[test]
    fn channel_mismatch() {
        let model = Model::build(tiny(false, false), 0).unwrap();
        let y = Tensor4::zeros(Shape::new(1, 2, 4, 4).unwrap()).unwrap();
        assert!(matches!(model.forward(&y, Mode::Infer), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn loss_examples() {
        let s = Shape::new(1, 1, 1, 1).unwrap();
        let pred = Tensor4::filled(s, 3.0).unwrap();
        let target = Tensor4::filled(s, 1.0).unwrap();
        let (loss, grad) = half_mse(&pred, &target).unwrap();
        assert_eq!(loss.value(), 2.0);
        assert_eq!(grad.data(), &[2.0]);
        let (loss, grad) = half_mse(&target, &target).unwrap();
        assert_eq!(loss.value(), 0.0);
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_grads() {
        let model = Model::zeroed(tiny(false, true)).unwrap();
        let y = noisy(Shape::new(2, 1, 5, 5).unwrap(), 9);
        let (loss, grads, _) = model.loss_and_grad(&y, &y).unwrap();
        assert_eq!(loss.value(), 0.0);
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn bn_model_needs_running_stats_for_inference() {
        let mut model = Model::build(tiny(true, true), 1).unwrap();
        let y = noisy(Shape::new(2, 1, 5, 5).unwrap(), 1);
        assert!(matches!(model.denoise(&y), Err(Error::UninitializedRunningStats)));
        let (_, _, fwd) = model.loss_and_grad(&y, &y).unwrap();
        model.update_running_stats(&fwd);
        assert!(model.denoise(&y).is_ok());
    }

    #[test]
    fn denoise_is_deterministic() {
        let model = Model::build(tiny(false, true), 11).unwrap();
        let y = noisy(Shape::new(1, 1, 8, 8).unwrap(), 12);
        let a = model.denoise(&y).unwrap();
        let b = model.denoise(&y).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn residual_skip_estimate_minus_input_is_network_output() {
        let model = Model::build(tiny(false, true), 13).unwrap();
        let y = noisy(Shape::new(1, 1, 7, 7).unwrap(), 14);
        let mut no_skip = model.clone();
        no_skip.spec.skip = false;
        no_skip.spec.target_mode = TargetMode::Direct;
        let r = no_skip.forward(&y, Mode::Infer).unwrap().prediction;
        let diff = model.estimate(&y).unwrap().sub(&y).unwrap();
        assert!(diff.max_abs_diff(&r).unwrap() < 1e-15);
    }
}
