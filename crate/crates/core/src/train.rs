//! Mini-batch training loop and validation.

use std::fmt::Write as _;

use log::info;

use crate::data::{make_batches, Image, PatchSet};
use crate::error::{Error, Result};
use crate::metrics::{format_db, psnr_with_peak};
use crate::model::{half_mse, Mode, Model, ModelSpec};
use crate::noise::{NoiseConfig, NoiseSource, SeedPolicy, Sigma};
use crate::optim::{clip_gradients, sgd_step, OptimConfig, OptimState};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Stream index reserved for validation noise.
const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
}

/// Noisy/clean validation pairs with fixed noise, so scores are comparable
/// across epochs and runs.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub pairs: Vec<(Tensor4, Tensor4)>,
}

impl ValidationSet {
    /// Corrupts every image once with fresh noise at `sigma` drawn from a
    /// stream derived from `seed`.
    pub fn new(images: &[Image], sigma: f64, seed: u64) -> Result<Self> {
        let cfg = NoiseConfig::fixed(sigma, SeedPolicy::Fresh, seed);
        let mut src = NoiseSource::for_worker(cfg, VALIDATION_STREAM)?;
        let pairs = images
            .iter()
            .map(|img| {
                let x = img.to_tensor();
                let (y, _) = src.corrupt(&x)?;
                Ok((y, x))
            })
            .collect::<Result<_>>()?;
        Ok(ValidationSet { pairs })
    }

    pub fn from_pairs(pairs: Vec<(Tensor4, Tensor4)>) -> Self {
        ValidationSet { pairs }
    }

    /// Mean PSNR of the clamped estimates.
    pub fn psnr(&self, model: &Model) -> Result<f64> {
        let mut total = 0.0;
        for (y, x) in &self.pairs {
            let d = model.denoise(y)?;
            total += psnr_with_peak(d.data(), x.data(), 1.0);
        }
        Ok(total / self.pairs.len() as f64)
    }

    /// Mean inference-mode training loss.
    pub fn loss(&self, model: &Model) -> Result<f64> {
        let mut total = 0.0;
        for (y, x) in &self.pairs {
            let pred = model.forward(y, Mode::Infer)?.prediction;
            total += half_mse(&pred, &model.target(y, x)?)?.0.value();
        }
        Ok(total / self.pairs.len() as f64)
    }
}

/// Representative sigma for validation: the fixed level, or the middle of a range.
pub fn validation_sigma(cfg: &NoiseConfig) -> f64 {
    match cfg.sigma {
        Sigma::Fixed(s) => s,
        Sigma::Range(lo, hi) => (lo + hi) / 2.0,
    }
}

pub struct Trainer<'a> {
    pub model: &'a mut Model,
    pub optim: &'a OptimConfig,
    pub noise: NoiseSource,
    pub state: OptimState,
    /// Seed for per-epoch shuffling.
    pub seed: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, optim: &'a OptimConfig, noise: NoiseConfig, seed: u64) -> Result<Self> {
        let state = OptimState::new(model, optim);
        Ok(Trainer { model, optim, noise: NoiseSource::new(noise)?, state, seed })
    }

    /// One update on a single batch; returns the pre-update loss.
    pub fn step(&mut self, noisy: &Tensor4, clean: &Tensor4) -> Result<f64> {
        let (loss, mut grads, fwd) = self.model.loss_and_grad(noisy, clean)?;
        if !loss.value().is_finite() {
            return Err(Error::Numerical(format!("loss became {} at epoch {}", loss.value(), self.state.epoch)));
        }
        clip_gradients(&mut grads, self.optim.clip);
        sgd_step(self.model, &grads, &mut self.state, self.optim)?;
        self.model.update_running_stats(&fwd);
        Ok(loss.value())
    }

    /// One pass over `patches`; returns the batch-size weighted mean loss.
    pub fn epoch(&mut self, epoch: usize, patches: &PatchSet) -> Result<f64> {
        self.state.set_epoch(epoch, self.optim);
        let shuffle_seed = Rng::stream(self.seed, epoch as u64).next_u64();
        let batches: Vec<_> =
            make_batches(patches, &mut self.noise, self.optim.batch_size, shuffle_seed)?.collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut count = 0;
        for batch in &batches {
            let n = batch.clean.shape().n;
            total += self.step(&batch.noisy, &batch.clean)? * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }

    /// Runs `epochs` epochs, validating after each one.
    pub fn fit(&mut self, patches: &PatchSet, val: &ValidationSet, epochs: usize) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let train_loss = self.epoch(epoch, patches)?;
            let val_psnr = if val.pairs.is_empty() { f64::NAN } else { val.psnr(self.model)? };
            info!("epoch {epoch}: lr {} loss {train_loss:.6e} val psnr {}", self.state.lr, format_db(val_psnr));
            log.push(EpochRecord { epoch, lr: self.state.lr, train_loss, val_psnr });
        }
        Ok(log)
    }
}

/// Log text: a timestamp header line, the model description, a column
/// header, then one record per epoch. Only the first line varies between
/// identical runs.
pub fn format_log(records: &[EpochRecord], created_unix: u64, spec: &ModelSpec) -> String {
    let mut out = format!(
        "# win train log created_unix={created_unix}\n# model layers={} skip={} target={} params={}\n# epoch lr train_loss val_psnr\n",
        spec.layers_string(),
        spec.skip,
        spec.target_mode,
        spec.param_count()
    );
    for r in records {
        let _ = writeln!(out, "{} {} {} {}", r.epoch, r.lr, r.train_loss, format_db(r.val_psnr));
    }
    out
}
