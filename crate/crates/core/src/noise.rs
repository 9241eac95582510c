//! Additive white Gaussian noise.
//!
//! Noise levels are given on the 0–255 scale and applied to images in
//! `[0, 1]`, so a level `sigma` adds `N(0, (sigma / 255)^2)` per pixel.
//!
//! Two seed policies are available. `fresh` draws a new realization for
//! every call. `frozen` draws one standard-normal matrix from the seed the
//! first time it is asked for a shape and reuses that exact matrix for every
//! later call, which is what reseeding the generator before each draw does.
//! A network trained that way only ever sees one noise realization.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor4};

/// Noise level on the 0–255 scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sigma {
    Fixed(f64),
    /// Drawn uniformly from `[lo, hi]` for every call.
    Range(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPolicy {
    Fresh,
    Frozen,
}

impl SeedPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SeedPolicy::Fresh => "fresh",
            SeedPolicy::Frozen => "frozen",
        }
    }
}

impl fmt::Display for SeedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeedPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(SeedPolicy::Fresh),
            "frozen" => Ok(SeedPolicy::Frozen),
            other => Err(Error::Config(format!("unknown seed policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub sigma: Sigma,
    pub seed_policy: SeedPolicy,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn fixed(sigma: f64, seed_policy: SeedPolicy, seed: u64) -> Self {
        NoiseConfig { sigma: Sigma::Fixed(sigma), seed_policy, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match self.sigma {
            Sigma::Fixed(s) if s >= 0.0 && s.is_finite() => Ok(()),
            Sigma::Range(lo, hi) if lo >= 0.0 && lo <= hi && hi.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid noise level {other:?}"))),
        }
    }

    /// Human-readable sigma, e.g. `50` or `0-70`.
    pub fn sigma_label(&self) -> String {
        match self.sigma {
            Sigma::Fixed(s) => format!("{s}"),
            Sigma::Range(lo, hi) => format!("{lo}-{hi}"),
        }
    }
}

/// Stateful noise generator for one worker.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    cfg: NoiseConfig,
    rng: Rng,
    frozen: Option<Tensor4>,
}

impl NoiseSource {
    pub fn new(cfg: NoiseConfig) -> Result<Self> {
        Self::for_worker(cfg, 0)
    }

    /// Source with its own stream derived from `(cfg.seed, worker)`. Frozen
    /// matrices depend on `cfg.seed` only, so every worker shares one.
    pub fn for_worker(cfg: NoiseConfig, worker: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(NoiseSource { cfg, rng: Rng::stream(cfg.seed, worker), frozen: None })
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.cfg
    }

    /// The cached standard-normal matrix in frozen mode, once drawn.
    pub fn frozen_matrix(&self) -> Option<&Tensor4> {
        self.frozen.as_ref()
    }

    fn draw_sigma(&mut self) -> f64 {
        match self.cfg.sigma {
            Sigma::Fixed(s) => s,
            Sigma::Range(lo, hi) => self.rng.uniform_range(lo, hi),
        }
    }

    fn standard_normal(&mut self, shape: Shape) -> Result<Tensor4> {
        match self.cfg.seed_policy {
            SeedPolicy::Fresh => Tensor4::from_fn(shape, |_, _, _, _| self.rng.gaussian()),
            SeedPolicy::Frozen => {
                if let Some(m) = &self.frozen {
                    if m.shape() != shape {
                        return Err(Error::FrozenShape { cached: m.shape().dims(), requested: shape.dims() });
                    }
                    return Ok(m.clone());
                }
                let mut rng = Rng::new(self.cfg.seed);
                let m = Tensor4::from_fn(shape, |_, _, _, _| rng.gaussian())?;
                self.frozen = Some(m.clone());
                Ok(m)
            }
        }
    }

    /// Noise tensor on the internal scale and the sigma (0–255) it used.
    pub fn sample(&mut self, shape: Shape) -> Result<(Tensor4, f64)> {
        let sigma = self.draw_sigma();
        let z = self.standard_normal(shape)?;
        Ok((z.scale(sigma / 255.0), sigma))
    }

    pub fn sample_noise(&mut self, shape: Shape) -> Result<Tensor4> {
        Ok(self.sample(shape)?.0)
    }

    /// `y = x + noise`, not clamped.
    pub fn corrupt(&mut self, x: &Tensor4) -> Result<(Tensor4, f64)> {
        let (n, sigma) = self.sample(x.shape())?;
        Ok((x.add(&n)?, sigma))
    }
}

/// One standard-normal draw from `rng`.
pub fn gaussian(rng: &mut Rng) -> f64 {
    rng.gaussian()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(h: usize, w: usize) -> Shape {
        Shape::new(1, 1, h, w).unwrap()
    }

    #[test]
    fn zero_sigma_is_silent() {
        let mut src = NoiseSource::new(NoiseConfig::fixed(0.0, SeedPolicy::Fresh, 1)).unwrap();
        let n = src.sample_noise(shape(4, 4)).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        let x = Tensor4::filled(shape(3, 3), 0.4).unwrap();
        assert_eq!(src.corrupt(&x).unwrap().0, x);
    }

    #[test]
    fn frozen_repeats_and_fresh_does_not() {
        let mut frozen = NoiseSource::new(NoiseConfig::fixed(25.0, SeedPolicy::Frozen, 3)).unwrap();
        let a = frozen.sample_noise(shape(8, 8)).unwrap();
        let b = frozen.sample_noise(shape(8, 8)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());

        let mut fresh = NoiseSource::new(NoiseConfig::fixed(25.0, SeedPolicy::Fresh, 3)).unwrap();
        let c = fresh.sample_noise(shape(8, 8)).unwrap();
        let d = fresh.sample_noise(shape(8, 8)).unwrap();
        assert!(c.max_abs_diff(&d).unwrap() > 0.0);
    }

    #[test]
    fn frozen_noise_is_shared_across_images() {
        let mut src = NoiseSource::new(NoiseConfig::fixed(50.0, SeedPolicy::Frozen, 0)).unwrap();
        let x1 = Tensor4::filled(shape(5, 5), 0.2).unwrap();
        let x2 = Tensor4::from_fn(shape(5, 5), |_, _, y, x| (y * 5 + x) as f64 / 25.0).unwrap();
        let n1 = src.corrupt(&x1).unwrap().0.sub(&x1).unwrap();
        let n2 = src.corrupt(&x2).unwrap().0.sub(&x2).unwrap();
        assert!(n1.max_abs_diff(&n2).unwrap() < 1e-15);
    }

    #[test]
    fn frozen_rejects_new_shape() {
        let mut src = NoiseSource::new(NoiseConfig::fixed(50.0, SeedPolicy::Frozen, 0)).unwrap();
        src.sample_noise(shape(4, 4)).unwrap();
        assert!(matches!(src.sample_noise(shape(4, 5)), Err(Error::FrozenShape { .. })));
    }

    #[test]
    fn frozen_matrix_is_independent_of_worker() {
        let cfg = NoiseConfig::fixed(10.0, SeedPolicy::Frozen, 9);
        let a = NoiseSource::for_worker(cfg, 0).unwrap().sample_noise(shape(3, 3)).unwrap();
        let b = NoiseSource::for_worker(cfg, 5).unwrap().sample_noise(shape(3, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn range_reports_sigma_used() {
        let cfg = NoiseConfig { sigma: Sigma::Range(0.0, 70.0), seed_policy: SeedPolicy::Fresh, seed: 2 };
        let mut src = NoiseSource::new(cfg).unwrap();
        let x = Tensor4::zeros(shape(2, 2)).unwrap();
        let draws: Vec<f64> = (0..10_000).map(|_| src.corrupt(&x).unwrap().1).collect();
        assert!(draws.iter().all(|s| (0.0..=70.0).contains(s)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((33.5..=36.5).contains(&mean), "mean sigma {mean}");
    }

    #[test]
    fn invalid_configs() {
        assert!(NoiseConfig::fixed(-1.0, SeedPolicy::Fresh, 0).validate().is_err());
        let cfg = NoiseConfig { sigma: Sigma::Range(50.0, 10.0), seed_policy: SeedPolicy::Fresh, seed: 0 };
        assert!(NoiseSource::new(cfg).is_err());
        assert!("sometimes".parse::<SeedPolicy>().is_err());
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(77);
        let mut b = Rng::new(77);
        for _ in 0..100 {
            assert_eq!(gaussian(&mut a).to_bits(), gaussian(&mut b).to_bits());
        }
    }
}
