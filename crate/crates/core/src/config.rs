//! Run configuration: a flat `key = value` file with dotted section prefixes.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! model.preset = win5_rb        # or model.layers = 16x3+relu,16x3+relu,1x3
//! optim.lr = 0.1
//! noise.sigma = 50
//! noise.seed_policy = frozen
//! data.train = fixtures/train
//! train.epochs = 20
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. Unknown keys are rejected so typos do not silently fall back to
//! defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, TargetMode};
use crate::noise::{NoiseConfig, SeedPolicy, Sigma};
use crate::optim::OptimConfig;

/// Desk-scale patch size.
pub const DEFAULT_PATCH: usize = 17;
pub const DEFAULT_STRIDE: usize = 8;

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "model.preset",
    "model.layers",
    "model.channels",
    "model.depth",
    "model.width",
    "model.kernel",
    "model.bn",
    "model.skip",
    "model.target_mode",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.clip",
    "optim.step_size",
    "optim.gamma",
    "optim.batch_size",
    "noise.sigma",
    "noise.sigma_lo",
    "noise.sigma_hi",
    "noise.seed",
    "noise.seed_policy",
    "data.train",
    "data.val",
    "data.input",
    "data.clean",
    "data.patch",
    "data.stride",
    "data.augment",
    "train.epochs",
    "train.checkpoint",
    "train.log",
    "sweep.depth",
    "sweep.width",
    "sweep.kernel",
    "eval.sigmas",
    "histogram.sigmas",
    "output.dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Image or directory to denoise / evaluate.
    pub input: Option<PathBuf>,
    /// Clean references matching `input` by file name.
    pub clean: Option<PathBuf>,
    pub patch: usize,
    pub stride: usize,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub depth: Vec<usize>,
    pub width: Vec<usize>,
    pub kernel: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    /// Shape parameters used to derive sweep variants.
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
    pub bn: bool,
    pub optim: OptimConfig,
    pub noise: NoiseConfig,
    pub data: DataConfig,
    pub epochs: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub sweep: Option<SweepConfig>,
    pub eval_sigmas: Vec<f64>,
    pub histogram_sigmas: Vec<f64>,
    pub out_dir: PathBuf,
}

/// Raw key/value pairs, in file order of last assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = k.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            map.insert(key.to_string(), v.trim().to_string());
        }
        Ok(KeyValues { map })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.map.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        let items: Vec<T> = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad list item `{s}` in `{key}`"))))
            .collect::<Result<_>>()?;
        if items.is_empty() {
            return Err(Error::Config(format!("`{key}` must list at least one value")));
        }
        Ok(Some(items))
    }
}

impl RunConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_key_values(&KeyValues::parse(&text)?, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?, base)
    }

    pub fn from_key_values(kv: &KeyValues, base: &Path) -> Result<Self> {
        let seed: u64 = kv.parse_or("seed", 0)?;
        let path = |key: &str| kv.get(key).filter(|v| !v.is_empty()).map(|v| base.join(v));

        let depth = kv.parse_or("model.depth", 5)?;
        let width = kv.parse_or("model.width", 16)?;
        let kernel = kv.parse_or("model.kernel", 3)?;
        let bn = kv.parse_or("model.bn", false)?;
        let skip = kv.parse_or("model.skip", true)?;
        let mut model = if let Some(layers) = kv.get("model.layers") {
            let layers = ModelSpec::parse_layers(layers)?;
            ModelSpec { channels: 1, layers, skip, target_mode: TargetMode::Direct }
        } else if let Some(preset) = kv.get("model.preset") {
            ModelSpec::preset(preset)?
        } else {
            ModelSpec::plain(depth, width, kernel, bn, skip)
        };
        if kv.get("model.preset").is_none() || kv.get("model.skip").is_some() {
            model.skip = skip;
        }
        model.channels = kv.parse_or("model.channels", model.channels)?;
        let default_mode = if model.skip { TargetMode::ResidualSkip } else { TargetMode::Direct };
        model.target_mode = kv.parse_or("model.target_mode", default_mode)?;
        model.validate()?;

        let d = OptimConfig::default();
        let optim = OptimConfig {
            base_lr: kv.parse_or("optim.lr", d.base_lr)?,
            momentum: kv.parse_or("optim.momentum", d.momentum)?,
            weight_decay: kv.parse_or("optim.weight_decay", d.weight_decay)?,
            clip: kv.parse_or("optim.clip", d.clip)?,
            step_size: kv.parse_or("optim.step_size", d.step_size)?,
            gamma: kv.parse_or("optim.gamma", d.gamma)?,
            batch_size: kv.parse_or("optim.batch_size", d.batch_size)?,
        };
        optim.validate()?;

        let sigma = match (kv.get("noise.sigma_lo"), kv.get("noise.sigma_hi")) {
            (Some(_), Some(_)) => Sigma::Range(kv.parse_or("noise.sigma_lo", 0.0)?, kv.parse_or("noise.sigma_hi", 0.0)?),
            (None, None) => Sigma::Fixed(kv.parse_or("noise.sigma", 50.0)?),
            _ => return Err(Error::Config("noise.sigma_lo and noise.sigma_hi must be given together".into())),
        };
        let noise = NoiseConfig {
            sigma,
            seed_policy: kv.parse_or("noise.seed_policy", SeedPolicy::Fresh)?,
            seed: kv.parse_or("noise.seed", seed)?,
        };
        noise.validate()?;

        let data = DataConfig {
            train: path("data.train"),
            val: path("data.val"),
            input: path("data.input"),
            clean: path("data.clean"),
            patch: kv.parse_or("data.patch", DEFAULT_PATCH)?,
            stride: kv.parse_or("data.stride", DEFAULT_STRIDE)?,
            augment: kv.parse_or("data.augment", false)?,
        };
        if data.patch == 0 || data.stride == 0 {
            return Err(Error::Config("data.patch and data.stride must be at least 1".into()));
        }

        let epochs = kv.parse_or("train.epochs", 10usize)?;
        if epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }

        let sweep = match (kv.list("sweep.depth")?, kv.list("sweep.width")?, kv.list("sweep.kernel")?) {
            (None, None, None) => None,
            (l, k, f) => {
                Some(SweepConfig { depth: l.unwrap_or(vec![depth]), width: k.unwrap_or(vec![width]), kernel: f.unwrap_or(vec![kernel]) })
            }
        };
        let default_sigma = match sigma {
            Sigma::Fixed(s) => s,
            Sigma::Range(lo, hi) => (lo + hi) / 2.0,
        };

        Ok(RunConfig {
            seed,
            model,
            depth,
            width,
            kernel,
            bn,
            optim,
            noise,
            data,
            epochs,
            checkpoint: path("train.checkpoint"),
            log: path("train.log"),
            sweep,
            eval_sigmas: kv.list("eval.sigmas")?.unwrap_or(vec![default_sigma]),
            histogram_sigmas: kv.list("histogram.sigmas")?.unwrap_or(vec![10.0, 50.0]),
            out_dir: path("output.dir").unwrap_or_else(|| base.join("out")),
        })
    }
}
