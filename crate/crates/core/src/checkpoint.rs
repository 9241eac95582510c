//! Binary checkpoint format.
//!
//! ```text
//! "WINCKPT1"                      8 magic bytes
//! header length                   u32, little endian
//! header                          UTF-8 `key=value` lines
//! parameter blocks                f32, little endian
//! ```
//!
//! Parameter blocks follow layer order: conv weights `(K, C_in, F, F)`, conv
//! bias `(K)`, then for BN layers `gamma`, `beta`, `running_mean`,
//! `running_var` (each `K`). Layers whose running statistics were never
//! updated store mean 0 / variance 1 and are flagged `bn.<i>.tracked=false`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, Model, ModelSpec};
use crate::nn::{BnParams, ConvParams, RunningStats};
use crate::noise::{NoiseConfig, SeedPolicy, Sigma};
use crate::tensor::{Shape, Tensor4};

pub const MAGIC: &[u8; 8] = b"WINCKPT1";
const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Noise policy the model was trained with, if known.
    pub noise: Option<NoiseConfig>,
    /// Free-form training metadata (epochs, seed, final loss, ...). Keys must
    /// not contain `=` or newlines.
    pub metadata: BTreeMap<String, String>,
}

fn header_text(ck: &Checkpoint) -> String {
    let spec = ck.model.spec();
    let mut kv: Vec<(String, String)> = vec![
        ("format_version".into(), FORMAT_VERSION.into()),
        ("model.channels".into(), spec.channels.to_string()),
        ("model.layers".into(), spec.layers_string()),
        ("model.skip".into(), spec.skip.to_string()),
        ("model.target_mode".into(), spec.target_mode.to_string()),
    ];
    for (i, layer) in ck.model.layers().iter().enumerate() {
        if let Some(bn) = &layer.bn {
            kv.push((format!("bn.{i}.epsilon"), format!("{:e}", bn.epsilon)));
            kv.push((format!("bn.{i}.momentum"), format!("{:e}", bn.momentum)));
            kv.push((format!("bn.{i}.tracked"), bn.running.is_some().to_string()));
        }
    }
    if let Some(noise) = &ck.noise {
        match noise.sigma {
            Sigma::Fixed(s) => kv.push(("noise.sigma".into(), s.to_string())),
            Sigma::Range(lo, hi) => {
                kv.push(("noise.sigma_lo".into(), lo.to_string()));
                kv.push(("noise.sigma_hi".into(), hi.to_string()));
            }
        }
        kv.push(("noise.seed_policy".into(), noise.seed_policy.to_string()));
        kv.push(("noise.seed".into(), noise.seed.to_string()));
    }
    for (k, v) in &ck.metadata {
        kv.push((format!("meta.{k}"), v.clone()));
    }
    kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint { model, noise: None, metadata: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = header_text(self);
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for layer in self.model.layers() {
            push_f32(&mut out, layer.conv.weights.data());
            push_f32(&mut out, &layer.conv.bias);
            if let Some(bn) = &layer.bn {
                let k = bn.channels();
                let (mean, var) = match &bn.running {
                    Some(r) => (r.mean.clone(), r.var.clone()),
                    None => (vec![0.0; k], vec![1.0; k]),
                };
                push_f32(&mut out, &bn.gamma);
                push_f32(&mut out, &bn.beta);
                push_f32(&mut out, &mean);
                push_f32(&mut out, &var);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing WINCKPT1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        let parse_err = |k: &str| Error::Checkpoint(format!("bad value for `{k}`"));
        if get("format_version")? != FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let spec = ModelSpec {
            channels: get("model.channels")?.parse().map_err(|_| parse_err("model.channels"))?,
            layers: ModelSpec::parse_layers(get("model.layers")?)?,
            skip: get("model.skip")?.parse().map_err(|_| parse_err("model.skip"))?,
            target_mode: get("model.target_mode")?.parse()?,
        };
        spec.validate()?;

        let mut reader = F32Reader { bytes: &bytes[12 + hlen..], pos: 0 };
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut in_ch = spec.channels;
        for (i, ls) in spec.layers.iter().enumerate() {
            let wshape = Shape::new(ls.filters, in_ch, ls.kernel, ls.kernel)?;
            let weights = Tensor4::from_vec(wshape, reader.take(wshape.len())?)?;
            let conv = ConvParams::new(weights, reader.take(ls.filters)?)?;
            let bn = if ls.bn {
                let num = |key: String| -> Result<f64> {
                    kv.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?.parse().map_err(|_| parse_err(&key))
                };
                let mut p = BnParams::new(ls.filters);
                p.epsilon = num(format!("bn.{i}.epsilon"))?;
                p.momentum = num(format!("bn.{i}.momentum"))?;
                p.gamma = reader.take(ls.filters)?;
                p.beta = reader.take(ls.filters)?;
                let mean = reader.take(ls.filters)?;
                let var = reader.take(ls.filters)?;
                let tracked = get(&format!("bn.{i}.tracked"))? == "true";
                p.running = tracked.then_some(RunningStats { mean, var });
                Some(p)
            } else {
                None
            };
            layers.push(Layer { spec: *ls, conv, bn });
            in_ch = ls.filters;
        }
        if reader.pos != reader.bytes.len() {
            return Err(bad("trailing bytes after parameter blocks"));
        }
        let model = Model::from_parts(spec, layers)?;

        let noise = match kv.get("noise.seed_policy") {
            None => None,
            Some(policy) => {
                let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| parse_err(k)) };
                let sigma = if kv.contains_key("noise.sigma") {
                    Sigma::Fixed(num("noise.sigma")?)
                } else {
                    Sigma::Range(num("noise.sigma_lo")?, num("noise.sigma_hi")?)
                };
                let seed_policy: SeedPolicy = policy.parse()?;
                let seed = get("noise.seed")?.parse().map_err(|_| parse_err("noise.seed"))?;
                Some(NoiseConfig { sigma, seed_policy, seed })
            }
        };
        let metadata =
            kv.iter().filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone()))).collect();
        Ok(Checkpoint { model, noise, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct F32Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F32Reader<'_> {
    fn take(&mut self, count: usize) -> Result<Vec<f64>> {
        let end = self.pos + 4 * count;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Checkpoint("truncated parameter data".into()))?;
        self.pos = end;
        Ok(chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TargetMode;
    use crate::rng::Rng;

    fn trained_like(bn: bool) -> Model {
        let mut m = Model::build(ModelSpec::plain(3, 4, 3, bn, true), 5).unwrap();
        let mut rng = Rng::new(1);
        for l in m.layers_mut() {
            for b in &mut l.conv.bias {
                *b = rng.gaussian() * 0.01;
            }
            if let Some(bn) = &mut l.bn {
                let k = bn.channels();
                bn.running = Some(RunningStats {
                    mean: (0..k).map(|_| rng.gaussian()).collect(),
                    var: (0..k).map(|_| rng.uniform() + 0.5).collect(),
                });
                bn.gamma.iter_mut().for_each(|g| *g += 0.1 * rng.gaussian());
            }
        }
        m
    }

    #[test]
    fn round_trip_preserves_inference() {
        for bn in [false, true] {
            let model = trained_like(bn);
            let mut ck = Checkpoint::new(model.clone());
            ck.noise = Some(NoiseConfig::fixed(50.0, SeedPolicy::Frozen, 0));
            ck.metadata.insert("epochs".into(), "5".into());
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back.noise, ck.noise);
            assert_eq!(back.metadata, ck.metadata);
            assert_eq!(back.model.spec(), model.spec());
            let mut rng = Rng::new(2);
            let y = Tensor4::from_fn(Shape::new(2, 1, 9, 9).unwrap(), |_, _, _, _| rng.uniform()).unwrap();
            let before = model.estimate(&y).unwrap();
            let after = back.model.estimate(&y).unwrap();
            assert!(before.max_abs_diff(&after).unwrap() < 1e-6);
        }
    }

    #[test]
    fn untracked_bn_round_trips_as_untracked() {
        let model = Model::build(ModelSpec::plain(2, 2, 3, true, true), 0).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::new(model).to_bytes()).unwrap();
        assert!(back.model.layers().iter().all(|l| l.bn.as_ref().unwrap().running.is_none()));
    }

    #[test]
    fn range_noise_and_target_mode_round_trip() {
        let mut spec = ModelSpec::plain(2, 2, 3, false, false);
        spec.target_mode = TargetMode::ResidualTarget;
        let mut ck = Checkpoint::new(Model::zeroed(spec).unwrap());
        ck.noise = Some(NoiseConfig { sigma: Sigma::Range(0.0, 70.0), seed_policy: SeedPolicy::Fresh, seed: 3 });
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.noise, ck.noise);
        assert_eq!(back.model.spec().target_mode, TargetMode::ResidualTarget);
    }

    #[test]
    fn corrupted_inputs_rejected() {
        let bytes = Checkpoint::new(trained_like(true)).to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.extend([0, 0, 0, 0]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"WINCKPT1").is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = trained_like(true);
        assert_eq!(Checkpoint::new(m.clone()).to_bytes(), Checkpoint::new(m).to_bytes());
    }
}
