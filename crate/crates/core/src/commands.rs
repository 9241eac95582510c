//! The workflows behind each CLI subcommand. Every command takes a
//! [`RunConfig`], writes its artifacts under the configured paths and
//! returns a summary that tests can inspect directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, extract_patches_all, load_images, save_image, Image, PatchSet};
use crate::error::{Error, Result};
use crate::metrics::{align, format_db, histogram, histogram_distance, psnr, psnr_with_peak, ssim, Histogram, QualityReport};
use crate::model::{Model, ModelSpec};
use crate::noise::{NoiseConfig, NoiseSource, SeedPolicy};
use crate::tensor::Tensor4;
use crate::train::{format_log, validation_sigma, EpochRecord, Trainer, ValidationSet};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
}

fn file_name(path: &str) -> String {
    Path::new(path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

/// Training images (optionally augmented) cut into patches, plus the
/// validation images.
pub struct Dataset {
    pub patches: PatchSet,
    pub val_images: Vec<Image>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let train_dir = require(&cfg.data.train, "data.train")?;
        let mut images = load_images(train_dir)?;
        if images.is_empty() {
            return Err(Error::Config(format!("no images found in {}", train_dir.display())));
        }
        let val_images = match &cfg.data.val {
            Some(dir) => load_images(dir)?,
            None => images.clone(),
        };
        if cfg.data.augment {
            images = images.iter().flat_map(augment).collect();
        }
        let patches = extract_patches_all(&images, cfg.data.patch, cfg.data.stride)?;
        info!("{} images -> {} patches of {}x{}", images.len(), patches.len(), cfg.data.patch, cfg.data.patch);
        Ok(Dataset { patches, val_images })
    }
}

/// Result of one training run.
pub struct TrainRun {
    pub model: Model,
    pub records: Vec<EpochRecord>,
    pub val_loss: f64,
    /// Frozen noise matrix used for training, if the policy was frozen.
    pub frozen_noise: Option<Tensor4>,
}

/// Builds `spec` from `cfg.seed` and trains it on `data`.
pub fn train_model(cfg: &RunConfig, spec: ModelSpec, noise: NoiseConfig, data: &Dataset) -> Result<TrainRun> {
    let mut model = Model::build(spec, cfg.seed)?;
    let val = ValidationSet::new(&data.val_images, validation_sigma(&noise), cfg.seed)?;
    let mut trainer = Trainer::new(&mut model, &cfg.optim, noise, cfg.seed)?;
    let records = trainer.fit(&data.patches, &val, cfg.epochs)?;
    let frozen_noise = trainer.noise.frozen_matrix().cloned();
    let val_loss = val.loss(&model)?;
    Ok(TrainRun { model, records, val_loss, frozen_noise })
}

fn checkpoint_for(run: &TrainRun, cfg: &RunConfig, noise: NoiseConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(run.model.clone());
    ck.noise = Some(noise);
    let last = run.records.last();
    ck.metadata.insert("epochs".into(), cfg.epochs.to_string());
    ck.metadata.insert("seed".into(), cfg.seed.to_string());
    ck.metadata.insert("base_lr".into(), cfg.optim.base_lr.to_string());
    ck.metadata.insert("param_count".into(), run.model.param_count().to_string());
    if let Some(r) = last {
        ck.metadata.insert("final_train_loss".into(), r.train_loss.to_string());
        ck.metadata.insert("final_val_psnr".into(), format_db(r.val_psnr));
    }
    ck
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<EpochRecord>,
    pub model: Model,
}

/// `train`: fits the configured model and writes a checkpoint and log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let data = Dataset::load(cfg)?;
    let run = train_model(cfg, cfg.model.clone(), cfg.noise, &data)?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    let log = cfg.log.clone().unwrap_or_else(|| cfg.out_dir.join("train.log"));
    if let Some(dir) = checkpoint.parent() {
        ensure_dir(dir)?;
    }
    checkpoint_for(&run, cfg, cfg.noise).save(&checkpoint)?;
    write_text(&log, &format_log(&run.records, now_unix(), run.model.spec()))?;
    Ok(TrainReport { checkpoint, log, records: run.records, model: run.model })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    Checkpoint::load(path)
}

pub struct DenoiseReport {
    pub outputs: Vec<PathBuf>,
    pub quality: Option<QualityReport>,
}

/// `denoise`: runs the checkpoint over `data.input` and writes the results
/// to `<out>/denoised/`. When `data.clean` is set, scores each output
/// against the reference with the same file name.
pub fn cmd_denoise(cfg: &RunConfig) -> Result<DenoiseReport> {
    let ck = load_checkpoint(cfg)?;
    let inputs = load_images(require(&cfg.data.input, "data.input")?)?;
    let out_dir = cfg.out_dir.join("denoised");
    ensure_dir(&out_dir)?;
    let clean_dir = cfg.data.clean.as_deref();
    let mut quality = clean_dir.map(|_| QualityReport::default());
    let mut outputs = Vec::new();
    for img in &inputs {
        let denoised = Image::from_tensor(&ck.model.denoise(&img.to_tensor())?)?;
        let name = file_name(&img.source_path);
        let out_path = out_dir.join(&name);
        save_image(&denoised, &out_path)?;
        outputs.push(out_path);
        if let (Some(dir), Some(report)) = (clean_dir, quality.as_mut()) {
            let reference = crate::data::load_image(dir.join(&name))?;
            report.push(name, "input", psnr(&denoised, &reference)?, ssim(&denoised, &reference)?);
        }
    }
    if let Some(report) = &quality {
        write_text(&cfg.out_dir.join("denoise_table.txt"), &report.table())?;
        write_text(&cfg.out_dir.join("denoise_records.txt"), &report.records())?;
    }
    Ok(DenoiseReport { outputs, quality })
}

/// `eval`: corrupts clean images at each `eval.sigmas` level with fresh
/// noise, denoises them and reports PSNR/SSIM of the clamped outputs.
pub fn cmd_eval(cfg: &RunConfig) -> Result<QualityReport> {
    let ck = load_checkpoint(cfg)?;
    let source = cfg.data.input.as_ref().or(cfg.data.val.as_ref());
    let images = load_images(require(&source.cloned(), "data.input")?)?;
    let mut report = QualityReport::default();
    for (i, &sigma) in cfg.eval_sigmas.iter().enumerate() {
        let mut noise = NoiseSource::for_worker(NoiseConfig::fixed(sigma, SeedPolicy::Fresh, cfg.seed), 1000 + i as u64)?;
        for img in &images {
            let (y, _) = noise.corrupt(&img.to_tensor())?;
            let d = Image::from_tensor(&ck.model.denoise(&y)?)?;
            report.push(file_name(&img.source_path), format!("{sigma}"), psnr(&d, img)?, ssim(&d, img)?);
        }
    }
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("eval_table.txt"), &report.table())?;
    write_text(&cfg.out_dir.join("eval_records.txt"), &report.records())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
    pub params: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_val_psnr: f64,
}

pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: PathBuf,
}

/// `sweep`: trains one model per `(depth, width, kernel)` combination and
/// tabulates their final losses.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep.depth/width/kernel not set".into()))?;
    if sweep.depth.is_empty() || sweep.width.is_empty() || sweep.kernel.is_empty() {
        return Err(Error::Config("sweep lists must not be empty".into()));
    }
    let mut variants = Vec::new();
    for &l in &sweep.depth {
        for &k in &sweep.width {
            for &f in &sweep.kernel {
                let mut spec = ModelSpec::plain(l, k, f, cfg.bn, cfg.model.skip);
                spec.target_mode = cfg.model.target_mode;
                spec.validate()?;
                variants.push((l, k, f, spec));
            }
        }
    }
    let data = Dataset::load(cfg)?;
    let dir = cfg.out_dir.join("sweep");
    ensure_dir(&dir)?;
    let mut rows = Vec::new();
    for (l, k, f, spec) in variants {
        let name = format!("L{l}_K{k}_F{f}");
        info!("sweep variant {name}");
        let run = train_model(cfg, spec, cfg.noise, &data)?;
        write_text(&dir.join(format!("{name}.log")), &format_log(&run.records, now_unix(), run.model.spec()))?;
        checkpoint_for(&run, cfg, cfg.noise).save(dir.join(format!("{name}.ckpt")))?;
        let last = run.records.last().expect("epochs >= 1");
        rows.push(SweepRow {
            name,
            depth: l,
            width: k,
            kernel: f,
            params: run.model.param_count(),
            final_train_loss: last.train_loss,
            final_val_loss: run.val_loss,
            final_val_psnr: last.val_psnr,
        });
    }
    let mut lines = vec![["variant", "L", "K", "F", "params", "train_loss", "val_loss", "val_psnr"].map(String::from).to_vec()];
    for r in &rows {
        lines.push(vec![
            r.name.clone(),
            r.depth.to_string(),
            r.width.to_string(),
            r.kernel.to_string(),
            r.params.to_string(),
            format!("{:.6e}", r.final_train_loss),
            format!("{:.6e}", r.final_val_loss),
            format_db(r.final_val_psnr),
        ]);
    }
    let summary = dir.join("summary.txt");
    write_text(&summary, &align(&lines))?;
    Ok(SweepReport { rows, summary })
}

/// PSNR of one model on the two evaluation noise realizations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseEvaluation {
    /// Evaluation patches carrying the frozen training noise matrix.
    pub frozen_noise_psnr: f64,
    /// Evaluation patches carrying fresh noise.
    pub fresh_noise_psnr: f64,
}

impl NoiseEvaluation {
    pub fn gap(&self) -> f64 {
        self.frozen_noise_psnr - self.fresh_noise_psnr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseReport {
    pub sigma: f64,
    pub frozen_trained: NoiseEvaluation,
    pub fresh_trained: NoiseEvaluation,
    /// Noisy-input PSNR for each evaluation set, as a do-nothing baseline.
    pub noisy_baseline: NoiseEvaluation,
    pub text: String,
}

impl DiagnoseReport {
    /// How much more the frozen-trained model depends on seeing its own
    /// noise realization than the fresh-trained one does.
    pub fn excess_gap(&self) -> f64 {
        self.frozen_trained.gap() - self.fresh_trained.gap()
    }
}

fn mean_psnr(model: Option<&Model>, pairs: &[(Tensor4, Tensor4)]) -> Result<f64> {
    let mut total = 0.0;
    for (y, x) in pairs {
        let est = match model {
            Some(m) => m.denoise(y)?,
            None => y.clamp(0.0, 1.0),
        };
        total += psnr_with_peak(est.data(), x.data(), 1.0);
    }
    Ok(total / pairs.len() as f64)
}

/// `diagnose-seed`: trains twin models with identical budgets, one on a
/// single frozen noise matrix and one on fresh noise, then scores both on
/// evaluation patches corrupted (a) with that same frozen matrix and (b)
/// with fresh noise.
pub fn cmd_diagnose_seed_flaw(cfg: &RunConfig) -> Result<DiagnoseReport> {
    let data = Dataset::load(cfg)?;
    let sigma = validation_sigma(&cfg.noise);
    let frozen_cfg = NoiseConfig::fixed(sigma, SeedPolicy::Frozen, cfg.noise.seed);
    let fresh_cfg = NoiseConfig::fixed(sigma, SeedPolicy::Fresh, cfg.noise.seed);

    info!("training on frozen noise");
    let frozen_run = train_model(cfg, cfg.model.clone(), frozen_cfg, &data)?;
    info!("training on fresh noise");
    let fresh_run = train_model(cfg, cfg.model.clone(), fresh_cfg, &data)?;

    let eval_patches = extract_patches_all(&data.val_images, cfg.data.patch, cfg.data.stride)?;
    let mut frozen_src = NoiseSource::new(frozen_cfg)?;
    let mut fresh_src = NoiseSource::for_worker(fresh_cfg, 0xE7A1)?;
    let mut frozen_pairs = Vec::with_capacity(eval_patches.len());
    let mut fresh_pairs = Vec::with_capacity(eval_patches.len());
    for p in &eval_patches.patches {
        frozen_pairs.push((frozen_src.corrupt(&p.pixels)?.0, p.pixels.clone()));
        fresh_pairs.push((fresh_src.corrupt(&p.pixels)?.0, p.pixels.clone()));
    }
    if let (Some(train_m), Some(eval_m)) = (&frozen_run.frozen_noise, frozen_src.frozen_matrix()) {
        debug_assert_eq!(train_m.fingerprint(), eval_m.fingerprint());
    }

    let evaluate = |m: Option<&Model>| -> Result<NoiseEvaluation> {
        Ok(NoiseEvaluation { frozen_noise_psnr: mean_psnr(m, &frozen_pairs)?, fresh_noise_psnr: mean_psnr(m, &fresh_pairs)? })
    };
    let frozen_trained = evaluate(Some(&frozen_run.model))?;
    let fresh_trained = evaluate(Some(&fresh_run.model))?;
    let noisy_baseline = evaluate(None)?;

    let mut lines = vec![vec!["".to_string(), "eval: frozen noise".into(), "eval: fresh noise".into(), "gap (dB)".into()]];
    for (name, e) in [("noisy input", noisy_baseline), ("trained: frozen", frozen_trained), ("trained: fresh", fresh_trained)] {
        lines.push(vec![name.into(), format!("{:.4}", e.frozen_noise_psnr), format!("{:.4}", e.fresh_noise_psnr), format!("{:.4}", e.gap())]);
    }
    let mut text = format!(
        "# seed-flaw diagnostic: sigma={sigma} epochs={} patches={} eval_patches={} lr={}\n# PSNR (dB) on clamped outputs, mean over evaluation patches\n",
        cfg.epochs,
        data.patches.len(),
        eval_patches.len(),
        cfg.optim.base_lr
    );
    text.push_str(&align(&lines));
    let excess = frozen_trained.gap() - fresh_trained.gap();
    let _ = writeln!(text, "excess gap (frozen-trained minus fresh-trained): {excess:.4} dB");
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("seed_flaw_report.txt"), &text)?;
    Ok(DiagnoseReport { sigma, frozen_trained, fresh_trained, noisy_baseline, text })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramReport {
    pub names: Vec<String>,
    pub sigmas: Vec<f64>,
    /// `histograms[s][i]`: image `i` corrupted at `sigmas[s]`.
    pub histograms: Vec<Vec<Histogram>>,
    /// `(i, j, sigma index, L1 distance)` for every pair `i < j`.
    pub distances: Vec<(usize, usize, usize, f64)>,
}

impl HistogramReport {
    pub fn distance(&self, i: usize, j: usize, sigma: f64) -> Option<f64> {
        let s = self.sigmas.iter().position(|&v| v == sigma)?;
        self.distances.iter().find(|d| d.0 == i && d.1 == j && d.2 == s).map(|d| d.3)
    }
}

/// Histograms of images in `[0, 1]` after adding noise at each sigma and
/// clamping, plus every pairwise L1 distance.
pub fn histogram_comparison(images: &[Image], sigmas: &[f64], policy: SeedPolicy, seed: u64) -> Result<HistogramReport> {
    if images.len() < 2 {
        return Err(Error::Config(format!("histogram comparison needs at least 2 images, got {}", images.len())));
    }
    let mut histograms = Vec::with_capacity(sigmas.len());
    let mut distances = Vec::new();
    for (s, &sigma) in sigmas.iter().enumerate() {
        let mut src = NoiseSource::new(NoiseConfig::fixed(sigma, policy, seed))?;
        let hs: Vec<Histogram> = images
            .iter()
            .map(|img| {
                let (y, _) = src.corrupt(&img.to_tensor())?;
                Ok(histogram(&Image::from_tensor(&y.clamp(0.0, 1.0))?))
            })
            .collect::<Result<_>>()?;
        for i in 0..hs.len() {
            for j in i + 1..hs.len() {
                distances.push((i, j, s, histogram_distance(&hs[i], &hs[j])));
            }
        }
        histograms.push(hs);
    }
    let names = images.iter().map(|i| file_name(&i.source_path)).collect();
    Ok(HistogramReport { names, sigmas: sigmas.to_vec(), histograms, distances })
}

/// `histogram`: histogram comparison over `data.input` (or `data.train`)
/// at `histogram.sigmas`, written as a distance table plus raw bin counts.
pub fn cmd_histogram(cfg: &RunConfig) -> Result<HistogramReport> {
    let source = cfg.data.input.as_ref().or(cfg.data.train.as_ref());
    let images = load_images(require(&source.cloned(), "data.input")?)?;
    let report = histogram_comparison(&images, &cfg.histogram_sigmas, cfg.noise.seed_policy, cfg.noise.seed)?;

    let mut lines = vec![{
        let mut h = vec!["pair".to_string()];
        h.extend(report.sigmas.iter().map(|s| format!("L1 @ sigma={s}")));
        h
    }];
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let mut row = vec![format!("{} vs {}", report.names[i], report.names[j])];
            for &s in &report.sigmas {
                row.push(format!("{:.6}", report.distance(i, j, s).expect("pair computed")));
            }
            lines.push(row);
        }
    }
    let mut bins = String::new();
    for (s, hs) in report.histograms.iter().enumerate() {
        for (i, h) in hs.iter().enumerate() {
            let counts: Vec<String> = h.bins.iter().map(u64::to_string).collect();
            let _ = writeln!(bins, "{} {} {}", report.names[i], report.sigmas[s], counts.join(" "));
        }
    }
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("histogram_report.txt"), &align(&lines))?;
    write_text(&cfg.out_dir.join("histograms.txt"), &bins)?;
    Ok(report)
}
