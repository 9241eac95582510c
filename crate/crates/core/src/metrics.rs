//! Image quality metrics (PSNR, SSIM), intensity histograms and the report
//! writers built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Image;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::ShapeMismatch { left: [1, 1, a.h, a.w], right: [1, 1, b.h, b.w] });
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr_with_peak(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    }
}

/// PSNR in dB for images on the `[0, 1]` scale.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    Ok(psnr_with_peak(&a.pixels, &b.pixels, 1.0))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM from windowed moments.
#[inline]
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, peak: f64) -> f64 {
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM over every valid position of an 11x11 Gaussian window
/// (sigma 1.5), with `K1 = 0.01`, `K2 = 0.03` and peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::SmallerThanWindow(SSIM_WINDOW));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (h, w) = (a.h, a.w);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.pixels, h, w, &taps);
    let mu_b = filter_valid(&b.pixels, h, w, &taps);
    let e_aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
    let e_bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
    let e_ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        total += ssim_from_moments(ma, mb, e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb, 1.0);
    }
    Ok(total / mu_a.len() as f64)
}

/// 256-bin intensity histogram.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pub bins: [u64; 256],
    pub total: u64,
}

impl Histogram {
    pub fn normalized(&self) -> Vec<f64> {
        self.bins.iter().map(|&b| b as f64 / self.total as f64).collect()
    }
}

/// Bins each pixel at `floor(v * 255 + 0.5)`; values outside `[0, 1]` land
/// in the end bins.
pub fn histogram(img: &Image) -> Histogram {
    let mut bins = [0u64; 256];
    for &v in &img.pixels {
        let bin = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as usize;
        bins[bin] += 1;
    }
    Histogram { bins, total: img.pixels.len() as u64 }
}

/// L1 distance between normalized histograms, in `[0, 2]`.
pub fn histogram_distance(a: &Histogram, b: &Histogram) -> f64 {
    a.normalized().iter().zip(b.normalized()).map(|(p, q)| (p - q).abs()).sum()
}

/// Score for one image at one noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityEntry {
    pub path: String,
    pub sigma: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QualityReport {
    pub entries: Vec<QualityEntry>,
}

/// `inf` for infinite PSNR, four decimals otherwise.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl QualityReport {
    pub fn push(&mut self, path: impl Into<String>, sigma: impl Into<String>, psnr_db: f64, ssim: f64) {
        self.entries.push(QualityEntry { path: path.into(), sigma: sigma.into(), psnr_db, ssim });
    }

    /// Mean of per-image PSNR and SSIM for one sigma label.
    pub fn average(&self, sigma: &str) -> Option<(f64, f64)> {
        let rows: Vec<&QualityEntry> = self.entries.iter().filter(|e| e.sigma == sigma).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((rows.iter().map(|e| e.psnr_db).sum::<f64>() / n, rows.iter().map(|e| e.ssim).sum::<f64>() / n))
    }

    fn sigmas(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.sigma) {
                seen.push(e.sigma.clone());
            }
        }
        seen
    }

    /// One line per image: `path sigma psnr ssim`.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {} {:.6}", e.path, e.sigma, format_db(e.psnr_db), e.ssim);
        }
        out
    }

    /// Aligned table: one row per image, one `PSNR/SSIM` column per sigma,
    /// and an `Average` row.
    pub fn table(&self) -> String {
        let sigmas = self.sigmas();
        let mut rows: BTreeMap<&str, BTreeMap<&str, &QualityEntry>> = BTreeMap::new();
        for e in &self.entries {
            rows.entry(&e.path).or_default().insert(&e.sigma, e);
        }
        let cell = |p: f64, s: f64| format!("{}/{:.4}", format_db(p), s);
        let mut lines: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Image".to_string()];
        header.extend(sigmas.iter().map(|s| format!("sigma={s} PSNR/SSIM")));
        lines.push(header);
        for (path, by_sigma) in &rows {
            let mut line = vec![path.to_string()];
            for s in &sigmas {
                line.push(by_sigma.get(s.as_str()).map_or("-".to_string(), |e| cell(e.psnr_db, e.ssim)));
            }
            lines.push(line);
        }
        let mut avg = vec!["Average".to_string()];
        for s in &sigmas {
            let (p, q) = self.average(s).expect("sigma present");
            avg.push(cell(p, q));
        }
        lines.push(avg);
        align(&lines)
    }
}

/// Left-aligns the first column and right-aligns the rest.
pub fn align(lines: &[Vec<String>]) -> String {
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| lines.iter().filter_map(|l| l.get(c)).map(String::len).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for line in lines {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
