//! Grayscale image I/O, patch extraction, augmentation and batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::noise::NoiseSource;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor4};

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub source_path: String,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w {
            return Err(Error::InvalidShape([1, 1, h, w]));
        }
        Ok(Image { h, w, pixels, source_path: String::new() })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self::new(h, w, pixels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.w + x]
    }

    /// View as a `(1, 1, h, w)` tensor.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(Shape { n: 1, c: 1, h: self.h, w: self.w }, self.pixels.clone())
            .expect("image dimensions are positive")
    }

    /// Inverse of [`Image::to_tensor`]; the tensor must hold one grayscale image.
    pub fn from_tensor(t: &Tensor4) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::UnsupportedImage(format!("expected a 1x1xHxW tensor, got {s}")));
        }
        Self::new(s.h, s.w, t.data().to_vec())
    }

    /// 8-bit quantization: `round(v * 255)` after clamping to `[0, 1]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    fn with_source(mut self, path: &Path) -> Self {
        self.source_path = path.display().to_string();
        self
    }

    pub fn rotate90(&self) -> Image {
        // Counter-clockwise: new(y, x) = old(x, w - 1 - y), new dims w x h.
        let (h, w) = (self.w, self.h);
        let pixels = (0..h * w).map(|i| self.get(i % w, self.w - 1 - i / w)).collect();
        Image { h, w, pixels, source_path: self.source_path.clone() }
    }

    pub fn flip_horizontal(&self) -> Image {
        let pixels = (0..self.h * self.w).map(|i| self.get(i / self.w, self.w - 1 - i % self.w)).collect();
        Image { h: self.h, w: self.w, pixels, source_path: self.source_path.clone() }
    }
}

fn pgm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    // Header fields after the magic, skipping `#` comments; returns the
    // offset just past the single whitespace byte that ends the header.
    let mut pos = 2;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        match bytes.get(pos) {
            None => return Err(Error::UnsupportedImage("truncated PGM header".into())),
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                    pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = pos;
                while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                    pos += 1;
                }
                let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
                out.push(text.parse().map_err(|_| Error::UnsupportedImage("PGM header number overflow".into()))?);
            }
            Some(_) => return Err(Error::UnsupportedImage("malformed PGM header".into())),
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((out, pos + 1)),
        _ => Err(Error::UnsupportedImage("truncated PGM header".into())),
    }
}

/// Decodes a binary (P5) PGM with at most 8 bits per sample.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::UnsupportedImage("not a binary PGM (P5)".into()));
    }
    let (fields, offset) = pgm_tokens(bytes, 3)?;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedImage(format!("unsupported PGM maxval {maxval} (8-bit only)")));
    }
    let len = h.checked_mul(w).ok_or_else(|| Error::UnsupportedImage("PGM dimensions overflow".into()))?;
    let data = bytes.get(offset..offset + len).ok_or_else(|| Error::UnsupportedImage("truncated PGM data".into()))?;
    let maxval = maxval as f64;
    Image::new(h, w, data.iter().map(|&b| b as f64 / maxval).collect())
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.to_bytes());
    out
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    use image::DynamicImage;
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::UnsupportedImage(format!("PNG decode failed: {e}")))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let luma = |r: u8, g: u8, b: u8| (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0;
    let pixels: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(img) => img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(img) => img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageRgb8(img) => img.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
        DynamicImage::ImageRgba8(img) => img.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
        other => {
            return Err(Error::UnsupportedImage(format!("unsupported PNG pixel format {:?} (8-bit only)", other.color())))
        }
    };
    Image::new(h, w, pixels)
}

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(img.w as u32, img.h as u32, img.to_bytes())
        .ok_or_else(|| Error::UnsupportedImage("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::UnsupportedImage(format!("PNG encode failed: {e}")))?;
    Ok(out.into_inner())
}

/// Loads an 8-bit PGM (P5) or PNG. Colour PNGs are converted with luma
/// weights 0.299 / 0.587 / 0.114.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(b"P5") { decode_pgm(&bytes)? } else { decode_png(&bytes)? };
    Ok(img.with_source(path))
}

/// Writes PNG when the extension is `.png`, PGM otherwise.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => encode_png(img)?,
        _ => encode_pgm(img),
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// `.pgm` and `.png` files in `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm" | "png")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads a single image file, or every image in a directory.
pub fn load_images(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    let path = path.as_ref();
    if path.is_dir() {
        list_images(path)?.iter().map(load_image).collect()
    } else {
        Ok(vec![load_image(path)?])
    }
}

/// A `P x P` crop and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Tensor4,
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub size: usize,
    pub stride: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Number of patches on the grid anchored at `(0, 0)`.
pub fn patch_count(h: usize, w: usize, size: usize, stride: usize) -> usize {
    if h < size || w < size || stride == 0 {
        return 0;
    }
    ((h - size) / stride + 1) * ((w - size) / stride + 1)
}

fn crop(img: &Image, y0: usize, x0: usize, size: usize) -> Tensor4 {
    let shape = Shape { n: 1, c: 1, h: size, w: size };
    Tensor4::from_fn(shape, |_, _, y, x| img.get(y0 + y, x0 + x)).expect("positive patch size")
}

/// Crops every `size x size` window at offsets `0, stride, 2 * stride, ...`
/// that fits entirely inside the image.
pub fn extract_patches(img: &Image, size: usize, stride: usize) -> Result<PatchSet> {
    extract_patches_all(std::slice::from_ref(img), size, stride)
}

/// Patches from several images; `Patch::image` indexes into `images`.
pub fn extract_patches_all(images: &[Image], size: usize, stride: usize) -> Result<PatchSet> {
    if size == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be at least 1".into()));
    }
    let mut patches = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if img.h < size || img.w < size {
            return Err(Error::ImageTooSmall { h: img.h, w: img.w, patch: size });
        }
        for y in (0..=img.h - size).step_by(stride) {
            for x in (0..=img.w - size).step_by(stride) {
                patches.push(Patch { pixels: crop(img, y, x, size), image: i, y, x });
            }
        }
    }
    Ok(PatchSet { patches, size, stride })
}

/// The eight dihedral variants: rotations by 0, 90, 180 and 270 degrees,
/// each followed by its horizontal mirror.
pub fn augment(img: &Image) -> Vec<Image> {
    let mut out = Vec::with_capacity(8);
    let mut current = img.clone();
    for _ in 0..4 {
        let flipped = current.flip_horizontal();
        let next = current.rotate90();
        out.push(current);
        out.push(flipped);
        current = next;
    }
    out
}

/// Noisy/clean pair for one training step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub noisy: Tensor4,
    pub clean: Tensor4,
    /// Noise level (0–255 scale) applied to each item.
    pub sigmas: Vec<f64>,
}

/// Iterator over shuffled batches; each clean patch is corrupted on the fly.
pub struct BatchStream<'a> {
    patches: &'a PatchSet,
    noise: &'a mut NoiseSource,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Shuffles the patch order with `shuffle_seed` and yields batches of
/// `batch_size`, the last one possibly smaller.
pub fn make_batches<'a>(
    patches: &'a PatchSet,
    noise: &'a mut NoiseSource,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<BatchStream<'a>> {
    if patches.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    Rng::new(shuffle_seed).shuffle(&mut order);
    Ok(BatchStream { patches, noise, order, batch_size, pos: 0 })
}

impl BatchStream<'_> {
    /// Patch indices in emission order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut clean = Vec::with_capacity(idx.len());
        let mut noisy = Vec::with_capacity(idx.len());
        let mut sigmas = Vec::with_capacity(idx.len());
        for &i in idx {
            let x = &self.patches.patches[i].pixels;
            let (y, sigma) = match self.noise.corrupt(x) {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
            clean.push(x.clone());
            noisy.push(y);
            sigmas.push(sigma);
        }
        Some(Tensor4::stack(&noisy).and_then(|noisy| Ok(Batch { noisy, clean: Tensor4::stack(&clean)?, sigmas })))
    }
}
