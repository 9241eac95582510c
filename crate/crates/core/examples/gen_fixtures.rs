//! Regenerates the synthetic fixture images under `fixtures/`.
//!
//! Usage: `cargo run -p win-denoise --example gen_fixtures [-- <dir>]`

use std::path::PathBuf;

use win_denoise::data::{save_image, Image};
use win_denoise::rng::Rng;

const SIZE: usize = 64;

/// Smooth random texture: bilinear interpolation of a coarse random grid.
fn value_noise(rng: &mut Rng, cell: usize) -> Vec<f64> {
    let g = SIZE / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform()).collect();
    let mut out = vec![0.0; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| grid[r * g + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * SIZE + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Bright sky, a dark ridge line and textured ground, with a sun disk.
fn landscape(rng: &mut Rng) -> Image {
    let fine = value_noise(rng, 4);
    let coarse = value_noise(rng, 16);
    Image::from_fn(SIZE, SIZE, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let ridge = 28.0 + 6.0 * (xf / 9.0).sin() + 3.0 * (xf / 3.7).cos();
        let t = fine[y * SIZE + x];
        let c = coarse[y * SIZE + x];
        let v = if yf < ridge {
            let sun = ((yf - 12.0).powi(2) + (xf - 46.0).powi(2)).sqrt() < 7.0;
            if sun { 0.95 } else { 0.55 + 0.35 * (1.0 - yf / ridge) + 0.04 * c }
        } else {
            0.12 + 0.25 * c + 0.15 * t
        };
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Mid-tone shaded wall with a striped panel and a few flat objects.
fn interior(rng: &mut Rng) -> Image {
    let fine = value_noise(rng, 3);
    Image::from_fn(SIZE, SIZE, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let shade = 0.35 + 0.3 * (xf / SIZE as f64);
        let t = 0.08 * (fine[y * SIZE + x] - 0.5);
        let v = if (8..30).contains(&y) && (6..26).contains(&x) {
            if (x / 3) % 2 == 0 { 0.8 } else { 0.6 }
        } else if ((yf - 44.0).powi(2) / 100.0 + (xf - 42.0).powi(2) / 196.0) < 1.0 {
            0.25 + 0.1 * (yf - 44.0) / 10.0
        } else if (36..60).contains(&y) && (4..18).contains(&x) {
            0.7
        } else {
            shade
        };
        (v + t).clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Diagonal edges, a gradient and texture, for held-out validation.
fn mixed(rng: &mut Rng) -> Image {
    let fine = value_noise(rng, 5);
    let coarse = value_noise(rng, 21);
    Image::from_fn(SIZE, SIZE, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let base = 0.2 + 0.6 * coarse[y * SIZE + x];
        let v = if xf + yf < 50.0 {
            base
        } else if (xf - yf).abs() < 10.0 {
            0.85 - 0.2 * fine[y * SIZE + x]
        } else {
            0.4 + 0.3 * fine[y * SIZE + x] * (yf / 40.0).cos().abs()
        };
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    let mut rng = Rng::new(20170707);
    let images = [("train/landscape.pgm", landscape(&mut rng)), ("train/interior.pgm", interior(&mut rng)), ("val/mixed.pgm", mixed(&mut rng))];
    for (name, img) in images {
        let path = root.join(name);
        std::fs::create_dir_all(path.parent().unwrap()).expect("create fixture directory");
        save_image(&img, &path).expect("write fixture");
        println!("{}", path.display());
    }
}
