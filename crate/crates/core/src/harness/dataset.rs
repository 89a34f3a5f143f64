//! Image ingestion: deterministic directory loading, seeded 8:1:1 splits,
//! and a procedural PNG generator for self-contained experiments.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::diffusion::shuffle;

/// Seeded permutation split. Train and validation sizes are floors of
/// their ratios; the remainder is the test set, so the three parts are
/// disjoint and exhaustive for any `n`.
pub fn split_indices(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut order, &mut rng);
    let n_train = (n as f64 * ratios.0).floor() as usize;
    let n_val = (n as f64 * ratios.1).floor() as usize;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

/// Files that could not be decoded, with the reason each was skipped.
#[derive(Debug, Default)]
pub struct SkippedFiles {
    pub entries: Vec<(PathBuf, String)>,
}

impl SkippedFiles {
    pub fn count(&self) -> usize {
        self.entries.len()
    }
}

fn decode_image(
    path: &Path,
    size: usize,
    channels: usize,
) -> Result<Array3<f64>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let img = img.resize_exact(
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = Array3::zeros((channels, size, size));
    match channels {
        1 => {
            let gray = img.to_luma8();
            for (x, y, p) in gray.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                }
            }
        }
        other => return Err(format!("unsupported channel count {other}")),
    }
    Ok(out)
}

/// Loads every decodable image under `root` (sorted by file name for
/// determinism), resized to `size`x`size` with values in `[0,1]`.
/// Undecodable files are skipped and reported, not fatal.
pub fn load_dir(
    root: &Path,
    size: usize,
    channels: usize,
) -> Result<(Vec<Array3<f64>>, SkippedFiles), HarnessError> {
    if channels != 1 && channels != 3 {
        return Err(HarnessError::Config(format!(
            "dataset channels must be 1 or 3, got {channels}"
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| HarnessError::Io {
            path: root.to_path_buf(),
            message: e.to_string(),
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut images = Vec::new();
    let mut skipped = SkippedFiles::default();
    for path in paths {
        match decode_image(&path, size, channels) {
            Ok(img) => images.push(img),
            Err(reason) => skipped.entries.push((path, reason)),
        }
    }
    Ok((images, skipped))
}

/// Renders one procedural image: a soft gradient background with a few
/// rings and disks, all parameters drawn from the per-image RNG.
pub fn synthetic_image(size: usize, channels: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gx: f64 = rng.random_range(-0.5..0.5);
    let gy: f64 = rng.random_range(-0.5..0.5);
    let bias: f64 = rng.random_range(0.2..0.6);
    let n_shapes = rng.random_range(1..=3usize);
    let shapes: Vec<(f64, f64, f64, f64, bool)> = (0..n_shapes)
        .map(|_| {
            (
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
                rng.random_range(0.08..0.3),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.0..1.0) > 0.5,
            )
        })
        .collect();
    let channel_shift: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.08..0.08)).collect();

    Array3::from_shape_fn((channels, size, size), |(c, yi, xi)| {
        let x = (xi as f64 + 0.5) / size as f64;
        let y = (yi as f64 + 0.5) / size as f64;
        let mut v = bias + gx * (x - 0.5) + gy * (y - 0.5);
        for &(cx, cy, r, amp, ring) in &shapes {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            if ring {
                let band = (d - r).abs();
                if band < 0.04 {
                    v += amp * (1.0 - band / 0.04);
                }
            } else if d < r {
                v += amp * (1.0 - d / r);
            }
        }
        (v + channel_shift[c]).clamp(0.0, 1.0)
    })
}

/// Generates `count` procedural images and returns them in memory.
pub fn synthetic_dataset(count: usize, size: usize, channels: usize, seed: u64) -> Vec<Array3<f64>> {
    (0..count)
        .map(|i| synthetic_image(size, channels, seed.wrapping_add(i as u64)))
        .collect()
}

/// Writes an image tensor (values in `[0,1]`) as a PNG file.
pub fn save_png(img: &Array3<f64>, path: &Path) -> Result<(), HarnessError> {
    let (c, h, w) = img.dim();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let io_err = |e: image::ImageError| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                p.0[0] = to_u8(img[[0, y as usize, x as usize]]);
            }
            buf.save(path).map_err(io_err)
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                for ci in 0..3 {
                    p.0[ci] = to_u8(img[[ci, y as usize, x as usize]]);
                }
            }
            buf.save(path).map_err(io_err)
        }
        other => Err(HarnessError::Config(format!(
            "cannot write {other}-channel image"
        ))),
    }
}

/// Materializes a synthetic dataset as PNG files under `dir`.
pub fn write_synthetic_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    for i in 0..count {
        let img = synthetic_image(size, channels, seed.wrapping_add(i as u64));
        save_png(&img, &dir.join(format!("img_{i:05}.png")))?;
    }
    Ok(())
}
