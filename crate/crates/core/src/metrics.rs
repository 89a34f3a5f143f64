//! Distortion and perceptual quality metrics for reconstructed images.
//!
//! `psnr` is the usual log-ratio of squared peak to mean squared error;
//! identical inputs get an `+inf` sentinel that aggregation excludes (with a
//! count) rather than poisoning means. The perceptual distance compares
//! deep-feature activations of the two images through a pluggable
//! [`FeatureExtractor`]; the built-in backend is a small frozen pyramid of
//! seeded random convolutions, which keeps comparisons self-contained and
//! deterministic while an adapter for a pretrained backbone can be dropped
//! in through the same trait.

use std::fmt;

use ndarray::{Array3, Array4};
use nullcast_nn::{leaky_relu, Conv2d, Init};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    /// Peak must be positive and finite.
    BadPeak { peak: f64 },
    /// Extractor rejected the input (detail in message).
    Extractor(String),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::ShapeMismatch { a, b } => {
                write!(f, "images have different shapes: {a:?} vs {b:?}")
            }
            MetricError::BadPeak { peak } => {
                write!(f, "peak must be positive and finite, got {peak}")
            }
            MetricError::Extractor(msg) => write!(f, "feature extractor failed: {msg}"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Peak signal-to-noise ratio in dB over all `C*H*W` entries.
///
/// Returns `+inf` when the images coincide exactly; callers aggregating
/// over a set should use [`report`], which excludes the sentinel.
pub fn psnr(x: &Array3<f64>, x_hat: &Array3<f64>, peak: f64) -> Result<f64, MetricError> {
    if x.dim() != x_hat.dim() {
        return Err(MetricError::ShapeMismatch {
            a: x.dim(),
            b: x_hat.dim(),
        });
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(MetricError::BadPeak { peak });
    }
    let mse = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Multi-scale feature maps for one image; each level is `(C_l, H_l, W_l)`.
pub trait FeatureExtractor {
    fn features(&self, x: &Array3<f64>) -> Result<Vec<Array3<f64>>, MetricError>;
    /// Identifier recorded in reports so results name their backend.
    fn name(&self) -> &str;
}

/// Frozen three-level pyramid of seeded random convolutions with
/// leaky-ReLU nonlinearities and 2x mean pooling between levels.
///
/// Random filters are a weak but unbiased stand-in for a pretrained
/// backbone: activations still respond to local structure, so feature-space
/// distances grow with structural corruption while staying deterministic
/// and dependency-free.
pub struct RandomConvPyramid {
    convs: Vec<Conv2d>,
    name: String,
}

impl RandomConvPyramid {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut init = Init::new(seed);
        let widths = [in_channels, 8, 16, 24];
        let convs = (0..3)
            .map(|i| Conv2d::new(widths[i], widths[i + 1], 3, 1, 1, &mut init))
            .collect();
        RandomConvPyramid {
            convs,
            name: format!("random-conv-pyramid(seed={seed})"),
        }
    }
}

fn mean_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array4::from_shape_fn((n, c, ho, wo), |(ni, ci, i, j)| {
        (x[[ni, ci, 2 * i, 2 * j]]
            + x[[ni, ci, 2 * i, 2 * j + 1]]
            + x[[ni, ci, 2 * i + 1, 2 * j]]
            + x[[ni, ci, 2 * i + 1, 2 * j + 1]])
            / 4.0
    })
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, x: &Array3<f64>) -> Result<Vec<Array3<f64>>, MetricError> {
        let (c, h, w) = x.dim();
        if c != self.convs[0].w.v.dim().1 {
            return Err(MetricError::Extractor(format!(
                "expected {} input channels, got {c}",
                self.convs[0].w.v.dim().1
            )));
        }
        if h < 4 || w < 4 {
            return Err(MetricError::Extractor(format!(
                "image {h}x{w} too small for a 3-level pyramid"
            )));
        }
        // Center the [0,1] pixel range so filters see signed inputs.
        let mut cur = x.mapv(|v| v - 0.5).insert_axis(ndarray::Axis(0));
        let mut levels = Vec::with_capacity(3);
        for (i, conv) in self.convs.iter().enumerate() {
            let a = conv.forward(&cur);
            let a = leaky_relu(&a.view().into_dyn(), 0.2)
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            levels.push(a.index_axis(ndarray::Axis(0), 0).to_owned());
            if i + 1 < self.convs.len() {
                cur = mean_pool2(&a);
            }
        }
        Ok(levels)
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Perceptual distance: unit-normalize each spatial feature vector per
/// level, average squared differences, and sum across levels.
pub struct PerceptualMetric {
    extractor: Box<dyn FeatureExtractor>,
}

impl PerceptualMetric {
    /// Default self-contained backend; `seed` freezes the filters.
    pub fn default_backend(seed: u64, in_channels: usize) -> Self {
        PerceptualMetric {
            extractor: Box::new(RandomConvPyramid::new(seed, in_channels)),
        }
    }

    /// Plugs in an alternative backend (e.g. an adapter around pretrained
    /// weights) without changing any call sites.
    pub fn with_extractor(extractor: Box<dyn FeatureExtractor>) -> Self {
        PerceptualMetric { extractor }
    }

    pub fn backend_name(&self) -> &str {
        self.extractor.name()
    }

    pub fn distance(&self, x: &Array3<f64>, x_hat: &Array3<f64>) -> Result<f64, MetricError> {
        if x.dim() != x_hat.dim() {
            return Err(MetricError::ShapeMismatch {
                a: x.dim(),
                b: x_hat.dim(),
            });
        }
        let fa = self.extractor.features(x)?;
        let fb = self.extractor.features(x_hat)?;
        if fa.len() != fb.len() {
            return Err(MetricError::Extractor(
                "backend returned differing level counts".into(),
            ));
        }
        let mut total = 0.0;
        for (la, lb) in fa.iter().zip(fb.iter()) {
            let (c, h, w) = la.dim();
            let mut level_sum = 0.0;
            for i in 0..h {
                for j in 0..w {
                    // Normalize each location's channel vector to unit
                    // length, as feature-space metrics do, so scale of the
                    // activations cancels out.
                    let mut na = 0.0;
                    let mut nb = 0.0;
                    for ci in 0..c {
                        na += la[[ci, i, j]] * la[[ci, i, j]];
                        nb += lb[[ci, i, j]] * lb[[ci, i, j]];
                    }
                    let na = na.sqrt().max(1e-10);
                    let nb = nb.sqrt().max(1e-10);
                    for ci in 0..c {
                        let d = la[[ci, i, j]] / na - lb[[ci, i, j]] / nb;
                        level_sum += d * d;
                    }
                }
            }
            total += level_sum / (c * h * w) as f64;
        }
        Ok(total)
    }
}

/// Aggregate over a test set; infinite PSNR entries (identical pairs) are
/// excluded from the mean/std and counted instead.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub perceptual_mean: f64,
    pub perceptual_std: f64,
    pub n: usize,
    /// Pairs whose PSNR was the +inf sentinel.
    pub n_psnr_inf: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Builds a [`MetricReport`] from per-image PSNR and perceptual values.
/// Std is the population standard deviation (n in the denominator).
pub fn report(psnrs: &[f64], perceptual: &[f64]) -> MetricReport {
    assert_eq!(psnrs.len(), perceptual.len(), "metric vectors must align");
    let finite: Vec<f64> = psnrs.iter().copied().filter(|v| v.is_finite()).collect();
    let n_inf = psnrs.len() - finite.len();
    let (pm, ps) = mean_std(&finite);
    let (lm, ls) = mean_std(perceptual);
    MetricReport {
        psnr_mean: pm,
        psnr_std: ps,
        perceptual_mean: lm,
        perceptual_std: ls,
        n: psnrs.len(),
        n_psnr_inf: n_inf,
    }
}
