//! Complex AWGN channel with average-power normalization.
//!
//! Symbols are complex; a block of `k` of them is scaled so its average
//! power equals `p_avg` exactly before transmission. Channel quality is the
//! ratio `p_avg / sigma^2` expressed in dB, and noise is circularly
//! symmetric: variance `sigma^2` split evenly between real and imaginary
//! parts. All randomness comes from a caller-owned seedable RNG stream, so
//! runs replay bit-for-bit.

use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelError {
    /// Power normalization of an all-zero block has no defined scale.
    ZeroSignal,
    /// Real→complex pairing needs an even number of values.
    OddLength { len: usize },
    /// Noise standard deviation must be non-negative.
    NegativeSigma { sigma: f64 },
    /// Two blocks that should align have different lengths.
    LengthMismatch { a: usize, b: usize },
    /// Configuration violates an invariant (detail in message).
    BadConfig(String),
}

impl fmt::Display for ChannelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelError::ZeroSignal => {
                write!(f, "cannot power-normalize an all-zero symbol block")
            }
            ChannelError::OddLength { len } => {
                write!(f, "real-valued latent has odd length {len}, cannot pair into complex symbols")
            }
            ChannelError::NegativeSigma { sigma } => {
                write!(f, "noise std must be non-negative, got {sigma}")
            }
            ChannelError::LengthMismatch { a, b } => {
                write!(f, "symbol blocks have different lengths: {a} vs {b}")
            }
            ChannelError::BadConfig(msg) => write!(f, "invalid channel config: {msg}"),
        }
    }
}

impl std::error::Error for ChannelError {}

/// Static description of one channel use: average power budget, quality in
/// dB, and the number of complex symbols per image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelConfig {
    pub p_avg: f64,
    pub snr_db: f64,
    pub k: usize,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(p_avg: f64, snr_db: f64, k: usize, seed: u64) -> Result<Self, ChannelError> {
        let cfg = ChannelConfig {
            p_avg,
            snr_db,
            k,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.p_avg > 0.0 && self.p_avg.is_finite()) {
            return Err(ChannelError::BadConfig(format!(
                "p_avg must be positive and finite, got {}",
                self.p_avg
            )));
        }
        if self.k == 0 {
            return Err(ChannelError::BadConfig("k must be at least 1".into()));
        }
        let sigma2 = self.p_avg * 10f64.powf(-self.snr_db / 10.0);
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(ChannelError::BadConfig(format!(
                "snr {} dB gives non-finite or non-positive noise variance",
                self.snr_db
            )));
        }
        Ok(())
    }

    /// Noise standard deviation implied by the configured SNR.
    pub fn sigma(&self) -> f64 {
        snr_to_sigma(self.snr_db, self.p_avg)
    }
}

/// A block of complex channel symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    symbols: Vec<Complex64>,
}

impl SymbolBlock {
    pub fn from_symbols(symbols: Vec<Complex64>) -> Self {
        SymbolBlock { symbols }
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Average power `(1/k) * sum |z_i|^2`.
    pub fn avg_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }
}

/// Fraction of channel symbols per source dimension: `k / (C*H*W)`.
pub fn bandwidth_ratio(k: usize, shape: (usize, usize, usize)) -> f64 {
    let (c, h, w) = shape;
    k as f64 / (c * h * w) as f64
}

/// Noise standard deviation for a given channel quality:
/// `sigma = sqrt(p_avg * 10^(-snr_db/10))`.
pub fn snr_to_sigma(snr_db: f64, p_avg: f64) -> f64 {
    (p_avg * 10f64.powf(-snr_db / 10.0)).sqrt()
}

/// Scales a block so its average power equals `p_avg` exactly:
/// `z = sqrt(k * p_avg / ||z~||^2) * z~`.
pub fn power_normalize(z_tilde: &[Complex64], p_avg: f64) -> Result<SymbolBlock, ChannelError> {
    let norm_sqr: f64 = z_tilde.iter().map(|z| z.norm_sqr()).sum();
    if norm_sqr == 0.0 || z_tilde.is_empty() {
        return Err(ChannelError::ZeroSignal);
    }
    let scale = (z_tilde.len() as f64 * p_avg / norm_sqr).sqrt();
    Ok(SymbolBlock {
        symbols: z_tilde.iter().map(|z| z * scale).collect(),
    })
}

/// Pairs consecutive reals as (real, imaginary) parts of complex symbols.
pub fn real_to_complex(latent: &[f64]) -> Result<Vec<Complex64>, ChannelError> {
    if latent.len() % 2 != 0 {
        return Err(ChannelError::OddLength { len: latent.len() });
    }
    Ok(latent
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect())
}

/// Inverse of [`real_to_complex`].
pub fn complex_to_real(symbols: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(symbols.len() * 2);
    for z in symbols {
        out.push(z.re);
        out.push(z.im);
    }
    out
}

/// Adds circularly symmetric Gaussian noise: each component i.i.d.
/// `N(0, sigma^2 / 2)` so per-symbol noise power is `sigma^2`.
pub fn awgn_transmit(
    z: &SymbolBlock,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<SymbolBlock, ChannelError> {
    if sigma < 0.0 {
        return Err(ChannelError::NegativeSigma { sigma });
    }
    if sigma == 0.0 {
        return Ok(z.clone());
    }
    let comp = Normal::new(0.0, sigma / std::f64::consts::SQRT_2)
        .map_err(|e| ChannelError::BadConfig(format!("noise std rejected: {e}")))?;
    let symbols = z
        .symbols
        .iter()
        .map(|s| s + Complex64::new(comp.sample(rng), comp.sample(rng)))
        .collect();
    Ok(SymbolBlock { symbols })
}

/// Realized SNR in dB between sent and received blocks:
/// `10 log10(||z||^2 / ||y - z||^2)`; `+inf` when they coincide.
pub fn measured_snr(z: &SymbolBlock, y: &SymbolBlock) -> Result<f64, ChannelError> {
    if z.len() != y.len() {
        return Err(ChannelError::LengthMismatch {
            a: z.len(),
            b: y.len(),
        });
    }
    let signal: f64 = z.symbols.iter().map(|s| s.norm_sqr()).sum();
    let noise: f64 = z
        .symbols
        .iter()
        .zip(&y.symbols)
        .map(|(a, b)| (b - a).norm_sqr())
        .sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}
