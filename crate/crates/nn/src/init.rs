//! Seeded weight initialization.

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Deterministic weight initializer backed by a counter-based RNG.
///
/// All draws come from one stream, so the full parameter set of a network is
/// a pure function of the seed and the construction order.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    /// He-normal convolution kernel, `std = sqrt(2 / (in_ch * k * k))`.
    pub fn conv(&mut self, out_ch: usize, in_ch: usize, k: usize) -> Array4<f64> {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let data = self.normal(out_ch * in_ch * k * k, std);
        Array4::from_shape_vec((out_ch, in_ch, k, k), data).unwrap()
    }

    /// Zero-filled convolution kernel (used for output heads that should
    /// start as the zero map).
    pub fn conv_zero(&mut self, out_ch: usize, in_ch: usize, k: usize) -> Array4<f64> {
        Array4::zeros((out_ch, in_ch, k, k))
    }

    /// He-normal dense weight of shape `(out, in)`, `std = sqrt(2 / in)`.
    pub fn linear(&mut self, out: usize, inp: usize) -> Array2<f64> {
        let std = (2.0 / inp as f64).sqrt();
        let data = self.normal(out * inp, std);
        Array2::from_shape_vec((out, inp), data).unwrap()
    }

    pub fn bias(&mut self, n: usize) -> Array1<f64> {
        Array1::zeros(n)
    }
}
