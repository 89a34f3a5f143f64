//! Elementwise activations as free functions.
//!
//! Each activation comes as a pure map plus a `*_back` that turns the output
//! gradient into the input gradient given the saved forward input (or output
//! for the sigmoid, whose derivative is cheapest in terms of its output).

use ndarray::{ArrayD, ArrayViewD};

pub fn leaky_relu(x: &ArrayViewD<'_, f64>, alpha: f64) -> ArrayD<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { alpha * v })
}

pub fn leaky_relu_back(x: &ArrayViewD<'_, f64>, gy: &ArrayViewD<'_, f64>, alpha: f64) -> ArrayD<f64> {
    let mut gx = gy.to_owned();
    gx.zip_mut_with(x, |g, &v| {
        if v < 0.0 {
            *g *= alpha;
        }
    });
    gx
}

pub fn silu(x: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_back(x: &ArrayViewD<'_, f64>, gy: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    let mut gx = gy.to_owned();
    gx.zip_mut_with(x, |g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

pub fn sigmoid(x: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// `y` is the sigmoid *output* saved from the forward pass.
pub fn sigmoid_back(y: &ArrayViewD<'_, f64>, gy: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    let mut gx = gy.to_owned();
    gx.zip_mut_with(y, |g, &s| *g *= s * (1.0 - s));
    gx
}
