//! Spatial resizing and channel plumbing used by encoder/decoder towers.

use ndarray::Array4;

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(ni, ci, i, j)| {
        x[[ni, ci, i / 2, j / 2]]
    })
}

/// Adjoint of [`upsample2x`]: sums gradients over each 2x2 block.
pub fn upsample2x_back(gy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = gy.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "upsample gradient dims must be even");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    gx[[ni, ci, i / 2, j / 2]] += gy[[ni, ci, i, j]];
                }
            }
        }
    }
    gx
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (n, ca, h, w) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    assert_eq!((n, h, w), (nb, hb, wb), "channel concat requires matching N, H, W");
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

/// Splits a channel-axis gradient back into the two concatenated parts.
pub fn split_channels(g: &Array4<f64>, ca: usize) -> (Array4<f64>, Array4<f64>) {
    let ga = g.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
    let gb = g.slice(ndarray::s![.., ca.., .., ..]).to_owned();
    (ga, gb)
}
