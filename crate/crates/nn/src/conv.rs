//! 2-D convolution via im2col and a dense matrix product.

use ndarray::{Array2, Array4, ArrayViewMutD, Axis};

use crate::init::Init;
use crate::param::Param;

/// Lowers `(N, C, H, W)` input to a `(C*k*k, N*Ho*Wo)` patch matrix.
/// Out-of-image taps (zero padding) stay zero.
pub fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, n * ho * wo));
    let xs = x.as_slice().expect("input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * row_len;
                for ni in 0..n {
                    for oi in 0..ho {
                        let ii = oi * stride + ki;
                        if ii < pad || ii >= h + pad {
                            continue;
                        }
                        let iy = ii - pad;
                        let x_base = ((ni * c + ci) * h + iy) * w;
                        let c_base = base + (ni * ho + oi) * wo;
                        for oj in 0..wo {
                            let jj = oj * stride + kj;
                            if jj < pad || jj >= w + pad {
                                continue;
                            }
                            cs[c_base + oj] = xs[x_base + jj - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the
/// input grid, accumulating where patches overlap.
pub fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array4::zeros((n, c, h, w));
    let ds = dcols.as_slice().expect("gradient must be standard layout");
    let xs = dx.as_slice_mut().unwrap();
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * row_len;
                for ni in 0..n {
                    for oi in 0..ho {
                        let ii = oi * stride + ki;
                        if ii < pad || ii >= h + pad {
                            continue;
                        }
                        let iy = ii - pad;
                        let x_base = ((ni * c + ci) * h + iy) * w;
                        let c_base = base + (ni * ho + oi) * wo;
                        for oj in 0..wo {
                            let jj = oj * stride + kj;
                            if jj < pad || jj >= w + pad {
                                continue;
                            }
                            xs[x_base + jj - pad] += ds[c_base + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Convolution layer over `(N, C, H, W)` tensors with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param<ndarray::Ix4>,
    pub b: Param<ndarray::Ix1>,
    pub stride: usize,
    pub pad: usize,
}

/// Backward-pass cache: the layer re-lowers the saved input, trading a
/// second im2col for not holding the patch matrix alive.
pub struct Conv2dCache {
    x: Array4<f64>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: &mut Init,
    ) -> Self {
        Conv2d {
            w: Param::new(init.conv(out_ch, in_ch, k)),
            b: Param::new(init.bias(out_ch)),
            stride,
            pad,
        }
    }

    /// Same as [`Conv2d::new`] but with zero-filled kernels.
    pub fn new_zero(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: &mut Init,
    ) -> Self {
        Conv2d {
            w: Param::new(init.conv_zero(out_ch, in_ch, k)),
            b: Param::new(init.bias(out_ch)),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.v.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (o, ci, k, _) = self.w.v.dim();
        assert_eq!(c, ci, "conv input has {c} channels, kernel expects {ci}");
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, k, self.stride, self.pad);
        let wmat = self
            .w
            .v
            .view()
            .into_shape_with_order((o, ci * k * k))
            .unwrap();
        let mut ymat = wmat.dot(&cols);
        for (mut row, &bv) in ymat.outer_iter_mut().zip(self.b.v.iter()) {
            row += bv;
        }
        let y = ymat
            .into_shape_with_order((o, n, ho, wo))
            .unwrap()
            .permuted_axes([1, 0, 2, 3]);
        y.as_standard_layout().to_owned()
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let y = self.forward(x);
        (y, Conv2dCache { x: x.clone() })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.x.dim();
        let (o, _, k, _) = self.w.v.dim();
        let (ho, wo) = self.out_hw(h, w);
        assert_eq!(gy.dim(), (n, o, ho, wo), "conv output gradient shape");
        let gymat = gy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((o, n * ho * wo))
            .unwrap();
        let cols = im2col(&cache.x, k, self.stride, self.pad);
        let dw = gymat.dot(&cols.t());
        self.w.g += &dw.into_shape_with_order((o, c, k, k)).unwrap();
        self.b.g += &gymat.sum_axis(Axis(1));
        let wmat = self
            .w
            .v
            .view()
            .into_shape_with_order((o, c * k * k))
            .unwrap();
        let dcols = wmat.t().dot(&gymat);
        col2im(&dcols, n, c, h, w, k, self.stride, self.pad)
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.w.visit(&format!("{prefix}.w"), f);
        self.b.visit(&format!("{prefix}.b"), f);
    }
}
