//! Dense layer over `(N, in)` matrices.

use ndarray::{Array2, ArrayViewMutD, Axis};

use crate::init::Init;
use crate::param::Param;

#[derive(Debug, Clone)]
pub struct Linear {
    /// Weight of shape `(out, in)`.
    pub w: Param<ndarray::Ix2>,
    pub b: Param<ndarray::Ix1>,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(inp: usize, out: usize, init: &mut Init) -> Self {
        Linear {
            w: Param::new(init.linear(out, inp)),
            b: Param::new(init.bias(out)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.v.t());
        y += &self.b.v;
        y
    }

    pub fn forward_t(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        (self.forward(x), LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, gy: &Array2<f64>) -> Array2<f64> {
        self.w.g += &gy.t().dot(&cache.x);
        self.b.g += &gy.sum_axis(Axis(0));
        gy.dot(&self.w.v)
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_matches_manual_product() {
        let mut init = Init::new(0);
        let mut lin = Linear::new(2, 3, &mut init);
        lin.w.v = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        lin.b.v = array![0.1, 0.2, 0.3];
        let x = array![[2.0, 5.0]];
        let y = lin.forward(&x);
        assert_eq!(y, array![[2.1, 5.2, 7.3]]);
    }

    #[test]
    fn backward_shapes_match() {
        let mut init = Init::new(0);
        let mut lin = Linear::new(4, 2, &mut init);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64);
        let (_, cache) = lin.forward_t(&x);
        let gy = Array2::ones((3, 2));
        let gx = lin.backward(&cache, &gy);
        assert_eq!(gx.dim(), (3, 4));
        assert_eq!(lin.w.g.dim(), (2, 4));
        assert_eq!(lin.b.g, array![3.0, 3.0]);
    }
}
