//! Group normalization over `(N, C, H, W)` tensors.

use ndarray::{Array2, Array4, ArrayViewMutD, Ix1};

use crate::param::Param;

/// GroupNorm with learnable per-channel scale and shift.
///
/// Statistics are computed per sample over each contiguous group of
/// `C / groups` channels with the biased variance estimator.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub eps: f64,
}

pub struct GroupNormCache {
    xhat: Array4<f64>,
    inv_std: Array2<f64>,
}

/// Largest divisor of `channels` that does not exceed `limit`; keeps tiny
/// test networks valid without special-casing their channel counts.
pub fn group_count(channels: usize, limit: usize) -> usize {
    (1..=limit.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "channels {channels} not divisible into {groups} groups");
        GroupNorm {
            groups,
            gamma: Param::new(ndarray::Array1::ones(channels)),
            beta: Param::new(ndarray::Array1::zeros(channels)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, GroupNormCache) {
        let (n, c, h, w) = x.dim();
        let g = self.groups;
        let cg = c / g;
        let m = (cg * h * w) as f64;
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array2::zeros((n, g));
        for ni in 0..n {
            for gi in 0..g {
                let grp = x.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                let mean = grp.sum() / m;
                let var = grp.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv = 1.0 / (var + self.eps).sqrt();
                inv_std[[ni, gi]] = inv;
                let mut dst = xhat.slice_mut(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                dst.assign(&grp);
                dst.mapv_inplace(|v| (v - mean) * inv);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let mut ch = y.slice_mut(ndarray::s![.., ci, .., ..]);
            let (ga, be) = (self.gamma.v[ci], self.beta.v[ci]);
            ch.mapv_inplace(|v| ga * v + be);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.xhat.dim();
        let g = self.groups;
        let cg = c / g;
        let m = (cg * h * w) as f64;
        for ci in 0..c {
            let gy_c = gy.slice(ndarray::s![.., ci, .., ..]);
            let xh_c = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            self.beta.g[ci] += gy_c.sum();
            self.gamma.g[ci] += (&gy_c * &xh_c).sum();
        }
        // dxhat = gy * gamma, then the usual normalized-input correction.
        let mut dxhat = gy.clone();
        for ci in 0..c {
            let mut ch = dxhat.slice_mut(ndarray::s![.., ci, .., ..]);
            let ga = self.gamma.v[ci];
            ch.mapv_inplace(|v| v * ga);
        }
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for gi in 0..g {
                let sl = ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..];
                let dxh = dxhat.slice(sl);
                let xh = cache.xhat.slice(sl);
                let mean_dxh = dxh.sum() / m;
                let mean_dxh_xh = (&dxh * &xh).sum() / m;
                let inv = cache.inv_std[[ni, gi]];
                let mut dst = dx.slice_mut(sl);
                ndarray::Zip::from(&mut dst)
                    .and(&dxh)
                    .and(&xh)
                    .for_each(|d, &a, &b| *d = inv * (a - mean_dxh - b * mean_dxh_xh));
            }
        }
        dx
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.gamma.visit(&format!("{prefix}.gamma"), f);
        self.beta.visit(&format!("{prefix}.beta"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn normalized_groups_have_zero_mean_unit_var() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let gn = GroupNorm::new(8, 4);
        let x = Array4::from_shape_fn((2, 8, 4, 4), |_| rng.random_range(-3.0..3.0));
        let y = gn.forward(&x);
        for ni in 0..2 {
            for gi in 0..4 {
                let grp = y.slice(ndarray::s![ni, gi * 2..gi * 2 + 2, .., ..]);
                let m = grp.len() as f64;
                let mean = grp.sum() / m;
                let var = grp.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn group_count_picks_largest_divisor() {
        assert_eq!(group_count(16, 8), 8);
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(7, 8), 7);
        assert_eq!(group_count(3, 8), 3);
        assert_eq!(group_count(10, 4), 2);
    }
}
