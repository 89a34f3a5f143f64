//! Time-conditioned U-Net for noise prediction.
//!
//! Two downsampling levels with skip connections, GroupNorm + SiLU residual
//! blocks, and a sinusoidal timestep embedding that each block injects as a
//! per-channel bias. The output convolution starts at zero so an untrained
//! network predicts zero noise, which makes the initial training loss equal
//! the unit variance of the targets.

use ndarray::{Array2, Array4, ArrayViewMutD, Axis};
use nullcast_nn::{
    concat_channels, silu, silu_back, split_channels, upsample2x, upsample2x_back, Conv2d,
    GroupNorm, Init, Linear, Params,
};
use nullcast_nn::norm::group_count;

fn silu4(x: &Array4<f64>) -> Array4<f64> {
    silu(&x.view().into_dyn())
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

fn silu4_back(x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    silu_back(&x.view().into_dyn(), &gy.view().into_dyn())
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

fn silu2(x: &Array2<f64>) -> Array2<f64> {
    silu(&x.view().into_dyn())
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

fn silu2_back(x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    silu_back(&x.view().into_dyn(), &gy.view().into_dyn())
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// Sinusoidal embedding of integer timesteps, `dim` even.
pub fn time_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut emb = Array2::zeros((ts.len(), dim));
    for (n, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = (-(10_000f64).ln() * exponent).exp();
            let arg = t as f64 * freq;
            emb[[n, i]] = arg.sin();
            emb[[n, half + i]] = arg.cos();
        }
    }
    emb
}

/// Residual block with timestep conditioning:
/// `y = skip(x) + c2(silu(n2(c1(silu(n1(x))) + proj(silu(e)))))`.
#[derive(Debug, Clone)]
struct ResBlockT {
    n1: GroupNorm,
    c1: Conv2d,
    proj: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResBlockTCache {
    n1c: nullcast_nn::norm::GroupNormCache,
    n1y: Array4<f64>,
    c1c: nullcast_nn::conv::Conv2dCache,
    e: Array2<f64>,
    pc: nullcast_nn::linear::LinearCache,
    n2c: nullcast_nn::norm::GroupNormCache,
    n2y: Array4<f64>,
    c2c: nullcast_nn::conv::Conv2dCache,
    skipc: Option<nullcast_nn::conv::Conv2dCache>,
}

impl ResBlockT {
    fn new(cin: usize, cout: usize, temb_dim: usize, init: &mut Init) -> Self {
        ResBlockT {
            n1: GroupNorm::new(cin, group_count(cin, 8)),
            c1: Conv2d::new(cin, cout, 3, 1, 1, init),
            proj: Linear::new(temb_dim, cout, init),
            n2: GroupNorm::new(cout, group_count(cout, 8)),
            c2: Conv2d::new(cout, cout, 3, 1, 1, init),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 0, init)),
        }
    }

    fn forward_t(&self, x: &Array4<f64>, e: &Array2<f64>) -> (Array4<f64>, ResBlockTCache) {
        let (n1y, n1c) = self.n1.forward_t(x);
        let a1 = silu4(&n1y);
        let (h1, c1c) = self.c1.forward_t(&a1);
        let es = silu2(e);
        let (proj, pc) = self.proj.forward_t(&es);
        let mut hb = h1;
        let (nb, cb, _, _) = hb.dim();
        for ni in 0..nb {
            for ci in 0..cb {
                let b = proj[[ni, ci]];
                hb.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v + b);
            }
        }
        let (n2y, n2c) = self.n2.forward_t(&hb);
        let a2 = silu4(&n2y);
        let (h2, c2c) = self.c2.forward_t(&a2);
        let (skip_out, skipc) = match &self.skip {
            Some(s) => {
                let (y, c) = s.forward_t(x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let y = &skip_out + &h2;
        (
            y,
            ResBlockTCache {
                n1c,
                n1y,
                c1c,
                e: e.clone(),
                pc,
                n2c,
                n2y,
                c2c,
                skipc,
            },
        )
    }

    /// Returns `(dx, de)`; `de` is this block's contribution to the shared
    /// embedding gradient.
    fn backward(&mut self, cache: &ResBlockTCache, gy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let gx_skip = match (&mut self.skip, &cache.skipc) {
            (Some(s), Some(c)) => s.backward(c, gy),
            _ => gy.clone(),
        };
        let g_a2 = self.c2.backward(&cache.c2c, gy);
        let g_n2y = silu4_back(&cache.n2y, &g_a2);
        let g_hb = self.n2.backward(&cache.n2c, &g_n2y);

        let (nb, cb, _, _) = g_hb.dim();
        let mut g_proj = Array2::zeros((nb, cb));
        for ni in 0..nb {
            for ci in 0..cb {
                g_proj[[ni, ci]] = g_hb
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .sum();
            }
        }
        let g_es = self.proj.backward(&cache.pc, &g_proj);
        let ge = silu2_back(&cache.e, &g_es);

        let g_a1 = self.c1.backward(&cache.c1c, &g_hb);
        let g_n1y = silu4_back(&cache.n1y, &g_a1);
        let gx_main = self.n1.backward(&cache.n1c, &g_n1y);
        (&gx_main + &gx_skip, ge)
    }

    fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.n1.visit(&format!("{prefix}.n1"), f);
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.proj.visit(&format!("{prefix}.proj"), f);
        self.n2.visit(&format!("{prefix}.n2"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
        if let Some(s) = &mut self.skip {
            s.visit(&format!("{prefix}.skip"), f);
        }
    }
}

/// Hyperparameters of the noise-prediction network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetArch {
    pub in_ch: usize,
    /// Channel width at full resolution; doubled at the lower level.
    pub base: usize,
    pub temb_dim: usize,
}

impl UNetArch {
    pub fn validate(&self, image_hw: (usize, usize)) -> Result<(), String> {
        if self.in_ch == 0 || self.base == 0 {
            return Err("channel counts must be positive".into());
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return Err(format!("temb_dim must be even and >= 2, got {}", self.temb_dim));
        }
        let (h, w) = image_hw;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(format!(
                "image dims {h}x{w} must be divisible by 4 (two downsampling levels)"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub arch: UNetArch,
    fc1: Linear,
    fc2: Linear,
    conv_in: Conv2d,
    rb1: ResBlockT,
    down1: Conv2d,
    rb2: ResBlockT,
    down2: Conv2d,
    mid1: ResBlockT,
    mid2: ResBlockT,
    upc1: Conv2d,
    rbu1: ResBlockT,
    upc2: Conv2d,
    rbu2: ResBlockT,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

pub struct UNetCache {
    f1c: nullcast_nn::linear::LinearCache,
    e1: Array2<f64>,
    f2c: nullcast_nn::linear::LinearCache,
    cinc: nullcast_nn::conv::Conv2dCache,
    r1c: ResBlockTCache,
    d1c: nullcast_nn::conv::Conv2dCache,
    r2c: ResBlockTCache,
    d2c: nullcast_nn::conv::Conv2dCache,
    m1c: ResBlockTCache,
    m2c: ResBlockTCache,
    uc1c: nullcast_nn::conv::Conv2dCache,
    ru1c: ResBlockTCache,
    uc2c: nullcast_nn::conv::Conv2dCache,
    ru2c: ResBlockTCache,
    noc: nullcast_nn::norm::GroupNormCache,
    no: Array4<f64>,
    coc: nullcast_nn::conv::Conv2dCache,
}

impl UNet {
    pub fn new(arch: UNetArch, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let (c, f, td) = (arch.in_ch, arch.base, arch.temb_dim);
        UNet {
            fc1: Linear::new(td, td, &mut init),
            fc2: Linear::new(td, td, &mut init),
            conv_in: Conv2d::new(c, f, 3, 1, 1, &mut init),
            rb1: ResBlockT::new(f, f, td, &mut init),
            down1: Conv2d::new(f, f, 3, 2, 1, &mut init),
            rb2: ResBlockT::new(f, 2 * f, td, &mut init),
            down2: Conv2d::new(2 * f, 2 * f, 3, 2, 1, &mut init),
            mid1: ResBlockT::new(2 * f, 2 * f, td, &mut init),
            mid2: ResBlockT::new(2 * f, 2 * f, td, &mut init),
            upc1: Conv2d::new(2 * f, 2 * f, 3, 1, 1, &mut init),
            rbu1: ResBlockT::new(4 * f, 2 * f, td, &mut init),
            upc2: Conv2d::new(2 * f, f, 3, 1, 1, &mut init),
            rbu2: ResBlockT::new(2 * f, f, td, &mut init),
            norm_out: GroupNorm::new(f, group_count(f, 8)),
            conv_out: Conv2d::new_zero(f, c, 3, 1, 1, &mut init),
            arch,
        }
    }

    pub fn forward(&self, x: &Array4<f64>, ts: &[usize]) -> Array4<f64> {
        self.forward_t(x, ts).0
    }

    pub fn forward_t(&self, x: &Array4<f64>, ts: &[usize]) -> (Array4<f64>, UNetCache) {
        assert_eq!(x.dim().0, ts.len(), "one timestep per batch sample");
        let e0 = time_embedding(ts, self.arch.temb_dim);
        let (e1, f1c) = self.fc1.forward_t(&e0);
        let e1s = silu2(&e1);
        let (e2, f2c) = self.fc2.forward_t(&e1s);

        let (h0, cinc) = self.conv_in.forward_t(x);
        let (r1, r1c) = self.rb1.forward_t(&h0, &e2);
        let (d1, d1c) = self.down1.forward_t(&r1);
        let (r2, r2c) = self.rb2.forward_t(&d1, &e2);
        let (d2, d2c) = self.down2.forward_t(&r2);
        let (m1, m1c) = self.mid1.forward_t(&d2, &e2);
        let (m2, m2c) = self.mid2.forward_t(&m1, &e2);

        let u1 = upsample2x(&m2);
        let (uc1y, uc1c) = self.upc1.forward_t(&u1);
        let cat1 = concat_channels(&uc1y, &r2);
        let (ru1, ru1c) = self.rbu1.forward_t(&cat1, &e2);
        let u2 = upsample2x(&ru1);
        let (uc2y, uc2c) = self.upc2.forward_t(&u2);
        let cat2 = concat_channels(&uc2y, &r1);
        let (ru2, ru2c) = self.rbu2.forward_t(&cat2, &e2);

        let (no, noc) = self.norm_out.forward_t(&ru2);
        let ao = silu4(&no);
        let (y, coc) = self.conv_out.forward_t(&ao);
        (
            y,
            UNetCache {
                f1c,
                e1,
                f2c,
                cinc,
                r1c,
                d1c,
                r2c,
                d2c,
                m1c,
                m2c,
                uc1c,
                ru1c,
                uc2c,
                ru2c,
                noc,
                no,
                coc,
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &UNetCache, gy: &Array4<f64>) -> Array4<f64> {
        let f = self.arch.base;
        let g_ao = self.conv_out.backward(&cache.coc, gy);
        let g_no = silu4_back(&cache.no, &g_ao);
        let g_ru2 = self.norm_out.backward(&cache.noc, &g_no);

        let (g_cat2, ge_a) = self.rbu2.backward(&cache.ru2c, &g_ru2);
        let (g_uc2y, g_r1_a) = split_channels(&g_cat2, f);
        let g_u2 = self.upc2.backward(&cache.uc2c, &g_uc2y);
        let g_ru1 = upsample2x_back(&g_u2);

        let (g_cat1, ge_b) = self.rbu1.backward(&cache.ru1c, &g_ru1);
        let (g_uc1y, g_r2_a) = split_channels(&g_cat1, 2 * f);
        let g_u1 = self.upc1.backward(&cache.uc1c, &g_uc1y);
        let g_m2 = upsample2x_back(&g_u1);

        let (g_m1, ge_c) = self.mid2.backward(&cache.m2c, &g_m2);
        let (g_d2, ge_d) = self.mid1.backward(&cache.m1c, &g_m1);
        let g_r2_b = self.down2.backward(&cache.d2c, &g_d2);
        let g_r2 = &g_r2_a + &g_r2_b;
        let (g_d1, ge_e) = self.rb2.backward(&cache.r2c, &g_r2);
        let g_r1_b = self.down1.backward(&cache.d1c, &g_d1);
        let g_r1 = &g_r1_a + &g_r1_b;
        let (g_h0, ge_f) = self.rb1.backward(&cache.r1c, &g_r1);
        let gx = self.conv_in.backward(&cache.cinc, &g_h0);

        let ge2 = &(&(&ge_a + &ge_b) + &(&ge_c + &ge_d)) + &(&ge_e + &ge_f);
        let g_e1s = self.fc2.backward(&cache.f2c, &ge2);
        let g_e1 = silu2_back(&cache.e1, &g_e1s);
        let _ = self.fc1.backward(&cache.f1c, &g_e1);
        gx
    }
}

impl Params for UNet {
    fn visit_params(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.conv_in.visit("conv_in", f);
        self.rb1.visit("rb1", f);
        self.down1.visit("down1", f);
        self.rb2.visit("rb2", f);
        self.down2.visit("down2", f);
        self.mid1.visit("mid1", f);
        self.mid2.visit("mid2", f);
        self.upc1.visit("upc1", f);
        self.rbu1.visit("rbu1", f);
        self.upc2.visit("upc2", f);
        self.rbu2.visit("rbu2", f);
        self.norm_out.visit("norm_out", f);
        self.conv_out.visit("conv_out", f);
        self.fc1.visit("temb.fc1", f);
        self.fc2.visit("temb.fc2", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nullcast_nn::{numeric_grad, read_grad, relative_error, zero_grads};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> UNetArch {
        UNetArch {
            in_ch: 2,
            base: 4,
            temb_dim: 8,
        }
    }

    #[test]
    fn output_shape_matches_input_and_starts_at_zero() {
        let net = UNet::new(tiny_arch(), 3);
        let x = Array4::from_elem((2, 2, 8, 8), 0.3);
        let y = net.forward(&x, &[5, 900]);
        assert_eq!(y.dim(), x.dim());
        // Zero-initialized head: the untrained network is the zero map.
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_embedding_distinguishes_timesteps() {
        let e = time_embedding(&[1, 500, 999], 16);
        assert_eq!(e.dim(), (3, 16));
        let d01: f64 = (&e.row(0) - &e.row(1)).iter().map(|v| v * v).sum();
        let d12: f64 = (&e.row(1) - &e.row(2)).iter().map(|v| v * v).sum();
        assert!(d01 > 1e-3 && d12 > 1e-3);
        // Components stay bounded.
        assert!(e.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut net = UNet::new(tiny_arch(), 11);
        // Perturb the zero head so its gradient path is generic.
        net.conv_out.w.v.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        let x = Array4::from_shape_fn((2, 2, 8, 8), |_| rng.random_range(-1.0..1.0));
        let probe = Array4::from_shape_fn((2, 2, 8, 8), |_| rng.random_range(-1.0..1.0));
        let ts = [3usize, 700];

        zero_grads(&mut net);
        let (_, cache) = net.forward_t(&x, &ts);
        net.backward(&cache, &probe);

        let pc = probe.clone();
        let xc = x.clone();
        let mut loss = move |n: &mut UNet| (&n.forward(&xc, &ts) * &pc).sum();
        // One entry from several structurally different parameter tensors.
        for name in [
            "conv_in.w",
            "rb1.c1.w",
            "rb1.proj.w",
            "rb2.skip.w",
            "mid1.n1.gamma",
            "rbu1.c2.b",
            "norm_out.beta",
            "conv_out.w",
            "temb.fc1.w",
            "temb.fc2.b",
        ] {
            let num = numeric_grad(&mut net, name, 0, 1e-5, &mut loss);
            let ana = read_grad(&mut net, name, 0);
            assert!(
                relative_error(num, ana) < 1e-5 || (num.abs() < 1e-9 && ana.abs() < 1e-9),
                "{name}: numeric {num} vs backprop {ana}"
            );
        }
    }
}
