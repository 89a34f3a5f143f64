//! Encoder/decoder towers of the SNR-conditioned autoencoder.
//!
//! Both towers are residual convolution stacks at a constant feature width.
//! After every resampling block a small fully-connected gate reads the
//! channel quality (SNR in dB, scaled) and multiplies each feature channel
//! by a sigmoid weight, so one model serves the whole training SNR range.
//! Attention gates — residual trunks modulated by a learned spatial mask —
//! sit at configurable resolutions, by default only at the lowest one.
//!
//! The decoder mirrors the encoder except that its first stage keeps the
//! bottleneck resolution (a residual block without upsampling), which is
//! what makes the output the degraded image's size rather than the input's.

use ndarray::{Array2, Array4, ArrayViewMutD, Axis};
use nullcast_nn::{
    leaky_relu, leaky_relu_back, sigmoid, sigmoid_back, upsample2x, upsample2x_back, Conv2d,
    Init, Linear,
};

const LRELU_SLOPE: f64 = 0.2;

fn lrelu4(x: &Array4<f64>) -> Array4<f64> {
    leaky_relu(&x.view().into_dyn(), LRELU_SLOPE)
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

fn lrelu4_back(x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    leaky_relu_back(&x.view().into_dyn(), &gy.view().into_dyn(), LRELU_SLOPE)
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

fn lrelu2(x: &Array2<f64>) -> Array2<f64> {
    leaky_relu(&x.view().into_dyn(), LRELU_SLOPE)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

fn lrelu2_back(x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    leaky_relu_back(&x.view().into_dyn(), &gy.view().into_dyn(), LRELU_SLOPE)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

fn sigmoid4(x: &Array4<f64>) -> Array4<f64> {
    sigmoid(&x.view().into_dyn())
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

fn sigmoid4_back(y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    sigmoid_back(&y.view().into_dyn(), &gy.view().into_dyn())
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

fn sigmoid2(x: &Array2<f64>) -> Array2<f64> {
    sigmoid(&x.view().into_dyn())
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

fn sigmoid2_back(y: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    sigmoid_back(&y.view().into_dyn(), &gy.view().into_dyn())
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// Channel-quality gate: maps the scaled SNR to one sigmoid weight per
/// feature channel and rescales the feature map with it.
#[derive(Debug, Clone)]
pub struct AfGate {
    fc1: Linear,
    fc2: Linear,
}

pub struct AfGateCache {
    x: Array4<f64>,
    f1c: nullcast_nn::linear::LinearCache,
    a1: Array2<f64>,
    f2c: nullcast_nn::linear::LinearCache,
    gate: Array2<f64>,
}

impl AfGate {
    pub fn new(channels: usize, hidden: usize, init: &mut Init) -> Self {
        AfGate {
            fc1: Linear::new(1, hidden, init),
            fc2: Linear::new(hidden, channels, init),
        }
    }

    pub fn forward_t(&self, x: &Array4<f64>, snr_feat: &Array2<f64>) -> (Array4<f64>, AfGateCache) {
        let (a1, f1c) = self.fc1.forward_t(snr_feat);
        let h = lrelu2(&a1);
        let (pre, f2c) = self.fc2.forward_t(&h);
        let gate = sigmoid2(&pre);
        let (n, c, _, _) = x.dim();
        let mut y = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let g = gate[[ni, ci]];
                y.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * g);
            }
        }
        (
            y,
            AfGateCache {
                x: x.clone(),
                f1c,
                a1,
                f2c,
                gate,
            },
        )
    }

    pub fn backward(&mut self, cache: &AfGateCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, _, _) = gy.dim();
        let mut gx = gy.clone();
        let mut g_gate = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let g = cache.gate[[ni, ci]];
                g_gate[[ni, ci]] = (&gy.index_axis(Axis(0), ni).index_axis(Axis(0), ci)
                    * &cache.x.index_axis(Axis(0), ni).index_axis(Axis(0), ci))
                    .sum();
                gx.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * g);
            }
        }
        let g_pre = sigmoid2_back(&cache.gate, &g_gate);
        let g_h = self.fc2.backward(&cache.f2c, &g_pre);
        let g_a1 = lrelu2_back(&cache.a1, &g_h);
        // The SNR input is data, not a parameter; its gradient is dropped.
        let _ = self.fc1.backward(&cache.f1c, &g_a1);
        gx
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

/// Stride-2 residual block: `y = lrelu(skip(x) + c2(lrelu(c1(x))))` with a
/// 1x1 stride-2 projection skip.
#[derive(Debug, Clone)]
pub struct DownResBlock {
    c1: Conv2d,
    c2: Conv2d,
    skip: Conv2d,
}

pub struct DownResBlockCache {
    c1c: nullcast_nn::conv::Conv2dCache,
    c1y: Array4<f64>,
    c2c: nullcast_nn::conv::Conv2dCache,
    skipc: nullcast_nn::conv::Conv2dCache,
    pre: Array4<f64>,
}

impl DownResBlock {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        DownResBlock {
            c1: Conv2d::new(channels, channels, 3, 2, 1, init),
            c2: Conv2d::new(channels, channels, 3, 1, 1, init),
            skip: Conv2d::new(channels, channels, 1, 2, 0, init),
        }
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, DownResBlockCache) {
        let (c1y, c1c) = self.c1.forward_t(x);
        let a = lrelu4(&c1y);
        let (h, c2c) = self.c2.forward_t(&a);
        let (s, skipc) = self.skip.forward_t(x);
        let pre = &s + &h;
        let y = lrelu4(&pre);
        (
            y,
            DownResBlockCache {
                c1c,
                c1y,
                c2c,
                skipc,
                pre,
            },
        )
    }

    pub fn backward(&mut self, cache: &DownResBlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let g_pre = lrelu4_back(&cache.pre, gy);
        let gx_skip = self.skip.backward(&cache.skipc, &g_pre);
        let g_a = self.c2.backward(&cache.c2c, &g_pre);
        let g_c1y = lrelu4_back(&cache.c1y, &g_a);
        let gx_main = self.c1.backward(&cache.c1c, &g_c1y);
        &gx_skip + &gx_main
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
        self.skip.visit(&format!("{prefix}.skip"), f);
    }
}

/// Residual block at constant resolution with an identity skip.
#[derive(Debug, Clone)]
pub struct PlainResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

pub struct PlainResBlockCache {
    c1c: nullcast_nn::conv::Conv2dCache,
    c1y: Array4<f64>,
    c2c: nullcast_nn::conv::Conv2dCache,
    pre: Array4<f64>,
}

impl PlainResBlock {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        PlainResBlock {
            c1: Conv2d::new(channels, channels, 3, 1, 1, init),
            c2: Conv2d::new(channels, channels, 3, 1, 1, init),
        }
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, PlainResBlockCache) {
        let (c1y, c1c) = self.c1.forward_t(x);
        let a = lrelu4(&c1y);
        let (h, c2c) = self.c2.forward_t(&a);
        let pre = x + &h;
        let y = lrelu4(&pre);
        (y, PlainResBlockCache { c1c, c1y, c2c, pre })
    }

    pub fn backward(&mut self, cache: &PlainResBlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let g_pre = lrelu4_back(&cache.pre, gy);
        let g_a = self.c2.backward(&cache.c2c, &g_pre);
        let g_c1y = lrelu4_back(&cache.c1y, &g_a);
        let gx_main = self.c1.backward(&cache.c1c, &g_c1y);
        &g_pre + &gx_main
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
    }
}

/// Nearest-upsample followed by a residual block with a 1x1 projection skip.
#[derive(Debug, Clone)]
pub struct UpResBlock {
    c1: Conv2d,
    c2: Conv2d,
    skip: Conv2d,
}

pub struct UpResBlockCache {
    c1c: nullcast_nn::conv::Conv2dCache,
    c1y: Array4<f64>,
    c2c: nullcast_nn::conv::Conv2dCache,
    skipc: nullcast_nn::conv::Conv2dCache,
    pre: Array4<f64>,
}

impl UpResBlock {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        UpResBlock {
            c1: Conv2d::new(channels, channels, 3, 1, 1, init),
            c2: Conv2d::new(channels, channels, 3, 1, 1, init),
            skip: Conv2d::new(channels, channels, 1, 1, 0, init),
        }
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, UpResBlockCache) {
        let u = upsample2x(x);
        let (c1y, c1c) = self.c1.forward_t(&u);
        let a = lrelu4(&c1y);
        let (h, c2c) = self.c2.forward_t(&a);
        let (s, skipc) = self.skip.forward_t(&u);
        let pre = &s + &h;
        let y = lrelu4(&pre);
        (
            y,
            UpResBlockCache {
                c1c,
                c1y,
                c2c,
                skipc,
                pre,
            },
        )
    }

    pub fn backward(&mut self, cache: &UpResBlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let g_pre = lrelu4_back(&cache.pre, gy);
        let gu_skip = self.skip.backward(&cache.skipc, &g_pre);
        let g_a = self.c2.backward(&cache.c2c, &g_pre);
        let g_c1y = lrelu4_back(&cache.c1y, &g_a);
        let gu_main = self.c1.backward(&cache.c1c, &g_c1y);
        upsample2x_back(&(&gu_skip + &gu_main))
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
        self.skip.visit(&format!("{prefix}.skip"), f);
    }
}

/// Residual attention gate: `y = x + trunk(x) * mask(x)` with a sigmoid
/// spatial mask.
#[derive(Debug, Clone)]
pub struct AttnGate {
    trunk: PlainResBlock,
    m1: Conv2d,
    m2: Conv2d,
}

pub struct AttnGateCache {
    tc: PlainResBlockCache,
    trunk_out: Array4<f64>,
    m1c: nullcast_nn::conv::Conv2dCache,
    m1y: Array4<f64>,
    m2c: nullcast_nn::conv::Conv2dCache,
    mask: Array4<f64>,
}

impl AttnGate {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        AttnGate {
            trunk: PlainResBlock::new(channels, init),
            m1: Conv2d::new(channels, channels, 3, 1, 1, init),
            m2: Conv2d::new(channels, channels, 1, 1, 0, init),
        }
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, AttnGateCache) {
        let (trunk_out, tc) = self.trunk.forward_t(x);
        let (m1y, m1c) = self.m1.forward_t(x);
        let a = lrelu4(&m1y);
        let (m2y, m2c) = self.m2.forward_t(&a);
        let mask = sigmoid4(&m2y);
        let y = x + &(&trunk_out * &mask);
        (
            y,
            AttnGateCache {
                tc,
                trunk_out,
                m1c,
                m1y,
                m2c,
                mask,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttnGateCache, gy: &Array4<f64>) -> Array4<f64> {
        let g_trunk = gy * &cache.mask;
        let g_mask = gy * &cache.trunk_out;
        let gx_trunk = self.trunk.backward(&cache.tc, &g_trunk);
        let g_m2y = sigmoid4_back(&cache.mask, &g_mask);
        let g_a = self.m2.backward(&cache.m2c, &g_m2y);
        let g_m1y = lrelu4_back(&cache.m1y, &g_a);
        let gx_mask = self.m1.backward(&cache.m1c, &g_m1y);
        &(gy + &gx_trunk) + &gx_mask
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.trunk.visit(&format!("{prefix}.trunk"), f);
        self.m1.visit(&format!("{prefix}.m1"), f);
        self.m2.visit(&format!("{prefix}.m2"), f);
    }
}

#[derive(Clone)]
struct EncStage {
    down: DownResBlock,
    af: AfGate,
    attn: Option<AttnGate>,
}

/// Encoder: stem convolution, `n_down` gated downsampling stages, latent
/// head. Output is the latent map `(N, c_out, H/2^n, W/2^n)`.
#[derive(Clone)]
pub struct Encoder {
    stem: Conv2d,
    stages: Vec<EncStage>,
    head: Conv2d,
}

pub struct EncoderCache {
    stemc: nullcast_nn::conv::Conv2dCache,
    h0: Array4<f64>,
    stages: Vec<(DownResBlockCache, AfGateCache, Option<AttnGateCache>)>,
    headc: nullcast_nn::conv::Conv2dCache,
}

impl Encoder {
    pub fn new(
        in_ch: usize,
        base: usize,
        n_down: usize,
        c_out: usize,
        af_hidden: usize,
        attention_positions: &[usize],
        init: &mut Init,
    ) -> Self {
        let stem = Conv2d::new(in_ch, base, 3, 1, 1, init);
        let stages = (1..=n_down)
            .map(|d| EncStage {
                down: DownResBlock::new(base, init),
                af: AfGate::new(base, af_hidden, init),
                attn: attention_positions
                    .contains(&d)
                    .then(|| AttnGate::new(base, init)),
            })
            .collect();
        let head = Conv2d::new(base, c_out, 3, 1, 1, init);
        Encoder { stem, stages, head }
    }

    pub fn forward(&self, x: &Array4<f64>, snr_feat: &Array2<f64>) -> Array4<f64> {
        self.forward_t(x, snr_feat).0
    }

    pub fn forward_t(&self, x: &Array4<f64>, snr_feat: &Array2<f64>) -> (Array4<f64>, EncoderCache) {
        let (h0, stemc) = self.stem.forward_t(x);
        let mut cur = lrelu4(&h0);
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (d, dc) = stage.down.forward_t(&cur);
            let (a, ac) = stage.af.forward_t(&d, snr_feat);
            let (next, tc) = match &stage.attn {
                Some(attn) => {
                    let (y, c) = attn.forward_t(&a);
                    (y, Some(c))
                }
                None => (a, None),
            };
            cur = next;
            stage_caches.push((dc, ac, tc));
        }
        let (lat, headc) = self.head.forward_t(&cur);
        (
            lat,
            EncoderCache {
                stemc,
                h0,
                stages: stage_caches,
                headc,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderCache, gy: &Array4<f64>) -> Array4<f64> {
        let mut g = self.head.backward(&cache.headc, gy);
        for (stage, (dc, ac, tc)) in self.stages.iter_mut().zip(&cache.stages).rev() {
            if let (Some(attn), Some(tc)) = (&mut stage.attn, tc) {
                g = attn.backward(tc, &g);
            }
            g = stage.af.backward(ac, &g);
            g = stage.down.backward(dc, &g);
        }
        let g = lrelu4_back(&cache.h0, &g);
        self.stem.backward(&cache.stemc, &g)
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.down.visit(&format!("{prefix}.down{i}"), f);
            stage.af.visit(&format!("{prefix}.af{i}"), f);
            if let Some(attn) = &mut stage.attn {
                attn.visit(&format!("{prefix}.attn{i}"), f);
            }
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }
}

#[derive(Clone)]
struct DecStage {
    up: UpResBlock,
    af: AfGate,
    attn: Option<AttnGate>,
}

/// Decoder: stem, a non-upsampling residual stage at bottleneck resolution
/// (the mirror of the encoder's last stage, kept at low resolution so the
/// output is the degraded image's size), then gated upsampling stages and a
/// sigmoid head.
#[derive(Clone)]
pub struct Decoder {
    stem: Conv2d,
    plain: PlainResBlock,
    af0: AfGate,
    attn0: Option<AttnGate>,
    stages: Vec<DecStage>,
    head: Conv2d,
}

pub struct DecoderCache {
    stemc: nullcast_nn::conv::Conv2dCache,
    h0: Array4<f64>,
    pc: PlainResBlockCache,
    a0c: AfGateCache,
    t0c: Option<AttnGateCache>,
    stages: Vec<(UpResBlockCache, AfGateCache, Option<AttnGateCache>)>,
    headc: nullcast_nn::conv::Conv2dCache,
    out: Array4<f64>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        base: usize,
        n_up: usize,
        n_down: usize,
        out_ch: usize,
        af_hidden: usize,
        attention_positions: &[usize],
        init: &mut Init,
    ) -> Self {
        let stem = Conv2d::new(c_in, base, 3, 1, 1, init);
        let plain = PlainResBlock::new(base, init);
        let af0 = AfGate::new(base, af_hidden, init);
        let attn0 = attention_positions
            .contains(&n_down)
            .then(|| AttnGate::new(base, init));
        // Up-stage j lifts from resolution level (n_down - j + 1) to
        // (n_down - j); attention mirrors the encoder's placement at the
        // level the stage produces.
        let stages = (1..=n_up)
            .map(|j| DecStage {
                up: UpResBlock::new(base, init),
                af: AfGate::new(base, af_hidden, init),
                attn: {
                    let level = n_down - j;
                    (level >= 1 && attention_positions.contains(&level))
                        .then(|| AttnGate::new(base, init))
                },
            })
            .collect();
        let head = Conv2d::new(base, out_ch, 3, 1, 1, init);
        Decoder {
            stem,
            plain,
            af0,
            attn0,
            stages,
            head,
        }
    }

    pub fn forward(&self, y: &Array4<f64>, snr_feat: &Array2<f64>) -> Array4<f64> {
        self.forward_t(y, snr_feat).0
    }

    pub fn forward_t(&self, y: &Array4<f64>, snr_feat: &Array2<f64>) -> (Array4<f64>, DecoderCache) {
        let (h0, stemc) = self.stem.forward_t(y);
        let a0 = lrelu4(&h0);
        let (p, pc) = self.plain.forward_t(&a0);
        let (p, a0c) = self.af0.forward_t(&p, snr_feat);
        let (mut cur, t0c) = match &self.attn0 {
            Some(attn) => {
                let (y, c) = attn.forward_t(&p);
                (y, Some(c))
            }
            None => (p, None),
        };
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (u, uc) = stage.up.forward_t(&cur);
            let (a, ac) = stage.af.forward_t(&u, snr_feat);
            let (next, tc) = match &stage.attn {
                Some(attn) => {
                    let (y, c) = attn.forward_t(&a);
                    (y, Some(c))
                }
                None => (a, None),
            };
            cur = next;
            stage_caches.push((uc, ac, tc));
        }
        let (o, headc) = self.head.forward_t(&cur);
        let out = sigmoid4(&o);
        (
            out.clone(),
            DecoderCache {
                stemc,
                h0,
                pc,
                a0c,
                t0c,
                stages: stage_caches,
                headc,
                out,
            },
        )
    }

    pub fn backward(&mut self, cache: &DecoderCache, g_out: &Array4<f64>) -> Array4<f64> {
        let g = sigmoid4_back(&cache.out, g_out);
        let mut g = self.head.backward(&cache.headc, &g);
        for (stage, (uc, ac, tc)) in self.stages.iter_mut().zip(&cache.stages).rev() {
            if let (Some(attn), Some(tc)) = (&mut stage.attn, tc) {
                g = attn.backward(tc, &g);
            }
            g = stage.af.backward(ac, &g);
            g = stage.up.backward(uc, &g);
        }
        if let (Some(attn), Some(t0c)) = (&mut self.attn0, &cache.t0c) {
            g = attn.backward(t0c, &g);
        }
        let g = self.af0.backward(&cache.a0c, &g);
        let g = self.plain.backward(&cache.pc, &g);
        let g = lrelu4_back(&cache.h0, &g);
        self.stem.backward(&cache.stemc, &g)
    }

    pub fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        self.plain.visit(&format!("{prefix}.plain"), f);
        self.af0.visit(&format!("{prefix}.af0"), f);
        if let Some(attn) = &mut self.attn0 {
            attn.visit(&format!("{prefix}.attn0"), f);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.up.visit(&format!("{prefix}.up{i}"), f);
            stage.af.visit(&format!("{prefix}.af{i}"), f);
            if let Some(attn) = &mut stage.attn {
                attn.visit(&format!("{prefix}.attn{i}"), f);
            }
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }
}
