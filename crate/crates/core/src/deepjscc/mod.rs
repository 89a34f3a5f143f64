//! SNR-conditioned autoencoder that transmits the degraded image.
//!
//! The encoder maps an image to `2k` latent reals (`k` complex channel
//! symbols after pairing); the decoder maps noisy symbols back to an
//! estimate of the *degraded* image `A x`, not the full input. Both towers
//! read the channel SNR through gating modules, so a single model covers
//! the whole training SNR range. Training runs the real-vector equivalent
//! of the channel path (normalize to the power budget, add noise of the
//! per-instance σ) and minimizes the degraded-reconstruction error.

mod net;

use ndarray::{Array2, Array3, Array4, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{snr_to_sigma, SymbolBlock};
use crate::diffusion::shuffle;
use crate::linops::{DegradationOperator, LinOpError};
use net::{Decoder, DecoderCache, Encoder, EncoderCache};
use nullcast_nn::{zero_grads, Adam, Init, Params};

/// Nonlinearity recorded in checkpoints for reproducibility.
pub const NONLINEARITY: &str = "leaky_relu(0.2), sigmoid output head";
/// Normalization recorded in checkpoints for reproducibility.
pub const NORMALIZATION: &str = "none";
/// Weight initialization recorded in checkpoints for reproducibility.
pub const WEIGHT_INIT: &str = "he_normal, zero biases";

/// Per-epoch training record shared by both trainable models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JsccError {
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    /// A symbol block of the wrong length was handed to the decoder.
    LatentLengthMismatch {
        expected: usize,
        got: usize,
    },
    PixelOutOfRange {
        min: f64,
        max: f64,
    },
    BadSigma {
        sigma: f64,
    },
    BadArch(String),
    EmptyDataset,
    Diverged {
        epoch: usize,
        step: usize,
    },
    BadConfig(String),
    LinOp(LinOpError),
}

impl std::fmt::Display for JsccError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JsccError::ShapeMismatch { expected, got } => {
                write!(f, "expected image shape {expected:?}, got {got:?}")
            }
            JsccError::LatentLengthMismatch { expected, got } => {
                write!(f, "expected {expected} channel symbols, got {got}")
            }
            JsccError::PixelOutOfRange { min, max } => {
                write!(f, "pixel values must lie in [0,1], found range [{min}, {max}]")
            }
            JsccError::BadSigma { sigma } => {
                write!(f, "noise std must be positive, got {sigma}")
            }
            JsccError::BadArch(msg) => write!(f, "bad architecture: {msg}"),
            JsccError::EmptyDataset => write!(f, "dataset is empty"),
            JsccError::Diverged { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
            JsccError::BadConfig(msg) => write!(f, "bad config: {msg}"),
            JsccError::LinOp(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for JsccError {}

impl From<LinOpError> for JsccError {
    fn from(e: LinOpError) -> Self {
        JsccError::LinOp(e)
    }
}

/// Architecture hyperparameters of the autoencoder.
///
/// `latent_channels` is the knob that sets the bandwidth ratio: the latent
/// map is `(latent_channels, H/2^n, W/2^n)` and every pair of its reals
/// becomes one channel symbol. `attention_positions` lists resolution
/// levels (1 = after the first downsampling, `n_down_blocks` = bottleneck)
/// that get an attention gate in both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsccArch {
    pub base_filters: usize,
    pub n_down_blocks: usize,
    pub attention_positions: Vec<usize>,
    pub latent_channels: usize,
    pub af_hidden: usize,
}

impl JsccArch {
    fn validate(&self) -> Result<(), JsccError> {
        if self.base_filters == 0
            || self.n_down_blocks == 0
            || self.latent_channels == 0
            || self.af_hidden == 0
        {
            return Err(JsccError::BadArch(
                "filter counts, stage count, and gate width must be positive".into(),
            ));
        }
        for &p in &self.attention_positions {
            if p == 0 || p > self.n_down_blocks {
                return Err(JsccError::BadArch(format!(
                    "attention position {p} outside 1..={}",
                    self.n_down_blocks
                )));
            }
        }
        Ok(())
    }
}

/// The trained transmitter/receiver pair plus everything needed to run it:
/// the degradation operator it targets, the SNR range it was conditioned
/// on, and the channel power budget used to translate σ into SNR.
#[derive(Clone)]
pub struct JsccModel {
    arch: JsccArch,
    operator: DegradationOperator,
    train_snr_range: (f64, f64),
    p_avg: f64,
    encoder: Encoder,
    decoder: Decoder,
}

impl Params for JsccModel {
    fn visit_params(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.encoder.visit("enc", f);
        self.decoder.visit("dec", f);
    }
}

impl JsccModel {
    pub fn new(
        arch: JsccArch,
        operator: DegradationOperator,
        train_snr_range: (f64, f64),
        p_avg: f64,
        seed: u64,
    ) -> Result<Self, JsccError> {
        arch.validate()?;
        if train_snr_range.0 > train_snr_range.1 {
            return Err(JsccError::BadConfig(format!(
                "SNR range [{}, {}] is reversed",
                train_snr_range.0, train_snr_range.1
            )));
        }
        if !(p_avg > 0.0) {
            return Err(JsccError::BadConfig(format!(
                "average power must be positive, got {p_avg}"
            )));
        }
        let (c, h, w) = operator.in_shape();
        let div = 1usize << arch.n_down_blocks;
        if h % div != 0 || w % div != 0 {
            return Err(JsccError::BadArch(format!(
                "{h}x{w} input not divisible by 2^{} for {} downsampling stages",
                arch.n_down_blocks, arch.n_down_blocks
            )));
        }
        let (bh, bw) = (h / div, w / div);
        let latent_len = arch.latent_channels * bh * bw;
        if latent_len % 2 != 0 {
            return Err(JsccError::BadArch(format!(
                "latent length {latent_len} is odd and cannot pair into complex symbols"
            )));
        }
        let (oc, oh, ow) = operator.out_shape();
        let n_up = mirror_up_stages(bh, bw, oh, ow).ok_or_else(|| {
            JsccError::BadArch(format!(
                "stride-2 upsampling cannot reach output {oh}x{ow} from bottleneck {bh}x{bw}"
            ))
        })?;
        let mut init = Init::new(seed);
        let encoder = Encoder::new(
            c,
            arch.base_filters,
            arch.n_down_blocks,
            arch.latent_channels,
            arch.af_hidden,
            &arch.attention_positions,
            &mut init,
        );
        let decoder = Decoder::new(
            arch.latent_channels,
            arch.base_filters,
            n_up,
            arch.n_down_blocks,
            oc,
            arch.af_hidden,
            &arch.attention_positions,
            &mut init,
        );
        Ok(JsccModel {
            arch,
            operator,
            train_snr_range,
            p_avg,
            encoder,
            decoder,
        })
    }

    pub fn arch(&self) -> &JsccArch {
        &self.arch
    }

    pub fn operator(&self) -> &DegradationOperator {
        &self.operator
    }

    pub fn train_snr_range(&self) -> (f64, f64) {
        self.train_snr_range
    }

    pub fn p_avg(&self) -> f64 {
        self.p_avg
    }

    /// Latent map shape `(latent_channels, H/2^n, W/2^n)`.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (_, h, w) = self.operator.in_shape();
        let div = 1usize << self.arch.n_down_blocks;
        (self.arch.latent_channels, h / div, w / div)
    }

    /// Number of latent reals (`2k`).
    pub fn latent_len(&self) -> usize {
        let (c, h, w) = self.latent_shape();
        c * h * w
    }

    /// Number of complex channel symbols `k`.
    pub fn bandwidth_k(&self) -> usize {
        self.latent_len() / 2
    }

    /// Bandwidth ratio ρ = k / (C·H·W).
    pub fn rho(&self) -> f64 {
        self.bandwidth_k() as f64 / self.operator.in_dim() as f64
    }

    fn sigma_to_snr_db(&self, sigma: f64) -> f64 {
        10.0 * (self.p_avg / (sigma * sigma)).log10()
    }

    /// Encodes one image into `2k` latent reals (before power
    /// normalization). The noise std conditions the SNR gates.
    pub fn encode(&self, x: &Array3<f64>, sigma: f64) -> Result<Vec<f64>, JsccError> {
        if x.dim() != self.operator.in_shape() {
            return Err(JsccError::ShapeMismatch {
                expected: self.operator.in_shape(),
                got: x.dim(),
            });
        }
        check_pixel_range(x)?;
        if !(sigma > 0.0) {
            return Err(JsccError::BadSigma { sigma });
        }
        let (c, h, w) = x.dim();
        let mut x4 = Array4::zeros((1, c, h, w));
        x4.index_axis_mut(ndarray::Axis(0), 0).assign(x);
        let snr_feat = snr_features(&[self.sigma_to_snr_db(sigma)]);
        let lat = self.encoder.forward(&x4, &snr_feat);
        Ok(lat.iter().cloned().collect())
    }

    /// Decodes `k` received symbols into an estimate of the degraded image,
    /// clamped to `[0,1]`.
    pub fn decode(&self, y: &SymbolBlock, sigma: f64) -> Result<Array3<f64>, JsccError> {
        let k = self.bandwidth_k();
        if y.len() != k {
            return Err(JsccError::LatentLengthMismatch {
                expected: k,
                got: y.len(),
            });
        }
        if !(sigma > 0.0) {
            return Err(JsccError::BadSigma { sigma });
        }
        let reals = crate::channel::complex_to_real(y.symbols());
        let (lc, lh, lw) = self.latent_shape();
        let y4 = Array4::from_shape_vec((1, lc, lh, lw), reals).expect("latent length checked");
        let snr_feat = snr_features(&[self.sigma_to_snr_db(sigma)]);
        let out = self.decoder.forward(&y4, &snr_feat);
        let (oc, oh, ow) = self.operator.out_shape();
        let mut img = Array3::zeros((oc, oh, ow));
        img.assign(&out.index_axis(ndarray::Axis(0), 0));
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(img)
    }
}

/// Number of 2x upsampling stages that map the bottleneck to the operator's
/// output size, or `None` if no integer power of two does.
fn mirror_up_stages(bh: usize, bw: usize, oh: usize, ow: usize) -> Option<usize> {
    if bh == 0 || bw == 0 || oh % bh != 0 || ow % bw != 0 {
        return None;
    }
    let (qh, qw) = (oh / bh, ow / bw);
    if qh != qw || !qh.is_power_of_two() {
        return None;
    }
    Some(qh.trailing_zeros() as usize)
}

fn check_pixel_range(x: &Array3<f64>) -> Result<(), JsccError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo < -1e-9 || hi > 1.0 + 1e-9 || !lo.is_finite() || !hi.is_finite() {
        return Err(JsccError::PixelOutOfRange { min: lo, max: hi });
    }
    Ok(())
}

fn snr_features(snrs_db: &[f64]) -> Array2<f64> {
    let mut f = Array2::zeros((snrs_db.len(), 1));
    for (i, &s) in snrs_db.iter().enumerate() {
        f[[i, 0]] = s / 10.0;
    }
    f
}

/// Mean squared error between the operator's degraded image and its
/// estimate, normalized by the *input* dimension `C·H·W`.
pub fn degraded_mse_loss(
    op: &DegradationOperator,
    x: &Array3<f64>,
    x_deg_hat: &Array3<f64>,
) -> Result<f64, JsccError> {
    let target = op.apply(x)?;
    if x_deg_hat.dim() != target.dim() {
        return Err(JsccError::ShapeMismatch {
            expected: target.dim(),
            got: x_deg_hat.dim(),
        });
    }
    let diff = &target - x_deg_hat;
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / op.in_dim() as f64)
}

struct ForwardState {
    enc_cache: EncoderCache,
    dec_cache: DecoderCache,
    z_tilde: Array2<f64>,
    norm2: Vec<f64>,
    scale: Vec<f64>,
    out: Array4<f64>,
    targets: Array4<f64>,
}

fn flatten_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    Array2::from_shape_vec((n, c * h * w), x.iter().cloned().collect())
        .expect("element count preserved")
}

fn unflatten_rows(x: &Array2<f64>, shape: (usize, usize, usize)) -> Array4<f64> {
    let n = x.dim().0;
    let (c, h, w) = shape;
    Array4::from_shape_vec((n, c, h, w), x.iter().cloned().collect())
        .expect("element count preserved")
}

/// Runs encode → power-normalize → add given noise → decode and evaluates
/// the degraded-reconstruction loss for a batch.
fn run_forward(
    model: &JsccModel,
    images: &[&Array3<f64>],
    snrs_db: &[f64],
    noise: &Array2<f64>,
) -> Result<(f64, ForwardState), JsccError> {
    if images.is_empty() {
        return Err(JsccError::EmptyDataset);
    }
    if snrs_db.len() != images.len() {
        return Err(JsccError::BadConfig(format!(
            "{} SNR draws for {} images",
            snrs_db.len(),
            images.len()
        )));
    }
    let (c, h, w) = model.operator.in_shape();
    let n = images.len();
    let l = model.latent_len();
    if noise.dim() != (n, l) {
        return Err(JsccError::BadConfig(format!(
            "noise shape {:?} does not match (batch, latent) = ({n}, {l})",
            noise.dim()
        )));
    }
    let mut x4 = Array4::zeros((n, c, h, w));
    let (oc, oh, ow) = model.operator.out_shape();
    let mut targets = Array4::zeros((n, oc, oh, ow));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(JsccError::ShapeMismatch {
                expected: (c, h, w),
                got: img.dim(),
            });
        }
        x4.index_axis_mut(ndarray::Axis(0), i).assign(img);
        targets
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&model.operator.apply(img)?);
    }
    let snr_feat = snr_features(snrs_db);
    let (lat, enc_cache) = model.encoder.forward_t(&x4, &snr_feat);
    let z_tilde = flatten_rows(&lat);

    let budget = model.bandwidth_k() as f64 * model.p_avg;
    let mut z = z_tilde.clone();
    let mut norm2 = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for i in 0..n {
        let row = z_tilde.row(i);
        let p: f64 = row.dot(&row);
        if p < 1e-300 {
            return Err(JsccError::BadConfig(
                "latent signal has zero power; cannot normalize".into(),
            ));
        }
        let s = (budget / p).sqrt();
        norm2.push(p);
        scale.push(s);
        z.row_mut(i).mapv_inplace(|v| v * s);
    }
    let y = &z + noise;

    let y4 = unflatten_rows(&y, model.latent_shape());
    let (out, dec_cache) = model.decoder.forward_t(&y4, &snr_feat);

    let d = model.operator.in_dim() as f64;
    let loss = (&out - &targets).iter().map(|v| v * v).sum::<f64>() / (n as f64 * d);
    Ok((
        loss,
        ForwardState {
            enc_cache,
            dec_cache,
            z_tilde,
            norm2,
            scale,
            out,
            targets,
        },
    ))
}

fn run_backward(model: &mut JsccModel, state: &ForwardState) {
    let (n, _, _, _) = state.out.dim();
    let d = model.operator.in_dim() as f64;
    let g_out = (&state.out - &state.targets).mapv(|v| 2.0 * v / (n as f64 * d));
    let g_y4 = model.decoder.backward(&state.dec_cache, &g_out);
    let g_y = flatten_rows(&g_y4);

    // Noise addition is the identity on gradients; the per-row power
    // projection is not: with z = s·z̃ and s = √(budget)/‖z̃‖,
    // ∂L/∂z̃ = s·(g − z̃ (z̃·g)/‖z̃‖²).
    let mut g_lat = Array2::zeros(g_y.dim());
    for i in 0..n {
        let zt = state.z_tilde.row(i);
        let g = g_y.row(i);
        let dot = zt.dot(&g);
        let s = state.scale[i];
        let p = state.norm2[i];
        for (j, gl) in g_lat.row_mut(i).iter_mut().enumerate() {
            *gl = s * (g[j] - zt[j] * dot / p);
        }
    }
    let g_lat4 = unflatten_rows(&g_lat, model.latent_shape());
    model.encoder.backward(&state.enc_cache, &g_lat4);
}

/// Loss of one batch under externally supplied channel noise. Pure: runs
/// forward only, with no gradient side effects.
pub fn batch_loss_with_noise(
    model: &JsccModel,
    images: &[&Array3<f64>],
    snrs_db: &[f64],
    noise: &Array2<f64>,
) -> Result<f64, JsccError> {
    run_forward(model, images, snrs_db, noise).map(|(loss, _)| loss)
}

/// Forward and backward pass for one batch, accumulating parameter
/// gradients. Returns the loss.
pub fn accumulate_gradients(
    model: &mut JsccModel,
    images: &[&Array3<f64>],
    snrs_db: &[f64],
    noise: &Array2<f64>,
) -> Result<f64, JsccError> {
    let (loss, state) = run_forward(model, images, snrs_db, noise)?;
    run_backward(model, &state);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsccTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub snr_range: (f64, f64),
    pub p_avg: f64,
    pub seed: u64,
}

impl Default for JsccTrainConfig {
    fn default() -> Self {
        JsccTrainConfig {
            lr: 1e-4,
            batch: 64,
            max_epochs: 100,
            patience: 10,
            snr_range: (-5.0, 5.0),
            p_avg: 1.0,
            seed: 0,
        }
    }
}

pub struct JsccTrainOutcome {
    pub model: JsccModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn sample_noise(
    rng: &mut ChaCha8Rng,
    n: usize,
    l: usize,
    sigmas: &[f64],
) -> Array2<f64> {
    let mut noise = Array2::zeros((n, l));
    for i in 0..n {
        let sd = sigmas[i] / 2f64.sqrt();
        for v in noise.row_mut(i).iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = e * sd;
        }
    }
    noise
}

fn draw_snrs(rng: &mut ChaCha8Rng, n: usize, range: (f64, f64)) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if range.0 == range.1 {
                range.0
            } else {
                rng.random_range(range.0..=range.1)
            }
        })
        .collect()
}

/// Trains the autoencoder with per-instance SNR draws, returning the
/// best-validation checkpoint. Validation reuses identical noise and SNR
/// draws every epoch so its losses are comparable across epochs.
pub fn train_jscc(
    arch: &JsccArch,
    op: &DegradationOperator,
    cfg: &JsccTrainConfig,
    train: &[Array3<f64>],
    val: &[Array3<f64>],
) -> Result<JsccTrainOutcome, JsccError> {
    if train.is_empty() || val.is_empty() {
        return Err(JsccError::EmptyDataset);
    }
    if cfg.batch == 0 || cfg.max_epochs == 0 {
        return Err(JsccError::BadConfig(
            "batch size and epoch count must be positive".into(),
        ));
    }
    let mut model = JsccModel::new(
        arch.clone(),
        op.clone(),
        cfg.snr_range,
        cfg.p_avg,
        cfg.seed,
    )?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = model.latent_len();

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_nets = (model.encoder.clone(), model.decoder.clone());
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut train_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let images: Vec<&Array3<f64>> = chunk.iter().map(|&i| &train[i]).collect();
            let snrs = draw_snrs(&mut rng, images.len(), cfg.snr_range);
            let sigmas: Vec<f64> = snrs.iter().map(|&s| snr_to_sigma(s, cfg.p_avg)).collect();
            let noise = sample_noise(&mut rng, images.len(), l, &sigmas);
            zero_grads(&mut model);
            let loss = accumulate_gradients(&mut model, &images, &snrs, &noise)?;
            if !loss.is_finite() {
                return Err(JsccError::Diverged { epoch, step });
            }
            opt.step(&mut model);
            train_loss += loss;
            steps += 1;
        }
        train_loss /= steps as f64;

        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0A11);
        let mut val_loss = 0.0;
        let mut val_batches = 0usize;
        for chunk in (0..val.len()).collect::<Vec<_>>().chunks(cfg.batch) {
            let images: Vec<&Array3<f64>> = chunk.iter().map(|&i| &val[i]).collect();
            let snrs = draw_snrs(&mut val_rng, images.len(), cfg.snr_range);
            let sigmas: Vec<f64> = snrs.iter().map(|&s| snr_to_sigma(s, cfg.p_avg)).collect();
            let noise = sample_noise(&mut val_rng, images.len(), l, &sigmas);
            let loss = batch_loss_with_noise(&model, &images, &snrs, &noise)?;
            if !loss.is_finite() {
                return Err(JsccError::Diverged {
                    epoch,
                    step: val_batches,
                });
            }
            val_loss += loss;
            val_batches += 1;
        }
        val_loss /= val_batches as f64;

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_nets = (model.encoder.clone(), model.decoder.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    model.encoder = best_nets.0;
    model.decoder = best_nets.1;
    Ok(JsccTrainOutcome {
        model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{make_operator, OperatorKind};
    use ndarray::arr3;

    fn toy_arch() -> JsccArch {
        JsccArch {
            base_filters: 4,
            n_down_blocks: 2,
            attention_positions: vec![2],
            latent_channels: 2,
            af_hidden: 3,
        }
    }

    fn toy_model(kind: OperatorKind, factor: usize) -> JsccModel {
        let op = make_operator(kind, (1, 8, 8), factor).unwrap();
        JsccModel::new(toy_arch(), op, (-5.0, 5.0), 1.0, 7).unwrap()
    }

    fn ramp_image(c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut x = Array3::zeros((c, h, w));
        let n = (c * h * w) as f64;
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64 / n;
        }
        x
    }

    #[test]
    fn loss_matches_hand_example() {
        let op = make_operator(OperatorKind::AvgPool, (1, 2, 2), 2).unwrap();
        let x = arr3(&[[[1.0, 3.0], [5.0, 7.0]]]);
        let x_deg_hat = arr3(&[[[5.0]]]);
        let loss = degraded_mse_loss(&op, &x, &x_deg_hat).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_iff_exact() {
        let op = make_operator(OperatorKind::AvgPool, (1, 4, 4), 2).unwrap();
        let x = ramp_image(1, 4, 4);
        let exact = op.apply(&x).unwrap();
        assert_eq!(degraded_mse_loss(&op, &x, &exact).unwrap(), 0.0);
        let off = &exact + 0.1;
        assert!(degraded_mse_loss(&op, &x, &off).unwrap() > 0.0);
    }

    #[test]
    fn loss_invariant_under_error_location() {
        let op = make_operator(OperatorKind::AvgPool, (1, 4, 4), 2).unwrap();
        let x = ramp_image(1, 4, 4);
        let exact = op.apply(&x).unwrap();
        let mut a = exact.clone();
        let mut b = exact.clone();
        a[[0, 0, 0]] += 0.3;
        b[[0, 1, 1]] -= 0.3;
        let la = degraded_mse_loss(&op, &x, &a).unwrap();
        let lb = degraded_mse_loss(&op, &x, &b).unwrap();
        assert!((la - lb).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_wrong_shape() {
        let op = make_operator(OperatorKind::AvgPool, (1, 4, 4), 2).unwrap();
        let x = ramp_image(1, 4, 4);
        let bad = Array3::zeros((1, 4, 4));
        assert!(matches!(
            degraded_mse_loss(&op, &x, &bad),
            Err(JsccError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bandwidth_follows_latent_channels() {
        // 32x32 input, three downsampling stages, two latent channels:
        // latent reals = 2·4·4 = 32, so k = 16 and ρ = 16/3072.
        let op = make_operator(OperatorKind::AvgPool, (3, 32, 32), 2).unwrap();
        let arch = JsccArch {
            base_filters: 4,
            n_down_blocks: 3,
            attention_positions: vec![3],
            latent_channels: 2,
            af_hidden: 3,
        };
        let model = JsccModel::new(arch, op, (-5.0, 5.0), 1.0, 1).unwrap();
        assert_eq!(model.bandwidth_k(), 16);
        assert!((model.rho() - 16.0 / 3072.0).abs() < 1e-15);
        assert_eq!(model.latent_shape(), (2, 4, 4));
    }

    #[test]
    fn encode_is_deterministic_and_snr_sensitive() {
        let model = toy_model(OperatorKind::AvgPool, 2);
        let x = ramp_image(1, 8, 8);
        let sigma_0db = snr_to_sigma(0.0, 1.0);
        let sigma_10db = snr_to_sigma(10.0, 1.0);
        let a = model.encode(&x, sigma_0db).unwrap();
        let b = model.encode(&x, sigma_0db).unwrap();
        let c = model.encode(&x, sigma_10db).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), model.latent_len());
        let diff: f64 = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "SNR gates did not react to σ change");
    }

    #[test]
    fn encode_validates_input() {
        let model = toy_model(OperatorKind::AvgPool, 2);
        let wrong = ramp_image(1, 4, 4);
        assert!(matches!(
            model.encode(&wrong, 0.1),
            Err(JsccError::ShapeMismatch { .. })
        ));
        let x = ramp_image(1, 8, 8);
        assert!(matches!(
            model.encode(&x, 0.0),
            Err(JsccError::BadSigma { .. })
        ));
        let mut out_of_range = x.clone();
        out_of_range[[0, 0, 0]] = 1.5;
        assert!(matches!(
            model.encode(&out_of_range, 0.1),
            Err(JsccError::PixelOutOfRange { .. })
        ));
    }

    #[test]
    fn decode_shape_and_clamp() {
        let model = toy_model(OperatorKind::AvgPool, 2);
        let k = model.bandwidth_k();
        let symbols: Vec<_> = (0..k)
            .map(|i| num_complex::Complex64::new(5.0 * (i as f64 + 1.0), -4.0))
            .collect();
        let block = SymbolBlock::from_symbols(symbols);
        let out = model.decode(&block, 0.1).unwrap();
        assert_eq!(out.dim(), (1, 4, 4));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let short = SymbolBlock::from_symbols(vec![num_complex::Complex64::new(1.0, 0.0)]);
        assert!(matches!(
            model.decode(&short, 0.1),
            Err(JsccError::LatentLengthMismatch { expected, got: 1 }) if expected == k
        ));
    }

    #[test]
    fn identity_operator_restores_input_shape() {
        let model = toy_model(OperatorKind::Identity, 1);
        let x = ramp_image(1, 8, 8);
        let code = model.encode(&x, 0.5).unwrap();
        let block = SymbolBlock::from_symbols(crate::channel::real_to_complex(&code).unwrap());
        let out = model.decode(&block, 0.5).unwrap();
        assert_eq!(out.dim(), x.dim());
    }

    #[test]
    fn decolorize_decoder_upsamples_to_full_resolution() {
        let op = make_operator(OperatorKind::Decolorize, (3, 8, 8), 1).unwrap();
        let model = JsccModel::new(toy_arch(), op, (-5.0, 5.0), 1.0, 7).unwrap();
        let x = ramp_image(3, 8, 8);
        let code = model.encode(&x, 0.5).unwrap();
        let block = SymbolBlock::from_symbols(crate::channel::real_to_complex(&code).unwrap());
        let out = model.decode(&block, 0.5).unwrap();
        assert_eq!(out.dim(), (1, 8, 8));
    }

    #[test]
    fn arch_validation_rejects_bad_configs() {
        let op = make_operator(OperatorKind::AvgPool, (1, 8, 8), 2).unwrap();
        let mut bad_pos = toy_arch();
        bad_pos.attention_positions = vec![5];
        assert!(matches!(
            JsccModel::new(bad_pos, op.clone(), (-5.0, 5.0), 1.0, 0),
            Err(JsccError::BadArch(_))
        ));

        let mut too_deep = toy_arch();
        too_deep.n_down_blocks = 4;
        too_deep.attention_positions = vec![];
        assert!(matches!(
            JsccModel::new(too_deep, op.clone(), (-5.0, 5.0), 1.0, 0),
            Err(JsccError::BadArch(_))
        ));

        assert!(matches!(
            JsccModel::new(toy_arch(), op.clone(), (5.0, -5.0), 1.0, 0),
            Err(JsccError::BadConfig(_))
        ));
        assert!(matches!(
            JsccModel::new(toy_arch(), op, (-5.0, 5.0), 0.0, 0),
            Err(JsccError::BadConfig(_))
        ));
    }

    #[test]
    fn mirror_rejects_non_power_of_two_ratio() {
        // 12x12 with two stride-2 stages bottlenecks at 3x3; a factor-3
        // pooling output of 4x4 is not a power-of-two multiple of it.
        let op = make_operator(OperatorKind::AvgPool, (1, 12, 12), 3).unwrap();
        let arch = JsccArch {
            base_filters: 4,
            n_down_blocks: 2,
            attention_positions: vec![],
            latent_channels: 2,
            af_hidden: 3,
        };
        assert!(matches!(
            JsccModel::new(arch, op, (-5.0, 5.0), 1.0, 0),
            Err(JsccError::BadArch(_))
        ));
    }

    #[test]
    fn batch_order_permutes_outputs() {
        let model = toy_model(OperatorKind::AvgPool, 2);
        let imgs: Vec<Array3<f64>> = (0..3)
            .map(|i| {
                let mut x = ramp_image(1, 8, 8);
                x.mapv_inplace(|v| (v + i as f64 * 0.17).fract());
                x
            })
            .collect();
        let sigma = 0.5;
        let codes: Vec<Vec<f64>> = imgs.iter().map(|x| model.encode(x, sigma).unwrap()).collect();
        // Batched forward equals per-image forward, so permuting inputs
        // permutes codes.
        let snrs = vec![model.sigma_to_snr_db(sigma); 3];
        let feat = snr_features(&snrs);
        let (c, h, w) = (1, 8, 8);
        let mut x4 = Array4::zeros((3, c, h, w));
        for (i, img) in [&imgs[2], &imgs[0], &imgs[1]].iter().enumerate() {
            x4.index_axis_mut(ndarray::Axis(0), i).assign(*img);
        }
        let lat = model.encoder.forward(&x4, &feat);
        let rows = flatten_rows(&lat);
        for (row, orig) in [2usize, 0, 1].iter().zip(rows.rows()) {
            let code = &codes[*row];
            let max_diff = code
                .iter()
                .zip(orig.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-12);
        }
    }

    #[test]
    fn normalized_training_rows_meet_power_budget() {
        let model = toy_model(OperatorKind::AvgPool, 2);
        let imgs = [ramp_image(1, 8, 8)];
        let refs: Vec<&Array3<f64>> = imgs.iter().collect();
        let snrs = vec![0.0];
        let noise = Array2::zeros((1, model.latent_len()));
        let (_, state) = run_forward(&model, &refs, &snrs, &noise).unwrap();
        let mut z = state.z_tilde.row(0).to_vec();
        for v in z.iter_mut() {
            *v *= state.scale[0];
        }
        let block = SymbolBlock::from_symbols(crate::channel::real_to_complex(&z).unwrap());
        assert!((block.avg_power() - model.p_avg()).abs() < 1e-12);
    }
}
