//! Denoising diffusion: noise schedule, forward/reverse algebra, training,
//! and measurement-consistent restoration.
//!
//! The restoration loop walks a strictly decreasing sub-schedule of
//! timesteps. At each step the network predicts the noise, the implied clean
//! image is clamped to the working domain `[-1, 1]`, and its range-space
//! component is replaced by the pseudo-inverse lift of the received degraded
//! estimate — the diffusion prior only ever fills in what the measurement
//! cannot see. Because `A A+ = I`, every per-step estimate reproduces the
//! measurement exactly under `A`, so consistency is architectural rather
//! than learned: it holds for an untrained network too.

pub mod unet;

use std::fmt;

use ndarray::{Array3, Array4, Axis};
use nullcast_nn::{zero_grads, Adam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::deepjscc::EpochStats;
use crate::linops::{DegradationOperator, LinOpError};
pub use unet::{UNet, UNetArch};

#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionError {
    /// Beta endpoints must satisfy `0 < start < end < 1`.
    BadBetaRange { beta_start: f64, beta_end: f64 },
    /// Requested sub-schedule length is impossible for this `T`.
    BadSamplingCount { n: usize, t_max: usize },
    TimeOutOfRange { t: usize, t_max: usize },
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    /// The network produced a non-finite value at timestep `t`.
    NonFiniteNetwork { t: usize },
    /// Training loss became non-finite.
    Diverged { epoch: usize, step: usize },
    EmptyDataset,
    BadConfig(String),
    LinOp(LinOpError),
}

impl fmt::Display for DiffusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionError::BadBetaRange {
                beta_start,
                beta_end,
            } => write!(
                f,
                "beta endpoints must satisfy 0 < start < end < 1, got [{beta_start}, {beta_end}]"
            ),
            DiffusionError::BadSamplingCount { n, t_max } => {
                write!(f, "cannot choose {n} sampling steps from 1..={t_max}")
            }
            DiffusionError::TimeOutOfRange { t, t_max } => {
                write!(f, "timestep {t} outside valid range 1..={t_max}")
            }
            DiffusionError::ShapeMismatch { expected, got } => {
                write!(f, "tensor shape {got:?} does not match expected {expected:?}")
            }
            DiffusionError::NonFiniteNetwork { t } => {
                write!(f, "network output non-finite at timestep {t}; aborting restoration")
            }
            DiffusionError::Diverged { epoch, step } => {
                write!(f, "training loss non-finite at epoch {epoch}, step {step}")
            }
            DiffusionError::EmptyDataset => write!(f, "dataset is empty"),
            DiffusionError::BadConfig(msg) => write!(f, "invalid training config: {msg}"),
            DiffusionError::LinOp(e) => write!(f, "operator error: {e}"),
        }
    }
}

impl std::error::Error for DiffusionError {}

impl From<LinOpError> for DiffusionError {
    fn from(e: LinOpError) -> Self {
        DiffusionError::LinOp(e)
    }
}

/// Variance schedule of the forward process plus the inference
/// sub-schedule. Index convention: `beta(t)` and `alpha_bar(t)` take
/// `t in [1, T]`; `alpha_bar(0) = 1` by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sampling_steps: Vec<usize>,
}

/// Default number of inference steps.
pub const DEFAULT_SAMPLING_STEPS: usize = 100;

/// Linearly spaced betas from `beta_start` to `beta_end` over `t_max`
/// steps; cumulative products give `alpha_bar`.
pub fn make_linear_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if t_max == 0 {
        return Err(DiffusionError::BadConfig("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadBetaRange {
            beta_start,
            beta_end,
        });
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    let n = DEFAULT_SAMPLING_STEPS.min(t_max);
    let sampling_steps = stride_steps(t_max, n);
    Ok(NoiseSchedule {
        betas,
        alpha_bars,
        sampling_steps,
    })
}

/// `n` uniformly strided timesteps from `t_max` down to 1, strictly
/// decreasing.
fn stride_steps(t_max: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![t_max];
    }
    let mut steps: Vec<usize> = (0..n)
        .map(|j| {
            let v = t_max as f64 - j as f64 * (t_max - 1) as f64 / (n - 1) as f64;
            v.round() as usize
        })
        .collect();
    steps.dedup();
    steps
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t in [1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t in [0, T]`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sampling_steps(&self) -> &[usize] {
        &self.sampling_steps
    }

    /// Replaces the inference sub-schedule with `n` uniformly strided steps.
    pub fn with_sampling_steps(mut self, n: usize) -> Result<Self, DiffusionError> {
        if n == 0 || n > self.t_max() {
            return Err(DiffusionError::BadSamplingCount {
                n,
                t_max: self.t_max(),
            });
        }
        self.sampling_steps = stride_steps(self.t_max(), n);
        Ok(self)
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_max() {
            return Err(DiffusionError::TimeOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::ShapeMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Forward noising: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(
    s: &NoiseSchedule,
    x0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
) -> Result<Array3<f64>, DiffusionError> {
    s.check_t(t)?;
    check_same_shape(x0, eps)?;
    let ab = s.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Inverts the forward map given a noise estimate:
/// `x0 = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(
    s: &NoiseSchedule,
    x_t: &Array3<f64>,
    t: usize,
    eps_hat: &Array3<f64>,
) -> Result<Array3<f64>, DiffusionError> {
    s.check_t(t)?;
    check_same_shape(x_t, eps_hat)?;
    let ab = s.alpha_bar(t);
    if ab <= 0.0 {
        return Err(DiffusionError::BadConfig(format!(
            "alpha_bar({t}) is not positive; schedule degenerate"
        )));
    }
    Ok((x_t - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt())
}

/// Clamps every entry to the diffusion working domain `[-1, 1]`.
pub fn clamp_unit(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.clamp(-1.0, 1.0))
}

/// Replaces the range-space component of `x0t` with the measurement lift:
/// `A+ x_deg_hat + (I - A+ A) x0t`. The result reproduces `x_deg_hat`
/// under `A` exactly, and its null-space component equals that of `x0t`.
pub fn ddnm_refine(
    op: &DegradationOperator,
    x0t: &Array3<f64>,
    x_deg_hat: &Array3<f64>,
) -> Result<Array3<f64>, DiffusionError> {
    let lift = op.apply_pinv(x_deg_hat)?;
    let null = op.null_project(x0t)?;
    Ok(&lift + &null)
}

fn posterior_coefficients(s: &NoiseSchedule, t: usize, t_prev: usize) -> (f64, f64, f64) {
    let ab_t = s.alpha_bar(t);
    let ab_p = s.alpha_bar(t_prev);
    let a_eff = ab_t / ab_p;
    let b_eff = 1.0 - a_eff;
    let c0 = ab_p.sqrt() * b_eff / (1.0 - ab_t);
    let ct = a_eff.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let var = b_eff * (1.0 - ab_p) / (1.0 - ab_t);
    (c0, ct, var)
}

/// One reverse step `t -> t-1`: a Gaussian posterior sample around the mean
/// determined by `x_t` and the clean estimate, with fixed variance. The
/// final step (`t = 1`) returns the mean with no noise.
pub fn reverse_sample(
    s: &NoiseSchedule,
    x_t: &Array3<f64>,
    x0_hat: &Array3<f64>,
    t: usize,
    rng: &mut impl Rng,
) -> Result<Array3<f64>, DiffusionError> {
    reverse_sample_between(s, x_t, x0_hat, t, t - 1, rng)
}

/// Generalized reverse step `t -> t_prev` for strided sub-schedules; the
/// effective one-step forward process from `t_prev` to `t` has
/// `alpha = ab_t / ab_{t_prev}`, and the posterior follows the same closed
/// form as the unit-stride case. `t_prev = 0` returns the mean (which is
/// then exactly the clean estimate).
pub fn reverse_sample_between(
    s: &NoiseSchedule,
    x_t: &Array3<f64>,
    x0_hat: &Array3<f64>,
    t: usize,
    t_prev: usize,
    rng: &mut impl Rng,
) -> Result<Array3<f64>, DiffusionError> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(DiffusionError::BadConfig(format!(
            "reverse step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    check_same_shape(x_t, x0_hat)?;
    let (c0, ct, var) = posterior_coefficients(s, t, t_prev);
    let mean = x0_hat * c0 + x_t * ct;
    if t_prev == 0 || var <= 0.0 {
        return Ok(mean);
    }
    let std = var.sqrt();
    let mut out = mean;
    out.mapv_inplace(|v| {
        let e: f64 = StandardNormal.sample(rng);
        v + std * e
    });
    Ok(out)
}

/// Re-noising trick configuration: after every `travel_length` inference
/// steps, jump back up and redo the stretch `travel_repeat` times in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TimeTravel {
    pub travel_length: usize,
    pub travel_repeat: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RestoreOptions {
    /// Off by default: the canonical loop is the baseline behaviour.
    pub time_travel: Option<TimeTravel>,
}

/// Noise-prediction model plus the static facts needed to run it.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub net: UNet,
    pub image_shape: (usize, usize, usize),
}

impl DiffusionModel {
    pub fn new(arch: UNetArch, image_shape: (usize, usize, usize), seed: u64) -> Result<Self, DiffusionError> {
        let (c, h, w) = image_shape;
        if arch.in_ch != c {
            return Err(DiffusionError::BadConfig(format!(
                "network expects {} channels but images have {c}",
                arch.in_ch
            )));
        }
        arch.validate((h, w)).map_err(DiffusionError::BadConfig)?;
        Ok(DiffusionModel {
            net: UNet::new(arch, seed),
            image_shape,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.net.arch
    }
}

/// Per-iteration observation handed to [`restore_traced`] callbacks.
pub struct StepTrace<'a> {
    pub t: usize,
    pub t_prev: usize,
    /// The refined clean estimate for this step, still in `[-1, 1]` domain.
    pub x0_refined: &'a Array3<f64>,
}

/// Restores a full image from the decoded degraded estimate (`[0, 1]`
/// domain) by running the reverse process with per-step null-space
/// refinement. See the module docs for the loop structure.
pub fn restore(
    model: &DiffusionModel,
    s: &NoiseSchedule,
    op: &DegradationOperator,
    x_deg_hat: &Array3<f64>,
    opts: &RestoreOptions,
    rng: &mut impl Rng,
) -> Result<Array3<f64>, DiffusionError> {
    restore_traced(model, s, op, x_deg_hat, opts, rng, &mut |_| {})
}

/// [`restore`] with a callback observing each iteration; used by tests to
/// verify per-step consistency without duplicating the loop.
pub fn restore_traced(
    model: &DiffusionModel,
    s: &NoiseSchedule,
    op: &DegradationOperator,
    x_deg_hat: &Array3<f64>,
    opts: &RestoreOptions,
    rng: &mut impl Rng,
    on_step: &mut dyn FnMut(StepTrace<'_>),
) -> Result<Array3<f64>, DiffusionError> {
    if op.in_shape() != model.image_shape {
        return Err(DiffusionError::ShapeMismatch {
            expected: model.image_shape,
            got: op.in_shape(),
        });
    }
    if x_deg_hat.dim() != op.out_shape() {
        return Err(DiffusionError::ShapeMismatch {
            expected: op.out_shape(),
            got: x_deg_hat.dim(),
        });
    }
    // Work in the [-1, 1] domain. The structured operators commute with
    // this affine map (their rows sum to one), so the measurement maps the
    // same way as the image.
    let target = x_deg_hat.mapv(|v| 2.0 * v - 1.0);
    let mut x = Array3::from_shape_fn(model.image_shape, |_| StandardNormal.sample(rng));

    let ts = s.sampling_steps().to_vec();
    let travel = opts.time_travel.filter(|tt| tt.travel_length > 0 && tt.travel_repeat > 1);
    let mut i = 0usize;
    let mut repeats_done = 0usize;
    while i < ts.len() {
        let t = ts[i];
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };

        let xb = x.clone().insert_axis(Axis(0));
        let eps_hat = model.net.forward(&xb, &[t]);
        if !eps_hat.iter().all(|v| v.is_finite()) {
            return Err(DiffusionError::NonFiniteNetwork { t });
        }
        let eps_hat = eps_hat.index_axis(Axis(0), 0).to_owned();

        let x0 = predict_x0(s, &x, t, &eps_hat)?;
        let x0 = clamp_unit(&x0);
        let x0 = ddnm_refine(op, &x0, &target)?;
        on_step(StepTrace {
            t,
            t_prev,
            x0_refined: &x0,
        });
        x = reverse_sample_between(s, &x, &x0, t, t_prev, rng)?;

        if let Some(tt) = travel {
            let block_end = (i + 1) % tt.travel_length == 0 && i + 1 < ts.len();
            if block_end && repeats_done + 1 < tt.travel_repeat {
                // Re-noise from t_prev back up to the start of this block
                // and run the stretch again.
                let back = i + 1 - tt.travel_length;
                let t_hi = ts[back];
                let ab_ratio = s.alpha_bar(t_hi) / s.alpha_bar(t_prev);
                let noise = Array3::from_shape_fn(model.image_shape, |_| {
                    let e: f64 = StandardNormal.sample(rng);
                    e
                });
                x = &x * ab_ratio.sqrt() + &(noise * (1.0 - ab_ratio).sqrt());
                i = back;
                repeats_done += 1;
                continue;
            }
            if block_end {
                repeats_done = 0;
            }
        }
        i += 1;
    }
    // Map back to pixel domain. A bare clamp would leak through the
    // operator whenever estimates sit far outside the bounds (an untrained
    // network routinely puts them there), so reconcile the two constraints
    // by alternating projections: the box [0,1]^d and the affine set
    // {v : A v = x_deg_hat} are both convex, and their intersection is
    // nonempty because replicating the measurement is feasible. Each round
    // ends exactly consistent; the loop stops once clamping no longer
    // moves the measurement, so the final clamp leaks at most `tol`.
    let mut out = x.mapv(|v| (v + 1.0) / 2.0);
    let tol = 1e-6;
    for _ in 0..64 {
        let boxed = out.mapv(|v| v.clamp(0.0, 1.0));
        let resid = x_deg_hat - &op.apply(&boxed)?;
        let max_resid = resid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        out = &boxed + &op.apply_pinv(&resid)?;
        if max_resid <= tol {
            break;
        }
    }
    Ok(out.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Training hyperparameters for the noise-prediction model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DdpmTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        DdpmTrainConfig {
            lr: 1e-4,
            batch: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

pub struct DdpmTrainOutcome {
    pub model: DiffusionModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn to_signed(img: &Array3<f64>) -> Array3<f64> {
    img.mapv(|v| 2.0 * v - 1.0)
}

/// Mean squared error between predicted and true noise over every element
/// of the batch; the zero predictor scores exactly the noise variance 1.
struct DdpmBatch {
    x_t: Array4<f64>,
    ts: Vec<usize>,
    eps: Array4<f64>,
}

fn make_batch(
    s: &NoiseSchedule,
    images: &[&Array3<f64>],
    rng: &mut ChaCha8Rng,
) -> DdpmBatch {
    let shape = images[0].dim();
    let n = images.len();
    let mut x_t = Array4::zeros((n, shape.0, shape.1, shape.2));
    let mut eps_all = Array4::zeros((n, shape.0, shape.1, shape.2));
    let mut ts = Vec::with_capacity(n);
    for (b, img) in images.iter().enumerate() {
        let t = rng.random_range(1..=s.t_max());
        let eps = Array3::from_shape_fn(shape, |_| StandardNormal.sample(rng));
        let xt = forward_diffuse(s, &to_signed(img), t, &eps).expect("valid t by construction");
        x_t.index_axis_mut(Axis(0), b).assign(&xt);
        eps_all.index_axis_mut(Axis(0), b).assign(&eps);
        ts.push(t);
    }
    DdpmBatch {
        x_t,
        ts,
        eps: eps_all,
    }
}

fn batch_loss(net: &UNet, batch: &DdpmBatch) -> f64 {
    let pred = net.forward(&batch.x_t, &batch.ts);
    (&pred - &batch.eps).mapv(|d| d * d).sum() / pred.len() as f64
}

fn train_step(net: &mut UNet, opt: &mut Adam, batch: &DdpmBatch) -> f64 {
    zero_grads(net);
    let (pred, cache) = net.forward_t(&batch.x_t, &batch.ts);
    let diff = &pred - &batch.eps;
    let loss = diff.mapv(|d| d * d).sum() / pred.len() as f64;
    let grad = diff.mapv(|d| 2.0 * d / pred.len() as f64);
    net.backward(&cache, &grad);
    opt.step(net);
    loss
}

/// Trains the noise predictor with uniformly sampled timesteps and returns
/// the parameters that scored the best validation loss.
pub fn train_ddpm(
    s: &NoiseSchedule,
    arch: UNetArch,
    cfg: &DdpmTrainConfig,
    train: &[Array3<f64>],
    val: &[Array3<f64>],
) -> Result<DdpmTrainOutcome, DiffusionError> {
    if train.is_empty() || val.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if cfg.batch == 0 || cfg.max_epochs == 0 {
        return Err(DiffusionError::BadConfig(
            "batch size and epoch count must be positive".into(),
        ));
    }
    let image_shape = train[0].dim();
    for img in train.iter().chain(val.iter()) {
        if img.dim() != image_shape {
            return Err(DiffusionError::ShapeMismatch {
                expected: image_shape,
                got: img.dim(),
            });
        }
    }
    let mut model = DiffusionModel::new(arch, image_shape, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_net = model.net.clone();
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut train_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let images: Vec<&Array3<f64>> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(s, &images, &mut rng);
            let loss = train_step(&mut model.net, &mut opt, &batch);
            if !loss.is_finite() {
                return Err(DiffusionError::Diverged { epoch, step });
            }
            train_loss += loss;
            steps += 1;
        }
        train_loss /= steps as f64;

        // Identical noise draws every epoch make validation losses
        // comparable across epochs.
        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0A11);
        let mut val_loss = 0.0;
        let mut val_batches = 0usize;
        for chunk in (0..val.len()).collect::<Vec<_>>().chunks(cfg.batch) {
            let images: Vec<&Array3<f64>> = chunk.iter().map(|&i| &val[i]).collect();
            let batch = make_batch(s, &images, &mut val_rng);
            val_loss += batch_loss(&model.net, &batch);
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
            best_net = model.net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    model.net = best_net;
    Ok(DdpmTrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Fisher-Yates with the caller's RNG, so epoch ordering replays with the
/// seed.
pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
