//! nullcast: a desk-scale laboratory for sending degraded images over a
//! noisy analog channel and repairing them at the receiver.
//!
//! The transmitter applies a known linear degradation (average pooling,
//! channel-mean grayscale, or none), encodes the degraded image with an
//! SNR-conditioned convolutional autoencoder into complex channel symbols,
//! and sends them over a power-constrained additive white Gaussian noise
//! channel. The receiver decodes an estimate of the degraded image and can
//! then run a denoising diffusion model whose per-step estimates are
//! projected so that the known range-space content comes from the decoded
//! measurement while the diffusion prior fills in only the null-space
//! component. Restored outputs therefore stay exactly consistent with what
//! was transmitted.
//!
//! Modules:
//! - [`linops`]: structured degradation operators and their pseudo-inverses.
//! - [`channel`]: complex AWGN channel with average-power normalization.
//! - [`deepjscc`]: the SNR-conditioned autoencoder and its training loop.
//! - [`diffusion`]: noise schedule, DDPM training, and null-space-guided
//!   restoration.
//! - [`metrics`]: PSNR and a pluggable perceptual distance.
//! - [`harness`]: datasets, configs, checkpoints, the end-to-end pipeline,
//!   SNR sweeps, CSV/SVG reporting, and the CLI plumbing.

pub mod channel;
pub mod deepjscc;
pub mod diffusion;
pub mod harness;
pub mod linops;
pub mod metrics;
