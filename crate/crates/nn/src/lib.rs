//! Small dense-tensor neural-network layers with hand-written backpropagation.
//!
//! Everything runs on the CPU in `f64`. Layers expose three entry points:
//! a pure `forward` for inference, a `forward_t` that additionally returns
//! the cache needed for the backward pass, and a `backward` that consumes
//! that cache, accumulates parameter gradients in place, and returns the
//! gradient with respect to the layer input. Gradients accumulate across
//! calls until [`zero_grads`] resets them, so several loss terms can share
//! one optimizer step.
//!
//! Parameters are reached through the [`Params`] visitor trait, which walks
//! every `(name, value, gradient)` triple in a stable order. The visitor is
//! the only parameter enumeration mechanism; the optimizer, checkpointing,
//! and the finite-difference checker all build on it.

pub mod act;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod opt;
pub mod param;
pub mod resize;

pub use act::{leaky_relu, leaky_relu_back, sigmoid, sigmoid_back, silu, silu_back};
pub use conv::Conv2d;
pub use gradcheck::{numeric_grad, read_grad, relative_error};
pub use init::Init;
pub use linear::Linear;
pub use norm::GroupNorm;
pub use opt::Adam;
pub use param::{zero_grads, Param, Params};
pub use resize::{concat_channels, split_channels, upsample2x, upsample2x_back};
