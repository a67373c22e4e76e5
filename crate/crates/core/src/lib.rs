//! Sand-dust image restoration toolkit.
//!
//! The crate is organized around the reformulated sand-dust scattering model:
//! a degraded image `I_s` relates to the clean scene `J_s` through a global
//! airlight color, a depth-driven transmission map, and an integrated
//! per-pixel variable `Φ` that folds the intermediate quantities into one
//! field so that restoration is the affine map `J = Φ·(I − α) + β`.
//!
//! Modules:
//! - [`tensor`] — small reverse-mode autodiff engine (NCHW convolutions,
//!   transposed convolutions, PReLU, elementwise ops, gradient checking).
//! - [`imaging`] — the pure scattering-model math on plain rasters.
//! - [`synth`] — training-triple synthesis, procedural depth, dataset I/O.
//! - [`stf`] — the bit-exact tensor file format and checkpoint container.
//! - [`net`] — the Φ-estimation encoder–decoder with residual group and
//!   learnable mixup gate, plus the deterministic post-restoring step.
//! - [`loss`] — dual-node pixel L1 and the contrastive ratio loss over a
//!   frozen feature stack.
//! - [`trainer`] — Adam loop, logging, checkpointing, evaluation.
//! - [`metrics`] — PSNR, SSIM, and CIEDE2000 full-reference metrics.

pub mod imaging;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod seed;
pub mod stf;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use imaging::{Airlight, ControlCoeffs, DepthMap, Image, PhiMap, TransmissionMap};
pub use tensor::{DType, Scalar, Tensor, TensorError};
