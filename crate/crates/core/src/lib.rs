//! Encoder-decoder cardiac segmentation with supervised domain adaptation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`], [`gradcheck`]: dense tensors, a
//!   reverse-mode tape, ADAM, and a finite-difference checker.
//! - [`network`]: the dilated-bottleneck encoder-decoder and its checkpoint format.
//! - [`losses`], [`metrics`]: soft Dice training loss and Dice / Jaccard /
//!   Hausdorff / average surface distance evaluation.
//! - [`imaging`]: CLAHE, z-score, crop/pad, augmentation, connected components.
//! - [`phantom`]: the synthetic multi-sequence benchmark and its file formats.
//! - [`trainer`]: two-stage source training and target fine-tuning, baselines,
//!   and the four-arm comparison.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod phantom;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
