//! Hierarchical attention encoder-decoder for frame-wise temporal action
//! segmentation, built on a self-contained reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense tensors and the gradient tape every layer
//!   is composed from.
//! - [`layers`]: LSTM cell/sequence, dense layer, and attention pooling.
//! - [`model`]: the two-level encoder-decoder assembling those blocks, with
//!   ablation variants that drop the video embedding and frame attention.
//! - [`data`]: feature/label file formats, windowing, and the synthetic
//!   sequence generator used for desk-scale verification.
//! - [`metrics`]: frame accuracy, segmental F1@k, segmental edit score, and
//!   midpoint-hit mAP.
//! - [`train`]: masked cross-entropy, Adam, and the training loop.
//! - [`checkpoint`]: binary model serialization.
//! - [`gradcheck`]: finite-difference validation of the analytic gradients.
//! - [`bench`]: single-core inference throughput measurement.
//! - [`sweep`]: sequence-shape scaling harness producing CSV rows.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod dd;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod sweep;
pub mod tape;
pub mod train;
pub mod tensor;

pub use tensor::{Scalar, Tensor, TensorError};

pub use tape::{Grads, Tape};

