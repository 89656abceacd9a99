//! Multi-label vertebra classification and sub-voxel localization in 3-d scans.
//!
//! The crate implements a residual-block hourglass network whose localization
//! head regresses continuous centroid coordinates through a differentiable
//! integral over softmax-normalized heatmaps, together with the surrounding
//! machinery needed to train and evaluate it on synthetic spine phantoms:
//!
//! * [`tensor`] — a small reverse-mode autodiff tape with the 3-d CNN
//!   primitives (convolution, pooling, group normalization, upsampling).
//! * [`nn`] — parameter store, residual modules, the hourglass encoder /
//!   decoder, and the bidirectional-LSTM classification branch.
//! * [`integral`] — heatmap normalization and coordinate integration
//!   (soft-argmax), plus the non-differentiable hard argmax.
//! * [`loss`] — weighted multi-label cross-entropy and masked smooth-L1
//!   coordinate regression.
//! * [`data`] — phantom generation, preprocessing, isotropic resampling,
//!   random cropping, and the on-disk volume / label formats.
//! * [`train`] — Adam with decoupled weight decay, plateau scheduling,
//!   checkpointing, and the training loop.
//! * [`infer`] — sliding-window inference, vote aggregation, identification
//!   and average-precision metrics.
//! * [`cli`] — the `vertlab` command-line interface.

pub mod cli;
pub mod config;
pub mod data;
pub mod integral;
pub mod loss;
pub mod nn;
pub mod tensor;
pub mod infer;
pub mod train;
