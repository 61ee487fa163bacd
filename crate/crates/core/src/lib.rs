//! Segmentation editing networks trained with iterative interactions.
//!
//! A base network (autoCNN) produces an initial segmentation; an editing
//! network (interCNN) repeatedly refines it from the image, its previous
//! prediction and a fresh set of class-labelled scribbles. During training
//! and evaluation the scribbles come from a simulated "robot" user that
//! marks misclassified pixels.
//!
//! Module map:
//!
//! - [`grid`] / [`metrics`]: pixel-grid types, Dice and label utilities.
//! - [`dataio`]: dataset loading, splits, synthetic data, normalization, augmentation.
//! - [`robot`]: the random robot user.
//! - [`nets`]: U-Net definition, input assembly and checkpoints.
//! - [`training`]: autoCNN training and iterative interaction training.
//! - [`evaluation`]: simulated editing, K sweeps, latency, reports.

pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod metrics;
pub mod nets;
pub mod robot;
pub mod training;

pub use error::{Error, Result};
pub use grid::{DiceCurve, ImageSlice, LabelMap, Prediction, ScribbleMask};
pub use metrics::{argmax_labels, dice, fuse_binary, mean_dice};
