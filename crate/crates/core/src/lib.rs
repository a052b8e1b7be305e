//! Semi-supervised wafer-map defect classification with VAE latent guidance.
//!
//! A small dense-tensor engine with reverse-mode autodiff ([`graph`]) backs a
//! convolutional VAE ([`vae`]) and a staged residual classifier
//! ([`classifier`]). The classifier can fuse the VAE's latent mean as a
//! per-channel bias after any stage. The [`semisup`] pipeline trains a
//! teacher on labeled wafer maps, pseudo-labels an unlabeled pool with
//! confidence-thresholded top-K selection, trains a latent-guided student and
//! fine-tunes it on the original labels. [`data`] generates synthetic maps
//! for the nine WM-811K failure classes and handles JSONL ingestion,
//! balancing and splitting; [`metrics`] provides confusion-matrix evaluation.

pub mod adam;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod semisup;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
