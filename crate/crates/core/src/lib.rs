//! Volumetric lesion segmentation toolkit.
//!
//! End-to-end building blocks for detecting and segmenting lesions in
//! T1-like 3D volumes: volume containers with a NIfTI-1 subset reader/writer,
//! a deterministic phantom generator, bias-field correction and z-score
//! normalization, a small reverse-mode autodiff core with the 3D U-Net,
//! U-Net++ and 2D DenseNet architectures built on top of it, training
//! utilities, radiomics features with a gradient-boosted-tree classifier,
//! false-positive filters, and the challenge evaluation metrics.
//!
//! Everything is CPU-only, deterministic for a fixed seed, and sized so the
//! whole pipeline runs on synthetic phantoms at desk scale.

pub mod error;
pub mod eval;
pub mod models;
pub mod nifti;
pub mod nn;
pub mod postprocess;
pub mod preprocess;
pub mod radiomics;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
