//! Individualized multilayer tensor learning.
//!
//! A library for decomposing multi-subject, multi-modality tensor images into
//! shared modality-specific bases plus rank-1 individual layers, extracting
//! low-dimensional subject features, and classifying disease outcomes with an
//! L1-penalized logistic model. Includes a homogeneous CP baseline, an
//! identifiability checker, a synthetic data generator, and an experiment
//! harness.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod hocpd;
pub mod identifiability;
pub mod io;
pub mod linalg;
pub mod logistic;
pub mod multilayer;
pub mod simulate;
pub mod tensor;

pub use dataset::MultimodalDataset;
pub use error::{Error, Result};
pub use tensor::{DenseTensor, KruskalTensor};
