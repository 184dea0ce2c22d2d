//! Unsupervised feature learning from selective-search surrogate classes.
//!
//! The pipeline runs in five stages, each with its own module:
//!
//! 1. [`segmentation`] and [`proposals`]: oversegment every unlabeled image and
//!    group the superpixels hierarchically into a set of object proposals.
//! 2. [`surrogate`]: count proposals per image, keep the `C` images with the
//!    most proposals, and label every crop with the index of its source image.
//! 3. [`nn`]: train a small CNN on that surrogate classification task.
//! 4. [`features`]: run labeled images through the trained network up to the
//!    last convolution and max-pool each feature map over four quadrants.
//! 5. [`svm`]: fit a one-vs-all linear SVM on the pooled features.
//!
//! [`harness`] wires the stages into a cached, fingerprinted command-line
//! pipeline, and [`data`] holds the dataset readers and image primitives.

pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod nn;
pub mod proposals;
pub mod segmentation;
pub mod surrogate;
pub mod svm;
pub mod synthetic;

pub use error::{Error, Result};
