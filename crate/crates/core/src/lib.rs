//! Recurrent random deep ensembles for group-level happiness estimation.
//!
//! The pipeline: class-balanced, bootstrapped training replicas feed an
//! ensemble of small residual CNNs; each face yields one feature per
//! member, which a stacked LSTM fuses into a single compact feature. Face
//! estimates come from a linear ε-SVR on that feature, and one of four group
//! emotion models combines the faces of a photo into a group-level
//! prediction.

pub mod aggregator;
pub mod dataset;
pub mod error;
pub mod extractor;
pub mod gem;
pub mod harness;
pub mod nn;
pub(crate) mod rng;
pub mod svr;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
