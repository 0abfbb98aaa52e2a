//! Domain-aware visual bias eliminating for generalized zero-shot learning.
//!
//! A semantic-free second-order classifier, trained with an adaptive margin
//! softmax, decides by prediction entropy whether an image belongs to a seen
//! class. Images it rejects are labelled by nearest-neighbour search in a
//! semantic-visual embedding whose semantic branch is found by
//! differentiable architecture search.

pub mod amse;
pub mod autos2v;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod gate;
pub mod gradsuite;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
