//! Imbalance-aware classification heads for precomputed speech embeddings.
//!
//! The crate covers the pieces needed to train and combine small emotion
//! classifiers on skewed label distributions:
//!
//! * [`losses`]: weighted cross-entropy, weighted focal loss and
//!   vector-scaling loss, each with an analytic gradient;
//! * [`pooling`]: attentive statistics pooling over frame sequences;
//! * [`model`]: dense and low-rank-adapted heads with backpropagation;
//! * [`trainer`]: AdamW with gradient accumulation and macro-F1 checkpoint
//!   selection;
//! * [`metrics`]: confusion matrices, macro-F1 and balanced subsets;
//! * [`ensemble`]: majority voting with a designated tiebreaker;
//! * [`verify`]: finite-difference checks for all of the above.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pooling;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
