//! Explainable, robustness-audited tea-leaf disease classification.
//!
//! The crate covers the whole offline pipeline: dataset indexing and
//! splitting, image preprocessing and augmentation, three transfer-learning
//! CNN families on a small reverse-mode engine, training with early
//! stopping, sign-gradient adversarial training, evaluation reports, and
//! Grad-CAM / occlusion attribution maps.
//!
//! Heavy inner loops (convolutions, batch items, occlusion positions,
//! sweep rows) run on rayon when the default `parallel` feature is on and
//! fall back to plain iterators otherwise; results are identical either way.

pub mod adversarial;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod explainers;
pub mod models;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod trainer;

pub use error::{Error, Result};
