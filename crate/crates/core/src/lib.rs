//! Task-modulated contrastive learning at desk scale.
//!
//! A small MLP backbone whose every layer carries per-class gain/bias
//! modulations is trained on a synthetic class-incremental stream.
//! Each session first fits the new classes' modulations (orthogonalization),
//! then trains the shared weights with contrastive objectives over
//! augmented, modulated and past-network views (consolidation).

pub mod datastream;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
