//! Latent-variable spike-and-slab mixed-effects regression.
//!
//! Replicate measurements of the same unit pair share a latent mean; the
//! latent means are regressed on binary pair features under a spike-and-slab
//! prior, and the indicators are sampled by block Metropolis-Hastings on
//! their collapsed marginal.

pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod evidence;
pub mod hyper;
pub mod linalg;
pub mod model;
pub mod sampler;
pub mod selection;
pub mod simulate;
pub mod state;
pub mod subposterior;

pub use data::{Dataset, ObservationTable, PairDesign, RandomEffectsLayout, Truth};
pub use error::{Error, Result};
pub use hyper::Hyperparameters;
pub use state::{Mode, ModelState};
