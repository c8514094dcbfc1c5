//! Retrieval-augmented text-to-motion diffusion.
//!
//! Bottom-up: [`motion`] data and files, [`text`] embedding providers, the
//! hybrid [`retrieval`] index, the [`smt`] denoiser, the [`diffusion`]
//! process, the four-way condition [`mixture`], and evaluation [`metrics`].

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod mixture;
pub mod motion;
pub mod retrieval;
pub mod seed;
pub mod smt;
pub mod synthetic;
pub mod text;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
