//! Inherently interpretable surface vision transformer.
//!
//! A transformer encoder turns a registered spherical surface, cut into
//! fixed triangular patches, into one embedding per patch. The prototypical
//! surface patch decoder scores each embedding against a learned prototype
//! for the same patch location and combines the rectified cosine
//! similarities with sparse, simplex-constrained weights into a class
//! probability. Prototypes are periodically replaced by real training
//! patches, so every prediction decomposes into "this region looks like
//! that region of subject S".

pub mod encoder;
pub mod error;
pub mod explain;
pub mod io;
pub mod model;
pub mod parallel;
pub mod psp;
pub mod seed;
pub mod surface;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
