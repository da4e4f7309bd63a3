//! Motion-free learned video coding.
//!
//! Every frame goes through one λ-conditioned auto-encoder. Inter frames are
//! coded as integer latent residuals against the previous frame's lossless
//! latent, under a spatiotemporal Laplacian entropy model.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod stem;
pub mod tensor;
pub mod train;
pub mod video;
pub mod weights;

pub use error::{Error, Result};
