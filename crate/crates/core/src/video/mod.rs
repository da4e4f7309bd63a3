//! Container format, raw frames and the GOP pipeline.

mod container;
mod frame;
mod pipeline;

pub use container::*;
pub use frame::*;
pub use pipeline::*;
