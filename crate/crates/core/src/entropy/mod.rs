//! Lossless coding of integer planes under discretized Laplacian models.

pub mod laplace;
pub mod plane;
pub mod pmf;
pub mod range_coder;

pub use plane::{
    decode_plane, encode_plane, laplace_plane_bits, plane_cross_entropy, symbol_bits, ChannelPmfs, CodedStream, FixedPmf, LaplaceGrid,
    PmfProvider, ScanOrder,
};
pub use pmf::{discretize_laplacian, DiscretePmf, DEFAULT_SUPPORT_MAX, DEFAULT_SUPPORT_MIN, FREQ_TOTAL};
