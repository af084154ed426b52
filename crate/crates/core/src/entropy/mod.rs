//! Probability models and arithmetic coding.

pub mod bitstream;
pub mod gmm;
pub mod model;
pub mod range_coder;
pub mod tables;

pub use bitstream::{read_bitstream, write_bitstream, Bitstream, Header};
pub use gmm::{GmmParams, MIXTURE_COMPONENTS, P_MIN, SIGMA_MIN};
pub use model::EntropyModel;
pub use range_coder::{Cdf, CdfTable, RangeDecoder, RangeEncoder};
