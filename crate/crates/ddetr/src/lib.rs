//! Desk-scale deformable-attention detection transformer.
//!
//! The crate is organized around the computational core: bilinear sampling
//! kernels with analytic gradients ([`kernels`]), the three attention
//! operators ([`attention`]), the multi-scale feature pyramid ([`pyramid`]),
//! the encoder/decoder stack ([`transformer`]), box codecs and set losses
//! ([`boxes`], [`matching`], [`loss`]), and a synthetic-scene training
//! harness ([`data`], [`train`], [`bench`]) driven by the `ddetr` CLI.
//!
//! Everything runs in `f64` on the CPU. All forward/backward passes are
//! hand-written and validated against finite differences and independent
//! oracles in the test suite.

pub mod attention;
pub mod bench;
pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod loss;
pub mod macs;
pub mod matching;
pub mod nn;
pub mod param;
pub mod pyramid;
pub mod train;
pub mod transformer;

pub use attention::spot_gradcheck as gradcheck_attention;
pub use error::DdError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DdError>;
