//! Distributed stereo image compression with decoder-side common information.
//!
//! One image of a stereo pair is transform-coded, quantized and range-coded
//! into a bitstream; the decoder reconstructs it using both the received
//! latent and a common-information representation extracted locally from the
//! correlated second image, which never crosses the channel.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`tensor`] — dense `[C, H, W]` tensors with reverse-mode autodiff,
//!   sufficient to train the transforms on a CPU.
//! * [`transforms`] — the analysis / synthesis / hyper conv stacks.
//! * [`entropy`] — learnable factorized densities, conditional Gaussian
//!   likelihoods, and integer CDF table construction.
//! * [`coder`] — a carry-less 32-bit range coder over integer CDF tables.
//! * [`bitstream`] — the bit-exact `WDSC` container format.
//! * [`model`] — the full encoder/decoder pair and its training objective.
//! * [`train`] — AMSGrad, plateau learning-rate schedule, training loop.
//! * [`data`] — stereo folder ingestion and a synthetic correlated-pair
//!   generator for desk-scale experiments.
//! * [`metrics`] — PSNR and MS-SSIM (7x7 Gaussian window).

pub mod bitstream;
pub mod checkpoint;
pub mod coder;
pub mod data;
pub mod entropy;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use bitstream::{Bitstream, BitstreamHeader};
pub use data::{PairSource, StereoFolder, StereoPair, SyntheticPairs};
pub use entropy::{CdfTable, FactorizedDensity, GaussianConditional};
pub use model::{LossTerms, Metric, ModelConfig, Variant, WynerModel};
pub use tensor::{Graph, NodeId, ParamId, Params, Tensor};
pub use train::{train, TrainConfig, TrainResult};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bitstream error: {0}")]
    Bitstream(String),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("coding error: {0}")]
    Coding(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
