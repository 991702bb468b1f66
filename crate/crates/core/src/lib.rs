//! Iwin: a hierarchical vision transformer that learns token representations
//! inside *irregular windows* (regular windows displaced by learned offsets)
//! and agglomerates tokens through the same irregular windows, applied to
//! human-object interaction (HOI) detection as set prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`sampler`]: fractional-coordinate bilinear sampling with gradients
//!   w.r.t. features and coordinates;
//! - [`windowing`]: offset prediction, regular/irregular window partition,
//!   window gathering and scattering;
//! - [`attention`]: window and global multi-head self-attention, the Iwin
//!   attention block and the attention complexity accountant;
//! - [`agglomerate`]: irregular-window token agglomeration and stage plans;
//! - [`model`]: stem, encoder, decoders and prediction heads;
//! - [`matching`]: matching costs, the Hungarian solver and the set loss;
//! - [`harness`]: synthetic data, training, evaluation and window traces.
//!
//! Feature maps inside graphs are `[batch, height, width, channels]`, so a
//! map flattened to rows is a token matrix.

pub mod agglomerate;
pub mod attention;
pub mod harness;
pub mod layers;
pub mod map;
pub mod matching;
pub mod model;
pub mod params;
pub mod sampler;
pub mod windowing;

pub use map::FeatureMap;
pub use numcore::{Graph, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] numcore::Error),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at step {step}: first non-finite value produced by `{op}`")]
    Diverged { step: usize, op: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
