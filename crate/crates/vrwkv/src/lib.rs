//! A linear-attention vision encoder at desk scale.
//!
//! Images are cut into patches, embedded, and processed by a stack of
//! pre-norm residual blocks. Each block mixes tokens spatially with the
//! bidirectional WKV operator (see the `biwkv` crate) after a directional
//! token shift, then mixes channels with a squared-ReLU feed-forward path.
//! Forward and backward passes are written out by hand and verified against
//! finite differences.
//!
//! Besides the model itself the crate ships the supporting tooling: a
//! deterministic synthetic classification task, an AdamW training loop with
//! cosine schedule, runtime-scaling benchmarks against dense quadratic
//! attention, effective-receptive-field maps, a binary checkpoint format and
//! a flat key-value run configuration.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod erf;
pub mod layers;
pub mod model;
pub mod optim;
pub mod runconfig;
pub mod shift;
pub mod tensor;
pub mod train;
pub mod verify;

pub use biwkv::Real;
