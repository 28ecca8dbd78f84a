//! Less-attention hierarchical vision transformer (LIT) at desk scale.
//!
//! - [`tensor`]: channels-last tensors with a reverse-mode tape.
//! - [`nn`]: MLP blocks, transformer blocks, patch embedding, positional encodings.
//! - [`dtm`]: deformable convolution and deformable token merging.
//! - [`equivalence`]: numerical FC / convolution / attention equivalences and receptive-field probes.
//! - [`model`]: stage specs, presets, model assembly and ablations.
//! - [`analyzer`]: static parameter and FLOP accounting.
//! - [`train`]: AdamW, cosine schedule and the synthetic-data training loop.

pub mod analyzer;
pub mod checkpoint;
pub mod data;
pub mod dtm;
pub mod equivalence;
pub mod error;
pub mod export;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{LitError, Result};
pub use model::{ablate, preset, BlockKind, LitModel, MergeKind, ModelConfig, PosEncoding, StageSpec};
pub use params::{Forward, Mode, ParamStore};
pub use tensor::{Real, Tape, Tensor, Var};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
