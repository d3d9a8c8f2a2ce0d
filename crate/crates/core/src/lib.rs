//! Post-hoc alignment of two frozen token-embedding spaces through learned,
//! modality-specific anchor sets.
//!
//! Each modality describes its tokens by cosine similarity to its own anchors,
//! pools those similarities with anchor-wise attention over tokens, and the two
//! anchor sets are trained jointly with a symmetric contrastive loss. The
//! frozen encoders are represented only by their exported token embeddings.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod matrix;
pub mod relrep;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use io::{Modality, PairedDataset, TokenSequence};
pub use matrix::Matrix;
pub use relrep::{AnchorSet, Forward, Pooling, PooledRep, RelRep};
