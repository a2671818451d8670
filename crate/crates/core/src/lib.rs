//! Coefficient-gated shared-basis weight recombination.
//!
//! Every generated layer weight is `reshape(B · gate(A), (d_out, d_in))`
//! where the basis `B` (u×r) is shared by a group of layers and the mixer
//! `A` (r×s) belongs to one layer. The crate covers retrofitting dense
//! checkpoints into that form ([`mimicry`]), shrinking the bases
//! ([`compressor`]), mixer-only fine-tuning ([`adapter`]), a toy MLP
//! testbed ([`toy`]) and bit-exact persistence ([`store`]).

pub mod adapter;
pub mod bank;
pub mod compressor;
pub mod error;
pub mod numerics;
pub mod mimicry;
pub mod optim;
pub mod pipeline;
pub mod recombinator;
pub mod store;
pub mod toy;

pub use error::{Error, Result, StoreError};
