//! Life-long key-value memory for one-shot learning.
//!
//! The crate is organised around [`memory::MemoryStore`], a fixed-size triple
//! of unit-norm keys, integer values and ages. Queries retrieve the `k` most
//! similar keys under cosine similarity through a pluggable
//! [`nn::NeighborBackend`] (exact blocked scan or random-hyperplane LSH).
//! Supervised queries produce a margin loss with an analytic gradient and
//! then write into memory, averaging into a correct neighbor or evicting the
//! oldest slot.
//!
//! Around the memory sit a seeded synthetic base-4 task generator
//! ([`task`]), a small window encoder trained through the memory loss with
//! Adam ([`learner`]) and a versioned binary snapshot format ([`persist`]).

pub mod error;
pub mod learner;
pub mod memory;
pub mod nn;
pub mod persist;
pub mod task;

pub use error::{Error, Result};
pub use memory::{
    LossReport, MemoryConfig, MemoryStore, QueryResult, WriteKind, WriteOutcome, NONE_VALUE,
};
pub use nn::{LshIndex, Neighbor, NeighborBackend};
