//! Knowledge graph completion with Siamese structure-augmented text encoders.
//!
//! The crate splits a triple `(h, r, t)` into two asymmetric text sequences,
//! `[CLS] h [SEP] r [SEP]` and `[CLS] t [SEP]`, encodes both with one shared
//! transformer and scores the pair two ways: a classifier over the interactive
//! concatenation `[u; u⊙v; u−v; v]` and a spatial distance between `u` and
//! `v`. Because tail representations do not depend on the query they are
//! computed once per entity and reused across every ranking query.
//!
//! Around the model sit:
//!
//! * [`kg`]: loading, filtered-truth indexing and generalization probes,
//! * [`geo`]: TransE / RotatE baselines and inductive completion,
//! * [`eval`]: filtered ranking with random tie placement and encoder-cost
//!   accounting,
//! * [`ensemble`]: a per-query learned blend of text and graph scores,
//! * [`cli`]: the `star-kgc` command line.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod autodiff;
pub mod cli;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod geo;
pub mod io;
pub mod kg;
pub mod scoring;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
