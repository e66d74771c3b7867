//! Retrieval-augmented translation with contrastive translation memories.

pub mod decoding;
pub mod error;
pub mod memgraph;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod synthgen;
pub mod textcore;
pub mod training;

pub use error::{CmmError, Result};

pub type Tape = numerics::Tape<f64>;
pub type Params = numerics::ParamStore<f64>;
