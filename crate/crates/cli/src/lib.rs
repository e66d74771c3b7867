//! Pipeline commands behind the `cmm` binary.
pub mod ablation;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod pipeline;
