//! Story corpora, tokenizer files, checkpoints and the `interpol` command-line
//! driver around [`interpol_core`].

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::RunConfig;
pub use error::{FormatError, UsageError};
