//! IO, file formats, and command drivers for the restoration trainer.
//!
//! The pure algorithms live in `stepsr-core`; this crate owns everything that
//! touches the filesystem or a subprocess: checkpoints ([`ckpt`]), codebook
//! files ([`codebook_io`]), dataset generation and loading ([`dataset`]),
//! the benchmark harness ([`evalkit`]), the external expert scorer
//! ([`expert`]), and the subcommand drivers ([`commands`]).

#![forbid(unsafe_code)]

pub mod ckpt;
pub mod codebook_io;
pub mod commands;
pub mod dataset;
pub mod evalkit;
pub mod expert;
