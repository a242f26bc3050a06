//! File formats, datasets and the command-line front end for the
//! `convmlp-core` backbones.
//!
//! * [`persist`]: checkpoints and single-tensor files with a CRC-32 trailer
//! * [`config_text`]: the `key = value` model configuration format
//! * [`cifar`]: CIFAR-10 binary batches
//! * [`image`]: PGM output and PGM/PPM input
//! * [`selftest`]: the oracle and gradient suites behind `convmlp selftest`
//! * [`cli`]: argument parsing and subcommands

pub mod cifar;
pub mod cli;
pub mod config_text;
mod error;
pub mod image;
pub mod persist;
pub mod selftest;

pub use error::{FormatError, Result};
