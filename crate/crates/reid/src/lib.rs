//! File formats, dataset directories and the `plr-osnet` command line around
//! the `plr-core` network.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod imageio;
pub mod layout;
pub mod render;
pub mod synth;
pub mod trainlog;

pub use error::{ReidError, Result};
