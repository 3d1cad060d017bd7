//! File formats and the command-line pipeline around `patchcam-core`:
//! Netpbm images, dataset directories, `.pcam` model files.

pub mod cli;
mod error;
pub mod imageio;
pub mod model_file;

pub use error::{Error, Result};
