//! File formats, checkpoint IO and the merge driver around `lewis-core`.

pub mod error;
pub mod formats;
pub mod pipeline;
pub mod safetensors;
pub mod toy;

pub use error::{Error, Result};
pub use safetensors::{read_checkpoint, write_checkpoint};
