pub mod buffer;
pub mod cam;
pub mod cil;
pub mod codec;
pub mod datamodel;
pub mod desk;
pub mod error;
pub mod harness;
pub mod nn;

pub use error::{Error, Result};
