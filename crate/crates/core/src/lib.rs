pub mod error;
pub mod attention;
pub mod bench;
pub mod cli;
pub mod codec;
pub mod dit;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod params;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use model::Model;
pub use numcore::{Rng, Tensor};
