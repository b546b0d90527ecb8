pub mod autodiff;
pub mod error;
pub mod evalstats;
pub mod latentlab;
pub mod model;
pub mod phantom;
pub mod probe;
pub mod preprocess;
pub mod seed;
pub mod shardstore;
pub mod tokenmask;
pub mod volume;

pub use error::{Error, Result};
