pub mod branches;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fme;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod swint;
pub mod training;

pub use config::{Geometry, ModelConfig, Settings, Variant};
pub use error::{CheckpointError, Error, Result};
pub use fme::Model;
pub use params::{Ctx, Mode, ParamStore};
