//! Toy-scale flow matching conditioned on rasterized vector scenes, with a
//! learned initial-noise distribution.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod latent;
pub mod model;
pub mod tape;
pub mod train;

pub use error::{FlowError, Result};
pub use latent::Latent;
pub use model::{FlowModel, ModelConfig, NpvHead};
pub use train::{train_flow, TrainConfig};
