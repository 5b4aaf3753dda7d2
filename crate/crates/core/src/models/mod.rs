//! Network architectures and generative heads.

pub mod arm;
pub mod image_model;
pub mod params;
pub mod tarnet;

pub use arm::{Activation, CnnArm, CnnArmConfig, InputDims};
pub use image_model::{ClusterHeads, ImageModel, ModelConfig, ModelKind};
pub use params::{BnRunning, BnUse, Forward, GaussWeight, ParamStore, Sampling};
pub use tarnet::{TarnetModel, TarnetOutput};
