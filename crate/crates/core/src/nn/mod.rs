//! Layer set, reference architectures and the trainable model.

pub mod arch;
mod model;

pub use arch::{Architecture, Block, LayerSpec, WeightLayerInfo, WeightShape};
pub use model::{
    ActSite, DigitalBackend, EffectiveWeight, ForwardPass, Mode, Model, MvmBackend, QuantConfig,
};
