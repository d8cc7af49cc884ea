//! Minimal neural-network toolkit on top of `candle-core`.

pub mod checkpoint;
pub mod layers;
pub mod ops;
pub mod store;

pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm, Cbam, ChannelGate, Conv2d, Padding, ResBlock, SpatialGate};
pub use store::{Init, Scope, VarStore};
