//! DenseRAUnet building blocks and the assembled network.

pub mod blocks;
pub mod checkpoint;
pub mod layers;
pub mod net;

pub use blocks::{DecoderModule, DenseBlock, DenseLayer, Edb, Rau, Scse, ScseFusion, Transition};
pub use layers::{BatchNormLayer, Conv2dLayer, ConvTranspose2dLayer, Ctx, Initializer, Mode, ParamId, ParamStore};
pub use net::{DenseRaUnet, NetConfig, STACK_CHANNELS};
