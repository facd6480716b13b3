//! Generator and discriminator networks, their layers and the checkpoint
//! container.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::Container;
pub use layers::{Activation, Layer, LayerOp, LayerSpec};
pub use network::{
    Discriminator, DiscriminatorSpec, ForwardCache, Generator, GeneratorSpec, Grads, Network, ShapeTrace,
};
pub use tensor::{Real, Tensor};
