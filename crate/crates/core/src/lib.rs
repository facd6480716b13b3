pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod training;

pub use datagen::{RenderSpec, SceneSample};
pub use error::{Error, Result};
pub use evaluation::{DetBox, EvalReport, Prf};
pub use geometry::{Mask, Point, RegionSet, TextRegion};
pub use image::RgbImage;
pub use inference::{RemovalRequest, TextRemover};
pub use model::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Tensor};
pub use training::{LossReport, Trainer, TrainingConfig};
