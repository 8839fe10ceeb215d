//! Small CPU neural-network engine: tensors, layers with manual backward
//! passes, the Adam optimizer, losses and the checkpoint container.

pub mod arch;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use arch::{build_cnn, build_discriminator, build_generator, CnnSpec, DiscriminatorSpec, GeneratorSpec};
pub use checkpoint::{Architecture, EpochRecord, ModelCheckpoint, TrainingMeta};
pub use layers::{Layer, Param, Sequential, Tape};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Real, Tensor};
