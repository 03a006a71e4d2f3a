pub mod dose;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod micronet;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod rng;
pub mod tensor;
pub mod uq;
pub mod volume;

pub use error::{Error, Result};
pub use projector::{Projector, ProjectorGeometry, SubsetPartition};
pub use rng::Rng;
pub use tensor::{Channel, Image, Modality, MultimodalStack, Sinogram};
