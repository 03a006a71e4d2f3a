//! A small dual-head encoder-decoder with hand-written backpropagation.
//!
//! Three conv blocks (3×3 conv, batch norm, ReLU) go down by 2×2 average
//! pooling; three mirrored blocks come back up by nearest-neighbour
//! upsampling with concatenated skips. Channel dropout sits right after the
//! bottleneck. Two 1×1 heads give the mean (ReLU) and the variance (exp).

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod net;
pub mod optim;
pub mod train;

pub use io::{read_net, write_net};
pub use layers::Tensor4;
pub use net::{BnMode, Dropout, MicroNet, MicroNetConfig, Param};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use train::{objective, train, EpochLog, LossMode, Sample, TrainConfig, TrainOutcome};

use crate::error::{domain, shape, Result};
use crate::tensor::{Channel, Image, Modality, MultimodalStack};

pub const SLICE_OFFSETS: [i32; 5] = [-2, -1, 0, 1, 2];

/// 2.5D input around `center`: PET, T1 and T2, each at offsets −2..=2,
/// with out-of-range neighbours replaced by the nearest edge slice.
pub fn assemble_25d(pet: &[Image], t1: &[Image], t2: &[Image], center: usize) -> Result<MultimodalStack> {
    if pet.len() != t1.len() || pet.len() != t2.len() {
        return Err(shape(format!(
            "modalities have different slice counts: {}, {}, {}",
            pet.len(),
            t1.len(),
            t2.len()
        )));
    }
    if center >= pet.len() {
        return Err(domain(format!("center slice {center} out of range ({} slices)", pet.len())));
    }
    let last = pet.len() as i64 - 1;
    let mut channels = Vec::with_capacity(15);
    for (modality, slices) in [(Modality::Pet, pet), (Modality::T1, t1), (Modality::T2, t2)] {
        for offset in SLICE_OFFSETS {
            let k = (center as i64 + offset as i64).clamp(0, last) as usize;
            channels.push(Channel {
                modality,
                offset,
                image: slices[k].clone(),
            });
        }
    }
    MultimodalStack::new(Modality::ALL.to_vec(), SLICE_OFFSETS.to_vec(), channels)
}
