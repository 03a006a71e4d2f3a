//! Grid containers shared by every stage of the pipeline.
//!
//! All arithmetic is `f64`; only the on-disk volume format narrows to `f32`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};

/// A 2D scalar field on a square voxel grid, row-major.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    voxel_size: f64,
    data: Vec<f64>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("voxel_size", &self.voxel_size)
            .finish_non_exhaustive()
    }
}

fn check_dims(width: usize, height: usize, voxel_size: f64) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::Dimension(format!(
            "voxel size must be positive and finite, got {voxel_size}"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(width: usize, height: usize, voxel_size: f64, fill: f64) -> Result<Self> {
        check_dims(width, height, voxel_size)?;
        if !fill.is_finite() {
            return Err(domain(format!("fill value must be finite, got {fill}")));
        }
        Ok(Image {
            width,
            height,
            voxel_size,
            data: vec![fill; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, voxel_size: f64, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, voxel_size)?;
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(domain(format!("image contains non-finite value {v}")));
        }
        Ok(Image {
            width,
            height,
            voxel_size,
            data,
        })
    }

    /// Same geometry as `self`, new contents. Panics on length mismatch.
    pub fn with_data(&self, data: Vec<f64>) -> Image {
        assert_eq!(data.len(), self.data.len(), "with_data length mismatch");
        Image {
            width: self.width,
            height: self.height,
            voxel_size: self.voxel_size,
            data,
        }
    }

    pub fn zeros_like(&self) -> Image {
        self.with_data(vec![0.0; self.data.len()])
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Image, mut f: impl FnMut(f64, f64) -> f64) -> Result<Image> {
        self.check_same_shape(other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Line-integral projections indexed by (angle, detector bin), row-major by angle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    num_angles: usize,
    num_bins: usize,
    bin_size: f64,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(num_angles: usize, num_bins: usize, bin_size: f64) -> Result<Self> {
        Self::from_vec(num_angles, num_bins, bin_size, vec![0.0; num_angles * num_bins])
    }

    pub fn from_vec(num_angles: usize, num_bins: usize, bin_size: f64, data: Vec<f64>) -> Result<Self> {
        if num_angles == 0 || num_bins == 0 {
            return Err(Error::Dimension(format!(
                "sinogram dimensions must be positive, got {num_angles}x{num_bins}"
            )));
        }
        if !(bin_size.is_finite() && bin_size > 0.0) {
            return Err(Error::Dimension(format!("bin size must be positive, got {bin_size}")));
        }
        if data.len() != num_angles * num_bins {
            return Err(Error::Dimension(format!(
                "sinogram data length {} does not match {num_angles}x{num_bins}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(domain("sinogram contains non-finite values"));
        }
        Ok(Sinogram {
            num_angles,
            num_bins,
            bin_size,
            data,
        })
    }

    pub fn with_data(&self, data: Vec<f64>) -> Sinogram {
        assert_eq!(data.len(), self.data.len(), "with_data length mismatch");
        Sinogram {
            num_angles: self.num_angles,
            num_bins: self.num_bins,
            bin_size: self.bin_size,
            data,
        }
    }

    pub fn num_angles(&self) -> usize {
        self.num_angles
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn bin_size(&self) -> f64 {
        self.bin_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, angle: usize) -> &[f64] {
        &self.data[angle * self.num_bins..(angle + 1) * self.num_bins]
    }

    pub fn get(&self, angle: usize, bin: usize) -> f64 {
        self.data[angle * self.num_bins + bin]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "PET")]
    Pet,
    T1,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Pet, Modality::T1, Modality::T2];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Pet => "PET",
            Modality::T1 => "T1",
            Modality::T2 => "T2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One input channel: an image tagged with its modality and slice offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub modality: Modality,
    pub offset: i32,
    pub image: Image,
}

/// Multichannel network input, ordered modality-major then by slice offset.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalStack {
    channels: Vec<Channel>,
    modalities: Vec<Modality>,
    slice_offsets: Vec<i32>,
}

impl MultimodalStack {
    pub fn new(modalities: Vec<Modality>, slice_offsets: Vec<i32>, channels: Vec<Channel>) -> Result<Self> {
        if modalities.is_empty() || slice_offsets.is_empty() {
            return Err(shape("a stack needs at least one modality and one offset"));
        }
        if channels.len() != modalities.len() * slice_offsets.len() {
            return Err(shape(format!(
                "stack has {} channels, expected {} modalities x {} offsets",
                channels.len(),
                modalities.len(),
                slice_offsets.len()
            )));
        }
        let first = &channels[0].image;
        for ch in &channels {
            if !ch.image.same_shape(first) || ch.image.voxel_size() != first.voxel_size() {
                return Err(shape("all stack channels must share width, height and voxel size"));
            }
        }
        Ok(MultimodalStack {
            channels,
            modalities,
            slice_offsets,
        })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn slice_offsets(&self) -> &[i32] {
        &self.slice_offsets
    }

    pub fn width(&self) -> usize {
        self.channels[0].image.width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].image.height()
    }

    pub fn voxel_size(&self) -> f64 {
        self.channels[0].image.voxel_size()
    }

    /// Keeps only the channels of the given modalities, preserving order.
    pub fn select(&self, keep: &[Modality]) -> Result<MultimodalStack> {
        let modalities: Vec<Modality> = self
            .modalities
            .iter()
            .copied()
            .filter(|m| keep.contains(m))
            .collect();
        let channels = self
            .channels
            .iter()
            .filter(|c| keep.contains(&c.modality))
            .cloned()
            .collect();
        MultimodalStack::new(modalities, self.slice_offsets.clone(), channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_new_examples() {
        let img = Image::new(4, 4, 2.0, 0.0).unwrap();
        assert_eq!(img.len(), 16);
        assert!(img.data().iter().all(|&v| v == 0.0));

        let one = Image::new(1, 1, 1.0, 3.5).unwrap();
        assert_eq!(one.data(), &[3.5]);

        let big = Image::new(64, 64, 2.0, 1.0).unwrap();
        assert_eq!(big.sum(), 4096.0);
    }

    #[test]
    fn image_new_rejects_bad_dims() {
        assert!(matches!(Image::new(0, 4, 1.0, 0.0), Err(Error::Dimension(_))));
        assert!(matches!(Image::new(4, 0, 1.0, 0.0), Err(Error::Dimension(_))));
        assert!(matches!(Image::new(4, 4, 0.0, 0.0), Err(Error::Dimension(_))));
        assert!(Image::new(4, 4, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Image::from_vec(2, 1, 1.0, vec![1.0, f64::INFINITY]).is_err());
        assert!(Image::from_vec(2, 1, 1.0, vec![1.0]).is_err());
    }

    #[test]
    fn stack_requires_consistent_shapes() {
        let a = Image::new(4, 4, 1.0, 0.0).unwrap();
        let b = Image::new(5, 4, 1.0, 0.0).unwrap();
        let ch = |img: &Image, m| Channel {
            modality: m,
            offset: 0,
            image: img.clone(),
        };
        let ok = MultimodalStack::new(
            vec![Modality::Pet, Modality::T1],
            vec![0],
            vec![ch(&a, Modality::Pet), ch(&a, Modality::T1)],
        );
        assert!(ok.is_ok());
        let bad = MultimodalStack::new(
            vec![Modality::Pet, Modality::T1],
            vec![0],
            vec![ch(&a, Modality::Pet), ch(&b, Modality::T1)],
        );
        assert!(bad.is_err());
        let wrong_count = MultimodalStack::new(vec![Modality::Pet], vec![-1, 0], vec![ch(&a, Modality::Pet)]);
        assert!(wrong_count.is_err());
    }
}
