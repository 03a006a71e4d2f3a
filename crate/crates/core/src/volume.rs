//! `PVOL1` binary volumes.
//!
//! Layout (little-endian): magic `PVOL1`, u32 `num_slices`, u32 `height`,
//! u32 `width`, u32 `num_channels`, f64 `voxel_size_mm`, u32 `metadata_len`,
//! `metadata_len` bytes of UTF-8 JSON (a flat string map), then f32 voxels,
//! slice-major, channel-minor, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Image, Sinogram};

pub const MAGIC: &[u8; 5] = b"PVOL1";

pub type Metadata = BTreeMap<String, String>;

/// Images ordered slice-major, channel-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub num_channels: usize,
    pub images: Vec<Image>,
    pub metadata: Metadata,
}

impl Volume {
    pub fn new(num_channels: usize, images: Vec<Image>, metadata: Metadata) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Format("volume must contain at least one image".into()));
        }
        if num_channels == 0 || images.len() % num_channels != 0 {
            return Err(Error::Format(format!(
                "{} images cannot be split into {num_channels} channels",
                images.len()
            )));
        }
        let first = &images[0];
        if images
            .iter()
            .any(|im| !im.same_shape(first) || im.voxel_size() != first.voxel_size())
        {
            return Err(Error::Format("all images in a volume must share one shape".into()));
        }
        Ok(Volume {
            num_channels,
            images,
            metadata,
        })
    }

    pub fn single_channel(images: Vec<Image>, metadata: Metadata) -> Result<Self> {
        Self::new(1, images, metadata)
    }

    pub fn num_slices(&self) -> usize {
        self.images.len() / self.num_channels
    }

    pub fn get(&self, slice: usize, channel: usize) -> &Image {
        &self.images[slice * self.num_channels + channel]
    }

    /// Channel index whose name is listed under the `channels` metadata key.
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.metadata
            .get("channels")?
            .split(',')
            .position(|c| c == name)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_volume(path, &self.images, self.num_channels, &self.metadata)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_volume(path)
    }
}

pub fn write_volume(
    path: impl AsRef<Path>,
    images: &[Image],
    num_channels: usize,
    metadata: &Metadata,
) -> Result<()> {
    let bytes = encode(images, num_channels, metadata)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode(&fs::read(path)?)
}

pub fn encode(images: &[Image], num_channels: usize, metadata: &Metadata) -> Result<Vec<u8>> {
    // Validates shapes.
    Volume::new(num_channels, images.to_vec(), Metadata::new())?;
    let first = &images[0];
    let meta = serde_json::to_vec(metadata)?;
    let mut buf = Vec::with_capacity(37 + meta.len() + 4 * images.len() * first.len());
    buf.extend_from_slice(MAGIC);
    for v in [
        images.len() / num_channels,
        first.height(),
        first.width(),
        num_channels,
    ] {
        buf.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    buf.extend_from_slice(&first.voxel_size().to_le_bytes());
    buf.extend_from_slice(&to_u32(meta.len())?.to_le_bytes());
    buf.extend_from_slice(&meta);
    for img in images {
        for &v in img.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a u32 header field")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated volume file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(5).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("bad magic, not a PVOL1 file".into()));
    }
    let num_slices = cur.u32()?;
    let height = cur.u32()?;
    let width = cur.u32()?;
    let num_channels = cur.u32()?;
    let voxel_size = cur.f64()?;
    let meta_len = cur.u32()?;
    let metadata: Metadata = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Format(format!("metadata is not a JSON string map: {e}")))?;
    let count = num_slices
        .checked_mul(num_channels)
        .ok_or_else(|| Error::Format("header counts overflow".into()))?;
    let plane = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = cur.take(plane.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        images.push(
            Image::from_vec(width, height, voxel_size, data)
                .map_err(|e| Error::Format(format!("invalid image payload: {e}")))?,
        );
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after voxel data",
            bytes.len() - cur.pos
        )));
    }
    Volume::new(num_channels, images, metadata)
}

/// Sinograms travel as single-channel volumes with `kind = sinogram`;
/// rows are angles and columns are detector bins.
pub fn sinograms_to_volume(sinos: &[Sinogram], mut metadata: Metadata) -> Result<Volume> {
    let images = sinos
        .iter()
        .map(|s| Image::from_vec(s.num_bins(), s.num_angles(), s.bin_size(), s.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    metadata.insert("kind".into(), "sinogram".into());
    Volume::single_channel(images, metadata)
}

pub fn volume_to_sinograms(vol: &Volume) -> Result<Vec<Sinogram>> {
    if vol.metadata.get("kind").map(String::as_str) != Some("sinogram") {
        return Err(Error::Format("volume is not tagged kind=sinogram".into()));
    }
    vol.images
        .iter()
        .map(|im| Sinogram::from_vec(im.height(), im.width(), im.voxel_size(), im.data().to_vec()))
        .collect()
}
