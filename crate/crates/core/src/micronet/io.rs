//! `PNET1` parameter files: the magic bytes, a little-endian u32 header
//! length, a JSON header with the config and tensor layout, then every
//! parameter and running statistic as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::BnStats;
use super::net::{MicroNet, MicroNetConfig, Param};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PNET1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: MicroNetConfig,
    params: Vec<TensorEntry>,
    running_channels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}

pub fn encode(net: &MicroNet) -> Result<Vec<u8>> {
    let header = Header {
        config: net.config().clone(),
        params: net
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                decay: p.decay,
            })
            .collect(),
        running_channels: net.running_stats().iter().map(|s| s.mean.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * net.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let values = net
        .params()
        .iter()
        .flat_map(|p| p.data.iter())
        .chain(net.running_stats().iter().flat_map(|s| s.mean.iter().chain(&s.var)));
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<MicroNet> {
    let bad = |m: &str| Error::Format(format!("PNET1: {m}"));
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(9..9 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut floats = bytes[9 + hlen..].chunks_exact(4);
    if floats.remainder().len() != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = floats
            .by_ref()
            .take(n)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if v.len() != n {
            return Err(bad("truncated payload"));
        }
        Ok(v)
    };
    let mut params = Vec::with_capacity(header.params.len());
    for e in header.params {
        let data = take(e.shape.iter().product())?;
        params.push(Param {
            name: e.name,
            shape: e.shape,
            data,
            decay: e.decay,
        });
    }
    let mut running = Vec::with_capacity(header.running_channels.len());
    for &c in &header.running_channels {
        let mean = take(c)?;
        let var = take(c)?;
        running.push(BnStats { mean, var });
    }
    if floats.next().is_some() {
        return Err(bad("trailing bytes after payload"));
    }
    MicroNet::from_parts(header.config, params, running)
}

pub fn write_net(path: impl AsRef<Path>, net: &MicroNet) -> Result<()> {
    fs::write(path, encode(net)?)?;
    Ok(())
}

pub fn read_net(path: impl AsRef<Path>) -> Result<MicroNet> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let net = MicroNet::new(MicroNetConfig {
            init_seed: 3,
            ..Default::default()
        })
        .unwrap();
        let back = decode(&encode(&net).unwrap()).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // A second trip is exact.
        assert_eq!(encode(&back).unwrap(), encode(&decode(&encode(&back).unwrap()).unwrap()).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let net = MicroNet::new(MicroNetConfig::default()).unwrap();
        let bytes = encode(&net).unwrap();
        assert!(matches!(decode(b"PVOL1xxxx"), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }
}
