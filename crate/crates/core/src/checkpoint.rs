//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `ITR1`, a little-endian `u64` manifest length, the
//! manifest as JSON text, then every parameter's values as concatenated
//! little-endian `f64`s. Manifest offsets are byte offsets into that data
//! section.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Param};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ITR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_params<W: Write>(mut out: W, params: &[Param], meta: serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let entries = params
        .iter()
        .map(|p| {
            let len = (p.tensor.numel() * 8) as u64;
            let e = ManifestEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), offset, len };
            offset += len;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { params: entries, meta })?;
    out.write_all(MAGIC)?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for p in params {
        for v in p.tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_params<R: Read>(mut input: R) -> Result<(Vec<Param>, serde_json::Value)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;

    let mut params = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > data.len() || e.len % 8 != 0 {
            return Err(Error::Format(format!("parameter {} lies outside the data section", e.name)));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(e.shape.clone(), values)
            .map_err(|err| Error::Format(format!("parameter {}: {err}", e.name)))?
            .with_grad();
        params.push(Param { name: e.name, tensor });
    }
    Ok((params, manifest.meta))
}

pub fn save(path: &Path, params: &[Param], meta: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params, meta)?;
    // Write-then-rename so a crash never leaves a truncated checkpoint behind.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<Param>, serde_json::Value)> {
    read_params(fs::File::open(path)?)
}

/// Overwrites the parameters of `net` from a checkpoint with matching names and shapes.
pub fn load_into(net: &mut Network, path: &Path) -> Result<serde_json::Value> {
    let (params, meta) = load(path)?;
    assign(net, &params)?;
    Ok(meta)
}

pub fn assign(net: &mut Network, params: &[Param]) -> Result<()> {
    if params.len() != net.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, network has {}",
            params.len(),
            net.params().len()
        )));
    }
    for (dst, src) in net.params_mut().iter_mut().zip(params) {
        if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter {} {:?} does not match {} {:?}",
                src.name,
                src.tensor.shape(),
                dst.name,
                dst.tensor.shape()
            )));
        }
        dst.tensor.values_mut().copy_from_slice(src.tensor.values());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NetworkSpec, PolicyValueNet};

    #[test]
    fn round_trip_is_bit_exact() {
        let net = PolicyValueNet::new(&NetworkSpec::small_cnn(), &[3, 6, 6], 4, 11).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, net.network().params(), serde_json::json!({"k": 3})).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let (params, meta) = read_params(&buf[..]).unwrap();
        assert_eq!(meta["k"], 3);
        let mut fresh = PolicyValueNet::new(&NetworkSpec::small_cnn(), &[3, 6, 6], 4, 99).unwrap();
        assign(fresh.network_mut(), &params).unwrap();
        for (a, b) in fresh.network().params().iter().zip(net.network().params()) {
            let bits_a: Vec<u64> = a.tensor.values().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.tensor.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn rejects_bad_magic_and_mismatched_shapes() {
        assert!(matches!(read_params(&b"NOPE\0\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
        let a = PolicyValueNet::new(&NetworkSpec::mlp(&[4]), &[3], 2, 0).unwrap();
        let mut b = PolicyValueNet::new(&NetworkSpec::mlp(&[5]), &[3], 2, 0).unwrap();
        assert!(assign(b.network_mut(), a.network().params()).is_err());
    }
}
