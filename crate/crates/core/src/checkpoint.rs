//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then the parameter blob. Every tensor is stored little-endian in
//! its own dtype at the offset recorded in the header; the blob's SHA-256
//! is recorded too, so truncation and corruption are detected on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::partition::PartitionSpec;

pub const MAGIC: [u8; 8] = *b"PARTREP\x00";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Byol,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Which network or state the tensor belongs to (`model`, `online`,
    /// `target`, `optimizer`).
    pub role: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: ModelKind,
    /// Architecture of the stored model.
    pub spec: serde_json::Value,
    pub partition: PartitionSpec,
    pub epoch: usize,
    pub seed: u64,
    pub dtype: String,
    /// Per-step loss values over the whole run.
    pub loss_history: Vec<f64>,
    /// Per-epoch means of the step losses.
    pub epoch_losses: Vec<f64>,
    pub optimizer_step: u64,
    /// Training configuration and other state needed to resume.
    pub state: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

impl CheckpointHeader {
    pub fn new(kind: ModelKind, spec: serde_json::Value, partition: PartitionSpec, dtype: DType) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind,
            spec,
            partition,
            epoch: 0,
            seed: 0,
            dtype: dtype.as_str().to_string(),
            loss_history: Vec::new(),
            epoch_losses: Vec::new(),
            optimizer_step: 0,
            state: serde_json::Value::Null,
            tensors: Vec::new(),
            blob_sha256: String::new(),
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.dtype)
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Format(format!("unsupported checkpoint dtype {other}"))),
    }
}

/// Header plus tensors keyed by `(role, name)`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<(String, String), Tensor>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Self { header, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, role: &str, name: &str, t: Tensor) {
        self.tensors.insert((role.to_string(), name.to_string()), t);
    }

    pub fn insert_all(&mut self, role: &str, named: Vec<(String, Tensor)>) {
        for (name, t) in named {
            self.insert(role, &name, t);
        }
    }

    /// Every tensor with the given role, keyed by name.
    pub fn role(&self, role: &str) -> BTreeMap<String, Tensor> {
        self.tensors.iter().filter(|((r, _), _)| r == role).map(|((_, n), t)| (n.clone(), t.clone())).collect()
    }
}

fn tensor_bytes(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let flat = t.to_dtype(dtype)?.flatten_all()?;
    Ok(match dtype {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Format(format!("unsupported tensor dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        DType::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Format(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<CheckpointHeader> {
    let dtype = ckpt.header.dtype()?;
    let mut header = ckpt.header.clone();
    header.version = FORMAT_VERSION;
    header.tensors.clear();
    let mut blob = Vec::new();
    for ((role, name), t) in &ckpt.tensors {
        let bytes = tensor_bytes(t, dtype)?;
        header.tensors.push(TensorEntry {
            name: name.clone(),
            role: role.clone(),
            shape: t.dims().to_vec(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
        });
        blob.extend(bytes);
    }
    header.blob_sha256 = hex::encode(Sha256::digest(&blob));
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&blob)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(header)
}

fn read_header_from<R: Read>(r: &mut R, path: &Path) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| truncated(path, e))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| truncated(path, e))?;
    let len = u64::from_le_bytes(len);
    let file_len = std::fs::metadata(path)?.len();
    if len > file_len {
        return Err(Error::Integrity(format!("{}: header length {len} exceeds file size {file_len}", path.display())));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|e| truncated(path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| Error::Integrity(format!("{}: unreadable header: {e}", path.display())))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    Ok(serde_json::from_value(value)?)
}

fn truncated(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Integrity(format!("{} is truncated", path.display()))
    } else {
        Error::Io(e)
    }
}

/// Reads only the header; the parameter blob is not touched.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointHeader> {
    read_header_from(&mut BufReader::new(File::open(path)?), path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r, path)?;
    let dtype = header.dtype()?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let expected: u64 = header.tensors.iter().map(|t| t.len).sum();
    if (blob.len() as u64) < expected {
        return Err(Error::Integrity(format!(
            "{}: parameter blob has {} bytes, header lists {expected}",
            path.display(),
            blob.len()
        )));
    }
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != header.blob_sha256 {
        return Err(Error::Integrity(format!("{}: blob checksum mismatch", path.display())));
    }
    let width = dtype.size_in_bytes() as u64;
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        if e.len != count as u64 * width || e.offset + e.len > blob.len() as u64 {
            return Err(Error::Integrity(format!("tensor {}/{} has an inconsistent index entry", e.role, e.name)));
        }
        let bytes = &blob[e.offset as usize..(e.offset + e.len) as usize];
        tensors.insert((e.role.clone(), e.name.clone()), tensor_from_bytes(bytes, &e.shape, dtype)?);
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let spec = PartitionSpec::new(2, 1, 0.5).unwrap();
        let mut h = CheckpointHeader::new(ModelKind::Vae, serde_json::json!({"k": 1}), spec, DType::F32);
        h.epoch = 3;
        h.loss_history = vec![1.0, 0.5];
        let mut c = Checkpoint::new(h);
        c.insert("model", "w", Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        c.insert("optimizer", "first.w", Tensor::new(&[0.1f32, 0.2], &Device::Cpu).unwrap());
        c
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = sample();
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.header.epoch, 3);
        assert_eq!(back.header.loss_history, vec![1.0, 0.5]);
        let w = back.role("model")["w"].to_vec2::<f32>().unwrap();
        assert_eq!(w, vec![vec![1.5, -2.0], vec![0.25, 3.0]]);
        assert_eq!(inspect_checkpoint(&p).unwrap().partition, c.header.partition);
        // identical state, identical bytes
        let p2 = dir.path().join("d.ckpt");
        save_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [4, 12, 40, bytes.len() - 3] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&p), Err(Error::Integrity(_))), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        header["version"] = serde_json::json!(7);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(&bytes[16 + len..]);
        std::fs::write(&p, out).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Version { found: 7, expected: 1 })));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        std::fs::write(&p, b"NOTACKPT\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(inspect_checkpoint(&p), Err(Error::Format(_))));
    }
}
