//! Binary checkpoint container.
//!
//! ```text
//! "CTCBCKPT" | u32 version | u64 header_len | header JSON | f64 LE tensors | sha256
//! ```
//! The trailing digest covers every preceding byte; its hex form is the
//! model fingerprint recorded in embedding stores.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ModelSpec, SimSiamModel};
use crate::error::{Error, Result};
use crate::nn::Parameters;

const MAGIC: &[u8; 8] = b"CTCBCKPT";
const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Training configuration that produced the weights, if any.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in elements from the start of the tensor blob.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: SimSiamModel,
    pub fingerprint: String,
}

pub fn encode_checkpoint(model: &SimSiamModel, meta: &CheckpointMeta) -> Result<(Vec<u8>, String)> {
    if meta.model != model.spec {
        return Err(Error::invalid("checkpoint metadata does not describe this model"));
    }
    let mut tensors = Vec::new();
    let mut offset = 0;
    for t in model.tensors() {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.data.len();
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + offset * 8 + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.tensors() {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok((out, hex::encode(digest)))
}

fn digest_prefix(bytes: &[u8]) -> u64 {
    u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX + DIGEST {
        return Err(Error::format(bytes.len() as u64, "checkpoint truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let body_end = bytes.len() - DIGEST;
    let computed = Sha256::digest(&bytes[..body_end]);
    let stored = &bytes[body_end..];
    if computed.as_slice() != stored {
        return Err(Error::Checksum {
            stored: digest_prefix(stored),
            computed: digest_prefix(&computed),
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX
        .checked_add(header_len)
        .filter(|&e| e <= body_end)
        .ok_or_else(|| Error::format(12, "header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| Error::format(PREFIX as u64 + e.column() as u64, format!("bad header: {e}")))?;

    let mut model = SimSiamModel::skeleton(header.meta.model.clone())?;
    let expected: Vec<(String, Vec<usize>)> = model.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::format(
            PREFIX as u64,
            format!("expected {} tensors, header lists {}", expected.len(), header.tensors.len()),
        ));
    }
    let blob = &bytes[header_end..body_end];
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::format(
            header_end as u64,
            format!("tensor blob has {} bytes, expected {}", blob.len(), total * 8),
        ));
    }
    for ((dst, (name, shape)), entry) in model.tensors_mut().into_iter().zip(&expected).zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::format(
                PREFIX as u64,
                format!("tensor {} {:?} does not match architecture ({name} {shape:?})", entry.name, entry.shape),
            ));
        }
        let start = entry.offset * 8;
        let src = blob
            .get(start..start + dst.len() * 8)
            .ok_or_else(|| Error::format((header_end + start) as u64, format!("tensor {name} out of range")))?;
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(Checkpoint {
        meta: header.meta,
        model,
        fingerprint: hex::encode(computed),
    })
}

/// Writes atomically (temp file then rename) and returns the fingerprint.
pub fn save_checkpoint(path: &Path, model: &SimSiamModel, meta: &CheckpointMeta) -> Result<String> {
    let (bytes, fingerprint) = encode_checkpoint(model, meta)?;
    write_atomic(path, &bytes)?;
    Ok(fingerprint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::model::{EncoderSpec, HeadSpec, LossMode};

    fn model() -> SimSiamModel {
        let spec = ModelSpec {
            encoder: EncoderSpec::tiny_conv(vec![4], 8),
            head: HeadSpec::new(8),
            input_size: (8, 8),
            loss_mode: LossMode::Simsiam,
        };
        SimSiamModel::new(spec, 9).unwrap()
    }

    fn meta(m: &SimSiamModel) -> CheckpointMeta {
        CheckpointMeta {
            model: m.spec.clone(),
            train: Some(serde_json::json!({"epochs": 3})),
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let fp = save_checkpoint(&path, &m, &meta(&m)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.fingerprint, fp);
        assert_eq!(ck.meta, meta(&m));
        assert_eq!(fp.len(), 64);
        // byte-identical re-encode
        assert_eq!(encode_checkpoint(&ck.model, &ck.meta).unwrap().0, fs::read(&path).unwrap());
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let m = model();
        let (_, a) = encode_checkpoint(&m, &meta(&m)).unwrap();
        let mut m2 = m.clone();
        m2.tensors_mut()[0][0] += 1e-12;
        let (_, b) = encode_checkpoint(&m2, &meta(&m2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn corruption_is_detected() {
        let m = model();
        let (mut bytes, _) = encode_checkpoint(&m, &meta(&m)).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checksum { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Format { .. })));
        let mut bad = encode_checkpoint(&m, &meta(&m)).unwrap().0;
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
