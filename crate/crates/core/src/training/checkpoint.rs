//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `BVCK`, version `u32`, tensor count `u32`,
//! then per tensor `name_len u32`, name bytes, `rank u32`, `rank` dims as
//! `u32`, and the `f64` data row-major. A `u32`-length-prefixed UTF-8 JSON
//! block with sizes, vocabulary and frame stride closes the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"BVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    dims: ModelDims,
    stride: usize,
    vocabulary: Vec<String>,
}

/// A trained model with everything needed to caption new videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub vocab: Vocabulary,
    /// Frame subsampling stride used in training.
    pub stride: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.model.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Metadata {
            dims: self.model.dims,
            stride: self.stride,
            vocabulary: self.vocab.tokens().to_vec(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut tensors: Vec<(String, Matrix)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| bad("truncated tensor header"))? as usize;
            let name = r
                .take(name_len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| bad("invalid tensor name"))?
                .to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated tensor header"))?;
            let mut dims = Vec::new();
            for _ in 0..rank {
                dims.push(r.u32().ok_or_else(|| bad("truncated tensor dims"))? as usize);
            }
            let (rows, cols) = match dims.as_slice() {
                [n] => (*n, 1),
                [rows, cols] => (*rows, *cols),
                _ => return Err(bad(&format!("tensor `{name}` has unsupported rank {rank}"))),
            };
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| bad("tensor too large"))?;
            let data: Vec<f64> = r
                .take(n)
                .ok_or_else(|| bad(&format!("truncated data for tensor `{name}`")))?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        let meta_len = r.u32().ok_or_else(|| bad("missing metadata block"))? as usize;
        let meta_bytes = r.take(meta_len).ok_or_else(|| bad("truncated metadata block"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after metadata"));
        }
        let meta: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| bad(&format!("invalid metadata: {e}")))?;
        let vocab = Vocabulary::from_tokens(meta.vocabulary)?;
        if vocab.len() != meta.dims.vocab {
            return Err(bad("vocabulary size disagrees with model sizes"));
        }
        let mut model = ModelParams::zeros(meta.dims)?;
        let mut slots = model.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(bad(&format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (name, m) in tensors {
            let slot = slots
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| bad(&format!("unknown tensor `{name}`")))?;
            if slot.1.shape() != m.shape() {
                return Err(bad(&format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    m.shape(),
                    slot.1.shape()
                )));
            }
            *slot.1 = m;
        }
        drop(slots);
        Ok(Self {
            model,
            vocab,
            stride: meta.stride,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderInit;
    use crate::encoder::CellVariant;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build(["a dog runs", "a cat sits"], 1);
        let dims = ModelDims {
            feature_dim: 3,
            encoder_hidden: 2,
            decoder_hidden: 3,
            embed: 2,
            attention: 3,
            readout: 2,
            vocab: vocab.len(),
            variant: CellVariant::Standard,
            decoder_init: DecoderInit::Learned,
        };
        Checkpoint {
            model: ModelParams::random(dims, &mut Rng::new(3)).unwrap(),
            vocab,
            stride: 26,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"BVCK");
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 21);
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"encoder.fwd.w");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        let p = Path::new("model.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Checkpoint::from_bytes(&bad, p)
            .unwrap_err()
            .to_string()
            .contains("model.ckpt"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
    }
}
