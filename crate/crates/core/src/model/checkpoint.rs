//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FBKARCH\0" | version u32
//! meta count u32     | (key str, value str)*
//! tensor count u32   | (name str, rank u32, dims u64*, f64 bits*)*
//! counter count u32  | (name str, len u64, u64*)*
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::path::Path;

use super::{ModelDims, ModelParams, TokenCounts};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FBKARCH\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
    pub counters: Vec<(String, Vec<u64>)>,
}

impl TensorArchive {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn counter(&self, name: &str) -> Option<&[u64]> {
        self.counters.iter().find(|(k, _)| k == name).map(|(_, c)| c.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        put_u32(&mut out, self.counters.len());
        for (name, c) in &self.counters {
            put_str(&mut out, name);
            out.extend_from_slice(&(c.len() as u64).to_le_bytes());
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Validation("not a tensor archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Validation(format!("unsupported archive version {version}")));
        }
        let mut archive = TensorArchive::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            archive.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            archive.tensors.push((name, Tensor::new(shape, data)?));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let len = r.u64()? as usize;
            let c = (0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            archive.counters.push((name, c));
        }
        if r.pos != bytes.len() {
            return Err(Error::Validation("trailing bytes after archive".into()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Validation("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Validation("archive string is not UTF-8".into()))
    }
}

/// Model parameters with optional token counters and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub counts: Option<TokenCounts>,
    pub meta: Vec<(String, String)>,
}

const COUNTS_NAME: &str = "token_counts";

impl Checkpoint {
    pub fn to_archive(&self) -> TensorArchive {
        let dims = self.params.dims();
        let tensors = ModelParams::slot_names(&dims)
            .into_iter()
            .zip(self.params.slots().into_iter().cloned())
            .collect();
        let counters = self
            .counts
            .iter()
            .map(|c| (COUNTS_NAME.to_string(), c.as_slice().to_vec()))
            .collect();
        TensorArchive {
            meta: self.meta.clone(),
            tensors,
            counters,
        }
    }

    pub fn from_archive(archive: TensorArchive) -> Result<Self> {
        let tokens = archive
            .tensor("codebook.tokens")
            .ok_or_else(|| Error::Validation("checkpoint has no codebook.tokens".into()))?;
        let mask = archive
            .tensor("mask_token")
            .ok_or_else(|| Error::Validation("checkpoint has no mask_token".into()))?;
        let &[heads, n_tok, hidden] = tokens.shape() else {
            return Err(Error::Validation("codebook.tokens must be rank 3".into()));
        };
        let dims = ModelDims {
            feature_dim: mask.numel(),
            edge_features: archive.tensor("encoder.0.edge").is_some(),
            hidden_dim: hidden,
            heads,
            tokens: n_tok,
        };
        let tensors = ModelParams::slot_names(&dims)
            .iter()
            .map(|name| {
                archive
                    .tensor(name)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("checkpoint is missing `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_slots(&dims, tensors)?;
        let counts = archive
            .counter(COUNTS_NAME)
            .map(|c| TokenCounts::from_vec(heads, n_tok, c.to_vec()))
            .transpose()?;
        Ok(Self {
            params,
            counts,
            meta: archive.meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.to_archive().save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_archive(TensorArchive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let dims = ModelDims {
            feature_dim: 3,
            edge_features: true,
            hidden_dim: 4,
            heads: 2,
            tokens: 3,
        };
        let params = ModelParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        Checkpoint {
            params,
            counts: Some(TokenCounts::from_vec(2, 3, vec![1, 0, 5, 2, 2, 9]).unwrap()),
            meta: vec![("round".into(), "7".into())],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.slots().iter().zip(ck.params.slots()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let bytes = sample().to_archive().to_bytes();
        assert!(matches!(TensorArchive::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Validation(_))));
        assert!(matches!(TensorArchive::from_bytes(b"nonsense"), Err(Error::Validation(_))));
    }
}
