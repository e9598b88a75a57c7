//! Binary checkpoints: magic, format version, JSON metadata, then named
//! tensors in sorted-name order with little-endian `f32` payloads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DASNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detector,
    Semantic,
    Instance,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Detector => "detector",
            Stage::Semantic => "semantic",
            Stage::Instance => "instance",
        })
    }
}

/// Resumable position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::InvalidArgument("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: usize,
    pub rng: RngState,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses a checkpoint. Loaded tensors are not marked trainable.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            8,
            format!("unsupported format version {version}"),
        ));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(path, meta_at as u64, format!("metadata: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, at + 4, "tensor name is not UTF-8"))?
            .to_string();
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::format(
                path,
                at,
                format!("tensor `{name}` out of sorted order"),
            ));
        }
        let ndim = r.u32("rank")? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::format(
                path,
                r.pos as u64 - 4,
                format!("bad rank {ndim}"),
            ));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format(path, r.pos as u64, format!("bad shape {shape:?}")))?;
        let payload = r.take(n.saturating_mul(4), "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name.clone(), Tensor::new(shape, data)?);
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            r.pos as u64,
            "trailing bytes after last tensor",
        ));
    }
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let model = Model::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamStore::new();
        model.init_detector(&mut params, &mut rng);
        let _: u64 = rng.gen();
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::Detector,
                step: 12,
                rng: RngState::capture(&rng),
                model: model.cfg,
            },
            params,
        }
    }

    fn strip(mut c: Checkpoint) -> Checkpoint {
        let names: Vec<String> = c.params.names().map(str::to_string).collect();
        for n in names {
            c.params.get_mut(&n).unwrap().set_requires_grad(false);
        }
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = decode(&encode(&c), Path::new("c")).unwrap();
        assert_eq!(back, strip(c.clone()));
        assert_eq!(encode(&back), encode(&c));
    }

    #[test]
    fn rng_state_resumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: [u32; 7] = rng.gen();
        let mut back = RngState::capture(&rng).restore().unwrap();
        let a: [u64; 4] = rng.gen();
        let b: [u64; 4] = back.gen();
        assert_eq!(a, b);
    }

    fn offset(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn corruption_rejected_with_offset() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[3] ^= 1;
        assert_eq!(offset(decode(&bad, Path::new("c")).unwrap_err()), 0);
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert_eq!(offset(decode(&bad, Path::new("c")).unwrap_err()), 8);
        let cut = &bytes[..bytes.len() - 3];
        assert!(offset(decode(cut, Path::new("c")).unwrap_err()) > 16);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(
            offset(decode(&long, Path::new("c")).unwrap_err()),
            bytes.len() as u64
        );
    }
}
