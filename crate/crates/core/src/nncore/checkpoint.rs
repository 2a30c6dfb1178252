//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "RSIM" | version u16 | meta_len u32 | meta JSON | count u32
//! count × ( name_len u32 | name | dtype u8 | rank u32 | dims u32×rank | payload )
//! crc32 u32 over every preceding byte
//! ```
//!
//! dtype 1 is f64, dtype 0 is f32 (read-only, widened on load).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelMeta, ModelParams, NnError, Tensor};
use crate::util::sha256_hex;

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"RSIM";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct MetaBlock {
    meta: ModelMeta,
    /// Names of tensors stored with `requires_grad == false`.
    buffers: Vec<String>,
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let block = MetaBlock {
        meta: params.meta.clone(),
        buffers: params
            .iter()
            .filter(|(_, t)| !t.is_trainable())
            .map(|(n, _)| n.to_string())
            .collect(),
    };
    let meta = serde_json::to_vec(&block).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Debug)]
struct Raw {
    block: MetaBlock,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Parses everything between the version field and the trailing checksum.
fn parse_body(body: &[u8]) -> Result<Raw, NnError> {
    let mut r = Reader { buf: body, pos: 0 };
    let meta_len = r.u32()? as usize;
    let meta = r.take(meta_len)?;
    let block: MetaBlock = serde_json::from_slice(meta).map_err(|e| NnError::Format(format!("meta: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NnError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or(NnError::Truncated)?;
        let data = match dtype {
            DTYPE_F64 => r
                .take(numel.checked_mul(8).ok_or(NnError::Truncated)?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(numel.checked_mul(4).ok_or(NnError::Truncated)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(NnError::Format(format!("unknown dtype tag {other} for {name}"))),
        };
        tensors.push((name, dims, data));
    }
    if r.pos != body.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes after tensor records",
            body.len() - r.pos
        )));
    }
    Ok(Raw { block, tensors })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, NnError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            NnError::Truncated
        } else {
            NnError::BadMagic
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(NnError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(NnError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 6 + 4 {
        return Err(NnError::Truncated);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        // A structurally short body means bytes are missing; anything else is corruption.
        return Err(match parse_body(&payload[6..]) {
            Err(NnError::Truncated) => NnError::Truncated,
            _ => NnError::Checksum { stored, computed },
        });
    }
    let raw = parse_body(&payload[6..])?;
    let mut params = ModelParams::new(raw.block.meta);
    for (name, dims, data) in raw.tensors {
        let trainable = !raw.block.buffers.contains(&name);
        let t = Tensor::new(dims, data)
            .map_err(|e| NnError::Format(format!("tensor {name}: {e}")))?
            .requires_grad(trainable);
        params.insert(name, t)?;
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, NnError> {
    let bytes = std::fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// SHA-256 of the encoded checkpoint bytes.
pub fn checkpoint_hash(params: &ModelParams) -> String {
    sha256_hex(&encode_checkpoint(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut meta = ModelMeta::new("test-net-v1");
        meta.epoch = 7;
        meta.training_config_hash = "abc".into();
        meta.info
            .insert("held_out_mse".into(), serde_json::json!(0.1f64 + 1e-17));
        meta.info
            .insert("awkward".into(), serde_json::json!(std::f64::consts::PI / 3.0));
        let mut p = ModelParams::new(meta);
        for (i, shape) in [vec![4, 2, 3, 3], vec![4], vec![]].into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            p.insert(format!("t{i}"), Tensor::new(shape, data).unwrap().requires_grad(i != 1))
                .unwrap();
        }
        p
    }

    #[test]
    fn round_trip_bit_exact() {
        for seed in 0..5 {
            let p = sample(seed);
            let q = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
            assert_eq!(p, q);
            for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
                let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn truncated_is_distinct() {
        let bytes = encode_checkpoint(&sample(1));
        for cut in [3, 8, 40, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(NnError::Truncated)),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn flipped_byte_is_checksum_error() {
        let bytes = encode_checkpoint(&sample(2));
        // Last payload byte and a byte inside the meta JSON.
        for at in [bytes.len() - 5, 30] {
            let mut b = bytes.clone();
            b[at] ^= 0x10;
            assert!(
                matches!(decode_checkpoint(&b), Err(NnError::Checksum { .. })),
                "at {at}"
            );
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode_checkpoint(&sample(3));
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(NnError::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(NnError::BadMagic)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = sample(4);
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        assert_eq!(checkpoint_hash(&p), sha256_hex(&std::fs::read(&path).unwrap()));
    }
}
