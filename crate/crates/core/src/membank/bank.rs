//! Memory bank of nominal patch features with optional greedy k-center coreset.
//!
//! Bank file (all integers little-endian):
//!
//! ```text
//! "RSMB" | version u16 | meta_len u32 | meta JSON | count·dim f64 vectors
//! has_coreset u8 | [ n u32 | n × u32 indices ]
//! crc32 u32 over every preceding byte
//! ```
//!
//! The meta JSON holds `dim`, `count`, `provenance`, `backbone` and, with a
//! coreset, its `cover_radius`, `fraction` and `seed`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::{finish_crc, verify_crc, Reader};
use super::features::{Backbone, FeatureGrid};
use super::knn::squared_distance;
use super::MembankError;
use crate::imagecore::Image;

pub const BANK_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"RSMB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RealRef,
    SimulatedRef,
}

/// Identifies the feature extractor a bank was built with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub checkpoint_hash: String,
    pub layer_tag: String,
}

impl BackboneMeta {
    pub fn of(backbone: &Backbone) -> Self {
        Self {
            checkpoint_hash: backbone.checkpoint_hash().to_string(),
            layer_tag: backbone.layer_tag().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    /// Bank indices in selection order.
    pub indices: Vec<usize>,
    /// Largest distance from a bank vector to its nearest coreset member.
    pub cover_radius: f64,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    vectors: Vec<f64>,
    pub provenance: Provenance,
    pub backbone: BackboneMeta,
    coreset: Option<Coreset>,
}

impl MemoryBank {
    pub fn new(
        dim: usize,
        vectors: Vec<f64>,
        provenance: Provenance,
        backbone: BackboneMeta,
    ) -> Result<Self, MembankError> {
        if dim == 0 || vectors.is_empty() {
            return Err(MembankError::EmptyBank);
        }
        if !vectors.len().is_multiple_of(dim) {
            return Err(MembankError::InvalidArgument(format!(
                "{} values is not a multiple of dim {dim}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(MembankError::InvalidArgument("bank has non-finite values".into()));
        }
        Ok(Self {
            dim,
            vectors,
            provenance,
            backbone,
            coreset: None,
        })
    }

    /// Concatenates grids in order, keeping duplicates.
    pub fn from_grids(
        grids: &[FeatureGrid],
        provenance: Provenance,
        backbone: BackboneMeta,
    ) -> Result<Self, MembankError> {
        let first = grids.first().ok_or(MembankError::EmptyRefs)?;
        let mut vectors = Vec::with_capacity(grids.iter().map(|g| g.vectors.len()).sum());
        for g in grids {
            if g.dim != first.dim {
                return Err(MembankError::DimMismatch {
                    expected: first.dim,
                    found: g.dim,
                });
            }
            vectors.extend_from_slice(&g.vectors);
        }
        Self::new(first.dim, vectors, provenance, backbone)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coreset(&self) -> Option<&Coreset> {
        self.coreset.as_ref()
    }

    /// Indices searched by scoring: the coreset if present, else all vectors.
    pub fn search_indices(&self) -> Vec<usize> {
        match &self.coreset {
            Some(c) => c.indices.clone(),
            None => (0..self.len()).collect(),
        }
    }

    pub fn search_len(&self) -> usize {
        self.coreset.as_ref().map_or(self.len(), |c| c.indices.len())
    }
}

/// Feature vectors of every image in `refs` at the backbone's tapped stage.
/// With `SimulatedRef` provenance the caller passes already-simulated images.
pub fn build_bank(backbone: &Backbone, refs: &[Image], provenance: Provenance) -> Result<MemoryBank, MembankError> {
    if refs.is_empty() {
        return Err(MembankError::EmptyRefs);
    }
    let grids = backbone.extract_many(refs)?;
    MemoryBank::from_grids(&grids, provenance, BackboneMeta::of(backbone))
}

/// Number of coreset members for a bank of `n` vectors.
pub fn coreset_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Greedy k-center: a seeded random start, then repeatedly the vector
/// farthest from the current selection (lowest index on ties).
pub fn coreset_subsample(bank: &MemoryBank, fraction: f64, seed: u64) -> Result<MemoryBank, MembankError> {
    if bank.is_empty() {
        return Err(MembankError::EmptyBank);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MembankError::InvalidArgument(format!(
            "coreset fraction {fraction} not in (0, 1]"
        )));
    }
    let n = bank.len();
    let k = coreset_size(n, fraction);
    if k == 0 {
        return Err(MembankError::InvalidArgument(format!(
            "fraction {fraction} of {n} vectors selects nothing"
        )));
    }
    let (indices, cover_radius) = greedy_k_center(bank, k, seed);
    let mut out = bank.clone();
    out.coreset = Some(Coreset {
        indices,
        cover_radius,
        fraction,
        seed,
    });
    Ok(out)
}

fn greedy_k_center(bank: &MemoryBank, k: usize, seed: u64) -> (Vec<usize>, f64) {
    let n = bank.len();
    let mut min_d = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(k);
    let mut next = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
    loop {
        selected.push(next);
        let c = bank.vector(next);
        for (i, d) in min_d.iter_mut().enumerate() {
            let s = squared_distance(bank.vector(i), c);
            if s < *d {
                *d = s;
            }
        }
        let (far, far_d) =
            min_d.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, d)| if *d > best.1 { (i, *d) } else { best },
            );
        if selected.len() == k || far_d == 0.0 {
            // Further picks would duplicate covered vectors; pad with the
            // remaining lowest indices so the size is exact.
            if selected.len() < k {
                let mut taken = vec![false; n];
                for s in &selected {
                    taken[*s] = true;
                }
                selected.extend((0..n).filter(|i| !taken[*i]).take(k - selected.len()));
            }
            return (selected, far_d.max(0.0).sqrt());
        }
        next = far;
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    dim: usize,
    count: usize,
    provenance: Provenance,
    backbone: BackboneMeta,
    coreset: Option<CoresetMeta>,
}

#[derive(Serialize, Deserialize)]
struct CoresetMeta {
    cover_radius: f64,
    fraction: f64,
    seed: u64,
}

pub fn encode_bank(bank: &MemoryBank) -> Vec<u8> {
    let meta = BankMeta {
        dim: bank.dim,
        count: bank.len(),
        provenance: bank.provenance,
        backbone: bank.backbone.clone(),
        coreset: bank.coreset.as_ref().map(|c| CoresetMeta {
            cover_radius: c.cover_radius,
            fraction: c.fraction,
            seed: c.seed,
        }),
    };
    let meta = serde_json::to_vec(&meta).expect("bank meta serializes");
    let mut out = Vec::with_capacity(meta.len() + bank.vectors.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for v in &bank.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &bank.coreset {
        Some(c) => {
            out.push(1);
            out.extend_from_slice(&(c.indices.len() as u32).to_le_bytes());
            for i in &c.indices {
                out.extend_from_slice(&(*i as u32).to_le_bytes());
            }
        }
        None => out.push(0),
    }
    finish_crc(&mut out);
    out
}

fn parse_bank(body: &[u8]) -> Result<MemoryBank, MembankError> {
    let mut r = Reader::new(body);
    let meta_len = r.u32()? as usize;
    let meta: BankMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| MembankError::Format(format!("bank meta: {e}")))?;
    let n = meta
        .count
        .checked_mul(meta.dim)
        .ok_or_else(|| MembankError::Format("bank size overflows".into()))?;
    let vectors = r.f64s(n)?;
    let mut bank = MemoryBank::new(meta.dim, vectors, meta.provenance, meta.backbone)
        .map_err(|e| MembankError::Format(format!("bank body: {e}")))?;
    let has_coreset = r.u8()?;
    match (has_coreset, meta.coreset) {
        (0, None) => {}
        (1, Some(c)) => {
            let k = r.u32()? as usize;
            let mut indices = Vec::with_capacity(k.min(meta.count));
            for _ in 0..k {
                let i = r.u32()? as usize;
                if i >= meta.count {
                    return Err(MembankError::Format(format!("coreset index {i} out of range")));
                }
                indices.push(i);
            }
            bank.coreset = Some(Coreset {
                indices,
                cover_radius: c.cover_radius,
                fraction: c.fraction,
                seed: c.seed,
            });
        }
        _ => return Err(MembankError::Format("coreset flag disagrees with meta".into())),
    }
    r.finish()?;
    Ok(bank)
}

pub fn decode_bank(bytes: &[u8]) -> Result<MemoryBank, MembankError> {
    let body = verify_crc(bytes, MAGIC, BANK_VERSION, parse_bank)?;
    parse_bank(body)
}

pub fn save_bank(path: &Path, bank: &MemoryBank) -> Result<(), MembankError> {
    std::fs::write(path, encode_bank(bank)).map_err(|source| MembankError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_bank(path: &Path) -> Result<MemoryBank, MembankError> {
    let bytes = std::fs::read(path).map_err(|source| MembankError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_bank(&bytes)
}
