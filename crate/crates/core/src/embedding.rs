//! Dense text embeddings: the "RGEM" binary format and a hashing embedder.
//!
//! Binary layout (little-endian): magic `RGEM`, `u32` version = 1, `u64` row
//! count, `u32` dim, then `count × dim` `f32` values row-major. The companion
//! keys file is UTF-8 with one key per line; line `i` names row `i`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGEM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    keys: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(keys: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        if data.len() != keys.len() * dim {
            return Err(Error::Consistency(format!(
                "{} keys × dim {} != {} values",
                keys.len(),
                dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value in row {} ({})",
                pos / dim,
                keys[pos / dim]
            )));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate embedding key {k:?}")));
            }
        }
        Ok(EmbeddingMatrix {
            keys,
            dim,
            data,
            index,
        })
    }

    /// Build from `(key, vector)` rows.
    pub fn from_rows(rows: Vec<(String, Vec<f32>)>, dim: usize) -> Result<Self> {
        let mut keys = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (k, v) in rows {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "row {k:?} has dim {}, expected {dim}",
                    v.len()
                )));
            }
            keys.push(k);
            data.extend(v);
        }
        Self::new(keys, dim, data)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.row(i))
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Rows restricted to `keys`, in the given order.
    pub fn select(&self, keys: &[String]) -> Result<Self> {
        let mut data = Vec::with_capacity(keys.len() * self.dim);
        for k in keys {
            let row = self
                .get(k)
                .ok_or_else(|| Error::Data(format!("no embedding for key {k:?}")))?;
            data.extend_from_slice(row);
        }
        Self::new(keys.to_vec(), self.dim, data)
    }

    /// Row-wise concatenation; keys must stay unique.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!(
                "dims {} and {} differ",
                self.dim, other.dim
            )));
        }
        let mut keys = self.keys.clone();
        keys.extend(other.keys.iter().cloned());
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(keys, self.dim, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn keys_text(&self) -> String {
        let mut s = String::new();
        for k in &self.keys {
            s.push_str(k);
            s.push('\n');
        }
        s
    }

    pub fn from_parts(bytes: &[u8], keys_text: &str) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("embedding file shorter than header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad embedding magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported embedding version {version}"
            )));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * dim * 4 {
            return Err(Error::Consistency(format!(
                "header declares {count}×{dim} floats but payload has {} bytes",
                payload.len()
            )));
        }
        let keys: Vec<String> = keys_text.lines().map(str::to_string).collect();
        if keys.len() != count {
            return Err(Error::Consistency(format!(
                "keys file has {} lines but header count is {count}",
                keys.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(keys, dim, data)
    }

    pub fn save(&self, matrix_path: &Path, keys_path: &Path) -> Result<()> {
        fs::write(matrix_path, self.to_bytes()).map_err(|e| Error::io(matrix_path, e))?;
        fs::write(keys_path, self.keys_text()).map_err(|e| Error::io(keys_path, e))
    }
}

pub fn load_embeddings(matrix_path: &Path, keys_path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
    let keys = fs::read_to_string(keys_path).map_err(|e| Error::io(keys_path, e))?;
    EmbeddingMatrix::from_parts(&bytes, &keys)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-words hashing embedder: each lowercase whitespace token seeds a
/// Gaussian direction, the directions are summed and L2-normalized.
/// The empty (or whitespace-only) string maps to the zero vector.
pub fn synthetic_embed(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim > 0, "synthetic_embed: dim must be positive");
    let mut acc = vec![0.0f64; dim];
    for token in text.split_whitespace() {
        let token = token.to_lowercase();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, token.as_bytes()));
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    acc.iter().map(|v| (v / norm) as f32).collect()
}
