use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::RqVaeModel;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// `M` code indices plus an optional disambiguation index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId {
    pub codes: Vec<usize>,
    pub disambig: Option<usize>,
}

impl SemanticId {
    pub fn new(codes: Vec<usize>) -> Self {
        SemanticId {
            codes,
            disambig: None,
        }
    }

    pub fn with_disambig(codes: Vec<usize>, d: usize) -> Self {
        SemanticId {
            codes,
            disambig: Some(d),
        }
    }
}

/// Key-ordered semantic ID assignment.
pub type SidMap = BTreeMap<String, SemanticId>;

/// Encode and quantize every row of `embeddings`.
pub fn assign_sids(model: &RqVaeModel, embeddings: &EmbeddingMatrix) -> Result<SidMap> {
    if embeddings.dim() != model.config.input_dim {
        return Err(Error::Shape(format!(
            "embeddings have dim {}, tokenizer expects {}",
            embeddings.dim(),
            model.config.input_dim
        )));
    }
    let mut out = SidMap::new();
    const CHUNK: usize = 1024;
    for start in (0..embeddings.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(embeddings.len());
        let mut x = crate::tensor::Mat::zeros(end - start, embeddings.dim());
        for i in start..end {
            for (dst, &v) in x.row_mut(i - start).iter_mut().zip(embeddings.row(i)) {
                *dst = v as f64;
            }
        }
        let h = model.encode_batch(&x)?;
        for i in start..end {
            let q = model.quantize_fast(h.row(i - start));
            out.insert(embeddings.keys()[i].clone(), SemanticId::new(q.codes));
        }
    }
    Ok(out)
}

/// Keys sharing a code tuple get `0, 1, 2, …` in key order; unique tuples get `0`.
pub fn disambiguate_collisions(sids: &SidMap) -> SidMap {
    let mut next: HashMap<&[usize], usize> = HashMap::new();
    sids.iter()
        .map(|(k, s)| {
            let slot = next.entry(s.codes.as_slice()).or_insert(0);
            let d = *slot;
            *slot += 1;
            (k.clone(), SemanticId::with_disambig(s.codes.clone(), d))
        })
        .collect()
}

pub fn max_disambig(sids: &SidMap) -> usize {
    sids.values().filter_map(|s| s.disambig).max().unwrap_or(0)
}

/// Fraction of keys whose base code tuple is shared with at least one other key.
pub fn collision_rate(sids: &SidMap) -> Result<f64> {
    if sids.is_empty() {
        return Err(Error::UndefinedRate(
            "collision rate of an empty SID map".into(),
        ));
    }
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    for s in sids.values() {
        *counts.entry(s.codes.as_slice()).or_default() += 1;
    }
    let colliding: usize = counts.values().filter(|&&c| c >= 2).sum();
    Ok(colliding as f64 / sids.len() as f64)
}

/// TSV: `key, code_1..code_M, disambig` (empty disambig when absent).
pub fn write_sid_map(path: &Path, sids: &SidMap) -> Result<()> {
    let m = sids.values().next().map_or(0, |s| s.codes.len());
    let mut out = String::from("key");
    for i in 1..=m {
        out.push_str(&format!("\tcode_{i}"));
    }
    out.push_str("\tdisambig\n");
    for (k, s) in sids {
        out.push_str(k);
        for c in &s.codes {
            out.push_str(&format!("\t{c}"));
        }
        out.push('\t');
        if let Some(d) = s.disambig {
            out.push_str(&d.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_sid_map(path: &Path) -> Result<SidMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty SID file", path.display())))?;
    let m = header
        .split('\t')
        .filter(|c| c.starts_with("code_"))
        .count();
    let bad = |n: usize| Error::Format(format!("{}:{}: malformed SID row", path.display(), n));
    let mut out = SidMap::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != m + 2 {
            return Err(bad(n + 2));
        }
        let codes = cols[1..=m]
            .iter()
            .map(|c| c.parse::<usize>().map_err(|_| bad(n + 2)))
            .collect::<Result<Vec<_>>>()?;
        let disambig = match cols[m + 1] {
            "" => None,
            d => Some(d.parse::<usize>().map_err(|_| bad(n + 2))?),
        };
        out.insert(cols[0].to_string(), SemanticId { codes, disambig });
    }
    Ok(out)
}
