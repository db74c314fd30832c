//! Leave-one-out ranking metrics and SID usage statistics.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetSplit, EvalCase};
use crate::decode::{beam_width, constrained_beam_search, Recommendation, SidTrie};
use crate::error::{Error, Result};
use crate::genrec::GenRecModel;
use crate::rqvae::SidMap;
use crate::sequence::{SequenceMode, SidTables, TokenId, TokenVocabulary};

/// 1 when `target` is among the first `k` entries.
pub fn hit_at_k(ranked: &[&str], target: &str, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(if ranked.iter().take(k).any(|r| *r == target) {
        1.0
    } else {
        0.0
    })
}

/// `1 / log2(rank + 1)` for a single relevant item at 1-based `rank ≤ k`.
pub fn ndcg_at_k(ranked: &[&str], target: &str, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(match ranked.iter().take(k).position(|r| *r == target) {
        Some(i) => 1.0 / ((i + 2) as f64).log2(),
        None => 0.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub user_key: String,
    pub context: Vec<TokenId>,
    pub target_item: String,
}

pub fn build_queries(
    cases: &[EvalCase],
    sids: &SidTables,
    vocab: &TokenVocabulary,
    mode: SequenceMode,
    max_items: usize,
) -> Result<Vec<EvalQuery>> {
    cases
        .iter()
        .map(|c| {
            Ok(EvalQuery {
                user_key: c.user_key.clone(),
                context: sids.context(&c.context, vocab, mode, max_items)?.tokens,
                target_item: c.target.item_key.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub hit: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<MetricRow>,
    /// Ranked list per query, in query order, cut at the largest K.
    pub recommendations: Vec<(String, Vec<Recommendation>)>,
}

impl EvalReport {
    pub fn metric(&self, k: usize) -> Option<MetricRow> {
        self.metrics.iter().copied().find(|m| m.k == k)
    }
}

/// Averages HIT@K and NDCG@K over `queries`. Queries are decoded in
/// parallel; the reduction runs in query order so results do not depend on
/// the thread count.
pub fn evaluate(
    model: &GenRecModel,
    trie: &SidTrie,
    queries: &[EvalQuery],
    ks: &[usize],
) -> Result<EvalReport> {
    evaluate_with_beam(model, trie, queries, ks, None)
}

/// As [`evaluate`] with an explicit beam width; `None` uses the default for
/// the largest K.
pub fn evaluate_with_beam(
    model: &GenRecModel,
    trie: &SidTrie,
    queries: &[EvalQuery],
    ks: &[usize],
    beam: Option<usize>,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyDataset("no evaluation queries".into()));
    }
    let kmax = *ks
        .iter()
        .max()
        .ok_or_else(|| Error::Config("no K values".into()))?;
    if ks.contains(&0) {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if let Some(q) = queries
        .iter()
        .find(|q| trie.items().binary_search(&q.target_item).is_err())
    {
        return Err(Error::Data(format!(
            "target item {} of user {} is not in the catalog",
            q.target_item, q.user_key
        )));
    }
    let ranked: Vec<Vec<Recommendation>> = queries
        .par_iter()
        .map(|q| {
            let mut r = constrained_beam_search(
                model,
                trie,
                &q.context,
                beam.unwrap_or(beam_width(kmax)).max(kmax),
            )?;
            r.truncate(kmax);
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let mut metrics = Vec::with_capacity(ks.len());
    for &k in ks {
        let (mut hit, mut ndcg) = (0.0, 0.0);
        for (q, r) in queries.iter().zip(&ranked) {
            let keys: Vec<&str> = r.iter().map(|x| x.item_key.as_str()).collect();
            hit += hit_at_k(&keys, &q.target_item, k)?;
            ndcg += ndcg_at_k(&keys, &q.target_item, k)?;
        }
        let n = queries.len() as f64;
        metrics.push(MetricRow {
            k,
            hit: hit / n,
            ndcg: ndcg / n,
        });
    }
    Ok(EvalReport {
        metrics,
        recommendations: queries
            .iter()
            .map(|q| q.user_key.clone())
            .zip(ranked)
            .collect(),
    })
}

/// Scores every test case of `split` with its context serialized in `mode`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &GenRecModel,
    trie: &SidTrie,
    split: &DatasetSplit,
    sids: &SidTables,
    vocab: &TokenVocabulary,
    mode: SequenceMode,
    max_items: usize,
    ks: &[usize],
) -> Result<EvalReport> {
    let queries = build_queries(&split.test, sids, vocab, mode, max_items)?;
    evaluate(model, trie, &queries, ks)
}

/// TSV with header `model_id, mode, K, HIT, NDCG`.
pub fn metrics_tsv(rows: &[(String, SequenceMode, MetricRow)]) -> String {
    let mut out = String::from("model_id\tmode\tK\tHIT\tNDCG\n");
    for (id, mode, m) in rows {
        writeln!(out, "{id}\t{mode}\t{}\t{:.6}\t{:.6}", m.k, m.hit, m.ndcg).unwrap();
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[(String, SequenceMode, MetricRow)]) -> Result<()> {
    std::fs::write(path, metrics_tsv(rows)).map_err(|e| Error::io(path, e))
}

/// `counts[level][code]` over every SID in `sids`.
pub fn sid_frequency(
    sids: &SidMap,
    levels: usize,
    codebook_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut counts = vec![vec![0usize; codebook_size]; levels];
    for (key, sid) in sids {
        if sid.codes.len() != levels {
            return Err(Error::Consistency(format!(
                "{key} has {} levels, expected {levels}",
                sid.codes.len()
            )));
        }
        for (m, &c) in sid.codes.iter().enumerate() {
            *counts[m].get_mut(c).ok_or_else(|| {
                Error::Consistency(format!(
                    "{key} uses code {c} outside codebook of {codebook_size}"
                ))
            })? += 1;
        }
    }
    Ok(counts)
}

/// The `top_n` most frequent codes per level as `(code, count)`, by
/// descending count then ascending code.
pub fn top_codes(counts: &[Vec<usize>], top_n: usize) -> Vec<Vec<(usize, usize)>> {
    counts
        .iter()
        .map(|row| {
            let mut r: Vec<(usize, usize)> = row.iter().copied().enumerate().collect();
            r.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            r.truncate(top_n);
            r
        })
        .collect()
}

/// TSV with header `level, code, count, corpus`; levels are 1-based.
pub fn histogram_tsv(corpora: &[(&str, &[Vec<(usize, usize)>])]) -> String {
    let mut out = String::from("level\tcode\tcount\tcorpus\n");
    for (name, levels) in corpora {
        for (m, row) in levels.iter().enumerate() {
            for (c, n) in row {
                writeln!(out, "{}\t{c}\t{n}\t{name}", m + 1).unwrap();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rqvae::SemanticId;

    #[test]
    fn metric_hand_values() {
        let ranked = ["a", "b", "c", "d"];
        assert_eq!(hit_at_k(&ranked, "c", 3).unwrap(), 1.0);
        assert_eq!(hit_at_k(&ranked, "d", 3).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&ranked, "a", 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&ranked, "b", 5).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&ranked, "z", 5).unwrap(), 0.0);
        assert!(matches!(hit_at_k(&ranked, "a", 0), Err(Error::Config(_))));
        assert!(matches!(ndcg_at_k(&ranked, "a", 0), Err(Error::Config(_))));
    }

    #[test]
    fn frequency_and_tsv_layout() {
        let mut sids = SidMap::new();
        sids.insert("a".into(), SemanticId::new(vec![0, 1]));
        sids.insert("b".into(), SemanticId::new(vec![0, 2]));
        let f = sid_frequency(&sids, 2, 3).unwrap();
        assert_eq!(f, vec![vec![2, 0, 0], vec![0, 1, 1]]);
        let top = top_codes(&f, 2);
        assert_eq!(top, vec![vec![(0, 2), (1, 0)], vec![(1, 1), (2, 1)]]);
        let tsv = histogram_tsv(&[("item", &top)]);
        assert!(tsv.starts_with("level\tcode\tcount\tcorpus\n1\t0\t2\titem\n"));
        assert_eq!(tsv.lines().count(), 5);
        assert!(sid_frequency(&sids, 2, 2).is_err());
        let m = metrics_tsv(&[(
            "m0".into(),
            SequenceMode::TaskAugmented,
            MetricRow {
                k: 5,
                hit: 0.5,
                ndcg: 0.25,
            },
        )]);
        assert_eq!(
            m,
            "model_id\tmode\tK\tHIT\tNDCG\nm0\ttask\t5\t0.500000\t0.250000\n"
        );
    }
}
