//! Catalog-constrained beam search over item SIDs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genrec::{DecoderState, GenRecModel};
use crate::nn::log_softmax;
use crate::rqvae::SidMap;
use crate::sequence::{TokenId, TokenVocabulary, BOS, EOS};

/// Prefix tree of every catalog item's token sequence. All leaves sit at the
/// same depth.
#[derive(Clone, Debug)]
pub struct SidTrie {
    children: Vec<BTreeMap<TokenId, usize>>,
    leaf: Vec<Option<usize>>,
    items: Vec<String>,
    depth: usize,
}

impl SidTrie {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Item reached by following `tokens` from the root, if it is a leaf.
    pub fn lookup(&self, tokens: &[TokenId]) -> Option<&str> {
        let mut node = 0;
        for t in tokens {
            node = *self.children[node].get(t)?;
        }
        self.leaf[node].map(|i| self.items[i].as_str())
    }

    /// Admissible next tokens after `prefix`.
    pub fn allowed(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let mut node = 0;
        for t in prefix {
            match self.children[node].get(t) {
                Some(&n) => node = n,
                None => return Vec::new(),
            }
        }
        self.children[node].keys().copied().collect()
    }
}

pub fn build_trie(sids: &SidMap, vocab: &TokenVocabulary) -> Result<SidTrie> {
    let mut trie = SidTrie {
        children: vec![BTreeMap::new()],
        leaf: vec![None],
        items: Vec::with_capacity(sids.len()),
        depth: 0,
    };
    for (key, sid) in sids {
        let tokens = vocab.item_tokens(sid)?;
        if trie.items.is_empty() {
            trie.depth = tokens.len();
        } else if tokens.len() != trie.depth {
            return Err(Error::Consistency(format!(
                "item {key} has {} tokens, expected {}",
                tokens.len(),
                trie.depth
            )));
        }
        let mut node = 0;
        for &t in &tokens {
            node = match trie.children[node].get(&t) {
                Some(&n) => n,
                None => {
                    let n = trie.children.len();
                    trie.children.push(BTreeMap::new());
                    trie.leaf.push(None);
                    trie.children[node].insert(t, n);
                    n
                }
            };
        }
        if let Some(other) = trie.leaf[node] {
            return Err(Error::Integrity(format!(
                "items {} and {key} share a semantic ID",
                trie.items[other]
            )));
        }
        trie.leaf[node] = Some(trie.items.len());
        trie.items.push(key.clone());
    }
    Ok(trie)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item_key: String,
    /// `log π(SID + EOS | context)`.
    pub log_prob: f64,
}

struct Beam {
    node: usize,
    score: f64,
    state: DecoderState,
    last: TokenId,
}

/// Beam search that only expands trie children. Each finished beam is scored
/// with its EOS probability included. Results are sorted by descending score,
/// ties by item key.
pub fn constrained_beam_search(
    model: &GenRecModel,
    trie: &SidTrie,
    context: &[TokenId],
    beam_size: usize,
) -> Result<Vec<Recommendation>> {
    if trie.is_empty() {
        return Err(Error::Catalog("catalog is empty".into()));
    }
    if beam_size == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    let ctx = model.encode_context(context)?;
    let mut beams = vec![Beam {
        node: 0,
        score: 0.0,
        state: model.new_decoder_state(),
        last: BOS,
    }];
    for _ in 0..trie.depth {
        let logits = step(model, &ctx, &mut beams)?;
        let mut cand: Vec<(f64, usize, TokenId, usize)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let lp = log_softmax(logits.row(b));
            for (&tok, &child) in &trie.children[beam.node] {
                cand.push((beam.score + lp[tok as usize], b, tok, child));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cand.truncate(beam_size);
        beams = cand
            .into_iter()
            .map(|(score, b, tok, child)| Beam {
                node: child,
                score,
                state: beams[b].state.clone(),
                last: tok,
            })
            .collect();
    }
    let logits = step(model, &ctx, &mut beams)?;
    let mut out: Vec<Recommendation> = beams
        .iter()
        .enumerate()
        .map(|(b, beam)| Recommendation {
            item_key: trie.items[trie.leaf[beam.node].expect("beam ends on a leaf")].clone(),
            log_prob: beam.score + log_softmax(logits.row(b))[EOS as usize],
        })
        .collect();
    sort_recommendations(&mut out);
    Ok(out)
}

fn step(
    model: &GenRecModel,
    ctx: &crate::genrec::EncodedContext,
    beams: &mut [Beam],
) -> Result<crate::tensor::Mat> {
    let tokens: Vec<TokenId> = beams.iter().map(|b| b.last).collect();
    let mut states: Vec<DecoderState> = beams
        .iter_mut()
        .map(|b| std::mem::take(&mut b.state))
        .collect();
    let logits = model.decode_step(ctx, &mut states, &tokens)?;
    for (b, s) in beams.iter_mut().zip(states) {
        b.state = s;
    }
    Ok(logits)
}

pub fn sort_recommendations(recs: &mut [Recommendation]) {
    recs.sort_by(|a, b| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then_with(|| a.item_key.cmp(&b.item_key))
    });
}

/// Beam width used for a top-`k` list.
pub fn beam_width(k: usize) -> usize {
    (2 * k).max(20)
}

pub fn recommend_top_k(
    model: &GenRecModel,
    trie: &SidTrie,
    context: &[TokenId],
    k: usize,
) -> Result<Vec<Recommendation>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut recs = constrained_beam_search(model, trie, context, beam_width(k))?;
    recs.truncate(k);
    Ok(recs)
}

/// Scores every catalog item exactly; the reference the beam search is
/// checked against.
pub fn exhaustive_ranking(
    model: &GenRecModel,
    sids: &SidMap,
    vocab: &TokenVocabulary,
    context: &[TokenId],
) -> Result<Vec<Recommendation>> {
    let targets = sids
        .values()
        .map(|sid| {
            let mut t = vocab.item_tokens(sid)?;
            t.push(EOS);
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(sids.len());
    for (chunk_keys, chunk) in sids
        .keys()
        .collect::<Vec<_>>()
        .chunks(256)
        .zip(targets.chunks(256))
    {
        let pairs: Vec<(&[TokenId], &[TokenId])> =
            chunk.iter().map(|t| (context, t.as_slice())).collect();
        let scores = model.sequence_log_probs(&pairs)?;
        out.extend(chunk_keys.iter().zip(scores).map(|(k, s)| Recommendation {
            item_key: (*k).clone(),
            log_prob: s,
        }));
    }
    sort_recommendations(&mut out);
    Ok(out)
}

/// TSV with header `user_key, rank, item_key, log_prob`; ranks start at 1.
pub fn write_recommendations(path: &Path, rows: &[(String, Vec<Recommendation>)]) -> Result<()> {
    let mut out = String::from("user_key\trank\titem_key\tlog_prob\n");
    for (user, recs) in rows {
        for (r, rec) in recs.iter().enumerate() {
            writeln!(out, "{user}\t{}\t{}\t{}", r + 1, rec.item_key, rec.log_prob).unwrap();
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
