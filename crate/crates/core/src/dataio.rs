//! Review ingestion, k-core filtering, chronological sequences, the
//! leave-one-out split, and a synthetic generator with planted review signal.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
    /// May be empty; empty reviews contribute no review tokens downstream.
    pub review_text: String,
}

impl Interaction {
    pub fn new(
        user: impl Into<String>,
        item: impl Into<String>,
        timestamp: i64,
        review: impl Into<String>,
    ) -> Self {
        Interaction {
            user_key: user.into(),
            item_key: item.into(),
            timestamp,
            review_text: review.into(),
        }
    }

    pub fn has_review(&self) -> bool {
        !self.review_text.trim().is_empty()
    }

    /// Key under which this interaction's review embedding and SID are stored.
    pub fn review_key(&self) -> String {
        format!("{}|{}|{}", self.user_key, self.item_key, self.timestamp)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_key: String,
    pub interactions: Vec<Interaction>,
}

/// A held-out prediction case: all strictly earlier interactions and the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user_key: String,
    pub context: Vec<Interaction>,
    pub target: Interaction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<UserSequence>,
    pub validation: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewFormat {
    JsonLines,
    Tsv,
}

impl std::str::FromStr for ReviewFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "json-lines" | "jsonl" => Ok(ReviewFormat::JsonLines),
            "tsv" => Ok(ReviewFormat::Tsv),
            other => Err(format!(
                "unknown review format {other:?} (expected json-lines|tsv)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseReport {
    pub interactions: Vec<Interaction>,
    pub skipped: usize,
}

fn json_str<'a>(v: &'a serde_json::Value, field: &str) -> Option<&'a str> {
    v.get(field)
        .and_then(|x| x.as_str())
        .filter(|s| !s.is_empty())
}

fn parse_json_record(line: &str) -> Option<Interaction> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let user = json_str(&v, "reviewerID")?;
    let item = json_str(&v, "asin")?;
    let ts = v.get("unixReviewTime").and_then(|t| {
        t.as_i64()
            .or_else(|| t.as_str().and_then(|s| s.trim().parse().ok()))
    })?;
    if ts < 0 {
        return None;
    }
    let review = json_str(&v, "reviewText")
        .or_else(|| json_str(&v, "summary"))
        .unwrap_or("");
    Some(Interaction::new(user, item, ts, review))
}

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn parse_tsv_record(line: &str) -> Option<Interaction> {
    let mut cols = line.splitn(4, '\t');
    let user = unescape_field(cols.next()?);
    let item = unescape_field(cols.next()?);
    let ts: i64 = cols.next()?.trim().parse().ok()?;
    let review = cols.next().map(unescape_field).unwrap_or_default();
    if user.is_empty() || item.is_empty() || ts < 0 {
        return None;
    }
    Some(Interaction::new(user, item, ts, review))
}

fn is_tsv_header(line: &str) -> bool {
    line.starts_with("user\t") || line.starts_with("user_key\t")
}

/// Parse review records from text; malformed or incomplete records are skipped and counted.
pub fn parse_reviews_str(text: &str, format: ReviewFormat) -> Result<ParseReport> {
    let mut interactions = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if format == ReviewFormat::Tsv && i == 0 && is_tsv_header(line) {
            continue;
        }
        let parsed = match format {
            ReviewFormat::JsonLines => parse_json_record(line),
            ReviewFormat::Tsv => parse_tsv_record(line),
        };
        match parsed {
            Some(x) => interactions.push(x),
            None => skipped += 1,
        }
    }
    if interactions.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no parseable records ({skipped} skipped)"
        )));
    }
    Ok(ParseReport {
        interactions,
        skipped,
    })
}

pub fn parse_reviews(path: &Path, format: ReviewFormat) -> Result<ParseReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reviews_str(&text, format)
}

/// Keep only the earliest interaction per (user, item); later repeats are dropped.
pub fn dedupe_user_items(interactions: &[Interaction]) -> Vec<Interaction> {
    let mut first: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, x) in interactions.iter().enumerate() {
        let e = first.entry((&x.user_key, &x.item_key)).or_insert(i);
        let cur = &interactions[*e];
        if (x.timestamp, &x.review_text) < (cur.timestamp, &cur.review_text) {
            *e = i;
        }
    }
    let keep: HashSet<usize> = first.into_values().collect();
    interactions
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, x)| x.clone())
        .collect()
}

/// Iteratively drop users and items with fewer than `k` interactions until a fixed point.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Result<Vec<Interaction>> {
    if k == 0 {
        return Err(Error::Config("k-core threshold must be >= 1".into()));
    }
    let mut current: Vec<Interaction> = interactions.to_vec();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for x in &current {
            *users.entry(&x.user_key).or_default() += 1;
            *items.entry(&x.item_key).or_default() += 1;
        }
        let before = current.len();
        let next: Vec<Interaction> = current
            .iter()
            .filter(|x| users[x.user_key.as_str()] >= k && items[x.item_key.as_str()] >= k)
            .cloned()
            .collect();
        if next.len() == before {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{k}-core filtering removed every interaction"
        )));
    }
    Ok(current)
}

/// Minimum interactions per user so that train, validation and test all exist.
pub const MIN_SEQUENCE_LEN: usize = 3;

/// Group by user (sorted by key), order by `(timestamp, item_key)`, drop short users.
pub fn build_sequences(interactions: &[Interaction]) -> Vec<UserSequence> {
    let mut by_user: BTreeMap<&str, Vec<Interaction>> = BTreeMap::new();
    for x in interactions {
        by_user.entry(&x.user_key).or_default().push(x.clone());
    }
    by_user
        .into_iter()
        .filter(|(_, v)| v.len() >= MIN_SEQUENCE_LEN)
        .map(|(u, mut v)| {
            v.sort_by(|a, b| {
                (a.timestamp, &a.item_key, &a.review_text).cmp(&(
                    b.timestamp,
                    &b.item_key,
                    &b.review_text,
                ))
            });
            UserSequence {
                user_key: u.to_string(),
                interactions: v,
            }
        })
        .collect()
}

/// Last interaction → test, second-to-last → validation, the rest → train.
pub fn leave_one_out_split(sequences: &[UserSequence]) -> Result<DatasetSplit> {
    let mut split = DatasetSplit {
        train: Vec::with_capacity(sequences.len()),
        validation: Vec::with_capacity(sequences.len()),
        test: Vec::with_capacity(sequences.len()),
    };
    for s in sequences {
        let n = s.interactions.len();
        if n < MIN_SEQUENCE_LEN {
            return Err(Error::Precondition(format!(
                "user {} has {n} interactions; leave-one-out needs at least {MIN_SEQUENCE_LEN}",
                s.user_key
            )));
        }
        split.train.push(UserSequence {
            user_key: s.user_key.clone(),
            interactions: s.interactions[..n - 2].to_vec(),
        });
        split.validation.push(EvalCase {
            user_key: s.user_key.clone(),
            context: s.interactions[..n - 2].to_vec(),
            target: s.interactions[n - 2].clone(),
        });
        split.test.push(EvalCase {
            user_key: s.user_key.clone(),
            context: s.interactions[..n - 1].to_vec(),
            target: s.interactions[n - 1].clone(),
        });
    }
    Ok(split)
}

/// Internal sequence file: header plus `user_key, item_key, timestamp, review_text`.
pub fn write_interactions_tsv(interactions: &[Interaction]) -> String {
    let mut out = String::from("user_key\titem_key\ttimestamp\treview_text\n");
    for x in interactions {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            escape_field(&x.user_key),
            escape_field(&x.item_key),
            x.timestamp,
            escape_field(&x.review_text)
        ));
    }
    out
}

pub fn read_interactions_tsv(path: &Path) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || (i == 0 && is_tsv_header(line)) {
            continue;
        }
        let x = parse_tsv_record(line).ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: malformed sequence row",
                path.display(),
                i + 1
            ))
        })?;
        out.push(x);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Inclusive range of interactions per user.
    pub seq_len_range: (usize, usize),
    /// Probability that a review is planted in the next item's cluster.
    pub signal_strength: f64,
    pub num_clusters: usize,
    pub sub_clusters: usize,
    pub emb_dim: usize,
    /// Probability the next cluster follows the fixed cluster successor map.
    pub transition_prob: f64,
    /// Zipf exponent of within-cluster item popularity.
    pub popularity_skew: f64,
    pub empty_review_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 3000,
            num_items: 500,
            seq_len_range: (5, 8),
            signal_strength: 0.9,
            num_clusters: 10,
            sub_clusters: 4,
            emb_dim: 32,
            transition_prob: 0.5,
            popularity_skew: 1.0,
            empty_review_rate: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.num_items < 10 {
            return bad("num_items must be >= 10");
        }
        if self.num_users == 0 {
            return bad("num_users must be positive");
        }
        let (lo, hi) = self.seq_len_range;
        if lo < MIN_SEQUENCE_LEN || hi < lo {
            return bad("seq_len_range must satisfy 3 <= min <= max");
        }
        if hi > self.num_items {
            return bad("max sequence length exceeds num_items");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.transition_prob)
            || !(0.0..=1.0).contains(&self.empty_review_rate)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_items {
            return bad("num_clusters must lie in [1, num_items]");
        }
        if self.sub_clusters == 0 || self.emb_dim == 0 {
            return bad("sub_clusters and emb_dim must be positive");
        }
        if self.popularity_skew < 0.0 || !self.popularity_skew.is_finite() {
            return bad("popularity_skew must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    pub items: EmbeddingMatrix,
    pub reviews: EmbeddingMatrix,
    /// Ground-truth coarse cluster per item row.
    pub item_clusters: Vec<usize>,
    /// Cluster each review row was planted in.
    pub review_clusters: Vec<usize>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Clustered item embeddings and user sequences whose reviews encode the
/// coarse cluster of the user's next item with probability `signal_strength`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.num_clusters;
    let d = config.emb_dim;

    let centroids: Vec<Vec<f64>> = (0..c).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let sub_offsets: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|_| {
            (0..config.sub_clusters)
                .map(|_| gaussian_vec(&mut rng, d, 0.35))
                .collect()
        })
        .collect();
    let mut successor: Vec<usize> = (0..c).collect();
    successor.shuffle(&mut rng);

    let width = format!("{}", config.num_items - 1).len();
    let item_keys: Vec<String> = (0..config.num_items)
        .map(|i| format!("i{i:0width$}"))
        .collect();
    let item_clusters: Vec<usize> = (0..config.num_items).map(|i| i % c).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut item_rows = Vec::with_capacity(config.num_items);
    for i in 0..config.num_items {
        let cl = item_clusters[i];
        let sub = (i / c) % config.sub_clusters;
        members[cl].push(i);
        let noise = gaussian_vec(&mut rng, d, 0.1);
        let row: Vec<f32> = (0..d)
            .map(|j| (centroids[cl][j] + sub_offsets[cl][sub][j] + noise[j]) as f32)
            .collect();
        item_rows.push((item_keys[i].clone(), row));
    }
    let weights: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            (0..m.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(config.popularity_skew))
                .collect()
        })
        .collect();

    let review_noise = Normal::new(0.0, 0.15).expect("valid normal");
    let uwidth = format!("{}", config.num_users - 1).len();
    let mut interactions = Vec::new();
    let mut review_rows = Vec::new();
    let mut review_clusters = Vec::new();
    let base_ts: i64 = 1_600_000_000;
    for u in 0..config.num_users {
        let user = format!("u{u:0uwidth$}");
        let len = rng.random_range(config.seq_len_range.0..=config.seq_len_range.1);
        let mut clusters = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..c);
        for t in 0..len {
            if t > 0 {
                cur = if rng.random::<f64>() < config.transition_prob {
                    successor[cur]
                } else {
                    rng.random_range(0..c)
                };
            }
            clusters.push(cur);
        }
        let mut seen: HashSet<usize> = HashSet::new();
        let mut items = Vec::with_capacity(len);
        for &cl in &clusters {
            let cands: Vec<(usize, f64)> = members[cl]
                .iter()
                .zip(&weights[cl])
                .filter(|(i, _)| !seen.contains(*i))
                .map(|(&i, &w)| (i, w))
                .collect();
            let pick = if cands.is_empty() {
                // cluster exhausted for this user: fall back to any unseen item
                let rest: Vec<usize> = (0..config.num_items)
                    .filter(|i| !seen.contains(i))
                    .collect();
                rest[rng.random_range(0..rest.len())]
            } else {
                let total: f64 = cands.iter().map(|(_, w)| w).sum();
                let mut x = rng.random::<f64>() * total;
                let mut chosen = cands[cands.len() - 1].0;
                for (i, w) in &cands {
                    if x < *w {
                        chosen = *i;
                        break;
                    }
                    x -= w;
                }
                chosen
            };
            seen.insert(pick);
            items.push(pick);
        }
        for t in 0..len {
            let item = items[t];
            let ts = base_ts + (t as i64) * 86_400 + u as i64;
            let empty = rng.random::<f64>() < config.empty_review_rate;
            let informative = rng.random::<f64>() < config.signal_strength;
            let planted = if t + 1 < len && informative {
                item_clusters[items[t + 1]]
            } else {
                rng.random_range(0..c)
            };
            let noise: Vec<f64> = (0..d).map(|_| review_noise.sample(&mut rng)).collect();
            let review_text = if empty {
                String::new()
            } else {
                format!("review by {user} of {} at step {t}", item_keys[item])
            };
            let x = Interaction::new(user.clone(), item_keys[item].clone(), ts, review_text);
            if x.has_review() {
                let row: Vec<f32> = (0..d)
                    .map(|j| (centroids[planted][j] + noise[j]) as f32)
                    .collect();
                review_rows.push((x.review_key(), row));
                review_clusters.push(planted);
            }
            interactions.push(x);
        }
    }

    Ok(SyntheticData {
        interactions,
        items: EmbeddingMatrix::from_rows(item_rows, d)?,
        reviews: EmbeddingMatrix::from_rows(review_rows, d)?,
        item_clusters,
        review_clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ix(u: &str, i: &str, t: i64) -> Interaction {
        Interaction::new(u, i, t, "")
    }

    #[test]
    fn json_record_field_mapping_and_fallbacks() {
        let text = concat!(
            r#"{"reviewerID":"u1","asin":"i1","unixReviewTime":100,"reviewText":"good"}"#,
            "\n",
            r#"{"reviewerID":"u1","asin":"i2","unixReviewTime":101,"reviewText":"","summary":"meh"}"#,
            "\n",
            r#"{"reviewerID":"u2","asin":"i2","unixReviewTime":102}"#,
            "\n",
            r#"{"reviewerID":"u2","unixReviewTime":103,"reviewText":"no asin"}"#,
            "\n",
        );
        let rep = parse_reviews_str(text, ReviewFormat::JsonLines).unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(
            rep.interactions[0],
            Interaction::new("u1", "i1", 100, "good")
        );
        assert_eq!(rep.interactions[1].review_text, "meh");
        assert_eq!(rep.interactions[2].review_text, "");
    }

    #[test]
    fn three_line_file_with_one_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        fs::write(
            &p,
            "{\"reviewerID\":\"a\",\"asin\":\"x\",\"unixReviewTime\":1,\"reviewText\":\"ok\"}\n\
             {not json\n\
             {\"reviewerID\":\"b\",\"asin\":\"y\",\"unixReviewTime\":2,\"summary\":\"fine\"}\n",
        )
        .unwrap();
        let rep = parse_reviews(&p, ReviewFormat::JsonLines).unwrap();
        assert_eq!((rep.interactions.len(), rep.skipped), (2, 1));
    }

    #[test]
    fn unreadable_and_empty_inputs() {
        assert!(matches!(
            parse_reviews(Path::new("/nonexistent/r.jsonl"), ReviewFormat::JsonLines),
            Err(Error::Io { .. })
        ));
        assert!(matches!(
            parse_reviews_str("garbage\n", ReviewFormat::JsonLines),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn tsv_with_header_and_escapes() {
        let text = "user\titem\ttimestamp\treview\nu1\ti1\t5\tline\\tone\\nnext\nu2\ti2\tbad\tx\n";
        let rep = parse_reviews_str(text, ReviewFormat::Tsv).unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.interactions[0].review_text, "line\tone\nnext");
    }

    #[test]
    fn k_core_examples() {
        let star: Vec<Interaction> = (0..5).map(|i| ix("u", &format!("i{i}"), i)).collect();
        assert_eq!(k_core_filter(&star, 1).unwrap(), star);
        assert!(matches!(
            k_core_filter(&star, 5),
            Err(Error::EmptyDataset(_))
        ));
        let clique: Vec<Interaction> = (0..5)
            .flat_map(|u| {
                (0..5).map(move |i| ix(&format!("u{u}"), &format!("i{i}"), (u * 5 + i) as i64))
            })
            .collect();
        assert_eq!(k_core_filter(&clique, 5).unwrap(), clique);
        assert!(matches!(k_core_filter(&clique, 0), Err(Error::Config(_))));
    }

    #[test]
    fn k_core_cascades() {
        // removing the degree-1 item drops u2 below 2, which drops i1 below 2
        let xs = vec![
            ix("u1", "i1", 0),
            ix("u1", "i2", 1),
            ix("u2", "i1", 2),
            ix("u2", "i3", 3),
            ix("u3", "i2", 4),
            ix("u3", "i4", 5),
            ix("u1", "i4", 6),
        ];
        let out = k_core_filter(&xs, 2).unwrap();
        for x in &out {
            assert_ne!(x.user_key, "u2");
            assert_ne!(x.item_key, "i1");
        }
    }

    #[test]
    fn sequences_sort_and_tie_break() {
        let xs = vec![
            ix("u", "c", 3),
            ix("u", "b", 1),
            ix("u", "z", 2),
            ix("u", "a", 2),
            ix("v", "a", 1),
            ix("v", "b", 2),
        ];
        let seqs = build_sequences(&xs);
        assert_eq!(seqs.len(), 1, "v has only two interactions");
        let items: Vec<&str> = seqs[0]
            .interactions
            .iter()
            .map(|x| x.item_key.as_str())
            .collect();
        assert_eq!(items, ["b", "a", "z", "c"]);
    }

    #[test]
    fn leave_one_out_examples() {
        let seq = |items: &[&str]| UserSequence {
            user_key: "u".into(),
            interactions: items
                .iter()
                .enumerate()
                .map(|(t, i)| ix("u", i, t as i64))
                .collect(),
        };
        let s = leave_one_out_split(&[seq(&["a", "b", "c", "d"])]).unwrap();
        let keys = |xs: &[Interaction]| xs.iter().map(|x| x.item_key.clone()).collect::<Vec<_>>();
        assert_eq!(keys(&s.train[0].interactions), ["a", "b"]);
        assert_eq!(
            (
                keys(&s.validation[0].context),
                s.validation[0].target.item_key.as_str()
            ),
            (vec!["a".to_string(), "b".into()], "c")
        );
        assert_eq!(keys(&s.test[0].context), ["a", "b", "c"]);
        assert_eq!(s.test[0].target.item_key, "d");

        let s = leave_one_out_split(&[seq(&["a", "b", "c"])]).unwrap();
        assert_eq!(keys(&s.train[0].interactions), ["a"]);
        assert_eq!(s.validation[0].target.item_key, "b");
        assert_eq!(s.test[0].target.item_key, "c");

        assert!(matches!(
            leave_one_out_split(&[seq(&["a", "b"])]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn dedupe_keeps_earliest() {
        let xs = vec![ix("u", "a", 5), ix("u", "a", 2), ix("u", "b", 1)];
        assert_eq!(
            dedupe_user_items(&xs),
            vec![ix("u", "a", 2), ix("u", "b", 1)]
        );
    }

    #[test]
    fn sequence_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        let xs = vec![
            Interaction::new("u\t1", "i", 4, "a\\b\nc"),
            Interaction::new("u2", "j", 0, ""),
        ];
        fs::write(&p, write_interactions_tsv(&xs)).unwrap();
        assert_eq!(read_interactions_tsv(&p).unwrap(), xs);
    }

    fn small_synth(signal: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            num_users: 300,
            num_items: 60,
            seq_len_range: (4, 7),
            signal_strength: signal,
            num_clusters: 5,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_synth(0.5, 3)).unwrap();
        let b = generate_synthetic(&small_synth(0.5, 3)).unwrap();
        assert_eq!(a.items.to_bytes(), b.items.to_bytes());
        assert_eq!(a.reviews.to_bytes(), b.reviews.to_bytes());
        assert_eq!(
            write_interactions_tsv(&a.interactions),
            write_interactions_tsv(&b.interactions)
        );
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let mut c = small_synth(0.5, 1);
        c.num_items = 9;
        assert!(matches!(generate_synthetic(&c), Err(Error::Config(_))));
        let mut c = small_synth(1.5, 1);
        c.num_items = 20;
        assert!(matches!(generate_synthetic(&c), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn k_core_idempotent_and_degree_bound(edges in proptest::collection::vec((0u8..6, 0u8..6), 1..60), k in 1usize..4) {
            let xs: Vec<Interaction> = edges.iter().enumerate()
                .map(|(t, (u, i))| ix(&format!("u{u}"), &format!("i{i}"), t as i64)).collect();
            if let Ok(once) = k_core_filter(&xs, k) {
                prop_assert_eq!(k_core_filter(&once, k).unwrap(), once.clone());
                let mut du: HashMap<&str, usize> = HashMap::new();
                let mut di: HashMap<&str, usize> = HashMap::new();
                for x in &once {
                    *du.entry(&x.user_key).or_default() += 1;
                    *di.entry(&x.item_key).or_default() += 1;
                }
                prop_assert!(du.values().chain(di.values()).all(|&d| d >= k));
            }
        }

        #[test]
        fn sequences_preserve_multiset(edges in proptest::collection::vec((0u8..4, 0u8..8, 0i64..5), 1..40)) {
            let xs: Vec<Interaction> = edges.iter().map(|(u, i, t)| ix(&format!("u{u}"), &format!("i{i}"), *t)).collect();
            let seqs = build_sequences(&xs);
            let mut kept: Vec<Interaction> = seqs.iter().flat_map(|s| s.interactions.clone()).collect();
            let users: HashSet<&str> = seqs.iter().map(|s| s.user_key.as_str()).collect();
            let mut expected: Vec<Interaction> = xs.iter().filter(|x| users.contains(x.user_key.as_str())).cloned().collect();
            kept.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
            expected.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
            prop_assert_eq!(kept, expected);
            for s in &seqs {
                prop_assert!(s.interactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            }
        }

        #[test]
        fn split_targets_never_in_context(seed in 0u64..50) {
            let data = generate_synthetic(&small_synth(0.5, seed)).unwrap();
            let split = leave_one_out_split(&build_sequences(&data.interactions)).unwrap();
            prop_assert_eq!(split.validation.len(), split.test.len());
            for case in split.validation.iter().chain(&split.test) {
                prop_assert!(case.context.iter().all(|x| x.item_key != case.target.item_key));
                prop_assert!(case.context.iter().all(|x| x.timestamp <= case.target.timestamp));
            }
        }
    }
}
