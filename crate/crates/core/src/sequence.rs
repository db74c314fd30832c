//! Token vocabulary and serialization of user histories into SID token streams.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetSplit, EvalCase, Interaction};
use crate::error::{Error, Result};
use crate::rqvae::{SemanticId, SidMap};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
const NUM_SPECIAL: u64 = 3;

/// Default history budget, in interactions.
pub const DEFAULT_MAX_ITEMS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    /// 1-based level and code index.
    Code {
        level: usize,
        code: usize,
    },
    Disambig(usize),
    ItemMarker,
    ReviewMarker,
}

/// Layout: specials, then `M·K` code tokens level by level, then `D`
/// disambiguation tokens, then the two optional type markers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub levels: usize,
    pub codebook_size: usize,
    pub disambig_slots: usize,
    pub markers: bool,
}

impl TokenVocabulary {
    pub fn new(levels: usize, codebook_size: usize, max_disambig: usize) -> Result<Self> {
        Self::build(levels, codebook_size, max_disambig, false)
    }

    pub fn with_markers(levels: usize, codebook_size: usize, max_disambig: usize) -> Result<Self> {
        Self::build(levels, codebook_size, max_disambig, true)
    }

    fn build(
        levels: usize,
        codebook_size: usize,
        max_disambig: usize,
        markers: bool,
    ) -> Result<Self> {
        if levels == 0 || codebook_size == 0 {
            return Err(Error::Config("vocabulary needs M ≥ 1 and K ≥ 1".into()));
        }
        let v = TokenVocabulary {
            levels,
            codebook_size,
            disambig_slots: max_disambig
                .checked_add(1)
                .ok_or_else(|| Error::Config("disambiguation index overflows".into()))?,
            markers,
        };
        let size = (levels as u64)
            .checked_mul(codebook_size as u64)
            .and_then(|c| {
                c.checked_add(NUM_SPECIAL + v.disambig_slots as u64 + 2 * markers as u64)
            });
        match size {
            Some(s) if s <= TokenId::MAX as u64 => Ok(v),
            _ => Err(Error::Config(
                "vocabulary exceeds the token id range".into(),
            )),
        }
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL as usize
            + self.levels * self.codebook_size
            + self.disambig_slots
            + 2 * self.markers as usize
    }

    /// Token for code `code` at 1-based `level`.
    pub fn code_token(&self, level: usize, code: usize) -> TokenId {
        assert!(
            (1..=self.levels).contains(&level) && code < self.codebook_size,
            "code out of range"
        );
        (NUM_SPECIAL as usize + (level - 1) * self.codebook_size + code) as TokenId
    }

    pub fn disambig_token(&self, d: usize) -> TokenId {
        assert!(d < self.disambig_slots, "disambiguation index out of range");
        (NUM_SPECIAL as usize + self.levels * self.codebook_size + d) as TokenId
    }

    pub fn item_marker(&self) -> Option<TokenId> {
        self.markers.then(|| (self.vocab_size() - 2) as TokenId)
    }

    pub fn review_marker(&self) -> Option<TokenId> {
        self.markers.then(|| (self.vocab_size() - 1) as TokenId)
    }

    pub fn kind(&self, token: TokenId) -> Option<TokenKind> {
        let t = token as usize;
        let codes_end = NUM_SPECIAL as usize + self.levels * self.codebook_size;
        let dis_end = codes_end + self.disambig_slots;
        Some(match t {
            0 => TokenKind::Pad,
            1 => TokenKind::Bos,
            2 => TokenKind::Eos,
            t if t < codes_end => {
                let off = t - NUM_SPECIAL as usize;
                TokenKind::Code {
                    level: off / self.codebook_size + 1,
                    code: off % self.codebook_size,
                }
            }
            t if t < dis_end => TokenKind::Disambig(t - codes_end),
            t if self.markers && t == dis_end => TokenKind::ItemMarker,
            t if self.markers && t == dis_end + 1 => TokenKind::ReviewMarker,
            _ => return None,
        })
    }

    fn check_codes(&self, sid: &SemanticId) -> Result<()> {
        if sid.codes.len() != self.levels || sid.codes.iter().any(|&c| c >= self.codebook_size) {
            return Err(Error::Consistency(format!(
                "SID {:?} does not fit a vocabulary of {} levels × {} codes",
                sid.codes, self.levels, self.codebook_size
            )));
        }
        Ok(())
    }

    /// Code tokens followed by the disambiguation token.
    pub fn item_tokens(&self, sid: &SemanticId) -> Result<Vec<TokenId>> {
        self.check_codes(sid)?;
        let d = sid.disambig.ok_or_else(|| {
            Error::Consistency(format!(
                "item SID {:?} lacks a disambiguation index",
                sid.codes
            ))
        })?;
        if d >= self.disambig_slots {
            return Err(Error::Consistency(format!(
                "disambiguation index {d} exceeds vocabulary capacity {}",
                self.disambig_slots
            )));
        }
        let mut t: Vec<TokenId> = sid
            .codes
            .iter()
            .enumerate()
            .map(|(m, &k)| self.code_token(m + 1, k))
            .collect();
        t.push(self.disambig_token(d));
        Ok(t)
    }

    /// Code tokens only.
    pub fn review_tokens(&self, sid: &SemanticId) -> Result<Vec<TokenId>> {
        self.check_codes(sid)?;
        Ok(sid
            .codes
            .iter()
            .enumerate()
            .map(|(m, &k)| self.code_token(m + 1, k))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SequenceMode {
    ItemOnly,
    InputAugmented,
    TaskAugmented,
}

impl SequenceMode {
    pub const ALL: [SequenceMode; 3] = [
        SequenceMode::ItemOnly,
        SequenceMode::InputAugmented,
        SequenceMode::TaskAugmented,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SequenceMode::ItemOnly => "item-only",
            SequenceMode::InputAugmented => "input",
            SequenceMode::TaskAugmented => "task",
        }
    }

    pub fn uses_reviews(self) -> bool {
        self != SequenceMode::ItemOnly
    }
}

impl fmt::Display for SequenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SequenceMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "item-only" => Ok(SequenceMode::ItemOnly),
            "input" => Ok(SequenceMode::InputAugmented),
            "task" => Ok(SequenceMode::TaskAugmented),
            other => Err(format!(
                "unknown mode {other:?} (expected item-only|input|task)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    NextItem,
    NextReview,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub kind: InstanceKind,
    #[serde(rename = "user")]
    pub user_key: String,
    /// 1-based position of the target interaction in the user's sequence.
    pub step: usize,
    #[serde(rename = "input")]
    pub input_tokens: Vec<TokenId>,
    #[serde(rename = "target")]
    pub target_tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SerializedContext {
    pub tokens: Vec<TokenId>,
}

/// One past interaction as seen by the serializer.
#[derive(Clone, Copy, Debug)]
pub struct HistoryStep<'a> {
    pub item: &'a SemanticId,
    /// `None` for interactions without review text.
    pub review: Option<&'a SemanticId>,
}

/// BOS followed by the last `max_items` interactions, oldest first.
pub fn serialize_history(
    history: &[HistoryStep<'_>],
    vocab: &TokenVocabulary,
    mode: SequenceMode,
    max_items: usize,
) -> Result<SerializedContext> {
    let start = history.len().saturating_sub(max_items);
    let mut tokens = vec![BOS];
    for step in &history[start..] {
        tokens.extend(vocab.item_marker());
        tokens.extend(vocab.item_tokens(step.item)?);
        if mode.uses_reviews() {
            if let Some(r) = step.review {
                tokens.extend(vocab.review_marker());
                tokens.extend(vocab.review_tokens(r)?);
            }
        }
    }
    Ok(SerializedContext { tokens })
}

/// Item and review SID lookup tables.
#[derive(Clone, Debug, Default)]
pub struct SidTables {
    /// Disambiguated item SIDs.
    pub items: SidMap,
    /// Review SIDs keyed by [`Interaction::review_key`].
    pub reviews: SidMap,
}

impl SidTables {
    pub fn item(&self, key: &str) -> Result<&SemanticId> {
        self.items
            .get(key)
            .ok_or_else(|| Error::MissingSid(key.to_string()))
    }

    pub fn review(&self, interaction: &Interaction) -> Result<Option<&SemanticId>> {
        if !interaction.has_review() {
            return Ok(None);
        }
        let key = interaction.review_key();
        self.reviews
            .get(&key)
            .map(Some)
            .ok_or(Error::MissingSid(key))
    }

    fn steps<'a>(
        &'a self,
        history: &[Interaction],
        mode: SequenceMode,
    ) -> Result<Vec<HistoryStep<'a>>> {
        history
            .iter()
            .map(|it| {
                Ok(HistoryStep {
                    item: self.item(&it.item_key)?,
                    review: if mode.uses_reviews() {
                        self.review(it)?
                    } else {
                        None
                    },
                })
            })
            .collect()
    }

    /// Serialized context for `history` under `mode`.
    pub fn context(
        &self,
        history: &[Interaction],
        vocab: &TokenVocabulary,
        mode: SequenceMode,
        max_items: usize,
    ) -> Result<SerializedContext> {
        serialize_history(&self.steps(history, mode)?, vocab, mode, max_items)
    }

    pub fn item_target(&self, key: &str, vocab: &TokenVocabulary) -> Result<Vec<TokenId>> {
        let mut t = vocab.item_tokens(self.item(key)?)?;
        t.push(EOS);
        Ok(t)
    }
}

/// Training instances from the train portion of `split`.
///
/// Every step `t ≥ 2` yields a next-item instance; under
/// [`SequenceMode::TaskAugmented`] steps with review text also yield a
/// next-review instance whose input ends with the target item's tokens.
pub fn make_instances(
    split: &DatasetSplit,
    sids: &SidTables,
    vocab: &TokenVocabulary,
    mode: SequenceMode,
    max_items: usize,
) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for seq in &split.train {
        let steps = sids.steps(&seq.interactions, mode)?;
        for t in 1..seq.interactions.len() {
            let ctx = serialize_history(&steps[..t], vocab, mode, max_items)?;
            let item = vocab.item_tokens(steps[t].item)?;
            let review = match (mode, steps[t].review) {
                (SequenceMode::TaskAugmented, Some(r)) => {
                    let mut input = ctx.tokens.clone();
                    input.extend(vocab.item_marker());
                    input.extend(&item);
                    let mut target = vocab.review_tokens(r)?;
                    target.push(EOS);
                    Some((input, target))
                }
                _ => None,
            };
            let mut target = item;
            target.push(EOS);
            out.push(TrainingInstance {
                kind: InstanceKind::NextItem,
                user_key: seq.user_key.clone(),
                step: t + 1,
                input_tokens: ctx.tokens,
                target_tokens: target,
            });
            if let Some((input, target)) = review {
                out.push(TrainingInstance {
                    kind: InstanceKind::NextReview,
                    user_key: seq.user_key.clone(),
                    step: t + 1,
                    input_tokens: input,
                    target_tokens: target,
                });
            }
        }
    }
    Ok(out)
}

/// Next-item instances for held-out cases, regardless of mode's task set.
pub fn eval_instances(
    cases: &[EvalCase],
    sids: &SidTables,
    vocab: &TokenVocabulary,
    mode: SequenceMode,
    max_items: usize,
) -> Result<Vec<TrainingInstance>> {
    cases
        .iter()
        .map(|c| {
            Ok(TrainingInstance {
                kind: InstanceKind::NextItem,
                user_key: c.user_key.clone(),
                step: c.context.len() + 1,
                input_tokens: sids.context(&c.context, vocab, mode, max_items)?.tokens,
                target_tokens: sids.item_target(&c.target.item_key, vocab)?,
            })
        })
        .collect()
}

pub fn write_instances_jsonl(path: &Path, instances: &[TrainingInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instance serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
