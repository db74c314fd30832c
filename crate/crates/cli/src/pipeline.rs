//! In-memory pipeline steps shared by the subcommands.

use ragr_core::align::{build_preference_pairs, PreferencePair};
use ragr_core::dataio::{build_sequences, leave_one_out_split, DatasetSplit, Interaction};
use ragr_core::decode::{build_trie, SidTrie};
use ragr_core::embedding::EmbeddingMatrix;
use ragr_core::error::Result;
use ragr_core::eval::{build_queries, evaluate_with_beam, EvalReport};
use ragr_core::genrec::{
    train_sft_with_validation, GenRecModel, ModelConfig, SftConfig, SftResult,
};
use ragr_core::rqvae::{
    assign_sids, disambiguate_collisions, max_disambig, train_tokenizer, LossParts, RqVaeModel,
    SidMap,
};
use ragr_core::sequence::{
    eval_instances, make_instances, SequenceMode, SidTables, TokenVocabulary,
};

use crate::config::{Config, ModelSection, TokenizerCorpus, TokenizerSection};
use crate::seeds::stage_seed;

pub fn split_interactions(interactions: &[Interaction]) -> Result<DatasetSplit> {
    leave_one_out_split(&build_sequences(interactions))
}

pub struct FittedTokenizer {
    pub model: RqVaeModel,
    pub history: Vec<LossParts>,
    pub sids: SidTables,
}

/// Trains the tokenizer on the configured corpus, then assigns disambiguated
/// item SIDs and plain review SIDs with the frozen model.
pub fn fit_tokenizer(
    cfg: &TokenizerSection,
    items: &EmbeddingMatrix,
    reviews: &EmbeddingMatrix,
    seed: u64,
) -> Result<FittedTokenizer> {
    let corpus = match cfg.corpus {
        TokenizerCorpus::Item => items.clone(),
        TokenizerCorpus::Review => reviews.clone(),
        TokenizerCorpus::ItemReview => items.concat(reviews)?,
    };
    let model = RqVaeModel::new(cfg.rqvae(items.dim()), stage_seed(seed, "tokenizer-init"))?;
    let mut train = cfg.train.clone();
    train.seed = stage_seed(seed, "tokenizer-train");
    let trained = train_tokenizer(model, &corpus, &train)?;
    let item_sids = disambiguate_collisions(&assign_sids(&trained.model, items)?);
    let review_sids = if reviews.is_empty() {
        SidMap::new()
    } else {
        assign_sids(&trained.model, reviews)?
    };
    Ok(FittedTokenizer {
        model: trained.model,
        history: trained.history,
        sids: SidTables {
            items: item_sids,
            reviews: review_sids,
        },
    })
}

pub fn vocabulary(
    sids: &SidTables,
    levels: usize,
    codebook_size: usize,
    markers: bool,
) -> Result<TokenVocabulary> {
    let d = max_disambig(&sids.items);
    if markers {
        TokenVocabulary::with_markers(levels, codebook_size, d)
    } else {
        TokenVocabulary::new(levels, codebook_size, d)
    }
}

/// Longest sequence any mode can produce for `max_items` interactions.
pub fn max_positions(levels: usize, max_items: usize) -> usize {
    2 + (max_items + 1) * (2 * levels + 3)
}

pub fn model_config(
    m: &ModelSection,
    vocab: &TokenVocabulary,
    max_items: usize,
    seed: u64,
) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.vocab_size(),
        d_model: m.d_model,
        n_heads: m.n_heads,
        n_layers_enc: m.n_layers_enc,
        n_layers_dec: m.n_layers_dec,
        d_ff: m.d_ff,
        max_positions: max_positions(vocab.levels, max_items),
        dropout: m.dropout,
        seed,
    }
}

pub struct Prepared {
    pub split: DatasetSplit,
    pub sids: SidTables,
    pub vocab: TokenVocabulary,
    pub trie: SidTrie,
}

impl Prepared {
    pub fn new(split: DatasetSplit, sids: SidTables, cfg: &Config) -> Result<Self> {
        let levels = sids
            .items
            .values()
            .next()
            .map_or(cfg.tokenizer.levels, |s| s.codes.len());
        let vocab = vocabulary(
            &sids,
            levels,
            cfg.tokenizer.codebook_size,
            cfg.model.markers,
        )?;
        let trie = build_trie(&sids.items, &vocab)?;
        Ok(Prepared {
            split,
            sids,
            vocab,
            trie,
        })
    }
}

/// Supervised training in `mode`; validation loss is logged per epoch.
pub fn train_mode(
    cfg: &Config,
    data: &Prepared,
    mode: SequenceMode,
    seed: u64,
) -> Result<SftResult> {
    let max_items = cfg.data.max_items;
    let instances = make_instances(&data.split, &data.sids, &data.vocab, mode, max_items)?;
    let validation = eval_instances(
        &data.split.validation,
        &data.sids,
        &data.vocab,
        mode,
        max_items,
    )?;
    let tag = format!("train-{}", mode.as_str());
    let model = GenRecModel::new(model_config(
        &cfg.model,
        &data.vocab,
        max_items,
        stage_seed(seed, &format!("{tag}-init")),
    ))?;
    let sft = SftConfig {
        seed: stage_seed(seed, &tag),
        ..cfg.train.clone()
    };
    train_sft_with_validation(model, &instances, &validation, &sft)
}

pub fn preference_pairs(cfg: &Config, data: &Prepared) -> Result<Vec<PreferencePair>> {
    build_preference_pairs(&data.split, &data.sids, &data.vocab, cfg.data.max_items)
}

/// Test-split metrics with contexts serialized in `mode`.
pub fn evaluate_model(
    cfg: &Config,
    data: &Prepared,
    model: &GenRecModel,
    mode: SequenceMode,
) -> Result<EvalReport> {
    let queries = build_queries(
        &data.split.test,
        &data.sids,
        &data.vocab,
        mode,
        cfg.data.max_items,
    )?;
    evaluate_with_beam(
        model,
        &data.trie,
        &queries,
        &cfg.eval.ks,
        cfg.eval.beam_width,
    )
}
