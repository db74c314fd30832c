//! Run configuration: an INI-style file of `key = value` lines grouped in
//! sections. Unknown sections and keys are rejected.
//!
//! ```text
//! [run]
//! seed = 42
//!
//! [tokenizer]
//! levels = 3
//! hidden = 64,32
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use ragr_core::align::DpoConfig;
use ragr_core::dataio::{ReviewFormat, SynthConfig};
use ragr_core::genrec::SftConfig;
use ragr_core::nn::Activation;
use ragr_core::rqvae::{RecTarget, RqVaeConfig, TokenizerTrainConfig};
use ragr_core::sequence::{SequenceMode, DEFAULT_MAX_ITEMS};
use serde::Serialize;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    File,
}

/// Embeddings the tokenizer is fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerCorpus {
    Item,
    Review,
    ItemReview,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSection {
    pub source: DataSource,
    pub input: Option<PathBuf>,
    pub format: ReviewFormat,
    pub k_core: usize,
    pub max_items: usize,
    /// Precomputed embedding files; when absent `ingest` embeds text with the
    /// built-in hashing embedder of width `embed_dim`.
    pub items_matrix: Option<PathBuf>,
    pub items_keys: Option<PathBuf>,
    pub reviews_matrix: Option<PathBuf>,
    pub reviews_keys: Option<PathBuf>,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenizerSection {
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub beta_commit: f64,
    pub rec_target: RecTarget,
    pub activation: Activation,
    pub corpus: TokenizerCorpus,
    pub train: TokenizerTrainConfig,
}

impl TokenizerSection {
    pub fn rqvae(&self, input_dim: usize) -> RqVaeConfig {
        RqVaeConfig {
            input_dim,
            hidden: self.hidden.clone(),
            code_dim: self.code_dim,
            levels: self.levels,
            codebook_size: self.codebook_size,
            beta_commit: self.beta_commit,
            rec_target: self.rec_target,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Adds item/review marker tokens to serialized histories.
    pub markers: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// `None` picks `max(2·K, 20)`.
    pub beam_width: Option<usize>,
    pub top_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSection {
    pub sid_levels: Vec<usize>,
    pub beta_dpo: Vec<f64>,
    pub dpo_epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: SftConfig,
    pub align: DpoConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            data: DataSection {
                source: DataSource::Synth,
                input: None,
                format: ReviewFormat::JsonLines,
                k_core: 5,
                max_items: DEFAULT_MAX_ITEMS,
                items_matrix: None,
                items_keys: None,
                reviews_matrix: None,
                reviews_keys: None,
                embed_dim: 64,
            },
            synth: SynthConfig::default(),
            tokenizer: TokenizerSection {
                hidden: vec![64, 32],
                code_dim: 16,
                levels: 3,
                codebook_size: 32,
                beta_commit: 0.25,
                rec_target: RecTarget::Input,
                activation: Activation::Relu,
                corpus: TokenizerCorpus::Item,
                train: TokenizerTrainConfig {
                    epochs: 500,
                    ..TokenizerTrainConfig::default()
                },
            },
            model: ModelSection {
                d_model: 64,
                n_heads: 4,
                n_layers_enc: 2,
                n_layers_dec: 2,
                d_ff: 128,
                dropout: 0.1,
                markers: false,
            },
            train: SftConfig {
                epochs: 10,
                lr: 2e-3,
                ..SftConfig::default()
            },
            align: DpoConfig::default(),
            eval: EvalSection {
                ks: vec![5, 10, 20],
                beam_width: None,
                top_n: 10,
            },
            sweep: SweepSection {
                sid_levels: vec![3, 4, 5],
                beta_dpo: vec![0.2, 0.6, 1.0],
                dpo_epochs: vec![1, 2],
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("{key} = {value:?}: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::from_str_relative(&text, path.parent())
    }

    /// Parses `text`; relative paths resolve against `base` when given.
    pub fn from_str_relative(text: &str, base: Option<&Path>) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = Config::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("run");
            for (key, value) in props.iter() {
                cfg.set(section, key, value.trim())
                    .map_err(|e| CliError::Config(format!("[{section}] {e}")))?;
            }
        }
        if let Some(base) = base {
            for p in [
                &mut cfg.data.input,
                &mut cfg.data.items_matrix,
                &mut cfg.data.items_keys,
                &mut cfg.data.reviews_matrix,
                &mut cfg.data.reviews_keys,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        match (section, key) {
            ("run", "seed") => self.seed = parse(key, v)?,

            ("data", "source") => {
                self.data.source = match v {
                    "synth" => DataSource::Synth,
                    "file" => DataSource::File,
                    _ => return Err(format!("source = {v:?}: expected synth|file")),
                }
            }
            ("data", "input") => self.data.input = parse_optional_path(v),
            ("data", "format") => self.data.format = parse(key, v)?,
            ("data", "k_core") => self.data.k_core = parse(key, v)?,
            ("data", "max_items") => self.data.max_items = parse(key, v)?,
            ("data", "items_matrix") => self.data.items_matrix = parse_optional_path(v),
            ("data", "items_keys") => self.data.items_keys = parse_optional_path(v),
            ("data", "reviews_matrix") => self.data.reviews_matrix = parse_optional_path(v),
            ("data", "reviews_keys") => self.data.reviews_keys = parse_optional_path(v),
            ("data", "embed_dim") => self.data.embed_dim = parse(key, v)?,

            ("synth", "num_users") => self.synth.num_users = parse(key, v)?,
            ("synth", "num_items") => self.synth.num_items = parse(key, v)?,
            ("synth", "seq_len_min") => self.synth.seq_len_range.0 = parse(key, v)?,
            ("synth", "seq_len_max") => self.synth.seq_len_range.1 = parse(key, v)?,
            ("synth", "signal_strength") => self.synth.signal_strength = parse(key, v)?,
            ("synth", "num_clusters") => self.synth.num_clusters = parse(key, v)?,
            ("synth", "sub_clusters") => self.synth.sub_clusters = parse(key, v)?,
            ("synth", "emb_dim") => self.synth.emb_dim = parse(key, v)?,
            ("synth", "transition_prob") => self.synth.transition_prob = parse(key, v)?,
            ("synth", "popularity_skew") => self.synth.popularity_skew = parse(key, v)?,
            ("synth", "empty_review_rate") => self.synth.empty_review_rate = parse(key, v)?,

            ("tokenizer", "hidden") => self.tokenizer.hidden = parse_list(key, v)?,
            ("tokenizer", "code_dim") => self.tokenizer.code_dim = parse(key, v)?,
            ("tokenizer", "levels") => self.tokenizer.levels = parse(key, v)?,
            ("tokenizer", "codebook_size") => self.tokenizer.codebook_size = parse(key, v)?,
            ("tokenizer", "beta_commit") => self.tokenizer.beta_commit = parse(key, v)?,
            ("tokenizer", "rec_target") => self.tokenizer.rec_target = parse(key, v)?,
            ("tokenizer", "activation") => self.tokenizer.activation = parse(key, v)?,
            ("tokenizer", "corpus") => {
                self.tokenizer.corpus = match v {
                    "item" => TokenizerCorpus::Item,
                    "review" => TokenizerCorpus::Review,
                    "item+review" => TokenizerCorpus::ItemReview,
                    _ => return Err(format!("corpus = {v:?}: expected item|review|item+review")),
                }
            }
            ("tokenizer", "lr") => self.tokenizer.train.lr = parse(key, v)?,
            ("tokenizer", "batch_size") => self.tokenizer.train.batch_size = parse(key, v)?,
            ("tokenizer", "epochs") => self.tokenizer.train.epochs = parse(key, v)?,
            ("tokenizer", "weight_decay") => self.tokenizer.train.weight_decay = parse(key, v)?,
            ("tokenizer", "kmeans_iters") => self.tokenizer.train.kmeans_iters = parse(key, v)?,
            ("tokenizer", "optimizer") => self.tokenizer.train.optimizer = parse(key, v)?,
            ("tokenizer", "reseed_dead") => self.tokenizer.train.reseed_dead = parse(key, v)?,

            ("model", "d_model") => self.model.d_model = parse(key, v)?,
            ("model", "n_heads") => self.model.n_heads = parse(key, v)?,
            ("model", "n_layers_enc") => self.model.n_layers_enc = parse(key, v)?,
            ("model", "n_layers_dec") => self.model.n_layers_dec = parse(key, v)?,
            ("model", "d_ff") => self.model.d_ff = parse(key, v)?,
            ("model", "dropout") => self.model.dropout = parse(key, v)?,
            ("model", "markers") => self.model.markers = parse(key, v)?,

            ("train", "lr") => self.train.lr = parse(key, v)?,
            ("train", "batch_size") => self.train.batch_size = parse(key, v)?,
            ("train", "epochs") => self.train.epochs = parse(key, v)?,
            ("train", "warmup_ratio") => self.train.warmup_ratio = parse(key, v)?,
            ("train", "weight_decay") => self.train.weight_decay = parse(key, v)?,
            ("train", "label_smoothing") => self.train.label_smoothing = parse(key, v)?,
            ("train", "clip_norm") => self.train.clip_norm = parse(key, v)?,
            ("train", "optimizer") => self.train.optimizer = parse(key, v)?,

            ("align", "beta_dpo") => self.align.beta_dpo = parse(key, v)?,
            ("align", "lr") => self.align.lr = parse(key, v)?,
            ("align", "epochs") => self.align.epochs = parse(key, v)?,
            ("align", "batch_size") => self.align.batch_size = parse(key, v)?,
            ("align", "weight_decay") => self.align.weight_decay = parse(key, v)?,
            ("align", "optimizer") => self.align.optimizer = parse(key, v)?,

            ("eval", "ks") => self.eval.ks = parse_list(key, v)?,
            ("eval", "beam_width") => {
                let b: usize = parse(key, v)?;
                self.eval.beam_width = (b > 0).then_some(b);
            }
            ("eval", "top_n") => self.eval.top_n = parse(key, v)?,

            ("sweep", "sid_levels") => self.sweep.sid_levels = parse_list(key, v)?,
            ("sweep", "beta_dpo") => self.sweep.beta_dpo = parse_list(key, v)?,
            ("sweep", "dpo_epochs") => self.sweep.dpo_epochs = parse_list(key, v)?,

            (
                "run" | "data" | "synth" | "tokenizer" | "model" | "train" | "align" | "eval"
                | "sweep",
                _,
            ) => return Err(format!("unknown key {key:?}")),
            _ => return Err(format!("unknown section (key {key:?})")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.source == DataSource::File && self.data.input.is_none() {
            return bad("[data] source = file needs an input path".into());
        }
        if self.data.max_items == 0 {
            return bad("[data] max_items must be positive".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("[eval] ks must list positive cutoffs".into());
        }
        let pairs = [
            (&self.data.items_matrix, &self.data.items_keys, "items"),
            (
                &self.data.reviews_matrix,
                &self.data.reviews_keys,
                "reviews",
            ),
        ];
        for (m, k, what) in pairs {
            if m.is_some() != k.is_some() {
                return bad(format!(
                    "[data] {what}_matrix and {what}_keys must be given together"
                ));
            }
        }
        self.synth
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.tokenizer
            .rqvae(1)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.align
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sid_levels: Option<usize>,
    pub beta_dpo: Option<f64>,
    pub epochs: Option<usize>,
}

impl Overrides {
    /// `epochs` applies to the training stage of the running subcommand.
    pub fn apply(&self, cfg: &mut Config, epochs_target: EpochsTarget) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.sid_levels {
            cfg.tokenizer.levels = m;
        }
        if let Some(b) = self.beta_dpo {
            cfg.align.beta_dpo = b;
        }
        if let Some(e) = self.epochs {
            match epochs_target {
                EpochsTarget::Tokenizer => cfg.tokenizer.train.epochs = e,
                EpochsTarget::Train => cfg.train.epochs = e,
                EpochsTarget::Align => cfg.align.epochs = e,
                EpochsTarget::None => {}
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochsTarget {
    Tokenizer,
    Train,
    Align,
    None,
}

/// `item-only`, `input` or `task`.
pub fn parse_mode(s: &str) -> Result<SequenceMode, CliError> {
    s.parse().map_err(|e: String| CliError::Config(e))
}
