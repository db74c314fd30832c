//! Subcommand implementations. Every stage reads its prerequisites from the
//! output directory, writes its artifacts there and records a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ragr_core::align::{preference_accuracy, train_dpo, write_pairs_jsonl, DpoConfig};
use ragr_core::dataio::{
    dedupe_user_items, generate_synthetic, k_core_filter, parse_reviews, read_interactions_tsv,
    write_interactions_tsv, Interaction,
};
use ragr_core::decode::write_recommendations;
use ragr_core::embedding::{load_embeddings, synthetic_embed, EmbeddingMatrix};
use ragr_core::eval::{histogram_tsv, metrics_tsv, sid_frequency, top_codes};
use ragr_core::genrec::{write_training_log, GenRecModel};
use ragr_core::rqvae::{collision_rate, max_disambig, read_sid_map, write_sid_map, SidMap};
use ragr_core::sequence::{make_instances, write_instances_jsonl, SequenceMode, SidTables};

use crate::config::{Config, DataSource};
use crate::error::CliError;
use crate::manifest::{Manifest, ManifestBuilder};
use crate::pipeline::{
    evaluate_model, fit_tokenizer, preference_pairs, split_interactions, train_mode, Prepared,
};
use crate::seeds::stage_seed;

/// Artifact paths under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn interactions(&self) -> PathBuf {
        self.p("data/interactions.tsv")
    }
    pub fn items_matrix(&self) -> PathBuf {
        self.p("data/items.rgem")
    }
    pub fn items_keys(&self) -> PathBuf {
        self.p("data/items.keys")
    }
    pub fn reviews_matrix(&self) -> PathBuf {
        self.p("data/reviews.rgem")
    }
    pub fn reviews_keys(&self) -> PathBuf {
        self.p("data/reviews.keys")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.p("tokenizer/rqvae.rgck")
    }
    pub fn tokenizer_log(&self) -> PathBuf {
        self.p("tokenizer/loss.csv")
    }
    pub fn item_sids(&self) -> PathBuf {
        self.p("sids/items.tsv")
    }
    pub fn review_sids(&self) -> PathBuf {
        self.p("sids/reviews.tsv")
    }
    pub fn model(&self, id: &str) -> PathBuf {
        self.p(&format!("models/{id}/model.rgck"))
    }
    pub fn train_log(&self, id: &str) -> PathBuf {
        self.p(&format!("models/{id}/train_log.csv"))
    }
    pub fn instances(&self, id: &str) -> PathBuf {
        self.p(&format!("models/{id}/instances.jsonl"))
    }
    pub fn pairs(&self) -> PathBuf {
        self.p("align/pairs.jsonl")
    }
    pub fn align_log(&self) -> PathBuf {
        self.p("align/history.csv")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.p(&format!("reports/{name}"))
    }
}

/// Model identifier: one per training mode plus the aligned model.
pub const ALIGNED: &str = "ragr";

fn model_ids() -> Vec<(&'static str, SequenceMode)> {
    let mut v: Vec<_> = SequenceMode::ALL.iter().map(|m| (m.as_str(), *m)).collect();
    v.push((ALIGNED, SequenceMode::TaskAugmented));
    v
}

fn require(stage: &'static str, path: &Path, producer: &'static str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    write_dir(path.parent().expect("artifact paths have parents"))
}

fn write_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn manifest(cfg: &Config, layout: &Layout, stage: &str, seed_name: &str) -> (ManifestBuilder, u64) {
    let s = stage_seed(cfg.seed, seed_name);
    (
        ManifestBuilder::new(&layout.root, stage, &cfg.canonical_json(), cfg.seed, s),
        s,
    )
}

fn write_embeddings(m: &EmbeddingMatrix, matrix: &Path, keys: &Path) -> Result<(), CliError> {
    ensure_parent(matrix)?;
    m.save(matrix, keys)?;
    Ok(())
}

pub fn synth(cfg: &Config, layout: &Layout) -> Result<Manifest, CliError> {
    let (mut mb, seed) = manifest(cfg, layout, "synth", "synth");
    let mut sc = cfg.synth.clone();
    sc.seed = seed;
    let data = generate_synthetic(&sc)?;
    write(
        &layout.interactions(),
        write_interactions_tsv(&data.interactions),
    )?;
    write_embeddings(&data.items, &layout.items_matrix(), &layout.items_keys())?;
    write_embeddings(
        &data.reviews,
        &layout.reviews_matrix(),
        &layout.reviews_keys(),
    )?;
    for p in [
        layout.interactions(),
        layout.items_matrix(),
        layout.items_keys(),
        layout.reviews_matrix(),
        layout.reviews_keys(),
    ] {
        mb.output(&p)?;
    }
    mb.finish()
}

/// Parses raw reviews, keeps the k-core, and attaches embeddings: the
/// configured embedding files when given, else the hashing embedder applied
/// to item keys and review texts.
pub fn ingest(cfg: &Config, layout: &Layout) -> Result<Manifest, CliError> {
    if cfg.data.source != DataSource::File {
        return Err(CliError::Config(
            "ingest needs [data] source = file and an input path".into(),
        ));
    }
    let input = cfg.data.input.as_ref().expect("validated");
    let (mut mb, seed) = manifest(cfg, layout, "ingest", "embed");
    require("ingest", input, "an external dataset")?;
    mb.input(input)?;
    let report = parse_reviews(input, cfg.data.format)?;
    let kept = k_core_filter(&dedupe_user_items(&report.interactions), cfg.data.k_core)?;
    let mut item_keys: Vec<String> = kept.iter().map(|x| x.item_key.clone()).collect();
    item_keys.sort();
    item_keys.dedup();
    let reviewed: Vec<&Interaction> = kept.iter().filter(|x| x.has_review()).collect();
    let review_keys: Vec<String> = reviewed.iter().map(|x| x.review_key()).collect();

    let (items, reviews) = match (&cfg.data.items_matrix, &cfg.data.reviews_matrix) {
        (Some(im), rm) => {
            let ik = cfg.data.items_keys.as_ref().expect("validated");
            for p in [im, ik] {
                require("ingest", p, "the embedding extractor")?;
                mb.input(p)?;
            }
            let items = load_embeddings(im, ik)?.select(&item_keys)?;
            let reviews = match rm {
                Some(rm) => {
                    let rk = cfg.data.reviews_keys.as_ref().expect("validated");
                    for p in [rm, rk] {
                        require("ingest", p, "the embedding extractor")?;
                        mb.input(p)?;
                    }
                    load_embeddings(rm, rk)?.select(&review_keys)?
                }
                None => EmbeddingMatrix::from_rows(
                    reviewed
                        .iter()
                        .map(|x| {
                            (
                                x.review_key(),
                                synthetic_embed(&x.review_text, items.dim(), seed),
                            )
                        })
                        .collect(),
                    items.dim(),
                )?,
            };
            (items, reviews)
        }
        (None, _) => {
            let d = cfg.data.embed_dim;
            let items = EmbeddingMatrix::from_rows(
                item_keys
                    .iter()
                    .map(|k| (k.clone(), synthetic_embed(k, d, seed)))
                    .collect(),
                d,
            )?;
            let reviews = EmbeddingMatrix::from_rows(
                reviewed
                    .iter()
                    .map(|x| (x.review_key(), synthetic_embed(&x.review_text, d, seed)))
                    .collect(),
                d,
            )?;
            (items, reviews)
        }
    };
    write(&layout.interactions(), write_interactions_tsv(&kept))?;
    write_embeddings(&items, &layout.items_matrix(), &layout.items_keys())?;
    write_embeddings(&reviews, &layout.reviews_matrix(), &layout.reviews_keys())?;
    let users = kept
        .iter()
        .map(|x| &x.user_key)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let mut stats = String::from("metric\tvalue\n");
    writeln!(
        stats,
        "records\t{}",
        report.interactions.len() + report.skipped
    )
    .unwrap();
    writeln!(stats, "skipped\t{}", report.skipped).unwrap();
    writeln!(stats, "interactions\t{}", kept.len()).unwrap();
    writeln!(stats, "users\t{users}").unwrap();
    writeln!(stats, "items\t{}", item_keys.len()).unwrap();
    writeln!(stats, "reviews\t{}", review_keys.len()).unwrap();
    write(&layout.report("ingest.tsv"), stats)?;
    for p in [
        layout.interactions(),
        layout.items_matrix(),
        layout.items_keys(),
        layout.reviews_matrix(),
        layout.reviews_keys(),
        layout.report("ingest.tsv"),
    ] {
        mb.output(&p)?;
    }
    mb.finish()
}

fn load_embedding_inputs(
    stage: &'static str,
    layout: &Layout,
    mb: &mut ManifestBuilder,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix), CliError> {
    for p in [
        layout.items_matrix(),
        layout.items_keys(),
        layout.reviews_matrix(),
        layout.reviews_keys(),
    ] {
        require(stage, &p, "synth or ingest")?;
        mb.input(&p)?;
    }
    Ok((
        load_embeddings(&layout.items_matrix(), &layout.items_keys())?,
        load_embeddings(&layout.reviews_matrix(), &layout.reviews_keys())?,
    ))
}

fn collision_row(
    out: &mut String,
    cfg: &Config,
    levels: usize,
    sids: &SidTables,
) -> Result<f64, CliError> {
    let rate = collision_rate(&sids.items)?;
    writeln!(
        out,
        "{levels}\t{}\t{}\t{rate}\t{}\t{}",
        cfg.tokenizer.codebook_size,
        sids.items.len(),
        max_disambig(&sids.items),
        sids.reviews.len()
    )
    .unwrap();
    Ok(rate)
}

const COLLISION_HEADER: &str =
    "levels\tcodebook_size\titems\tcollision_rate\tmax_disambig\treviews\n";

pub fn tokenize(cfg: &Config, layout: &Layout) -> Result<Manifest, CliError> {
    let (mut mb, seed) = manifest(cfg, layout, "tokenize", "tokenize");
    let (items, reviews) = load_embedding_inputs("tokenize", layout, &mut mb)?;
    let fit = fit_tokenizer(&cfg.tokenizer, &items, &reviews, seed)?;
    ensure_parent(&layout.tokenizer())?;
    fit.model.save(&layout.tokenizer())?;
    let mut log = String::from("epoch,total,rec,code,commit\n");
    for (e, l) in fit.history.iter().enumerate() {
        writeln!(
            log,
            "{},{},{},{},{}",
            e + 1,
            l.total,
            l.rec,
            l.code,
            l.commit
        )
        .unwrap();
    }
    write(&layout.tokenizer_log(), log)?;
    ensure_parent(&layout.item_sids())?;
    write_sid_map(&layout.item_sids(), &fit.sids.items)?;
    write_sid_map(&layout.review_sids(), &fit.sids.reviews)?;
    let mut report = String::from(COLLISION_HEADER);
    collision_row(&mut report, cfg, cfg.tokenizer.levels, &fit.sids)?;
    write(&layout.report("collisions.tsv"), report)?;
    for p in [
        layout.tokenizer(),
        layout.tokenizer_log(),
        layout.item_sids(),
        layout.review_sids(),
        layout.report("collisions.tsv"),
    ] {
        mb.output(&p)?;
    }
    mb.finish()
}

fn load_sids(
    stage: &'static str,
    layout: &Layout,
    mb: &mut ManifestBuilder,
) -> Result<SidTables, CliError> {
    for p in [layout.item_sids(), layout.review_sids()] {
        require(stage, &p, "tokenize")?;
        mb.input(&p)?;
    }
    Ok(SidTables {
        items: read_sid_map(&layout.item_sids())?,
        reviews: read_sid_map(&layout.review_sids())?,
    })
}

fn load_prepared(
    stage: &'static str,
    cfg: &Config,
    layout: &Layout,
    mb: &mut ManifestBuilder,
) -> Result<Prepared, CliError> {
    require(stage, &layout.interactions(), "synth or ingest")?;
    mb.input(&layout.interactions())?;
    let split = split_interactions(&read_interactions_tsv(&layout.interactions())?)?;
    let sids = load_sids(stage, layout, mb)?;
    Ok(Prepared::new(split, sids, cfg)?)
}

fn load_model(
    stage: &'static str,
    layout: &Layout,
    id: &str,
    data: &Prepared,
    mb: &mut ManifestBuilder,
) -> Result<GenRecModel, CliError> {
    let path = layout.model(id);
    require(stage, &path, if id == ALIGNED { "align" } else { "train" })?;
    mb.input(&path)?;
    let model = GenRecModel::load(&path)?;
    if model.config.vocab_size != data.vocab.vocab_size() {
        return Err(ragr_core::error::Error::Consistency(format!(
            "{} was trained on a vocabulary of {} tokens but the current SIDs need {}; retrain after tokenize",
            path.display(),
            model.config.vocab_size,
            data.vocab.vocab_size()
        ))
        .into());
    }
    Ok(model)
}

pub fn train(cfg: &Config, layout: &Layout, mode: SequenceMode) -> Result<Manifest, CliError> {
    let id = mode.as_str();
    let (mut mb, seed) = manifest(cfg, layout, &format!("train-{id}"), "train");
    let data = load_prepared("train", cfg, layout, &mut mb)?;
    let result = train_mode(cfg, &data, mode, seed)?;
    ensure_parent(&layout.model(id))?;
    result.model.save(&layout.model(id))?;
    write_training_log(&layout.train_log(id), &result.log)?;
    let instances = make_instances(
        &data.split,
        &data.sids,
        &data.vocab,
        mode,
        cfg.data.max_items,
    )?;
    write_instances_jsonl(&layout.instances(id), &instances)?;
    for p in [layout.model(id), layout.train_log(id), layout.instances(id)] {
        mb.output(&p)?;
    }
    mb.finish()
}

fn dpo_config(cfg: &Config, seed: u64) -> DpoConfig {
    DpoConfig {
        seed: stage_seed(seed, "dpo"),
        ..cfg.align.clone()
    }
}

/// DPO on top of the task-augmented checkpoint.
pub fn align(
    cfg: &Config,
    layout: &Layout,
    mode: Option<SequenceMode>,
) -> Result<Manifest, CliError> {
    if let Some(m) = mode.filter(|m| *m != SequenceMode::TaskAugmented) {
        return Err(CliError::Config(format!(
            "align builds on the task checkpoint, not {m}"
        )));
    }
    let (mut mb, seed) = manifest(cfg, layout, "align", "align");
    let data = load_prepared("align", cfg, layout, &mut mb)?;
    let policy = load_model(
        "align",
        layout,
        SequenceMode::TaskAugmented.as_str(),
        &data,
        &mut mb,
    )?;
    let pairs = preference_pairs(cfg, &data)?;
    let result = train_dpo(policy, &pairs, &dpo_config(cfg, seed))?;
    ensure_parent(&layout.pairs())?;
    write_pairs_jsonl(&layout.pairs(), &pairs)?;
    let mut log = String::from("epoch,loss\n");
    writeln!(log, "0,{}", result.initial_loss).unwrap();
    for (e, l) in result.history.iter().enumerate() {
        writeln!(log, "{},{l}", e + 1).unwrap();
    }
    write(&layout.align_log(), log)?;
    ensure_parent(&layout.model(ALIGNED))?;
    result.model.save(&layout.model(ALIGNED))?;
    let before = preference_accuracy(&result.reference, &pairs)?;
    let after = preference_accuracy(&result.model, &pairs)?;
    write(
        &layout.report("alignment.tsv"),
        format!("metric\tvalue\npairs\t{}\npreference_accuracy_before\t{before}\npreference_accuracy_after\t{after}\n", pairs.len()),
    )?;
    for p in [
        layout.pairs(),
        layout.align_log(),
        layout.model(ALIGNED),
        layout.report("alignment.tsv"),
    ] {
        mb.output(&p)?;
    }
    mb.finish()
}

/// Evaluates every trained model found, or only `only` when given.
pub fn eval(cfg: &Config, layout: &Layout, only: Option<&str>) -> Result<Manifest, CliError> {
    let (mut mb, _) = manifest(cfg, layout, "eval", "eval");
    let data = load_prepared("eval", cfg, layout, &mut mb)?;
    let ids: Vec<(&str, SequenceMode)> = match only {
        Some(id) => vec![*model_ids()
            .iter()
            .find(|(m, _)| *m == id)
            .ok_or_else(|| CliError::Config(format!("unknown model {id:?}")))?],
        None => model_ids()
            .into_iter()
            .filter(|(id, _)| layout.model(id).is_file())
            .collect(),
    };
    if ids.is_empty() {
        return Err(CliError::MissingArtifact {
            stage: "eval",
            path: layout.model(SequenceMode::ItemOnly.as_str()),
            producer: "train",
        });
    }
    let mut rows = Vec::new();
    for (id, mode) in ids {
        let model = load_model("eval", layout, id, &data, &mut mb)?;
        let report = evaluate_model(cfg, &data, &model, mode)?;
        let recs = layout.report(&format!("recommendations_{id}.tsv"));
        ensure_parent(&recs)?;
        write_recommendations(&recs, &report.recommendations)?;
        mb.output(&recs)?;
        rows.extend(
            report
                .metrics
                .into_iter()
                .map(|m| (id.to_string(), mode, m)),
        );
    }
    write(&layout.report("metrics.tsv"), metrics_tsv(&rows))?;
    mb.output(&layout.report("metrics.tsv"))?;
    mb.finish()
}

/// Tokenizer depth grid: collision rate and test metrics per level count.
pub fn sweep_sid(cfg: &Config, layout: &Layout, mode: SequenceMode) -> Result<Manifest, CliError> {
    let (mut mb, seed) = manifest(cfg, layout, "sweep-sid", "sweep-sid");
    let (items, reviews) = load_embedding_inputs("sweep-sid", layout, &mut mb)?;
    require("sweep-sid", &layout.interactions(), "synth or ingest")?;
    mb.input(&layout.interactions())?;
    let split = split_interactions(&read_interactions_tsv(&layout.interactions())?)?;
    let mut collisions = String::from(COLLISION_HEADER);
    let mut out = String::from("levels\tcollision_rate\tmode\tK\tHIT\tNDCG\n");
    for &levels in &cfg.sweep.sid_levels {
        let mut c = cfg.clone();
        c.tokenizer.levels = levels;
        let fit = fit_tokenizer(
            &c.tokenizer,
            &items,
            &reviews,
            stage_seed(seed, &format!("tokenize-{levels}")),
        )?;
        let rate = collision_row(&mut collisions, &c, levels, &fit.sids)?;
        let data = Prepared::new(split.clone(), fit.sids, &c)?;
        let model = train_mode(
            &c,
            &data,
            mode,
            stage_seed(seed, &format!("train-{levels}")),
        )?
        .model;
        for m in evaluate_model(&c, &data, &model, mode)?.metrics {
            writeln!(
                out,
                "{levels}\t{rate}\t{mode}\t{}\t{:.6}\t{:.6}",
                m.k, m.hit, m.ndcg
            )
            .unwrap();
        }
    }
    write(&layout.report("sweep_sid_collisions.tsv"), collisions)?;
    write(&layout.report("sweep_sid.tsv"), out)?;
    mb.output(&layout.report("sweep_sid_collisions.tsv"))?;
    mb.output(&layout.report("sweep_sid.tsv"))?;
    mb.finish()
}

/// `beta_dpo × epochs` grid on top of the task checkpoint. Epoch count 0 is
/// the unaligned baseline.
pub fn sweep_dpo(cfg: &Config, layout: &Layout) -> Result<Manifest, CliError> {
    let (mut mb, seed) = manifest(cfg, layout, "sweep-dpo", "align");
    let data = load_prepared("sweep-dpo", cfg, layout, &mut mb)?;
    let base = load_model(
        "sweep-dpo",
        layout,
        SequenceMode::TaskAugmented.as_str(),
        &data,
        &mut mb,
    )?;
    let pairs = preference_pairs(cfg, &data)?;
    let mode = SequenceMode::TaskAugmented;
    let mut out = String::from("beta_dpo\tepochs\tpreference_accuracy\tK\tHIT\tNDCG\n");
    let row =
        |out: &mut String, beta: f64, epochs: usize, model: &GenRecModel| -> Result<(), CliError> {
            let acc = preference_accuracy(model, &pairs)?;
            for m in evaluate_model(cfg, &data, model, mode)?.metrics {
                writeln!(
                    out,
                    "{beta}\t{epochs}\t{acc}\t{}\t{:.6}\t{:.6}",
                    m.k, m.hit, m.ndcg
                )
                .unwrap();
            }
            Ok(())
        };
    row(&mut out, 0.0, 0, &base)?;
    for &beta in &cfg.sweep.beta_dpo {
        for &epochs in &cfg.sweep.dpo_epochs {
            let dc = DpoConfig {
                beta_dpo: beta,
                epochs,
                ..dpo_config(cfg, seed)
            };
            let model = train_dpo(base.clone(), &pairs, &dc)?.model;
            row(&mut out, beta, epochs, &model)?;
        }
    }
    write(&layout.report("sweep_dpo.tsv"), out)?;
    mb.output(&layout.report("sweep_dpo.tsv"))?;
    mb.finish()
}

/// Most frequent codes per level for the item and review corpora.
pub fn inspect(cfg: &Config, layout: &Layout) -> Result<Manifest, CliError> {
    let (mut mb, _) = manifest(cfg, layout, "inspect", "inspect");
    let sids = load_sids("inspect", layout, &mut mb)?;
    let levels = sids
        .items
        .values()
        .next()
        .map_or(cfg.tokenizer.levels, |s| s.codes.len());
    let k = cfg.tokenizer.codebook_size;
    let top = |m: &SidMap| -> Result<_, CliError> {
        Ok(top_codes(&sid_frequency(m, levels, k)?, cfg.eval.top_n))
    };
    let (items, reviews) = (top(&sids.items)?, top(&sids.reviews)?);
    write(
        &layout.report("sid_histogram.tsv"),
        histogram_tsv(&[("item", &items), ("review", &reviews)]),
    )?;
    mb.output(&layout.report("sid_histogram.tsv"))?;
    mb.finish()
}
