//! Item-vs-review preference pairs and direct preference optimization against
//! a frozen reference model.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::DatasetSplit;
use crate::error::{Error, Result};
use crate::genrec::{cross_entropy, GenRecModel, PackedBatch};
use crate::nn::log_softmax;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::Grads;
use crate::sequence::{
    serialize_history, HistoryStep, SequenceMode, SidTables, TokenId, TokenVocabulary, EOS,
};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    #[serde(rename = "user")]
    pub user_key: String,
    pub step: usize,
    pub context: Vec<TokenId>,
    /// Target item tokens, EOS-terminated.
    pub preferred: Vec<TokenId>,
    /// Review tokens of the same step, EOS-terminated.
    pub rejected: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta_dpo: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta_dpo: 0.6,
            lr: 1e-6,
            epochs: 1,
            batch_size: 32,
            weight_decay: 0.0,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_dpo > 0.0) || !self.beta_dpo.is_finite() {
            return Err(Error::Config(format!(
                "beta_dpo must be positive, got {}",
                self.beta_dpo
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One pair per train step `t ≥ 2` whose interaction has review text.
/// Contexts use the review-augmented serialization.
pub fn build_preference_pairs(
    split: &DatasetSplit,
    sids: &SidTables,
    vocab: &TokenVocabulary,
    max_items: usize,
) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for seq in &split.train {
        let steps = seq
            .interactions
            .iter()
            .map(|it| {
                Ok(HistoryStep {
                    item: sids.item(&it.item_key)?,
                    review: sids.review(it)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for t in 1..steps.len() {
            let Some(review) = steps[t].review else {
                continue;
            };
            let context =
                serialize_history(&steps[..t], vocab, SequenceMode::TaskAugmented, max_items)?
                    .tokens;
            let mut preferred = vocab.item_tokens(steps[t].item)?;
            preferred.push(EOS);
            let mut rejected = vocab.review_tokens(review)?;
            rejected.push(EOS);
            out.push(PreferencePair {
                user_key: seq.user_key.clone(),
                step: t + 1,
                context,
                preferred,
                rejected,
            });
        }
    }
    Ok(out)
}

/// `[log π(y⁺) − log π_ref(y⁺)] − [log π(y⁻) − log π_ref(y⁻)]`.
pub fn dpo_delta(
    policy: &GenRecModel,
    reference: &GenRecModel,
    pair: &PreferencePair,
) -> Result<f64> {
    if policy.config.vocab_size != reference.config.vocab_size {
        return Err(Error::Shape(
            "policy and reference vocabularies differ".into(),
        ));
    }
    let p = policy.sequence_log_probs(&[
        (&pair.context, &pair.preferred),
        (&pair.context, &pair.rejected),
    ])?;
    let r = reference.sequence_log_probs(&[
        (&pair.context, &pair.preferred),
        (&pair.context, &pair.rejected),
    ])?;
    Ok((p[0] - r[0]) - (p[1] - r[1]))
}

/// `−ln σ(β·Δ)` as `softplus(−β·Δ)`.
pub fn dpo_loss(delta: f64, beta_dpo: f64) -> f64 {
    softplus(-beta_dpo * delta)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fraction of pairs where the model scores `y⁺` strictly above `y⁻`.
pub fn preference_accuracy(model: &GenRecModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no preference pairs".into()));
    }
    let scores = pair_scores(model, pairs)?;
    Ok(scores.iter().filter(|(a, b)| a > b).count() as f64 / pairs.len() as f64)
}

fn pair_batch(model: &GenRecModel, pairs: &[&PreferencePair]) -> Result<PackedBatch> {
    let contexts: Vec<&[TokenId]> = pairs.iter().map(|p| p.context.as_slice()).collect();
    let mut targets: Vec<(usize, &[TokenId])> = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        targets.push((i, &p.preferred));
        targets.push((i, &p.rejected));
    }
    PackedBatch::new(&model.config, &contexts, &targets)
}

/// `(log π(y⁺|x), log π(y⁻|x))` per pair, evaluation mode.
pub fn pair_scores(model: &GenRecModel, pairs: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(128) {
        let refs: Vec<&PreferencePair> = chunk.iter().collect();
        let s = model.score_batch(&pair_batch(model, &refs)?)?;
        out.extend(s.chunks_exact(2).map(|c| (c[0], c[1])));
    }
    Ok(out)
}

/// Mean DPO loss over `pairs` and its gradient w.r.t. the policy, given
/// cached reference scores.
pub fn dpo_loss_and_grad(
    policy: &GenRecModel,
    pairs: &[&PreferencePair],
    reference: &[(f64, f64)],
    beta_dpo: f64,
) -> Result<(f64, Grads)> {
    assert_eq!(pairs.len(), reference.len());
    let batch = pair_batch(policy, pairs)?;
    let (logits, cache) = policy.forward_batch(&batch, None);
    let rows: Vec<_> = batch.target_rows().collect();
    let lp: Vec<f64> = rows
        .iter()
        .map(|r| {
            r.clone()
                .map(|i| log_softmax(logits.row(i))[batch.targets()[i] as usize])
                .sum()
        })
        .collect();
    // p − onehot, the negated gradient of each row's log-probability
    let (_, neg_dlp) = cross_entropy(&logits, batch.targets(), 0.0);
    let n = pairs.len() as f64;
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for (i, &(ref_pos, ref_neg)) in reference.iter().enumerate() {
        let delta = (lp[2 * i] - ref_pos) - (lp[2 * i + 1] - ref_neg);
        total += dpo_loss(delta, beta_dpo);
        let dl_ddelta = -beta_dpo * sigmoid(-beta_dpo * delta) / n;
        for (k, sign) in [(2 * i, 1.0), (2 * i + 1, -1.0)] {
            for r in rows[k].clone() {
                for (dst, g) in dlogits.row_mut(r).iter_mut().zip(neg_dlp.row(r)) {
                    *dst = -sign * dl_ddelta * g;
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Training("DPO loss is NaN".into()));
    }
    let mut grads = policy.store.zero_grads();
    policy.backward_batch(&batch, &cache, &dlogits, &mut grads);
    Ok((total / n, grads))
}

#[derive(Clone, Debug)]
pub struct DpoResult {
    pub model: GenRecModel,
    /// Frozen copy of the input policy.
    pub reference: GenRecModel,
    /// Mean loss before any update (`ln 2` when policy equals reference).
    pub initial_loss: f64,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Dropout is off throughout: the policy is scored exactly as the reference.
pub fn train_dpo(
    policy: GenRecModel,
    pairs: &[PreferencePair],
    config: &DpoConfig,
) -> Result<DpoResult> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no preference pairs".into()));
    }
    let reference = policy.clone();
    let ref_scores = pair_scores(&reference, pairs)?;
    let mut model = policy;
    let initial_loss = {
        let now = pair_scores(&model, pairs)?;
        now.iter()
            .zip(&ref_scores)
            .map(|(p, r)| dpo_loss((p.0 - r.0) - (p.1 - r.1), config.beta_dpo))
            .sum::<f64>()
            / pairs.len() as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut opt = Optimizer::new(config.optimizer, &model.store, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let refs: Vec<(f64, f64)> = chunk.iter().map(|&i| ref_scores[i]).collect();
            let (loss, grads) = dpo_loss_and_grad(&model, &batch, &refs, config.beta_dpo)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            if !grads.all_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}: non-finite gradient"
                )));
            }
            opt.step(&mut model.store, &grads, config.lr);
            sum += loss * chunk.len() as f64;
        }
        history.push(sum / pairs.len() as f64);
    }
    Ok(DpoResult {
        model,
        reference,
        initial_loss,
        history,
    })
}

/// Max relative error between the analytic DPO gradient and central finite
/// differences over every policy parameter.
pub fn dpo_gradient_check(
    policy: &GenRecModel,
    reference: &GenRecModel,
    pairs: &[PreferencePair],
    beta_dpo: f64,
) -> Result<f64> {
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let ref_scores = pair_scores(reference, pairs)?;
    let (_, grads) = dpo_loss_and_grad(policy, &refs, &ref_scores, beta_dpo)?;
    let loss = |m: &GenRecModel| -> Result<f64> {
        let s = pair_scores(m, pairs)?;
        Ok(s.iter()
            .zip(&ref_scores)
            .map(|(p, r)| dpo_loss((p.0 - r.0) - (p.1 - r.1), beta_dpo))
            .sum::<f64>()
            / pairs.len() as f64)
    };
    let step = 1e-5;
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = policy.store.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        for j in 0..policy.store.get(id).value.len() {
            let orig = policy.store.get(id).value[j];
            probe.store.get_mut(id).value[j] = orig + step;
            let up = loss(&probe)?;
            probe.store.get_mut(id).value[j] = orig - step;
            let down = loss(&probe)?;
            probe.store.get_mut(id).value[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(crate::genrec::relative_error(grads.data[p][j], numeric));
        }
    }
    Ok(worst)
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}", serde_json::to_string(p).expect("pair serializes"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genrec::ModelConfig;

    fn tiny() -> GenRecModel {
        GenRecModel::new(ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 12,
            max_positions: 8,
            dropout: 0.1,
            seed: 4,
        })
        .unwrap()
    }

    fn pair(ctx: &[TokenId], pos: &[TokenId], neg: &[TokenId]) -> PreferencePair {
        PreferencePair {
            user_key: "u".into(),
            step: 2,
            context: ctx.to_vec(),
            preferred: pos.to_vec(),
            rejected: neg.to_vec(),
        }
    }

    #[test]
    fn loss_closed_forms() {
        assert!((dpo_loss(0.0, 0.6) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((dpo_loss(2.0, 0.5) - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!(dpo_loss(1e6, 0.6) < 1e-12);
        assert!((dpo_loss(-1e6, 0.6) - 0.6e6).abs() < 1e-6);
        assert!(dpo_loss(1.0, 0.5) > dpo_loss(1.5, 0.5));
        assert!(dpo_loss(1.0, 0.5) > dpo_loss(1.0, 0.7));
    }

    #[test]
    fn delta_identity_antisymmetry_and_recombination() {
        let p = tiny();
        let mut q = tiny();
        for id in q.store.ids().collect::<Vec<_>>() {
            for (k, v) in q.store.get_mut(id).value.iter_mut().enumerate() {
                *v += 0.01 * ((k % 7) as f64 - 3.0);
            }
        }
        let pr = pair(&[1, 3, 4], &[5, 6, 2], &[7, 2]);
        assert_eq!(dpo_delta(&p, &p, &pr).unwrap(), 0.0);
        let swapped = pair(&[1, 3, 4], &[7, 2], &[5, 6, 2]);
        let d = dpo_delta(&q, &p, &pr).unwrap();
        assert!((d + dpo_delta(&q, &p, &swapped).unwrap()).abs() < 1e-12);
        let lp = |m: &GenRecModel, y: &[TokenId]| m.sequence_log_prob(&pr.context, y).unwrap();
        let oracle = (lp(&q, &pr.preferred) - lp(&p, &pr.preferred))
            - (lp(&q, &pr.rejected) - lp(&p, &pr.rejected));
        assert!((d - oracle).abs() < 1e-10);
    }

    #[test]
    fn initial_loss_is_ln2_and_reference_stays_frozen() {
        let m = tiny();
        let pairs = vec![
            pair(&[1, 3], &[5, 6, 2], &[7, 2]),
            pair(&[1, 4, 9], &[8, 5, 2], &[3, 2]),
        ];
        let cfg = DpoConfig {
            lr: 1e-2,
            epochs: 5,
            batch_size: 1,
            ..Default::default()
        };
        let r = train_dpo(m.clone(), &pairs, &cfg).unwrap();
        assert!((r.initial_loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.reference.store, m.store);
        assert!(r.history.last().unwrap() < &r.initial_loss);
        let zero = train_dpo(
            m.clone(),
            &pairs,
            &DpoConfig {
                epochs: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(zero.model.store, m.store);
        assert!(matches!(
            train_dpo(
                m,
                &pairs,
                &DpoConfig {
                    beta_dpo: 0.0,
                    ..cfg
                }
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let reference = tiny();
        let pairs = vec![
            pair(&[1, 3], &[5, 6, 2], &[7, 2]),
            pair(&[1, 4, 9], &[8, 5, 2], &[3, 2]),
        ];
        assert!(dpo_gradient_check(&reference, &reference, &pairs, 0.6).unwrap() < 1e-4);
        let mut moved = reference.clone();
        for id in moved.store.ids().collect::<Vec<_>>() {
            for (k, v) in moved.store.get_mut(id).value.iter_mut().enumerate() {
                *v += 0.05 * ((k % 5) as f64 - 2.0);
            }
        }
        assert!(dpo_gradient_check(&moved, &reference, &pairs, 0.5).unwrap() < 1e-4);
    }
}
