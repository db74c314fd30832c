use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GenRecModel, ModelConfig, PackedBatch};
use crate::error::{Error, Result};
use crate::nn::softmax_in_place;
use crate::optim::{CosineSchedule, Optimizer, OptimizerKind};
use crate::sequence::{InstanceKind, TokenId, TrainingInstance};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            label_smoothing: 0.0,
            clip_norm: 1.0,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct SftResult {
    pub model: GenRecModel,
    /// Mean token-level training loss per epoch.
    pub history: Vec<f64>,
    pub log: Vec<LogRow>,
}

/// Summed token cross-entropy and its unscaled gradient `p − q` w.r.t. logits.
pub fn cross_entropy(logits: &Mat, targets: &[TokenId], smoothing: f64) -> (f64, Mat) {
    assert_eq!(logits.rows, targets.len());
    let v = logits.cols as f64;
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let nll = lse - row[t as usize];
        total += if smoothing > 0.0 {
            let mean_nll = lse - row.iter().sum::<f64>() / v;
            (1.0 - smoothing) * nll + smoothing * mean_nll
        } else {
            nll
        };
        let g = grad.row_mut(r);
        softmax_in_place(g);
        for x in g.iter_mut() {
            *x -= smoothing / v;
        }
        g[t as usize] -= 1.0 - smoothing;
    }
    (total, grad)
}

fn pack(config: &ModelConfig, instances: &[&TrainingInstance]) -> Result<PackedBatch> {
    let pairs: Vec<(&[TokenId], &[TokenId])> = instances
        .iter()
        .map(|i| (i.input_tokens.as_slice(), i.target_tokens.as_slice()))
        .collect();
    PackedBatch::from_pairs(config, &pairs)
}

/// Evaluation-mode mean token cross-entropy.
pub fn mean_token_loss(model: &GenRecModel, instances: &[TrainingInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset("no instances to score".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in instances.chunks(256) {
        let refs: Vec<&TrainingInstance> = chunk.iter().collect();
        let batch = pack(&model.config, &refs)?;
        let (logits, _) = model.forward_batch(&batch, None);
        let (loss, _) = cross_entropy(&logits, batch.targets(), 0.0);
        sum += loss;
        count += batch.targets().len();
    }
    Ok(sum / count as f64)
}

pub fn train_sft(
    model: GenRecModel,
    instances: &[TrainingInstance],
    config: &SftConfig,
) -> Result<SftResult> {
    train_sft_with_validation(model, instances, &[], config)
}

/// Teacher-forced training with seeded shuffling, dropout, cosine schedule
/// with linear warmup, and decoupled weight decay.
pub fn train_sft_with_validation(
    mut model: GenRecModel,
    instances: &[TrainingInstance],
    validation: &[TrainingInstance],
    config: &SftConfig,
) -> Result<SftResult> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset("no training instances".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let steps_per_epoch = instances.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(
        config.lr,
        config.warmup_ratio,
        steps_per_epoch * config.epochs,
    );
    let mut opt = Optimizer::new(config.optimizer, &model.store, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&TrainingInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let batch = pack(&model.config, &refs)?;
            let (logits, cache) = model.forward_batch(&batch, Some(&mut rng));
            let (loss, mut dlogits) =
                cross_entropy(&logits, batch.targets(), config.label_smoothing);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}, batch {step}: loss is NaN"
                )));
            }
            let ntok = batch.targets().len();
            dlogits.data.iter_mut().for_each(|g| *g /= ntok as f64);
            let mut grads = model.store.zero_grads();
            model.backward_batch(&batch, &cache, &dlogits, &mut grads);
            if !grads.all_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}, batch {step}: non-finite gradient"
                )));
            }
            if config.clip_norm > 0.0 {
                let norm = grads.norm();
                if norm > config.clip_norm {
                    grads.scale(config.clip_norm / norm);
                }
            }
            opt.step(&mut model.store, &grads, schedule.lr(step));
            step += 1;
            sum += loss;
            count += ntok;
        }
        let mean = sum / count as f64;
        history.push(mean);
        log.push(LogRow {
            epoch,
            split: "train".into(),
            loss: mean,
        });
        if !validation.is_empty() {
            log.push(LogRow {
                epoch,
                split: "validation".into(),
                loss: mean_token_loss(&model, validation)?,
            });
        }
    }
    Ok(SftResult {
        model,
        history,
        log,
    })
}

/// CSV with header `epoch,split,loss`.
pub fn write_training_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("epoch,split,loss\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.epoch, r.split, r.loss).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Largest relative difference between the analytic gradient of the mean
/// token cross-entropy and central finite differences, over every parameter.
/// Dropout is disabled.
pub fn gradient_check_on(model: &GenRecModel, instances: &[TrainingInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset("gradient check needs instances".into()));
    }
    let refs: Vec<&TrainingInstance> = instances.iter().collect();
    let batch = pack(&model.config, &refs)?;
    let ntok = batch.targets().len() as f64;
    let loss = |m: &GenRecModel| {
        cross_entropy(&m.forward_batch(&batch, None).0, batch.targets(), 0.0).0 / ntok
    };

    let (logits, cache) = model.forward_batch(&batch, None);
    let (_, mut dlogits) = cross_entropy(&logits, batch.targets(), 0.0);
    dlogits.data.iter_mut().for_each(|g| *g /= ntok);
    let mut grads = model.store.zero_grads();
    model.backward_batch(&batch, &cache, &dlogits, &mut grads);

    let step = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.store.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        for j in 0..model.store.get(id).value.len() {
            let orig = model.store.get(id).value[j];
            probe.store.get_mut(id).value[j] = orig + step;
            let up = loss(&probe);
            probe.store.get_mut(id).value[j] = orig - step;
            let down = loss(&probe);
            probe.store.get_mut(id).value[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.data[p][j];
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// [`gradient_check_on`] for a freshly initialized model with random instances.
///
/// Requires tiny dimensions (`d_model`, `d_ff` ≤ 16, `max_positions` ≤ 6).
pub fn gradient_check(config: &ModelConfig, seed: u64) -> Result<f64> {
    if config.d_model > 16 || config.d_ff > 16 || config.max_positions > 6 || config.vocab_size > 64
    {
        return Err(Error::Config(
            "gradient check is limited to tiny models".into(),
        ));
    }
    let model = GenRecModel::new(ModelConfig {
        seed,
        ..config.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let v = config.vocab_size as TokenId;
    let instances: Vec<TrainingInstance> = (0..3)
        .map(|i| {
            let n_in = rng.random_range(1..=config.max_positions);
            let n_out = rng.random_range(1..=config.max_positions);
            TrainingInstance {
                kind: InstanceKind::NextItem,
                user_key: format!("u{i}"),
                step: 2,
                input_tokens: (0..n_in).map(|_| rng.random_range(1..v)).collect(),
                target_tokens: (0..n_out).map(|_| rng.random_range(1..v)).collect(),
            }
        })
        .collect();
    gradient_check_on(&model, &instances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 12,
            max_positions: 6,
            dropout: 0.1,
            seed: 0,
        }
    }

    fn inst(input: &[TokenId], target: &[TokenId]) -> TrainingInstance {
        TrainingInstance {
            kind: InstanceKind::NextItem,
            user_key: "u".into(),
            step: 2,
            input_tokens: input.to_vec(),
            target_tokens: target.to_vec(),
        }
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        let logits = Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let (l, g) = cross_entropy(&logits, &[1], 0.0);
        assert!((l - 3f64.ln()).abs() < 1e-15);
        assert!((g.data[1] + 2.0 / 3.0).abs() < 1e-15 && (g.data[0] - 1.0 / 3.0).abs() < 1e-15);
        let (ls, gs) = cross_entropy(&logits, &[1], 0.3);
        assert!((ls - 3f64.ln()).abs() < 1e-15);
        assert!(gs.data.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = gradient_check(&tiny(11), seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
        assert!(matches!(
            gradient_check(
                &ModelConfig {
                    d_model: 32,
                    ..tiny(11)
                },
                0
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_check_ignores_instance_order() {
        let m = GenRecModel::new(tiny(9)).unwrap();
        let a = vec![
            inst(&[1, 3, 4], &[5, 2]),
            inst(&[1, 6], &[7, 8, 2]),
            inst(&[1], &[2]),
        ];
        let mut b = a.clone();
        b.reverse();
        let (ea, eb) = (
            gradient_check_on(&m, &a).unwrap(),
            gradient_check_on(&m, &b).unwrap(),
        );
        assert!(ea < 1e-4 && eb < 1e-4);
    }

    #[test]
    fn forced_target_has_vanishing_gradient() {
        let mut m = GenRecModel::new(tiny(9)).unwrap();
        let (w, b) = m.output_params();
        m.store.get_mut(w).value.iter_mut().for_each(|v| *v = 0.0);
        let bias = &mut m.store.get_mut(b).value;
        bias.iter_mut().for_each(|v| *v = 0.0);
        bias[2] = 60.0;
        let batch = pack(&m.config, &[&inst(&[1, 4], &[2])]).unwrap();
        let (logits, cache) = m.forward_batch(&batch, None);
        let (loss, dl) = cross_entropy(&logits, batch.targets(), 0.0);
        let mut g = m.store.zero_grads();
        m.backward_batch(&batch, &cache, &dl, &mut g);
        assert!(loss < 1e-20);
        assert!(g.norm() < 1e-8);
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let m = GenRecModel::new(tiny(9)).unwrap();
        let cfg = SftConfig {
            epochs: 0,
            ..Default::default()
        };
        let r = train_sft(m.clone(), &[inst(&[1, 3], &[4, 2])], &cfg).unwrap();
        assert_eq!(r.model.store, m.store);
        assert!(r.history.is_empty());
        assert!(matches!(
            train_sft(m, &[], &cfg),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn single_instance_overfits_and_is_deterministic() {
        let m = GenRecModel::new(ModelConfig {
            dropout: 0.0,
            ..tiny(9)
        })
        .unwrap();
        let data = [inst(&[1, 3, 4, 5], &[6, 7, 2])];
        let cfg = SftConfig {
            lr: 1e-2,
            batch_size: 1,
            epochs: 500,
            warmup_ratio: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let r = train_sft(m.clone(), &data, &cfg).unwrap();
        assert!(*r.history.last().unwrap() < 1e-2, "{:?}", r.history.last());
        let again = train_sft(m, &data, &cfg).unwrap();
        assert_eq!(r.history, again.history);
    }

    #[test]
    fn training_log_is_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_training_log(
            &p,
            &[LogRow {
                epoch: 1,
                split: "train".into(),
                loss: 0.5,
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "epoch,split,loss\n1,train,0.5\n"
        );
    }
}
