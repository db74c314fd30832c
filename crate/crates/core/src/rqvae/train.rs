use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kmeans_init, RqVaeModel};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub code: f64,
    pub commit: f64,
}

impl LossParts {
    pub fn mean(parts: &[LossParts]) -> LossParts {
        let n = parts.len().max(1) as f64;
        let mut acc = LossParts::default();
        for p in parts {
            acc.total += p.total;
            acc.rec += p.rec;
            acc.code += p.code;
            acc.commit += p.commit;
        }
        LossParts {
            total: acc.total / n,
            rec: acc.rec / n,
            code: acc.code / n,
            commit: acc.commit / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub kmeans_iters: usize,
    pub optimizer: OptimizerKind,
    /// Re-seed codewords that went unselected for a whole epoch.
    pub reseed_dead: bool,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            lr: 1e-3,
            batch_size: 256,
            epochs: 100,
            weight_decay: 1e-4,
            kmeans_iters: 100,
            optimizer: OptimizerKind::AdamW,
            reseed_dead: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedTokenizer {
    pub model: RqVaeModel,
    /// Mean loss parts per epoch.
    pub history: Vec<LossParts>,
}

fn rows_to_mat(emb: &EmbeddingMatrix, idx: &[usize]) -> Mat {
    let d = emb.dim();
    let mut m = Mat::zeros(idx.len(), d);
    for (r, &i) in idx.iter().enumerate() {
        for (dst, &v) in m.row_mut(r).iter_mut().zip(emb.row(i)) {
            *dst = v as f64;
        }
    }
    m
}

/// Level-by-level k-means over the residuals of `x`.
fn init_codebooks(model: &mut RqVaeModel, x: &Mat, iters: usize, seed: u64) -> Result<()> {
    let h = model.encode_batch(x)?;
    let mut residual = h;
    for level in 1..=model.config.levels {
        let centroids = kmeans_init(
            &residual,
            model.config.codebook_size,
            iters,
            seed.wrapping_add(level as u64),
        )?;
        model.set_codebook(level, &centroids)?;
        let book = model.store.value(model.codebook_param(level)).to_vec();
        let d = model.config.code_dim;
        for i in 0..residual.rows {
            let (k, _) = super::nearest(&book, d, residual.row(i));
            for (r, c) in residual
                .row_mut(i)
                .iter_mut()
                .zip(&book[k * d..(k + 1) * d])
            {
                *r -= c;
            }
        }
    }
    Ok(())
}

/// Mini-batch training of the tokenizer on `embeddings`.
pub fn train_tokenizer(
    mut model: RqVaeModel,
    embeddings: &EmbeddingMatrix,
    config: &TokenizerTrainConfig,
) -> Result<TrainedTokenizer> {
    if embeddings.is_empty() {
        return Err(Error::EmptyDataset("tokenizer corpus is empty".into()));
    }
    if embeddings.dim() != model.config.input_dim {
        return Err(Error::Shape(format!(
            "embeddings have dim {}, tokenizer expects {}",
            embeddings.dim(),
            model.config.input_dim
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n = embeddings.len();
    let k = model.config.codebook_size;
    if n < k {
        return Err(Error::Config(format!(
            "corpus of {n} rows cannot initialize {k} codewords"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let init_rows = config.batch_size.max(k).min(n);
    let init_x = rows_to_mat(embeddings, &order[..init_rows]);
    init_codebooks(&mut model, &init_x, config.kmeans_iters, config.seed)?;

    let mut opt = Optimizer::new(config.optimizer, &model.store, config.weight_decay);
    let levels = model.config.levels;
    let d = model.config.code_dim;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if epoch > 0 {
            order.shuffle(&mut rng);
        }
        let mut usage = vec![vec![0usize; k]; levels];
        let mut epoch_parts = Vec::with_capacity(n);
        let mut last_residuals: Vec<Vec<Vec<f64>>> = vec![Vec::new(); levels];
        for batch in order.chunks(config.batch_size) {
            let x = rows_to_mat(embeddings, batch);
            let tr = model
                .forward_trace(&x)
                .map_err(|e| Error::Training(format!("epoch {}: {e}", epoch + 1)))?;
            let parts = model.trace_losses(&x, &tr);
            for q in &tr.quant {
                for (m, &c) in q.codes.iter().enumerate() {
                    usage[m][c] += 1;
                }
            }
            if config.reseed_dead {
                for m in 0..levels {
                    last_residuals[m] = tr.quant.iter().map(|q| q.residuals[m].clone()).collect();
                }
            }
            let mut grads = model.store.zero_grads();
            model.backward_trace(&x, &tr, &mut grads, 1.0 / x.rows as f64);
            if !grads.all_finite() || parts.iter().any(|p| !p.total.is_finite()) {
                return Err(Error::Training(format!(
                    "epoch {}: non-finite loss or gradient",
                    epoch + 1
                )));
            }
            opt.step(&mut model.store, &grads, config.lr);
            epoch_parts.extend(parts);
        }
        if config.reseed_dead {
            for m in 0..levels {
                let pool = &last_residuals[m];
                if pool.is_empty() {
                    continue;
                }
                let id = model.codebook_param(m + 1);
                for (c, &used) in usage[m].iter().enumerate() {
                    if used == 0 {
                        let src = &pool[rng.random_range(0..pool.len())];
                        let book = &mut model.store.get_mut(id).value;
                        for (dst, v) in book[c * d..(c + 1) * d].iter_mut().zip(src) {
                            *dst = *v as f32 as f64;
                        }
                    }
                }
            }
        }
        let mean = LossParts::mean(&epoch_parts);
        if !mean.total.is_finite() {
            return Err(Error::Training(format!("epoch {}: loss is NaN", epoch + 1)));
        }
        history.push(mean);
    }
    Ok(TrainedTokenizer { model, history })
}
