//! Encoder-decoder transformer over the SID token vocabulary.
//!
//! Pre-LN blocks, learned absolute positions, GELU feed-forward. The encoder
//! reads a serialized context; the decoder is teacher-forced on
//! `[BOS] + target[..L-1]` so that logits row `j` predicts `target[j]`.
//! Batches are packed: sequences are concatenated along rows and attention is
//! restricted to each sequence's own rows, so no padding is needed.

mod incremental;
mod train;

pub use incremental::{DecoderState, EncodedContext};
pub use train::{
    cross_entropy, gradient_check, gradient_check_on, mean_token_loss, relative_error, train_sft,
    train_sft_with_validation, write_training_log, LogRow, SftConfig, SftResult,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, dropout_backward, log_softmax, Activation, AttentionCache, FeedForward,
    FeedForwardCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention, Segment,
};
use crate::params::{Grads, ParamId, ParamStore};
use crate::sequence::{TokenId, BOS, PAD};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, max_positions: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 512,
            max_positions,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(
                "vocabulary must hold the special tokens".into(),
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "d_ff and max_positions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct GenRecModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: LayerNorm,
    dec_norm: LayerNorm,
    out: Linear,
}

/// Contexts and teacher-forced targets concatenated along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    enc_tokens: Vec<TokenId>,
    enc_pos: Vec<usize>,
    enc_valid: Vec<bool>,
    /// `(start, len)` per context.
    enc_segs: Vec<(usize, usize)>,
    dec_tokens: Vec<TokenId>,
    dec_pos: Vec<usize>,
    targets: Vec<TokenId>,
    /// `(start, len, context index)` per target.
    dec_segs: Vec<(usize, usize, usize)>,
}

impl PackedBatch {
    /// `targets` pairs a context index with the target tokens scored under it.
    pub fn new(
        config: &ModelConfig,
        contexts: &[&[TokenId]],
        targets: &[(usize, &[TokenId])],
    ) -> Result<Self> {
        let check = |tokens: &[TokenId], what: &str| -> Result<()> {
            if tokens.is_empty() {
                return Err(Error::Shape(format!("empty {what}")));
            }
            if tokens.len() > config.max_positions {
                return Err(Error::Shape(format!(
                    "{what} of length {} exceeds max_positions {}",
                    tokens.len(),
                    config.max_positions
                )));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::Shape(format!(
                    "token {t} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            Ok(())
        };
        let mut b = PackedBatch {
            enc_tokens: Vec::new(),
            enc_pos: Vec::new(),
            enc_valid: Vec::new(),
            enc_segs: Vec::with_capacity(contexts.len()),
            dec_tokens: Vec::new(),
            dec_pos: Vec::new(),
            targets: Vec::new(),
            dec_segs: Vec::with_capacity(targets.len()),
        };
        for ctx in contexts {
            check(ctx, "context")?;
            b.enc_segs.push((b.enc_tokens.len(), ctx.len()));
            b.enc_tokens.extend_from_slice(ctx);
            b.enc_pos.extend(0..ctx.len());
            b.enc_valid.extend(ctx.iter().map(|&t| t != PAD));
        }
        for &(ci, tgt) in targets {
            check(tgt, "target")?;
            if ci >= contexts.len() {
                return Err(Error::Shape(format!(
                    "target refers to missing context {ci}"
                )));
            }
            b.dec_segs.push((b.dec_tokens.len(), tgt.len(), ci));
            b.dec_tokens.push(BOS);
            b.dec_tokens.extend_from_slice(&tgt[..tgt.len() - 1]);
            b.dec_pos.extend(0..tgt.len());
            b.targets.extend_from_slice(tgt);
        }
        Ok(b)
    }

    /// One context per (input, target) pair.
    pub fn from_pairs(config: &ModelConfig, pairs: &[(&[TokenId], &[TokenId])]) -> Result<Self> {
        let contexts: Vec<&[TokenId]> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<(usize, &[TokenId])> =
            pairs.iter().enumerate().map(|(i, p)| (i, p.1)).collect();
        Self::new(config, &contexts, &targets)
    }

    pub fn targets(&self) -> &[TokenId] {
        &self.targets
    }

    /// Row range of each target inside the logits matrix.
    pub fn target_rows(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.dec_segs.iter().map(|&(s, l, _)| s..s + l)
    }

    fn enc_segments(&self) -> Vec<Segment> {
        self.enc_segs
            .iter()
            .map(|&(s, l)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect()
    }

    fn dec_self_segments(&self) -> Vec<Segment> {
        self.dec_segs
            .iter()
            .map(|&(s, l, _)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect()
    }

    fn cross_segments(&self) -> Vec<Segment> {
        self.dec_segs
            .iter()
            .map(|&(s, l, ci)| Segment {
                q_start: s,
                q_len: l,
                k_start: self.enc_segs[ci].0,
                k_len: self.enc_segs[ci].1,
            })
            .collect()
    }
}

struct EncLayerCache {
    ln1: LayerNormCache,
    a: Mat,
    attn: AttentionCache,
    drop1: Option<Vec<f64>>,
    ln2: LayerNormCache,
    b: Mat,
    ff: FeedForwardCache,
    drop2: Option<Vec<f64>>,
}

struct DecLayerCache {
    ln1: LayerNormCache,
    a: Mat,
    self_attn: AttentionCache,
    drop1: Option<Vec<f64>>,
    ln2: LayerNormCache,
    c: Mat,
    cross: AttentionCache,
    drop2: Option<Vec<f64>>,
    ln3: LayerNormCache,
    f: Mat,
    ff: FeedForwardCache,
    drop3: Option<Vec<f64>>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    enc_drop: Option<Vec<f64>>,
    enc_layers: Vec<EncLayerCache>,
    enc_norm: LayerNormCache,
    memory: Mat,
    dec_drop: Option<Vec<f64>>,
    dec_layers: Vec<DecLayerCache>,
    dec_norm: LayerNormCache,
    dec_out: Mat,
}

impl GenRecModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (v, d, p) = (config.vocab_size, config.d_model, config.max_positions);
        let mut table = |store: &mut ParamStore, name: &str, rows: usize| {
            let id = store.add_uniform(name, vec![rows, d], d, &mut rng);
            store.get_mut(id).decay = false;
            id
        };
        let tok_emb = table(&mut store, "embed.tokens", v);
        let enc_pos = table(&mut store, "embed.enc_positions", p);
        let dec_pos = table(&mut store, "embed.dec_positions", p);
        let act = Activation::Gelu;
        let encoder = (0..config.n_layers_enc)
            .map(|i| {
                let n = format!("encoder.{i}");
                EncoderLayer {
                    ln1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d),
                    attn: MultiHeadAttention::new(
                        &mut store,
                        &format!("{n}.attn"),
                        d,
                        config.n_heads,
                        &mut rng,
                    ),
                    ln2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d),
                    ff: FeedForward::new(
                        &mut store,
                        &format!("{n}.ff"),
                        d,
                        config.d_ff,
                        act,
                        &mut rng,
                    ),
                }
            })
            .collect();
        let decoder = (0..config.n_layers_dec)
            .map(|i| {
                let n = format!("decoder.{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d),
                    self_attn: MultiHeadAttention::new(
                        &mut store,
                        &format!("{n}.self_attn"),
                        d,
                        config.n_heads,
                        &mut rng,
                    ),
                    ln2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d),
                    cross_attn: MultiHeadAttention::new(
                        &mut store,
                        &format!("{n}.cross_attn"),
                        d,
                        config.n_heads,
                        &mut rng,
                    ),
                    ln3: LayerNorm::new(&mut store, &format!("{n}.ln3"), d),
                    ff: FeedForward::new(
                        &mut store,
                        &format!("{n}.ff"),
                        d,
                        config.d_ff,
                        act,
                        &mut rng,
                    ),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "encoder.norm", d);
        let dec_norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let out = Linear::new(&mut store, "output", d, v, true, &mut rng);
        Ok(GenRecModel {
            config,
            store,
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            out,
        })
    }

    /// Output projection parameters `(weight, bias)`.
    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.out.w, self.out.b.expect("output has bias"))
    }

    fn embed(&self, tokens: &[TokenId], positions: &[usize], pos_table: ParamId) -> Mat {
        let d = self.config.d_model;
        let emb = self.store.value(self.tok_emb);
        let pos = self.store.value(pos_table);
        let mut x = Mat::zeros(tokens.len(), d);
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let t = t as usize;
            for (j, dst) in x.row_mut(r).iter_mut().enumerate() {
                *dst = emb[t * d + j] + pos[p * d + j];
            }
        }
        x
    }

    fn embed_backward(
        &self,
        grads: &mut Grads,
        tokens: &[TokenId],
        positions: &[usize],
        pos_table: ParamId,
        dx: &Mat,
    ) {
        let d = self.config.d_model;
        {
            let g = grads.get_mut(self.tok_emb);
            for (r, &t) in tokens.iter().enumerate() {
                for (dst, v) in g[t as usize * d..(t as usize + 1) * d]
                    .iter_mut()
                    .zip(dx.row(r))
                {
                    *dst += v;
                }
            }
        }
        let g = grads.get_mut(pos_table);
        for (r, &p) in positions.iter().enumerate() {
            for (dst, v) in g[p * d..(p + 1) * d].iter_mut().zip(dx.row(r)) {
                *dst += v;
            }
        }
    }

    /// Logits for every target row of `batch`. Dropout is active iff `rng` is given.
    pub fn forward_batch(
        &self,
        batch: &PackedBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat, ForwardCache) {
        let s = &self.store;
        let p = self.config.dropout;

        let mut x = self.embed(&batch.enc_tokens, &batch.enc_pos, self.enc_pos);
        let enc_drop = dropout(&mut x, p, rng.as_deref_mut());
        let enc_segs = batch.enc_segments();
        let mut enc_layers = Vec::with_capacity(self.encoder.len());
        for l in &self.encoder {
            let (a, ln1) = l.ln1.forward(s, &x);
            let (mut att, attn) =
                l.attn
                    .forward_packed(s, &a, &a, &enc_segs, Some(&batch.enc_valid), false);
            let drop1 = dropout(&mut att, p, rng.as_deref_mut());
            x.add_assign(&att);
            let (b, ln2) = l.ln2.forward(s, &x);
            let (mut f, ff) = l.ff.forward(s, &b);
            let drop2 = dropout(&mut f, p, rng.as_deref_mut());
            x.add_assign(&f);
            enc_layers.push(EncLayerCache {
                ln1,
                a,
                attn,
                drop1,
                ln2,
                b,
                ff,
                drop2,
            });
        }
        let (memory, enc_norm) = self.enc_norm.forward(s, &x);

        let mut y = self.embed(&batch.dec_tokens, &batch.dec_pos, self.dec_pos);
        let dec_drop = dropout(&mut y, p, rng.as_deref_mut());
        let self_segs = batch.dec_self_segments();
        let cross_segs = batch.cross_segments();
        let mut dec_layers = Vec::with_capacity(self.decoder.len());
        for l in &self.decoder {
            let (a, ln1) = l.ln1.forward(s, &y);
            let (mut sa, self_attn) = l
                .self_attn
                .forward_packed(s, &a, &a, &self_segs, None, true);
            let drop1 = dropout(&mut sa, p, rng.as_deref_mut());
            y.add_assign(&sa);
            let (c, ln2) = l.ln2.forward(s, &y);
            let (mut ca, cross) = l.cross_attn.forward_packed(
                s,
                &c,
                &memory,
                &cross_segs,
                Some(&batch.enc_valid),
                false,
            );
            let drop2 = dropout(&mut ca, p, rng.as_deref_mut());
            y.add_assign(&ca);
            let (f, ln3) = l.ln3.forward(s, &y);
            let (mut fo, ff) = l.ff.forward(s, &f);
            let drop3 = dropout(&mut fo, p, rng.as_deref_mut());
            y.add_assign(&fo);
            dec_layers.push(DecLayerCache {
                ln1,
                a,
                self_attn,
                drop1,
                ln2,
                c,
                cross,
                drop2,
                ln3,
                f,
                ff,
                drop3,
            });
        }
        let (dec_out, dec_norm) = self.dec_norm.forward(s, &y);
        let logits = self.out.forward(s, &dec_out);
        (
            logits,
            ForwardCache {
                enc_drop,
                enc_layers,
                enc_norm,
                memory,
                dec_drop,
                dec_layers,
                dec_norm,
                dec_out,
            },
        )
    }

    /// Accumulate parameter gradients given `∂loss/∂logits`.
    pub fn backward_batch(
        &self,
        batch: &PackedBatch,
        cache: &ForwardCache,
        dlogits: &Mat,
        grads: &mut Grads,
    ) {
        let s = &self.store;
        let dh = self
            .out
            .backward(s, grads, &cache.dec_out, dlogits, true)
            .unwrap();
        let mut dy = self.dec_norm.backward(s, grads, &cache.dec_norm, &dh);
        let mut dmemory = Mat::zeros(cache.memory.rows, cache.memory.cols);
        for (l, c) in self.decoder.iter().zip(&cache.dec_layers).rev() {
            let dfo = dropout_backward(&dy, &c.drop3);
            let df = l.ff.backward(s, grads, &c.f, &c.ff, &dfo);
            dy.add_assign(&l.ln3.backward(s, grads, &c.ln3, &df));

            let dca = dropout_backward(&dy, &c.drop2);
            let (dc, dmem) = l
                .cross_attn
                .backward(s, grads, &c.c, &cache.memory, &c.cross, &dca);
            dmemory.add_assign(&dmem);
            dy.add_assign(&l.ln2.backward(s, grads, &c.ln2, &dc));

            let dsa = dropout_backward(&dy, &c.drop1);
            let (mut da, dkv) = l
                .self_attn
                .backward(s, grads, &c.a, &c.a, &c.self_attn, &dsa);
            da.add_assign(&dkv);
            dy.add_assign(&l.ln1.backward(s, grads, &c.ln1, &da));
        }
        let dy = dropout_backward(&dy, &cache.dec_drop);
        self.embed_backward(grads, &batch.dec_tokens, &batch.dec_pos, self.dec_pos, &dy);

        let mut dx = self.enc_norm.backward(s, grads, &cache.enc_norm, &dmemory);
        for (l, c) in self.encoder.iter().zip(&cache.enc_layers).rev() {
            let df = dropout_backward(&dx, &c.drop2);
            let db = l.ff.backward(s, grads, &c.b, &c.ff, &df);
            dx.add_assign(&l.ln2.backward(s, grads, &c.ln2, &db));

            let datt = dropout_backward(&dx, &c.drop1);
            let (mut da, dkv) = l.attn.backward(s, grads, &c.a, &c.a, &c.attn, &datt);
            da.add_assign(&dkv);
            dx.add_assign(&l.ln1.backward(s, grads, &c.ln1, &da));
        }
        let dx = dropout_backward(&dx, &cache.enc_drop);
        self.embed_backward(grads, &batch.enc_tokens, &batch.enc_pos, self.enc_pos, &dx);
    }

    /// Evaluation-mode logits: row `j` scores the token following `target_prefix[..j]`.
    pub fn forward_logits(&self, input: &[TokenId], target_prefix: &[TokenId]) -> Result<Mat> {
        let batch = PackedBatch::from_pairs(&self.config, &[(input, target_prefix)])?;
        let (logits, _) = self.forward_batch(&batch, None);
        finite(logits, "forward")
    }

    /// `Σ_j log p(target[j] | input, target[..j])`, EOS included.
    pub fn sequence_log_prob(&self, input: &[TokenId], target: &[TokenId]) -> Result<f64> {
        Ok(self.sequence_log_probs(&[(input, target)])?[0])
    }

    /// Batched [`Self::sequence_log_prob`].
    pub fn sequence_log_probs(&self, pairs: &[(&[TokenId], &[TokenId])]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = PackedBatch::from_pairs(&self.config, pairs)?;
        self.score_batch(&batch)
    }

    /// Sequence log-probabilities of every target in `batch`.
    pub fn score_batch(&self, batch: &PackedBatch) -> Result<Vec<f64>> {
        let (logits, _) = self.forward_batch(batch, None);
        let logits = finite(logits, "score")?;
        Ok(batch
            .target_rows()
            .map(|rows| {
                rows.map(|r| log_softmax(logits.row(r))[batch.targets[r] as usize])
                    .sum::<f64>()
            })
            .collect())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let c = &self.config;
        let mut t = vec![
            NamedTensor::scalar("config.vocab_size", c.vocab_size as f32),
            NamedTensor::scalar("config.d_model", c.d_model as f32),
            NamedTensor::scalar("config.n_heads", c.n_heads as f32),
            NamedTensor::scalar("config.n_layers_enc", c.n_layers_enc as f32),
            NamedTensor::scalar("config.n_layers_dec", c.n_layers_dec as f32),
            NamedTensor::scalar("config.d_ff", c.d_ff as f32),
            NamedTensor::scalar("config.max_positions", c.max_positions as f32),
            NamedTensor::scalar("config.dropout", c.dropout as f32),
        ];
        t.extend(self.store.to_tensors());
        t
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let s = |n: &str| checkpoint::scalar(tensors, n);
        let config = ModelConfig {
            vocab_size: s("config.vocab_size")? as usize,
            d_model: s("config.d_model")? as usize,
            n_heads: s("config.n_heads")? as usize,
            n_layers_enc: s("config.n_layers_enc")? as usize,
            n_layers_dec: s("config.n_layers_dec")? as usize,
            d_ff: s("config.d_ff")? as usize,
            max_positions: s("config.max_positions")? as usize,
            dropout: s("config.dropout")? as f64,
            seed: 0,
        };
        let mut model = GenRecModel::new(config)?;
        model.store.load_tensors(tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }
}

fn finite(m: Mat, stage: &'static str) -> Result<Mat> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Numeric {
            stage,
            detail: "non-finite logits".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 12,
            max_positions: 12,
            dropout: 0.1,
            seed: 3,
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<TokenId> {
        (0..n)
            .map(|_| rng.random_range(1..vocab as TokenId))
            .collect()
    }

    #[test]
    fn softmax_rows_normalize() {
        let m = GenRecModel::new(tiny(20)).unwrap();
        let logits = m.forward_logits(&[1, 5, 6, 7], &[3, 4, 2]).unwrap();
        assert_eq!((logits.rows, logits.cols), (3, 20));
        for r in 0..3 {
            let s: f64 = log_softmax(logits.row(r)).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causality_under_prefix_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = GenRecModel::new(tiny(20)).unwrap();
        for _ in 0..20 {
            let input = random_tokens(&mut rng, 5, 20);
            let target = random_tokens(&mut rng, 6, 20);
            let base = m.forward_logits(&input, &target).unwrap();
            let j = rng.random_range(0..6);
            let mut changed = target.clone();
            changed[j] = (changed[j] % 19) + 1;
            let pert = m.forward_logits(&input, &changed).unwrap();
            for r in 0..=j {
                assert_eq!(
                    base.row(r),
                    pert.row(r),
                    "row {r} changed after perturbing {j}"
                );
            }
        }
    }

    #[test]
    fn padded_positions_are_ignored() {
        let m = GenRecModel::new(tiny(20)).unwrap();
        let a = m.forward_logits(&[1, 5, 6, 0, 0], &[3, 4, 2]).unwrap();
        let b = m
            .forward_logits(&[1, 5, 6, 0, 0, 0, 0], &[3, 4, 2])
            .unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_length_times_log_vocab() {
        let mut m = GenRecModel::new(tiny(17)).unwrap();
        let (w, b) = m.output_params();
        m.store.get_mut(w).value.iter_mut().for_each(|v| *v = 0.0);
        m.store.get_mut(b).value.iter_mut().for_each(|v| *v = 0.0);
        let lp = m.sequence_log_prob(&[1, 4, 5], &[6, 7, 8, 2]).unwrap();
        assert_eq!(lp, -4.0 * (17f64).ln());
    }

    #[test]
    fn log_prob_is_sum_of_rows_and_batches_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = GenRecModel::new(tiny(20)).unwrap();
        let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..4)
            .map(|i| {
                (
                    random_tokens(&mut rng, 3 + i, 20),
                    random_tokens(&mut rng, 2 + i, 20),
                )
            })
            .collect();
        let refs: Vec<(&[TokenId], &[TokenId])> = pairs
            .iter()
            .map(|(a, b)| (a.as_slice(), b.as_slice()))
            .collect();
        let batched = m.sequence_log_probs(&refs).unwrap();
        for ((inp, tgt), lp) in pairs.iter().zip(&batched) {
            let logits = m.forward_logits(inp, tgt).unwrap();
            let manual: f64 = (0..tgt.len())
                .map(|j| log_softmax(logits.row(j))[tgt[j] as usize])
                .sum();
            assert!((manual - lp).abs() < 1e-10);
            assert!(*lp <= 0.0);
        }
    }

    #[test]
    fn overlong_input_is_shape_error() {
        let m = GenRecModel::new(tiny(20)).unwrap();
        let long = vec![1; 13];
        assert!(matches!(
            m.forward_logits(&long, &[2]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.forward_logits(&[1], &[25]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn checkpoint_forward_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rgck");
        let m = GenRecModel::new(tiny(20)).unwrap();
        m.save(&p).unwrap();
        let back = GenRecModel::load(&p).unwrap();
        let a = m.forward_logits(&[1, 3, 4], &[5, 6, 2]).unwrap();
        let b = back.forward_logits(&[1, 3, 4], &[5, 6, 2]).unwrap();
        assert_eq!(a, b);
    }
}
