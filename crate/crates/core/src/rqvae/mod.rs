//! Residual-quantization autoencoder that turns text embeddings into
//! multi-level semantic IDs.
//!
//! The encoder MLP maps an embedding to a latent `h`; `M` codebooks quantize
//! it coarse-to-fine, each level picking the codeword nearest to the residual
//! left by the previous levels. The training objective is
//! `rec + code + beta · commit`, where
//!
//! * `rec` is `‖e − dec(ĥ)‖²` with a straight-through estimator
//!   ([`RecTarget::Input`], default) or the latent form `‖h − ĥ‖²`
//!   ([`RecTarget::Latent`]),
//! * `code = Σ_m ‖sg[r⁽ᵐ⁻¹⁾] − c⁽ᵐ⁾‖²` moves codewords toward residuals,
//! * `commit = Σ_m ‖r⁽ᵐ⁻¹⁾ − sg[c⁽ᵐ⁾]‖²` moves residuals toward codewords.

mod kmeans;
mod sid;
mod train;

pub use kmeans::kmeans_init;
pub use sid::{
    assign_sids, collision_rate, disambiguate_collisions, max_disambig, read_sid_map,
    write_sid_map, SemanticId, SidMap,
};
pub use train::{train_tokenizer, LossParts, TokenizerTrainConfig, TrainedTokenizer};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{sq_dist, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RecTarget {
    /// Reconstruct the input embedding through the decoder.
    #[default]
    Input,
    /// Reconstruct the encoder latent from the summed codewords.
    Latent,
}

impl std::str::FromStr for RecTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "input" => Ok(RecTarget::Input),
            "latent" => Ok(RecTarget::Latent),
            other => Err(format!(
                "unknown rec_target {other:?} (expected input|latent)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqVaeConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub beta_commit: f64,
    pub rec_target: RecTarget,
    pub activation: Activation,
}

impl RqVaeConfig {
    /// Full-scale geometry: six hidden layers, 4 × 256 codewords of dim 32.
    pub fn full_scale(input_dim: usize) -> Self {
        RqVaeConfig {
            input_dim,
            hidden: vec![2048, 1024, 512, 256, 128, 64],
            code_dim: 32,
            levels: 4,
            codebook_size: 256,
            beta_commit: 0.25,
            rec_target: RecTarget::Input,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.code_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(
                "tokenizer layer widths must be positive".into(),
            ));
        }
        if self.levels == 0 {
            return Err(Error::Config("tokenizer needs at least one level".into()));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        if !(self.beta_commit >= 0.0) {
            return Err(Error::Config("beta_commit must be non-negative".into()));
        }
        Ok(())
    }
}

/// One quantization level: `K × d_code` codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// 1-based level index.
    pub level: usize,
    pub codewords: Mat,
}

impl Codebook {
    pub fn new(level: usize, codewords: Mat) -> Self {
        Codebook { level, codewords }
    }

    pub fn len(&self) -> usize {
        self.codewords.rows
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.rows == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    pub codes: Vec<usize>,
    /// `r⁽⁰⁾ = h` through `r⁽ᴹ⁾`.
    pub residuals: Vec<Vec<f64>>,
    /// Sum of the selected codewords.
    pub quantized: Vec<f64>,
}

/// Index of the nearest row; ties resolve to the smallest index.
pub(crate) fn nearest(book: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in book.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn quantize_raw(books: &[&[f64]], dim: usize, h: &[f64]) -> QuantizeResult {
    let mut residuals = Vec::with_capacity(books.len() + 1);
    residuals.push(h.to_vec());
    let mut codes = Vec::with_capacity(books.len());
    let mut quantized = vec![0.0; dim];
    for book in books {
        let r = residuals.last().unwrap();
        let (k, _) = nearest(book, dim, r);
        let c = &book[k * dim..(k + 1) * dim];
        let next: Vec<f64> = r.iter().zip(c).map(|(a, b)| a - b).collect();
        for (q, v) in quantized.iter_mut().zip(c) {
            *q += *v;
        }
        codes.push(k);
        residuals.push(next);
    }
    QuantizeResult {
        codes,
        residuals,
        quantized,
    }
}

/// Greedy residual quantization of `h` through `codebooks` in order.
pub fn quantize(codebooks: &[Codebook], h: &[f64]) -> Result<QuantizeResult> {
    for b in codebooks {
        if b.is_empty() {
            return Err(Error::Config(format!(
                "codebook at level {} is empty",
                b.level
            )));
        }
        if b.codewords.cols != h.len() {
            return Err(Error::Shape(format!(
                "codebook {} has dim {}, latent has {}",
                b.level,
                b.codewords.cols,
                h.len()
            )));
        }
    }
    let books: Vec<&[f64]> = codebooks
        .iter()
        .map(|b| b.codewords.data.as_slice())
        .collect();
    Ok(quantize_raw(&books, h.len(), h))
}

#[derive(Clone, Debug)]
pub struct RqVaeModel {
    pub config: RqVaeConfig,
    pub store: ParamStore,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
    codebooks: Vec<ParamId>,
}

pub(crate) struct MlpCache {
    /// Inputs to each layer.
    inputs: Vec<Mat>,
    /// Pre-activations of each layer.
    pre: Vec<Mat>,
}

fn mlp_forward(store: &ParamStore, layers: &[Linear], act: Activation, x: &Mat) -> (Mat, MlpCache) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for (i, l) in layers.iter().enumerate() {
        let z = l.forward(store, &cur);
        inputs.push(cur);
        cur = if i + 1 < layers.len() {
            act.forward(&z)
        } else {
            z.clone()
        };
        pre.push(z);
    }
    (cur, MlpCache { inputs, pre })
}

fn mlp_backward(
    store: &ParamStore,
    grads: &mut Grads,
    layers: &[Linear],
    act: Activation,
    cache: &MlpCache,
    dout: &Mat,
) -> Mat {
    let mut d = dout.clone();
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            d = act.backward(&cache.pre[i], &d);
        }
        d = layers[i]
            .backward(store, grads, &cache.inputs[i], &d, true)
            .expect("dx requested");
    }
    d
}

/// Everything the backward pass needs from one batched forward pass.
pub(crate) struct TokenizerTrace {
    pub enc: MlpCache,
    pub h: Mat,
    pub quant: Vec<QuantizeResult>,
    pub hhat: Mat,
    pub dec: Option<(Mat, MlpCache)>,
}

impl RqVaeModel {
    pub fn new(config: RqVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        dims.push(config.code_dim);
        let encoder = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Linear::new(
                    &mut store,
                    &format!("encoder.{i}"),
                    w[0],
                    w[1],
                    true,
                    &mut rng,
                )
            })
            .collect();
        let rev: Vec<usize> = dims.iter().rev().copied().collect();
        let decoder = rev
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Linear::new(
                    &mut store,
                    &format!("decoder.{i}"),
                    w[0],
                    w[1],
                    true,
                    &mut rng,
                )
            })
            .collect();
        let codebooks = (0..config.levels)
            .map(|m| {
                let shape = vec![config.codebook_size, config.code_dim];
                let p = store.add_uniform(
                    format!("codebook.{}", m + 1),
                    shape,
                    config.code_dim,
                    &mut rng,
                );
                store.get_mut(p).decay = false;
                p
            })
            .collect();
        Ok(RqVaeModel {
            config,
            store,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[Linear] {
        &self.decoder
    }

    pub fn codebook_param(&self, level: usize) -> ParamId {
        self.codebooks[level - 1]
    }

    pub fn codebooks(&self) -> Vec<Codebook> {
        self.codebooks
            .iter()
            .enumerate()
            .map(|(m, &id)| {
                Codebook::new(
                    m + 1,
                    Mat::from_vec(
                        self.config.codebook_size,
                        self.config.code_dim,
                        self.store.value(id).to_vec(),
                    ),
                )
            })
            .collect()
    }

    pub fn set_codebook(&mut self, level: usize, codewords: &Mat) -> Result<()> {
        if (codewords.rows, codewords.cols) != (self.config.codebook_size, self.config.code_dim) {
            return Err(Error::Shape(format!(
                "codebook must be {}×{}, got {}×{}",
                self.config.codebook_size, self.config.code_dim, codewords.rows, codewords.cols
            )));
        }
        let id = self.codebooks[level - 1];
        self.store.get_mut(id).value = codewords.data.iter().map(|&v| v as f32 as f64).collect();
        Ok(())
    }

    fn book_slices(&self) -> Vec<&[f64]> {
        self.codebooks
            .iter()
            .map(|&id| self.store.value(id))
            .collect()
    }

    fn check_input(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "embedding has dim {}, encoder expects {}",
                e.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Encoder latent `h = g_enc(e)`.
    pub fn encode(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check_input(e)?;
        let x = Mat::from_vec(1, e.len(), e.to_vec());
        let (h, _) = mlp_forward(&self.store, &self.encoder, self.config.activation, &x);
        if !h.is_finite() {
            return Err(Error::Numeric {
                stage: "encode",
                detail: "non-finite latent".into(),
            });
        }
        Ok(h.data)
    }

    pub fn encode_batch(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.config.input_dim {
            return Err(Error::Shape(format!(
                "embeddings have dim {}, encoder expects {}",
                x.cols, self.config.input_dim
            )));
        }
        Ok(mlp_forward(&self.store, &self.encoder, self.config.activation, x).0)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.code_dim {
            return Err(Error::Shape(format!(
                "latent dim {} != {}",
                z.len(),
                self.config.code_dim
            )));
        }
        let x = Mat::from_vec(1, z.len(), z.to_vec());
        Ok(
            mlp_forward(&self.store, &self.decoder, self.config.activation, &x)
                .0
                .data,
        )
    }

    pub fn quantize(&self, h: &[f64]) -> Result<QuantizeResult> {
        quantize(&self.codebooks(), h)
    }

    pub(crate) fn quantize_fast(&self, h: &[f64]) -> QuantizeResult {
        quantize_raw(&self.book_slices(), self.config.code_dim, h)
    }

    pub(crate) fn forward_trace(&self, x: &Mat) -> Result<TokenizerTrace> {
        let (h, enc) = mlp_forward(&self.store, &self.encoder, self.config.activation, x);
        if !h.is_finite() {
            return Err(Error::Numeric {
                stage: "encode",
                detail: "non-finite latent".into(),
            });
        }
        let books = self.book_slices();
        let d = self.config.code_dim;
        let quant: Vec<QuantizeResult> = (0..h.rows)
            .map(|i| quantize_raw(&books, d, h.row(i)))
            .collect();
        let mut hhat = Mat::zeros(h.rows, d);
        for (i, q) in quant.iter().enumerate() {
            hhat.row_mut(i).copy_from_slice(&q.quantized);
        }
        let dec = match self.config.rec_target {
            RecTarget::Input => {
                let (out, cache) =
                    mlp_forward(&self.store, &self.decoder, self.config.activation, &hhat);
                if !out.is_finite() {
                    return Err(Error::Numeric {
                        stage: "decode",
                        detail: "non-finite reconstruction".into(),
                    });
                }
                Some((out, cache))
            }
            RecTarget::Latent => None,
        };
        Ok(TokenizerTrace {
            enc,
            h,
            quant,
            hhat,
            dec,
        })
    }

    /// Per-row loss parts of a traced batch.
    pub(crate) fn trace_losses(&self, x: &Mat, tr: &TokenizerTrace) -> Vec<LossParts> {
        let beta = self.config.beta_commit;
        let books = self.book_slices();
        let d = self.config.code_dim;
        (0..x.rows)
            .map(|i| {
                let rec = match &tr.dec {
                    Some((out, _)) => sq_dist(x.row(i), out.row(i)),
                    None => sq_dist(tr.h.row(i), tr.hhat.row(i)),
                };
                let q = &tr.quant[i];
                let mut code = 0.0;
                for (m, &k) in q.codes.iter().enumerate() {
                    code += sq_dist(&q.residuals[m], &books[m][k * d..(k + 1) * d]);
                }
                // identical in value; they differ only in gradient routing
                let commit = code;
                LossParts {
                    total: rec + code + beta * commit,
                    rec,
                    code,
                    commit,
                }
            })
            .collect()
    }

    /// Accumulate `scale · ∇ Σ_rows L_tok` into `grads`.
    pub(crate) fn backward_trace(
        &self,
        x: &Mat,
        tr: &TokenizerTrace,
        grads: &mut Grads,
        scale: f64,
    ) {
        let d = self.config.code_dim;
        let beta = self.config.beta_commit;
        let books = self.book_slices();
        let mut dh = Mat::zeros(tr.h.rows, d);
        let mut dbooks: Vec<Vec<f64>> = books.iter().map(|b| vec![0.0; b.len()]).collect();

        match &tr.dec {
            Some((out, cache)) => {
                let mut dout = Mat::zeros(out.rows, out.cols);
                for (g, (o, e)) in dout.data.iter_mut().zip(out.data.iter().zip(&x.data)) {
                    *g = scale * 2.0 * (o - e);
                }
                let dhhat = mlp_backward(
                    &self.store,
                    grads,
                    &self.decoder,
                    self.config.activation,
                    cache,
                    &dout,
                );
                // straight-through: ĥ behaves as h in the backward pass
                dh.add_assign(&dhhat);
            }
            None => {
                for i in 0..tr.h.rows {
                    let q = &tr.quant[i];
                    let diff: Vec<f64> =
                        tr.h.row(i)
                            .iter()
                            .zip(tr.hhat.row(i))
                            .map(|(a, b)| scale * 2.0 * (a - b))
                            .collect();
                    for (g, v) in dh.row_mut(i).iter_mut().zip(&diff) {
                        *g += v;
                    }
                    for (m, &k) in q.codes.iter().enumerate() {
                        for (g, v) in dbooks[m][k * d..(k + 1) * d].iter_mut().zip(&diff) {
                            *g -= v;
                        }
                    }
                }
            }
        }

        for i in 0..tr.h.rows {
            let q = &tr.quant[i];
            for (m, &k) in q.codes.iter().enumerate() {
                let r = &q.residuals[m];
                let c = &books[m][k * d..(k + 1) * d];
                // code term: gradient reaches the codeword only
                for j in 0..d {
                    dbooks[m][k * d + j] += scale * 2.0 * (c[j] - r[j]);
                }
                // commit term: gradient reaches r⁽ᵐ⁻¹⁾ = h − Σ_{l<m} c⁽ˡ⁾
                let dr: Vec<f64> = (0..d).map(|j| scale * beta * 2.0 * (r[j] - c[j])).collect();
                for (g, v) in dh.row_mut(i).iter_mut().zip(&dr) {
                    *g += v;
                }
                for (l, &kl) in q.codes[..m].iter().enumerate() {
                    for j in 0..d {
                        dbooks[l][kl * d + j] -= dr[j];
                    }
                }
            }
        }

        for (m, &id) in self.codebooks.iter().enumerate() {
            for (g, v) in grads.get_mut(id).iter_mut().zip(&dbooks[m]) {
                *g += v;
            }
        }
        mlp_backward(
            &self.store,
            grads,
            &self.encoder,
            self.config.activation,
            &tr.enc,
            &dh,
        );
    }

    /// `L_tok` and its parts for a single embedding.
    pub fn tokenizer_loss(&self, e: &[f64]) -> Result<LossParts> {
        self.check_input(e)?;
        let x = Mat::from_vec(1, e.len(), e.to_vec());
        let tr = self.forward_trace(&x)?;
        let parts = self.trace_losses(&x, &tr)[0];
        if !parts.total.is_finite() {
            return Err(Error::Numeric {
                stage: "loss",
                detail: format!("{parts:?}"),
            });
        }
        Ok(parts)
    }

    /// Mean loss over the rows of `x` and its gradient with stop-gradient and
    /// straight-through routing applied.
    pub fn loss_and_grad(&self, x: &Mat) -> Result<(LossParts, Grads)> {
        if x.cols != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch has dim {}, expected {}",
                x.cols, self.config.input_dim
            )));
        }
        let tr = self.forward_trace(x)?;
        let parts = LossParts::mean(&self.trace_losses(x, &tr));
        let mut grads = self.store.zero_grads();
        self.backward_trace(x, &tr, &mut grads, 1.0 / x.rows as f64);
        Ok((parts, grads))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let c = &self.config;
        let mut t = vec![
            NamedTensor::scalar("config.input_dim", c.input_dim as f32),
            NamedTensor::scalar("config.code_dim", c.code_dim as f32),
            NamedTensor::scalar("config.levels", c.levels as f32),
            NamedTensor::scalar("config.codebook_size", c.codebook_size as f32),
            NamedTensor::scalar("config.beta_commit", c.beta_commit as f32),
            NamedTensor::scalar(
                "config.rec_target",
                matches!(c.rec_target, RecTarget::Latent) as u8 as f32,
            ),
            NamedTensor::scalar(
                "config.activation",
                match c.activation {
                    Activation::Relu => 0.0,
                    Activation::Silu => 1.0,
                    Activation::Gelu => 2.0,
                },
            ),
            NamedTensor {
                name: "config.hidden".into(),
                dims: vec![c.hidden.len() as u32],
                data: c.hidden.iter().map(|&h| h as f32).collect(),
            },
        ];
        t.extend(self.store.to_tensors());
        t
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let s = |n: &str| checkpoint::scalar(tensors, n);
        let hidden = tensors
            .iter()
            .find(|t| t.name == "config.hidden")
            .ok_or_else(|| Error::Format("checkpoint lacks config.hidden".into()))?
            .data
            .iter()
            .map(|&h| h as usize)
            .collect();
        let config = RqVaeConfig {
            input_dim: s("config.input_dim")? as usize,
            hidden,
            code_dim: s("config.code_dim")? as usize,
            levels: s("config.levels")? as usize,
            codebook_size: s("config.codebook_size")? as usize,
            beta_commit: s("config.beta_commit")? as f64,
            rec_target: if s("config.rec_target")? == 1.0 {
                RecTarget::Latent
            } else {
                RecTarget::Input
            },
            activation: match s("config.activation")? as u8 {
                0 => Activation::Relu,
                1 => Activation::Silu,
                2 => Activation::Gelu,
                other => return Err(Error::Format(format!("unknown activation code {other}"))),
            },
        };
        let mut model = RqVaeModel::new(config, 0)?;
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
