//! Differentiable building blocks with explicit forward caches and backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Mat};

/// Affine map `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), vec![fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| {
            store.add(
                format!("{name}.b"),
                vec![fan_out],
                vec![0.0; fan_out],
                false,
            )
        });
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.fan_in, "linear: input width");
        let mut y = Mat::zeros(x.rows, self.fan_out);
        if let Some(b) = self.b {
            let b = store.value(b);
            for r in 0..y.rows {
                y.row_mut(r).copy_from_slice(b);
            }
            gemm(1.0, x.view(), store.mat(self.w), 1.0, y.view_mut());
        } else {
            gemm(1.0, x.view(), store.mat(self.w), 0.0, y.view_mut());
        }
        y
    }

    /// Accumulates parameter gradients; returns `dx` when `need_dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &Mat,
        dy: &Mat,
        need_dx: bool,
    ) -> Option<Mat> {
        gemm(
            1.0,
            x.view().t(),
            dy.view(),
            1.0,
            grads.mat_mut(self.w, self.fan_in, self.fan_out),
        );
        if let Some(b) = self.b {
            let gb = grads.get_mut(b);
            for r in 0..dy.rows {
                for (g, d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += *d;
                }
            }
        }
        need_dx.then(|| {
            let mut dx = Mat::zeros(dy.rows, self.fan_in);
            gemm(1.0, dy.view(), store.mat(self.w).t(), 0.0, dx.view_mut());
            dx
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Silu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }

    pub fn forward(self, x: &Mat) -> Mat {
        Mat::from_vec(
            x.rows,
            x.cols,
            x.data.iter().map(|&v| self.apply(v)).collect(),
        )
    }

    /// `dy ⊙ f'(pre)`.
    pub fn backward(self, pre: &Mat, dy: &Mat) -> Mat {
        Mat::from_vec(
            pre.rows,
            pre.cols,
            pre.data
                .iter()
                .zip(&dy.data)
                .map(|(&p, &d)| d * self.derivative(p))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![dim], vec![1.0; dim], false);
        let beta = store.add(format!("{name}.beta"), vec![dim], vec![0.0; dim], false);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> (Mat, LayerNormCache) {
        let g = store.value(self.gamma);
        let b = store.value(self.beta);
        let n = self.dim as f64;
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (j, v) in row.iter().enumerate() {
                xh[j] = (v - mean) * is;
            }
            let yr = y.row_mut(r);
            for j in 0..self.dim {
                yr[j] = xh[j] * g[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &LayerNormCache,
        dy: &Mat,
    ) -> Mat {
        let g = store.value(self.gamma).to_vec();
        let n = self.dim as f64;
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        {
            let gg = grads.get_mut(self.gamma);
            for r in 0..dy.rows {
                for j in 0..self.dim {
                    gg[j] += dy.get(r, j) * cache.xhat.get(r, j);
                }
            }
        }
        {
            let gb = grads.get_mut(self.beta);
            for r in 0..dy.rows {
                for (j, d) in dy.row(r).iter().enumerate() {
                    gb[j] += *d;
                }
            }
        }
        for r in 0..dy.rows {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for j in 0..self.dim {
                let dxh = dyr[j] * g[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[j];
            }
            let is = cache.inv_std[r];
            let dxr = dx.row_mut(r);
            for j in 0..self.dim {
                let dxh = dyr[j] * g[j];
                dxr[j] = is * (dxh - sum_dxh / n - xh[j] * sum_dxh_xh / n);
            }
        }
        dx
    }
}

/// In-place numerically stable softmax of one row; `-inf` entries get probability 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// `false` marks a padded key.
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` sees keys `0..=i` only.
    pub causal: bool,
}

/// One sequence inside a packed batch: query rows attend to key rows of the
/// same segment only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

pub struct AttentionCache {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    segments: Vec<Segment>,
    /// Per segment and head attention probabilities, `q_len × k_len`.
    probs: Vec<Mat>,
    concat: Mat,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must be divisible by n_heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            n_heads,
            d_model,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Attention over precomputed projections of a packed batch.
    ///
    /// `key_valid` is indexed by packed key row; `causal` compares positions
    /// relative to each segment's start.
    pub fn attend_packed(
        &self,
        store: &ParamStore,
        q: Mat,
        k: Mat,
        v: Mat,
        segments: &[Segment],
        key_valid: Option<&[bool]>,
        causal: bool,
    ) -> (Mat, AttentionCache) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Mat::zeros(q.rows, self.d_model);
        let mut probs = Vec::with_capacity(segments.len() * self.n_heads);
        for seg in segments {
            for h in 0..self.n_heads {
                let mut s = Mat::zeros(seg.q_len, seg.k_len);
                gemm(
                    scale,
                    q.block(seg.q_start, seg.q_len, h * dh, dh),
                    k.block(seg.k_start, seg.k_len, h * dh, dh).t(),
                    0.0,
                    s.view_mut(),
                );
                for i in 0..seg.q_len {
                    let row = s.row_mut(i);
                    for (j, v) in row.iter_mut().enumerate() {
                        let masked =
                            (causal && j > i) || key_valid.is_some_and(|kv| !kv[seg.k_start + j]);
                        if masked {
                            *v = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(
                    1.0,
                    s.view(),
                    v.block(seg.k_start, seg.k_len, h * dh, dh),
                    0.0,
                    concat.block_mut(seg.q_start, seg.q_len, h * dh, dh),
                );
                probs.push(s);
            }
        }
        let out = self.o.forward(store, &concat);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                segments: segments.to_vec(),
                probs,
                concat,
            },
        )
    }

    pub fn forward_packed(
        &self,
        store: &ParamStore,
        xq: &Mat,
        xkv: &Mat,
        segments: &[Segment],
        key_valid: Option<&[bool]>,
        causal: bool,
    ) -> (Mat, AttentionCache) {
        let q = self.q.forward(store, xq);
        let k = self.k.forward(store, xkv);
        let v = self.v.forward(store, xkv);
        self.attend_packed(store, q, k, v, segments, key_valid, causal)
    }

    /// Single-sequence attention.
    pub fn forward(
        &self,
        store: &ParamStore,
        xq: &Mat,
        xkv: &Mat,
        mask: &AttnMask,
    ) -> (Mat, AttentionCache) {
        let seg = Segment {
            q_start: 0,
            q_len: xq.rows,
            k_start: 0,
            k_len: xkv.rows,
        };
        self.forward_packed(
            store,
            xq,
            xkv,
            &[seg],
            mask.key_valid.as_deref(),
            mask.causal,
        )
    }

    /// Returns `(dxq, dxkv)`. Segments may share key rows; their key/value
    /// gradients accumulate.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        xq: &Mat,
        xkv: &Mat,
        cache: &AttentionCache,
        dout: &Mat,
    ) -> (Mat, Mat) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self
            .o
            .backward(store, grads, &cache.concat, dout, true)
            .expect("dx requested");
        let mut dq = Mat::zeros(cache.q.rows, self.d_model);
        let mut dk = Mat::zeros(cache.k.rows, self.d_model);
        let mut dv = Mat::zeros(cache.k.rows, self.d_model);
        for (si, seg) in cache.segments.iter().enumerate() {
            for h in 0..self.n_heads {
                let p = &cache.probs[si * self.n_heads + h];
                let dout_h = dconcat.block(seg.q_start, seg.q_len, h * dh, dh);
                // dV_h += Pᵀ dO_h
                gemm(
                    1.0,
                    p.view().t(),
                    dout_h,
                    1.0,
                    dv.block_mut(seg.k_start, seg.k_len, h * dh, dh),
                );
                // dP = dO_h V_hᵀ
                let mut dp = Mat::zeros(seg.q_len, seg.k_len);
                gemm(
                    1.0,
                    dout_h,
                    cache.v.block(seg.k_start, seg.k_len, h * dh, dh).t(),
                    0.0,
                    dp.view_mut(),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..seg.q_len {
                    let pr = p.row(i);
                    let dr = dp.row_mut(i);
                    let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - s);
                    }
                }
                gemm(
                    scale,
                    dp.view(),
                    cache.k.block(seg.k_start, seg.k_len, h * dh, dh),
                    1.0,
                    dq.block_mut(seg.q_start, seg.q_len, h * dh, dh),
                );
                gemm(
                    scale,
                    dp.view().t(),
                    cache.q.block(seg.q_start, seg.q_len, h * dh, dh),
                    1.0,
                    dk.block_mut(seg.k_start, seg.k_len, h * dh, dh),
                );
            }
        }
        let dxq = self.q.backward(store, grads, xq, &dq, true).unwrap();
        let mut dxkv = self.k.backward(store, grads, xkv, &dk, true).unwrap();
        dxkv.add_assign(&self.v.backward(store, grads, xkv, &dv, true).unwrap());
        (dxq, dxkv)
    }
}

/// Position-wise feed-forward block `W2 · act(W1 x)`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

pub struct FeedForwardCache {
    pre: Mat,
    hidden: Mat,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_model, d_ff, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d_ff, d_model, true, rng),
            act,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> (Mat, FeedForwardCache) {
        let pre = self.fc1.forward(store, x);
        let hidden = self.act.forward(&pre);
        let out = self.fc2.forward(store, &hidden);
        (out, FeedForwardCache { pre, hidden })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &Mat,
        cache: &FeedForwardCache,
        dout: &Mat,
    ) -> Mat {
        let dh = self
            .fc2
            .backward(store, grads, &cache.hidden, dout, true)
            .unwrap();
        let dpre = self.act.backward(&cache.pre, &dh);
        self.fc1.backward(store, grads, x, &dpre, true).unwrap()
    }
}

/// Inverted dropout; returns the per-element scale mask (`None` when inactive).
pub fn dropout<R: Rng>(x: &mut Mat, p: f64, rng: Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.data.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    for (v, m) in x.data.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Some(mask)
}

pub fn dropout_backward(dy: &Mat, mask: &Option<Vec<f64>>) -> Mat {
    match mask {
        None => dy.clone(),
        Some(m) => Mat::from_vec(
            dy.rows,
            dy.cols,
            dy.data.iter().zip(m).map(|(d, k)| d * k).collect(),
        ),
    }
}
