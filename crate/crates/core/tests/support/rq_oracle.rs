//! Loop-based reference for the tokenizer objective and its gradient.
//!
//! The surrogate freezes every stop-gradient quantity at the current
//! parameters: the chosen codes, the residuals seen by the code term, the
//! codewords seen by the commit term and the straight-through offset `ĥ − h`.
//! Its value equals the real loss at that point and its true gradient is what
//! the backward pass should produce.

use ragr_core::nn::Activation;
use ragr_core::params::ParamStore;
use ragr_core::rqvae::{RecTarget, RqVaeConfig, RqVaeModel};
use ragr_core::tensor::Mat;

struct Layer {
    w: String,
    b: String,
    fan_in: usize,
    fan_out: usize,
}

fn layers(prefix: &str, dims: &[usize]) -> Vec<Layer> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| Layer {
            w: format!("{prefix}.{i}.w"),
            b: format!("{prefix}.{i}.b"),
            fan_in: w[0],
            fan_out: w[1],
        })
        .collect()
}

fn val<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.value(store.find(name).unwrap())
}

fn mlp(store: &ParamStore, ls: &[Layer], act: Activation, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (n, l) in ls.iter().enumerate() {
        let w = val(store, &l.w);
        let b = val(store, &l.b);
        let mut out = vec![0.0; l.fan_out];
        for j in 0..l.fan_out {
            let mut s = b[j];
            for i in 0..l.fan_in {
                s += cur[i] * w[i * l.fan_out + j];
            }
            out[j] = if n + 1 < ls.len() { act.apply(s) } else { s };
        }
        cur = out;
    }
    cur
}

pub struct Frozen {
    codes: Vec<usize>,
    residuals: Vec<Vec<f64>>,
    codewords: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

pub struct Oracle {
    cfg: RqVaeConfig,
    enc: Vec<Layer>,
    dec: Vec<Layer>,
}

impl Oracle {
    pub fn new(cfg: &RqVaeConfig) -> Self {
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.code_dim);
        let rev: Vec<usize> = dims.iter().rev().copied().collect();
        Oracle {
            cfg: cfg.clone(),
            enc: layers("encoder", &dims),
            dec: layers("decoder", &rev),
        }
    }

    fn codeword(&self, store: &ParamStore, level: usize, k: usize) -> Vec<f64> {
        let d = self.cfg.code_dim;
        val(store, &format!("codebook.{}", level + 1))[k * d..(k + 1) * d].to_vec()
    }

    pub fn freeze(&self, store: &ParamStore, x: &[f64]) -> Frozen {
        let h = mlp(store, &self.enc, self.cfg.activation, x);
        let d = self.cfg.code_dim;
        let mut r = h.clone();
        let (mut codes, mut residuals, mut codewords) = (vec![], vec![], vec![]);
        let mut hhat = vec![0.0; d];
        for m in 0..self.cfg.levels {
            let mut best = (0, f64::INFINITY);
            for k in 0..self.cfg.codebook_size {
                let c = self.codeword(store, m, k);
                let dist: f64 = r.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            let c = self.codeword(store, m, best.0);
            residuals.push(r.clone());
            for j in 0..d {
                r[j] -= c[j];
                hhat[j] += c[j];
            }
            codes.push(best.0);
            codewords.push(c);
        }
        let offset = hhat.iter().zip(&h).map(|(a, b)| a - b).collect();
        Frozen {
            codes,
            residuals,
            codewords,
            offset,
        }
    }

    pub fn surrogate(&self, store: &ParamStore, x: &[f64], f: &Frozen) -> f64 {
        let d = self.cfg.code_dim;
        let h = mlp(store, &self.enc, self.cfg.activation, x);
        let live: Vec<Vec<f64>> = (0..self.cfg.levels)
            .map(|m| self.codeword(store, m, f.codes[m]))
            .collect();
        let rec = match self.cfg.rec_target {
            RecTarget::Input => {
                let z: Vec<f64> = h.iter().zip(&f.offset).map(|(a, b)| a + b).collect();
                let out = mlp(store, &self.dec, self.cfg.activation, &z);
                x.iter()
                    .zip(&out)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            RecTarget::Latent => (0..d)
                .map(|j| {
                    let s: f64 = live.iter().map(|c| c[j]).sum();
                    (h[j] - s) * (h[j] - s)
                })
                .sum(),
        };
        let mut code = 0.0;
        let mut commit = 0.0;
        let mut r = h.clone();
        for m in 0..self.cfg.levels {
            for j in 0..d {
                code += (f.residuals[m][j] - live[m][j]).powi(2);
                commit += (r[j] - f.codewords[m][j]).powi(2);
            }
            for j in 0..d {
                r[j] -= live[m][j];
            }
        }
        rec + code + self.cfg.beta_commit * commit
    }
}

/// Worst relative error `|a − n| / max(|a|, |n|, floor)` between the
/// analytic gradient of the mean loss over the rows of `x` and central
/// differences of the frozen surrogate, plus the gap between surrogate and
/// reported loss.
pub fn gradient_error(model: &mut RqVaeModel, x: &Mat, step: f64, floor: f64) -> (f64, f64) {
    let (parts, grads) = model.loss_and_grad(x).unwrap();
    let oracle = Oracle::new(&model.config);
    let frozen: Vec<Frozen> = (0..x.rows)
        .map(|i| oracle.freeze(&model.store, x.row(i)))
        .collect();
    let mean = |store: &ParamStore| -> f64 {
        (0..x.rows)
            .map(|i| oracle.surrogate(store, x.row(i), &frozen[i]))
            .sum::<f64>()
            / x.rows as f64
    };
    let gap = (mean(&model.store) - parts.total).abs();
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst: f64 = 0.0;
    for (p, &id) in ids.iter().enumerate() {
        for j in 0..model.store.get(id).value.len() {
            let orig = model.store.get(id).value[j];
            model.store.get_mut(id).value[j] = orig + step;
            let up = mean(&model.store);
            model.store.get_mut(id).value[j] = orig - step;
            let down = mean(&model.store);
            model.store.get_mut(id).value[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.data[p][j];
            worst = worst
                .max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor));
        }
    }
    (worst, gap)
}
