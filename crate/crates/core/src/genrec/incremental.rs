//! Step-by-step decoding with cached keys and values, used by beam search.

use super::GenRecModel;
use crate::error::{Error, Result};
use crate::nn::Segment;
use crate::sequence::{TokenId, PAD};
use crate::tensor::Mat;

/// Encoder output projected once into every decoder layer's cross-attention
/// keys and values.
#[derive(Clone, Debug)]
pub struct EncodedContext {
    cross_kv: Vec<(Mat, Mat)>,
    valid: Vec<bool>,
}

/// Self-attention cache of one partial target sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderState {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl GenRecModel {
    /// Evaluation-mode encoding of `input`.
    pub fn encode_context(&self, input: &[TokenId]) -> Result<EncodedContext> {
        let cfg = &self.config;
        if input.is_empty() || input.len() > cfg.max_positions {
            return Err(Error::Shape(format!(
                "context length {} outside 1..={}",
                input.len(),
                cfg.max_positions
            )));
        }
        if let Some(&t) = input.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let s = &self.store;
        let n = input.len();
        let positions: Vec<usize> = (0..n).collect();
        let valid: Vec<bool> = input.iter().map(|&t| t != PAD).collect();
        let seg = [Segment {
            q_start: 0,
            q_len: n,
            k_start: 0,
            k_len: n,
        }];
        let mut x = self.embed(input, &positions, self.enc_pos);
        for l in &self.encoder {
            let (a, _) = l.ln1.forward(s, &x);
            let (att, _) = l.attn.forward_packed(s, &a, &a, &seg, Some(&valid), false);
            x.add_assign(&att);
            let (b, _) = l.ln2.forward(s, &x);
            let (f, _) = l.ff.forward(s, &b);
            x.add_assign(&f);
        }
        let (memory, _) = self.enc_norm.forward(s, &x);
        let cross_kv = self
            .decoder
            .iter()
            .map(|l| {
                (
                    l.cross_attn.k.forward(s, &memory),
                    l.cross_attn.v.forward(s, &memory),
                )
            })
            .collect();
        Ok(EncodedContext { cross_kv, valid })
    }

    pub fn new_decoder_state(&self) -> DecoderState {
        DecoderState {
            keys: vec![Vec::new(); self.decoder.len()],
            values: vec![Vec::new(); self.decoder.len()],
            len: 0,
        }
    }

    /// Feed `tokens[b]` to `states[b]` and return next-token logits, one row
    /// per state. All states must have consumed the same number of tokens.
    pub fn decode_step(
        &self,
        ctx: &EncodedContext,
        states: &mut [DecoderState],
        tokens: &[TokenId],
    ) -> Result<Mat> {
        let s = &self.store;
        let d = self.config.d_model;
        let b = tokens.len();
        if states.len() != b || b == 0 {
            return Err(Error::Shape(format!(
                "{} states for {} tokens",
                states.len(),
                b
            )));
        }
        let pos = states[0].len;
        if states.iter().any(|st| st.len != pos) {
            return Err(Error::Shape("decoder states are out of step".into()));
        }
        if pos >= self.config.max_positions {
            return Err(Error::Shape(format!(
                "decoder position {pos} exceeds max_positions"
            )));
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Shape(format!("token {t} outside vocabulary")));
        }
        let n = pos + 1;
        let mem_len = ctx.valid.len();
        let self_segs: Vec<Segment> = (0..b)
            .map(|i| Segment {
                q_start: i,
                q_len: 1,
                k_start: i * n,
                k_len: n,
            })
            .collect();
        let cross_segs: Vec<Segment> = (0..b)
            .map(|i| Segment {
                q_start: i,
                q_len: 1,
                k_start: 0,
                k_len: mem_len,
            })
            .collect();

        let mut y = self.embed(tokens, &vec![pos; b], self.dec_pos);
        for (li, l) in self.decoder.iter().enumerate() {
            let (a, _) = l.ln1.forward(s, &y);
            let q = l.self_attn.q.forward(s, &a);
            let k = l.self_attn.k.forward(s, &a);
            let v = l.self_attn.v.forward(s, &a);
            let mut ks = Mat::zeros(b * n, d);
            let mut vs = Mat::zeros(b * n, d);
            for (i, st) in states.iter_mut().enumerate() {
                st.keys[li].extend_from_slice(k.row(i));
                st.values[li].extend_from_slice(v.row(i));
                ks.data[i * n * d..(i + 1) * n * d].copy_from_slice(&st.keys[li]);
                vs.data[i * n * d..(i + 1) * n * d].copy_from_slice(&st.values[li]);
            }
            let (sa, _) = l
                .self_attn
                .attend_packed(s, q, ks, vs, &self_segs, None, false);
            y.add_assign(&sa);

            let (c, _) = l.ln2.forward(s, &y);
            let q = l.cross_attn.q.forward(s, &c);
            let (mk, mv) = &ctx.cross_kv[li];
            let (ca, _) = l.cross_attn.attend_packed(
                s,
                q,
                mk.clone(),
                mv.clone(),
                &cross_segs,
                Some(&ctx.valid),
                false,
            );
            y.add_assign(&ca);

            let (f, _) = l.ln3.forward(s, &y);
            let (fo, _) = l.ff.forward(s, &f);
            y.add_assign(&fo);
        }
        for st in states.iter_mut() {
            st.len += 1;
        }
        let (o, _) = self.dec_norm.forward(s, &y);
        super::finite(self.out.forward(s, &o), "decode")
    }
}
