//! Incremental causal decoding with per-sequence key/value caches.

use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{gelu, gelu_tanh, layer_norm, linear, softmax_in_place};
use super::transformer::{add_linear, Packed, Transformer};
use super::Scalar;
use crate::error::{arg_err, CoreError, Result};

/// Keys and values of every processed position, per layer (`len x width`).
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F> Default for KvCache<F> {
    fn default() -> Self {
        KvCache { keys: Vec::new(), values: Vec::new(), len: 0 }
    }
}

impl<F> KvCache<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<F: Scalar> Transformer<F> {
    /// Runs the prompt through the network and returns its cache together
    /// with the next-token logits after the last prompt token.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(KvCache<F>, Vec<F>)> {
        if !self.kind().causal() {
            return arg_err("incremental decoding needs a causal model");
        }
        let acts = self.forward(&Packed::new([prompt]))?;
        let d = self.config().width;
        let n = prompt.len();
        let mut cache = KvCache { keys: Vec::new(), values: Vec::new(), len: n };
        for l in 0..self.config().layers {
            let qkv = acts.qkv(l);
            let mut k = Vec::with_capacity(n * d);
            let mut v = Vec::with_capacity(n * d);
            for r in 0..n {
                k.extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                v.extend_from_slice(&qkv[r * 3 * d + 2 * d..r * 3 * d + 3 * d]);
            }
            cache.keys.push(k);
            cache.values.push(v);
        }
        let logits = self.head_logits(&acts.hidden, &[n - 1]);
        Ok((cache, logits))
    }

    /// Appends one token to each cache and returns the next-token logits,
    /// `caches.len() x vocab`.
    pub fn decode_step(&self, caches: &mut [KvCache<F>], tokens: &[u32]) -> Result<Vec<F>> {
        assert_eq!(caches.len(), tokens.len());
        let cfg = self.config();
        let (d, f) = (cfg.width, cfg.ff_width);
        let dh = d / cfg.heads;
        let b = tokens.len();
        if let Some(c) = caches.iter().find(|c| c.len >= cfg.context) {
            return Err(CoreError::Length { needed: c.len + 1, limit: cfg.context });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return arg_err(alloc::format!("token id {t} outside vocabulary of {}", cfg.vocab));
        }

        let mut x = vec![F::zero(); b * d];
        for (i, (&t, c)) in tokens.iter().zip(caches.iter()).enumerate() {
            self.embed(t, c.len, &mut x[i * d..(i + 1) * d]);
        }
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut scores = Vec::new();
        for l in 0..cfg.layers {
            let lp = self.layer_params(l);
            let (h1, _) = layer_norm(&x, lp.ln1_g, lp.ln1_b, false);
            let mut qkv = vec![F::zero(); b * 3 * d];
            linear(&h1, lp.qkv_w, lp.qkv_b, b, d, &mut qkv);
            let mut attn = vec![F::zero(); b * d];
            for (i, c) in caches.iter_mut().enumerate() {
                let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
                c.keys[l].extend_from_slice(&row[d..2 * d]);
                c.values[l].extend_from_slice(&row[2 * d..]);
                let len = c.len + 1;
                for hd in 0..cfg.heads {
                    let q = &row[hd * dh..(hd + 1) * dh];
                    scores.clear();
                    scores.extend((0..len).map(|t| {
                        let k = &c.keys[l][t * d + hd * dh..t * d + (hd + 1) * dh];
                        q.iter().zip(k).map(|(&a, &b)| a * b).sum::<F>() * scale
                    }));
                    softmax_in_place(&mut scores);
                    let out = &mut attn[i * d + hd * dh..i * d + (hd + 1) * dh];
                    for (t, &p) in scores.iter().enumerate() {
                        let v = &c.values[l][t * d + hd * dh..t * d + (hd + 1) * dh];
                        out.iter_mut().zip(v).for_each(|(o, &vv)| *o += p * vv);
                    }
                }
            }
            add_linear(&attn, lp.proj_w, lp.proj_b, b, d, &mut x);
            let (h2, _) = layer_norm(&x, lp.ln2_g, lp.ln2_b, false);
            let mut u = vec![F::zero(); b * f];
            linear(&h2, lp.fc_w, lp.fc_b, b, d, &mut u);
            u.iter_mut().for_each(|v| *v = gelu(*v, gelu_tanh(*v)));
            add_linear(&u, lp.out_w, lp.out_b, b, f, &mut x);
        }
        for c in caches.iter_mut() {
            c.len += 1;
        }
        let (g, beta) = self.final_norm();
        let (hidden, _) = layer_norm(&x, g, beta, false);
        Ok(self.head_rows(&hidden, b))
    }
}
