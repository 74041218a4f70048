//! Pre-norm transformer over packed variable-length sequences.
//!
//! A batch is a list of token sequences laid end to end ([`Packed`]).
//! Position-wise layers run on the whole `N x width` activation matrix;
//! attention runs per sequence and head, so no padding is ever needed.
//! Generators attend causally and project every position onto the
//! vocabulary; rankers attend bidirectionally and mean-pool the final states
//! into a two-way head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand_distr::{Distribution, Normal};

use super::linalg::{gelu_tanh, gemm, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place};
use super::linalg::{LnCache, MatMut, MatRef};
use super::Scalar;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use crate::error::{arg_err, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ModelKind {
    /// Causal language model with a vocabulary-sized head.
    Generator,
    /// Bidirectional encoder with a mean-pooled two-way head.
    Ranker,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Generator => "generator",
            ModelKind::Ranker => "ranker",
        }
    }

    pub fn causal(self) -> bool {
        matches!(self, ModelKind::Generator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    /// Maximum sequence length, also the number of learned positions.
    pub context: usize,
    pub vocab: usize,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128, feed-forward 512, 128 positions.
    pub fn default_for_vocab(vocab: usize) -> Self {
        ModelConfig { layers: 4, heads: 4, width: 128, ff_width: 512, context: 128, vocab }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.ff_width == 0 {
            return arg_err("layer, head, width and feed-forward sizes must be positive");
        }
        if self.width % self.heads != 0 {
            return arg_err(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.context == 0 || self.vocab == 0 {
            return arg_err("context and vocabulary sizes must be positive");
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// One named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct LayerIndex {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    qkv_w: Range<usize>,
    qkv_b: Range<usize>,
    proj_w: Range<usize>,
    proj_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    fc_w: Range<usize>,
    fc_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Index {
    tok: Range<usize>,
    pos: Range<usize>,
    layers: Vec<LayerIndex>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    head_w: Range<usize>,
    head_b: Range<usize>,
}

fn build_layout(kind: ModelKind, cfg: &ModelConfig) -> (Vec<ParamInfo>, Index) {
    let mut infos: Vec<ParamInfo> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| -> Range<usize> {
        let offset = infos.last().map_or(0, |p| p.offset + p.len());
        let info = ParamInfo { name, shape, offset };
        let r = info.range();
        infos.push(info);
        r
    };
    let (d, f) = (cfg.width, cfg.ff_width);
    let tok = add("tok_emb".into(), vec![cfg.vocab, d]);
    let pos = add("pos_emb".into(), vec![cfg.context, d]);
    let layers = (0..cfg.layers)
        .map(|l| LayerIndex {
            ln1_g: add(format!("layers.{l}.ln1.weight"), vec![d]),
            ln1_b: add(format!("layers.{l}.ln1.bias"), vec![d]),
            qkv_w: add(format!("layers.{l}.attn.qkv.weight"), vec![d, 3 * d]),
            qkv_b: add(format!("layers.{l}.attn.qkv.bias"), vec![3 * d]),
            proj_w: add(format!("layers.{l}.attn.proj.weight"), vec![d, d]),
            proj_b: add(format!("layers.{l}.attn.proj.bias"), vec![d]),
            ln2_g: add(format!("layers.{l}.ln2.weight"), vec![d]),
            ln2_b: add(format!("layers.{l}.ln2.bias"), vec![d]),
            fc_w: add(format!("layers.{l}.mlp.fc.weight"), vec![d, f]),
            fc_b: add(format!("layers.{l}.mlp.fc.bias"), vec![f]),
            out_w: add(format!("layers.{l}.mlp.out.weight"), vec![f, d]),
            out_b: add(format!("layers.{l}.mlp.out.bias"), vec![d]),
        })
        .collect();
    let lnf_g = add("ln_f.weight".into(), vec![d]);
    let lnf_b = add("ln_f.bias".into(), vec![d]);
    let outputs = match kind {
        ModelKind::Generator => cfg.vocab,
        ModelKind::Ranker => 2,
    };
    let head_w = add("head.weight".into(), vec![d, outputs]);
    let head_b = add("head.bias".into(), vec![outputs]);
    (infos, Index { tok, pos, layers, lnf_g, lnf_b, head_w, head_b })
}

/// Token sequences laid end to end.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Packed {
    pub tokens: Vec<u32>,
    /// `(start, len)` of each sequence in `tokens`.
    pub spans: Vec<(usize, usize)>,
}

impl Packed {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut p = Packed::default();
        for s in seqs {
            p.spans.push((p.tokens.len(), s.len()));
            p.tokens.extend_from_slice(s);
        }
        p
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone)]
struct LayerActs<F> {
    ln1: LnCache<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    u: Vec<F>,
    /// `gelu_tanh(u)`
    t: Vec<F>,
    g: Vec<F>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Activations<F> {
    packed: Packed,
    /// Offset of each sequence's attention-probability block.
    prob_offsets: Vec<usize>,
    layers: Vec<LayerActs<F>>,
    lnf: LnCache<F>,
    /// Final normalised hidden states, `rows x width`.
    pub hidden: Vec<F>,
}

impl<F> Activations<F> {
    pub fn packed(&self) -> &Packed {
        &self.packed
    }

    pub(crate) fn qkv(&self, layer: usize) -> &[F] {
        &self.layers[layer].qkv
    }
}

#[derive(Debug, Clone)]
pub struct Transformer<F> {
    kind: ModelKind,
    config: ModelConfig,
    layout: Vec<ParamInfo>,
    index: Index,
    params: Vec<F>,
}

impl<F: Scalar> Transformer<F> {
    /// Random initialisation: N(0, 0.02) embeddings and weights, residual
    /// output projections scaled by `1/sqrt(2 * layers)`, unit layer-norm
    /// gains, and a zero output head so the initial prediction is uniform.
    pub fn new(kind: ModelKind, config: ModelConfig, rng: &mut crate::Rng) -> Result<Self> {
        let mut model = Self::zeros(kind, config)?;
        let std = 0.02;
        let normal = Normal::new(0.0f64, std).expect("valid std");
        let residual = Normal::new(0.0f64, std / num_traits::Float::sqrt(2.0 * model.config.layers as f64)).expect("valid std");
        let fill = |params: &mut [F], r: &Range<usize>, dist: &Normal<f64>, rng: &mut crate::Rng| {
            for v in &mut params[r.clone()] {
                *v = F::lit(dist.sample(rng));
            }
        };
        let idx = model.index.clone();
        fill(&mut model.params, &idx.tok, &normal, rng);
        fill(&mut model.params, &idx.pos, &normal, rng);
        for l in &idx.layers {
            fill(&mut model.params, &l.qkv_w, &normal, rng);
            fill(&mut model.params, &l.proj_w, &residual, rng);
            fill(&mut model.params, &l.fc_w, &normal, rng);
            fill(&mut model.params, &l.out_w, &residual, rng);
        }
        Ok(model)
    }

    /// All weights zero, layer-norm gains one.
    pub fn zeros(kind: ModelKind, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, index) = build_layout(kind, &config);
        let total = layout.last().map_or(0, |p| p.offset + p.len());
        let mut params = vec![F::zero(); total];
        for r in index.layers.iter().flat_map(|l| [&l.ln1_g, &l.ln2_g]).chain([&index.lnf_g]) {
            params[r.clone()].iter_mut().for_each(|v| *v = F::one());
        }
        Ok(Transformer { kind, config, layout, index, params })
    }

    /// Rebuilds a model from a flat parameter vector in layout order.
    pub fn from_params(kind: ModelKind, config: ModelConfig, params: Vec<F>) -> Result<Self> {
        let mut model = Self::zeros(kind, config)?;
        if params.len() != model.params.len() {
            return Err(CoreError::Shape(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Shape("parameters contain non-finite values".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, name: &str) -> Option<&[F]> {
        self.layout.iter().find(|p| p.name == name).map(|p| &self.params[p.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let r = self.layout.iter().find(|p| p.name == name)?.range();
        Some(&mut self.params[r])
    }

    /// Converts the parameters to another precision.
    /// SHA-256 over kind, configuration and the parameters as little-endian
    /// f32, so a model and its f32 checkpoint share one digest.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.kind.name().as_bytes());
        let c = &self.config;
        for x in [c.layers, c.heads, c.width, c.ff_width, c.context, c.vocab] {
            h.update((x as u64).to_le_bytes());
        }
        for p in &self.params {
            h.update(p.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        Transformer {
            kind: self.kind,
            config: self.config.clone(),
            layout: self.layout.clone(),
            index: self.index.clone(),
            params: self.params.iter().map(|v| G::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or(G::zero())).collect(),
        }
    }

    fn check_batch(&self, batch: &Packed) -> Result<()> {
        if batch.spans.is_empty() {
            return arg_err("empty batch");
        }
        for &(_, len) in &batch.spans {
            if len == 0 {
                return arg_err("empty sequence in batch");
            }
            if len > self.config.context {
                return Err(CoreError::Length { needed: len, limit: self.config.context });
            }
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return arg_err(format!("token id {t} outside vocabulary of {}", self.config.vocab));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Packed) -> Result<Activations<F>> {
        self.check_batch(batch)?;
        let p = &self.params;
        let cfg = &self.config;
        let (d, f, h) = (cfg.width, cfg.ff_width, cfg.heads);
        let n = batch.rows();

        let mut x = vec![F::zero(); n * d];
        for &(start, len) in &batch.spans {
            for t in 0..len {
                let row = &mut x[(start + t) * d..(start + t + 1) * d];
                let tok = batch.tokens[start + t] as usize;
                let te = &p[self.index.tok.start + tok * d..][..d];
                let pe = &p[self.index.pos.start + t * d..][..d];
                for j in 0..d {
                    row[j] = te[j] + pe[j];
                }
            }
        }

        let mut prob_offsets = Vec::with_capacity(batch.spans.len());
        let mut total = 0;
        for &(_, len) in &batch.spans {
            prob_offsets.push(total);
            total += h * len * len;
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for li in &self.index.layers {
            let (h1, ln1) = layer_norm(&x, &p[li.ln1_g.clone()], &p[li.ln1_b.clone()], true);
            let mut qkv = vec![F::zero(); n * 3 * d];
            linear(&h1, &p[li.qkv_w.clone()], &p[li.qkv_b.clone()], n, d, &mut qkv);

            let mut probs = vec![F::zero(); total];
            let mut attn = vec![F::zero(); n * d];
            self.attention_forward(batch, &prob_offsets, &qkv, &mut probs, &mut attn);

            add_linear(&attn, &p[li.proj_w.clone()], &p[li.proj_b.clone()], n, d, &mut x);

            let (h2, ln2) = layer_norm(&x, &p[li.ln2_g.clone()], &p[li.ln2_b.clone()], true);
            let mut u = vec![F::zero(); n * f];
            linear(&h2, &p[li.fc_w.clone()], &p[li.fc_b.clone()], n, d, &mut u);
            let t: Vec<F> = u.iter().map(|&v| gelu_tanh(v)).collect();
            let g: Vec<F> = u.iter().zip(&t).map(|(&v, &tv)| gelu(v, tv)).collect();
            add_linear(&g, &p[li.out_w.clone()], &p[li.out_b.clone()], n, f, &mut x);

            layers.push(LayerActs { ln1, h1, qkv, probs, attn, ln2, h2, u, t, g });
        }

        let (hidden, lnf) = layer_norm(&x, &p[self.index.lnf_g.clone()], &p[self.index.lnf_b.clone()], true);
        Ok(Activations { packed: batch.clone(), prob_offsets, layers, lnf, hidden })
    }

    fn attention_forward(&self, batch: &Packed, offsets: &[usize], qkv: &[F], probs: &mut [F], attn: &mut [F]) {
        let d = self.config.width;
        let dh = self.config.head_dim();
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let causal = self.kind.causal();
        let mut heads = HeadBuffers::default();
        for (s, &(start, len)) in batch.spans.iter().enumerate() {
            for hd in 0..self.config.heads {
                heads.gather(qkv, start, len, d, hd * dh, dh);
                let block = &mut probs[offsets[s] + hd * len * len..][..len * len];
                for i in 0..len {
                    let row = &mut block[i * len..(i + 1) * len];
                    let visible = if causal { i + 1 } else { len };
                    row.iter_mut().for_each(|v| *v = F::zero());
                    let q = &heads.q[i * dh..(i + 1) * dh];
                    for (c, &qc) in q.iter().enumerate() {
                        axpy(qc * scale, &heads.kt[c * len..c * len + visible], &mut row[..visible]);
                    }
                    row[visible..].iter_mut().for_each(|v| *v = F::neg_infinity());
                    softmax_in_place(row);
                    let out = &mut attn[(start + i) * d + hd * dh..][..dh];
                    for (j, &pj) in row[..visible].iter().enumerate() {
                        axpy(pj, &heads.v[j * dh..(j + 1) * dh], out);
                    }
                }
            }
        }
    }

    fn attention_backward(&self, acts: &Activations<F>, layer: usize, dattn: &[F]) -> Vec<F> {
        let la = &acts.layers[layer];
        let d = self.config.width;
        let dh = self.config.head_dim();
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let causal = self.kind.causal();
        let mut dqkv = vec![F::zero(); la.qkv.len()];
        let mut heads = HeadBuffers::default();
        let mut dq = Vec::new();
        let mut dk = Vec::new();
        let mut dv = Vec::new();
        let mut dp = Vec::new();
        for (s, &(start, len)) in acts.packed.spans.iter().enumerate() {
            for hd in 0..self.config.heads {
                heads.gather(&la.qkv, start, len, d, hd * dh, dh);
                let block = &la.probs[acts.prob_offsets[s] + hd * len * len..][..len * len];
                for buf in [&mut dq, &mut dk, &mut dv] {
                    buf.clear();
                    buf.resize(len * dh, F::zero());
                }
                dp.clear();
                dp.resize(len, F::zero());
                for i in 0..len {
                    let visible = if causal { i + 1 } else { len };
                    let pr = &block[i * len..i * len + visible];
                    let dout = &dattn[(start + i) * d + hd * dh..][..dh];
                    // dP[i, j] = dout . v_j ; dV_j += P[i, j] dout
                    let dpr = &mut dp[..visible];
                    dpr.iter_mut().for_each(|v| *v = F::zero());
                    for (c, &g) in dout.iter().enumerate() {
                        axpy(g, &heads.vt[c * len..c * len + visible], dpr);
                    }
                    for (j, &pj) in pr.iter().enumerate() {
                        axpy(pj, dout, &mut dv[j * dh..(j + 1) * dh]);
                    }
                    // softmax backward, folded with the score scale
                    let dot: F = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dpr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot) * scale;
                    }
                    let qi = &heads.q[i * dh..(i + 1) * dh];
                    for (j, &gs) in dpr.iter().enumerate() {
                        axpy(gs, &heads.k[j * dh..(j + 1) * dh], &mut dq[i * dh..(i + 1) * dh]);
                        axpy(gs, qi, &mut dk[j * dh..(j + 1) * dh]);
                    }
                }
                for t in 0..len {
                    let row = &mut dqkv[(start + t) * 3 * d..(start + t + 1) * 3 * d];
                    row[hd * dh..(hd + 1) * dh].copy_from_slice(&dq[t * dh..(t + 1) * dh]);
                    row[d + hd * dh..d + (hd + 1) * dh].copy_from_slice(&dk[t * dh..(t + 1) * dh]);
                    row[2 * d + hd * dh..2 * d + (hd + 1) * dh].copy_from_slice(&dv[t * dh..(t + 1) * dh]);
                }
            }
        }
        dqkv
    }

    /// Back-propagates `d_hidden` (gradient w.r.t. [`Activations::hidden`])
    /// and accumulates parameter gradients into `grads`.
    pub fn backward(&self, acts: &Activations<F>, d_hidden: &[F], grads: &mut [F]) {
        assert_eq!(grads.len(), self.params.len());
        let p = &self.params;
        let cfg = &self.config;
        let (d, f) = (cfg.width, cfg.ff_width);
        let n = acts.packed.rows();
        let idx = &self.index;

        let mut dx = vec![F::zero(); n * d];
        {
            let (dg, db) = two_ranges(grads, &idx.lnf_g, &idx.lnf_b);
            layer_norm_backward(&acts.lnf, &p[idx.lnf_g.clone()], d_hidden, dg, db, &mut dx);
        }

        for (l, li) in idx.layers.iter().enumerate().rev() {
            let la = &acts.layers[l];
            // x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
            let dg = {
                let (dw, db) = two_ranges(grads, &li.out_w, &li.out_b);
                linear_backward(&la.g, &p[li.out_w.clone()], &dx, n, f, d, dw, db)
            };
            let du: Vec<F> = dg.iter().zip(&la.u).zip(&la.t).map(|((&g, &u), &t)| g * gelu_grad(u, t)).collect();
            let dh2 = {
                let (dw, db) = two_ranges(grads, &li.fc_w, &li.fc_b);
                linear_backward(&la.h2, &p[li.fc_w.clone()], &du, n, d, f, dw, db)
            };
            {
                let (dgm, dbt) = two_ranges(grads, &li.ln2_g, &li.ln2_b);
                layer_norm_backward(&la.ln2, &p[li.ln2_g.clone()], &dh2, dgm, dbt, &mut dx);
            }
            // x_mid = x_in + attn(ln1(x_in)) Wo + bo
            let dattn = {
                let (dw, db) = two_ranges(grads, &li.proj_w, &li.proj_b);
                linear_backward(&la.attn, &p[li.proj_w.clone()], &dx, n, d, d, dw, db)
            };
            let dqkv = self.attention_backward(acts, l, &dattn);
            let dh1 = {
                let (dw, db) = two_ranges(grads, &li.qkv_w, &li.qkv_b);
                linear_backward(&la.h1, &p[li.qkv_w.clone()], &dqkv, n, d, 3 * d, dw, db)
            };
            let (dgm, dbt) = two_ranges(grads, &li.ln1_g, &li.ln1_b);
            layer_norm_backward(&la.ln1, &p[li.ln1_g.clone()], &dh1, dgm, dbt, &mut dx);
        }

        for &(start, len) in &acts.packed.spans {
            for t in 0..len {
                let row = &dx[(start + t) * d..(start + t + 1) * d];
                let tok = acts.packed.tokens[start + t] as usize;
                let te = &mut grads[idx.tok.start + tok * d..][..d];
                te.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                let pe = &mut grads[idx.pos.start + t * d..][..d];
                pe.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
            }
        }
    }

    /// Vocabulary logits for the given hidden-state rows, `rows.len() x outputs`.
    pub fn head_logits(&self, hidden: &[F], rows: &[usize]) -> Vec<F> {
        let d = self.config.width;
        let gathered: Vec<F> = rows.iter().flat_map(|&r| hidden[r * d..(r + 1) * d].iter().copied()).collect();
        self.head_apply(&gathered, rows.len())
    }

    fn head_apply(&self, x: &[F], n: usize) -> Vec<F> {
        let outputs = self.index.head_b.len();
        let mut out = vec![F::zero(); n * outputs];
        linear(x, &self.params[self.index.head_w.clone()], &self.params[self.index.head_b.clone()], n, self.config.width, &mut out);
        out
    }

    /// Language-model cross entropy. `targets` pairs a hidden row with the
    /// token it must predict. Returns the summed negative log-likelihood;
    /// when `grads` is given, accumulates the gradient of
    /// `scale * sum(nll)` into it.
    pub fn lm_loss(&self, acts: &Activations<F>, targets: &[(usize, u32)], scale: F, grads: Option<&mut [F]>) -> f64 {
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let mut probs = self.head_logits(&acts.hidden, &rows);
        let v = self.index.head_b.len();
        let mut nll = 0.0;
        for (i, &(_, tok)) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            nll -= log_prob64(row, tok as usize);
            if grads.is_none() {
                continue;
            }
            softmax_in_place(row);
            row[tok as usize] -= F::one();
            row.iter_mut().for_each(|g| *g *= scale);
        }
        if let Some(grads) = grads {
            let d_hidden = self.head_backward(&acts.hidden, &rows, &probs, grads);
            self.backward(acts, &d_hidden, grads);
        }
        nll
    }

    /// Backward of the head for gathered rows; returns `d_hidden` for all rows.
    fn head_backward(&self, hidden: &[F], rows: &[usize], dlogits: &[F], grads: &mut [F]) -> Vec<F> {
        let d = self.config.width;
        let v = self.index.head_b.len();
        let gathered: Vec<F> = rows.iter().flat_map(|&r| hidden[r * d..(r + 1) * d].iter().copied()).collect();
        let dx = {
            let (dw, db) = two_ranges(grads, &self.index.head_w, &self.index.head_b);
            linear_backward(&gathered, &self.params[self.index.head_w.clone()], dlogits, rows.len(), d, v, dw, db)
        };
        let mut d_hidden = vec![F::zero(); hidden.len()];
        for (i, &r) in rows.iter().enumerate() {
            d_hidden[r * d..(r + 1) * d].iter_mut().zip(&dx[i * d..(i + 1) * d]).for_each(|(a, &b)| *a += b);
        }
        d_hidden
    }

    /// Log-probability (in f64) of each target token under the model.
    pub fn target_log_probs(&self, acts: &Activations<F>, targets: &[(usize, u32)]) -> Vec<f64> {
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let logits = self.head_logits(&acts.hidden, &rows);
        let v = self.index.head_b.len();
        targets.iter().enumerate().map(|(i, &(_, tok))| log_prob64(&logits[i * v..(i + 1) * v], tok as usize)).collect()
    }

    /// Mean-pooled two-way logits per sequence, `sequences x 2`.
    pub fn pooled_logits(&self, acts: &Activations<F>) -> Vec<F> {
        let pooled = self.pool(acts);
        self.head_apply(&pooled, acts.packed.spans.len())
    }

    fn pool(&self, acts: &Activations<F>) -> Vec<F> {
        let d = self.config.width;
        let mut pooled = vec![F::zero(); acts.packed.spans.len() * d];
        for (s, &(start, len)) in acts.packed.spans.iter().enumerate() {
            let out = &mut pooled[s * d..(s + 1) * d];
            for r in start..start + len {
                out.iter_mut().zip(&acts.hidden[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
            }
            let inv = F::one() / F::lit(len as f64);
            out.iter_mut().for_each(|a| *a *= inv);
        }
        pooled
    }

    /// Two-way cross entropy for pooled sequences with `labels[s]` in {0, 1}.
    /// Returns the summed negative log-likelihood and optionally accumulates
    /// the gradient of `scale * sum(nll)`.
    pub fn classify_loss(&self, acts: &Activations<F>, labels: &[usize], scale: F, grads: Option<&mut [F]>) -> f64 {
        assert_eq!(labels.len(), acts.packed.spans.len());
        let d = self.config.width;
        let pooled = self.pool(acts);
        let mut dlogits = self.head_apply(&pooled, labels.len());
        let mut nll = 0.0;
        for (s, &y) in labels.iter().enumerate() {
            let row = &mut dlogits[s * 2..(s + 1) * 2];
            nll -= log_prob64(row, y);
            softmax_in_place(row);
            row[y] -= F::one();
            row.iter_mut().for_each(|g| *g *= scale);
        }
        if let Some(grads) = grads {
            let dpooled = {
                let (dw, db) = two_ranges(grads, &self.index.head_w, &self.index.head_b);
                linear_backward(&pooled, &self.params[self.index.head_w.clone()], &dlogits, labels.len(), d, 2, dw, db)
            };
            let mut d_hidden = vec![F::zero(); acts.hidden.len()];
            for (s, &(start, len)) in acts.packed.spans.iter().enumerate() {
                let inv = F::one() / F::lit(len as f64);
                for r in start..start + len {
                    d_hidden[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&dpooled[s * d..(s + 1) * d])
                        .for_each(|(a, &b)| *a = b * inv);
                }
            }
            self.backward(acts, &d_hidden, grads);
        }
        nll
    }

    pub(crate) fn layer_params(&self, l: usize) -> LayerParams<'_, F> {
        let li = &self.index.layers[l];
        let p = &self.params;
        LayerParams {
            ln1_g: &p[li.ln1_g.clone()],
            ln1_b: &p[li.ln1_b.clone()],
            qkv_w: &p[li.qkv_w.clone()],
            qkv_b: &p[li.qkv_b.clone()],
            proj_w: &p[li.proj_w.clone()],
            proj_b: &p[li.proj_b.clone()],
            ln2_g: &p[li.ln2_g.clone()],
            ln2_b: &p[li.ln2_b.clone()],
            fc_w: &p[li.fc_w.clone()],
            fc_b: &p[li.fc_b.clone()],
            out_w: &p[li.out_w.clone()],
            out_b: &p[li.out_b.clone()],
        }
    }

    pub(crate) fn embed(&self, tok: u32, pos: usize, out: &mut [F]) {
        let d = self.config.width;
        let te = &self.params[self.index.tok.start + tok as usize * d..][..d];
        let pe = &self.params[self.index.pos.start + pos * d..][..d];
        for j in 0..d {
            out[j] = te[j] + pe[j];
        }
    }

    pub(crate) fn final_norm(&self) -> (&[F], &[F]) {
        (&self.params[self.index.lnf_g.clone()], &self.params[self.index.lnf_b.clone()])
    }

    pub(crate) fn head_rows(&self, x: &[F], n: usize) -> Vec<F> {
        self.head_apply(x, n)
    }
}

pub(crate) struct LayerParams<'a, F> {
    pub ln1_g: &'a [F],
    pub ln1_b: &'a [F],
    pub qkv_w: &'a [F],
    pub qkv_b: &'a [F],
    pub proj_w: &'a [F],
    pub proj_b: &'a [F],
    pub ln2_g: &'a [F],
    pub ln2_b: &'a [F],
    pub fc_w: &'a [F],
    pub fc_b: &'a [F],
    pub out_w: &'a [F],
    pub out_b: &'a [F],
}

/// Contiguous copies of one head's queries, keys and values for one
/// sequence, plus transposed keys and values for row-oriented updates.
#[derive(Default)]
struct HeadBuffers<F> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    kt: Vec<F>,
    vt: Vec<F>,
}

impl<F: Scalar> HeadBuffers<F> {
    fn gather(&mut self, qkv: &[F], start: usize, len: usize, d: usize, col: usize, dh: usize) {
        for buf in [&mut self.q, &mut self.k, &mut self.v, &mut self.kt, &mut self.vt] {
            buf.clear();
            buf.resize(len * dh, F::zero());
        }
        for t in 0..len {
            let row = &qkv[(start + t) * 3 * d..(start + t + 1) * 3 * d];
            self.q[t * dh..(t + 1) * dh].copy_from_slice(&row[col..col + dh]);
            self.k[t * dh..(t + 1) * dh].copy_from_slice(&row[d + col..d + col + dh]);
            self.v[t * dh..(t + 1) * dh].copy_from_slice(&row[2 * d + col..2 * d + col + dh]);
            for c in 0..dh {
                self.kt[c * len + t] = row[d + col + c];
                self.vt[c * len + t] = row[2 * d + col + c];
            }
        }
    }
}

#[inline]
fn axpy<F: Scalar>(a: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `x += input * w + bias` for `n` rows.
/// `log softmax(row)[k]` evaluated in f64.
pub(crate) fn log_prob64<F: Scalar>(row: &[F], k: usize) -> f64 {
    let max = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x.to_f64().unwrap_or(f64::NAN) - max).exp()).sum();
    row[k].to_f64().unwrap_or(f64::NAN) - max - sum.ln()
}

pub(crate) fn add_linear<F: Scalar>(input: &[F], w: &[F], bias: &[F], n: usize, k: usize, x: &mut [F]) {
    let cols = bias.len();
    gemm(F::one(), MatRef::new(input, n, k), MatRef::new(w, k, cols), F::one(), MatMut::new(x, n, cols));
    for row in x.chunks_exact_mut(cols) {
        row.iter_mut().zip(bias).for_each(|(a, &b)| *a += b);
    }
}

/// Disjoint mutable views of two non-overlapping ranges, `a` before `b`.
fn two_ranges<'a, F>(v: &'a mut [F], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [F], &'a mut [F]) {
    assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
