//! Sentence generator: example construction, training, scoring and sampling.
//!
//! An interpolation example reads
//!
//! ```text
//! <bos> right <sep> left <sep> middle <eosent>
//! ```
//!
//! and only `middle <eosent>` is scored. The left-to-right baseline drops the
//! right context: `<bos> left <sep> middle <eosent>`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use crate::corpus::{Vocab, BOS, EOS, EOSENT, PAD, SEP};
use crate::error::{arg_err, CoreError, Result};
use crate::nn::{KvCache, ModelConfig, ModelKind, Packed, Scalar, Transformer};
use crate::training::{fit, LossTrace, TrainHyper};

/// How often an empty sample is redrawn before it is kept as is.
pub const MAX_RESAMPLES: usize = 5;

/// Sentences surrounding the gap to be filled.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerationContext {
    pub left: String,
    pub right: String,
}

impl GenerationContext {
    pub fn new(left: impl Into<String>, right: impl Into<String>) -> Self {
        GenerationContext { left: left.into(), right: right.into() }
    }
}

/// Token ids plus a mask marking the positions that contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingExample {
    pub input_ids: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl TrainingExample {
    /// `(row, token)` pairs: hidden state `row` must predict `token`.
    pub fn targets(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        (1..self.input_ids.len()).filter(|&t| self.target_mask[t]).map(|t| (t - 1, self.input_ids[t]))
    }

    pub fn num_targets(&self) -> usize {
        self.target_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// Prompt for an interpolation model: `<bos> right <sep> left <sep>`.
pub fn interpolation_prompt(ctx: &GenerationContext, vocab: &Vocab) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(&ctx.right)?);
    ids.push(SEP);
    ids.extend(vocab.encode(&ctx.left)?);
    ids.push(SEP);
    Ok(ids)
}

/// Prompt for a left-to-right model: `<bos> left <sep>`.
pub fn l2r_prompt(left: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(left)?);
    ids.push(SEP);
    Ok(ids)
}

fn complete_example(prompt: Vec<u32>, middle: &str, vocab: &Vocab, max_len: usize) -> Result<TrainingExample> {
    let body = vocab.encode(middle)?;
    let needed = prompt.len() + body.len() + 1;
    if needed > max_len {
        return Err(CoreError::Length { needed, limit: max_len });
    }
    let mut target_mask = vec![false; prompt.len()];
    target_mask.resize(needed, true);
    let mut input_ids = prompt;
    input_ids.extend(body);
    input_ids.push(EOSENT);
    Ok(TrainingExample { input_ids, target_mask })
}

pub fn build_interpolation_example(
    ctx: &GenerationContext,
    middle: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TrainingExample> {
    complete_example(interpolation_prompt(ctx, vocab)?, middle, vocab, max_len)
}

pub fn build_l2r_example(left: &str, middle: &str, vocab: &Vocab, max_len: usize) -> Result<TrainingExample> {
    complete_example(l2r_prompt(left, vocab)?, middle, vocab, max_len)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Keep only the `top_k` most likely tokens; 0 keeps all.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Argmax decoding; ignores temperature, top-k and seed.
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { temperature: 0.9, top_k: 40, max_new_tokens: 48, seed: 0, greedy: false }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig { greedy: true, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return arg_err("temperature must be positive");
        }
        if self.max_new_tokens == 0 {
            return arg_err("max_new_tokens must be positive");
        }
        Ok(())
    }
}

/// A causal transformer trained to emit one sentence followed by `<eosent>`.
#[derive(Debug, Clone)]
pub struct GeneratorModel<F = f32> {
    net: Transformer<F>,
}

impl<F: Scalar> GeneratorModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        Ok(GeneratorModel { net: Transformer::new(ModelKind::Generator, config, &mut rng)? })
    }

    pub fn from_transformer(net: Transformer<F>) -> Result<Self> {
        if net.kind() != ModelKind::Generator {
            return arg_err("expected a generator network");
        }
        Ok(GeneratorModel { net })
    }

    pub fn net(&self) -> &Transformer<F> {
        &self.net
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Token-mean negative log-likelihood over the examples.
    pub fn loss(&self, examples: &[&TrainingExample]) -> Result<f64> {
        let (nll, n) = batch_nll(&self.net, examples, None)?;
        Ok(nll / n as f64)
    }

    /// Log-probability of every target token of `example`, in order.
    pub fn score_tokens(&self, example: &TrainingExample) -> Result<Vec<f64>> {
        Ok(self.score_batch(core::slice::from_ref(example))?.pop().unwrap_or_default())
    }

    /// [`Self::score_tokens`] for many examples, evaluated in packed chunks.
    pub fn score_batch(&self, examples: &[TrainingExample]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(CHUNK) {
            let packed = Packed::new(chunk.iter().map(|e| e.input_ids.as_slice()));
            let mut targets = Vec::new();
            let mut counts = Vec::with_capacity(chunk.len());
            for (e, &(start, _)) in chunk.iter().zip(&packed.spans) {
                let before = targets.len();
                targets.extend(e.targets().map(|(r, t)| (start + r, t)));
                counts.push(targets.len() - before);
            }
            let acts = self.net.forward(&packed)?;
            let mut lp = self.net.target_log_probs(&acts, &targets).into_iter();
            out.extend(counts.into_iter().map(|c| lp.by_ref().take(c).collect()));
        }
        Ok(out)
    }

    /// Draws `m` continuations of `prompt`, each ending at `<eosent>` or
    /// the token budget, decoded to text. Candidate `i` draws from random
    /// stream `i` of `sampler.seed`. Candidates that decode to blank text
    /// are redrawn up to [`MAX_RESAMPLES`] times.
    pub fn sample_from_prompt(&self, prompt: &[u32], m: usize, sampler: &SamplerConfig, vocab: &Vocab) -> Result<Vec<String>> {
        sampler.validate()?;
        if m == 0 {
            return arg_err("number of candidates must be positive");
        }
        if vocab.len() != self.config().vocab {
            return arg_err("vocabulary does not match the model");
        }
        let context = self.config().context;
        if prompt.len() > context {
            return Err(CoreError::Length { needed: prompt.len(), limit: context });
        }
        let budget = sampler.max_new_tokens.min(context + 1 - prompt.len());
        let (cache, first_logits) = self.net.prefill(prompt)?;
        let mut rngs: Vec<crate::Rng> = (0..m)
            .map(|i| {
                let mut r = crate::Rng::seed_from_u64(sampler.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();

        let mut texts = vec![String::new(); m];
        let mut pending: Vec<usize> = (0..m).collect();
        for _ in 0..=MAX_RESAMPLES {
            let tokens = self.decode_batch(&cache, &first_logits, &pending, budget, sampler, &mut rngs)?;
            for (&i, toks) in pending.iter().zip(tokens) {
                texts[i] = String::from(vocab.decode(&toks).trim());
            }
            pending.retain(|&i| texts[i].is_empty());
            if pending.is_empty() || sampler.greedy {
                break;
            }
        }
        Ok(texts)
    }

    fn decode_batch(
        &self,
        cache: &KvCache<F>,
        first_logits: &[F],
        which: &[usize],
        budget: usize,
        sampler: &SamplerConfig,
        rngs: &mut [crate::Rng],
    ) -> Result<Vec<Vec<u32>>> {
        let v = self.config().vocab;
        let mut out = vec![Vec::new(); which.len()];
        let mut active: Vec<usize> = (0..which.len()).collect();
        let mut caches = vec![cache.clone(); which.len()];
        let mut logits: Vec<F> = first_logits.iter().copied().cycle().take(which.len() * v).collect();
        let mut scratch = Vec::with_capacity(v);
        loop {
            let mut next = Vec::with_capacity(active.len());
            let mut still = Vec::with_capacity(active.len());
            for (row, &a) in active.iter().enumerate() {
                let tok = pick_token(&logits[row * v..(row + 1) * v], sampler, &mut rngs[which[a]], &mut scratch);
                if tok == EOSENT {
                    continue;
                }
                out[a].push(tok);
                if out[a].len() < budget {
                    still.push(row);
                    next.push(tok);
                }
            }
            if still.is_empty() {
                break;
            }
            let mut step_caches: Vec<KvCache<F>> =
                still.iter().map(|&row| core::mem::take(&mut caches[active[row]])).collect();
            logits = self.net.decode_step(&mut step_caches, &next)?;
            active = still.iter().map(|&row| active[row]).collect();
            for (&a, c) in active.iter().zip(step_caches) {
                caches[a] = c;
            }
        }
        Ok(out)
    }
}

/// Chooses the next token from one row of logits. Structural specials other
/// than `<eosent>` are never emitted.
fn pick_token<F: Scalar>(logits: &[F], sampler: &SamplerConfig, rng: &mut crate::Rng, scratch: &mut Vec<f64>) -> u32 {
    scratch.clear();
    scratch.extend(logits.iter().map(|x| x.to_f64().unwrap_or(f64::NEG_INFINITY)));
    for s in [PAD, BOS, EOS, SEP] {
        scratch[s as usize] = f64::NEG_INFINITY;
    }
    if sampler.greedy {
        let mut best = EOSENT as usize;
        for (i, &x) in scratch.iter().enumerate() {
            if x > scratch[best] || (x == scratch[best] && i < best) {
                best = i;
            }
        }
        return best as u32;
    }
    let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = if sampler.top_k > 0 && sampler.top_k < scratch.len() {
        let mut sorted: Vec<f64> = scratch.clone();
        let k = sampler.top_k - 1;
        sorted.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
        sorted[k]
    } else {
        f64::NEG_INFINITY
    };
    let inv_t = 1.0 / sampler.temperature;
    let mut total = 0.0;
    for x in scratch.iter_mut() {
        *x = if *x >= threshold && *x > f64::NEG_INFINITY { ((*x - max) * inv_t).exp() } else { 0.0 };
        total += *x;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = EOSENT as usize;
    for (i, &w) in scratch.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i as u32;
            }
            u -= w;
        }
    }
    last as u32
}

/// Samples `m` candidate middle sentences for `ctx`.
pub fn sample_candidates<F: Scalar>(
    model: &GeneratorModel<F>,
    ctx: &GenerationContext,
    m: usize,
    sampler: &SamplerConfig,
    vocab: &Vocab,
) -> Result<Vec<String>> {
    model.sample_from_prompt(&interpolation_prompt(ctx, vocab)?, m, sampler, vocab)
}

/// Fits the generator with Adam on the token-mean cross entropy of the
/// masked positions.
pub fn train_generator<F: Scalar>(
    model: &mut GeneratorModel<F>,
    examples: &[TrainingExample],
    hyper: &TrainHyper,
) -> Result<LossTrace> {
    if let Some(e) = examples.iter().find(|e| e.input_ids.len() != e.target_mask.len() || e.num_targets() == 0) {
        return arg_err(alloc::format!("malformed training example of length {}", e.input_ids.len()));
    }
    fit(&mut model.net, examples.len(), hyper, |net, batch, grads| {
        let refs: Vec<&TrainingExample> = batch.iter().map(|&i| &examples[i]).collect();
        let (nll, n) = batch_nll(net, &refs, Some(grads))?;
        Ok((nll, n as f64))
    })
}

/// Summed negative log-likelihood over every target of `examples` and the
/// number of targets. Accumulates the gradient of the token-mean loss when
/// `grads` is given.
fn batch_nll<F: Scalar>(
    net: &Transformer<F>,
    examples: &[&TrainingExample],
    grads: Option<&mut [F]>,
) -> Result<(f64, usize)> {
    let packed = Packed::new(examples.iter().map(|e| e.input_ids.as_slice()));
    let targets: Vec<(usize, u32)> = examples
        .iter()
        .zip(&packed.spans)
        .flat_map(|(e, &(start, _))| e.targets().map(move |(r, t)| (start + r, t)))
        .collect();
    if targets.is_empty() {
        return arg_err("examples have no target positions");
    }
    let acts = net.forward(&packed)?;
    let scale = F::one() / F::lit(targets.len() as f64);
    Ok((net.lm_loss(&acts, &targets, scale, grads), targets.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Story;
    use alloc::string::ToString;

    fn tiny_vocab() -> Vocab {
        let s = Story::new("a", ["Ann baked bread.", "The oven was hot.", "Ann ate it."].map(String::from).to_vec()).unwrap();
        Vocab::train(&[s], 40).unwrap()
    }

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig { layers: 1, heads: 2, width: 16, ff_width: 32, context: 48, vocab }
    }

    #[test]
    fn example_layout_and_mask() {
        let v = tiny_vocab();
        let ctx = GenerationContext::new("Ann baked bread.", "Ann ate it.");
        let ex = build_interpolation_example(&ctx, "The oven was hot.", &v, 100).unwrap();
        let r = v.encode("Ann ate it.").unwrap();
        let l = v.encode("Ann baked bread.").unwrap();
        let m = v.encode("The oven was hot.").unwrap();
        let mut expect = vec![BOS];
        expect.extend(&r);
        expect.push(SEP);
        expect.extend(&l);
        expect.push(SEP);
        let prompt_len = expect.len();
        expect.extend(&m);
        expect.push(EOSENT);
        assert_eq!(ex.input_ids, expect);
        assert!(ex.target_mask[..prompt_len].iter().all(|&b| !b));
        assert!(ex.target_mask[prompt_len..].iter().all(|&b| b));
        assert_eq!(ex.num_targets(), m.len() + 1);
        assert_eq!(ex.targets().last(), Some((expect.len() - 2, EOSENT)));

        let l2r = build_l2r_example("Ann baked bread.", "The oven was hot.", &v, 100).unwrap();
        assert_eq!(l2r.input_ids[0], BOS);
        assert_eq!(l2r.input_ids[l.len() + 1], SEP);
        assert_eq!(l2r.num_targets(), m.len() + 1);

        assert!(matches!(
            build_interpolation_example(&ctx, "The oven was hot.", &v, expect.len() - 1),
            Err(CoreError::Length { .. })
        ));
    }

    #[test]
    fn score_tokens_matches_loss_and_training_memorises() {
        let v = tiny_vocab();
        let ctx = GenerationContext::new("Ann baked bread.", "Ann ate it.");
        let ex = build_interpolation_example(&ctx, "The oven was hot.", &v, 48).unwrap();
        let mut model = GeneratorModel::<f32>::new(tiny_config(v.len()), 3).unwrap();
        let lp = model.score_tokens(&ex).unwrap();
        assert_eq!(lp.len(), ex.num_targets());
        let mean = -lp.iter().sum::<f64>() / lp.len() as f64;
        assert!((mean - model.loss(&[&ex]).unwrap()).abs() < 1e-9);
        // zero-initialised head: uniform prediction
        assert!((mean - (v.len() as f64).ln()).abs() < 1e-5);

        let hyper = TrainHyper { epochs: 200, batch_size: 1, learning_rate: 1e-2, warmup_steps: 5, ..Default::default() };
        let trace = train_generator(&mut model, core::slice::from_ref(&ex), &hyper).unwrap();
        assert_eq!(trace.epoch_losses.len(), 200);
        assert!(trace.last().unwrap() < 0.05, "{trace:?}");

        let out = sample_candidates(&model, &ctx, 3, &SamplerConfig::greedy(), &v).unwrap();
        assert_eq!(out, vec!["The oven was hot.".to_string(); 3]);
        let sampled = sample_candidates(&model, &ctx, 4, &SamplerConfig { seed: 9, ..Default::default() }, &v).unwrap();
        assert_eq!(sampled, sample_candidates(&model, &ctx, 4, &SamplerConfig { seed: 9, ..Default::default() }, &v).unwrap());
    }

    #[test]
    fn sampling_respects_budget_and_rejects_bad_arguments() {
        let v = tiny_vocab();
        let model = GeneratorModel::<f32>::new(tiny_config(v.len()), 1).unwrap();
        let ctx = GenerationContext::new("Ann baked bread.", "Ann ate it.");
        let cfg = SamplerConfig { max_new_tokens: 3, top_k: 0, ..Default::default() };
        for c in sample_candidates(&model, &ctx, 5, &cfg, &v).unwrap() {
            assert!(v.encode(&c).unwrap().len() <= 3 + 1, "{c:?}");
        }
        assert!(sample_candidates(&model, &ctx, 0, &cfg, &v).is_err());
        assert!(sample_candidates(&model, &ctx, 1, &SamplerConfig { temperature: 0.0, ..cfg }, &v).is_err());
        let ex = TrainingExample { input_ids: vec![BOS, 7], target_mask: vec![false, false] };
        assert!(train_generator(&mut model.clone(), &[ex], &TrainHyper::default()).is_err());
    }

    #[test]
    fn top_k_one_equals_greedy() {
        let mut rng = crate::seeded_rng(0);
        let logits: Vec<f32> = (0..30).map(|i| ((i * 7919) % 31) as f32 * 0.1).collect();
        let mut scratch = Vec::new();
        let greedy = pick_token(&logits, &SamplerConfig::greedy(), &mut rng, &mut scratch);
        let k1 = SamplerConfig { top_k: 1, ..Default::default() };
        for _ in 0..20 {
            assert_eq!(pick_token(&logits, &k1, &mut rng, &mut scratch), greedy);
        }
        assert!(![PAD, BOS, EOS, SEP].contains(&greedy));
    }
}
