//! Coherence ranker: synthetic negatives, classifier training and scoring.
//!
//! The classifier is the generator's transformer without the causal mask.
//! Final hidden states are mean-pooled into a two-way head; the probability
//! of class 1 is the coherence score.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use crate::corpus::{Story, StorySegment, Vocab, BOS, EOS, SEP};
use crate::error::{arg_err, CoreError, Result};
use crate::interpolator::InterpolationState;
use crate::nn::{ModelConfig, ModelKind, Packed, Scalar, Transformer};
use crate::training::{fit, LossTrace, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum NegativeType {
    Repetition,
    Irrelevant,
    OutOfOrder,
}

impl NegativeType {
    pub const ALL: [NegativeType; 3] = [NegativeType::Repetition, NegativeType::Irrelevant, NegativeType::OutOfOrder];

    pub fn name(self) -> &'static str {
        match self {
            NegativeType::Repetition => "Repetition",
            NegativeType::Irrelevant => "Irrelevant",
            NegativeType::OutOfOrder => "OutOfOrder",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for NegativeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A sentence sequence with its coherence label. Incoherent segments record
/// how they were corrupted.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabeledSegment {
    pub sentences: Vec<String>,
    negative_type: Option<NegativeType>,
}

impl LabeledSegment {
    pub fn coherent(sentences: Vec<String>) -> Self {
        LabeledSegment { sentences, negative_type: None }
    }

    pub fn incoherent(sentences: Vec<String>, kind: NegativeType) -> Self {
        LabeledSegment { sentences, negative_type: Some(kind) }
    }

    /// 1 for coherent, 0 for incoherent.
    pub fn label(&self) -> usize {
        usize::from(self.negative_type.is_none())
    }

    pub fn negative_type(&self) -> Option<NegativeType> {
        self.negative_type
    }
}

/// Duplicates a uniformly chosen sentence right after itself.
pub fn make_repetition_negative(seg: &[String], rng: &mut crate::Rng) -> Result<Vec<String>> {
    if seg.len() < 2 {
        return arg_err("repetition negative needs at least two sentences");
    }
    let i = rng.random_range(0..seg.len());
    let mut out = seg.to_vec();
    out.insert(i + 1, seg[i].clone());
    Ok(out)
}

/// Inserts a sentence from another story at an interior position. Donor
/// sentences whose text already occurs in `seg` are not eligible.
pub fn make_irrelevant_negative(
    seg: &[String],
    donor_pool: &[Story],
    source_id: &str,
    rng: &mut crate::Rng,
) -> Result<Vec<String>> {
    if seg.len() < 2 {
        return arg_err("irrelevant negative needs at least two sentences");
    }
    let foreign = |s: &String| !seg.contains(s);
    let donors: Vec<&Story> =
        donor_pool.iter().filter(|d| d.id() != source_id && d.sentences().iter().any(foreign)).collect();
    let story = donors.choose(rng).ok_or_else(|| CoreError::Argument("no eligible donor story".into()))?;
    let pool: Vec<&String> = story.sentences().iter().filter(|s| foreign(s)).collect();
    let sentence = (*pool.choose(rng).expect("donor has a foreign sentence")).clone();
    let at = rng.random_range(1..seg.len());
    let mut out = seg.to_vec();
    out.insert(at, sentence);
    Ok(out)
}

/// Shuffles a random subset (size 2..=len) of positions until the order
/// changes. `Ok(None)` signals that every sentence is identical, so no
/// different order exists.
pub fn make_out_of_order_negative(seg: &[String], rng: &mut crate::Rng) -> Result<Option<Vec<String>>> {
    if seg.len() < 3 {
        return arg_err("out-of-order negative needs at least three sentences");
    }
    if seg.iter().all(|s| *s == seg[0]) {
        return Ok(None);
    }
    let mut positions: Vec<usize> = (0..seg.len()).collect();
    loop {
        let size = rng.random_range(2..=seg.len());
        positions.shuffle(rng);
        let chosen = &mut positions[..size];
        chosen.sort_unstable();
        let mut picked: Vec<&String> = chosen.iter().map(|&p| &seg[p]).collect();
        if picked.iter().all(|s| *s == picked[0]) {
            continue;
        }
        let original = picked.clone();
        while picked == original {
            picked.shuffle(rng);
        }
        let mut out = seg.to_vec();
        for (&p, s) in chosen.iter().zip(picked) {
            out[p] = s.clone();
        }
        return Ok(Some(out));
    }
}

/// One positive and one negative per segment. Negative types cycle through
/// Repetition, Irrelevant, OutOfOrder; segments too short or too uniform
/// for the scheduled type get a Repetition negative instead.
pub fn build_ranker_dataset(segments: &[StorySegment], corpus: &[Story], seed: u64) -> Result<Vec<LabeledSegment>> {
    if segments.is_empty() {
        return arg_err("no segments to build a ranker dataset from");
    }
    let mut rng = crate::seeded_rng(seed);
    let mut out = Vec::with_capacity(2 * segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let s = &seg.sentences;
        let scheduled = NegativeType::ALL[i % 3];
        let negative = match scheduled {
            NegativeType::Repetition => None,
            NegativeType::Irrelevant => Some(make_irrelevant_negative(s, corpus, &seg.source_id, &mut rng)?),
            NegativeType::OutOfOrder if s.len() >= 3 => make_out_of_order_negative(s, &mut rng)?,
            NegativeType::OutOfOrder => None,
        };
        let negative = match negative {
            Some(n) => LabeledSegment::incoherent(n, scheduled),
            None => {
                if scheduled != NegativeType::Repetition {
                    log::warn!("segment {i} of {} cannot be reordered; using a repetition negative", seg.source_id);
                }
                LabeledSegment::incoherent(make_repetition_negative(s, &mut rng)?, NegativeType::Repetition)
            }
        };
        out.push(LabeledSegment::coherent(s.clone()));
        out.push(negative);
    }
    Ok(out)
}

/// A bidirectional transformer with a two-way head.
#[derive(Debug, Clone)]
pub struct RankerModel<F = f32> {
    net: Transformer<F>,
}

impl<F: Scalar> RankerModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        Ok(RankerModel { net: Transformer::new(ModelKind::Ranker, config, &mut rng)? })
    }

    pub fn from_transformer(net: Transformer<F>) -> Result<Self> {
        if net.kind() != ModelKind::Ranker {
            return arg_err("expected a ranker network");
        }
        Ok(RankerModel { net })
    }

    pub fn net(&self) -> &Transformer<F> {
        &self.net
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// `<bos> s1 <sep> ... <sep> sN <eos>`, keeping the last `context`
    /// tokens when the segment is too long.
    pub fn encode(&self, sentences: &[String], vocab: &Vocab) -> Result<Vec<u32>> {
        if sentences.is_empty() {
            return arg_err("cannot score an empty sentence list");
        }
        let mut ids = vec![BOS];
        for (i, s) in sentences.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend(vocab.encode(s)?);
        }
        ids.push(EOS);
        let context = self.config().context;
        if ids.len() > context {
            log::debug!("truncating ranker input from {} to {context} tokens", ids.len());
            ids.drain(..ids.len() - context);
        }
        Ok(ids)
    }

    /// Coherence score of each sentence list, evaluated in packed chunks.
    pub fn scores(&self, batch: &[Vec<String>], vocab: &Vocab) -> Result<Vec<f64>> {
        Ok(self.class_probs(batch, vocab)?.into_iter().map(|p| p[1]).collect())
    }

    /// `[P(incoherent), P(coherent)]` per sentence list.
    pub fn class_probs(&self, batch: &[Vec<String>], vocab: &Vocab) -> Result<Vec<[f64; 2]>> {
        const CHUNK: usize = 64;
        let encoded = batch.iter().map(|s| self.encode(s, vocab)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(batch.len());
        for chunk in encoded.chunks(CHUNK) {
            let acts = self.net.forward(&Packed::new(chunk.iter().map(Vec::as_slice)))?;
            let logits = self.net.pooled_logits(&acts);
            out.extend(logits.chunks(2).map(|l| {
                let (a, b) = (l[0].to_f64().unwrap_or(f64::NAN), l[1].to_f64().unwrap_or(f64::NAN));
                let p1 = 1.0 / (1.0 + (a - b).exp());
                [1.0 - p1, p1]
            }));
        }
        Ok(out)
    }

    /// Mean cross entropy over `data`.
    pub fn loss(&self, data: &[LabeledSegment], vocab: &Vocab) -> Result<f64> {
        let encoded = data.iter().map(|d| self.encode(&d.sentences, vocab)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = data.iter().map(LabeledSegment::label).collect();
        Ok(batch_loss(&self.net, &encoded, &labels, None)? / data.len() as f64)
    }
}

/// Probability that `sentences` form a coherent story.
pub fn coherence_score<F: Scalar>(model: &RankerModel<F>, sentences: &[String], vocab: &Vocab) -> Result<f64> {
    Ok(model.scores(core::slice::from_ref(&sentences.to_vec()), vocab)?[0])
}

/// Scores every candidate inserted at `position` of the full story so far
/// and returns the best index (lowest on ties) with all scores.
pub fn rank_candidates<F: Scalar>(
    model: &RankerModel<F>,
    state: &InterpolationState,
    position: usize,
    candidates: &[String],
    vocab: &Vocab,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return arg_err("no candidates to rank");
    }
    let filled = state.sentences();
    if position == 0 || position >= filled.len() {
        return arg_err(alloc::format!("position {position} is not a gap of a {}-sentence story", filled.len()));
    }
    let stories: Vec<Vec<String>> = candidates
        .iter()
        .map(|c| {
            let mut s = filled.to_vec();
            s.insert(position, c.clone());
            s
        })
        .collect();
    let scores = model.scores(&stories, vocab)?;
    Ok((argmax_first(&scores), scores))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fits the ranker on the mean two-way cross entropy.
pub fn train_ranker<F: Scalar>(
    model: &mut RankerModel<F>,
    data: &[LabeledSegment],
    vocab: &Vocab,
    hyper: &TrainHyper,
) -> Result<LossTrace> {
    let labels: Vec<usize> = data.iter().map(LabeledSegment::label).collect();
    if !(labels.contains(&0) && labels.contains(&1)) {
        return arg_err("ranker training data must contain both labels");
    }
    let encoded = data.iter().map(|d| model.encode(&d.sentences, vocab)).collect::<Result<Vec<_>>>()?;
    fit(&mut model.net, data.len(), hyper, |net, batch, grads| {
        let enc: Vec<Vec<u32>> = batch.iter().map(|&i| encoded[i].clone()).collect();
        let lab: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        Ok((batch_loss(net, &enc, &lab, Some(grads))?, batch.len() as f64))
    })
}

/// Summed cross entropy; accumulates the gradient of the batch mean.
fn batch_loss<F: Scalar>(net: &Transformer<F>, encoded: &[Vec<u32>], labels: &[usize], grads: Option<&mut [F]>) -> Result<f64> {
    let acts = net.forward(&Packed::new(encoded.iter().map(Vec::as_slice)))?;
    let scale = F::one() / F::lit(labels.len() as f64);
    Ok(net.classify_loss(&acts, labels, scale, grads))
}
