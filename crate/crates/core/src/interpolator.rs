//! Iterative story construction between a fixed beginning and ending.
//!
//! The story starts as `[b, e]`. Each step picks a gap, asks the generator
//! for `m` candidates conditioned on the two sentences around the gap,
//! scores every candidate inside the whole story with the ranker and keeps
//! the best. Insertion index `i` places the new sentence between
//! `sentences[i - 1]` and `sentences[i]`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;

use crate::corpus::{Story, Vocab};
use crate::error::{arg_err, CoreError, Result};
use crate::generator::{l2r_prompt, sample_candidates, GenerationContext, GeneratorModel, SamplerConfig};
use crate::nn::Scalar;
use crate::ranker::{rank_candidates, RankerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Schedule {
    /// Midpoint of the largest gap, leftmost first.
    #[default]
    Bisectional,
    /// A uniformly random gap, drawn afresh at every step.
    RandomInsertion,
    /// Always the gap just before the ending.
    Sequential,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Bisectional, Schedule::RandomInsertion, Schedule::Sequential];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Bisectional => "bisectional",
            Schedule::RandomInsertion => "random",
            Schedule::Sequential => "sequential",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InterpolationRequest {
    pub beginning: String,
    pub ending: String,
    pub k: usize,
    pub schedule: Schedule,
    pub m: usize,
    /// `sampler.seed` seeds the whole run.
    pub sampler: SamplerConfig,
}

impl InterpolationRequest {
    pub fn new(beginning: impl Into<String>, ending: impl Into<String>, k: usize) -> Self {
        InterpolationRequest {
            beginning: beginning.into(),
            ending: ending.into(),
            k,
            schedule: Schedule::Bisectional,
            m: 10,
            sampler: SamplerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return arg_err("k must be at least 2");
        }
        if self.m == 0 {
            return arg_err("m must be at least 1");
        }
        if self.beginning.trim().is_empty() || self.ending.trim().is_empty() {
            return arg_err("beginning and ending must be non-blank");
        }
        Ok(())
    }
}

/// The story under construction.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InterpolationState {
    sentences: Vec<String>,
    target_len: usize,
    step: usize,
}

impl InterpolationState {
    pub fn new(beginning: impl Into<String>, ending: impl Into<String>, k: usize) -> Result<Self> {
        if k < 2 {
            return arg_err("k must be at least 2");
        }
        Ok(InterpolationState { sentences: vec![beginning.into(), ending.into()], target_len: k, step: 0 })
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    /// Number of sentences inserted so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn is_complete(&self) -> bool {
        self.sentences.len() >= self.target_len
    }

    /// Inserts `sentence` at gap `position`.
    pub fn insert(&mut self, position: usize, sentence: String) -> Result<()> {
        if self.is_complete() {
            return Err(CoreError::State("story already has its target length".into()));
        }
        if position == 0 || position >= self.sentences.len() {
            return arg_err(alloc::format!("position {position} is not a gap"));
        }
        self.sentences.insert(position, sentence);
        self.step += 1;
        Ok(())
    }

    pub fn into_sentences(self) -> Vec<String> {
        self.sentences
    }
}

/// Final story positions (0-based) in the order the bisectional schedule
/// fills them: repeatedly take the largest unfilled gap (leftmost on ties)
/// and fill its midpoint, rounding down. For `k = 5` this is `[2, 1, 3]`.
pub fn bisectional_order(k: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(k.saturating_sub(2));
    if k < 3 {
        return order;
    }
    // filled anchors, kept sorted
    let mut filled = vec![0, k - 1];
    loop {
        let best = filled
            .windows(2)
            .enumerate()
            .map(|(i, w)| (w[1] - w[0], i))
            .fold((0, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
        if best.0 < 2 {
            break;
        }
        let (a, b) = (filled[best.1], filled[best.1 + 1]);
        let mid = (a + b) / 2;
        order.push(mid);
        filled.insert(best.1 + 1, mid);
    }
    order
}

/// Insertion indices into the growing sentence list that realise
/// [`bisectional_order`]. For `k = 5` this is `[1, 1, 3]`.
pub fn plan_bisectional(k: usize) -> Vec<usize> {
    positions_to_insertions(k, &bisectional_order(k))
}

/// Converts an order of final positions into insertion indices.
pub fn positions_to_insertions(k: usize, order: &[usize]) -> Vec<usize> {
    let mut filled = vec![false; k];
    if k > 0 {
        filled[0] = true;
        filled[k - 1] = true;
    }
    order
        .iter()
        .map(|&p| {
            let idx = filled[..p].iter().filter(|&&f| f).count();
            filled[p] = true;
            idx
        })
        .collect()
}

pub fn next_insertion_point(state: &InterpolationState, schedule: Schedule, rng: &mut crate::Rng) -> Result<usize> {
    if state.is_complete() {
        return Err(CoreError::State("story already has its target length".into()));
    }
    let len = state.sentences.len();
    Ok(match schedule {
        Schedule::Bisectional => plan_bisectional(state.target_len)
            .get(state.step)
            .copied()
            .filter(|&p| p < len)
            .ok_or_else(|| CoreError::State("state does not follow the bisectional plan".into()))?,
        Schedule::RandomInsertion => rng.random_range(1..len),
        Schedule::Sequential => len - 1,
    })
}

/// What happened at one insertion.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepTrace {
    pub position: usize,
    /// The generator prompt's context: the gap's neighbours.
    pub left: String,
    pub right: String,
    pub candidates: Vec<String>,
    /// Ranker score per candidate; empty when no ranker is used.
    pub scores: Vec<f64>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerationTrace {
    pub request: InterpolationRequest,
    pub steps: Vec<StepTrace>,
    pub story: Vec<String>,
}

/// Performs one insertion. Without a ranker only `m = 1` is allowed.
pub fn interpolate_step<F: Scalar, G: Scalar>(
    state: &mut InterpolationState,
    generator: &GeneratorModel<F>,
    ranker: Option<&RankerModel<G>>,
    request: &InterpolationRequest,
    vocab: &Vocab,
    rng: &mut crate::Rng,
) -> Result<StepTrace> {
    if ranker.is_none() && request.m != 1 {
        return arg_err("choosing among several candidates needs a ranker");
    }
    let position = next_insertion_point(state, request.schedule, rng)?;
    let sampler = SamplerConfig { seed: rng.random(), ..request.sampler.clone() };
    let ctx = GenerationContext::new(state.sentences[position - 1].clone(), state.sentences[position].clone());
    let candidates = sample_candidates(generator, &ctx, request.m, &sampler, vocab)?;
    let (chosen, scores) = match ranker {
        Some(r) => rank_candidates(r, state, position, &candidates, vocab)?,
        None => (0, Vec::new()),
    };
    state.insert(position, candidates[chosen].clone())?;
    Ok(StepTrace { position, left: ctx.left, right: ctx.right, candidates, scores, chosen })
}

fn run<F: Scalar, G: Scalar>(
    request: &InterpolationRequest,
    generator: &GeneratorModel<F>,
    ranker: Option<&RankerModel<G>>,
    vocab: &Vocab,
) -> Result<(Story, GenerationTrace)> {
    request.validate()?;
    let mut rng = crate::seeded_rng(request.sampler.seed);
    let mut state = InterpolationState::new(request.beginning.clone(), request.ending.clone(), request.k)?;
    let mut steps = Vec::with_capacity(request.k - 2);
    while !state.is_complete() {
        steps.push(interpolate_step(&mut state, generator, ranker, request, vocab, &mut rng)?);
    }
    let story = state.into_sentences();
    let trace = GenerationTrace { request: request.clone(), steps, story: story.clone() };
    Ok((Story::from_generated("generated", story), trace))
}

/// The full pipeline: `m` candidates per gap, reranked in story context.
pub fn generate_story<F: Scalar, G: Scalar>(
    request: &InterpolationRequest,
    generator: &GeneratorModel<F>,
    ranker: &RankerModel<G>,
    vocab: &Vocab,
) -> Result<(Story, GenerationTrace)> {
    run(request, generator, Some(ranker), vocab)
}

/// The pipeline with a single candidate per gap and no ranker.
pub fn generate_story_noranking<F: Scalar>(
    request: &InterpolationRequest,
    generator: &GeneratorModel<F>,
    vocab: &Vocab,
) -> Result<(Story, GenerationTrace)> {
    let request = InterpolationRequest { m: 1, ..request.clone() };
    run::<F, F>(&request, generator, None, vocab)
}

/// Left-to-right baseline: each sentence is sampled from its predecessor
/// alone. The result has `k` sentences starting with `beginning`.
pub fn generate_story_l2r<F: Scalar>(
    beginning: &str,
    k: usize,
    generator: &GeneratorModel<F>,
    sampler: &SamplerConfig,
    vocab: &Vocab,
) -> Result<Story> {
    if k == 0 {
        return arg_err("k must be at least 1");
    }
    let mut rng = crate::seeded_rng(sampler.seed);
    let mut sentences = vec![String::from(beginning)];
    while sentences.len() < k {
        let step = SamplerConfig { seed: rng.random(), ..sampler.clone() };
        let prompt = l2r_prompt(sentences.last().expect("non-empty"), vocab)?;
        let next = generator.sample_from_prompt(&prompt, 1, &step, vocab)?;
        sentences.extend(next);
    }
    Ok(Story::from_generated("generated-l2r", sentences))
}
