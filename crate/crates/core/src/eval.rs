//! Perplexity, the left-to-right vs interpolation ablation, ranker metrics,
//! the ranker-judged pipeline comparison and the schedule comparison.
//!
//! Perplexity pools log-probabilities over every scored token before
//! exponentiating. In the *single-sentence* setting each interior sentence
//! is scored with gold context. In the *full-story* setting the context
//! sentences are the ones the model itself produced with greedy decoding,
//! while the scored targets stay gold.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use crate::corpus::{Story, Vocab};
use crate::error::{arg_err, Result};
use crate::generator::{
    build_interpolation_example, build_l2r_example, l2r_prompt, sample_candidates, GenerationContext,
    GeneratorModel, SamplerConfig, TrainingExample,
};
use crate::interpolator::{bisectional_order, generate_story, generate_story_noranking, InterpolationRequest};
use crate::nn::Scalar;
use crate::ranker::{LabeledSegment, NegativeType, RankerModel};

/// Human-preference shares for coherence reported for the original
/// systems (no-ranking, full). Printed for orientation only.
pub const REFERENCE_HUMAN_COHERENCE: (f64, f64) = (0.033, 0.611);

/// Reference perplexities `(L2R single, NR single, L2R full, NR full)`
/// reported for the original large-scale systems.
pub const REFERENCE_PERPLEXITY: [f64; 4] = [8.90, 6.76, 9.93, 7.53];

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// SHA-256 over story ids and sentences, in order.
pub fn corpus_digest(stories: &[Story]) -> String {
    let mut h = Sha256::new();
    for s in stories {
        h.update(s.id().as_bytes());
        for sentence in s.sentences() {
            h.update(b"\n");
            h.update(sentence.as_bytes());
        }
        h.update(b"\n\n");
    }
    hex(&h.finalize())
}

/// Summed negative log-likelihood and token count over the examples.
pub fn nll_sum<F: Scalar>(model: &GeneratorModel<F>, examples: &[TrainingExample]) -> Result<(f64, usize)> {
    let scores = model.score_batch(examples)?;
    let tokens = scores.iter().map(Vec::len).sum();
    Ok((-scores.iter().flatten().sum::<f64>(), tokens))
}

pub fn wordpiece_perplexity<F: Scalar>(model: &GeneratorModel<F>, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return arg_err("no examples to score");
    }
    let (nll, tokens) = nll_sum(model, examples)?;
    if tokens == 0 {
        return arg_err("examples have no target positions");
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationCell {
    /// `"L2R"` or `"NR"`.
    pub condition: String,
    /// `"single-sentence"` or `"full-story"`.
    pub setting: String,
    pub perplexity: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub stories: usize,
    pub skipped: usize,
    pub corpus_digest: String,
    pub l2r_model_digest: String,
    pub nr_model_digest: String,
    pub seed: u64,
}

impl AblationReport {
    pub fn perplexity(&self, condition: &str, setting: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.condition == condition && c.setting == setting).map(|c| c.perplexity)
    }
}

fn greedy_fill<F: Scalar>(model: &GeneratorModel<F>, ctx: &GenerationContext, vocab: &Vocab) -> Result<String> {
    let mut out = sample_candidates(model, ctx, 1, &SamplerConfig::greedy(), vocab)?;
    Ok(out.pop().unwrap_or_default())
}

/// Interpolation examples for the interior sentences of `story`, visited in
/// `order` (final positions). Context comes from the nearest filled
/// neighbours; with `generate` set, each visited position is afterwards
/// filled with the model's greedy output instead of the gold sentence.
fn ordered_examples<F: Scalar>(
    model: &GeneratorModel<F>,
    story: &Story,
    order: &[usize],
    generate: bool,
    vocab: &Vocab,
) -> Result<Vec<TrainingExample>> {
    let gold = story.sentences();
    let k = gold.len();
    let mut filled: Vec<Option<String>> = (0..k).map(|i| (i == 0 || i == k - 1).then(|| gold[i].clone())).collect();
    let max_len = model.config().context;
    let mut out = Vec::with_capacity(order.len());
    for &p in order {
        let left = (0..p).rev().find_map(|i| filled[i].clone()).expect("beginning is filled");
        let right = (p + 1..k).find_map(|i| filled[i].clone()).expect("ending is filled");
        let ctx = GenerationContext::new(left, right);
        out.push(build_interpolation_example(&ctx, &gold[p], vocab, max_len)?);
        filled[p] = Some(if generate { greedy_fill(model, &ctx, vocab)? } else { gold[p].clone() });
    }
    Ok(out)
}

/// Left-to-right examples for sentences `1..k`; with `generate` set the
/// predecessor of each target is the model's own greedy continuation.
fn l2r_examples<F: Scalar>(model: &GeneratorModel<F>, story: &Story, generate: bool, vocab: &Vocab) -> Result<Vec<TrainingExample>> {
    let gold = story.sentences();
    let max_len = model.config().context;
    let mut prev = gold[0].clone();
    let mut out = Vec::with_capacity(gold.len() - 1);
    for target in &gold[1..gold.len() - 1] {
        out.push(build_l2r_example(&prev, target, vocab, max_len)?);
        prev = if generate {
            let prompt = l2r_prompt(&prev, vocab)?;
            model.sample_from_prompt(&prompt, 1, &SamplerConfig::greedy(), vocab)?.pop().unwrap_or_default()
        } else {
            target.clone()
        };
    }
    Ok(out)
}

fn cell<F: Scalar>(model: &GeneratorModel<F>, condition: &str, setting: &str, examples: &[TrainingExample]) -> Result<AblationCell> {
    let (nll, tokens) = nll_sum(model, examples)?;
    if tokens == 0 {
        return arg_err("no tokens to score");
    }
    Ok(AblationCell {
        condition: condition.into(),
        setting: setting.into(),
        perplexity: (nll / tokens as f64).exp(),
        tokens,
    })
}

/// Perplexity of the interior sentences of five-sentence stories under the
/// left-to-right model (gold or generated predecessor) and the
/// interpolation model (bisectional neighbours, gold or generated).
pub fn run_table3_ablation<F: Scalar, G: Scalar>(
    l2r_model: &GeneratorModel<F>,
    interp_model: &GeneratorModel<G>,
    test: &[Story],
    vocab: &Vocab,
    seed: u64,
) -> Result<AblationReport> {
    let usable: Vec<&Story> = test.iter().filter(|s| s.len() == 5).collect();
    let skipped = test.len() - usable.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} stories that do not have five sentences");
    }
    if usable.is_empty() {
        return arg_err("no five-sentence stories to evaluate");
    }
    let order = bisectional_order(5);
    let mut ex: [Vec<TrainingExample>; 4] = Default::default();
    for s in &usable {
        ex[0].extend(l2r_examples(l2r_model, s, false, vocab)?);
        ex[1].extend(ordered_examples(interp_model, s, &order, false, vocab)?);
        ex[2].extend(l2r_examples(l2r_model, s, true, vocab)?);
        ex[3].extend(ordered_examples(interp_model, s, &order, true, vocab)?);
    }
    let cells = alloc::vec![
        cell(l2r_model, "L2R", "single-sentence", &ex[0])?,
        cell(interp_model, "NR", "single-sentence", &ex[1])?,
        cell(l2r_model, "L2R", "full-story", &ex[2])?,
        cell(interp_model, "NR", "full-story", &ex[3])?,
    ];
    let kept: Vec<Story> = usable.into_iter().cloned().collect();
    Ok(AblationReport {
        cells,
        stories: kept.len(),
        skipped,
        corpus_digest: corpus_digest(&kept),
        l2r_model_digest: hex(&l2r_model.net().digest()),
        nr_model_digest: hex(&interp_model.net().digest()),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TypeAccuracy {
    pub negative_type: NegativeType,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankerMetrics {
    pub count: usize,
    pub accuracy: f64,
    pub positive_accuracy: f64,
    pub negative_accuracy: f64,
    pub per_type: Vec<TypeAccuracy>,
    pub mean_score_coherent: f64,
    pub mean_score_incoherent: f64,
    pub model_digest: String,
}

impl RankerMetrics {
    pub fn type_accuracy(&self, t: NegativeType) -> Option<f64> {
        self.per_type.iter().find(|x| x.negative_type == t).map(|x| x.accuracy)
    }
}

/// Segments scoring at least 0.5 are predicted coherent.
pub const COHERENCE_THRESHOLD: f64 = 0.5;

pub fn ranker_metrics<F: Scalar>(model: &RankerModel<F>, test: &[LabeledSegment], vocab: &Vocab) -> Result<RankerMetrics> {
    let labels: Vec<usize> = test.iter().map(LabeledSegment::label).collect();
    if !(labels.contains(&0) && labels.contains(&1)) {
        return arg_err("ranker test set must contain both labels");
    }
    let batch: Vec<Vec<String>> = test.iter().map(|t| t.sentences.clone()).collect();
    let scores = model.scores(&batch, vocab)?;
    let correct: Vec<bool> =
        scores.iter().zip(&labels).map(|(&s, &y)| usize::from(s >= COHERENCE_THRESHOLD) == y).collect();

    let rate = |keep: &dyn Fn(usize) -> bool| -> (usize, f64) {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| keep(i)).collect();
        let hits = idx.iter().filter(|&&i| correct[i]).count();
        (idx.len(), if idx.is_empty() { 0.0 } else { hits as f64 / idx.len() as f64 })
    };
    let mean = |label: usize| {
        let xs: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &y)| y == label).map(|(&s, _)| s).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let per_type = NegativeType::ALL
        .into_iter()
        .filter_map(|t| {
            let (count, accuracy) = rate(&|i| test[i].negative_type() == Some(t));
            (count > 0).then_some(TypeAccuracy { negative_type: t, count, accuracy })
        })
        .collect();
    Ok(RankerMetrics {
        count: test.len(),
        accuracy: rate(&|_| true).1,
        positive_accuracy: rate(&|i| labels[i] == 1).1,
        negative_accuracy: rate(&|i| labels[i] == 0).1,
        per_type,
        mean_score_coherent: mean(1),
        mean_score_incoherent: mean(0),
        model_digest: hex(&model.net().digest()),
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairOutcome {
    pub beginning: String,
    pub ending: String,
    pub seed: u64,
    pub interpol_story: Vec<String>,
    pub noranking_story: Vec<String>,
    pub interpol_score: f64,
    pub noranking_score: f64,
}

/// Ranker-judged stand-in for a human preference study. Scores come from a
/// judge ranker that is not the one used inside the generation loop.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProxyReport {
    pub pairs: Vec<PairOutcome>,
    pub mean_interpol: f64,
    pub mean_noranking: f64,
    /// Fraction of pairs where the full pipeline scores at least as high.
    pub win_fraction: f64,
    pub loop_ranker_digest: String,
    pub judge_ranker_digest: String,
    pub generator_digest: String,
    pub seed: u64,
}

/// Generates each `(b, e)` pair with the full pipeline and with the
/// single-candidate pipeline under the same seed and scores both final
/// stories with `judge`. Pair `i` uses seed `template.sampler.seed + i`.
pub fn compare_pipelines_proxy<F: Scalar, G: Scalar, H: Scalar>(
    generator: &GeneratorModel<F>,
    loop_ranker: &RankerModel<G>,
    judge: &RankerModel<H>,
    pairs: &[(String, String)],
    template: &InterpolationRequest,
    vocab: &Vocab,
) -> Result<ProxyReport> {
    if pairs.is_empty() {
        return arg_err("need at least one (beginning, ending) pair");
    }
    let loop_digest = loop_ranker.net().digest();
    let judge_digest = judge.net().digest();
    if loop_digest == judge_digest {
        return arg_err("judge ranker must differ from the ranker used during generation");
    }
    let base = template.sampler.seed;
    let mut outcomes = Vec::with_capacity(pairs.len());
    for (i, (b, e)) in pairs.iter().enumerate() {
        let seed = base.wrapping_add(i as u64);
        let request = InterpolationRequest {
            beginning: b.clone(),
            ending: e.clone(),
            sampler: SamplerConfig { seed, ..template.sampler.clone() },
            ..template.clone()
        };
        let (full, _) = generate_story(&request, generator, loop_ranker, vocab)?;
        let (single, _) = generate_story_noranking(&request, generator, vocab)?;
        let scores = judge.scores(&[full.sentences().to_vec(), single.sentences().to_vec()], vocab)?;
        outcomes.push(PairOutcome {
            beginning: b.clone(),
            ending: e.clone(),
            seed,
            interpol_story: full.into_sentences(),
            noranking_story: single.into_sentences(),
            interpol_score: scores[0],
            noranking_score: scores[1],
        });
    }
    let n = outcomes.len() as f64;
    Ok(ProxyReport {
        mean_interpol: outcomes.iter().map(|o| o.interpol_score).sum::<f64>() / n,
        mean_noranking: outcomes.iter().map(|o| o.noranking_score).sum::<f64>() / n,
        win_fraction: outcomes.iter().filter(|o| o.interpol_score >= o.noranking_score).count() as f64 / n,
        pairs: outcomes,
        loop_ranker_digest: hex(&loop_digest),
        judge_ranker_digest: hex(&judge_digest),
        generator_digest: hex(&generator.net().digest()),
        seed: base,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleReport {
    pub random_perplexity: f64,
    pub sequential_perplexity: f64,
    pub tokens: usize,
    /// `|random - sequential| / sequential`.
    pub relative_difference: f64,
    pub stories: usize,
    pub corpus_digest: String,
    pub model_digest: String,
    pub seed: u64,
}

/// Full-story perplexity of the interpolation model when interior sentences
/// are produced left to right versus in a random order (a fresh random
/// permutation of the interior positions for every story).
pub fn compare_schedules<F: Scalar>(
    model: &GeneratorModel<F>,
    test: &[Story],
    vocab: &Vocab,
    seed: u64,
) -> Result<ScheduleReport> {
    let usable: Vec<&Story> = test.iter().filter(|s| s.len() >= 3).collect();
    if usable.is_empty() {
        return arg_err("no stories with an interior sentence");
    }
    let mut rng = crate::seeded_rng(seed);
    let (mut random, mut sequential) = (Vec::new(), Vec::new());
    for s in &usable {
        let seq: Vec<usize> = (1..s.len() - 1).collect();
        let mut perm = seq.clone();
        perm.shuffle(&mut rng);
        sequential.extend(ordered_examples(model, s, &seq, true, vocab)?);
        random.extend(ordered_examples(model, s, &perm, true, vocab)?);
    }
    let (r_nll, tokens) = nll_sum(model, &random)?;
    let (s_nll, s_tokens) = nll_sum(model, &sequential)?;
    debug_assert_eq!(tokens, s_tokens);
    let rp = (r_nll / tokens as f64).exp();
    let sp = (s_nll / s_tokens as f64).exp();
    let kept: Vec<Story> = usable.into_iter().cloned().collect();
    Ok(ScheduleReport {
        random_perplexity: rp,
        sequential_perplexity: sp,
        tokens,
        relative_difference: (rp - sp).abs() / sp,
        stories: kept.len(),
        corpus_digest: corpus_digest(&kept),
        model_digest: hex(&model.net().digest()),
        seed,
    })
}
