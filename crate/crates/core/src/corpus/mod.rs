//! Stories, corpus splits, segments, the subword vocabulary and the
//! templated synthetic corpus.

mod synthetic;
mod tokenizer;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{arg_err, Result};

pub use synthetic::{generate_synthetic_corpus, Activity, Complication, StoryGrammar, DEFAULT_GRAMMAR};
pub use tokenizer::{Special, Vocab, BOS, EOS, EOSENT, NUM_SPECIALS, PAD, SEP};

/// An ordered list of sentences. `sentences[0]` is the beginning and the
/// last sentence is the ending.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Story {
    id: String,
    sentences: Vec<String>,
}

impl Story {
    /// Builds a story, rejecting blank sentences and stories with fewer than
    /// two sentences.
    pub fn new(id: impl Into<String>, sentences: Vec<String>) -> Result<Self> {
        let id = id.into();
        if sentences.len() < 2 {
            return arg_err(alloc::format!(
                "story {id:?} has {} sentence(s); at least 2 are required",
                sentences.len()
            ));
        }
        if let Some(i) = sentences.iter().position(|s| s.trim().is_empty()) {
            return arg_err(alloc::format!("story {id:?} has an empty sentence at index {i}"));
        }
        Ok(Story { id, sentences })
    }

    /// Generated stories may hold an empty interior sentence when the sampler
    /// kept producing nothing; they skip the blank-sentence check.
    pub(crate) fn from_generated(id: impl Into<String>, sentences: Vec<String>) -> Self {
        debug_assert!(sentences.len() >= 2);
        Story { id: id.into(), sentences }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn beginning(&self) -> &str {
        &self.sentences[0]
    }

    pub fn ending(&self) -> &str {
        &self.sentences[self.sentences.len() - 1]
    }

    pub fn into_sentences(self) -> Vec<String> {
        self.sentences
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusSplit {
    pub train: Vec<Story>,
    pub dev: Vec<Story>,
    pub test: Vec<Story>,
}

/// Consecutive sentences `source[start..start + sentences.len()]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorySegment {
    pub source_id: String,
    pub start: usize,
    pub sentences: Vec<String>,
}

/// Splits `total` items by `ratios` using largest-remainder rounding.
/// Ties in the fractional part go to the earlier bucket.
pub fn largest_remainder_sizes(total: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| *q as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - sizes[a] as f64;
        let fb = quotas[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Seeded uniform shuffle followed by a largest-remainder partition into
/// train/dev/test.
pub fn split_corpus(stories: &[Story], ratios: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return arg_err(alloc::format!("split ratios must be non-negative, got {ratios:?}"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return arg_err(alloc::format!("split ratios must sum to 1, got {sum}"));
    }
    let mut seen = BTreeSet::new();
    for s in stories {
        if !seen.insert(s.id()) {
            return arg_err(alloc::format!("duplicate story id {:?}", s.id()));
        }
    }

    let mut order: Vec<usize> = (0..stories.len()).collect();
    order.shuffle(&mut crate::seeded_rng(seed));
    let sizes = largest_remainder_sizes(stories.len(), &ratios);

    let mut it = order.into_iter().map(|i| stories[i].clone());
    let train = it.by_ref().take(sizes[0]).collect();
    let dev = it.by_ref().take(sizes[1]).collect();
    let test = it.collect();
    Ok(CorpusSplit { train, dev, test })
}

/// Every window of consecutive sentences whose length lies in
/// `min_len..=max_len`, story by story, shorter windows first.
pub fn segment_stories(stories: &[Story], min_len: usize, max_len: usize) -> Result<Vec<StorySegment>> {
    if min_len < 2 || min_len > max_len {
        return arg_err(alloc::format!(
            "segment bounds must satisfy 2 <= min <= max, got min={min_len} max={max_len}"
        ));
    }
    let mut out = Vec::new();
    for story in stories {
        let n = story.len();
        for width in min_len..=max_len.min(n) {
            for start in 0..=n - width {
                out.push(StorySegment {
                    source_id: story.id().into(),
                    start,
                    sentences: story.sentences()[start..start + width].to_vec(),
                });
            }
        }
    }
    Ok(out)
}

impl From<&Story> for StorySegment {
    fn from(story: &Story) -> Self {
        StorySegment { source_id: story.id().into(), start: 0, sentences: story.sentences().to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CoreError;
    use alloc::format;
    use alloc::vec;

    fn story(id: &str, n: usize) -> Story {
        Story::new(id, (0..n).map(|i| format!("{id} sentence {i}.")).collect()).unwrap()
    }

    #[test]
    fn story_rejects_blank_and_short() {
        assert!(Story::new("a", vec!["x.".into()]).is_err());
        assert!(Story::new("a", vec!["x.".into(), "   ".into()]).is_err());
        let s = Story::new("a", vec!["x.".into(), "y.".into()]).unwrap();
        assert_eq!(s.beginning(), "x.");
        assert_eq!(s.ending(), "y.");
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        let stories: Vec<_> = (0..100).map(|i| story(&format!("s{i}"), 5)).collect();
        let split = split_corpus(&stories, [0.9, 0.05, 0.05], 3).unwrap();
        assert_eq!((split.train.len(), split.dev.len(), split.test.len()), (90, 5, 5));

        let all = split_corpus(&stories, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all.train.len(), 100);
        assert!(all.dev.is_empty() && all.test.is_empty());

        assert_eq!(largest_remainder_sizes(10, &[1.0 / 3.0; 3]), vec![4, 3, 3]);
        assert_eq!(largest_remainder_sizes(2000, &[0.9, 0.05, 0.05]), vec![1800, 100, 100]);
    }

    #[test]
    fn split_is_deterministic_and_validates() {
        let stories: Vec<_> = (0..37).map(|i| story(&format!("s{i}"), 3)).collect();
        let a = split_corpus(&stories, [0.8, 0.1, 0.1], 11).unwrap();
        let b = split_corpus(&stories, [0.8, 0.1, 0.1], 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(split_corpus(&stories, [1.2, -0.1, -0.1], 0), Err(CoreError::Argument(_))));
        assert!(split_corpus(&stories, [0.5, 0.1, 0.1], 0).is_err());
        let dup = vec![story("x", 2), story("x", 3)];
        assert!(split_corpus(&dup, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn segments_of_five_sentence_story() {
        let s = story("a", 5);
        let segs = segment_stories(core::slice::from_ref(&s), 3, 5).unwrap();
        let widths: Vec<usize> = segs.iter().map(|g| g.sentences.len()).collect();
        assert_eq!(widths, vec![3, 3, 3, 4, 4, 5]);
        for g in &segs {
            assert_eq!(&s.sentences()[g.start..g.start + g.sentences.len()], &g.sentences[..]);
        }
        assert!(segment_stories(&[story("b", 2)], 3, 5).unwrap().is_empty());
        assert!(segment_stories(&[s], 1, 5).is_err());
    }
}
