//! Byte-pair-merge subword vocabulary over whitespace-pretokenized text.
//!
//! Text is cut into chunks of the form `whitespace* non-whitespace*`, so a
//! word carries its leading space and concatenating the chunks restores the
//! input exactly. Merges never cross chunk boundaries.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::Story;
use crate::error::{arg_err, CoreError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const EOSENT: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

/// Reserved tokens; their ids are the first `NUM_SPECIALS` ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    Sep,
    EoSent,
}

impl Special {
    pub const ALL: [Special; NUM_SPECIALS] = [Special::Pad, Special::Bos, Special::Eos, Special::Sep, Special::EoSent];

    pub fn id(self) -> u32 {
        self as u32
    }

    /// Key used in the vocabulary file's `specials` map.
    pub fn name(self) -> &'static str {
        match self {
            Special::Pad => "PAD",
            Special::Bos => "BOS",
            Special::Eos => "EOS",
            Special::Sep => "SEP",
            Special::EoSent => "EOSENT",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Sep => "<sep>",
            Special::EoSent => "<eosent>",
        }
    }
}

/// Minimum number of occurrences for a pair to be merged.
const MIN_PAIR_COUNT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    ids: BTreeMap<String, u32>,
    /// (left, right) -> (rank, merged id)
    ranks: BTreeMap<(u32, u32), (usize, u32)>,
}

/// Splits text into `whitespace* non-whitespace*` chunks.
pub(crate) fn pretokenize(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    core::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let mut seen_word = false;
        let mut cut = rest.len();
        for (i, c) in rest.char_indices() {
            if c.is_whitespace() {
                if seen_word {
                    cut = i;
                    break;
                }
            } else {
                seen_word = true;
            }
        }
        let (chunk, tail) = rest.split_at(cut);
        rest = tail;
        Some(chunk)
    })
}

impl Vocab {
    /// Learns merges greedily by pair frequency until the vocabulary reaches
    /// `target_size` or no pair occurs at least twice. Ties go to the pair
    /// with the smallest ids.
    pub fn train(stories: &[Story], target_size: usize) -> Result<Vocab> {
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut alphabet = BTreeSet::new();
        for sentence in stories.iter().flat_map(|s| s.sentences()) {
            for chunk in pretokenize(sentence) {
                *word_counts.entry(chunk).or_default() += 1;
                alphabet.extend(chunk.chars());
            }
        }
        if target_size <= NUM_SPECIALS + alphabet.len() {
            return arg_err(alloc::format!(
                "target vocabulary size {target_size} must exceed {} specials + {} characters",
                NUM_SPECIALS,
                alphabet.len()
            ));
        }

        let mut vocab = Vocab::with_alphabet(alphabet.into_iter());
        let mut words: Vec<(Vec<u32>, u64)> = word_counts
            .iter()
            .map(|(w, &n)| (w.chars().map(|c| vocab.ids[c.encode_utf8(&mut [0; 4]) as &str]).collect(), n))
            .collect();

        while vocab.tokens.len() < target_size {
            let mut pair_counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for (symbols, n) in &words {
                for w in symbols.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_default() += n;
                }
            }
            // BTreeMap iterates in ascending pair order, so the first maximum wins ties.
            let best = pair_counts
                .iter()
                .filter(|(_, &n)| n >= MIN_PAIR_COUNT)
                .fold(None::<((u32, u32), u64)>, |acc, (&p, &n)| match acc {
                    Some((_, m)) if m >= n => acc,
                    _ => Some((p, n)),
                });
            let Some(((a, b), _)) = best else { break };
            let merged = vocab.push_merge(a, b);
            for (symbols, _) in &mut words {
                merge_in_place(symbols, a, b, merged);
            }
        }
        Ok(vocab)
    }

    fn with_alphabet(alphabet: impl Iterator<Item = char>) -> Vocab {
        let mut vocab = Vocab { tokens: Vec::new(), merges: Vec::new(), ids: BTreeMap::new(), ranks: BTreeMap::new() };
        for sp in Special::ALL {
            vocab.push_token(sp.token().to_string());
        }
        for c in alphabet {
            vocab.push_token(c.to_string());
        }
        vocab
    }

    fn push_token(&mut self, tok: String) -> u32 {
        if let Some(&id) = self.ids.get(&tok) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(tok.clone(), id);
        self.tokens.push(tok);
        id
    }

    /// Records the merge of `a` and `b`. A merge whose result string already
    /// exists reuses that id, keeping the token/id mapping a bijection.
    fn push_merge(&mut self, a: u32, b: u32) -> u32 {
        let left = self.tokens[a as usize].clone();
        let right = self.tokens[b as usize].clone();
        let mut joined = left.clone();
        joined.push_str(&right);
        let id = self.push_token(joined);
        let rank = self.merges.len();
        self.ranks.insert((a, b), (rank, id));
        self.merges.push((left, right));
        id
    }

    /// Rebuilds a vocabulary from its serialized parts. The first
    /// `NUM_SPECIALS` tokens must be the special tokens in id order, tokens
    /// must be distinct, and every merge must produce a listed token.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Vocab> {
        let bad = |msg: String| Err(CoreError::Parse { line: 0, message: msg });
        if tokens.len() < NUM_SPECIALS {
            return bad("vocabulary is missing special tokens".into());
        }
        for sp in Special::ALL {
            if tokens[sp.id() as usize] != sp.token() {
                return bad(alloc::format!("token {} must be {:?}", sp.id(), sp.token()));
            }
        }
        let mut vocab = Vocab { tokens: Vec::new(), merges: Vec::new(), ids: BTreeMap::new(), ranks: BTreeMap::new() };
        for t in tokens {
            if vocab.ids.contains_key(&t) {
                return bad(alloc::format!("duplicate token {t:?}"));
            }
            vocab.push_token(t);
        }
        for (rank, (l, r)) in merges.into_iter().enumerate() {
            let (Some(&a), Some(&b)) = (vocab.ids.get(&l), vocab.ids.get(&r)) else {
                return bad(alloc::format!("merge {rank} refers to unknown token"));
            };
            let mut joined = l.clone();
            joined.push_str(&r);
            let Some(&id) = vocab.ids.get(&joined) else {
                return bad(alloc::format!("merge {rank} result {joined:?} is not a token"));
            };
            vocab.ranks.entry((a, b)).or_insert((rank, id));
            vocab.merges.push((l, r));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut buf = [0u8; 4];
        for chunk in pretokenize(text) {
            let mut symbols = Vec::with_capacity(chunk.len());
            for c in chunk.chars() {
                match self.ids.get(c.encode_utf8(&mut buf) as &str) {
                    Some(&id) if !Vocab::is_special(id) => symbols.push(id),
                    _ => return Err(CoreError::UnknownSymbol(c)),
                }
            }
            loop {
                let best = symbols
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                    .min();
                let Some((_, a, b, id)) = best else { break };
                merge_in_place(&mut symbols, a, b, id);
            }
            out.extend(symbols);
        }
        Ok(out)
    }

    /// Concatenates token strings, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if Vocab::is_special(id) {
                continue;
            }
            if let Some(t) = self.tokens.get(id as usize) {
                out.push_str(t);
            }
        }
        out
    }
}

fn merge_in_place(symbols: &mut Vec<u32>, a: u32, b: u32, merged: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < symbols.len() {
        if r + 1 < symbols.len() && symbols[r] == a && symbols[r + 1] == b {
            symbols[w] = merged;
            r += 2;
        } else {
            symbols[w] = symbols[r];
            r += 1;
        }
        w += 1;
    }
    symbols.truncate(w);
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn corpus() -> Vec<Story> {
        let texts = [
            ["Jim went hiking alone at the state park.", "He got lost on a trail.", "Jim was rescued."],
            ["Sarah cherished her favorite toy.", "The toy went missing.", "Sarah got a new toy."],
            ["Tom went to the  park.", "Tom  lost his hat.", "Tom went home sad."],
        ];
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Story::new(alloc::format!("{i}"), t.iter().map(|s| s.to_string()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn pretokenize_keeps_whitespace() {
        let chunks: Vec<&str> = pretokenize("  a bb\tc  ").collect();
        assert_eq!(chunks, vec!["  a", " bb", "\tc", "  "]);
        assert_eq!(pretokenize("").count(), 0);
    }

    #[test]
    fn round_trip_and_size_cap() {
        let stories = corpus();
        let vocab = Vocab::train(&stories, 80).unwrap();
        assert!(vocab.len() <= 80);
        for sp in Special::ALL {
            assert_eq!(vocab.token(sp.id()), Some(sp.token()));
        }
        for s in stories.iter().flat_map(|s| s.sentences()) {
            let ids = vocab.encode(s).unwrap();
            assert_eq!(vocab.decode(&ids), *s);
        }
        assert!(vocab.encode("").unwrap().is_empty());
        // merges shrink the encoding below one token per character
        let ids = vocab.encode("Jim went hiking").unwrap();
        assert!(ids.len() < "Jim went hiking".chars().count());
    }

    #[test]
    fn too_small_target_is_rejected() {
        let stories = corpus();
        assert!(matches!(Vocab::train(&stories, 10), Err(CoreError::Argument(_))));
    }

    #[test]
    fn unknown_characters_are_reported() {
        let vocab = Vocab::train(&corpus(), 60).unwrap();
        assert_eq!(vocab.encode("Jim ☃"), Err(CoreError::UnknownSymbol('☃')));
    }

    #[test]
    fn from_parts_rebuilds_identical_vocab() {
        let vocab = Vocab::train(&corpus(), 90).unwrap();
        let rebuilt = Vocab::from_parts(vocab.tokens().to_vec(), vocab.merges().to_vec()).unwrap();
        assert_eq!(rebuilt, vocab);
        let mut dup = vocab.tokens().to_vec();
        dup.push("a".into());
        assert!(Vocab::from_parts(dup, vec![]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        assert_eq!(Vocab::train(&corpus(), 90).unwrap(), Vocab::train(&corpus(), 90).unwrap());
    }
}
