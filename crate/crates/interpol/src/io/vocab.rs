//! Vocabulary JSON: `tokens`, `merges` and the `specials` name-to-id map.

use std::fs;
use std::path::Path;

use interpol_core::corpus::Special;
use interpol_core::Vocab;
use serde::{Deserialize, Serialize};

use super::corpus::write_file;
use crate::error::FormatError;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Specials {
    #[serde(rename = "PAD")]
    pad: u32,
    #[serde(rename = "BOS")]
    bos: u32,
    #[serde(rename = "EOS")]
    eos: u32,
    #[serde(rename = "SEP")]
    sep: u32,
    #[serde(rename = "EOSENT")]
    eosent: u32,
}

impl Specials {
    fn fixed() -> Self {
        Specials {
            pad: Special::Pad.id(),
            bos: Special::Bos.id(),
            eos: Special::Eos.id(),
            sep: Special::Sep.id(),
            eosent: Special::EoSent.id(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    specials: Specials,
}

pub fn vocab_to_json(vocab: &Vocab) -> String {
    let file = VocabFile { tokens: vocab.tokens().to_vec(), merges: vocab.merges().to_vec(), specials: Specials::fixed() };
    let mut s = serde_json::to_string_pretty(&file).expect("vocab serialises");
    s.push('\n');
    s
}

pub fn vocab_from_json(text: &str, path: &Path) -> Result<Vocab, FormatError> {
    let file: VocabFile = serde_json::from_str(text).map_err(FormatError::json(path))?;
    if file.specials != Specials::fixed() {
        return Err(FormatError::Parse { path: path.into(), line: 0, message: "special token ids differ from the fixed layout".into() });
    }
    Ok(Vocab::from_parts(file.tokens, file.merges)?)
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<(), FormatError> {
    write_file(path, vocab_to_json(vocab).as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocab, FormatError> {
    let text = fs::read_to_string(path).map_err(FormatError::io(path))?;
    vocab_from_json(&text, path)
}
