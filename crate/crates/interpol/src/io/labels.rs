//! Labelled ranker data: plain-lines sentences plus a sidecar file with one
//! `<index>\t<label>\t<negative_type|->` line per story.

use std::fs;
use std::path::Path;

use interpol_core::{LabeledSegment, NegativeType};

use super::corpus::{parse_plain_lines, write_file, write_plain_lines};
use crate::error::FormatError;

pub fn save_labeled(stories: &Path, sidecar: &Path, data: &[LabeledSegment]) -> Result<(), FormatError> {
    let sentences: Vec<Vec<String>> = data.iter().map(|d| d.sentences.clone()).collect();
    write_plain_lines(stories, &sentences)?;
    let mut out = String::new();
    for (i, d) in data.iter().enumerate() {
        let kind = d.negative_type().map_or("-", NegativeType::name);
        out.push_str(&format!("{i}\t{}\t{kind}\n", d.label()));
    }
    write_file(sidecar, out.as_bytes())
}

pub fn load_labeled(stories: &Path, sidecar: &Path) -> Result<Vec<LabeledSegment>, FormatError> {
    let text = fs::read_to_string(stories).map_err(FormatError::io(stories))?;
    let sentences = parse_plain_lines(&text, stories)?;
    let labels = fs::read_to_string(sidecar).map_err(FormatError::io(sidecar))?;
    let err = |line: usize, message: String| FormatError::Parse { path: sidecar.into(), line, message };
    let mut out = Vec::with_capacity(sentences.len());
    for (i, line) in labels.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [index, label, kind] = fields[..] else {
            return Err(err(i + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        if index != i.to_string() {
            return Err(err(i + 1, format!("index {index:?} out of sequence")));
        }
        let story = sentences.get(i).ok_or_else(|| err(i + 1, "more labels than stories".into()))?;
        let seg = match (label, kind) {
            ("1", "-") => LabeledSegment::coherent(story.sentences().to_vec()),
            ("0", name) => {
                let t = NegativeType::from_name(name).ok_or_else(|| err(i + 1, format!("unknown negative type {name:?}")))?;
                LabeledSegment::incoherent(story.sentences().to_vec(), t)
            }
            _ => return Err(err(i + 1, format!("inconsistent label {label:?} with type {kind:?}"))),
        };
        out.push(seg);
    }
    if out.len() != sentences.len() {
        return Err(err(out.len() + 1, "fewer labels than stories".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = vec![
            LabeledSegment::coherent(vec!["A.".into(), "B.".into()]),
            LabeledSegment::incoherent(vec!["A.".into(), "A.".into(), "B.".into()], NegativeType::Repetition),
        ];
        let (s, l) = (dir.path().join("neg.tsv"), dir.path().join("neg.labels.tsv"));
        save_labeled(&s, &l, &data).unwrap();
        assert_eq!(fs::read_to_string(&l).unwrap(), "0\t1\t-\n1\t0\tRepetition\n");
        assert_eq!(load_labeled(&s, &l).unwrap(), data);
        fs::write(&l, "0\t1\tRepetition\n1\t0\tRepetition\n").unwrap();
        assert!(load_labeled(&s, &l).is_err());
    }
}
