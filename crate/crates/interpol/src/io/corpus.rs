//! Story corpora on disk.
//!
//! * `rocstories-csv`: RFC 4180 CSV with header
//!   `storyid,storytitle,sentence1,...,sentence5`.
//! * `plain-lines`: one story per line, sentences separated by a single TAB.
//!   Story ids are zero-based line numbers.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use interpol_core::Story;

use crate::error::FormatError;

const ROC_HEADER: [&str; 7] = ["storyid", "storytitle", "sentence1", "sentence2", "sentence3", "sentence4", "sentence5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    RocStoriesCsv,
    PlainLines,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rocstories-csv" => Ok(CorpusFormat::RocStoriesCsv),
            "plain-lines" => Ok(CorpusFormat::PlainLines),
            other => Err(format!("unknown corpus format `{other}` (expected rocstories-csv or plain-lines)")),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusFormat::RocStoriesCsv => "rocstories-csv",
            CorpusFormat::PlainLines => "plain-lines",
        })
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Story>, FormatError> {
    let text = fs::read_to_string(path).map_err(FormatError::io(path))?;
    match format {
        CorpusFormat::RocStoriesCsv => parse_rocstories(&text, path),
        CorpusFormat::PlainLines => parse_plain_lines(&text, path),
    }
}

pub fn parse_rocstories(text: &str, path: &Path) -> Result<Vec<Story>, FormatError> {
    let parse_err = |line: usize, message: String| FormatError::Parse { path: path.into(), line, message };
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut stories = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 {
            if record.iter().map(str::trim).ne(ROC_HEADER) {
                return Err(parse_err(line, format!("expected header `{}`", ROC_HEADER.join(","))));
            }
            continue;
        }
        if record.len() != ROC_HEADER.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", ROC_HEADER.len(), record.len())));
        }
        let sentences: Vec<String> = record.iter().skip(2).map(String::from).collect();
        if let Some(k) = sentences.iter().position(|s| s.trim().is_empty()) {
            return Err(parse_err(line, format!("sentence{} is empty", k + 1)));
        }
        let story = Story::new(&record[0], sentences).map_err(|e| parse_err(line, e.to_string()))?;
        stories.push(story);
    }
    Ok(stories)
}

pub fn parse_plain_lines(text: &str, path: &Path) -> Result<Vec<Story>, FormatError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let sentences = line.split('\t').map(String::from).collect();
            Story::new(i.to_string(), sentences).map_err(|e| FormatError::Parse {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes stories as plain lines. Sentences must not contain TAB or newline.
pub fn write_plain_lines(path: &Path, stories: &[Vec<String>]) -> Result<(), FormatError> {
    let mut out = String::new();
    for (i, s) in stories.iter().enumerate() {
        if let Some(bad) = s.iter().find(|x| x.contains(['\t', '\n', '\r'])) {
            return Err(FormatError::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("sentence {bad:?} contains a tab or line break"),
            });
        }
        out.push_str(&s.join("\t"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(FormatError::io(dir))?;
    }
    let mut f = fs::File::create(path).map_err(FormatError::io(path))?;
    f.write_all(bytes).map_err(FormatError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "storyid,storytitle,sentence1,sentence2,sentence3,sentence4,sentence5\n\
        a1,Hike,Jim went hiking alone at the state park.,\"He slipped, badly.\",He broke a leg.,He called for help.,Jim was rescued.\n";

    #[test]
    fn reads_rocstories_rows() {
        let stories = parse_rocstories(CSV, Path::new("x.csv")).unwrap();
        assert_eq!(stories.len(), 1);
        assert_eq!(stories[0].id(), "a1");
        assert_eq!(stories[0].beginning(), "Jim went hiking alone at the state park.");
        assert_eq!(stories[0].sentences()[1], "He slipped, badly.");
        assert!(parse_rocstories("", Path::new("x.csv")).unwrap().is_empty());
    }

    #[test]
    fn reports_bad_rows_by_line() {
        let short = format!("{CSV}b2,T,one.,two.,three.,four.\n");
        let err = parse_rocstories(&short, Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, FormatError::Parse { line: 3, .. }), "{err}");
        let blank = format!("{CSV}b2,T,one.,  ,three.,four.,five.\n");
        assert!(matches!(parse_rocstories(&blank, Path::new("x.csv")), Err(FormatError::Parse { line: 3, .. })));
        assert!(matches!(parse_rocstories("id,title\n", Path::new("x.csv")), Err(FormatError::Parse { line: 1, .. })));
    }

    #[test]
    fn plain_lines_use_line_numbers() {
        let s = parse_plain_lines("A.\tB.\nC.\tD.\tE.\n", Path::new("p")).unwrap();
        assert_eq!((s[1].id(), s[1].len()), ("1", 3));
        assert!(matches!(parse_plain_lines("A.\tB.\nlonely\n", Path::new("p")), Err(FormatError::Parse { line: 2, .. })));
    }
}
