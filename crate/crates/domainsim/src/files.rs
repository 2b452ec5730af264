//! JSONL corpora, vocabulary files and small text helpers.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use domainsim_core::datasets::{PairRecord, PairSource, QARecord};
use domainsim_core::tokenizer::{TokenizerError, Vocabulary};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: no valid rows ({rejected} rejected)")]
    NoValidRows { path: PathBuf, rejected: usize },
    #[error("{path}:{line}: {message}")]
    Row { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Vocab { path: PathBuf, source: TokenizerError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FileError + '_ {
    move |source| FileError::Io { path: path.to_path_buf(), source }
}

/// A row that failed validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: usize,
    pub rejected: Vec<RowError>,
    pub duplicates: usize,
    /// Rows dropped by the cap.
    pub capped: usize,
}

fn each_line(path: &Path, mut f: impl FnMut(usize, &str)) -> Result<usize, FileError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut n = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        n = i + 1;
        if !line.trim().is_empty() {
            f(i + 1, &line);
        }
    }
    Ok(n)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQa {
    question: String,
    answer: String,
    category: String,
}

/// Reads `{"question","answer","category"}` rows. Malformed rows are
/// reported with their line numbers; repeated (question, answer) rows are
/// dropped and counted.
pub fn ingest_qa_corpus(path: &Path) -> Result<(Vec<QARecord>, IngestReport), FileError> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    report.lines = each_line(path, |line, text| match serde_json::from_str::<RawQa>(text) {
        Err(e) => report.rejected.push(RowError { line, message: e.to_string() }),
        Ok(r) if r.question.trim().is_empty() || r.answer.trim().is_empty() || r.category.trim().is_empty() => {
            report.rejected.push(RowError { line, message: "empty field".into() })
        }
        Ok(r) => {
            if seen.insert((r.question.clone(), r.answer.clone())) {
                out.push(QARecord { question: r.question, answer: r.answer, category: r.category });
            } else {
                report.duplicates += 1;
            }
        }
    })?;
    if out.is_empty() {
        return Err(FileError::NoValidRows { path: path.to_path_buf(), rejected: report.rejected.len() });
    }
    Ok((out, report))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    q1: String,
    q2: String,
    label: i64,
    #[serde(default)]
    source: Option<PairSource>,
}

/// Reads `{"q1","q2","label"}` rows tagged with `source` unless the row
/// names its own. Keeps at most `cap` valid rows when given.
pub fn load_pair_dataset(path: &Path, source: PairSource, cap: Option<usize>) -> Result<(Vec<PairRecord>, IngestReport), FileError> {
    let mut report = IngestReport::default();
    let mut out = Vec::new();
    report.lines = each_line(path, |line, text| match serde_json::from_str::<RawPair>(text) {
        Err(e) => report.rejected.push(RowError { line, message: e.to_string() }),
        Ok(r) if r.label != 0 && r.label != 1 => report.rejected.push(RowError { line, message: format!("label must be 0 or 1, got {}", r.label) }),
        Ok(r) if r.q1.trim().is_empty() || r.q2.trim().is_empty() => report.rejected.push(RowError { line, message: "empty question".into() }),
        Ok(r) => {
            if cap.is_some_and(|c| out.len() >= c) {
                report.capped += 1;
            } else {
                out.push(PairRecord::new(r.q1, r.q2, r.label as u8, r.source.unwrap_or(source)));
            }
        }
    })?;
    if out.is_empty() {
        return Err(FileError::NoValidRows { path: path.to_path_buf(), rejected: report.rejected.len() });
    }
    Ok((out, report))
}

/// Like [`load_pair_dataset`] but any rejected row is an error.
pub fn load_pairs_strict(path: &Path, source: PairSource) -> Result<Vec<PairRecord>, FileError> {
    let (pairs, report) = load_pair_dataset(path, source, None)?;
    match report.rejected.first() {
        Some(r) => Err(FileError::Row { path: path.to_path_buf(), line: r.line, message: r.message.clone() }),
        None => Ok(pairs),
    }
}

/// One JSON document per line, in order.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), FileError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|source| FileError::Json { path: path.to_path_buf(), source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FileError> {
    let mut out = Vec::new();
    let mut err = None;
    each_line(path, |line, text| {
        if err.is_none() {
            match serde_json::from_str(text) {
                Ok(v) => out.push(v),
                Err(e) => err = Some(FileError::Row { path: path.to_path_buf(), line, message: e.to_string() }),
            }
        }
    })?;
    err.map_or(Ok(out), Err)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| FileError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FileError::Json { path: path.to_path_buf(), source })
}

/// Plain lines, skipping blanks.
pub fn read_lines(path: &Path) -> Result<Vec<String>, FileError> {
    let mut out = Vec::new();
    each_line(path, |_, l| out.push(l.to_string()))?;
    Ok(out)
}

/// One token per line; line number is the id.
pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), FileError> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary, FileError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let tokens: Vec<&str> = text.lines().collect();
    Vocabulary::from_token_list(&tokens).map_err(|source| FileError::Vocab { path: path.to_path_buf(), source })
}

/// Every question and answer string, for vocabulary building.
pub fn corpus_lines<'a>(pairs: impl IntoIterator<Item = &'a PairRecord>) -> Vec<String> {
    pairs.into_iter().flat_map(|p| [p.q1.clone(), p.q2.clone()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn qa_rows_are_validated_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            dir.path(),
            "ok.jsonl",
            "{\"question\":\"a\",\"answer\":\"b\",\"category\":\"c\"}\n{\"question\":\"d\",\"answer\":\"e\",\"category\":\"c\"}\n\n{\"question\":\"f\",\"answer\":\"g\",\"category\":\"h\"}\n",
        );
        let (recs, rep) = ingest_qa_corpus(&ok).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(rep.rejected.is_empty());

        let bad = write(dir.path(), "bad.jsonl", "{\"question\":\"a\",\"answer\":\"b\",\"category\":\"c\"}\n{\"question\":\"x\",\"answer\":\"y\"}\n");
        let (recs, rep) = ingest_qa_corpus(&bad).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(rep.rejected[0].line, 2);
        assert!(rep.rejected[0].message.contains("category"), "{}", rep.rejected[0].message);

        let none = write(dir.path(), "none.jsonl", "not json\n");
        assert!(matches!(ingest_qa_corpus(&none), Err(FileError::NoValidRows { rejected: 1, .. })));
        assert!(matches!(ingest_qa_corpus(&dir.path().join("missing")), Err(FileError::Io { .. })));
    }

    #[test]
    fn qa_dedup_matches_set_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows: Vec<String> = (0..990).map(|i| format!("{{\"question\":\"q{i}\",\"answer\":\"a{}\",\"category\":\"c{}\"}}", i % 13, i % 5)).collect();
        for i in 0..10 {
            rows.insert(i * 97, rows[i * 50].clone());
        }
        let path = write(dir.path(), "dups.jsonl", &(rows.join("\n") + "\n"));
        let (recs, rep) = ingest_qa_corpus(&path).unwrap();
        let oracle: HashSet<&String> = rows.iter().collect();
        assert_eq!(recs.len(), 990);
        assert_eq!(recs.len(), oracle.len());
        assert_eq!(rep.duplicates, 10);
    }

    #[test]
    fn pair_rows_labels_and_cap() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "p.jsonl", "{\"q1\":\"a\",\"q2\":\"b\",\"label\":1}\n{\"q1\":\"a\",\"q2\":\"c\",\"label\":2}\n{\"q1\":\"d\",\"q2\":\"e\",\"label\":0}\n");
        let (pairs, rep) = load_pair_dataset(&path, PairSource::Qq, None).unwrap();
        assert_eq!(pairs, vec![PairRecord::new("a", "b", 1, PairSource::Qq), PairRecord::new("d", "e", 0, PairSource::Qq)]);
        assert_eq!(rep.rejected[0].line, 2);
        let (capped, rep) = load_pair_dataset(&path, PairSource::Qq, Some(1)).unwrap();
        assert_eq!(capped.len(), 1);
        assert_eq!(rep.capped, 1);
        assert!(matches!(load_pairs_strict(&path, PairSource::Qq), Err(FileError::Row { line: 2, .. })));
    }

    #[test]
    fn jsonl_round_trip_keeps_source_tags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa_pairs.jsonl");
        let pairs = vec![PairRecord::new("q", "a", 1, PairSource::QaPos), PairRecord::new("q", "b", 0, PairSource::QaNeg)];
        write_jsonl(&path, &pairs).unwrap();
        assert_eq!(load_pairs_strict(&path, PairSource::Synthetic).unwrap(), pairs);
        assert_eq!(read_jsonl::<PairRecord>(&path).unwrap(), pairs);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(&["how do i treat a cold ?"], 1).unwrap();
        let path = dir.path().join("vocab.txt");
        save_vocab(&path, &vocab).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().take(4).collect::<Vec<_>>(), ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]);
        let back = load_vocab(&path).unwrap();
        assert_eq!(back.tokens(), vocab.tokens());
        assert_eq!(back.fingerprint(), vocab.fingerprint());
    }
}
