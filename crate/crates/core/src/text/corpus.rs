use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DatasetSplit, LabeledText, Sentiment, Source};

const BOM: &[u8] = b"\xEF\xBB\xBF";

/// Column layout of a vendor file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub delimiter: char,
    pub text_column: usize,
    pub label_column: usize,
    pub has_header: bool,
    /// Honor double-quote quoting (CSV). GermEval TSV ships unquoted text
    /// that may itself contain quote characters.
    pub quoted: bool,
}

impl ColumnSpec {
    /// Sanders corpus `full-corpus.csv`: Topic, Sentiment, TweetId, TweetDate, TweetText.
    pub fn twitter() -> Self {
        ColumnSpec {
            delimiter: ',',
            text_column: 4,
            label_column: 1,
            has_header: true,
            quoted: true,
        }
    }

    /// GermEval 2017 TSV: id, text, relevance, sentiment, aspects.
    pub fn germeval() -> Self {
        ColumnSpec {
            delimiter: '\t',
            text_column: 1,
            label_column: 3,
            has_header: false,
            quoted: false,
        }
    }

    pub fn for_source(source: Source) -> Self {
        match source {
            Source::Twitter => Self::twitter(),
            Source::Germeval => Self::germeval(),
        }
    }
}

/// A row the loader could not turn into a [`LabeledText`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    /// 1-based line number in the input file.
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadOutcome {
    pub records: Vec<LabeledText>,
    pub skipped: Vec<SkippedRow>,
}

impl LoadOutcome {
    pub fn into_split(self, name: impl Into<String>) -> DatasetSplit {
        DatasetSplit::new(name, self.records)
    }
}

fn read_utf8_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BOM) {
        bytes.drain(..BOM.len());
    }
    Ok(bytes)
}

/// Parses a delimiter-separated vendor file. Malformed rows are skipped and
/// reported; only I/O failures are errors.
pub fn load_delimited(path: &Path, source: Source, spec: &ColumnSpec) -> Result<LoadOutcome> {
    let bytes = read_utf8_bytes(path)?;
    let outcome = parse_delimited(&bytes, source, spec)?;
    if outcome.records.is_empty() {
        warn!("{}: no usable rows", path.display());
    }
    if !outcome.skipped.is_empty() {
        warn!("{}: skipped {} malformed rows", path.display(), outcome.skipped.len());
    }
    Ok(outcome)
}

fn parse_delimited(bytes: &[u8], source: Source, spec: &ColumnSpec) -> Result<LoadOutcome> {
    if !spec.delimiter.is_ascii() {
        return Err(Error::config(format!("delimiter {:?} must be ASCII", spec.delimiter)));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .has_headers(spec.has_header)
        .quoting(spec.quoted)
        .flexible(true)
        .from_reader(bytes);
    let mut out = LoadOutcome::default();
    let mut record = csv::ByteRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                match row_to_text(&record, source, spec) {
                    Ok(t) => out.records.push(t),
                    Err(reason) => out.skipped.push(SkippedRow { line, reason }),
                }
            }
            Err(e) => {
                // A parse error leaves the reader positioned after the bad row.
                let line = e.position().map_or(line, |p| p.line());
                out.skipped.push(SkippedRow {
                    line,
                    reason: e.to_string(),
                });
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn row_to_text(record: &csv::ByteRecord, source: Source, spec: &ColumnSpec) -> std::result::Result<LabeledText, String> {
    let field = |i: usize| -> std::result::Result<&str, String> {
        let raw = record
            .get(i)
            .ok_or_else(|| format!("row has {} columns, need column {i}", record.len()))?;
        std::str::from_utf8(raw).map_err(|_| format!("column {i} is not valid UTF-8"))
    };
    let label: Sentiment = field(spec.label_column)?.parse().map_err(|e: Error| e.to_string())?;
    let text = field(spec.text_column)?;
    LabeledText::new(text, label, source).map_err(|e| e.to_string())
}

pub fn load_twitter(path: &Path, spec: &ColumnSpec) -> Result<LoadOutcome> {
    load_delimited(path, Source::Twitter, spec)
}

/// Paths of the four published GermEval files; absent entries are skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GermEvalFiles {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test1: Option<PathBuf>,
    pub test2: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GermEvalSplits {
    pub train: Option<(DatasetSplit, Vec<SkippedRow>)>,
    pub dev: Option<(DatasetSplit, Vec<SkippedRow>)>,
    pub test1: Option<(DatasetSplit, Vec<SkippedRow>)>,
    pub test2: Option<(DatasetSplit, Vec<SkippedRow>)>,
}

pub fn load_germeval(files: &GermEvalFiles, spec: &ColumnSpec) -> Result<GermEvalSplits> {
    let load = |name: &str, path: &Option<PathBuf>| -> Result<Option<(DatasetSplit, Vec<SkippedRow>)>> {
        path.as_deref()
            .map(|p| {
                let o = load_delimited(p, Source::Germeval, spec)?;
                Ok((DatasetSplit::new(name, o.records), o.skipped))
            })
            .transpose()
    };
    Ok(GermEvalSplits {
        train: load("train", &files.train)?,
        dev: load("dev", &files.dev)?,
        test1: load("test1", &files.test1)?,
        test2: load("test2", &files.test2)?,
    })
}

fn escape(text: &str, out: &mut String) {
    for ch in text.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn unescape(text: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape sequence \\{}", other.map_or(String::new(), String::from))),
        }
    }
    Ok(out)
}

/// Canonical dataset text: one `label<TAB>source<TAB>text` line per record.
/// Backslash, tab, CR and LF inside the text are backslash-escaped.
pub fn write_canonical_string(records: &[LabeledText]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = write!(out, "{}\t{}\t", r.label, r.source);
        escape(&r.text, &mut out);
        out.push('\n');
    }
    out
}

pub fn write_canonical(path: &Path, records: &[LabeledText]) -> Result<()> {
    fs::write(path, write_canonical_string(records)).map_err(|e| Error::io(path, e))
}

pub fn read_canonical_str(content: &str) -> LoadOutcome {
    let mut out = LoadOutcome::default();
    for (i, line) in content.lines().enumerate() {
        let lineno = i as u64 + 1;
        let parsed = (|| {
            let mut parts = line.splitn(3, '\t');
            let (Some(label), Some(source), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                return Err("expected three tab-separated fields".to_owned());
            };
            let label: Sentiment = label.parse().map_err(|e: Error| e.to_string())?;
            let source: Source = source.parse().map_err(|e: Error| e.to_string())?;
            LabeledText::new(unescape(text)?, label, source).map_err(|e| e.to_string())
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.skipped.push(SkippedRow { line: lineno, reason }),
        }
    }
    out
}

pub fn load_canonical(path: &Path) -> Result<LoadOutcome> {
    let bytes = read_utf8_bytes(path)?;
    let content = String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let outcome = read_canonical_str(&content);
    if !outcome.skipped.is_empty() {
        warn!("{}: skipped {} malformed rows", path.display(), outcome.skipped.len());
    }
    Ok(outcome)
}
