//! Document loading and chunking.

mod markup;

pub use markup::{html_to_text, markdown_to_text};

use crate::par::{self, Strategy};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: no column named `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("fixed window needs size > overlap (got size {size}, overlap {overlap})")]
    BadWindow { size: usize, overlap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Txt,
    Csv,
    Tsv,
    /// One JSON object per line; a tabular format like CSV.
    Jsonl,
    Markdown,
    Html,
}

impl Format {
    fn extensions(self) -> &'static [&'static str] {
        match self {
            Format::Txt => &["txt"],
            Format::Csv => &["csv"],
            Format::Tsv => &["tsv"],
            Format::Jsonl => &["jsonl", "ndjson"],
            Format::Markdown => &["md", "markdown"],
            Format::Html => &["html", "htm"],
        }
    }

    pub fn is_tabular(self) -> bool {
        matches!(self, Format::Csv | Format::Tsv | Format::Jsonl)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRow {
    pub doc_id: String,
    pub source_path: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    /// `<doc_id>:<ordinal, zero-padded to 5 digits>`; sorts in document order.
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_score: Option<f64>,
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}:{ordinal:05}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub format: Option<Format>,
    /// Column holding the document text (tabular formats).
    #[serde(default)]
    pub text_column: Option<String>,
    /// Column used as `doc_id` (tabular formats); defaults to `<path>#<row>`.
    #[serde(default)]
    pub id_column: Option<String>,
}

/// Loads every matching file under `source` (or `source` itself).
///
/// Text formats give one row per file with `doc_id` equal to the
/// slash-separated path relative to `source`; tabular formats give one row
/// per record. Rows are returned in path order, then record order.
pub fn load_documents(
    source: &Path,
    format: Format,
    text_column: Option<&str>,
    id_column: Option<&str>,
) -> Result<Vec<DocumentRow>, IngestError> {
    let meta = fs::metadata(source).map_err(|e| IngestError::Io {
        path: source.to_path_buf(),
        source: e,
    })?;
    let files: Vec<(PathBuf, String)> = if meta.is_dir() {
        let mut files = Vec::new();
        for entry in WalkDir::new(source).sort_by_file_name() {
            let entry = entry.map_err(|e| IngestError::Io {
                path: source.to_path_buf(),
                source: e.into(),
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let ext = entry
                .path()
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if !ext.is_some_and(|e| format.extensions().contains(&e.as_str())) {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(source)
                .unwrap_or(entry.path())
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            files.push((entry.path().to_path_buf(), rel));
        }
        files
    } else {
        let name = source
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        vec![(source.to_path_buf(), name)]
    };

    let per_file = par::map_ordered(&files, Strategy::default(), |(path, rel)| {
        load_file(path, rel, format, text_column, id_column)
    });
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for result in per_file {
        for row in result? {
            if !seen.insert(row.doc_id.clone()) {
                return Err(IngestError::DuplicateDocId(row.doc_id));
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn read_utf8(path: &Path) -> Result<String, IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| IngestError::Format {
        path: path.to_path_buf(),
        message: format!("not valid UTF-8: {e}"),
    })?;
    Ok(match text.strip_prefix('\u{feff}') {
        Some(rest) => rest.to_string(),
        None => text,
    })
}

fn load_file(
    path: &Path,
    rel: &str,
    format: Format,
    text_column: Option<&str>,
    id_column: Option<&str>,
) -> Result<Vec<DocumentRow>, IngestError> {
    let raw = read_utf8(path)?;
    let single = |text: String| {
        Ok(vec![DocumentRow {
            doc_id: rel.to_string(),
            source_path: path.display().to_string(),
            text,
            metadata: BTreeMap::new(),
        }])
    };
    match format {
        Format::Txt => single(raw),
        Format::Markdown => single(markdown_to_text(&raw)),
        Format::Html => single(html_to_text(&raw)),
        Format::Csv | Format::Tsv | Format::Jsonl => {
            let column = text_column.ok_or_else(|| IngestError::Format {
                path: path.to_path_buf(),
                message: "tabular input needs a text column".into(),
            })?;
            let records = if format == Format::Jsonl {
                jsonl_records(path, &raw)?
            } else {
                delimited_records(path, &raw, if format == Format::Tsv { b'\t' } else { b',' }, column)?
            };
            tabular_rows(path, rel, records, column, id_column)
        }
    }
}

type Record = Vec<(String, String)>;

fn delimited_records(
    path: &Path,
    raw: &str,
    delimiter: u8,
    text_column: &str,
)  -> Result<Vec<Record>, IngestError> {
    let fmt_err = |e: csv::Error| IngestError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_reader(raw.as_bytes());
    let headers: Vec<String> = reader.headers().map_err(fmt_err)?.iter().map(String::from).collect();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(fmt_err)?;
        out.push(headers.iter().cloned().zip(row.iter().map(String::from)).collect());
    }
    if !headers.iter().any(|h| h == text_column) {
        return Err(IngestError::MissingColumn {
            path: path.to_path_buf(),
            column: text_column.to_string(),
        });
    }
    Ok(out)
}

fn jsonl_records(path: &Path, raw: &str) -> Result<Vec<Record>, IngestError> {
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| IngestError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        let obj = value.as_object().ok_or_else(|| IngestError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: expected a JSON object", lineno + 1),
        })?;
        out.push(
            obj.iter()
                .map(|(k, v)| {
                    let s = match v {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    (k.clone(), s)
                })
                .collect(),
        );
    }
    Ok(out)
}

fn tabular_rows(
    path: &Path,
    rel: &str,
    records: Vec<Record>,
    text_column: &str,
    id_column: Option<&str>,
) -> Result<Vec<DocumentRow>, IngestError> {
    let missing = |column: &str| IngestError::MissingColumn {
        path: path.to_path_buf(),
        column: column.to_string(),
    };
    let mut rows = Vec::with_capacity(records.len());
    for (i, record) in records.into_iter().enumerate() {
        let mut metadata: BTreeMap<String, String> = BTreeMap::new();
        let mut text = None;
        for (k, v) in record {
            if k == text_column {
                text = Some(v);
            } else {
                metadata.insert(k, v);
            }
        }
        let text = text.ok_or_else(|| missing(text_column))?;
        let doc_id = match id_column {
            Some(col) => metadata.get(col).cloned().ok_or_else(|| missing(col))?,
            None => format!("{rel}#{i}"),
        };
        rows.push(DocumentRow {
            doc_id,
            source_path: path.display().to_string(),
            text,
            metadata,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Splits on one or more blank lines.
    #[default]
    Paragraph,
    /// Character windows of `size`, advancing by `size - overlap`.
    FixedWindow { size: usize, overlap: usize },
    WholeDocument,
}

impl SplitStrategy {
    pub fn validate(&self) -> Result<(), IngestError> {
        match *self {
            SplitStrategy::FixedWindow { size, overlap } if size <= overlap => {
                Err(IngestError::BadWindow { size, overlap })
            }
            _ => Ok(()),
        }
    }
}

/// Paragraphs of `text`: maximal runs of non-blank lines. A line is blank
/// when it holds only whitespace; `\r\n` line endings are accepted.
pub fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
    out
}

/// Blank-line-normalized form: paragraphs joined by exactly `"\n\n"`.
pub fn normalize_blank_lines(text: &str) -> String {
    paragraphs(text).join("\n\n")
}

pub fn split(doc: &DocumentRow, strategy: SplitStrategy) -> Result<Vec<Chunk>, IngestError> {
    strategy.validate()?;
    let pieces: Vec<String> = match strategy {
        SplitStrategy::Paragraph => paragraphs(&doc.text),
        SplitStrategy::WholeDocument => {
            if doc.text.is_empty() {
                Vec::new()
            } else {
                vec![doc.text.clone()]
            }
        }
        SplitStrategy::FixedWindow { size, overlap } => {
            let chars: Vec<char> = doc.text.chars().collect();
            let step = size - overlap;
            (0..chars.len())
                .step_by(step)
                .map(|start| chars[start..(start + size).min(chars.len())].iter().collect())
                .collect()
        }
    };
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(ordinal, text)| Chunk {
            chunk_id: chunk_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            text,
            relevance_score: None,
        })
        .collect())
}

/// Splits every document, keeping document order.
pub fn split_all(docs: &[DocumentRow], strategy: SplitStrategy) -> Result<Vec<Chunk>, IngestError> {
    let per_doc = par::map_ordered(docs, Strategy::default(), |d| split(d, strategy));
    let mut out = Vec::new();
    for chunks in per_doc {
        out.extend(chunks?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> DocumentRow {
        DocumentRow {
            doc_id: "d".into(),
            source_path: "d".into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }

    fn texts(chunks: &[Chunk]) -> Vec<&str> {
        chunks.iter().map(|c| c.text.as_str()).collect()
    }

    #[test]
    fn paragraph_split() {
        let c = split(&doc("a\n\nb\n\nc"), SplitStrategy::Paragraph).unwrap();
        assert_eq!(texts(&c), ["a", "b", "c"]);
        assert_eq!(c[2].chunk_id, "d:00002");
        let c = split(&doc("a\n \n\n\nb\r\n\r\nc\nd"), SplitStrategy::Paragraph).unwrap();
        assert_eq!(texts(&c), ["a", "b", "c\nd"]);
    }

    #[test]
    fn fixed_window_offsets() {
        let text = "0123456789";
        let c = split(&doc(text), SplitStrategy::FixedWindow { size: 4, overlap: 1 }).unwrap();
        // offset_i = i * (size - overlap)
        let expected: Vec<String> = (0..4)
            .map(|i| text.chars().skip(i * 3).take(4).collect())
            .collect();
        assert_eq!(texts(&c), expected.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(texts(&c), ["0123", "3456", "6789", "9"]);
    }

    #[test]
    fn degenerate_inputs() {
        for s in [SplitStrategy::Paragraph, SplitStrategy::WholeDocument, SplitStrategy::FixedWindow { size: 3, overlap: 0 }] {
            assert!(split(&doc(""), s).unwrap().is_empty());
        }
        assert!(matches!(
            split(&doc("abc"), SplitStrategy::FixedWindow { size: 2, overlap: 2 }),
            Err(IngestError::BadWindow { .. })
        ));
        assert_eq!(split(&doc("x\n\ny"), SplitStrategy::WholeDocument).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn paragraph_reconstruction(text in "[ab \n\r]{0,60}") {
            let d = doc(&text);
            let chunks = split(&d, SplitStrategy::Paragraph).unwrap();
            let joined = chunks.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n\n");
            prop_assert_eq!(joined, normalize_blank_lines(&text));
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.ordinal, i);
                prop_assert!(!c.text.is_empty());
            }
            prop_assert_eq!(chunks, split(&d, SplitStrategy::Paragraph).unwrap());
        }

        #[test]
        fn fixed_window_covers_every_char(text in "\\PC{0,80}", size in 1usize..12, overlap in 0usize..12) {
            prop_assume!(overlap < size);
            let chunks = split(&doc(&text), SplitStrategy::FixedWindow { size, overlap }).unwrap();
            let n = text.chars().count();
            let mut covered = vec![false; n];
            for c in &chunks {
                let start = c.ordinal * (size - overlap);
                for j in 0..c.text.chars().count() {
                    covered[start + j] = true;
                }
            }
            prop_assert!(covered.into_iter().all(|x| x));
        }
    }

    #[test]
    fn loads_text_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        fs::write(dir.path().join("b.txt"), "\u{feff}beta").unwrap();
        fs::write(dir.path().join("sub/c.txt"), "gamma").unwrap();
        fs::write(dir.path().join("ignored.md"), "# no").unwrap();
        let rows = load_documents(dir.path(), Format::Txt, None, None).unwrap();
        let ids: Vec<_> = rows.iter().map(|r| r.doc_id.as_str()).collect();
        assert_eq!(ids, ["a.txt", "b.txt", "sub/c.txt"]);
        assert_eq!(rows[1].text, "beta");
    }

    #[test]
    fn loads_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calls.csv");
        let mut body = String::from("id,transcript\n");
        for i in 0..5 {
            body.push_str(&format!("c{i},\"text {i}, with comma\"\n"));
        }
        fs::write(&path, body).unwrap();
        let rows = load_documents(&path, Format::Csv, Some("transcript"), None).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[3].metadata["id"], "c3");
        assert_eq!(rows[3].text, "text 3, with comma");
        assert_eq!(rows[0].doc_id, "calls.csv#0");
        let rows = load_documents(&path, Format::Csv, Some("transcript"), Some("id")).unwrap();
        assert_eq!(rows[4].doc_id, "c4");
        assert!(matches!(
            load_documents(&path, Format::Csv, Some("body"), None),
            Err(IngestError::MissingColumn { .. })
        ));
    }

    #[test]
    fn loads_jsonl_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        fs::write(&path, "{\"id\": 7, \"text\": \"oil\"}\n\n{\"id\": 8, \"text\": \"gas\"}\n").unwrap();
        let rows = load_documents(&path, Format::Jsonl, Some("text"), Some("id")).unwrap();
        assert_eq!(rows.iter().map(|r| r.doc_id.as_str()).collect::<Vec<_>>(), ["7", "8"]);
    }

    #[test]
    fn rejects_bad_utf8_and_missing_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.txt"), [0xff, 0xfe, 0x00]).unwrap();
        assert!(matches!(
            load_documents(dir.path(), Format::Txt, None, None),
            Err(IngestError::Format { .. })
        ));
        assert!(matches!(
            load_documents(&dir.path().join("nope"), Format::Txt, None, None),
            Err(IngestError::Io { .. })
        ));
    }

    #[test]
    fn html_files_become_paragraphs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("p.html"), "<p>oil</p><p>gas</p>").unwrap();
        let rows = load_documents(dir.path(), Format::Html, None, None).unwrap();
        assert_eq!(rows[0].text, "oil\n\ngas");
    }
}
