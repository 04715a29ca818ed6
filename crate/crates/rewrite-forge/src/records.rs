//! JSON Lines document files.
//!
//! One object per line with the fields `id`, `text`, `stem_score`,
//! `edu_score`, optional `url`, optional `origin` (`{kind, style, parent_id}`)
//! and optional `token_count`. Fields this tool does not know about are kept
//! and written back unchanged.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rewrite_forge_core::tokens::Vocabulary;
use rewrite_forge_core::{CountingScheme, Document, Origin, QualityScores, RewriteStyle, TokenCounter};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("reading documents: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// A single bad line. Reading continues past it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {cause}")]
pub struct RecordError {
    pub line: u64,
    pub cause: String,
}

#[derive(Debug, Error)]
#[error("write failed after {written} records: {source}")]
pub struct WriteError {
    pub written: u64,
    #[source]
    pub source: io::Error,
}

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("vocabulary file {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("vocabulary file {0} contains no tokens")]
    Empty(String),
}

/// Resolves a counting scheme into a usable counter, reading the vocabulary
/// file relative to `base_dir` when needed.
pub fn load_counter(scheme: &CountingScheme, base_dir: &Path) -> Result<TokenCounter, SchemeError> {
    match scheme {
        CountingScheme::WhitespaceWords => Ok(TokenCounter::WhitespaceWords),
        CountingScheme::BytesDiv4 => Ok(TokenCounter::BytesDiv4),
        CountingScheme::VocabularyFile { path } => {
            let full = base_dir.join(path);
            let text = std::fs::read_to_string(&full).map_err(|source| SchemeError::Unreadable {
                path: full.display().to_string(),
                source,
            })?;
            Vocabulary::from_lines(text.lines())
                .map(TokenCounter::Vocabulary)
                .map_err(|_| SchemeError::Empty(full.display().to_string()))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WireOrigin {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style: Option<RewriteStyle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireRecord {
    id: String,
    text: String,
    stem_score: f64,
    edu_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<WireOrigin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_count: Option<u64>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn decode(line: &str, counter: &TokenCounter) -> Result<Document, String> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let scores = QualityScores::new(wire.stem_score, wire.edu_score)
        .map_err(|_| format!("score out of range (stem={}, edu={})", wire.stem_score, wire.edu_score))?;
    let origin = match wire.origin {
        None => Origin::Original,
        Some(o) => match (o.kind.as_str(), o.style, o.parent_id) {
            ("original", None, None) => Origin::Original,
            ("synthetic", Some(style), Some(parent_id)) if !parent_id.is_empty() => {
                Origin::Synthetic { style, parent_id }
            }
            ("original", _, _) => return Err("original origin must not carry style or parent_id".into()),
            ("synthetic", _, _) => return Err("synthetic origin needs both style and parent_id".into()),
            (kind, _, _) => return Err(format!("unknown origin kind {kind:?}")),
        },
    };
    let doc = Document {
        token_count: counter.count(&wire.text),
        id: wire.id,
        text: wire.text,
        scores,
        origin,
        source_url: wire.url,
        extra: wire.extra.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
    };
    doc.validate().map_err(|e| e.to_string())?;
    Ok(doc)
}

fn encode(doc: &Document) -> Result<String, serde_json::Error> {
    let origin = match &doc.origin {
        Origin::Original => None,
        Origin::Synthetic { style, parent_id } => Some(WireOrigin {
            kind: "synthetic".into(),
            style: Some(*style),
            parent_id: Some(parent_id.clone()),
        }),
    };
    let mut extra = Map::new();
    for (k, raw) in &doc.extra {
        extra.insert(k.clone(), serde_json::from_str(raw)?);
    }
    serde_json::to_string(&WireRecord {
        id: doc.id.clone(),
        text: doc.text.clone(),
        stem_score: doc.scores.stem(),
        edu_score: doc.scores.edu(),
        url: doc.source_url.clone(),
        origin,
        token_count: Some(doc.token_count),
        extra,
    })
}

/// Streaming reader over a document file. Token counts are always recomputed
/// with the supplied counter; a stored `token_count` is not trusted.
pub struct DocumentReader<R> {
    reader: R,
    counter: TokenCounter,
    line: u64,
    seen: HashSet<String>,
    allow_duplicates: bool,
    buf: Vec<u8>,
}

impl<R: BufRead> DocumentReader<R> {
    pub fn new(reader: R, counter: TokenCounter) -> Self {
        Self {
            reader,
            counter,
            line: 0,
            seen: HashSet::new(),
            allow_duplicates: false,
            buf: Vec::new(),
        }
    }

    /// Training shards repeat documents across epochs.
    pub fn allow_duplicate_ids(mut self) -> Self {
        self.allow_duplicates = true;
        self
    }
}

impl<R: BufRead> Iterator for DocumentReader<R> {
    type Item = Result<Document, LoadError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(LoadError::Io(e))),
            }
            self.line += 1;
            let line = self.line;
            let text = match std::str::from_utf8(&self.buf) {
                Ok(t) => t.trim_end_matches(['\n', '\r']),
                Err(_) => {
                    return Some(Err(RecordError {
                        line,
                        cause: "invalid UTF-8".into(),
                    }
                    .into()))
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            let result = decode(text, &self.counter).and_then(|doc| {
                if !self.allow_duplicates && !self.seen.insert(doc.id.clone()) {
                    Err(format!("duplicate document id {}", doc.id))
                } else {
                    Ok(doc)
                }
            });
            return Some(result.map_err(|cause| RecordError { line, cause }.into()));
        }
    }
}

pub fn load_documents<R: BufRead>(reader: R, counter: TokenCounter) -> DocumentReader<R> {
    DocumentReader::new(reader, counter)
}

/// Valid documents and per-record errors from a file.
#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    pub errors: Vec<RecordError>,
}

pub fn read_corpus(path: &Path, counter: &TokenCounter) -> io::Result<LoadedCorpus> {
    let file = File::open(path)?;
    let mut out = LoadedCorpus::default();
    for item in load_documents(BufReader::new(file), counter.clone()) {
        match item {
            Ok(doc) => out.documents.push(doc),
            Err(LoadError::Record(e)) => out.errors.push(e),
            Err(LoadError::Io(e)) => return Err(e),
        }
    }
    Ok(out)
}

/// Reads a file that this tool wrote itself; any bad record is fatal.
pub fn read_documents_strict(
    path: &Path,
    counter: &TokenCounter,
    allow_duplicates: bool,
) -> Result<Vec<Document>, LoadError> {
    let file = File::open(path)?;
    let mut reader = load_documents(BufReader::new(file), counter.clone());
    if allow_duplicates {
        reader = reader.allow_duplicate_ids();
    }
    reader.collect()
}

/// Writes one record per line, returning how many were written.
pub fn write_documents<'a, W, I>(documents: I, sink: W) -> Result<u64, WriteError>
where
    W: Write,
    I: IntoIterator<Item = &'a Document>,
{
    let mut sink = BufWriter::new(sink);
    let mut written = 0;
    for doc in documents {
        write_document(doc, &mut sink).map_err(|source| WriteError { written, source })?;
        written += 1;
    }
    sink.flush().map_err(|source| WriteError { written, source })?;
    Ok(written)
}

pub fn write_document<W: Write>(doc: &Document, sink: &mut W) -> io::Result<()> {
    let line = encode(doc).map_err(io::Error::other)?;
    sink.write_all(line.as_bytes())?;
    sink.write_all(b"\n")
}

/// Writes `documents` to `path`, replacing it.
pub fn write_documents_to(path: &Path, documents: &[&Document]) -> Result<u64, WriteError> {
    let file = File::create(path).map_err(|source| WriteError { written: 0, source })?;
    write_documents(documents.iter().copied(), file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(input: &str) -> (Vec<Document>, Vec<RecordError>) {
        let mut docs = Vec::new();
        let mut errs = Vec::new();
        for item in load_documents(input.as_bytes(), TokenCounter::WhitespaceWords) {
            match item {
                Ok(d) => docs.push(d),
                Err(LoadError::Record(e)) => errs.push(e),
                Err(e) => panic!("{e}"),
            }
        }
        (docs, errs)
    }

    #[test]
    fn empty_stream() {
        let (docs, errs) = load("");
        assert!(docs.is_empty() && errs.is_empty());
    }

    #[test]
    fn single_record() {
        let (docs, errs) = load(r#"{"id":"a","text":"abc def","stem_score":3.0,"edu_score":1.0}"#);
        assert!(errs.is_empty());
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].token_count, 2);
        assert_eq!(docs[0].origin, Origin::Original);
    }

    #[test]
    fn score_out_of_range_is_per_record() {
        let input = concat!(
            r#"{"id":"a","text":"abc","stem_score":1.0,"edu_score":7.2}"#,
            "\n",
            "not json\n",
            "\n",
            r#"{"id":"b","text":"ok","stem_score":0,"edu_score":5}"#,
            "\n"
        );
        let (docs, errs) = load(input);
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].id, "b");
        assert_eq!(errs.len(), 2);
        assert_eq!(errs[0].line, 1);
        assert!(errs[0].cause.contains("score out of range"));
        assert_eq!(errs[1].line, 2);
    }

    #[test]
    fn origin_consistency_enforced() {
        let input = concat!(
            r#"{"id":"s","text":"x","stem_score":1,"edu_score":1,"origin":{"kind":"synthetic","style":"qa"}}"#,
            "\n",
            r#"{"id":"t","text":"x","stem_score":1,"edu_score":1,"origin":{"kind":"original","parent_id":"p"}}"#,
            "\n",
            r#"{"id":"u","text":"x","stem_score":1,"edu_score":1,"origin":{"kind":"synthetic","style":"hard","parent_id":"p"}}"#,
            "\n",
        );
        let (docs, errs) = load(input);
        assert_eq!(errs.len(), 2);
        assert_eq!(docs[0].origin.parent_id(), Some("p"));
    }

    #[test]
    fn duplicate_and_empty_text() {
        let input = concat!(
            r#"{"id":"a","text":"x","stem_score":1,"edu_score":1}"#,
            "\n",
            r#"{"id":"a","text":"y","stem_score":1,"edu_score":1}"#,
            "\n",
            r#"{"id":"b","text":"","stem_score":1,"edu_score":1}"#,
            "\n",
        );
        let (docs, errs) = load(input);
        assert_eq!(docs.len(), 1);
        assert!(errs[0].cause.contains("duplicate"));
        assert!(errs[1].cause.contains("empty text"));
    }

    #[test]
    fn invalid_utf8_is_per_record() {
        let mut input = b"\xff\xfe\n".to_vec();
        input.extend_from_slice(br#"{"id":"a","text":"x","stem_score":1,"edu_score":1}"#);
        let items: Vec<_> = load_documents(&input[..], TokenCounter::WhitespaceWords).collect();
        assert_eq!(items.len(), 2);
        assert!(matches!(&items[0], Err(LoadError::Record(e)) if e.cause == "invalid UTF-8"));
        assert!(items[1].is_ok());
    }

    #[test]
    fn round_trip_with_newlines_and_unknown_fields() {
        let input = concat!(
            r#"{"id":"a","text":"linha um\nlinha dois","stem_score":2.75,"edu_score":0.1,"url":"https://x.br","lang":"pt","meta":{"k":[1,2]}}"#,
            "\n",
            r#"{"id":"b","text":"tab\there \"q\"","stem_score":0,"edu_score":5,"origin":{"kind":"synthetic","style":"easy","parent_id":"a"}}"#,
            "\n",
            r#"{"id":"c","text":"três","stem_score":1.5,"edu_score":1.8}"#,
            "\n",
        );
        let (docs, errs) = load(input);
        assert!(errs.is_empty());
        let mut out = Vec::new();
        assert_eq!(write_documents(&docs, &mut out).unwrap(), 3);
        let text = String::from_utf8(out.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains(r#""lang":"pt","meta":{"k":[1,2]}"#));
        let (again, errs) = load(&text);
        assert!(errs.is_empty());
        assert_eq!(again, docs);
        assert_eq!(again[0].text, "linha um\nlinha dois");
    }

    #[test]
    fn empty_write() {
        let mut out = Vec::new();
        assert_eq!(write_documents(&[], &mut out).unwrap(), 0);
        assert!(out.is_empty());
    }

    struct FailAfter(usize);
    impl Write for FailAfter {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            if self.0 < buf.len() {
                return Err(io::Error::other("disk full"));
            }
            self.0 -= buf.len();
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn write_failure_reports_partial_count() {
        let (docs, _) = load(concat!(r#"{"id":"a","text":"x","stem_score":1,"edu_score":1}"#, "\n"));
        let err = write_documents(&docs, FailAfter(0)).unwrap_err();
        assert_eq!(err.written, 1);
    }
}
