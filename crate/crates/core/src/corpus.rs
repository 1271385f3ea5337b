//! Plain-text corpus ingestion.
//!
//! File format: documents are separated by one or more blank lines and each
//! non-blank line is one sentence. Bytes are taken as-is; invalid UTF-8 is
//! carried through untouched.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub sentences: Vec<Vec<u8>>,
}

impl Document {
    pub fn byte_len(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Document>,
    pub heldout: Vec<Document>,
    pub heldout_fraction: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub documents: usize,
    pub sentences: usize,
    pub bytes: usize,
}

/// Parses one file's bytes into documents, numbering from `first_id`.
pub fn parse_documents(bytes: &[u8], first_id: usize) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current: Vec<Vec<u8>> = Vec::new();
    let mut lines = bytes.split(|&b| b == b'\n').peekable();
    while let Some(line) = lines.next() {
        // A trailing newline yields one final empty slice; it is not a line.
        if line.is_empty() && lines.peek().is_none() {
            break;
        }
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(Document {
                    id: first_id + docs.len(),
                    sentences: std::mem::take(&mut current),
                });
            }
        } else {
            current.push(line.to_vec());
        }
    }
    if !current.is_empty() {
        docs.push(Document {
            id: first_id + docs.len(),
            sentences: current,
        });
    }
    docs
}

/// Loads documents from files in the given order. Ids run globally across files.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let parsed = parse_documents(&bytes, docs.len());
        docs.extend(parsed);
    }
    Ok(docs)
}

/// Expands a directory argument into its `.txt` files (sorted); plain files pass through.
pub fn resolve_inputs<P: AsRef<Path>>(inputs: &[P]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        let input = input.as_ref();
        let meta = fs::metadata(input).map_err(|e| Error::io(input, e))?;
        if meta.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(input.to_path_buf());
        }
    }
    Ok(out)
}

/// Canonical serialization: the inverse of [`parse_documents`] up to blank-line
/// normalization.
pub fn render_documents(docs: &[Document]) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push(b'\n');
        }
        for s in &doc.sentences {
            out.extend_from_slice(s);
            out.push(b'\n');
        }
    }
    out
}

pub fn stats(docs: &[Document]) -> CorpusStats {
    CorpusStats {
        documents: docs.len(),
        sentences: docs.iter().map(|d| d.sentences.len()).sum(),
        bytes: docs.iter().map(Document::byte_len).sum(),
    }
}

/// Per-document held-out assignment driven by a seeded hash of the document id.
pub fn split_heldout(docs: Vec<Document>, fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "heldout fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let (heldout, train) = docs.into_iter().partition(|d| {
        rng::unit_f64(rng::mix(&[seed, rng::tag::SPLIT, d.id as u64])) < fraction
    });
    Ok(CorpusSplit {
        train,
        heldout,
        heldout_fraction: fraction,
    })
}
