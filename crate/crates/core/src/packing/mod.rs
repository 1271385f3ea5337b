//! Pretraining instance construction.
//!
//! Every instance starts with CLS and ends with EOS. The two pair formats
//! lay out `[CLS] A [SEP] B [EOS]` and carry an NSP label; the two
//! sentence-packing formats lay out `[CLS] body [EOS]` where FULL-SENTENCES
//! puts a SEP at each document change inside the body.

mod batch;
mod contiguous;
mod io;
mod pairs;

use std::fmt;
use std::str::FromStr;

use crate::bpe::{SpecialIds, Vocab};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::rng;

pub use batch::{batch_by_count, batch_by_tokens, TokenBudgetBatch, TokenCount};
pub use contiguous::{pack_doc_sentences, pack_full_sentences};
pub use io::{
    read_instances, read_instances_from, write_instances, write_instances_to, InstanceFileHeader,
};
pub use pairs::{pack_segment_pair, pack_sentence_pair};

/// Smallest supported maximum sequence length.
pub const MIN_MAX_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PackingFormat {
    SegmentPairNsp,
    SentencePairNsp,
    FullSentences,
    DocSentences,
}

impl PackingFormat {
    pub const ALL: [PackingFormat; 4] = [
        PackingFormat::SegmentPairNsp,
        PackingFormat::SentencePairNsp,
        PackingFormat::FullSentences,
        PackingFormat::DocSentences,
    ];

    pub fn has_nsp(self) -> bool {
        matches!(self, PackingFormat::SegmentPairNsp | PackingFormat::SentencePairNsp)
    }

    pub fn name(self) -> &'static str {
        match self {
            PackingFormat::SegmentPairNsp => "segment-pair",
            PackingFormat::SentencePairNsp => "sentence-pair",
            PackingFormat::FullSentences => "full-sentences",
            PackingFormat::DocSentences => "doc-sentences",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for PackingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PackingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_suffix("+nsp").unwrap_or(&key);
        Self::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::Argument(format!("unknown packing format {s:?}")))
    }
}

impl serde::Serialize for PackingFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for PackingFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A document after tokenization, sentence by sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub id: usize,
    pub sentences: Vec<Vec<u32>>,
}

impl TokenizedDoc {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

pub fn tokenize_documents(docs: &[Document], vocab: &Vocab) -> Vec<TokenizedDoc> {
    docs.iter()
        .map(|d| TokenizedDoc {
            id: d.id,
            sentences: d
                .sentences
                .iter()
                .map(|s| vocab.encode(s))
                .filter(|s| !s.is_empty())
                .collect(),
        })
        .collect()
}

/// Where a run of body tokens came from: `tokens[start..end]` are tokens of
/// sentence `sentence` in document `doc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece {
    pub doc: usize,
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// `Some(true)` when segment B continues segment A.
    pub nsp_label: Option<bool>,
    pub provenance: Vec<Piece>,
}

impl TrainingInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn documents(&self) -> Vec<usize> {
        let mut docs: Vec<usize> = self.provenance.iter().map(|p| p.doc).collect();
        docs.dedup();
        docs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PackStats {
    /// Documents too short to yield any instance.
    pub skipped_documents: usize,
    /// Segments dropped because no valid pair could be formed.
    pub skipped_segments: usize,
    /// Positive labels forced because no other document exists.
    pub no_negative_source: usize,
    /// Instances that lost tokens to length truncation.
    pub truncated: usize,
    pub truncated_tokens: usize,
    /// Sentences continued across an instance boundary.
    pub split_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub instances: Vec<TrainingInstance>,
    pub stats: PackStats,
}

pub(crate) fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < MIN_MAX_LEN {
        return Err(Error::Argument(format!(
            "maximum sequence length must be at least {MIN_MAX_LEN}, got {max_len}"
        )));
    }
    Ok(())
}

/// Packs in the given format; pair formats draw from a generator keyed by `seed`.
pub fn pack(
    format: PackingFormat,
    docs: &[TokenizedDoc],
    specials: SpecialIds,
    max_len: usize,
    seed: u64,
) -> Result<Packed> {
    let mut rng = rng::keyed_rng(&[seed, rng::tag::PACK, format.code() as u64]);
    match format {
        PackingFormat::SegmentPairNsp => pack_segment_pair(docs, specials, max_len, &mut rng),
        PackingFormat::SentencePairNsp => pack_sentence_pair(docs, specials, max_len, &mut rng),
        PackingFormat::FullSentences => pack_full_sentences(docs, specials, max_len),
        PackingFormat::DocSentences => pack_doc_sentences(docs, specials, max_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_names_parse_back() {
        for f in PackingFormat::ALL {
            assert_eq!(f.name().parse::<PackingFormat>().unwrap(), f);
            assert_eq!(PackingFormat::from_code(f.code()), Some(f));
        }
        assert_eq!(
            "SEGMENT-PAIR+NSP".parse::<PackingFormat>().unwrap(),
            PackingFormat::SegmentPairNsp
        );
        assert!("paragraphs".parse::<PackingFormat>().is_err());
    }

    #[test]
    fn nsp_only_for_pair_formats() {
        assert!(PackingFormat::SegmentPairNsp.has_nsp());
        assert!(PackingFormat::SentencePairNsp.has_nsp());
        assert!(!PackingFormat::FullSentences.has_nsp());
        assert!(!PackingFormat::DocSentences.has_nsp());
    }

    #[test]
    fn tokenize_drops_nothing_for_nonempty_sentences() {
        let docs = vec![Document {
            id: 4,
            sentences: vec![b"ab".to_vec(), b"c".to_vec()],
        }];
        let t = tokenize_documents(&docs, &Vocab::bytes_only());
        assert_eq!(t[0].id, 4);
        assert_eq!(t[0].sentences, vec![vec![97, 98], vec![99]]);
    }
}
