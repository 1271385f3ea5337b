//! FULL-SENTENCES and DOC-SENTENCES packing.
//!
//! Sentences are appended in corpus order. When the next sentence does not
//! fit, the instance is closed if it is already within 8 tokens of the
//! maximum length; otherwise the sentence is split and its tail opens the
//! next instance. Every corpus token therefore lands in exactly one instance.

use super::{check_max_len, PackStats, Packed, Piece, TokenizedDoc, TrainingInstance};
use crate::bpe::SpecialIds;
use crate::error::Result;

/// Instances other than the last one (per stream, or per document when
/// boundaries are respected) are at least `max_len - FULL_LENGTH_SLACK` long.
pub const FULL_LENGTH_SLACK: usize = 8;

struct Builder<'a> {
    specials: SpecialIds,
    max_len: usize,
    body: Vec<u32>,
    pieces: Vec<Piece>,
    out: Vec<TrainingInstance>,
    stats: &'a mut PackStats,
}

impl Builder<'_> {
    fn capacity(&self) -> usize {
        self.max_len - 2
    }

    fn room(&self) -> usize {
        self.capacity() - self.body.len()
    }

    fn is_full_length(&self) -> bool {
        self.body.len() + 2 + FULL_LENGTH_SLACK >= self.max_len
    }

    fn last_doc(&self) -> Option<usize> {
        self.pieces.last().map(|p| p.doc)
    }

    fn flush(&mut self) {
        if self.body.is_empty() {
            return;
        }
        let mut tokens = Vec::with_capacity(self.body.len() + 2);
        tokens.push(self.specials.cls);
        tokens.append(&mut self.body);
        tokens.push(self.specials.eos);
        let segment_ids = vec![0; tokens.len()];
        self.out.push(TrainingInstance {
            tokens,
            segment_ids,
            nsp_label: None,
            provenance: std::mem::take(&mut self.pieces),
        });
    }

    fn append(&mut self, doc: usize, sentence: usize, tokens: &[u32]) {
        // Body positions are offset by one for the leading CLS.
        let start = self.body.len() + 1;
        self.body.extend_from_slice(tokens);
        self.pieces.push(Piece {
            doc,
            sentence,
            start,
            end: start + tokens.len(),
        });
    }

    fn push_sentence(&mut self, doc: usize, sentence: usize, mut rest: &[u32]) {
        while !rest.is_empty() {
            let boundary = self.last_doc().is_some_and(|d| d != doc);
            let room = self.room();
            // A separator is only worth placing if at least one token follows it.
            if boundary && room < 2 {
                self.flush();
                continue;
            }
            let avail = room - usize::from(boundary);
            if rest.len() <= avail {
                if boundary {
                    self.body.push(self.specials.sep);
                }
                self.append(doc, sentence, rest);
                return;
            }
            if !self.body.is_empty() && self.is_full_length() {
                self.flush();
                continue;
            }
            if boundary {
                self.body.push(self.specials.sep);
            }
            let (head, tail) = rest.split_at(avail);
            self.append(doc, sentence, head);
            self.stats.split_sentences += 1;
            self.flush();
            rest = tail;
        }
    }
}

fn pack_contiguous(
    docs: &[TokenizedDoc],
    specials: SpecialIds,
    max_len: usize,
    cross_documents: bool,
) -> Result<Packed> {
    check_max_len(max_len)?;
    let mut stats = PackStats::default();
    let mut builder = Builder {
        specials,
        max_len,
        body: Vec::new(),
        pieces: Vec::new(),
        out: Vec::new(),
        stats: &mut stats,
    };
    for doc in docs {
        if doc.token_count() == 0 {
            builder.stats.skipped_documents += 1;
            continue;
        }
        if !cross_documents {
            builder.flush();
        }
        for (idx, sentence) in doc.sentences.iter().enumerate() {
            builder.push_sentence(doc.id, idx, sentence);
        }
    }
    builder.flush();
    let instances = builder.out;
    Ok(Packed { instances, stats })
}

/// Packs sentences contiguously across document boundaries, inserting one
/// SEP at each document change inside an instance. No NSP labels.
pub fn pack_full_sentences(
    docs: &[TokenizedDoc],
    specials: SpecialIds,
    max_len: usize,
) -> Result<Packed> {
    pack_contiguous(docs, specials, max_len, true)
}

/// Like [`pack_full_sentences`] but every instance holds tokens of one
/// document only; instances at document ends may be short.
pub fn pack_doc_sentences(
    docs: &[TokenizedDoc],
    specials: SpecialIds,
    max_len: usize,
) -> Result<Packed> {
    pack_contiguous(docs, specials, max_len, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: u32 = 100;

    fn specials() -> SpecialIds {
        SpecialIds::for_text_size(TEXT)
    }

    fn doc(id: usize, lens: &[usize]) -> TokenizedDoc {
        TokenizedDoc {
            id,
            sentences: lens
                .iter()
                .enumerate()
                .map(|(s, &n)| (0..n).map(|t| ((id * 7 + s * 3 + t) % 90) as u32).collect())
                .collect(),
        }
    }

    #[test]
    fn two_short_docs_share_one_instance_with_one_sep() {
        let s = specials();
        let p = pack_full_sentences(&[doc(0, &[3, 2]), doc(1, &[4])], s, 32).unwrap();
        assert_eq!(p.instances.len(), 1);
        let inst = &p.instances[0];
        assert_eq!(inst.tokens.first(), Some(&s.cls));
        assert_eq!(inst.tokens.last(), Some(&s.eos));
        assert_eq!(inst.tokens.iter().filter(|&&t| t == s.sep).count(), 1);
        assert_eq!(inst.len(), 3 + 2 + 4 + 1 + 2);
        assert_eq!(inst.nsp_label, None);
        assert_eq!(inst.tokens[6], s.sep);
    }

    #[test]
    fn doc_sentences_resets_at_document_end() {
        let p = pack_doc_sentences(&[doc(0, &[3]), doc(1, &[2, 2])], specials(), 32).unwrap();
        assert_eq!(p.instances.len(), 2);
        assert_eq!(p.instances[0].len(), 5);
        for inst in &p.instances {
            assert_eq!(inst.documents().len(), 1);
            assert!(!inst.tokens.contains(&specials().sep));
        }
    }

    #[test]
    fn non_final_instances_are_full_length() {
        let docs: Vec<_> = (0..20).map(|i| doc(i, &[5, 17, 9, 30, 2])).collect();
        let max_len = 40;
        let p = pack_full_sentences(&docs, specials(), max_len).unwrap();
        let n = p.instances.len();
        for inst in &p.instances[..n - 1] {
            assert!(inst.len() <= max_len);
            assert!(inst.len() + FULL_LENGTH_SLACK >= max_len, "short instance {}", inst.len());
        }
    }

    #[test]
    fn oversized_sentence_is_continued_not_dropped() {
        let p = pack_full_sentences(&[doc(0, &[25])], specials(), 10).unwrap();
        let body: usize = p.instances.iter().map(|i| i.len() - 2).sum();
        assert_eq!(body, 25);
        assert!(p.stats.split_sentences > 0);
        assert_eq!(p.stats.truncated, 0);
    }

    #[test]
    fn rejects_tiny_max_len() {
        assert!(pack_full_sentences(&[doc(0, &[1])], specials(), 7).is_err());
    }
}
