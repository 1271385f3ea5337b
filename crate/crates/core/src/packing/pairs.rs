//! SEGMENT-PAIR and SENTENCE-PAIR packing with NSP labels.
//!
//! Labels are drawn first with probability one half. Positives take segment
//! B from the text that directly follows A in the same document; negatives
//! take B from a uniformly chosen other document, starting at a uniformly
//! chosen sentence.

use rand::Rng;

use super::{check_max_len, PackStats, Packed, Piece, TokenizedDoc, TrainingInstance};
use crate::bpe::SpecialIds;
use crate::error::Result;

/// A segment under construction: concatenated tokens plus their origin.
#[derive(Default)]
struct Segment {
    tokens: Vec<u32>,
    pieces: Vec<(usize, usize, usize)>, // (doc, sentence, token count)
}

impl Segment {
    fn push(&mut self, doc: usize, sentence: usize, tokens: &[u32]) {
        self.tokens.extend_from_slice(tokens);
        self.pieces.push((doc, sentence, tokens.len()));
    }

    fn len(&self) -> usize {
        self.tokens.len()
    }

    fn pop_token(&mut self) {
        self.tokens.pop();
        if let Some(last) = self.pieces.last_mut() {
            last.2 -= 1;
            if last.2 == 0 {
                self.pieces.pop();
            }
        }
    }
}

/// Trims the longer segment from the right until both fit in `budget` tokens.
/// Returns the number of removed tokens.
fn truncate_pair(a: &mut Segment, b: &mut Segment, budget: usize) -> usize {
    let mut removed = 0;
    while a.len() + b.len() > budget {
        if a.len() > b.len() {
            a.pop_token();
        } else {
            b.pop_token();
        }
        removed += 1;
    }
    removed
}

fn assemble(
    a: Segment,
    b: Segment,
    label: bool,
    specials: SpecialIds,
) -> TrainingInstance {
    let len = a.len() + b.len() + 3;
    let mut tokens = Vec::with_capacity(len);
    let mut provenance = Vec::with_capacity(a.pieces.len() + b.pieces.len());
    tokens.push(specials.cls);
    let mut at = 1;
    for &(doc, sentence, n) in &a.pieces {
        provenance.push(Piece { doc, sentence, start: at, end: at + n });
        at += n;
    }
    tokens.extend_from_slice(&a.tokens);
    tokens.push(specials.sep);
    at += 1;
    for &(doc, sentence, n) in &b.pieces {
        provenance.push(Piece { doc, sentence, start: at, end: at + n });
        at += n;
    }
    tokens.extend_from_slice(&b.tokens);
    tokens.push(specials.eos);
    let first_b = a.len() + 2;
    let segment_ids = (0..len).map(|i| u8::from(i >= first_b)).collect();
    TrainingInstance {
        tokens,
        segment_ids,
        nsp_label: Some(label),
        provenance,
    }
}

fn other_doc<R: Rng>(rng: &mut R, n_docs: usize, current: usize) -> usize {
    let pick = rng.gen_range(0..n_docs - 1);
    if pick >= current {
        pick + 1
    } else {
        pick
    }
}

/// Builds a segment from `doc`, starting at sentence `from`, until it holds
/// at least `target` tokens or the document ends.
fn fill_from(doc: &TokenizedDoc, from: usize, target: usize) -> Segment {
    let mut seg = Segment::default();
    for (idx, s) in doc.sentences.iter().enumerate().skip(from) {
        if seg.len() >= target {
            break;
        }
        seg.push(doc.id, idx, s);
    }
    seg
}

fn draw_label<R: Rng>(rng: &mut R, n_docs: usize, stats: &mut PackStats) -> bool {
    if n_docs < 2 {
        stats.no_negative_source += 1;
        true
    } else {
        rng.gen_bool(0.5)
    }
}

/// Pairs of multi-sentence segments whose combined length (with the three
/// specials) is at most `max_len`.
pub fn pack_segment_pair<R: Rng>(
    docs: &[TokenizedDoc],
    specials: SpecialIds,
    max_len: usize,
    rng: &mut R,
) -> Result<Packed> {
    check_max_len(max_len)?;
    let max_body = max_len - 3;
    let mut stats = PackStats::default();
    let mut out = Vec::new();

    for (doc_idx, doc) in docs.iter().enumerate() {
        if doc.token_count() < 2 {
            stats.skipped_documents += 1;
            continue;
        }
        let n = doc.sentences.len();
        let mut i = 0;
        while i < n {
            let mut chunk_end = i;
            let mut chunk_len = 0;
            while chunk_end < n && chunk_len < max_body {
                chunk_len += doc.sentences[chunk_end].len();
                chunk_end += 1;
            }
            let a_target = rng.gen_range(1..max_body);
            let positive = draw_label(rng, docs.len(), &mut stats);

            let (mut a, mut b, next) = if positive {
                if chunk_end - i >= 2 {
                    let mut a = Segment::default();
                    let mut a_end = i;
                    while a_end < chunk_end - 1 && (a_end == i || a.len() < a_target) {
                        a.push(doc.id, a_end, &doc.sentences[a_end]);
                        a_end += 1;
                    }
                    let mut b = Segment::default();
                    for s in a_end..chunk_end {
                        b.push(doc.id, s, &doc.sentences[s]);
                    }
                    (a, b, chunk_end)
                } else {
                    // One long sentence: split it inside so B still continues A.
                    let s = &doc.sentences[i];
                    if s.len() < 2 {
                        stats.skipped_segments += 1;
                        i += 1;
                        continue;
                    }
                    let cut = a_target.clamp(1, s.len() - 1);
                    let mut a = Segment::default();
                    a.push(doc.id, i, &s[..cut]);
                    let mut b = Segment::default();
                    b.push(doc.id, i, &s[cut..]);
                    (a, b, i + 1)
                }
            } else {
                let a = fill_from(doc, i, a_target);
                let a_end = i + a.pieces.len();
                let source = &docs[other_doc(rng, docs.len(), doc_idx)];
                let start = rng.gen_range(0..source.sentences.len().max(1));
                let b = fill_from(source, start, max_body.saturating_sub(a.len()).max(1));
                if b.len() == 0 {
                    stats.skipped_segments += 1;
                    i = a_end;
                    continue;
                }
                (a, b, a_end)
            };

            let removed = truncate_pair(&mut a, &mut b, max_body);
            if removed > 0 {
                stats.truncated += 1;
                stats.truncated_tokens += removed;
            }
            out.push(assemble(a, b, positive, specials));
            i = next;
        }
    }
    Ok(Packed {
        instances: out,
        stats,
    })
}

/// Pairs of single sentences. Each sentence with a successor serves once as
/// segment A. Sentences longer than `max_len - 3` are cut from the right.
pub fn pack_sentence_pair<R: Rng>(
    docs: &[TokenizedDoc],
    specials: SpecialIds,
    max_len: usize,
    rng: &mut R,
) -> Result<Packed> {
    check_max_len(max_len)?;
    let max_body = max_len - 3;
    let mut stats = PackStats::default();
    let mut out = Vec::new();

    let clip = |doc: usize, idx: usize, s: &[u32], stats: &mut PackStats| {
        let mut seg = Segment::default();
        let keep = s.len().min(max_body);
        if keep < s.len() {
            stats.truncated += 1;
            stats.truncated_tokens += s.len() - keep;
        }
        seg.push(doc, idx, &s[..keep]);
        seg
    };

    for (doc_idx, doc) in docs.iter().enumerate() {
        let n = doc.sentences.len();
        if n < 2 {
            stats.skipped_documents += 1;
            continue;
        }
        for i in 0..n - 1 {
            let positive = draw_label(rng, docs.len(), &mut stats);
            let mut a = clip(doc.id, i, &doc.sentences[i], &mut stats);
            let mut b = if positive {
                clip(doc.id, i + 1, &doc.sentences[i + 1], &mut stats)
            } else {
                let source = &docs[other_doc(rng, docs.len(), doc_idx)];
                if source.sentences.is_empty() {
                    stats.skipped_segments += 1;
                    continue;
                }
                let s = rng.gen_range(0..source.sentences.len());
                clip(source.id, s, &source.sentences[s], &mut stats)
            };
            let removed = truncate_pair(&mut a, &mut b, max_body);
            if removed > 0 {
                stats.truncated += 1;
                stats.truncated_tokens += removed;
            }
            out.push(assemble(a, b, positive, specials));
        }
    }
    Ok(Packed {
        instances: out,
        stats,
    })
}
