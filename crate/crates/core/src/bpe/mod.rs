//! Byte-level BPE.
//!
//! Ids `0..256` are raw bytes, `256..256 + merges` are merged tokens in rank
//! order, and the five special tokens sit directly above all text ids.

mod io;
mod train;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use io::{load_vocab, save_vocab};
pub use train::train_bpe;

pub const BYTE_TOKENS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Cls,
    Sep,
    Eos,
    Mask,
    Pad,
}

impl Special {
    pub const ALL: [Special; 5] = [
        Special::Cls,
        Special::Sep,
        Special::Eos,
        Special::Mask,
        Special::Pad,
    ];
    pub const COUNT: usize = Self::ALL.len();

    pub fn name(self) -> &'static str {
        match self {
            Special::Cls => "CLS",
            Special::Sep => "SEP",
            Special::Eos => "EOS",
            Special::Mask => "MASK",
            Special::Pad => "PAD",
        }
    }

    pub fn marker(self) -> &'static [u8] {
        match self {
            Special::Cls => b"[CLS]",
            Special::Sep => b"[SEP]",
            Special::Eos => b"[EOS]",
            Special::Mask => b"[MASK]",
            Special::Pad => b"[PAD]",
        }
    }

    fn offset(self) -> u32 {
        self as u32
    }
}

/// Ids of the special tokens for a vocabulary with `text_size` text tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub cls: u32,
    pub sep: u32,
    pub eos: u32,
    pub mask: u32,
    pub pad: u32,
    pub text_size: u32,
}

impl SpecialIds {
    pub fn for_text_size(text_size: u32) -> Self {
        let id = |s: Special| text_size + s.offset();
        SpecialIds {
            cls: id(Special::Cls),
            sep: id(Special::Sep),
            eos: id(Special::Eos),
            mask: id(Special::Mask),
            pad: id(Special::Pad),
            text_size,
        }
    }

    /// Layout implied by a full vocabulary size (text tokens plus specials).
    pub fn for_vocab_size(vocab_size: usize) -> Self {
        Self::for_text_size((vocab_size - Special::COUNT) as u32)
    }

    pub fn id(&self, s: Special) -> u32 {
        self.text_size + s.offset()
    }

    #[inline]
    pub fn is_special(&self, id: u32) -> bool {
        id >= self.text_size
    }

    pub fn vocab_size(&self) -> usize {
        self.text_size as usize + Special::COUNT
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

impl Eq for Vocab {}

impl Vocab {
    /// Builds a vocabulary from a ranked merge list; each side must refer to
    /// an already-defined token.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(left, right)) in merges.iter().enumerate() {
            let known = pieces.len() as u32;
            if left >= known || right >= known {
                return Err(Error::Argument(format!(
                    "merge {rank} ({left}, {right}) references an undefined token"
                )));
            }
            if ranks.insert((left, right), rank as u32).is_some() {
                return Err(Error::Argument(format!(
                    "merge {rank} ({left}, {right}) is a duplicate"
                )));
            }
            let mut bytes = pieces[left as usize].clone();
            bytes.extend_from_slice(&pieces[right as usize]);
            pieces.push(bytes);
        }
        Ok(Vocab {
            merges,
            pieces,
            ranks,
        })
    }

    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Number of text (non-special) tokens.
    pub fn text_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn size(&self) -> usize {
        self.text_size() + Special::COUNT
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds::for_text_size(self.text_size() as u32)
    }

    /// Byte expansion of a text token.
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// The same vocabulary restricted to its first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_merges(self.merges[..n.min(self.merges.len())].to_vec())
            .expect("a prefix of a valid merge list is valid")
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for word in split_words(text) {
            self.encode_word_into(word, &mut out);
        }
        out
    }

    fn encode_word_into(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = word.iter().map(|&b| b as u32).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank as usize];
            let merged = (BYTE_TOKENS as u32) + rank;
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend_from_slice(&symbols);
    }

    /// Concatenates byte expansions; special tokens render as their markers.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let specials = self.specials();
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            if let Some(piece) = self.piece(id) {
                out.extend_from_slice(piece);
            } else if (id as usize) < self.size() {
                let special = Special::ALL[(id - specials.text_size) as usize];
                out.extend_from_slice(special.marker());
            } else {
                return Err(Error::UnknownToken(id));
            }
        }
        Ok(out)
    }
}

/// Pre-splits text into merge domains: maximal non-whitespace runs, each
/// carrying at most one directly preceding space. Remaining whitespace forms
/// its own pieces. Concatenating the pieces gives back `text`.
pub fn split_words(text: &[u8]) -> Vec<&[u8]> {
    let mut pieces = Vec::new();
    let n = text.len();
    let mut i = 0;
    while i < n {
        if !text[i].is_ascii_whitespace() {
            let j = run_end(text, i, false);
            pieces.push(&text[i..j]);
            i = j;
            continue;
        }
        let j = run_end(text, i, true);
        if j < n && text[j - 1] == b' ' {
            if j - 1 > i {
                pieces.push(&text[i..j - 1]);
            }
            let k = run_end(text, j, false);
            pieces.push(&text[j - 1..k]);
            i = k;
        } else {
            pieces.push(&text[i..j]);
            i = j;
        }
    }
    pieces
}

fn run_end(text: &[u8], start: usize, whitespace: bool) -> usize {
    text[start..]
        .iter()
        .position(|b| b.is_ascii_whitespace() != whitespace)
        .map_or(text.len(), |p| start + p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;

    fn doc(text: &str) -> Vec<Document> {
        vec![Document {
            id: 0,
            sentences: vec![text.as_bytes().to_vec()],
        }]
    }

    #[test]
    fn split_attaches_one_space() {
        let p = split_words(b"hi  there\n you");
        assert_eq!(p, vec![&b"hi"[..], b" ", b" there", b"\n", b" you"]);
        assert_eq!(split_words(b"  "), vec![&b"  "[..]]);
        assert!(split_words(b"").is_empty());
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        let v = Vocab::bytes_only();
        assert!(v.encode(b"").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), b"");
    }

    #[test]
    fn zero_merges_gives_byte_tokens() {
        let v = Vocab::bytes_only();
        assert_eq!(v.encode(b"hi"), vec![b'h' as u32, b'i' as u32]);
        assert_eq!(v.size(), 261);
    }

    #[test]
    fn specials_sit_above_text_ids_and_render_markers() {
        let v = train_bpe(&doc("aaabdaaabac"), 256 + 5 + 3).unwrap();
        let s = v.specials();
        assert_eq!(s.text_size as usize, v.text_size());
        assert_eq!(s.cls as usize, v.text_size());
        assert_eq!(s.pad as usize, v.size() - 1);
        assert_eq!(v.decode(&[s.mask]).unwrap(), b"[MASK]");
        assert!(matches!(
            v.decode(&[v.size() as u32]),
            Err(Error::UnknownToken(id)) if id == v.size() as u32
        ));
    }

    #[test]
    fn merged_pieces_concatenate_parts() {
        let v = train_bpe(&doc("the cat sat on the mat with the hat"), 300).unwrap();
        for (rank, &(l, r)) in v.merges().iter().enumerate() {
            let mut cat = v.piece(l).unwrap().to_vec();
            cat.extend_from_slice(v.piece(r).unwrap());
            assert_eq!(v.piece(256 + rank as u32).unwrap(), cat.as_slice());
        }
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let v = train_bpe(&doc("abab abab the then there \n\n  x"), 280).unwrap();
            let ids = v.encode(&bytes);
            let specials = v.specials();
            prop_assert!(ids.iter().all(|&id| !specials.is_special(id)));
            prop_assert_eq!(v.decode(&ids).unwrap(), bytes);
        }

        #[test]
        fn more_merges_never_lengthen(text in "[ab ]{0,64}") {
            let v = train_bpe(&doc("abab abba baab aabb ab ab ba"), 256 + 5 + 12).unwrap();
            let mut last = usize::MAX;
            for k in 0..=v.merges().len() {
                let n = v.truncated(k).encode(text.as_bytes()).len();
                prop_assert!(n <= last);
                last = n;
            }
        }
    }
}
