use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::{split_words, Special, Vocab, BYTE_TOKENS};
use crate::corpus::Document;
use crate::error::{Error, Result};

type Pair = (u32, u32);

/// Heap entry. Highest count wins; among equal counts the pair with the
/// lexicographically smallest (left bytes, right bytes) wins.
#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: Pair,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Trainer {
    words: Vec<Vec<u32>>,
    freqs: Vec<u64>,
    counts: HashMap<Pair, u64>,
    occurs_in: HashMap<Pair, HashSet<usize>>,
    pieces: Vec<Vec<u8>>,
    known: HashSet<Vec<u8>>,
    heap: BinaryHeap<Candidate>,
}

impl Trainer {
    fn new(word_counts: HashMap<Vec<u8>, u64>) -> Self {
        let mut entries: Vec<(Vec<u8>, u64)> = word_counts.into_iter().collect();
        entries.sort();
        let pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let known = pieces.iter().cloned().collect();
        let mut t = Trainer {
            words: Vec::with_capacity(entries.len()),
            freqs: Vec::with_capacity(entries.len()),
            counts: HashMap::new(),
            occurs_in: HashMap::new(),
            pieces,
            known,
            heap: BinaryHeap::new(),
        };
        for (idx, (word, freq)) in entries.into_iter().enumerate() {
            let symbols: Vec<u32> = word.iter().map(|&b| b as u32).collect();
            for w in symbols.windows(2) {
                let pair = (w[0], w[1]);
                *t.counts.entry(pair).or_default() += freq;
                t.occurs_in.entry(pair).or_default().insert(idx);
            }
            t.words.push(symbols);
            t.freqs.push(freq);
        }
        let mut initial: Vec<(Pair, u64)> = t.counts.iter().map(|(&p, &c)| (p, c)).collect();
        initial.sort();
        for (pair, count) in initial {
            t.push(pair, count);
        }
        t
    }

    fn push(&mut self, pair: Pair, count: u64) {
        if count < 2 {
            return;
        }
        self.heap.push(Candidate {
            count,
            left: self.pieces[pair.0 as usize].clone(),
            right: self.pieces[pair.1 as usize].clone(),
            pair,
        });
    }

    fn next_merge(&mut self) -> Option<Pair> {
        while let Some(top) = self.heap.pop() {
            let current = self.counts.get(&top.pair).copied().unwrap_or(0);
            if current != top.count {
                continue;
            }
            let mut bytes = top.left;
            bytes.extend_from_slice(&top.right);
            // A second token with an identical byte expansion would make the
            // vocabulary file ambiguous.
            if self.known.contains(&bytes) {
                continue;
            }
            return Some(top.pair);
        }
        None
    }

    fn apply(&mut self, pair: Pair) {
        let new_id = self.pieces.len() as u32;
        let mut bytes = self.pieces[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.pieces[pair.1 as usize]);
        self.known.insert(bytes.clone());
        self.pieces.push(bytes);

        let mut affected: Vec<usize> = self
            .occurs_in
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();

        let mut touched: Vec<Pair> = Vec::new();
        for idx in affected {
            let freq = self.freqs[idx];
            let old = &self.words[idx];
            let mut merged = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(old[i]);
                    i += 1;
                }
            }
            if merged.len() == old.len() {
                continue;
            }
            for w in old.windows(2) {
                let p = (w[0], w[1]);
                if let Some(c) = self.counts.get_mut(&p) {
                    *c -= freq;
                    if *c == 0 {
                        self.counts.remove(&p);
                    }
                }
                touched.push(p);
            }
            for w in merged.windows(2) {
                let p = (w[0], w[1]);
                *self.counts.entry(p).or_default() += freq;
                if p.0 == new_id || p.1 == new_id {
                    self.occurs_in.entry(p).or_default().insert(idx);
                }
                touched.push(p);
            }
            self.words[idx] = merged;
        }
        self.counts.remove(&pair);

        touched.sort_unstable();
        touched.dedup();
        for p in touched {
            let c = self.counts.get(&p).copied().unwrap_or(0);
            self.push(p, c);
        }
    }
}

/// Counts pre-split words over every sentence of every document.
pub(crate) fn word_counts(docs: &[Document]) -> HashMap<Vec<u8>, u64> {
    let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for doc in docs {
        for sentence in &doc.sentences {
            for word in split_words(sentence) {
                if let Some(c) = counts.get_mut(word) {
                    *c += 1;
                } else {
                    counts.insert(word.to_vec(), 1);
                }
            }
        }
    }
    counts
}

/// Greedy BPE training up to `target_size` total tokens (bytes, merges and
/// specials). Stops early when no pair occurs at least twice.
pub fn train_bpe(docs: &[Document], target_size: usize) -> Result<Vocab> {
    let minimum = BYTE_TOKENS + Special::COUNT;
    if target_size < minimum {
        return Err(Error::Argument(format!(
            "vocabulary size must be at least {minimum}, got {target_size}"
        )));
    }
    let target_merges = target_size - minimum;
    let mut trainer = Trainer::new(word_counts(docs));
    let mut merges = Vec::with_capacity(target_merges);
    while merges.len() < target_merges {
        let Some(pair) = trainer.next_merge() else {
            break;
        };
        trainer.apply(pair);
        merges.push(pair);
    }
    log::debug!("trained {} merges (target {target_merges})", merges.len());
    Vocab::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_doc(text: &str) -> Vec<Document> {
        vec![Document {
            id: 0,
            sentences: vec![text.as_bytes().to_vec()],
        }]
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // Pair counts over "aaabdaaabac": aa=4, ab=2, others 1.
        let v = train_bpe(&one_doc("aaabdaaabac"), 256 + 5 + 3).unwrap();
        assert_eq!(v.merges()[0], (b'a' as u32, b'a' as u32));
        assert_eq!(v.merges().len(), 3);
    }

    #[test]
    fn empty_corpus_has_no_merges() {
        let v = train_bpe(&[], 1000).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.size(), 256 + 5);
    }

    #[test]
    fn target_below_minimum_is_rejected() {
        assert!(matches!(
            train_bpe(&[], 260),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn repeated_word_collapses_to_one_token() {
        // Replayed by hand: (a,b) x4 -> "ab"; (ab,ab) x2 -> "abab"; then
        // (" ", abab) occurs once and training stops.
        let v = train_bpe(&one_doc("abab abab"), 400).unwrap();
        let ab = 256;
        assert_eq!(v.merges(), &[(b'a' as u32, b'b' as u32), (ab, ab)]);
        assert_eq!(v.encode(b"abab"), vec![257]);
    }

    #[test]
    fn ties_go_to_smallest_byte_expansion() {
        // "xy" and "ba" each occur twice; "ba" < "xy".
        let docs = vec![Document {
            id: 0,
            sentences: ["xy", "ba", "xy", "ba"].map(|s| s.as_bytes().to_vec()).to_vec(),
        }];
        let v = train_bpe(&docs, 256 + 5 + 1).unwrap();
        assert_eq!(v.merges()[0], (b'b' as u32, b'a' as u32));
    }
}
