//! Task inputs as token sequences. Truncation only ever removes text
//! tokens; the CLS/SEP/EOS scaffold is always kept.

use super::{ChoiceExample, ClassificationExample, SpanExample, CHOICES, MAX_QA_TOKENS};
use crate::bpe::Vocab;
use crate::error::{Error, Result};

/// Longest question kept in a span input.
const MAX_QUESTION_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSpan {
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    /// Context occupies `tokens[context_start..context_end]`.
    pub context_start: usize,
    pub context_end: usize,
    /// Gold start and end token (inclusive) when the answer survived truncation.
    pub answer_tokens: Option<(usize, usize)>,
    pub answerable: bool,
    pub gold_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedChoice {
    /// One `(tokens, segments)` sequence per option.
    pub options: Vec<(Vec<u32>, Vec<u8>)>,
    pub label: usize,
}

fn scaffold(vocab: &Vocab, a: &[u32], b: Option<&[u32]>) -> (Vec<u32>, Vec<u8>) {
    let s = vocab.specials();
    let mut tokens = Vec::with_capacity(a.len() + b.map_or(0, <[u32]>::len) + 3);
    tokens.push(s.cls);
    tokens.extend_from_slice(a);
    let mut segments = vec![0u8; tokens.len()];
    if let Some(b) = b {
        tokens.push(s.sep);
        segments.push(0);
        tokens.extend_from_slice(b);
        segments.resize(tokens.len(), 1);
    }
    tokens.push(s.eos);
    segments.push(u8::from(b.is_some()));
    (tokens, segments)
}

fn check_len(max_len: usize) -> Result<()> {
    if max_len < 8 {
        return Err(Error::Argument(format!("max_len {max_len} is below 8")));
    }
    Ok(())
}

/// `[CLS] a [SEP] b [EOS]` or `[CLS] a [EOS]`; the longer text loses tokens first.
pub fn encode_classification(
    ex: &ClassificationExample,
    vocab: &Vocab,
    max_len: usize,
    num_labels: usize,
) -> Result<EncodedPair> {
    check_len(max_len)?;
    if ex.label >= num_labels {
        return Err(Error::Data(format!("label {} outside 0..{num_labels}", ex.label)));
    }
    let mut a = vocab.encode(ex.sentence_a.as_bytes());
    let (tokens, segments) = match &ex.sentence_b {
        Some(b) => {
            let mut b = vocab.encode(b.as_bytes());
            while a.len() + b.len() > max_len - 3 {
                if a.len() > b.len() {
                    a.pop();
                } else {
                    b.pop();
                }
            }
            scaffold(vocab, &a, Some(&b))
        }
        None => {
            a.truncate(max_len - 2);
            scaffold(vocab, &a, None)
        }
    };
    Ok(EncodedPair { tokens, segments, label: ex.label })
}

/// `[CLS] question [SEP] context [EOS]` with the answer mapped to the context
/// tokens that contain its first and last byte.
pub fn encode_span(ex: &SpanExample, vocab: &Vocab, max_len: usize) -> Result<EncodedSpan> {
    check_len(max_len)?;
    if let Some(a) = &ex.answer {
        if ex.context.get(a.start..a.start + a.text.len()) != Some(a.text.as_str()) {
            return Err(Error::Data(format!("answer {:?} does not lie in the context at byte {}", a.text, a.start)));
        }
    }
    let mut q = vocab.encode(ex.question.as_bytes());
    q.truncate(MAX_QUESTION_TOKENS.min(max_len / 2));
    let mut ctx = vocab.encode(ex.context.as_bytes());
    ctx.truncate(max_len - 3 - q.len());

    let mut ends = Vec::with_capacity(ctx.len());
    let mut at = 0;
    for &t in &ctx {
        at += vocab.piece(t).map_or(0, <[u8]>::len);
        ends.push(at);
    }
    let context_start = q.len() + 2;
    let answer_tokens = ex.answer.as_ref().and_then(|a| {
        if a.text.is_empty() {
            return None;
        }
        let first = a.start;
        let last = a.start + a.text.len() - 1;
        let s = ends.iter().position(|&e| e > first)?;
        let e = ends.iter().position(|&e| e > last)?;
        Some((context_start + s, context_start + e))
    });
    let (tokens, segments) = scaffold(vocab, &q, Some(&ctx));
    Ok(EncodedSpan {
        context_end: context_start + ctx.len(),
        tokens,
        segments,
        context_start,
        answer_tokens,
        answerable: ex.answer.is_some(),
        gold_text: ex.answer.as_ref().map(|a| a.text.clone()),
    })
}

/// Cuts a question+answer pair to `limit` tokens: the question loses tokens
/// from its front first, then the answer from its end.
pub(crate) fn truncate_qa(q: &mut Vec<u32>, a: &mut Vec<u32>, limit: usize) {
    let excess = (q.len() + a.len()).saturating_sub(limit);
    let from_q = excess.min(q.len());
    q.drain(..from_q);
    a.truncate(limit - q.len().min(limit));
}

/// One `[CLS] passage [SEP] question answer [EOS]` sequence per option.
pub fn encode_choice(ex: &ChoiceExample, vocab: &Vocab, max_len: usize) -> Result<EncodedChoice> {
    check_len(max_len)?;
    if ex.choices.len() != CHOICES {
        return Err(Error::Data(format!("expected {CHOICES} choices, found {}", ex.choices.len())));
    }
    if ex.label >= CHOICES {
        return Err(Error::Data(format!("label {} out of range", ex.label)));
    }
    let passage = vocab.encode(ex.passage.as_bytes());
    let question = vocab.encode(ex.question.as_bytes());
    let qa_limit = MAX_QA_TOKENS.min(max_len - 4);
    let options = ex
        .choices
        .iter()
        .map(|c| {
            let mut q = question.clone();
            let mut a = vocab.encode(format!(" {c}").as_bytes());
            truncate_qa(&mut q, &mut a, qa_limit);
            q.extend(a);
            let mut p = passage.clone();
            p.truncate(max_len - 3 - q.len());
            scaffold(vocab, &p, Some(&q))
        })
        .collect();
    Ok(EncodedChoice { options, label: ex.label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::SpanAnswer;

    fn vocab() -> Vocab {
        Vocab::bytes_only()
    }

    #[test]
    fn classification_scaffold_survives_truncation() {
        let v = vocab();
        let s = v.specials();
        let ex = ClassificationExample { sentence_a: "a".repeat(50), sentence_b: Some("b".repeat(7)), label: 1 };
        let e = encode_classification(&ex, &v, 16, 2).unwrap();
        assert_eq!(e.tokens.len(), 16);
        assert_eq!(e.tokens[0], s.cls);
        assert_eq!(e.tokens.iter().filter(|&&t| t == s.sep).count(), 1);
        assert_eq!(*e.tokens.last().unwrap(), s.eos);
        assert_eq!(e.tokens.iter().filter(|&&t| t == b'b' as u32).count(), 6);
        let single = ClassificationExample { sentence_b: None, ..ex.clone() };
        let e = encode_classification(&single, &v, 10, 2).unwrap();
        assert_eq!((e.tokens.len(), e.tokens[0], e.tokens[9]), (10, s.cls, s.eos));
        let bad = ClassificationExample { label: 2, ..ex };
        assert!(matches!(encode_classification(&bad, &v, 16, 2), Err(Error::Data(_))));
    }

    #[test]
    fn span_maps_bytes_to_tokens() {
        let v = vocab();
        let ex = SpanExample {
            context: "xx begin yy end".into(),
            question: "q".into(),
            answer: Some(SpanAnswer { start: 9, text: "yy".into() }),
        };
        let e = encode_span(&ex, &v, 64).unwrap();
        // [CLS] q [SEP] then context bytes one per token.
        assert_eq!(e.context_start, 3);
        assert_eq!(e.answer_tokens, Some((12, 13)));
        assert_eq!(e.tokens[12], b'y' as u32);
        let short = encode_span(&ex, &v, 12).unwrap();
        assert_eq!(short.answer_tokens, None);
        assert!(short.answerable);
    }

    #[test]
    fn qa_truncation_order() {
        let mut q: Vec<u32> = (0..150).collect();
        let mut a: Vec<u32> = (1000..1050).collect();
        truncate_qa(&mut q, &mut a, 128);
        assert_eq!(q.len() + a.len(), 128);
        assert_eq!(a.len(), 50);
        assert_eq!(q[0], 72);
        let mut q: Vec<u32> = (0..10).collect();
        let mut a: Vec<u32> = (0..190).collect();
        truncate_qa(&mut q, &mut a, 128);
        assert_eq!((q.len(), a.len()), (0, 128));
        assert_eq!(a[127], 127);
    }

    #[test]
    fn choice_inputs_fit_and_keep_scaffold() {
        let v = vocab();
        let s = v.specials();
        let ex = ChoiceExample {
            passage: "p".repeat(600),
            question: "q".repeat(200),
            choices: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            label: 0,
        };
        let e = encode_choice(&ex, &v, 512).unwrap();
        for (t, seg) in &e.options {
            assert_eq!(t.len(), 512);
            assert_eq!(t.len(), seg.len());
            assert_eq!((t[0], *t.last().unwrap()), (s.cls, s.eos));
            let sep = t.iter().position(|&x| x == s.sep).unwrap();
            assert_eq!(t.len() - sep - 2, 128);
        }
        let bad = ChoiceExample { choices: vec!["a".into()], ..ex };
        assert!(matches!(encode_choice(&bad, &v, 512), Err(Error::Data(_))));
    }
}
