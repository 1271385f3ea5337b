//! Accuracy, exact match and token-level F1.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Span,
    Choice,
}

/// Predictions or gold answers for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum Answers {
    Labels(Vec<usize>),
    /// `None` is the no-answer prediction.
    Spans(Vec<Option<String>>),
}

fn strip_punct(s: &str) -> String {
    s.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase()
}

/// Lowercases, drops punctuation and the articles a/an/the, collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    strip_punct(s)
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize_answer(pred) == normalize_answer(gold)))
}

/// Harmonic mean of token precision and recall with multiset overlap.
/// Articles count as tokens here; an exact match always scores 1.
pub fn f1_score(pred: &str, gold: &str) -> f64 {
    if exact_match(pred, gold) == 1.0 {
        return 1.0;
    }
    let p = strip_punct(pred);
    let g = strip_punct(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return f64::from(u8::from(p.is_empty() && g.is_empty()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// EM and F1 for one span prediction; a no-answer scores 1 only against a no-answer.
pub fn span_scores(pred: Option<&str>, gold: Option<&str>) -> (f64, f64) {
    match (pred, gold) {
        (Some(p), Some(g)) => (exact_match(p, g), f1_score(p, g)),
        (None, None) => (1.0, 1.0),
        _ => (0.0, 0.0),
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("{a} predictions for {b} gold answers")));
    }
    if a == 0 {
        return Err(Error::Argument("no predictions to score".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], gold: &[usize]) -> Result<f64> {
    check_len(preds.len(), gold.len())?;
    Ok(preds.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64)
}

/// Mean EM and F1.
pub fn span_metrics(preds: &[Option<String>], gold: &[Option<String>]) -> Result<(f64, f64)> {
    check_len(preds.len(), gold.len())?;
    let (em, f1) = preds
        .iter()
        .zip(gold)
        .map(|(p, g)| span_scores(p.as_deref(), g.as_deref()))
        .fold((0.0, 0.0), |(a, b), (e, f)| (a + e, b + f));
    let n = gold.len() as f64;
    Ok((em / n, f1 / n))
}

/// `accuracy` for label tasks, `em` and `f1` for span tasks.
pub fn metrics(kind: TaskKind, preds: &Answers, gold: &Answers) -> Result<BTreeMap<&'static str, f64>> {
    let mut out = BTreeMap::new();
    match (kind, preds, gold) {
        (TaskKind::Classification | TaskKind::Choice, Answers::Labels(p), Answers::Labels(g)) => {
            out.insert("accuracy", accuracy(p, g)?);
        }
        (TaskKind::Span, Answers::Spans(p), Answers::Spans(g)) => {
            let (em, f1) = span_metrics(p, g)?;
            out.insert("em", em);
            out.insert("f1", f1);
        }
        _ => return Err(Error::Argument(format!("answers do not match task kind {kind:?}"))),
    }
    Ok(out)
}
