//! Task file formats.
//!
//! * classification TSV: `label<TAB>sentence_a[<TAB>sentence_b]`
//! * span JSONL: `{"context", "question", "answer_start": int|null, "answer_text": str|null}`
//! * choice JSONL: `{"passage", "question", "choices": [4 strings], "label": int}`

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChoiceExample, ClassificationExample, SpanAnswer, SpanExample, CHOICES};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

pub fn read_classification_tsv(path: impl AsRef<Path>) -> Result<Vec<ClassificationExample>> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut cols = line.split('\t');
        let label = cols
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| data_err(path, i + 1, "first column must be a class index"))?;
        let sentence_a = cols
            .next()
            .ok_or_else(|| data_err(path, i + 1, "missing sentence"))?
            .to_string();
        let sentence_b = cols.next().map(str::to_string);
        if cols.next().is_some() {
            return Err(data_err(path, i + 1, "too many columns"));
        }
        out.push(ClassificationExample { sentence_a, sentence_b, label });
    }
    Ok(out)
}

pub fn write_classification_tsv(path: impl AsRef<Path>, data: &[ClassificationExample]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for e in data {
        s.push_str(&format!("{}\t{}", e.label, e.sentence_a));
        if let Some(b) = &e.sentence_b {
            s.push('\t');
            s.push_str(b);
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct SpanRecord {
    context: String,
    question: String,
    answer_start: Option<usize>,
    answer_text: Option<String>,
}

fn jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| data_err(path, i + 1, e))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(&r).expect("plain records serialize"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_span_jsonl(path: impl AsRef<Path>) -> Result<Vec<SpanExample>> {
    let path = path.as_ref();
    jsonl::<SpanRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            let answer = match (r.answer_start, r.answer_text) {
                (Some(start), Some(text)) => {
                    if r.context.get(start..start + text.len()) != Some(text.as_str()) {
                        return Err(data_err(path, line, "answer text does not occur at answer_start"));
                    }
                    Some(SpanAnswer { start, text })
                }
                (None, None) => None,
                _ => return Err(data_err(path, line, "answer_start and answer_text must both be set or null")),
            };
            Ok(SpanExample { context: r.context, question: r.question, answer })
        })
        .collect()
}

pub fn write_span_jsonl(path: impl AsRef<Path>, data: &[SpanExample]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        data.iter().map(|e| SpanRecord {
            context: e.context.clone(),
            question: e.question.clone(),
            answer_start: e.answer.as_ref().map(|a| a.start),
            answer_text: e.answer.as_ref().map(|a| a.text.clone()),
        }),
    )
}

pub fn read_choice_jsonl(path: impl AsRef<Path>) -> Result<Vec<ChoiceExample>> {
    let path = path.as_ref();
    jsonl::<ChoiceExample>(path)?
        .into_iter()
        .map(|(line, e)| {
            if e.choices.len() != CHOICES {
                return Err(data_err(path, line, format!("expected {CHOICES} choices, found {}", e.choices.len())));
            }
            if e.label >= CHOICES {
                return Err(data_err(path, line, format!("label {} out of range", e.label)));
            }
            Ok(e)
        })
        .collect()
}

pub fn write_choice_jsonl(path: impl AsRef<Path>, data: &[ChoiceExample]) -> Result<()> {
    write_jsonl(path.as_ref(), data.iter())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cls = vec![
            ClassificationExample { sentence_a: "x y".into(), sentence_b: None, label: 1 },
            ClassificationExample { sentence_a: "p".into(), sentence_b: Some("q r".into()), label: 0 },
        ];
        let p = dir.path().join("c.tsv");
        write_classification_tsv(&p, &cls).unwrap();
        assert_eq!(read_classification_tsv(&p).unwrap(), cls);

        let spans = vec![
            SpanExample {
                context: "one two three".into(),
                question: "q?".into(),
                answer: Some(SpanAnswer { start: 4, text: "two".into() }),
            },
            SpanExample { context: "none".into(), question: "q?".into(), answer: None },
        ];
        let p = dir.path().join("s.jsonl");
        write_span_jsonl(&p, &spans).unwrap();
        assert_eq!(read_span_jsonl(&p).unwrap(), spans);

        let ch = vec![ChoiceExample {
            passage: "p".into(),
            question: "q".into(),
            choices: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            label: 2,
        }];
        let p = dir.path().join("m.jsonl");
        write_choice_jsonl(&p, &ch).unwrap();
        assert_eq!(read_choice_jsonl(&p).unwrap(), ch);
    }

    #[test]
    fn bad_rows_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, r#"{"passage":"p","question":"q","choices":["a","b","c"],"label":0}"#).unwrap();
        assert!(matches!(read_choice_jsonl(&p), Err(Error::Data(_))));
        fs::write(&p, r#"{"context":"abc","question":"q","answer_start":1,"answer_text":"x"}"#).unwrap();
        assert!(matches!(read_span_jsonl(&p), Err(Error::Data(_))));
        let t = dir.path().join("bad.tsv");
        fs::write(&t, "yes\tsentence\n").unwrap();
        assert!(matches!(read_classification_tsv(&t), Err(Error::Data(_))));
    }
}
