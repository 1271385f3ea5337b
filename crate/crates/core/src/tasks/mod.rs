//! Fine-tuning: sentence(-pair) classification, span extraction with an
//! optional answerability head, and four-way multiple choice.

mod data;
mod encode;
mod finetune;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{
    read_choice_jsonl, read_classification_tsv, read_span_jsonl, write_choice_jsonl, write_classification_tsv,
    write_span_jsonl,
};
pub use encode::{encode_choice, encode_classification, encode_span, EncodedChoice, EncodedPair, EncodedSpan};
pub use finetune::{
    choice_scores, classification_logits, finetune_choice, finetune_classifier, finetune_span, predict_choice,
    predict_classification, predict_span, FitResult, HeadKind, SweepReport, SweepRun, TaskModel,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub sentence_a: String,
    pub sentence_b: Option<String>,
    pub label: usize,
}

/// An answer as a byte offset into the context plus its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnswer {
    pub start: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanExample {
    pub context: String,
    pub question: String,
    /// `None` marks an unanswerable question.
    pub answer: Option<SpanAnswer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceExample {
    pub passage: String,
    pub question: String,
    pub choices: Vec<String>,
    pub label: usize,
}

pub const CHOICES: usize = 4;
pub const MAX_QA_TOKENS: usize = 128;
pub const MAX_ANSWER_TOKENS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    #[serde(alias = "learning_rate", deserialize_with = "one_or_many")]
    pub learning_rates: Vec<f64>,
    #[serde(alias = "batch_size", deserialize_with = "one_or_many")]
    pub batch_sizes: Vec<usize>,
    pub max_epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub adam_beta2: f64,
    /// One run per seed and grid point; the report takes the median over seeds.
    #[serde(alias = "seed", deserialize_with = "one_or_many")]
    pub seeds: Vec<u64>,
    /// Stop after this many epochs without dev improvement; 0 never stops early.
    pub patience: usize,
    pub max_len: usize,
    pub max_answer_tokens: usize,
    /// Number of classes for classification.
    pub num_labels: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rates: vec![1e-5, 2e-5, 3e-5],
            batch_sizes: vec![16, 32],
            max_epochs: 10,
            warmup_ratio: 0.06,
            weight_decay: 0.1,
            adam_eps: 1e-6,
            adam_beta2: 0.98,
            seeds: vec![0],
            patience: 0,
            max_len: 512,
            max_answer_tokens: MAX_ANSWER_TOKENS,
            num_labels: 2,
        }
    }
}

impl FinetuneConfig {
    /// GLUE-style classification settings.
    pub fn classification() -> Self {
        Self::default()
    }

    /// Span extraction settings: 2 epochs, weight decay 0.01.
    pub fn span() -> Self {
        FinetuneConfig { max_epochs: 2, weight_decay: 0.01, ..Self::default() }
    }

    /// Multiple-choice settings: 4 epochs, weight decay 0.1.
    pub fn choice() -> Self {
        FinetuneConfig { max_epochs: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() || self.seeds.is_empty() {
            return bad("learning_rates, batch_sizes and seeds must be non-empty");
        }
        if self.batch_sizes.contains(&0) || self.max_epochs == 0 {
            return bad("batch sizes and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if self.max_len < 8 {
            return bad("max_len must be at least 8");
        }
        if self.num_labels < 2 {
            return bad("num_labels must be at least 2");
        }
        Ok(())
    }
}

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

/// `floor(ratio * total)`, at least one step.
pub fn warmup_steps(ratio: f64, total: u64) -> u64 {
    ((ratio * total as f64).floor() as u64).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_rounds_down_with_floor_one() {
        assert_eq!(warmup_steps(0.06, 1000), 60);
        assert_eq!(warmup_steps(0.06, 99), 5);
        assert_eq!(warmup_steps(0.06, 10), 1);
    }

    #[test]
    fn presets_follow_task_budgets() {
        assert_eq!(FinetuneConfig::classification().max_epochs, 10);
        assert_eq!(FinetuneConfig::span().max_epochs, 2);
        assert_eq!(FinetuneConfig::span().weight_decay, 0.01);
        assert_eq!(FinetuneConfig::choice().max_epochs, 4);
        let c = FinetuneConfig::default();
        assert_eq!(c.learning_rates.len() * c.batch_sizes.len(), 6);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn grid_keys_take_a_scalar_or_a_list() {
        let c: FinetuneConfig = serde_json::from_str(r#"{"learning_rate": 2e-5, "batch_size": [16, 32]}"#).unwrap();
        assert_eq!(c.learning_rates, vec![2e-5]);
        assert_eq!(c.batch_sizes, vec![16, 32]);
        assert!(serde_json::from_str::<FinetuneConfig>(r#"{"learning_rte": 1.0}"#).is_err());
    }
}
