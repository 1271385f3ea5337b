//! TOML run files. Key names follow the usual pretraining and fine-tuning
//! hyperparameter tables (`peak_lr`, `warmup_steps`, `adam_beta2`, ...).

use std::fs;
use std::path::Path;

use mlmp::masking::MaskingMode;
use mlmp::model::ModelConfig;
use mlmp::optim::OptConfig;
use mlmp::packing::PackingFormat;
use mlmp::tasks::FinetuneConfig;
use mlmp::trainer::{Batching, Budget, PretrainRun};
use mlmp::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const DEFAULT_STEPS: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden_size: usize,
    pub attention_heads: usize,
    pub max_len: usize,
    /// Target BPE size when the vocabulary is trained on the fly.
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { layers: 4, hidden_size: 128, attention_heads: 4, max_len: 128, vocab_size: 4096, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub format: PackingFormat,
    pub masking: MaskingMode,
    /// Defaults to on for the pair formats and off otherwise.
    pub nsp: Option<bool>,
    pub heldout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            format: PackingFormat::FullSentences,
            masking: MaskingMode::Dynamic,
            nsp: None,
            heldout_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Sequences per optimizer step.
    pub batch_size: Option<usize>,
    /// Sequences per micro-batch; `batch_size` must be a multiple of it.
    pub micro_batch_size: Option<usize>,
    /// Fill micro-batches by unpadded tokens instead of sequence count.
    pub token_budget: Option<usize>,
    /// Micro-batches per step, only with `token_budget`.
    pub accumulation: Option<usize>,
    pub max_steps: Option<u64>,
    pub max_sequences: Option<u64>,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub gradient_clipping: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            batch_size: None,
            micro_batch_size: None,
            token_budget: None,
            accumulation: None,
            max_steps: None,
            max_sequences: None,
            peak_lr: 5e-4,
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            gradient_clipping: 0.0,
            eval_every: 500,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn toml_error(path: &Path, e: toml::de::Error) -> Error {
    Error::Config(format!("{}: {}", path.display(), e.message()))
}

impl PretrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&read(path)?).map_err(|e| toml_error(path, e))
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Builds the run for a vocabulary of `vocab` ids.
    pub fn to_run(&self, vocab: usize, seed: u64) -> Result<PretrainRun> {
        let m = &self.model;
        let p = &self.pretrain;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        let (batching, accumulation) = match p.token_budget {
            Some(t) => {
                if p.batch_size.is_some() || p.micro_batch_size.is_some() {
                    return bad("token_budget excludes batch_size and micro_batch_size");
                }
                (Batching::Tokens(t), p.accumulation.unwrap_or(1))
            }
            None => {
                if p.accumulation.is_some() {
                    return bad("accumulation needs token_budget; use micro_batch_size with batch_size");
                }
                let bsz = p.batch_size.unwrap_or(8);
                let micro = p.micro_batch_size.unwrap_or(bsz);
                if micro == 0 || bsz % micro != 0 {
                    return Err(Error::Config(format!("batch_size {bsz} is not a multiple of micro_batch_size {micro}")));
                }
                (Batching::Sequences(micro), bsz / micro)
            }
        };
        let budget = match (p.max_steps, p.max_sequences) {
            (Some(_), Some(_)) => return bad("set max_steps or max_sequences, not both"),
            (Some(s), None) => Budget::Steps(s),
            (None, Some(n)) => Budget::Sequences(n),
            (None, None) => Budget::Steps(DEFAULT_STEPS),
        };
        let format = self.data.format;
        let use_nsp = self.data.nsp.unwrap_or(format.has_nsp());
        let run = PretrainRun {
            model: ModelConfig {
                layers: m.layers,
                hidden: m.hidden_size,
                heads: m.attention_heads,
                max_len: m.max_len,
                vocab,
                dropout: m.dropout,
            },
            opt: OptConfig {
                beta1: p.adam_beta1,
                beta2: p.adam_beta2,
                eps: p.adam_eps,
                weight_decay: p.weight_decay,
                peak_lr: p.peak_lr,
                warmup_steps: p.warmup_steps,
                total_steps: p.warmup_steps + 1,
                grad_clip: p.gradient_clipping,
                coupled_decay: false,
            },
            format,
            masking: self.data.masking,
            use_nsp,
            nsp_override: use_nsp != format.has_nsp(),
            batching,
            accumulation,
            budget,
            seed,
            eval_every: p.eval_every,
            checkpoint_every: p.checkpoint_every,
        };
        run.validate()?;
        Ok(run)
    }
}

/// Reads a fine-tuning file over `base`. Keys may sit at the top level or
/// under a `[finetune]` table; anything not given keeps the task default.
pub fn load_finetune(path: &Path, base: FinetuneConfig) -> Result<FinetuneConfig> {
    let mut table: toml::Table = toml::from_str(&read(path)?).map_err(|e| toml_error(path, e))?;
    if let Some(toml::Value::Table(inner)) = table.remove("finetune") {
        if !table.is_empty() {
            return Err(Error::Config(format!("{}: keys outside [finetune]", path.display())));
        }
        table = inner;
    }
    merge(base, table).map_err(|e| toml_error(path, e))
}

fn merge(base: FinetuneConfig, table: toml::Table) -> std::result::Result<FinetuneConfig, toml::de::Error> {
    let mut merged = toml::Table::try_from(&base).expect("config serializes");
    for (k, v) in table {
        let k = match k.as_str() {
            "learning_rate" => "learning_rates".to_string(),
            "batch_size" => "batch_sizes".to_string(),
            "seed" => "seeds".to_string(),
            _ => k,
        };
        merged.insert(k, v);
    }
    FinetuneConfig::deserialize(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: PretrainConfig = toml::from_str("").unwrap();
        assert_eq!(c, PretrainConfig::default());
        let run = c.to_run(300, 5).unwrap();
        assert_eq!(run.batching, Batching::Sequences(8));
        assert_eq!(run.accumulation, 1);
        assert_eq!(run.budget, Budget::Steps(DEFAULT_STEPS));
        assert!(!run.use_nsp);
    }

    #[test]
    fn sections_and_table_names() {
        let text = "seed = 3\n[model]\nlayers = 2\n[data]\nformat = \"segment-pair\"\n\
                    [pretrain]\nbatch_size = 32\nmicro_batch_size = 8\nmax_steps = 10\npeak_lr = 1e-3\n\
                    warmup_steps = 2\nadam_beta2 = 0.999\nadam_eps = 1e-8\nweight_decay = 0.0\n";
        let c: PretrainConfig = toml::from_str(text).unwrap();
        let run = c.to_run(300, 3).unwrap();
        assert_eq!(run.model.layers, 2);
        assert_eq!((run.batching, run.accumulation), (Batching::Sequences(8), 4));
        assert!(run.use_nsp && !run.nsp_override);
        assert_eq!(run.opt.beta2, 0.999);
        assert_eq!(run.opt.eps, 1e-8);
    }

    #[test]
    fn conflicting_keys_are_rejected() {
        let c: PretrainConfig = toml::from_str("[pretrain]\nbatch_size = 10\nmicro_batch_size = 4\n").unwrap();
        assert!(c.to_run(300, 0).is_err());
        let c: PretrainConfig = toml::from_str("[pretrain]\nmax_steps = 10\nmax_sequences = 4\n").unwrap();
        assert!(c.to_run(300, 0).is_err());
        assert!(toml::from_str::<PretrainConfig>("[pretrain]\npeak_learning_rate = 1.0\n").is_err());
    }

    #[test]
    fn finetune_overlay_keeps_task_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ft.toml");
        fs::write(&p, "[finetune]\nlearning_rate = 3e-5\nbatch_size = [16]\n").unwrap();
        let c = load_finetune(&p, FinetuneConfig::span()).unwrap();
        assert_eq!(c.learning_rates, vec![3e-5]);
        assert_eq!(c.batch_sizes, vec![16]);
        assert_eq!(c.max_epochs, 2);
        fs::write(&p, "max_epoch = 3\n").unwrap();
        assert!(matches!(load_finetune(&p, FinetuneConfig::span()), Err(Error::Config(_))));
    }
}
