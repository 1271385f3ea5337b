//! Pretraining loop: packed instances, per-epoch masking, accumulated
//! micro-batches, Adam, periodic held-out evaluation and checkpoints.

mod ablation;
mod eval;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpe::{SpecialIds, Vocab};
use crate::corpus::{split_heldout, Document};
use crate::error::{Error, Result};
use crate::masking::{mask_for_epoch, MaskedExample, MaskingMode};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, LossNorm, Model, ModelConfig, PretrainBatch, OPT_PREFIX};
use crate::optim::{adam_step, AccumState, OptConfig, OptState};
use crate::packing::{batch_by_tokens, pack, tokenize_documents, PackStats, PackingFormat, TokenCount, TrainingInstance};
use crate::rng::{self, tag};

pub use ablation::{
    ablation_presets, ablation_table, batch_size_presets, run_ablation, AblationPreset, AblationResult,
    BATCH_SIZE_REFERENCE,
};
pub use eval::{evaluate_ppl, perplexity, unigram_baseline, EvalReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.mlmc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const TIMING_FILE: &str = "timing.csv";

const METRICS_HEADER: &str = "step,loss,mlm,nsp,ppl,lr,tokens";
const EVAL_HEADER: &str = "step,nll,ppl,masked,nsp_accuracy";
const TIMING_HEADER: &str = "step,seconds,tokens_per_sec";

/// How one micro-batch is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// A fixed number of sequences.
    Sequences(usize),
    /// As many sequences as fit in this many unpadded tokens.
    Tokens(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps(u64),
    /// Train until at least this many sequences were consumed; the count of
    /// optimizer steps follows from the batching.
    Sequences(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRun {
    pub model: ModelConfig,
    /// `total_steps` is replaced by the planned step count.
    pub opt: OptConfig,
    pub format: PackingFormat,
    pub masking: MaskingMode,
    pub use_nsp: bool,
    /// Lets `use_nsp` disagree with the packing format.
    pub nsp_override: bool,
    pub batching: Batching,
    /// Micro-batches accumulated into one optimizer step.
    pub accumulation: usize,
    pub budget: Budget,
    pub seed: u64,
    /// 0 evaluates only after the last step.
    pub eval_every: u64,
    /// 0 checkpoints only after the last step.
    pub checkpoint_every: u64,
}

impl PretrainRun {
    /// Desk-scale default: FULL-SENTENCES, dynamic masking, no NSP, 512-token
    /// sequences, micro-batches of 16·512 tokens accumulated 8 times.
    pub fn desk_default() -> Self {
        PretrainRun {
            model: ModelConfig { layers: 4, hidden: 128, heads: 4, max_len: 512, vocab: 4096, dropout: 0.1 },
            opt: OptConfig { peak_lr: 5e-4, warmup_steps: 200, total_steps: 2000, ..OptConfig::default() },
            format: PackingFormat::FullSentences,
            masking: MaskingMode::Dynamic,
            use_nsp: false,
            nsp_override: false,
            batching: Batching::Tokens(512 * 16),
            accumulation: 8,
            budget: Budget::Steps(2000),
            seed: 0,
            eval_every: 500,
            checkpoint_every: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.use_nsp != self.format.has_nsp() && !self.nsp_override {
            return bad(format!(
                "use_nsp = {} does not fit format {}; set nsp_override to force it",
                self.use_nsp,
                self.format.name()
            ));
        }
        if self.accumulation == 0 {
            return bad("accumulation must be at least 1".into());
        }
        match self.batching {
            Batching::Sequences(0) => return bad("batch size must be positive".into()),
            Batching::Tokens(t) if t < self.model.max_len => {
                return bad(format!("token budget {t} is below max_len {}", self.model.max_len))
            }
            _ => {}
        }
        if matches!(self.budget, Budget::Steps(0) | Budget::Sequences(0)) {
            return bad("the training budget must be positive".into());
        }
        Ok(())
    }

    /// Stable digest of the run definition, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("run serializes");
        let h = Sha256::digest(&json);
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds::for_vocab_size(self.model.vocab)
    }
}

/// Train and held-out instances packed in one format.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Vec<TrainingInstance>,
    pub heldout: Vec<TrainingInstance>,
    pub train_stats: PackStats,
}

/// Splits documents, tokenizes them and packs both sides.
pub fn prepare_data(
    docs: Vec<Document>,
    vocab: &Vocab,
    format: PackingFormat,
    max_len: usize,
    heldout_fraction: f64,
    seed: u64,
) -> Result<PreparedData> {
    if docs.is_empty() {
        return Err(Error::Data("corpus has no documents".into()));
    }
    let split = split_heldout(docs, heldout_fraction, seed)?;
    let specials = vocab.specials();
    let train = pack(format, &tokenize_documents(&split.train, vocab), specials, max_len, seed)?;
    let heldout = pack(format, &tokenize_documents(&split.heldout, vocab), specials, max_len, seed ^ 1)?;
    Ok(PreparedData { train: train.instances, heldout: heldout.instances, train_stats: train.stats })
}

struct Sized(usize, usize);

impl TokenCount for Sized {
    fn token_count(&self) -> usize {
        self.1
    }
}

/// Endless stream of micro-batches (instance indices), one shuffled pass
/// per epoch. Its cursor is `(epoch, index of the next micro-batch)`.
struct MicroStream {
    lengths: Vec<usize>,
    batching: Batching,
    seed: u64,
    epoch: u64,
    pos: usize,
    batches: Vec<Vec<usize>>,
}

impl MicroStream {
    fn new(lengths: Vec<usize>, batching: Batching, seed: u64, epoch: u64, pos: usize) -> Result<Self> {
        let mut s = MicroStream { lengths, batching, seed, epoch, pos, batches: Vec::new() };
        s.batches = s.epoch_batches(epoch)?;
        if pos > s.batches.len() {
            return Err(Error::Data(format!("cursor {pos} is past the end of epoch {epoch}")));
        }
        Ok(s)
    }

    fn epoch_batches(&self, epoch: u64) -> Result<Vec<Vec<usize>>> {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut rng::keyed_rng(&[self.seed, tag::SHUFFLE, epoch]));
        Ok(match self.batching {
            Batching::Sequences(b) => order.chunks(b).map(<[usize]>::to_vec).collect(),
            Batching::Tokens(t) => batch_by_tokens(order.iter().map(|&i| Sized(i, self.lengths[i])), t)?
                .into_iter()
                .map(|b| b.items.into_iter().map(|s| s.0).collect())
                .collect(),
        })
    }

    fn next(&mut self) -> Result<(u64, Vec<usize>)> {
        if self.pos == self.batches.len() {
            self.epoch += 1;
            self.pos = 0;
            self.batches = self.epoch_batches(self.epoch)?;
        }
        let b = self.batches[self.pos].clone();
        self.pos += 1;
        Ok((self.epoch, b))
    }

    fn cursor(&self) -> (u64, usize) {
        (self.epoch, self.pos)
    }
}

/// Optimizer steps and sequences a run will consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    pub steps: u64,
    pub sequences: u64,
    /// Largest number of sequences in one optimizer step.
    pub max_step_sequences: u64,
}

/// Walks the batch stream without training to size the schedule.
pub fn plan(run: &PretrainRun, train: &[TrainingInstance]) -> Result<Plan> {
    run.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training instances".into()));
    }
    let mut stream = MicroStream::new(train.iter().map(TrainingInstance::len).collect(), run.batching, run.seed, 0, 0)?;
    let (mut steps, mut sequences, mut max_step) = (0u64, 0u64, 0u64);
    loop {
        let done = match run.budget {
            Budget::Steps(n) => steps >= n,
            Budget::Sequences(n) => sequences >= n,
        };
        if done {
            break;
        }
        let mut in_step = 0;
        for _ in 0..run.accumulation {
            in_step += stream.next()?.1.len() as u64;
        }
        sequences += in_step;
        max_step = max_step.max(in_step);
        steps += 1;
    }
    Ok(Plan { steps, sequences, max_step_sequences: max_step })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints and CSV logs go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/checkpoint.mlmc` when it exists.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub mlm: f64,
    pub nsp: Option<f64>,
    pub lr: f64,
    /// Unpadded tokens consumed so far.
    pub tokens: u64,
    pub sequences: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model<f32>,
    pub opt: OptState<f32>,
    pub plan: Plan,
    /// Steps run by this call (a resumed run starts after the checkpoint).
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalReport>,
    pub sequences: u64,
    pub completed: bool,
}

struct Cursor {
    step: u64,
    epoch: u64,
    pos: usize,
    sequences: u64,
    tokens: u64,
}

fn to_checkpoint(run: &PretrainRun, model: &Model<f32>, opt: &OptState<f32>, c: &Cursor) -> Result<Checkpoint> {
    let mut tensors = model.params.clone();
    for (prefix, set) in [("m", &opt.m), ("v", &opt.v)] {
        for (name, t) in set.iter() {
            tensors.push(format!("{OPT_PREFIX}{prefix}/{name}"), t.clone())?;
        }
    }
    let mut ckpt = Checkpoint::new(run.model, tensors);
    ckpt.meta = BTreeMap::from([
        ("step".to_string(), c.step),
        ("epoch".to_string(), c.epoch),
        ("batch_in_epoch".to_string(), c.pos as u64),
        ("sequences".to_string(), c.sequences),
        ("tokens".to_string(), c.tokens),
        ("run".to_string(), run.digest()),
    ]);
    Ok(ckpt)
}

fn from_checkpoint(run: &PretrainRun, ckpt: &Checkpoint) -> Result<(Model<f32>, OptState<f32>, Cursor)> {
    let meta = |k: &str| {
        ckpt.meta.get(k).copied().ok_or_else(|| Error::Data(format!("checkpoint lacks {k}")))
    };
    if meta("run")? != run.digest() || ckpt.config != run.model {
        return Err(Error::Data("checkpoint was written by a different run definition".into()));
    }
    let model = ckpt.model()?;
    let mut opt = OptState::new(&model.params);
    for (prefix, set) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        let names: Vec<String> = set.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let key = format!("{OPT_PREFIX}{prefix}/{name}");
            let t = ckpt.tensors.get(&key).ok_or_else(|| Error::Data(format!("checkpoint lacks {key}")))?;
            set.tensors_mut()[i] = t.clone();
        }
    }
    if !opt.m.same_layout(&model.params) || !opt.v.same_layout(&model.params) {
        return Err(Error::Data("optimizer state shape differs from the model".into()));
    }
    let step = meta("step")?;
    opt.step = step;
    let cursor = Cursor {
        step,
        epoch: meta("epoch")?,
        pos: meta("batch_in_epoch")? as usize,
        sequences: meta("sequences")?,
        tokens: meta("tokens")?,
    };
    Ok((model, opt, cursor))
}

/// Append-only CSV with a header; on resume rows past the checkpoint step are dropped.
struct Csv {
    path: PathBuf,
}

impl Csv {
    fn open(dir: &Path, name: &str, header: &str, resume_step: Option<u64>) -> Result<Self> {
        let path = dir.join(name);
        let mut text = format!("{header}\n");
        if let (Some(step), Ok(old)) = (resume_step, fs::read_to_string(&path)) {
            for line in old.lines().skip(1) {
                let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
                if s.is_some_and(|s| s <= step) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(Csv { path })
    }

    fn append(&self, row: String) -> Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&self.path, e))
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Runs (or resumes) pretraining. A non-finite loss aborts with
/// [`Error::NonFinite`] and leaves the last checkpoint in place.
pub fn pretrain(
    run: &PretrainRun,
    train: &[TrainingInstance],
    heldout: &[TrainingInstance],
    opts: &TrainOptions,
) -> Result<PretrainOutcome> {
    let plan = plan(run, train)?;
    let opt_cfg = OptConfig { total_steps: plan.steps, ..run.opt };
    opt_cfg.validate()?;
    let specials = run.specials();

    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let resumed = match &ckpt_path {
        Some(p) if opts.resume && p.exists() => Some(from_checkpoint(run, &load_checkpoint(p)?)?),
        _ => None,
    };
    let resume_step = resumed.as_ref().map(|r| r.2.step);
    let (mut model, mut opt, mut cur) = match resumed {
        Some(r) => r,
        None => {
            let model = Model::<f32>::init(run.model, run.seed)?;
            let opt = OptState::new(&model.params);
            (model, opt, Cursor { step: 0, epoch: 0, pos: 0, sequences: 0, tokens: 0 })
        }
    };
    let logs = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some((
                Csv::open(dir, METRICS_FILE, METRICS_HEADER, resume_step)?,
                Csv::open(dir, EVAL_FILE, EVAL_HEADER, resume_step)?,
                Csv::open(dir, TIMING_FILE, TIMING_HEADER, resume_step)?,
            ))
        }
        None => None,
    };

    let mut stream = MicroStream::new(train.iter().map(TrainingInstance::len).collect(), run.batching, run.seed, cur.epoch, cur.pos)?;
    let end = opts.stop_after.map_or(plan.steps, |s| s.min(plan.steps));
    let mut history = Vec::new();
    let mut evals = Vec::new();
    while cur.step < end {
        let started = Instant::now();
        let step = cur.step;
        let mut batches = Vec::with_capacity(run.accumulation);
        for _ in 0..run.accumulation {
            let (epoch, idx) = stream.next()?;
            let examples = idx
                .par_iter()
                .map(|&i| mask_for_epoch(run.masking, &train[i], i as u64, epoch, run.seed, specials))
                .collect::<Result<Vec<MaskedExample>>>()?;
            cur.tokens += examples.iter().map(|e| e.input_ids.len() as u64).sum::<u64>();
            batches.push(PretrainBatch::from_examples(&examples, specials)?);
        }
        let masked: usize = batches.iter().map(PretrainBatch::masked_count).sum();
        let instances: usize = batches.iter().map(PretrainBatch::batch_size).sum();
        let mut acc = AccumState::<f32>::new();
        let (mut mlm_sum, mut nsp_sum) = (0.0, 0.0);
        for (i, batch) in batches.iter().enumerate() {
            let key = rng::mix(&[run.seed, tag::DROPOUT, step, i as u64]);
            let out = model.forward(batch, Some(key))?;
            let loss = out.loss(batch, run.use_nsp)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
            }
            mlm_sum += loss.mlm_nll_sum;
            nsp_sum += loss.nsp_nll_sum;
            let c = batch.masked_count() as f64;
            // Scaled so the token-weighted flush gives Σmlm/masked + Σnsp/instances.
            let norm = LossNorm { mlm: c, nsp: run.use_nsp.then(|| instances as f64 * c / masked as f64) };
            let grads = model.backward_scaled(&out, batch, norm)?;
            acc.accumulate(&grads, batch.masked_count())?;
        }
        let grads = acc.flush()?;
        let lr = adam_step(&mut model.params, &mut opt, &grads, &opt_cfg)?;

        cur.step += 1;
        cur.sequences += instances as u64;
        (cur.epoch, cur.pos) = stream.cursor();
        let mlm = mlm_sum / masked as f64;
        let nsp = run.use_nsp.then(|| nsp_sum / instances as f64);
        let rec = StepRecord {
            step: cur.step,
            loss: mlm + nsp.unwrap_or(0.0),
            mlm,
            nsp,
            lr,
            tokens: cur.tokens,
            sequences: cur.sequences,
            seconds: started.elapsed().as_secs_f64(),
        };
        history.push(rec);

        let last = cur.step == plan.steps;
        let report = if !heldout.is_empty() && (last || (run.eval_every > 0 && cur.step % run.eval_every == 0)) {
            let r = evaluate_ppl(&model, heldout, run.seed)?;
            log::info!("step {}: heldout ppl {:.3}", cur.step, r.ppl);
            Some(EvalReport { step: cur.step, ..r })
        } else {
            None
        };
        if let Some((metrics, eval, timing)) = &logs {
            metrics.append(format!(
                "{},{},{},{},{},{},{}",
                rec.step,
                rec.loss,
                rec.mlm,
                opt_field(rec.nsp),
                rec.mlm.exp(),
                rec.lr,
                rec.tokens
            ))?;
            let step_tokens: usize = batches.iter().map(|b| b.input.lengths.iter().sum::<usize>()).sum();
            timing.append(format!("{},{:.6},{:.1}", rec.step, rec.seconds, step_tokens as f64 / rec.seconds.max(1e-9)))?;
            if let Some(r) = &report {
                eval.append(format!("{},{},{},{},{}", r.step, r.nll, r.ppl, r.masked, opt_field(r.nsp_accuracy)))?;
            }
        }
        if let Some(r) = report {
            evals.push(r);
        }
        if let Some(p) = &ckpt_path {
            if cur.step == end || (run.checkpoint_every > 0 && cur.step % run.checkpoint_every == 0) {
                save_checkpoint(&to_checkpoint(run, &model, &opt, &cur)?, p)?;
            }
        }
    }
    Ok(PretrainOutcome {
        model,
        opt,
        plan,
        history,
        evals,
        sequences: cur.sequences,
        completed: cur.step == plan.steps,
    })
}

/// Model weights of a pretraining checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    load_checkpoint(path)?.model()
}
