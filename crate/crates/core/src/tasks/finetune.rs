//! Task heads on top of a pretrained encoder, the fine-tuning loop and the
//! hyperparameter sweep.

use rand::seq::SliceRandom;

use super::encode::{encode_choice, encode_classification, encode_span, EncodedChoice, EncodedPair, EncodedSpan};
use super::metrics::{accuracy, span_metrics};
use super::{warmup_steps, ChoiceExample, ClassificationExample, FinetuneConfig, SpanExample};
use crate::bpe::Vocab;
use crate::error::{Error, Result};
use crate::model::{ops, pair_mut, truncated_normal, EncoderInput, Model};
use crate::optim::{adam_step, OptConfig, OptState};
use crate::rng::{self, tag};
use crate::tensor::{ParamSet, Tensor};

const HEAD_STD: f64 = 0.02;
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classification { num_labels: usize },
    /// Start/end logits, plus an answerable/unanswerable classifier on CLS.
    Span { answerability: bool },
    Choice,
}

impl HeadKind {
    fn tensors(self) -> Vec<(&'static str, usize)> {
        match self {
            HeadKind::Classification { num_labels } => vec![("cls_head", num_labels)],
            HeadKind::Span { answerability: false } => vec![("span_head", 2)],
            HeadKind::Span { answerability: true } => vec![("span_head", 2), ("answer_head", 2)],
            HeadKind::Choice => vec![("choice_head", 1)],
        }
    }
}

/// A pretrained encoder with task heads stored as extra parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub model: Model<f32>,
    pub kind: HeadKind,
    pub max_len: usize,
    pub max_answer_tokens: usize,
    /// `(weight, bias)` indices, one pair per head tensor group.
    heads: Vec<(usize, usize)>,
}

impl TaskModel {
    /// Copies `base` and gives it freshly initialised heads. Heads already
    /// present in `base` (from an earlier fine-tuning) are re-initialised,
    /// even when their label count differs.
    pub fn new(base: &Model<f32>, kind: HeadKind, cfg: &FinetuneConfig, seed: u64) -> Result<Self> {
        let mut model = base.clone();
        let h = model.config.hidden;
        for (g, (name, out)) in kind.tensors().into_iter().enumerate() {
            for (suffix, shape) in [("weight", vec![h, out]), ("bias", vec![out])] {
                let full = format!("{name}.{suffix}");
                let mut t = Tensor::zeros(&shape);
                if suffix == "weight" {
                    let mut r = rng::keyed_rng(&[seed, tag::FINETUNE, tag::INIT, g as u64]);
                    t.data.iter_mut().for_each(|v| *v = truncated_normal(&mut r, HEAD_STD) as f32);
                }
                match model.params.get_mut(&full) {
                    Some(old) => *old = t,
                    None => {
                        model.add_param(&full, t)?;
                    }
                }
            }
        }
        Self::attach(model, kind, cfg.max_len, cfg.max_answer_tokens)
    }

    /// Wraps a model that already carries the heads for `kind`.
    pub fn attach(model: Model<f32>, kind: HeadKind, max_len: usize, max_answer_tokens: usize) -> Result<Self> {
        let mut heads = Vec::new();
        for (name, out) in kind.tensors() {
            let find = |suffix: &str, shape: &[usize]| {
                let full = format!("{name}.{suffix}");
                match model.params.index_of(&full) {
                    Some(i) if model.params.tensors()[i].shape == shape => Ok(i),
                    _ => Err(Error::Contract(format!("model lacks head tensor {full} of shape {shape:?}"))),
                }
            };
            heads.push((find("weight", &[model.config.hidden, out])?, find("bias", &[out])?));
        }
        let max_len = max_len.min(model.config.max_len);
        Ok(TaskModel { model, kind, max_len, max_answer_tokens, heads })
    }

    fn p(&self, i: usize) -> &Tensor<f32> {
        &self.model.params.tensors()[i]
    }

    fn hidden(&self) -> usize {
        self.model.config.hidden
    }

    fn pad(&self) -> u32 {
        crate::bpe::SpecialIds::for_vocab_size(self.model.config.vocab).pad
    }

    fn encode_batch<I: Item>(&self, items: &[&I], dropout_key: Option<u64>) -> Result<(Vec<f32>, crate::model::EncoderCache<f32>)> {
        let input = EncoderInput::pack(items.iter().flat_map(|i| i.sequences()), self.pad())?;
        self.model.encode(&input, dropout_key)
    }
}

trait Item: Sync {
    fn sequences(&self) -> Vec<(&[u32], &[u8])>;
}

impl Item for EncodedPair {
    fn sequences(&self) -> Vec<(&[u32], &[u8])> {
        vec![(&self.tokens, &self.segments)]
    }
}

impl Item for EncodedSpan {
    fn sequences(&self) -> Vec<(&[u32], &[u8])> {
        vec![(&self.tokens, &self.segments)]
    }
}

impl Item for EncodedChoice {
    fn sequences(&self) -> Vec<(&[u32], &[u8])> {
        self.options.iter().map(|(t, s)| (t.as_slice(), s.as_slice())).collect()
    }
}

/// Hidden rows of the CLS token of every sequence.
fn cls_rows(hidden: &[f32], input: &EncoderInput, h: usize) -> Vec<f32> {
    (0..input.batch)
        .flat_map(|b| &hidden[b * input.seq_len * h..b * input.seq_len * h + h])
        .copied()
        .collect()
}

fn scatter_cls(d_cls: &[f32], input: &EncoderInput, h: usize, into: &mut [f32]) {
    for b in 0..input.batch {
        let at = b * input.seq_len * h;
        into[at..at + h].iter_mut().zip(&d_cls[b * h..(b + 1) * h]).for_each(|(d, g)| *d += g);
    }
}

/// Cross-entropy of `logits` against `target`; writes `scale * (softmax - onehot)`
/// into `grad` when given.
fn softmax_ce(logits: &[f32], target: usize, grad: Option<&mut [f32]>, scale: f64) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some(grad) = grad {
        for (j, (g, &v)) in grad.iter_mut().zip(logits).enumerate() {
            let p = (v as f64 - lse).exp();
            *g = (scale * (p - f64::from(u8::from(j == target)))) as f32;
        }
    }
    lse - logits[target] as f64
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Applies head `(w, b)` to `x: [rows, H]`, adds its gradient into `grads`
/// and returns the gradient with respect to `x`.
fn head_backward(tm: &TaskModel, head: (usize, usize), x: &[f32], dy: &[f32], rows: usize, grads: &mut ParamSet<f32>) -> Vec<f32> {
    let (dw, db) = pair_mut(grads, head.0, head.1);
    ops::linear_backward(x, dy, rows, tm.p(head.0), dw, db, true).expect("dx requested")
}

type LossFn<I> = fn(&TaskModel, &[&I], &[f32], &EncoderInput, &mut ParamSet<f32>) -> (f64, Vec<f32>);

fn classification_loss(
    tm: &TaskModel,
    items: &[&EncodedPair],
    hidden: &[f32],
    input: &EncoderInput,
    grads: &mut ParamSet<f32>,
) -> (f64, Vec<f32>) {
    let (h, n) = (tm.hidden(), items.len());
    let head = tm.heads[0];
    let x = cls_rows(hidden, input, h);
    let logits = ops::linear(&x, n, tm.p(head.0), tm.p(head.1));
    let k = logits.len() / n;
    let mut dlogits = vec![0f32; logits.len()];
    let mut loss = 0.0;
    for (i, item) in items.iter().enumerate() {
        loss += softmax_ce(&logits[i * k..(i + 1) * k], item.label, Some(&mut dlogits[i * k..(i + 1) * k]), 1.0 / n as f64);
    }
    let dx = head_backward(tm, head, &x, &dlogits, n, grads);
    let mut dh = vec![0f32; hidden.len()];
    scatter_cls(&dx, input, h, &mut dh);
    (loss / n as f64, dh)
}

/// Mean of start and end cross-entropy over context positions, plus the
/// answerability cross-entropy when that head exists. Unanswerable examples
/// contribute only the latter.
fn span_loss(
    tm: &TaskModel,
    items: &[&EncodedSpan],
    hidden: &[f32],
    input: &EncoderInput,
    grads: &mut ParamSet<f32>,
) -> (f64, Vec<f32>) {
    let (h, n, t) = (tm.hidden(), items.len(), input.seq_len);
    let rows = input.rows();
    let span = tm.heads[0];
    let logits = ops::linear(hidden, rows, tm.p(span.0), tm.p(span.1));
    let mut dlogits = vec![0f32; logits.len()];
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for (b, item) in items.iter().enumerate() {
        let Some((s, e)) = item.answer_tokens else { continue };
        let (c0, c1) = (item.context_start, item.context_end);
        for (col, target) in [(0, s), (1, e)] {
            let l: Vec<f32> = (c0..c1).map(|j| logits[(b * t + j) * 2 + col]).collect();
            let mut g = vec![0f32; l.len()];
            loss += 0.5 * softmax_ce(&l, target - c0, Some(&mut g), 0.5 * scale);
            for (j, gj) in (c0..c1).zip(g) {
                dlogits[(b * t + j) * 2 + col] = gj;
            }
        }
    }
    let mut dh = head_backward(tm, span, hidden, &dlogits, rows, grads);
    if let Some(&ans) = tm.heads.get(1) {
        let x = cls_rows(hidden, input, h);
        let logits = ops::linear(&x, n, tm.p(ans.0), tm.p(ans.1));
        let mut dl = vec![0f32; logits.len()];
        for (b, item) in items.iter().enumerate() {
            let target = usize::from(item.answerable);
            loss += softmax_ce(&logits[b * 2..b * 2 + 2], target, Some(&mut dl[b * 2..b * 2 + 2]), scale);
        }
        let dx = head_backward(tm, ans, &x, &dl, n, grads);
        scatter_cls(&dx, input, h, &mut dh);
    }
    (loss * scale, dh)
}

fn choice_loss(
    tm: &TaskModel,
    items: &[&EncodedChoice],
    hidden: &[f32],
    input: &EncoderInput,
    grads: &mut ParamSet<f32>,
) -> (f64, Vec<f32>) {
    let (h, n) = (tm.hidden(), items.len());
    let head = tm.heads[0];
    let x = cls_rows(hidden, input, h);
    let scores = ops::linear(&x, input.batch, tm.p(head.0), tm.p(head.1));
    let k = super::CHOICES;
    let mut ds = vec![0f32; scores.len()];
    let mut loss = 0.0;
    for (i, item) in items.iter().enumerate() {
        loss += softmax_ce(&scores[i * k..(i + 1) * k], item.label, Some(&mut ds[i * k..(i + 1) * k]), 1.0 / n as f64);
    }
    let dx = head_backward(tm, head, &x, &ds, input.batch, grads);
    let mut dh = vec![0f32; hidden.len()];
    scatter_cls(&dx, input, h, &mut dh);
    (loss / n as f64, dh)
}

/// Dev scores of one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub seed: u64,
    /// Dev metric after every epoch that ran.
    pub dev_trace: Vec<f64>,
    pub best_dev: f64,
    pub best_epoch: usize,
}

/// One grid point of the sweep, with one fit per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub lr: f64,
    pub batch_size: usize,
    pub fits: Vec<FitResult>,
}

impl SweepRun {
    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.fits.iter().map(|f| f.best_dev).collect();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// Name of the dev metric: `accuracy` or `f1`.
    pub metric: &'static str,
    pub runs: Vec<SweepRun>,
    /// Best single fit by dev metric.
    pub model: TaskModel,
    pub best_dev: f64,
    /// Training examples dropped because their answer could not be mapped to tokens.
    pub dropped: usize,
}

impl SweepReport {
    /// Grid point with the highest median over seeds.
    pub fn best_run(&self) -> &SweepRun {
        self.runs
            .iter()
            .reduce(|a, b| if b.median() > a.median() { b } else { a })
            .expect("a sweep has at least one run")
    }
}

#[allow(clippy::too_many_arguments)]
fn fit<I: Item>(
    base: &Model<f32>,
    kind: HeadKind,
    train: &[I],
    cfg: &FinetuneConfig,
    lr: f64,
    batch_size: usize,
    seed: u64,
    loss_fn: LossFn<I>,
    eval: &dyn Fn(&TaskModel) -> Result<f64>,
) -> Result<(TaskModel, FitResult)> {
    let mut tm = TaskModel::new(base, kind, cfg, seed)?;
    let per_epoch = train.len().div_ceil(batch_size) as u64;
    let total = per_epoch * cfg.max_epochs as u64;
    let warmup = warmup_steps(cfg.warmup_ratio, total);
    let opt_cfg = OptConfig {
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
        peak_lr: lr,
        warmup_steps: warmup,
        total_steps: total.max(warmup + 1),
        ..OptConfig::default()
    };
    opt_cfg.validate()?;
    let mut opt = OptState::new(&tm.model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut result = FitResult { seed, dev_trace: Vec::new(), best_dev: f64::NEG_INFINITY, best_epoch: 0 };
    let mut best_params = tm.model.params.clone();
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::keyed_rng(&[seed, tag::FINETUNE, tag::SHUFFLE, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            let items: Vec<&I> = chunk.iter().map(|&i| &train[i]).collect();
            let key = rng::mix(&[seed, tag::FINETUNE, tag::DROPOUT, step]);
            let (hidden, cache) = tm.encode_batch(&items, Some(key))?;
            let mut grads = tm.model.params.zeros_like();
            let (loss, dh) = loss_fn(&tm, &items, &hidden, &cache.input, &mut grads);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
            }
            tm.model.encode_backward(&cache, dh, &mut grads)?;
            adam_step(&mut tm.model.params, &mut opt, &grads, &opt_cfg)?;
            step += 1;
        }
        let dev = eval(&tm)?;
        result.dev_trace.push(dev);
        if dev > result.best_dev {
            result.best_dev = dev;
            result.best_epoch = epoch;
            best_params = tm.model.params.clone();
        }
        let stale = epoch - result.best_epoch;
        // A perfect dev score cannot improve any further.
        if result.best_dev >= 1.0 || (cfg.patience > 0 && stale >= cfg.patience) {
            break;
        }
    }
    tm.model.params = best_params;
    Ok((tm, result))
}

fn sweep<I: Item>(
    base: &Model<f32>,
    kind: HeadKind,
    train: &[I],
    cfg: &FinetuneConfig,
    metric: &'static str,
    dropped: usize,
    loss_fn: LossFn<I>,
    eval: &dyn Fn(&TaskModel) -> Result<f64>,
) -> Result<SweepReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no usable training examples".into()));
    }
    let mut runs = Vec::new();
    let mut best: Option<(TaskModel, f64)> = None;
    for &lr in &cfg.learning_rates {
        for &bsz in &cfg.batch_sizes {
            let mut fits = Vec::new();
            for &seed in &cfg.seeds {
                let (tm, fit) = fit(base, kind, train, cfg, lr, bsz, seed, loss_fn, eval)?;
                log::info!("lr {lr} bsz {bsz} seed {seed}: dev {metric} {:.4}", fit.best_dev);
                if best.as_ref().map_or(true, |(_, b)| fit.best_dev > *b) {
                    best = Some((tm, fit.best_dev));
                }
                fits.push(fit);
            }
            runs.push(SweepRun { lr, batch_size: bsz, fits });
        }
    }
    let (model, best_dev) = best.expect("grid is non-empty");
    Ok(SweepReport { metric, runs, model, best_dev, dropped })
}

fn check_base(base: &Model<f32>, vocab: &Vocab) -> Result<()> {
    if base.config.vocab != vocab.size() {
        return Err(Error::Contract(format!(
            "checkpoint vocabulary {} does not match tokenizer vocabulary {}",
            base.config.vocab,
            vocab.size()
        )));
    }
    Ok(())
}

fn max_len(base: &Model<f32>, cfg: &FinetuneConfig) -> usize {
    cfg.max_len.min(base.config.max_len)
}

pub fn finetune_classifier(
    base: &Model<f32>,
    vocab: &Vocab,
    train: &[ClassificationExample],
    dev: &[ClassificationExample],
    cfg: &FinetuneConfig,
) -> Result<SweepReport> {
    check_base(base, vocab)?;
    let len = max_len(base, cfg);
    let enc = train
        .iter()
        .map(|e| encode_classification(e, vocab, len, cfg.num_labels))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = dev.iter().map(|e| e.label).collect();
    let eval = |tm: &TaskModel| accuracy(&predict_classification(tm, vocab, dev)?, &gold);
    let kind = HeadKind::Classification { num_labels: cfg.num_labels };
    sweep(base, kind, &enc, cfg, "accuracy", 0, classification_loss, &eval)
}

/// Fine-tunes span extraction; `answerability` adds the unanswerable-question head.
pub fn finetune_span(
    base: &Model<f32>,
    vocab: &Vocab,
    train: &[SpanExample],
    dev: &[SpanExample],
    cfg: &FinetuneConfig,
    answerability: bool,
) -> Result<SweepReport> {
    check_base(base, vocab)?;
    if !answerability && train.iter().chain(dev).any(|e| e.answer.is_none()) {
        return Err(Error::Data("unanswerable examples need the answerability head".into()));
    }
    let len = max_len(base, cfg);
    let mut enc = Vec::with_capacity(train.len());
    let mut dropped = 0;
    for e in train {
        let s = encode_span(e, vocab, len)?;
        if s.answerable && s.answer_tokens.is_none() {
            dropped += 1;
        } else {
            enc.push(s);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} training examples whose answer does not map to tokens");
    }
    let gold: Vec<Option<String>> = dev.iter().map(|e| e.answer.as_ref().map(|a| a.text.clone())).collect();
    let eval = |tm: &TaskModel| Ok(span_metrics(&predict_span(tm, vocab, dev)?, &gold)?.1);
    sweep(base, HeadKind::Span { answerability }, &enc, cfg, "f1", dropped, span_loss, &eval)
}

pub fn finetune_choice(
    base: &Model<f32>,
    vocab: &Vocab,
    train: &[ChoiceExample],
    dev: &[ChoiceExample],
    cfg: &FinetuneConfig,
) -> Result<SweepReport> {
    check_base(base, vocab)?;
    let len = max_len(base, cfg);
    let enc = train.iter().map(|e| encode_choice(e, vocab, len)).collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = dev.iter().map(|e| e.label).collect();
    let eval = |tm: &TaskModel| accuracy(&predict_choice(tm, vocab, dev)?, &gold);
    sweep(base, HeadKind::Choice, &enc, cfg, "accuracy", 0, choice_loss, &eval)
}

fn expect_kind(tm: &TaskModel, ok: bool) -> Result<()> {
    if !ok {
        return Err(Error::Contract(format!("model has a {:?} head", tm.kind)));
    }
    Ok(())
}

/// Class logits for each example, evaluation mode.
pub fn classification_logits(tm: &TaskModel, vocab: &Vocab, examples: &[ClassificationExample]) -> Result<Vec<Vec<f32>>> {
    let HeadKind::Classification { num_labels } = tm.kind else {
        return expect_kind(tm, false).map(|_| Vec::new());
    };
    let enc = examples
        .iter()
        .map(|e| encode_classification(e, vocab, tm.max_len, num_labels))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(enc.len());
    for chunk in enc.chunks(EVAL_BATCH) {
        let items: Vec<&EncodedPair> = chunk.iter().collect();
        let (hidden, cache) = tm.encode_batch(&items, None)?;
        let x = cls_rows(&hidden, &cache.input, tm.hidden());
        let head = tm.heads[0];
        let logits = ops::linear(&x, items.len(), tm.p(head.0), tm.p(head.1));
        out.extend(logits.chunks(num_labels).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn predict_classification(tm: &TaskModel, vocab: &Vocab, examples: &[ClassificationExample]) -> Result<Vec<usize>> {
    Ok(classification_logits(tm, vocab, examples)?.iter().map(|l| argmax(l)).collect())
}

/// The four option scores of each example, evaluation mode.
pub fn choice_scores(tm: &TaskModel, vocab: &Vocab, examples: &[ChoiceExample]) -> Result<Vec<Vec<f32>>> {
    expect_kind(tm, tm.kind == HeadKind::Choice)?;
    let enc = examples.iter().map(|e| encode_choice(e, vocab, tm.max_len)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(enc.len());
    for chunk in enc.chunks(EVAL_BATCH / super::CHOICES) {
        let items: Vec<&EncodedChoice> = chunk.iter().collect();
        let (hidden, cache) = tm.encode_batch(&items, None)?;
        let x = cls_rows(&hidden, &cache.input, tm.hidden());
        let head = tm.heads[0];
        let scores = ops::linear(&x, cache.input.batch, tm.p(head.0), tm.p(head.1));
        out.extend(scores.chunks(super::CHOICES).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn predict_choice(tm: &TaskModel, vocab: &Vocab, examples: &[ChoiceExample]) -> Result<Vec<usize>> {
    Ok(choice_scores(tm, vocab, examples)?.iter().map(|s| argmax(s)).collect())
}

/// Best `start <= end` pair within the context with fewer than
/// `max_answer_tokens` tokens between them; `None` when the answerability
/// head says the question has no answer.
pub fn predict_span(tm: &TaskModel, vocab: &Vocab, examples: &[SpanExample]) -> Result<Vec<Option<String>>> {
    expect_kind(tm, matches!(tm.kind, HeadKind::Span { .. }))?;
    let enc = examples.iter().map(|e| encode_span(e, vocab, tm.max_len)).collect::<Result<Vec<_>>>()?;
    let h = tm.hidden();
    let mut out = Vec::with_capacity(enc.len());
    for chunk in enc.chunks(EVAL_BATCH) {
        let items: Vec<&EncodedSpan> = chunk.iter().collect();
        let (hidden, cache) = tm.encode_batch(&items, None)?;
        let input = &cache.input;
        let span = tm.heads[0];
        let logits = ops::linear(&hidden, input.rows(), tm.p(span.0), tm.p(span.1));
        let answerable: Vec<bool> = match tm.heads.get(1) {
            Some(&ans) => {
                let x = cls_rows(&hidden, input, h);
                let l = ops::linear(&x, items.len(), tm.p(ans.0), tm.p(ans.1));
                l.chunks(2).map(|c| c[1] > c[0]).collect()
            }
            None => vec![true; items.len()],
        };
        for (b, item) in items.iter().enumerate() {
            if !answerable[b] {
                out.push(None);
                continue;
            }
            let at = |j: usize, col: usize| logits[(b * input.seq_len + j) * 2 + col];
            let mut best: Option<(f32, usize, usize)> = None;
            for s in item.context_start..item.context_end {
                let last = (s + tm.max_answer_tokens).min(item.context_end);
                for e in s..last {
                    let score = at(s, 0) + at(e, 1);
                    if best.map_or(true, |(b, _, _)| score > b) {
                        best = Some((score, s, e));
                    }
                }
            }
            let text = match best {
                Some((_, s, e)) => String::from_utf8_lossy(&vocab.decode(&item.tokens[s..=e])?).trim().to_string(),
                None => String::new(),
            };
            out.push(Some(text));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::SpanAnswer;

    fn base() -> Model<f32> {
        let cfg = ModelConfig { layers: 1, hidden: 16, heads: 2, max_len: 64, vocab: 261, dropout: 0.1 };
        Model::init(cfg, 3).unwrap()
    }

    fn cfg() -> FinetuneConfig {
        FinetuneConfig { learning_rates: vec![1e-3], batch_sizes: vec![4], max_epochs: 1, max_len: 64, ..FinetuneConfig::default() }
    }

    fn cls_data() -> Vec<ClassificationExample> {
        (0..8)
            .map(|i| ClassificationExample { sentence_a: format!("item {i}"), sentence_b: None, label: i % 2 })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_encoder_untouched() {
        let v = Vocab::bytes_only();
        let b = base();
        let c = FinetuneConfig { learning_rates: vec![0.0], ..cfg() };
        let r = finetune_classifier(&b, &v, &cls_data(), &cls_data(), &c).unwrap();
        for (name, t) in b.params.iter() {
            assert_eq!(r.model.model.params.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn grid_size_and_label_errors() {
        let v = Vocab::bytes_only();
        let c = FinetuneConfig { learning_rates: vec![1e-3, 2e-3], batch_sizes: vec![2, 4], ..cfg() };
        let r = finetune_classifier(&base(), &v, &cls_data(), &cls_data(), &c).unwrap();
        assert_eq!(r.runs.len(), 4);
        assert!(r.runs.iter().all(|run| run.fits.len() == 1));
        let mut bad = cls_data();
        bad[0].label = 5;
        assert!(matches!(finetune_classifier(&base(), &v, &bad, &cls_data(), &cfg()), Err(Error::Data(_))));
    }

    #[test]
    fn choice_scores_follow_permutation() {
        let v = Vocab::bytes_only();
        let tm = TaskModel::new(&base(), HeadKind::Choice, &cfg(), 1).unwrap();
        let ex = ChoiceExample {
            passage: "the cat sat".into(),
            question: "who?".into(),
            choices: vec!["cat".into(), "dog".into(), "owl".into(), "eel".into()],
            label: 0,
        };
        let mut perm = ex.clone();
        perm.choices = vec!["owl".into(), "cat".into(), "eel".into(), "dog".into()];
        let a = &choice_scores(&tm, &v, &[ex]).unwrap()[0];
        let b = &choice_scores(&tm, &v, &[perm]).unwrap()[0];
        assert_eq!([a[2], a[0], a[3], a[1]], [b[0], b[1], b[2], b[3]]);
    }

    #[test]
    fn span_prediction_respects_length_limit() {
        let v = Vocab::bytes_only();
        let mut tm = TaskModel::new(&base(), HeadKind::Span { answerability: false }, &cfg(), 1).unwrap();
        tm.max_answer_tokens = 3;
        let ex = SpanExample {
            context: "abcdefghij".into(),
            question: "q".into(),
            answer: Some(SpanAnswer { start: 0, text: "a".into() }),
        };
        let p = predict_span(&tm, &v, &[ex]).unwrap();
        let text = p[0].as_ref().unwrap();
        assert!((1..=3).contains(&text.len()), "{text}");
    }

    #[test]
    fn v1_rejects_unanswerable() {
        let v = Vocab::bytes_only();
        let ex = SpanExample { context: "abc".into(), question: "q".into(), answer: None };
        assert!(matches!(
            finetune_span(&base(), &v, &[ex.clone()], &[ex], &cfg(), false),
            Err(Error::Data(_))
        ));
    }
}
