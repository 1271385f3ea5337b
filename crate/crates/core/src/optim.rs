//! Adam with bias correction, linear warmup/decay, weight decay and
//! gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::decays;
use crate::tensor::{Float, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Global-norm clipping threshold; 0 disables it.
    pub grad_clip: f64,
    /// Add `λ θ` to the gradient before the moment updates instead of
    /// subtracting `lr λ θ` after them.
    pub coupled_decay: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            total_steps: 1_000_000,
            grad_clip: 0.0,
            coupled_decay: false,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.warmup_steps > 0 && self.warmup_steps < self.total_steps) {
            return bad(format!(
                "need 0 < warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps >= 0.0 && self.peak_lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("eps, peak_lr, weight_decay and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    /// Piecewise-linear rate: ramps to the peak at `warmup_steps`, reaches
    /// zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Argument(format!(
                "step {step} is past the schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            Ok(self.peak_lr * step as f64 / self.warmup_steps as f64)
        } else {
            Ok(self.peak_lr * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F: Float> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
}

impl<F: Float> OptState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        OptState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// Applies update number `opt.step + 1` with learning rate `lr_at(opt.step + 1)`
/// and returns that rate.
pub fn adam_step<F: Float>(
    params: &mut ParamSet<F>,
    opt: &mut OptState<F>,
    grads: &ParamSet<F>,
    cfg: &OptConfig,
) -> Result<f64> {
    let lr = cfg.lr_at(opt.step + 1)?;
    adam_update(params, opt, grads, cfg, lr)?;
    Ok(lr)
}

/// One Adam update at an explicit learning rate.
pub fn adam_update<F: Float>(
    params: &mut ParamSet<F>,
    opt: &mut OptState<F>,
    grads: &ParamSet<F>,
    cfg: &OptConfig,
    lr: f64,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&opt.m) {
        return Err(Error::Contract("gradient or moment layout differs from parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let clip = if cfg.grad_clip > 0.0 {
        let norm = grads.l2_norm();
        if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 }
    } else {
        1.0
    };

    let t = opt.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
    let (lr_f, eps, clip) = (F::of(lr), F::of(cfg.eps), F::of(clip));

    let names: Vec<String> = params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let wd = if decays(name) { F::of(cfg.weight_decay) } else { F::zero() };
        let p = &mut params.tensors_mut()[i].data;
        let g = &grads.tensors()[i].data;
        let m = &mut opt.m.tensors_mut()[i].data;
        let v = &mut opt.v.tensors_mut()[i].data;
        for j in 0..p.len() {
            let mut gj = g[j] * clip;
            if cfg.coupled_decay {
                gj += wd * p[j];
            }
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let mhat = m[j] * inv_bc1;
            let vhat = v[j] * inv_bc2;
            let mut update = mhat / (vhat.sqrt() + eps);
            if !cfg.coupled_decay {
                update += wd * p[j];
            }
            p[j] -= lr_f * update;
        }
    }
    opt.step = t;
    Ok(())
}

/// Token-weighted gradient accumulator. Each micro-batch gradient is the
/// mean over its own masked tokens; `flush` returns the mean over all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumState<F: Float> {
    sum: Option<ParamSet<F>>,
    tokens: u64,
    micro_batches: usize,
}

impl<F: Float> Default for AccumState<F> {
    fn default() -> Self {
        AccumState { sum: None, tokens: 0, micro_batches: 0 }
    }
}

impl<F: Float> AccumState<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn micro_batches(&self) -> usize {
        self.micro_batches
    }

    pub fn accumulate(&mut self, grads: &ParamSet<F>, masked_tokens: usize) -> Result<()> {
        if masked_tokens == 0 {
            return Err(Error::Contract("micro-batch without masked tokens".into()));
        }
        let w = F::of(masked_tokens as f64);
        match &mut self.sum {
            Some(sum) => sum.axpy(w, grads)?,
            None => {
                let mut s = grads.clone();
                s.scale(w);
                self.sum = Some(s);
            }
        }
        self.tokens += masked_tokens as u64;
        self.micro_batches += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<ParamSet<F>> {
        let mut sum = self
            .sum
            .take()
            .ok_or_else(|| Error::Contract("flush on an empty accumulator".into()))?;
        sum.scale(F::of(1.0 / self.tokens as f64));
        self.tokens = 0;
        self.micro_batches = 0;
        Ok(sum)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetEquivalent {
    pub batch_size: u64,
    pub steps: u64,
    /// `batch_size * steps`.
    pub sequences: u64,
    pub exact: bool,
}

impl BudgetEquivalent {
    pub fn warning(&self, reference: u64) -> Option<String> {
        (!self.exact).then(|| {
            format!(
                "batch size {} does not divide {reference} sequences; {} steps see {} ({:+})",
                self.batch_size,
                self.steps,
                self.sequences,
                self.sequences as i64 - reference as i64
            )
        })
    }
}

/// Step counts that keep `bsz * steps` sequences fixed for each requested
/// batch size. Inexact requests get the nearest step count.
pub fn equivalent_budgets(bsz: u64, steps: u64, targets: &[u64]) -> Result<Vec<BudgetEquivalent>> {
    if bsz == 0 || steps == 0 || targets.contains(&0) {
        return Err(Error::Argument("batch sizes and steps must be positive".into()));
    }
    let total = bsz
        .checked_mul(steps)
        .ok_or_else(|| Error::Argument("sequence budget overflows".into()))?;
    Ok(targets
        .iter()
        .map(|&b| {
            let s = ((total + b / 2) / b).max(1);
            BudgetEquivalent { batch_size: b, steps: s, sequences: b * s, exact: b * s == total }
        })
        .collect())
}
