//! MLM and NSP heads on top of the encoder.

use super::encoder::pair_mut;
use super::ops::{self, LnCache};
use super::{EncoderCache, EncoderInput, Model};
use crate::bpe::SpecialIds;
use crate::error::{Error, Result};
use crate::masking::MaskedExample;
use crate::tensor::{gemm, Float, ParamSet, View, ViewMut};

/// A padded batch of masked examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainBatch {
    pub input: EncoderInput,
    /// Flattened row (`b * seq_len + t`) of each prediction, in batch order.
    pub mask_rows: Vec<usize>,
    pub targets: Vec<u32>,
    pub nsp_labels: Vec<Option<bool>>,
}

impl PretrainBatch {
    pub fn from_examples(examples: &[MaskedExample], specials: SpecialIds) -> Result<Self> {
        let input = EncoderInput::pack(
            examples.iter().map(|e| (e.input_ids.as_slice(), e.segment_ids.as_slice())),
            specials.pad,
        )?;
        let mut mask_rows = Vec::new();
        let mut targets = Vec::new();
        for (b, ex) in examples.iter().enumerate() {
            for &p in &ex.mask_positions {
                mask_rows.push(b * input.seq_len + p);
                targets.push(ex.labels[p]);
            }
        }
        Ok(PretrainBatch {
            input,
            mask_rows,
            targets,
            nsp_labels: examples.iter().map(|e| e.nsp_label).collect(),
        })
    }

    pub fn masked_count(&self) -> usize {
        self.targets.len()
    }

    pub fn batch_size(&self) -> usize {
        self.input.batch
    }

    fn nsp_targets(&self) -> Result<Vec<usize>> {
        self.nsp_labels
            .iter()
            .map(|l| {
                l.map(usize::from)
                    .ok_or_else(|| Error::Contract("NSP loss requested but an instance has no label".into()))
            })
            .collect()
    }
}

/// Denominators applied to the summed per-position losses. The plain mean
/// uses the batch's own masked count and instance count; accumulation over
/// micro-batches can pass the totals of the whole step instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossNorm {
    pub mlm: f64,
    /// `None` drops the NSP term entirely.
    pub nsp: Option<f64>,
}

impl LossNorm {
    pub fn mean(batch: &PretrainBatch, use_nsp: bool) -> Self {
        LossNorm {
            mlm: batch.masked_count() as f64,
            nsp: use_nsp.then_some(batch.batch_size() as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mlm: f64,
    pub nsp: Option<f64>,
    /// Σ masked NLL, for exact aggregation across batches.
    pub mlm_nll_sum: f64,
    pub masked: usize,
    pub nsp_nll_sum: f64,
    pub nsp_correct: usize,
    pub instances: usize,
}

struct HeadCache<F> {
    gathered: Vec<F>,
    dense: Vec<F>,
    ln: LnCache<F>,
    normed: Vec<F>,
    cls: Vec<F>,
    pooled: Vec<F>,
}

pub struct ForwardOutput<F> {
    /// `[masked, vocab]`, one row per entry of `mask_rows`.
    pub mlm_logits: Vec<F>,
    /// `[batch, 2]`, index 1 meaning "B continues A".
    pub nsp_logits: Vec<F>,
    pub encoder: EncoderCache<F>,
    head: HeadCache<F>,
}

impl<F: Float> ForwardOutput<F> {
    /// Mean masked-token cross-entropy, plus mean NSP cross-entropy when `use_nsp`.
    pub fn loss(&self, batch: &PretrainBatch, use_nsp: bool) -> Result<LossBreakdown> {
        if batch.masked_count() == 0 {
            return Err(Error::Contract("batch has no masked positions".into()));
        }
        let v = self.mlm_logits.len() / batch.masked_count();
        let mut mlm_sum = 0.0;
        for (row, &tgt) in self.mlm_logits.chunks_exact(v).zip(&batch.targets) {
            mlm_sum += (ops::log_sum_exp(row) - row[tgt as usize]).f64();
        }
        let masked = batch.masked_count();
        let mlm = mlm_sum / masked as f64;
        let instances = batch.batch_size();
        let (mut nsp_sum, mut correct) = (0.0, 0);
        let nsp = if use_nsp {
            let targets = batch.nsp_targets()?;
            for (row, &tgt) in self.nsp_logits.chunks_exact(2).zip(&targets) {
                nsp_sum += (ops::log_sum_exp(row) - row[tgt]).f64();
                let pred = usize::from(row[1] > row[0]);
                correct += usize::from(pred == tgt);
            }
            Some(nsp_sum / instances as f64)
        } else {
            None
        };
        Ok(LossBreakdown {
            total: mlm + nsp.unwrap_or(0.0),
            mlm,
            nsp,
            mlm_nll_sum: mlm_sum,
            masked,
            nsp_nll_sum: nsp_sum,
            nsp_correct: correct,
            instances,
        })
    }
}

impl<F: Float> Model<F> {
    pub fn forward(&self, batch: &PretrainBatch, dropout_key: Option<u64>) -> Result<ForwardOutput<F>> {
        if batch.mask_rows.len() != batch.targets.len() || batch.nsp_labels.len() != batch.input.batch {
            return Err(Error::Contract("inconsistent batch".into()));
        }
        if let Some(&t) = batch.targets.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Input(format!("target id {t} outside vocabulary")));
        }
        let (hidden, encoder) = self.encode(&batch.input, dropout_key)?;
        let lay = self.layout();
        let (h, v, m) = (self.config.hidden, self.config.vocab, batch.masked_count());

        let mut gathered = Vec::with_capacity(m * h);
        for &r in &batch.mask_rows {
            gathered.extend_from_slice(&hidden[r * h..(r + 1) * h]);
        }
        let dense = ops::linear(&gathered, m, self.p(lay.mlm_w), self.p(lay.mlm_b));
        let act: Vec<F> = dense.iter().map(|&x| ops::gelu(x)).collect();
        let (normed, ln) = ops::layer_norm(&act, h, self.p(lay.mlm_ln_g), self.p(lay.mlm_ln_b));
        let bias = &self.p(lay.mlm_bias).data;
        let mut mlm_logits = Vec::with_capacity(m * v);
        for _ in 0..m {
            mlm_logits.extend_from_slice(bias);
        }
        // Output projection is the transposed token embedding.
        gemm(
            F::one(),
            View::dense(&normed, m, h),
            self.p(lay.tok).view().t(),
            F::one(),
            ViewMut::dense(&mut mlm_logits, m, v),
        );

        let t = batch.input.seq_len;
        let bsz = batch.input.batch;
        let mut cls = Vec::with_capacity(bsz * h);
        for b in 0..bsz {
            cls.extend_from_slice(&hidden[b * t * h..b * t * h + h]);
        }
        let mut pooled = ops::linear(&cls, bsz, self.p(lay.pool_w), self.p(lay.pool_b));
        pooled.iter_mut().for_each(|x| *x = x.tanh());
        let nsp_logits = ops::linear(&pooled, bsz, self.p(lay.nsp_w), self.p(lay.nsp_b));

        Ok(ForwardOutput {
            mlm_logits,
            nsp_logits,
            encoder,
            head: HeadCache { gathered, dense, ln, normed, cls, pooled },
        })
    }

    /// Gradient of `Σ MLM NLL / norm.mlm + Σ NSP NLL / norm.nsp`.
    pub fn backward_scaled(&self, out: &ForwardOutput<F>, batch: &PretrainBatch, norm: LossNorm) -> Result<ParamSet<F>> {
        let lay = self.layout();
        let (h, v, m) = (self.config.hidden, self.config.vocab, batch.masked_count());
        if m == 0 {
            return Err(Error::Contract("batch has no masked positions".into()));
        }
        let mut grads = self.params.zeros_like();
        let hc = &out.head;
        let t = batch.input.seq_len;
        let bsz = batch.input.batch;
        let mut d_hidden = vec![F::zero(); batch.input.rows() * h];

        // MLM: softmax minus one-hot, scaled.
        let inv = F::of(1.0 / norm.mlm);
        let mut dlogits = out.mlm_logits.clone();
        for (row, &tgt) in dlogits.chunks_exact_mut(v).zip(&batch.targets) {
            let lse = ops::log_sum_exp(row);
            for x in row.iter_mut() {
                *x = (*x - lse).exp() * inv;
            }
            row[tgt as usize] -= inv;
        }
        {
            let db = &mut grads.tensors_mut()[lay.mlm_bias].data;
            for row in dlogits.chunks_exact(v) {
                db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
            }
        }
        gemm(
            F::one(),
            View::dense(&dlogits, m, v).t(),
            View::dense(&hc.normed, m, h),
            F::one(),
            grads.tensors_mut()[lay.tok].view_mut(),
        );
        let mut dnormed = vec![F::zero(); m * h];
        gemm(
            F::one(),
            View::dense(&dlogits, m, v),
            self.p(lay.tok).view(),
            F::zero(),
            ViewMut::dense(&mut dnormed, m, h),
        );
        let (dg, db) = pair_mut(&mut grads, lay.mlm_ln_g, lay.mlm_ln_b);
        let mut dact = ops::layer_norm_backward(&dnormed, &hc.ln, self.p(lay.mlm_ln_g), dg, db);
        dact.iter_mut().zip(&hc.dense).for_each(|(d, &x)| *d *= ops::gelu_grad(x));
        let (dw, db) = pair_mut(&mut grads, lay.mlm_w, lay.mlm_b);
        let dgathered = ops::linear_backward(&hc.gathered, &dact, m, self.p(lay.mlm_w), dw, db, true)
            .expect("dx requested");
        for (i, &r) in batch.mask_rows.iter().enumerate() {
            for c in 0..h {
                d_hidden[r * h + c] += dgathered[i * h + c];
            }
        }

        if let Some(nsp_norm) = norm.nsp {
            let targets = batch.nsp_targets()?;
            let inv = F::of(1.0 / nsp_norm);
            let mut dl = out.nsp_logits.clone();
            for (row, &tgt) in dl.chunks_exact_mut(2).zip(&targets) {
                let lse = ops::log_sum_exp(row);
                for x in row.iter_mut() {
                    *x = (*x - lse).exp() * inv;
                }
                row[tgt] -= inv;
            }
            let (dw, db) = pair_mut(&mut grads, lay.nsp_w, lay.nsp_b);
            let mut dpool = ops::linear_backward(&hc.pooled, &dl, bsz, self.p(lay.nsp_w), dw, db, true)
                .expect("dx requested");
            dpool.iter_mut().zip(&hc.pooled).for_each(|(d, &p)| *d *= F::one() - p * p);
            let (dw, db) = pair_mut(&mut grads, lay.pool_w, lay.pool_b);
            let dcls = ops::linear_backward(&hc.cls, &dpool, bsz, self.p(lay.pool_w), dw, db, true)
                .expect("dx requested");
            for b in 0..bsz {
                for c in 0..h {
                    d_hidden[b * t * h + c] += dcls[b * h + c];
                }
            }
        }

        self.encode_backward(&out.encoder, d_hidden, &mut grads)?;
        Ok(grads)
    }

    /// Gradient of the mean loss returned by [`ForwardOutput::loss`].
    pub fn backward(&self, out: &ForwardOutput<F>, batch: &PretrainBatch, use_nsp: bool) -> Result<ParamSet<F>> {
        self.backward_scaled(out, batch, LossNorm::mean(batch, use_nsp))
    }
}
