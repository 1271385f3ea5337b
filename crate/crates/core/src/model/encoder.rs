use rayon::prelude::*;

use super::ops::{self, Dropout, LnCache};
use super::{LayerIdx, Model};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, ParamSet, Tensor, View, ViewMut};

// Dropout sites.
const SITE_EMB: u64 = 1;
const SITE_PROBS: u64 = 2;
const SITE_ATTN_OUT: u64 = 3;
const SITE_FFN_OUT: u64 = 4;

/// A padded batch of token sequences, `[batch, seq_len]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    /// Unpadded length of each sequence; keys at or beyond it are masked.
    pub lengths: Vec<usize>,
}

impl EncoderInput {
    /// Pads every sequence to the longest one with `pad`.
    pub fn pack<'a, I>(seqs: I, pad: u32) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [u32], &'a [u8])>,
    {
        let seqs: Vec<_> = seqs.into_iter().collect();
        let seq_len = seqs.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
        let mut input = EncoderInput {
            batch: seqs.len(),
            seq_len,
            ids: Vec::with_capacity(seqs.len() * seq_len),
            segments: Vec::with_capacity(seqs.len() * seq_len),
            lengths: Vec::with_capacity(seqs.len()),
        };
        for (tokens, segs) in seqs {
            if tokens.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            if tokens.len() != segs.len() {
                return Err(Error::Input("token and segment lengths differ".into()));
            }
            input.ids.extend_from_slice(tokens);
            input.ids.resize(input.ids.len() + seq_len - tokens.len(), pad);
            input.segments.extend_from_slice(segs);
            input.segments.resize(input.segments.len() + seq_len - tokens.len(), 0);
            input.lengths.push(tokens.len());
        }
        Ok(input)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if self.seq_len > max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds the model maximum {max_len}",
                self.seq_len
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Input(format!("token id {id} outside vocabulary of {vocab}")));
        }
        if self.segments.iter().any(|&s| s > 1) {
            return Err(Error::Input("segment ids must be 0 or 1".into()));
        }
        if self.lengths.iter().any(|&l| l == 0 || l > self.seq_len) {
            return Err(Error::Input("sequence lengths out of range".into()));
        }
        Ok(())
    }
}

struct LayerCache<F> {
    x: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[batch, heads, seq, seq]` attention probabilities before dropout.
    probs: Vec<F>,
    ctx: Vec<F>,
    ln1: LnCache<F>,
    y1: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
    ln2: LnCache<F>,
}

/// Activations kept for the backward pass.
pub struct EncoderCache<F> {
    pub input: EncoderInput,
    layers: Vec<LayerCache<F>>,
    dropout: Option<Dropout>,
}

impl<F> EncoderCache<F> {
    /// Attention probabilities of layer `l`, `[batch, heads, seq, seq]`.
    pub fn attention(&self, l: usize) -> &[F] {
        &self.layers[l].probs
    }
}

/// Returns two distinct tensors mutably.
pub(crate) fn pair_mut<F: Float>(g: &mut ParamSet<F>, i: usize, j: usize) -> (&mut Tensor<F>, &mut Tensor<F>) {
    assert_ne!(i, j);
    let t = g.tensors_mut();
    if i < j {
        let (a, b) = t.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = t.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

struct Dims {
    t: usize,
    h: usize,
    a: usize,
    d: usize,
    scale: f64,
}

fn attend<F: Float>(
    dims: &Dims,
    b: usize,
    len: usize,
    q: &[F],
    k: &[F],
    v: &[F],
    probs_b: &mut [F],
    ctx_b: &mut [F],
    drop: Option<Dropout>,
) {
    let Dims { t, h, a, d, scale } = *dims;
    let mut pd = vec![F::zero(); t * t];
    for head in 0..a {
        let p = &mut probs_b[head * t * t..(head + 1) * t * t];
        gemm(
            F::of(scale),
            View::block(q, h, b * t, t, head * d, d),
            View::block(k, h, b * t, t, head * d, d).t(),
            F::zero(),
            ViewMut::dense(p, t, t),
        );
        for row in p.chunks_exact_mut(t) {
            ops::softmax_prefix(row, len);
        }
        let used: &[F] = match drop {
            Some(dr) => {
                pd.copy_from_slice(p);
                apply_offset(dr, &mut pd, (b * a + head) * t * t);
                &pd
            }
            None => p,
        };
        gemm(
            F::one(),
            View::dense(used, t, t),
            View::block(v, h, b * t, t, head * d, d),
            F::zero(),
            ViewMut::block(ctx_b, h, 0, t, head * d, d),
        );
    }
}

/// Dropout over a sub-slice whose first element has global index `offset`.
fn apply_offset<F: Float>(dr: Dropout, data: &mut [F], offset: usize) {
    let scale = F::of(1.0 / (1.0 - dr.p));
    for (i, x) in data.iter_mut().enumerate() {
        *x = if dr.keeps(offset + i) { *x * scale } else { F::zero() };
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_backward<F: Float>(
    dims: &Dims,
    b: usize,
    cache: &LayerCache<F>,
    dctx: &[F],
    dq_b: &mut [F],
    dk_b: &mut [F],
    dv_b: &mut [F],
    drop: Option<Dropout>,
) {
    let Dims { t, h, a, d, scale } = *dims;
    let mut pd = vec![F::zero(); t * t];
    let mut dp = vec![F::zero(); t * t];
    for head in 0..a {
        let off = (b * a + head) * t * t;
        let p = &cache.probs[off..off + t * t];
        pd.copy_from_slice(p);
        if let Some(dr) = drop {
            apply_offset(dr, &mut pd, off);
        }
        let dctx_bh = View::block(dctx, h, b * t, t, head * d, d);
        // dPd = dctx V^T, dV = Pd^T dctx
        gemm(
            F::one(),
            dctx_bh,
            View::block(&cache.v, h, b * t, t, head * d, d).t(),
            F::zero(),
            ViewMut::dense(&mut dp, t, t),
        );
        gemm(
            F::one(),
            View::dense(&pd, t, t).t(),
            dctx_bh,
            F::zero(),
            ViewMut::block(dv_b, h, 0, t, head * d, d),
        );
        if let Some(dr) = drop {
            apply_offset(dr, &mut dp, off);
        }
        // Softmax backward, in place: dS = P ⊙ (dP - <dP, P>).
        for (dp_row, p_row) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
            let dot: F = dp_row.iter().zip(p_row).map(|(&x, &y)| x * y).sum();
            for (x, &y) in dp_row.iter_mut().zip(p_row) {
                *x = y * (*x - dot);
            }
        }
        gemm(
            F::of(scale),
            View::dense(&dp, t, t),
            View::block(&cache.k, h, b * t, t, head * d, d),
            F::zero(),
            ViewMut::block(dq_b, h, 0, t, head * d, d),
        );
        gemm(
            F::of(scale),
            View::dense(&dp, t, t).t(),
            View::block(&cache.q, h, b * t, t, head * d, d),
            F::zero(),
            ViewMut::block(dk_b, h, 0, t, head * d, d),
        );
    }
}

impl<F: Float> Model<F> {
    fn dims(&self, t: usize) -> Dims {
        let c = &self.config;
        Dims { t, h: c.hidden, a: c.heads, d: c.head_dim(), scale: 1.0 / (c.head_dim() as f64).sqrt() }
    }

    fn dropout_for(&self, key: Option<u64>) -> Option<Dropout> {
        key.filter(|_| self.config.dropout > 0.0)
            .map(|key| Dropout { key, p: self.config.dropout })
    }

    /// Final hidden states `[rows, hidden]`. A dropout key switches on
    /// training-mode dropout; `None` is evaluation mode.
    pub fn encode(&self, input: &EncoderInput, dropout_key: Option<u64>) -> Result<(Vec<F>, EncoderCache<F>)> {
        input.validate(self.config.vocab, self.config.max_len)?;
        let drop = self.dropout_for(dropout_key);
        let lay = self.layout();
        let (n, t, h) = (input.rows(), input.seq_len, self.config.hidden);
        let dims = self.dims(t);

        let (tok, pos, seg) = (self.p(lay.tok), self.p(lay.pos), self.p(lay.seg));
        let mut x = vec![F::zero(); n * h];
        for r in 0..n {
            let (id, p, s) = (input.ids[r] as usize, r % t, input.segments[r] as usize);
            let row = &mut x[r * h..(r + 1) * h];
            for c in 0..h {
                row[c] = tok.data[id * h + c] + pos.data[p * h + c] + seg.data[s * h + c];
            }
        }
        if let Some(dr) = drop {
            dr.site(&[SITE_EMB]).apply(&mut x);
        }

        let mut layers = Vec::with_capacity(lay.layers.len());
        for (l, li) in lay.layers.iter().enumerate() {
            let (cache, y) = self.layer_forward(l, li, &dims, input, x, drop);
            layers.push(cache);
            x = y;
        }
        Ok((x, EncoderCache { input: input.clone(), layers, dropout: drop }))
    }

    fn layer_forward(
        &self,
        l: usize,
        li: &LayerIdx,
        dims: &Dims,
        input: &EncoderInput,
        x: Vec<F>,
        drop: Option<Dropout>,
    ) -> (LayerCache<F>, Vec<F>) {
        let (n, t, h, a) = (input.rows(), dims.t, dims.h, dims.a);
        let q = ops::linear(&x, n, self.p(li.q_w), self.p(li.q_b));
        let k = ops::linear(&x, n, self.p(li.k_w), self.p(li.k_b));
        let v = ops::linear(&x, n, self.p(li.v_w), self.p(li.v_b));
        let mut probs = vec![F::zero(); input.batch * a * t * t];
        let mut ctx = vec![F::zero(); n * h];
        let probs_drop = drop.map(|d| d.site(&[SITE_PROBS, l as u64]));
        probs
            .par_chunks_mut(a * t * t)
            .zip(ctx.par_chunks_mut(t * h))
            .enumerate()
            .for_each(|(b, (pb, cb))| attend(dims, b, input.lengths[b], &q, &k, &v, pb, cb, probs_drop));

        let mut z1 = ops::linear(&ctx, n, self.p(li.o_w), self.p(li.o_b));
        if let Some(dr) = drop {
            dr.site(&[SITE_ATTN_OUT, l as u64]).apply(&mut z1);
        }
        z1.iter_mut().zip(&x).for_each(|(z, &xi)| *z += xi);
        let (y1, ln1) = ops::layer_norm(&z1, h, self.p(li.ln1_g), self.p(li.ln1_b));

        let f1 = ops::linear(&y1, n, self.p(li.f1_w), self.p(li.f1_b));
        let g: Vec<F> = f1.iter().map(|&v| ops::gelu(v)).collect();
        let mut z2 = ops::linear(&g, n, self.p(li.f2_w), self.p(li.f2_b));
        if let Some(dr) = drop {
            dr.site(&[SITE_FFN_OUT, l as u64]).apply(&mut z2);
        }
        z2.iter_mut().zip(&y1).for_each(|(z, &yi)| *z += yi);
        let (y2, ln2) = ops::layer_norm(&z2, h, self.p(li.ln2_g), self.p(li.ln2_b));
        (LayerCache { x, q, k, v, probs, ctx, ln1, y1, f1, g, ln2 }, y2)
    }

    /// Accumulates into `grads` the gradient flowing back from `d_hidden`
    /// (same shape as the encoder output).
    pub fn encode_backward(&self, cache: &EncoderCache<F>, d_hidden: Vec<F>, grads: &mut ParamSet<F>) -> Result<()> {
        if !grads.same_layout(&self.params) {
            return Err(Error::Contract("gradient set does not match parameters".into()));
        }
        let input = &cache.input;
        let lay = self.layout();
        let (n, t, h) = (input.rows(), input.seq_len, self.config.hidden);
        if d_hidden.len() != n * h {
            return Err(Error::Contract("hidden gradient has the wrong shape".into()));
        }
        let dims = self.dims(t);
        let drop = cache.dropout;
        let mut dy = d_hidden;
        for (l, li) in lay.layers.iter().enumerate().rev() {
            dy = self.layer_backward(l, li, &dims, &cache.layers[l], input, dy, drop, grads);
        }

        if let Some(dr) = drop {
            dr.site(&[SITE_EMB]).apply(&mut dy);
        }
        let mut scatter = |idx: usize, row_of: &dyn Fn(usize) -> usize| {
            let tgt = &mut grads.tensors_mut()[idx].data;
            for r in 0..n {
                let dst = row_of(r) * h;
                for c in 0..h {
                    tgt[dst + c] += dy[r * h + c];
                }
            }
        };
        scatter(lay.tok, &|r| input.ids[r] as usize);
        scatter(lay.pos, &|r| r % t);
        scatter(lay.seg, &|r| input.segments[r] as usize);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        l: usize,
        li: &LayerIdx,
        dims: &Dims,
        c: &LayerCache<F>,
        input: &EncoderInput,
        dy: Vec<F>,
        drop: Option<Dropout>,
        grads: &mut ParamSet<F>,
    ) -> Vec<F> {
        let (n, t, h) = (input.rows(), dims.t, dims.h);
        let lin = |grads: &mut ParamSet<F>, x: &[F], d: &[F], w: usize, b: usize| {
            let (dw, db) = pair_mut(grads, w, b);
            ops::linear_backward(x, d, n, self.p(w), dw, db, true).expect("dx requested")
        };

        let (dg2, db2) = pair_mut(grads, li.ln2_g, li.ln2_b);
        let dz2 = ops::layer_norm_backward(&dy, &c.ln2, self.p(li.ln2_g), dg2, db2);
        let mut dy1 = dz2.clone();
        let mut df2 = dz2;
        if let Some(dr) = drop {
            dr.site(&[SITE_FFN_OUT, l as u64]).apply(&mut df2);
        }
        let mut dg = lin(grads, &c.g, &df2, li.f2_w, li.f2_b);
        dg.iter_mut().zip(&c.f1).for_each(|(d, &f)| *d *= ops::gelu_grad(f));
        let from_ffn = lin(grads, &c.y1, &dg, li.f1_w, li.f1_b);
        dy1.iter_mut().zip(&from_ffn).for_each(|(d, &e)| *d += e);

        let (dg1, db1) = pair_mut(grads, li.ln1_g, li.ln1_b);
        let dz1 = ops::layer_norm_backward(&dy1, &c.ln1, self.p(li.ln1_g), dg1, db1);
        let mut dx = dz1.clone();
        let mut dao = dz1;
        if let Some(dr) = drop {
            dr.site(&[SITE_ATTN_OUT, l as u64]).apply(&mut dao);
        }
        let dctx = lin(grads, &c.ctx, &dao, li.o_w, li.o_b);

        let mut dq = vec![F::zero(); n * h];
        let mut dk = vec![F::zero(); n * h];
        let mut dv = vec![F::zero(); n * h];
        let probs_drop = drop.map(|d| d.site(&[SITE_PROBS, l as u64]));
        dq.par_chunks_mut(t * h)
            .zip(dk.par_chunks_mut(t * h))
            .zip(dv.par_chunks_mut(t * h))
            .enumerate()
            .for_each(|(b, ((dqb, dkb), dvb))| attend_backward(dims, b, c, &dctx, dqb, dkb, dvb, probs_drop));

        for (d, w, b) in [(&dq, li.q_w, li.q_b), (&dk, li.k_w, li.k_b), (&dv, li.v_w, li.v_b)] {
            let back = lin(grads, &c.x, d, w, b);
            dx.iter_mut().zip(&back).for_each(|(x, &e)| *x += e);
        }
        dx
    }
}
