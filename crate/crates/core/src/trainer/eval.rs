use std::time::Instant;

use rayon::prelude::*;

use crate::bpe::SpecialIds;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskedExample};
use crate::model::{Model, PretrainBatch};
use crate::packing::TrainingInstance;
use crate::rng::{self, tag};

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    /// Mean masked-token negative log-likelihood.
    pub nll: f64,
    pub ppl: f64,
    pub masked: u64,
    /// Present when every held-out instance carries an NSP label.
    pub nsp_accuracy: Option<f64>,
    pub seconds: f64,
}

/// `exp(nll_sum / count)`.
pub fn perplexity(nll_sum: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::Argument("perplexity over zero positions".into()));
    }
    Ok((nll_sum / count as f64).exp())
}

/// Fixed corruption for held-out instance `id`, independent of the epoch.
fn eval_masks(heldout: &[TrainingInstance], seed: u64, specials: SpecialIds) -> Result<Vec<MaskedExample>> {
    heldout
        .par_iter()
        .enumerate()
        .map(|(id, inst)| apply_mask(inst, specials, &mut rng::keyed_rng(&[seed, tag::EVAL_MASK, id as u64])))
        .collect()
}

fn nonempty(heldout: &[TrainingInstance]) -> Result<()> {
    if heldout.is_empty() {
        return Err(Error::Data("held-out set is empty".into()));
    }
    Ok(())
}

/// Masked-token perplexity with dropout off and masks keyed by `seed`.
/// Runs in 64-bit on a copy of the weights; the model is not touched.
pub fn evaluate_ppl(model: &Model<f32>, heldout: &[TrainingInstance], seed: u64) -> Result<EvalReport> {
    nonempty(heldout)?;
    let started = Instant::now();
    let specials = SpecialIds::for_vocab_size(model.config.vocab);
    let examples = eval_masks(heldout, seed, specials)?;
    let use_nsp = heldout.iter().all(|i| i.nsp_label.is_some());
    let m64 = model.cast::<f64>();
    let (mut nll, mut masked, mut correct) = (0.0, 0usize, 0usize);
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch = PretrainBatch::from_examples(chunk, specials)?;
        let loss = m64.forward(&batch, None)?.loss(&batch, use_nsp)?;
        nll += loss.mlm_nll_sum;
        masked += loss.masked;
        correct += loss.nsp_correct;
    }
    Ok(EvalReport {
        step: 0,
        nll: nll / masked as f64,
        ppl: perplexity(nll, masked)?,
        masked: masked as u64,
        nsp_accuracy: use_nsp.then(|| correct as f64 / heldout.len() as f64),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Perplexity of an add-one smoothed unigram model of the training tokens,
/// scored on exactly the positions `evaluate_ppl` masks.
pub fn unigram_baseline(
    train: &[TrainingInstance],
    heldout: &[TrainingInstance],
    seed: u64,
    specials: SpecialIds,
) -> Result<f64> {
    nonempty(heldout)?;
    let text = specials.text_size as usize;
    let mut counts = vec![0u64; text];
    let mut total = 0u64;
    for t in train.iter().flat_map(|i| &i.tokens).filter(|&&t| !specials.is_special(t)) {
        counts[*t as usize] += 1;
        total += 1;
    }
    let denom = (total + text as u64) as f64;
    let mut nll = 0.0;
    let mut n = 0;
    for ex in eval_masks(heldout, seed, specials)? {
        for &p in &ex.mask_positions {
            nll -= ((counts[ex.labels[p] as usize] + 1) as f64 / denom).ln();
            n += 1;
        }
    }
    perplexity(nll, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn instances(n: usize, specials: SpecialIds) -> Vec<TrainingInstance> {
        (0..n)
            .map(|i| {
                let mut tokens = vec![specials.cls];
                tokens.extend((0..10).map(|j| ((i * 7 + j * 3) % 4) as u32));
                tokens.push(specials.eos);
                TrainingInstance { segment_ids: vec![0; tokens.len()], tokens, nsp_label: None, provenance: Vec::new() }
            })
            .collect()
    }

    #[test]
    fn hand_computed_perplexity() {
        let p = perplexity(2f64.ln() + 8f64.ln(), 2).unwrap();
        assert!((p - 4.0).abs() < 1e-12);
        assert!(perplexity(1.0, 0).is_err());
    }

    #[test]
    fn uniform_logits_give_vocab_size() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, max_len: 16, vocab: 32, dropout: 0.1 };
        let mut m = Model::<f32>::init(cfg, 1).unwrap();
        m.params.get_mut("embeddings.token").unwrap().data.fill(0.0);
        let specials = SpecialIds::for_vocab_size(32);
        let r = evaluate_ppl(&m, &instances(5, specials), 3).unwrap();
        assert!((r.ppl - 32.0).abs() < 1e-9, "{}", r.ppl);
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, max_len: 16, vocab: 32, dropout: 0.1 };
        let m = Model::<f32>::init(cfg, 1).unwrap();
        let before = m.clone();
        let specials = SpecialIds::for_vocab_size(32);
        let h = instances(7, specials);
        let a = evaluate_ppl(&m, &h, 3).unwrap();
        let b = evaluate_ppl(&m, &h, 3).unwrap();
        assert_eq!((a.nll, a.ppl, a.masked), (b.nll, b.ppl, b.masked));
        assert_eq!(m, before);
        assert!(a.ppl >= 1.0);
        assert!(matches!(evaluate_ppl(&m, &[], 3), Err(Error::Data(_))));
    }

    #[test]
    fn unigram_baseline_beats_uniform_on_skewed_text() {
        let specials = SpecialIds::for_vocab_size(32);
        let h = instances(20, specials);
        let p = unigram_baseline(&h, &h, 0, specials).unwrap();
        assert!(p > 1.0 && p < 6.0, "{p}");
    }
}
