//! Named run variants for the input-format, masking and batch-size studies.

use std::collections::HashMap;
use std::fmt::Write;
use std::path::Path;

use super::{evaluate_ppl, pretrain, Batching, Budget, PretrainRun, TrainOptions};
use crate::error::{Error, Result};
use crate::masking::MaskingMode;
use crate::packing::{pack, PackingFormat, TokenizedDoc, TrainingInstance};

/// Reference (batch size, steps, peak learning rate) rows of the batch-size study.
pub const BATCH_SIZE_REFERENCE: [(u64, u64, f64); 3] = [(256, 1_000_000, 1e-4), (2048, 125_000, 7e-4), (8192, 31_000, 1e-3)];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPreset {
    pub name: String,
    pub run: PretrainRun,
    /// The reference row a batch-size preset was scaled from.
    pub reference: Option<(u64, u64, f64)>,
}

/// Every packing format under static and dynamic masking, all with the
/// same sequence budget. NSP is on exactly for the pair formats.
pub fn ablation_presets(base: &PretrainRun, sequences: u64) -> Vec<AblationPreset> {
    let mut out = Vec::new();
    for format in PackingFormat::ALL {
        for masking in [MaskingMode::Static, MaskingMode::Dynamic] {
            let nsp = if format.has_nsp() { "+nsp" } else { "" };
            out.push(AblationPreset {
                name: format!("{}{nsp}/{}", format.name(), masking.name()),
                run: PretrainRun {
                    format,
                    masking,
                    use_nsp: format.has_nsp(),
                    nsp_override: false,
                    budget: Budget::Sequences(sequences),
                    ..base.clone()
                },
                reference: None,
            });
        }
    }
    out
}

/// The reference batch-size rows scaled down: batch sizes keep the
/// reference ratios (1 : 8 : 32) starting from `base_batch`, steps shrink by
/// the same factor so batch·steps stays fixed, and each row keeps its peak
/// rate. Large batches are built from `micro`-sequence micro-batches.
pub fn batch_size_presets(base: &PretrainRun, base_batch: usize, base_steps: u64, micro: usize) -> Result<Vec<AblationPreset>> {
    let (ref_bsz, _, _) = BATCH_SIZE_REFERENCE[0];
    let mut out = Vec::new();
    for row in BATCH_SIZE_REFERENCE {
        let ratio = row.0 / ref_bsz;
        let bsz = base_batch * ratio as usize;
        if base_steps % ratio != 0 {
            return Err(Error::Argument(format!("{base_steps} steps are not divisible by {ratio}")));
        }
        let micro = micro.min(bsz);
        if bsz % micro != 0 {
            return Err(Error::Argument(format!("batch {bsz} is not a multiple of micro-batch {micro}")));
        }
        let steps = base_steps / ratio;
        let mut run = PretrainRun {
            batching: Batching::Sequences(micro),
            accumulation: bsz / micro,
            budget: Budget::Steps(steps),
            ..base.clone()
        };
        run.opt.peak_lr = row.2;
        run.opt.warmup_steps = (base.opt.warmup_steps / ratio).max(1);
        out.push(AblationPreset { name: format!("bsz{bsz}/steps{steps}"), run, reference: Some(row) });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub name: String,
    pub format: PackingFormat,
    pub masking: MaskingMode,
    pub use_nsp: bool,
    pub steps: u64,
    pub sequences: u64,
    pub final_mlm: f64,
    pub heldout_ppl: f64,
    pub nsp_accuracy: Option<f64>,
}

/// Trains every preset from scratch on its own packing of the documents.
/// With `out_dir`, each preset logs into a subdirectory named after it.
pub fn run_ablation(
    presets: &[AblationPreset],
    train: &[TokenizedDoc],
    heldout: &[TokenizedDoc],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationResult>> {
    let mut packed: HashMap<(PackingFormat, usize, u64), (Vec<TrainingInstance>, Vec<TrainingInstance>)> = HashMap::new();
    let mut results = Vec::new();
    for p in presets {
        let run = &p.run;
        let key = (run.format, run.model.max_len, run.seed);
        if !packed.contains_key(&key) {
            let specials = run.specials();
            let t = pack(run.format, train, specials, run.model.max_len, run.seed)?.instances;
            let h = pack(run.format, heldout, specials, run.model.max_len, run.seed ^ 1)?.instances;
            packed.insert(key, (t, h));
        }
        let (t, h) = &packed[&key];
        let opts = TrainOptions {
            out_dir: out_dir.map(|d| d.join(p.name.replace(['/', '+'], "_"))),
            ..TrainOptions::default()
        };
        let outcome = pretrain(run, t, &[], &opts)?;
        let eval = evaluate_ppl(&outcome.model, h, run.seed)?;
        log::info!("{}: {} sequences, heldout ppl {:.3}", p.name, outcome.sequences, eval.ppl);
        results.push(AblationResult {
            name: p.name.clone(),
            format: run.format,
            masking: run.masking,
            use_nsp: run.use_nsp,
            steps: outcome.plan.steps,
            sequences: outcome.sequences,
            final_mlm: outcome.history.last().map_or(f64::NAN, |r| r.mlm),
            heldout_ppl: eval.ppl,
            nsp_accuracy: eval.nsp_accuracy,
        });
    }
    Ok(results)
}

/// Plain-text table with one row per preset.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| Model | Masking | NSP loss | Steps | Sequences | Final MLM | Held-out ppl | NSP acc |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for r in results {
        let nsp_acc = r.nsp_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.4} | {:.3} | {} |",
            r.format.name().to_uppercase(),
            r.masking.name(),
            if r.use_nsp { "yes" } else { "no" },
            r.steps,
            r.sequences,
            r.final_mlm,
            r.heldout_ppl,
            nsp_acc
        );
    }
    s
}
