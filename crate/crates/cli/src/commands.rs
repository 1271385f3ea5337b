use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use mlmp::bpe::{self, load_vocab, save_vocab, SpecialIds, Vocab};
use mlmp::corpus::{self, load_corpus, render_documents, resolve_inputs, split_heldout};
use mlmp::masking::{mask_for_epoch, MaskTally};
use mlmp::model::{save_checkpoint, Checkpoint};
use mlmp::optim::equivalent_budgets;
use mlmp::packing::{pack as pack_docs, read_instances, tokenize_documents, write_instances, InstanceFileHeader};
use mlmp::tasks::metrics::span_metrics;
use mlmp::tasks::{self, FinetuneConfig, SweepReport};
use mlmp::trainer::{self, TrainOptions, CHECKPOINT_FILE, EVAL_FILE, METRICS_FILE, TIMING_FILE};
use mlmp::{synthetic, Error};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{load_finetune, PretrainConfig};
use crate::manifest::{manifest_path, RunManifest};
use crate::{
    resolve_seed, CorpusCmd, DecodeArgs, EncodeArgs, EquivBudgetArgs, EvalPplArgs, Failure, FinetuneArgs, PackArgs,
    PretrainArgs, StatsCmd, TaskArg, TrainBpeArgs,
};

type Res = Result<(), Failure>;

pub const VOCAB_FILE: &str = "vocab.bbpe";
pub const HELDOUT_FILE: &str = "heldout.bin";
pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.mlmc";
pub const REPORT_FILE: &str = "report.json";

fn write_file(path: &Path, bytes: &[u8]) -> mlmp::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> mlmp::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn text_hash(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn seeds(seed: u64) -> Vec<(String, u64)> {
    vec![("seed".to_string(), seed)]
}

/// Resolves corpus arguments, refusing an empty expansion.
fn corpus_files(paths: &[PathBuf]) -> mlmp::Result<Vec<PathBuf>> {
    let files = resolve_inputs(paths)?;
    if files.is_empty() {
        let shown: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Data(format!("no corpus files under {}", shown.join(", "))));
    }
    Ok(files)
}

fn read_input(file: Option<&Path>) -> mlmp::Result<Vec<u8>> {
    match file {
        Some(p) => fs::read(p).map_err(|e| Error::io(p, e)),
        None => {
            let mut buf = Vec::new();
            io::stdin().read_to_end(&mut buf).map_err(|e| Error::io("<stdin>", e))?;
            Ok(buf)
        }
    }
}

pub fn corpus(c: CorpusCmd) -> Res {
    match c {
        CorpusCmd::Stats { paths } => {
            let docs = load_corpus(&corpus_files(&paths)?)?;
            let s = corpus::stats(&docs);
            println!("documents {}\nsentences {}\nbytes {}", s.documents, s.sentences, s.bytes);
        }
        CorpusCmd::Synth { bytes, seed, out } => {
            let seed = resolve_seed(seed, None)?;
            let m = RunManifest::begin(manifest_path(&out, false), Some(text_hash(&format!("bytes={bytes}"))), &seeds(seed), &[])?;
            let docs = synthetic::corpus(bytes, seed);
            write_file(&out, &render_documents(&docs))?;
            println!("{} documents, {} bytes", docs.len(), docs.iter().map(|d| d.byte_len()).sum::<usize>());
            m.finish(&[out])?;
        }
        CorpusCmd::Split { heldout, seed, train_out, heldout_out, paths } => {
            let seed = resolve_seed(seed, None)?;
            let files = corpus_files(&paths)?;
            let m = RunManifest::begin(
                manifest_path(&train_out, false),
                Some(text_hash(&format!("heldout={heldout}"))),
                &seeds(seed),
                &files,
            )?;
            let split = split_heldout(load_corpus(&files)?, heldout, seed)?;
            write_file(&train_out, &render_documents(&split.train))?;
            write_file(&heldout_out, &render_documents(&split.heldout))?;
            println!("train {} documents, heldout {} documents", split.train.len(), split.heldout.len());
            m.finish(&[train_out, heldout_out])?;
        }
    }
    Ok(())
}

pub fn train_bpe(a: TrainBpeArgs) -> Res {
    let files = corpus_files(&a.paths)?;
    let m = RunManifest::begin(manifest_path(&a.out, false), Some(text_hash(&format!("size={}", a.size))), &[], &files)?;
    let docs = load_corpus(&files)?;
    let vocab = bpe::train_bpe(&docs, a.size)?;
    save_vocab(&vocab, &a.out)?;
    println!("vocab size {} ({} merges)", vocab.size(), vocab.merges().len());
    if vocab.size() < a.size {
        log::warn!("corpus ran out of pairs before reaching {} entries", a.size);
    }
    m.finish(&[a.out])?;
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Res {
    let vocab = load_vocab(&a.vocab)?;
    let text = read_input(a.file.as_deref())?;
    let ids: Vec<String> = vocab.encode(&text).iter().map(u32::to_string).collect();
    println!("{}", ids.join(" "));
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Res {
    let vocab = load_vocab(&a.vocab)?;
    let text = read_input(a.file.as_deref())?;
    let text = String::from_utf8(text).map_err(|_| Error::Data("token ids must be ASCII digits".into()))?;
    let ids = text
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| Error::Data(format!("bad token id {t:?}"))))
        .collect::<mlmp::Result<Vec<_>>>()?;
    let bytes = vocab.decode(&ids)?;
    let mut out = io::stdout().lock();
    out.write_all(&bytes).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

pub fn pack(a: PackArgs) -> Res {
    let seed = resolve_seed(a.seed, None)?;
    let files = corpus_files(&a.paths)?;
    let mut inputs = files.clone();
    inputs.push(a.vocab.clone());
    let cfg = format!("format={} max_len={}", a.format.name(), a.max_len);
    let m = RunManifest::begin(manifest_path(&a.out, false), Some(text_hash(&cfg)), &seeds(seed), &inputs)?;
    let vocab = load_vocab(&a.vocab)?;
    let docs = load_corpus(&files)?;
    let packed = pack_docs(a.format, &tokenize_documents(&docs, &vocab), vocab.specials(), a.max_len, seed)?;
    let header = InstanceFileHeader { max_len: a.max_len as u32, format: a.format };
    write_instances(&a.out, header, &packed.instances)?;
    let s = packed.stats;
    println!("instances {}", packed.instances.len());
    println!("tokens {}", packed.instances.iter().map(|i| i.len()).sum::<usize>());
    println!("skipped documents {}, skipped segments {}", s.skipped_documents, s.skipped_segments);
    println!("truncated instances {} ({} tokens)", s.truncated, s.truncated_tokens);
    println!("split sentences {}, forced positives {}", s.split_sentences, s.no_negative_source);
    m.finish(&[a.out])?;
    Ok(())
}

pub fn stats(c: StatsCmd) -> Res {
    match c {
        StatsCmd::Mask { instances, vocab, samples, mode, seed } => {
            let seed = resolve_seed(seed, None)?;
            let (_, insts) = read_instances(&instances)?;
            if insts.is_empty() {
                return Err(Error::Data(format!("{} holds no instances", instances.display())).into());
            }
            let specials = load_vocab(&vocab)?.specials();
            let mut tally = MaskTally::default();
            for i in 0..samples {
                let (id, epoch) = (i % insts.len(), (i / insts.len()) as u64);
                let ex = mask_for_epoch(mode, &insts[id], id as u64, epoch, seed, specials)?;
                tally.add(&insts[id].tokens, &ex, specials);
            }
            let (mask, keep, random) = tally.shares();
            println!("maskable positions {}", tally.maskable);
            println!("selected {} ({:.4})", tally.selected, tally.selected_fraction());
            println!("mask {mask:.4} keep {keep:.4} random {random:.4}");
            println!("special selections {}", tally.special_selected);
        }
        StatsCmd::Instances { path } => {
            let (header, insts) = read_instances(&path)?;
            let lens: Vec<usize> = insts.iter().map(|i| i.len()).collect();
            let total: usize = lens.iter().sum();
            println!("format {} max_len {}", header.format.name(), header.max_len);
            println!("instances {} tokens {}", insts.len(), total);
            if !insts.is_empty() {
                println!(
                    "length mean {:.1} max {}",
                    total as f64 / insts.len() as f64,
                    lens.iter().max().copied().unwrap_or(0)
                );
            }
            let labelled: Vec<bool> = insts.iter().filter_map(|i| i.nsp_label).collect();
            if !labelled.is_empty() {
                let pos = labelled.iter().filter(|&&l| l).count();
                println!("nsp labelled {} positive {:.4}", labelled.len(), pos as f64 / labelled.len() as f64);
            }
        }
    }
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Res {
    let cfg = match &a.config {
        Some(p) => PretrainConfig::load(p)?,
        None => PretrainConfig::default(),
    };
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let files = corpus_files(&a.corpus)?;
    create_dir(&a.out)?;
    let mut inputs = files.clone();
    inputs.extend(a.vocab.iter().cloned());
    let m = RunManifest::begin(manifest_path(&a.out, true), Some(cfg.hash()), &seeds(seed), &inputs)?;

    let split = split_heldout(load_corpus(&files)?, cfg.data.heldout_fraction, seed)?;
    let vocab_out = a.out.join(VOCAB_FILE);
    let vocab = match &a.vocab {
        Some(p) => load_vocab(p)?,
        None if a.resume && vocab_out.exists() => load_vocab(&vocab_out)?,
        None => {
            log::info!("training a {}-entry vocabulary", cfg.model.vocab_size);
            let v = bpe::train_bpe(&split.train, cfg.model.vocab_size)?;
            save_vocab(&v, &vocab_out)?;
            v
        }
    };
    let run = cfg.to_run(vocab.size(), seed)?;
    let run_json = serde_json::to_string_pretty(&run).expect("run serializes");
    write_file(&a.out.join(RUN_FILE), run_json.as_bytes())?;

    let specials = vocab.specials();
    let max_len = run.model.max_len;
    let train = pack_docs(run.format, &tokenize_documents(&split.train, &vocab), specials, max_len, seed)?;
    let heldout = pack_docs(run.format, &tokenize_documents(&split.heldout, &vocab), specials, max_len, seed ^ 1)?;
    let heldout_path = a.out.join(HELDOUT_FILE);
    write_instances(&heldout_path, InstanceFileHeader { max_len: max_len as u32, format: run.format }, &heldout.instances)?;
    log::info!("{} train and {} held-out instances", train.instances.len(), heldout.instances.len());
    if heldout.instances.is_empty() {
        log::warn!("held-out split is empty; no perplexity will be reported");
    }

    let opts = TrainOptions { out_dir: Some(a.out.clone()), resume: a.resume, stop_after: a.stop_after };
    let outcome = trainer::pretrain(&run, &train.instances, &heldout.instances, &opts)?;
    println!("steps {} of {}, sequences {}", outcome.history.last().map_or(0, |r| r.step), outcome.plan.steps, outcome.sequences);
    if let Some(r) = outcome.history.last() {
        println!("final loss {:.4} (mlm {:.4})", r.loss, r.mlm);
    }
    if let Some(e) = outcome.evals.last() {
        println!("heldout ppl {:.4} over {} masked tokens", e.ppl, e.masked);
        let base = trainer::unigram_baseline(&train.instances, &heldout.instances, seed, specials)?;
        println!("unigram baseline ppl {base:.4}");
    }

    let mut outputs: Vec<PathBuf> = [CHECKPOINT_FILE, METRICS_FILE, EVAL_FILE, TIMING_FILE, RUN_FILE, HELDOUT_FILE]
        .iter()
        .map(|f| a.out.join(f))
        .filter(|p| p.exists())
        .collect();
    if vocab_out.exists() {
        outputs.push(vocab_out);
    }
    m.finish(&outputs)?;
    Ok(())
}

pub fn eval_ppl(a: EvalPplArgs) -> Res {
    let seed = resolve_seed(a.seed, None)?;
    let model = trainer::load_model(&a.ckpt)?;
    let (_, heldout) = read_instances(&a.heldout)?;
    let r = trainer::evaluate_ppl(&model, &heldout, seed)?;
    println!("ppl {:.4}", r.ppl);
    println!("nll {:.6} over {} masked tokens", r.nll, r.masked);
    if let Some(acc) = r.nsp_accuracy {
        println!("nsp accuracy {acc:.4}");
    }
    if let Some(t) = &a.train {
        let (_, train) = read_instances(t)?;
        let specials = SpecialIds::for_vocab_size(model.config.vocab);
        println!("unigram baseline ppl {:.4}", trainer::unigram_baseline(&train, &heldout, seed, specials)?);
    }
    Ok(())
}

fn span_dev_scores(report: &SweepReport, vocab: &Vocab, dev: &[tasks::SpanExample]) -> mlmp::Result<(f64, f64)> {
    let preds = tasks::predict_span(&report.model, vocab, dev)?;
    let gold: Vec<Option<String>> = dev.iter().map(|e| e.answer.as_ref().map(|x| x.text.clone())).collect();
    span_metrics(&preds, &gold)
}

pub fn finetune(a: FinetuneArgs) -> Res {
    if a.answerability && a.task != TaskArg::Span {
        return Err(Failure::Usage("--answerability applies to span tasks only".into()));
    }
    let (preset, name) = match a.task {
        TaskArg::Cls => (FinetuneConfig::classification(), "cls"),
        TaskArg::Span => (FinetuneConfig::span(), "span"),
        TaskArg::Choice => (FinetuneConfig::choice(), "choice"),
    };
    let cfg = match &a.cfg {
        Some(p) => load_finetune(p, preset)?,
        None => preset,
    };
    cfg.validate()?;
    let manifest = match &a.out {
        Some(out) => {
            create_dir(out)?;
            let hash = text_hash(&serde_json::to_string(&(name, a.answerability, &cfg)).expect("serializes"));
            let seeds: Vec<(String, u64)> = cfg.seeds.iter().enumerate().map(|(i, &s)| (format!("seed{i}"), s)).collect();
            let inputs = [a.ckpt.clone(), a.vocab.clone(), a.train.clone(), a.dev.clone()];
            Some(RunManifest::begin(manifest_path(out, true), Some(hash), &seeds, &inputs)?)
        }
        None => None,
    };
    let base = trainer::load_model(&a.ckpt)?.encoder_only()?;
    let vocab = load_vocab(&a.vocab)?;
    let (report, extra) = match a.task {
        TaskArg::Cls => {
            let (tr, dv) = (tasks::read_classification_tsv(&a.train)?, tasks::read_classification_tsv(&a.dev)?);
            (tasks::finetune_classifier(&base, &vocab, &tr, &dv, &cfg)?, None)
        }
        TaskArg::Span => {
            let (tr, dv) = (tasks::read_span_jsonl(&a.train)?, tasks::read_span_jsonl(&a.dev)?);
            let r = tasks::finetune_span(&base, &vocab, &tr, &dv, &cfg, a.answerability)?;
            let scores = span_dev_scores(&r, &vocab, &dv)?;
            (r, Some(scores))
        }
        TaskArg::Choice => {
            let (tr, dv) = (tasks::read_choice_jsonl(&a.train)?, tasks::read_choice_jsonl(&a.dev)?);
            (tasks::finetune_choice(&base, &vocab, &tr, &dv, &cfg)?, None)
        }
    };

    println!("lr\tbatch\tmedian {}\tper seed", report.metric);
    for r in &report.runs {
        let per: Vec<String> = r.fits.iter().map(|f| format!("{:.4}", f.best_dev)).collect();
        println!("{:e}\t{}\t{:.4}\t{}", r.lr, r.batch_size, r.median(), per.join(" "));
    }
    let best = report.best_run();
    println!("best grid point lr {:e} batch {} median {} {:.4}", best.lr, best.batch_size, report.metric, best.median());
    println!("best single run {} {:.4}", report.metric, report.best_dev);
    if let Some((em, f1)) = extra {
        println!("best model dev em {em:.4} f1 {f1:.4}");
    }
    if report.dropped > 0 {
        println!("dropped {} training examples", report.dropped);
    }

    if let (Some(out), Some(m)) = (&a.out, manifest) {
        let model_path = out.join(MODEL_FILE);
        let mut ckpt = Checkpoint::new(report.model.model.config, report.model.model.params.clone());
        if let tasks::HeadKind::Classification { num_labels } = report.model.kind {
            ckpt.meta.insert("num_labels".into(), num_labels as u64);
        }
        save_checkpoint(&ckpt, &model_path)?;
        let runs: Vec<_> = report
            .runs
            .iter()
            .map(|r| json!({"lr": r.lr, "batch_size": r.batch_size, "median": r.median(),
                "fits": r.fits.iter().map(|f| json!({"seed": f.seed, "dev_trace": f.dev_trace, "best_dev": f.best_dev, "best_epoch": f.best_epoch})).collect::<Vec<_>>()}))
            .collect();
        let doc = json!({
            "task": name,
            "metric": report.metric,
            "best_dev": report.best_dev,
            "best_run": {"lr": best.lr, "batch_size": best.batch_size, "median": best.median()},
            "span_em_f1": extra,
            "dropped": report.dropped,
            "config": cfg,
            "runs": runs,
        });
        let report_path = out.join(REPORT_FILE);
        write_file(&report_path, (serde_json::to_string_pretty(&doc).expect("serializes") + "\n").as_bytes())?;
        m.finish(&[model_path, report_path])?;
    }
    Ok(())
}

pub fn equiv_budget(a: EquivBudgetArgs) -> Res {
    let reference = a.batch_size.saturating_mul(a.steps);
    for r in equivalent_budgets(a.batch_size, a.steps, &a.targets)? {
        println!("batch {}: {} steps ({} sequences)", r.batch_size, r.steps, r.sequences);
        if let Some(w) = r.warning(reference) {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}
