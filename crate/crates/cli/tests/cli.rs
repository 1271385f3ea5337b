use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use mlmp::synthetic;
use mlmp::tasks::write_classification_tsv;

fn mlmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlmp")).args(args).env_remove("MLMP_SEED").output().unwrap()
}

fn mlmp_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_mlmp"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "seed = 4
[model]
layers = 1
hidden_size = 16
attention_heads = 2
max_len = 32
vocab_size = 300
[data]
heldout_fraction = 0.1
[pretrain]
batch_size = 8
micro_batch_size = 4
max_steps = 6
warmup_steps = 2
peak_lr = 1e-3
eval_every = 3
checkpoint_every = 3
";

#[test]
fn no_args_prints_usage_and_exits_1() {
    let o = mlmp(&[]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("Usage"), "{}", text(&o.stderr));
}

#[test]
fn unknown_subcommand_exits_1() {
    let o = mlmp(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("Usage"));
    assert_eq!(code(&mlmp(&["--help"])), 0);
}

#[test]
fn equiv_budget_reproduces_batch_size_rows() {
    let o = mlmp(&["equiv-budget", "256", "1000000", "--bsz", "2048"]);
    assert_eq!(code(&o), 0);
    assert!(text(&o.stdout).contains("125000 steps"), "{}", text(&o.stdout));
    let o = mlmp(&["equiv-budget", "256", "1000000", "--bsz", "2048", "--bsz", "8192"]);
    assert!(text(&o.stdout).contains("batch 8192: 31250 steps"));
    let o = mlmp(&["equiv-budget", "256", "1000000", "--bsz", "3000"]);
    assert_eq!(code(&o), 0);
    assert!(text(&o.stderr).contains("warning"));
    assert_eq!(code(&mlmp(&["equiv-budget", "0", "10", "--bsz", "2"])), 1);
}

#[test]
fn missing_corpus_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-corpus");
    let o = mlmp(&["pretrain", "--corpus", p(&missing), "--out", p(&dir.path().join("ck"))]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains(p(&missing)), "{}", text(&o.stderr));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "a.\n\nb.\n").unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[pretrain]\npeak_learning_rate = 1.0\n").unwrap();
    let o = mlmp(&["pretrain", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&dir.path().join("ck"))]);
    assert_eq!(code(&o), 1, "{}", text(&o.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.txt");
    assert_eq!(code(&mlmp(&["corpus", "synth", "--bytes", "30000", "--seed", "1", "--out", p(&corpus)])), 0);
    assert!(d.join("corpus.txt.manifest.json").exists());
    let o = mlmp(&["corpus", "stats", p(&corpus)]);
    assert!(text(&o.stdout).contains("documents"));

    let vocab = d.join("v.bbpe");
    let o = mlmp(&["train-bpe", "--size", "300", "--out", p(&vocab), p(&corpus)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(d.join("v.bbpe.manifest.json").exists());

    let sample = "h\u{e9}llo\n\tw\u{f6}rld \u{1F600}".as_bytes();
    let ids = mlmp_stdin(&["encode", "--vocab", p(&vocab), "--stdin"], sample);
    assert_eq!(code(&ids), 0);
    let back = mlmp_stdin(&["decode", "--vocab", p(&vocab)], &ids.stdout);
    assert_eq!(back.stdout, sample);
    let bad = mlmp_stdin(&["decode", "--vocab", p(&vocab)], b"1 2 999999");
    assert_eq!(code(&bad), 2);

    let inst = d.join("i.bin");
    let o = mlmp(&["pack", "--format", "doc-sentences", "--vocab", p(&vocab), "--max-len", "32", "--seed", "3", "--out", p(&inst), p(&corpus)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let o = mlmp(&["stats", "mask", "--instances", p(&inst), "--vocab", p(&vocab), "--samples", "500"]);
    assert!(text(&o.stdout).contains("special selections 0"), "{}", text(&o.stdout));

    let cfg = d.join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let ck = d.join("ck");
    let o = mlmp(&["--threads", "2", "pretrain", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("heldout ppl"));
    for f in ["manifest.json", "checkpoint.mlmc", "metrics.csv", "eval.csv", "vocab.bbpe", "heldout.bin", "run.json"] {
        assert!(ck.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ck.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["seed"], 4);
    assert!(manifest["finished_at"].is_u64());
    assert_eq!(fs::read_to_string(ck.join("metrics.csv")).unwrap().lines().count(), 7);

    let o = mlmp(&["eval-ppl", "--ckpt", p(&ck.join("checkpoint.mlmc")), "--heldout", p(&ck.join("heldout.bin"))]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("ppl "));

    let train = d.join("train.tsv");
    let dev = d.join("dev.tsv");
    write_classification_tsv(&train, &synthetic::classification(16, 1)).unwrap();
    write_classification_tsv(&dev, &synthetic::classification(8, 2)).unwrap();
    let ft = d.join("ft.toml");
    fs::write(&ft, "[finetune]\nlearning_rate = 1e-3\nbatch_size = 8\nmax_epochs = 1\nmax_len = 32\n").unwrap();
    let out = d.join("ft");
    let o = mlmp(&[
        "finetune", "cls", "--init-from", p(&ck.join("checkpoint.mlmc")), "--vocab", p(&ck.join("vocab.bbpe")),
        "--train", p(&train), "--dev", p(&dev), "--cfg", p(&ft), "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("median accuracy"));
    assert!(out.join("model.mlmc").exists() && out.join("report.json").exists() && out.join("manifest.json").exists());

    // a fine-tuned checkpoint can seed another fine-tuning run
    let o = mlmp(&[
        "finetune", "cls", "--ckpt", p(&out.join("model.mlmc")), "--vocab", p(&ck.join("vocab.bbpe")),
        "--train", p(&train), "--dev", p(&dev), "--cfg", p(&ft),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
}

#[test]
fn identical_manifests_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.txt");
    mlmp(&["corpus", "synth", "--bytes", "20000", "--seed", "2", "--out", p(&corpus)]);
    let vocab = d.join("v.bbpe");
    mlmp(&["train-bpe", "--size", "280", "--out", p(&vocab), p(&corpus)]);
    let run = |name: &str, seed_flag: bool| {
        let out = d.join(name);
        let mut args = vec!["pack", "--format", "segment-pair", "--vocab", p(&vocab), "--max-len", "64", "--out", p(&out)];
        if seed_flag {
            args.extend(["--seed", "9"]);
        }
        args.push(p(&corpus));
        let o = Command::new(env!("CARGO_BIN_EXE_mlmp")).args(&args).env("MLMP_SEED", "9").output().unwrap();
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join(format!("{name}.manifest.json"))).unwrap()).unwrap();
        (m["identity"].clone(), m["outputs"][0][1].clone())
    };
    let a = run("a.bin", true);
    let b = run("b.bin", false);
    assert_eq!(a, b);
    assert_eq!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("b.bin")).unwrap());

    let o = Command::new(env!("CARGO_BIN_EXE_mlmp"))
        .args(["pack", "--format", "segment-pair", "--vocab", p(&vocab), "--out", p(&d.join("c.bin")), p(&corpus)])
        .env("MLMP_SEED", "nine")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.txt");
    mlmp(&["corpus", "synth", "--bytes", "20000", "--seed", "1", "--out", p(&corpus)]);
    let cfg = d.join("run.toml");
    fs::write(&cfg, TINY.replace("peak_lr = 1e-3", "peak_lr = 1e30").replace("vocab_size = 300", "vocab_size = 261")).unwrap();
    let o = mlmp(&["pretrain", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&d.join("ck"))]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("non-finite"));
}
