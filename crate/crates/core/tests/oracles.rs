mod common;

use mlmp::bpe::{train_bpe, SpecialIds, Vocab};
use mlmp::model::{Model, ModelConfig};
use mlmp::model::{EncoderInput, PretrainBatch};
use mlmp::optim::{adam_step, OptConfig, OptState};
use mlmp::packing::{pack_doc_sentences, pack_full_sentences};
use mlmp::rng::keyed_rng;
use mlmp::tensor::{ParamSet, Tensor};
use rand::Rng;

#[test]
fn bpe_matches_recount_oracle() {
    for seed in 0..20u64 {
        let docs = common::random_docs(&mut keyed_rng(&[seed, 77]), 1024);
        for target in [270, 300, 700] {
            let fast = train_bpe(&docs, target).unwrap();
            assert_eq!(fast.merges(), common::bpe_oracle(&docs, target).as_slice(), "seed {seed} target {target}");
        }
    }
}

#[test]
fn contiguous_packing_matches_greedy_replay() {
    let specials = SpecialIds::for_text_size(100);
    for seed in 0..300u64 {
        let mut rng = keyed_rng(&[seed, 78]);
        let docs = common::random_token_docs(&mut rng, 100);
        let max_len = rng.gen_range(8..64);
        let full: Vec<Vec<u32>> = pack_full_sentences(&docs, specials, max_len).unwrap().instances.into_iter().map(|i| i.tokens).collect();
        assert_eq!(full, common::pack_oracle(&docs, specials, max_len, true), "seed {seed}");
        let doc: Vec<Vec<u32>> = pack_doc_sentences(&docs, specials, max_len).unwrap().instances.into_iter().map(|i| i.tokens).collect();
        assert_eq!(doc, common::pack_oracle(&docs, specials, max_len, false), "seed {seed}");
    }
}

#[test]
fn forward_matches_scalar_reference() {
    let cfg = ModelConfig { layers: 2, hidden: 8, heads: 2, max_len: 16, vocab: 32, dropout: 0.1 };
    for seed in 0..3u64 {
        let mut m = Model::<f64>::init(cfg, seed).unwrap();
        // Non-trivial gains and biases so every parameter matters.
        let mut rng = keyed_rng(&[seed, 79]);
        for t in m.params.tensors_mut() {
            for v in &mut t.data {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let lens = [11usize, 16, 5];
        let seqs: Vec<(Vec<u32>, Vec<u8>)> = lens
            .iter()
            .map(|&n| {
                let ids = (0..n).map(|_| rng.gen_range(0..32)).collect();
                let segs = (0..n).map(|i| u8::from(i >= n / 2)).collect();
                (ids, segs)
            })
            .collect();
        let positions: Vec<Vec<usize>> = lens.iter().map(|&n| vec![0, n / 2, n - 1]).collect();
        let input = EncoderInput::pack(seqs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())), 31).unwrap();
        let t = input.seq_len;
        let mut mask_rows = Vec::new();
        let mut targets = Vec::new();
        for (b, ps) in positions.iter().enumerate() {
            for &p in ps {
                mask_rows.push(b * t + p);
                targets.push(seqs[b].0[p]);
            }
        }
        let batch = PretrainBatch { input, mask_rows, targets, nsp_labels: vec![Some(true); 3] };
        let out = m.forward(&batch, None).unwrap();
        let mut row = 0;
        for (b, (ids, segs)) in seqs.iter().enumerate() {
            let (mlm, nsp) = common::scalar_forward(&m, ids, segs, &positions[b]);
            for logits in mlm {
                for (v, want) in logits.iter().enumerate() {
                    let got = out.mlm_logits[row * 32 + v];
                    assert!((got - want).abs() < 1e-10, "seed {seed} seq {b}: {got} vs {want}");
                }
                row += 1;
            }
            for k in 0..2 {
                assert!((out.nsp_logits[b * 2 + k] - nsp[k]).abs() < 1e-10);
            }
        }
    }
}

fn set(w: &[f64], b: &[f64]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.push("w.weight", Tensor::from_vec(&[w.len()], w.to_vec()).unwrap()).unwrap();
    p.push("w.bias", Tensor::from_vec(&[b.len()], b.to_vec()).unwrap()).unwrap();
    p
}

#[test]
fn adam_three_step_trace() {
    // Reference values from an independent numpy AdamW (decoupled decay,
    // bias-corrected moments, eps outside the square root).
    let cfg = OptConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        weight_decay: 0.01,
        peak_lr: 1e-3,
        warmup_steps: 2,
        total_steps: 10,
        ..OptConfig::default()
    };
    let grads = [
        set(&[0.2, -0.1, 0.05], &[0.01, 0.02]),
        set(&[-0.4, 0.3, 0.0], &[-0.03, 0.5]),
        set(&[1.0, -2.0, 0.5], &[0.25, -0.125]),
    ];
    let expected: [(f64, [f64; 3], [f64; 2]); 3] = [
        (0.0005, [0.4994975024999875, -1.24949375499995, 1.9994900099998], [0.0995000499950005, -0.3004999750012499]),
        (0.001, [0.49985756028701916, -1.2499735614771743, 1.9987967344703943], [0.09999233167548165, -0.3012666252980128]),
        (0.000875, [0.4994470309225541, -1.2494673058094021, 1.9981835956800376], [0.09948449132530074, -0.3016363867721277]),
    ];
    let mut p = set(&[0.5, -1.25, 2.0], &[0.1, -0.3]);
    let mut opt = OptState::new(&p);
    for (g, (lr, w, b)) in grads.iter().zip(expected) {
        let got_lr = adam_step(&mut p, &mut opt, g, &cfg).unwrap();
        assert!((got_lr - lr).abs() < 1e-18);
        for (got, want) in p.tensors()[0].data.iter().zip(w).chain(p.tensors()[1].data.iter().zip(b)) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }
    let m = &opt.m.tensors()[0].data;
    let v = &opt.v.tensors()[0].data;
    for (got, want) in m.iter().zip([0.08019999999999998, -0.18109999999999996, 0.05404999999999999]) {
        assert!((got - want).abs() < 1e-15);
    }
    for (got, want) in v.iter().zip([0.02390432000000002, 0.08195608000000007, 0.005048020000000005]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert_eq!(opt.step, 3);
}

#[test]
fn uniform_model_scores_vocab_size() {
    let vocab = Vocab::bytes_only();
    let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, max_len: 16, vocab: vocab.size(), dropout: 0.0 };
    let mut m = Model::<f32>::init(cfg, 0).unwrap();
    m.params.get_mut("embeddings.token").unwrap().data.fill(0.0);
    let specials = vocab.specials();
    let heldout: Vec<_> = (0..6)
        .map(|i| {
            let mut tokens = vec![specials.cls];
            tokens.extend((0..12).map(|j| (i * 13 + j * 7) as u32 % 256));
            tokens.push(specials.eos);
            mlmp::packing::TrainingInstance { segment_ids: vec![0; tokens.len()], tokens, nsp_label: None, provenance: vec![] }
        })
        .collect();
    let r = mlmp::trainer::evaluate_ppl(&m, &heldout, 5).unwrap();
    assert!((r.ppl - vocab.size() as f64).abs() < 1e-9, "{}", r.ppl);
}
