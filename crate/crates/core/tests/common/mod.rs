//! Slow, obviously-correct reference implementations shared by the oracle
//! and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;

use mlmp::bpe::{split_words, SpecialIds};
use mlmp::corpus::Document;
use mlmp::model::Model;
use mlmp::packing::TokenizedDoc;
use rand::Rng;

/// BPE by full recount: every round recounts all adjacent pairs of the
/// current segmentation and merges the best one everywhere.
pub fn bpe_oracle(docs: &[Document], target_size: usize) -> Vec<(u32, u32)> {
    let mut freq: HashMap<Vec<u8>, u64> = HashMap::new();
    for d in docs {
        for s in &d.sentences {
            for w in split_words(s) {
                *freq.entry(w.to_vec()).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<Vec<u8>>, u64)> =
        freq.into_iter().map(|(w, f)| (w.iter().map(|&b| vec![b]).collect(), f)).collect();
    let mut ids: HashMap<Vec<u8>, u32> = (0..=255u8).map(|b| (vec![b], b as u32)).collect();
    let mut merges = Vec::new();
    while 256 + 5 + merges.len() < target_size {
        let mut counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
        for (w, f) in &words {
            for i in 1..w.len() {
                *counts.entry((w[i - 1].clone(), w[i].clone())).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .filter(|((l, r), c)| *c >= 2 && !ids.contains_key(&[l.as_slice(), r.as_slice()].concat()))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), _)) = best else { break };
        let joined = [l.as_slice(), r.as_slice()].concat();
        merges.push((ids[&l], ids[&r]));
        ids.insert(joined.clone(), 255 + merges.len() as u32);
        for (w, _) in &mut words {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
    }
    merges
}

/// Greedy sentence packing replayed token by token. An instance body holds
/// at most `max_len - 2` tokens. A sentence that does not fit either closes
/// the instance (when the body is within 8 tokens of full) or is cut at the
/// remaining room. With `cross`, a SEP marks each document change.
pub fn pack_oracle(docs: &[TokenizedDoc], specials: SpecialIds, max_len: usize, cross: bool) -> Vec<Vec<u32>> {
    let cap = max_len - 2;
    let mut out = Vec::new();
    let mut body: Vec<u32> = Vec::new();
    let mut owner: Option<usize> = None;
    let close = |body: &mut Vec<u32>, owner: &mut Option<usize>, out: &mut Vec<Vec<u32>>| {
        if !body.is_empty() {
            let mut t = vec![specials.cls];
            t.append(body);
            t.push(specials.eos);
            out.push(t);
        }
        *owner = None;
    };
    for d in docs.iter().filter(|d| d.sentences.iter().any(|s| !s.is_empty())) {
        if !cross {
            close(&mut body, &mut owner, &mut out);
        }
        for s in &d.sentences {
            let mut k = 0;
            while k < s.len() {
                let sep = usize::from(owner.is_some_and(|o| o != d.id));
                let room = cap - body.len();
                if sep == 1 && room < 2 {
                    close(&mut body, &mut owner, &mut out);
                    continue;
                }
                let left = s.len() - k;
                if left + sep > room && !body.is_empty() && body.len() + 10 >= max_len {
                    close(&mut body, &mut owner, &mut out);
                    continue;
                }
                if sep == 1 {
                    body.push(specials.sep);
                }
                let take = left.min(room - sep);
                body.extend_from_slice(&s[k..k + take]);
                owner = Some(d.id);
                k += take;
                if k < s.len() {
                    close(&mut body, &mut owner, &mut out);
                }
            }
        }
    }
    close(&mut body, &mut owner, &mut out);
    out
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * r * g[i] + b[i]).collect()
}

/// `x W + b` for one row, `W` stored `[in, out]`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>()).collect()
}

/// Reference forward of one unpadded sequence: MLM logits at `positions`
/// and the two NSP logits.
pub fn scalar_forward(m: &Model<f64>, ids: &[u32], segs: &[u8], positions: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let c = m.config;
    let (h, a) = (c.hidden, c.heads);
    let d = h / a;
    let p = |name: &str| m.params.get(name).unwrap_or_else(|| panic!("{name}")).data.as_slice();
    let n = ids.len();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            (0..h)
                .map(|j| {
                    p("embeddings.token")[ids[t] as usize * h + j]
                        + p("embeddings.position")[t * h + j]
                        + p("embeddings.segment")[segs[t] as usize * h + j]
                })
                .collect()
        })
        .collect();
    for l in 0..c.layers {
        let w = |s: &str| format!("layer{l}.{s}");
        let proj = |x: &Vec<Vec<f64>>, k: &str| -> Vec<Vec<f64>> {
            x.iter().map(|r| affine(r, p(&w(&format!("attn.{k}.weight"))), p(&w(&format!("attn.{k}.bias"))))).collect()
        };
        let (q, k, v) = (proj(&x, "q"), proj(&x, "k"), proj(&x, "v"));
        let mut ctx = vec![vec![0.0; h]; n];
        for head in 0..a {
            let span = head * d..(head + 1) * d;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| span.clone().map(|e| q[i][e] * k[j][e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..n {
                    let pr = (scores[j] - mx).exp() / z;
                    for e in span.clone() {
                        ctx[i][e] += pr * v[j][e];
                    }
                }
            }
        }
        for i in 0..n {
            let o = affine(&ctx[i], p(&w("attn.o.weight")), p(&w("attn.o.bias")));
            let z1: Vec<f64> = o.iter().zip(&x[i]).map(|(a, b)| a + b).collect();
            let y1 = layer_norm(&z1, p(&w("attn_ln.gain")), p(&w("attn_ln.bias")));
            let f: Vec<f64> = affine(&y1, p(&w("ffn.in.weight")), p(&w("ffn.in.bias"))).into_iter().map(gelu).collect();
            let o2 = affine(&f, p(&w("ffn.out.weight")), p(&w("ffn.out.bias")));
            let z2: Vec<f64> = o2.iter().zip(&y1).map(|(a, b)| a + b).collect();
            x[i] = layer_norm(&z2, p(&w("ffn_ln.gain")), p(&w("ffn_ln.bias")));
        }
    }
    let tok = p("embeddings.token");
    let mlm = positions
        .iter()
        .map(|&t| {
            let dense: Vec<f64> =
                affine(&x[t], p("mlm.dense.weight"), p("mlm.dense.bias")).into_iter().map(gelu).collect();
            let nrm = layer_norm(&dense, p("mlm.ln.gain"), p("mlm.ln.bias"));
            (0..c.vocab)
                .map(|vid| p("mlm.output.bias")[vid] + (0..h).map(|j| nrm[j] * tok[vid * h + j]).sum::<f64>())
                .collect()
        })
        .collect();
    let pooled: Vec<f64> =
        affine(&x[0], p("nsp.pooler.weight"), p("nsp.pooler.bias")).into_iter().map(f64::tanh).collect();
    let nsp = affine(&pooled, p("nsp.classifier.weight"), p("nsp.classifier.bias"));
    (mlm, nsp)
}

/// Documents of short random sentences over a small alphabet, so pairs repeat.
pub fn random_docs<R: Rng>(rng: &mut R, max_bytes: usize) -> Vec<Document> {
    const ALPHABET: &[u8] = b"aaabbcde  \t.";
    let mut docs = Vec::new();
    let mut used = 0;
    while used < max_bytes {
        let mut sentences = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            let len = rng.gen_range(1..40).min(max_bytes - used);
            if len == 0 {
                break;
            }
            used += len;
            sentences.push((0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect());
        }
        if sentences.is_empty() {
            break;
        }
        docs.push(Document { id: docs.len(), sentences });
    }
    docs
}

/// Token documents with random sentence lengths (some longer than an instance).
pub fn random_token_docs<R: Rng>(rng: &mut R, text_size: u32) -> Vec<TokenizedDoc> {
    (0..rng.gen_range(1..8))
        .map(|id| TokenizedDoc {
            id,
            sentences: (0..rng.gen_range(1..6))
                .map(|_| {
                    let len = if rng.gen_bool(0.1) { rng.gen_range(30..90) } else { rng.gen_range(1..15) };
                    (0..len).map(|_| rng.gen_range(0..text_size)).collect()
                })
                .collect(),
        })
        .collect()
}
