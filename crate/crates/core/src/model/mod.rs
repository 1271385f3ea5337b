//! Post-norm transformer encoder with tied MLM head and NSP head.

mod checkpoint;
mod encoder;
pub mod ops;
mod pretrain;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{Float, ParamSet, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OPT_PREFIX};
pub(crate) use encoder::pair_mut;
pub use encoder::{EncoderCache, EncoderInput};
pub use pretrain::{ForwardOutput, LossBreakdown, LossNorm, PretrainBatch};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_inner(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.max_len == 0 {
            return bad("layers, hidden, heads and max_len must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab < 2 {
            return bad(format!("vocab {} is too small", self.vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Parameters excluded from weight decay: every bias and LayerNorm gain.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerIdx {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub f1_w: usize,
    pub f1_b: usize,
    pub f2_w: usize,
    pub f2_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub seg: usize,
    pub layers: Vec<LayerIdx>,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub mlm_ln_g: usize,
    pub mlm_ln_b: usize,
    pub mlm_bias: usize,
    pub pool_w: usize,
    pub pool_b: usize,
    pub nsp_w: usize,
    pub nsp_b: usize,
}

/// Names and shapes of every parameter, in storage order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (cfg.hidden, cfg.ffn_inner());
    let mut out = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab, h]),
        ("embeddings.position".to_string(), vec![cfg.max_len, h]),
        ("embeddings.segment".to_string(), vec![2, h]),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        for m in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.{m}.weight")), vec![h, h]));
            out.push((p(&format!("attn.{m}.bias")), vec![h]));
        }
        out.push((p("attn_ln.gain"), vec![h]));
        out.push((p("attn_ln.bias"), vec![h]));
        out.push((p("ffn.in.weight"), vec![h, f]));
        out.push((p("ffn.in.bias"), vec![f]));
        out.push((p("ffn.out.weight"), vec![f, h]));
        out.push((p("ffn.out.bias"), vec![h]));
        out.push((p("ffn_ln.gain"), vec![h]));
        out.push((p("ffn_ln.bias"), vec![h]));
    }
    for (n, s) in [
        ("mlm.dense.weight", vec![h, h]),
        ("mlm.dense.bias", vec![h]),
        ("mlm.ln.gain", vec![h]),
        ("mlm.ln.bias", vec![h]),
        ("mlm.output.bias", vec![cfg.vocab]),
        ("nsp.pooler.weight", vec![h, h]),
        ("nsp.pooler.bias", vec![h]),
        ("nsp.classifier.weight", vec![h, 2]),
        ("nsp.classifier.bias", vec![2]),
    ] {
        out.push((n.to_string(), s));
    }
    out
}

impl Layout {
    fn resolve<F: Float>(cfg: &ModelConfig, params: &ParamSet<F>) -> Result<Self> {
        let idx = |name: &str| -> Result<usize> {
            params
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing")))
        };
        for (name, shape) in parameter_shapes(cfg) {
            let t = &params.tensors()[idx(&name)?];
            if t.shape != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
        }
        let layers = (0..cfg.layers)
            .map(|l| {
                let i = |s: &str| idx(&format!("layer{l}.{s}"));
                Ok(LayerIdx {
                    q_w: i("attn.q.weight")?,
                    q_b: i("attn.q.bias")?,
                    k_w: i("attn.k.weight")?,
                    k_b: i("attn.k.bias")?,
                    v_w: i("attn.v.weight")?,
                    v_b: i("attn.v.bias")?,
                    o_w: i("attn.o.weight")?,
                    o_b: i("attn.o.bias")?,
                    ln1_g: i("attn_ln.gain")?,
                    ln1_b: i("attn_ln.bias")?,
                    f1_w: i("ffn.in.weight")?,
                    f1_b: i("ffn.in.bias")?,
                    f2_w: i("ffn.out.weight")?,
                    f2_b: i("ffn.out.bias")?,
                    ln2_g: i("ffn_ln.gain")?,
                    ln2_b: i("ffn_ln.bias")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Layout {
            tok: idx("embeddings.token")?,
            pos: idx("embeddings.position")?,
            seg: idx("embeddings.segment")?,
            layers,
            mlm_w: idx("mlm.dense.weight")?,
            mlm_b: idx("mlm.dense.bias")?,
            mlm_ln_g: idx("mlm.ln.gain")?,
            mlm_ln_b: idx("mlm.ln.bias")?,
            mlm_bias: idx("mlm.output.bias")?,
            pool_w: idx("nsp.pooler.weight")?,
            pool_b: idx("nsp.pooler.bias")?,
            nsp_w: idx("nsp.classifier.weight")?,
            nsp_b: idx("nsp.classifier.bias")?,
        })
    }
}

/// Draws from N(0, std²) conditioned on |x| ≤ 2 std.
pub fn truncated_normal<R: rand::Rng>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Float> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    layout: Layout,
}

impl<F: Float> Model<F> {
    /// Matrices and embeddings from a truncated normal, gains one, biases zero.
    /// Each tensor has its own stream keyed by (seed, index).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (i, (name, shape)) in parameter_shapes(&config).into_iter().enumerate() {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, F::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let mut rng = rng::keyed_rng(&[seed, tag::INIT, i as u64]);
                let n = shape.iter().product();
                let data = (0..n).map(|_| F::of(truncated_normal(&mut rng, INIT_STD))).collect();
                Tensor { shape, data }
            };
            params.push(name, t)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set. Extra tensors (task heads) are allowed.
    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Model { config, params, layout })
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn p(&self, i: usize) -> &Tensor<F> {
        &self.params.tensors()[i]
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model { config: self.config, params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Copy holding only the encoder parameters, without any task heads.
    pub fn encoder_only(&self) -> Result<Self> {
        let mut params = ParamSet::new();
        for (name, _) in parameter_shapes(&self.config) {
            let t = self.params.get(&name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            params.push(name, t.clone())?;
        }
        Self::from_params(self.config, params)
    }

    /// Adds a tensor (for example a task head) and returns its index.
    pub fn add_param(&mut self, name: &str, t: Tensor<F>) -> Result<usize> {
        self.params.push(name, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig { layers: 2, hidden: 8, heads: 2, max_len: 16, vocab: 32, dropout: 0.1 }
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let a = Model::<f32>::init(tiny(), 1).unwrap();
        let b = Model::<f32>::init(tiny(), 1).unwrap();
        let c = Model::<f32>::init(tiny(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        for (name, t) in a.params.iter() {
            if name.ends_with(".gain") {
                assert!(t.data.iter().all(|&x| x == 1.0));
            }
            if name.ends_with(".bias") {
                assert!(t.data.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(Model::<f32>::init(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_std_matches_truncated_moment() {
        // Var of N(0,1) truncated at ±2: 1 - 2·2·φ(2)/(2Φ(2)-1) = 0.773741...,
        // so std = 0.02 · 0.879626 = 0.0175925.
        let cfg = ModelConfig { vocab: 4096, hidden: 128, ..tiny() };
        let m = Model::<f64>::init(cfg, 3).unwrap();
        let t = m.params.get("embeddings.token").unwrap();
        let n = t.len() as f64;
        let mean = t.data.iter().sum::<f64>() / n;
        let var = t.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std / 0.017_592_5 - 1.0).abs() < 0.05, "{std}");
        assert!(t.data.iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn decay_exclusion_by_name() {
        assert!(decays("layer0.attn.q.weight"));
        assert!(decays("embeddings.token"));
        assert!(!decays("layer0.attn_ln.gain"));
        assert!(!decays("mlm.output.bias"));
    }
}
