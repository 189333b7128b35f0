//! Ordered parameter registry: the single source of truth for parameter
//! names, shapes, initialization, and checkpoint layout.

use super::{ModelConfig, ModelError, Result};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Parameters in a fixed registry order (iteration, checkpoints, and the
/// optimizer all follow this order; the map is lookup-only).
#[derive(Debug, Clone)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

fn registry_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (f, h) = (cfg.frame_dim, cfg.hidden_dim);
    let ffn = 2 * h;
    let mut out = vec![
        ("encoder.input_proj.weight".to_string(), vec![f, h]),
        ("encoder.input_proj.bias".to_string(), vec![h]),
    ];
    for layer in 0..cfg.encoder_layers {
        let p = |name: &str| format!("encoder.layer{}.{}", layer, name);
        out.extend([
            (p("attn.q.weight"), vec![h, h]),
            (p("attn.q.bias"), vec![h]),
            // No key bias: scores are invariant to a constant shift across
            // keys, so it would be a dead parameter.
            (p("attn.k.weight"), vec![h, h]),
            (p("attn.v.weight"), vec![h, h]),
            (p("attn.v.bias"), vec![h]),
            (p("attn.out.weight"), vec![h, h]),
            (p("attn.out.bias"), vec![h]),
            (p("ln1.gain"), vec![h]),
            (p("ln1.bias"), vec![h]),
            (p("ffn.in.weight"), vec![h, ffn]),
            (p("ffn.in.bias"), vec![ffn]),
            (p("ffn.out.weight"), vec![ffn, h]),
            (p("ffn.out.bias"), vec![h]),
            (p("ln2.gain"), vec![h]),
            (p("ln2.bias"), vec![h]),
        ]);
    }
    if cfg.uses_context() {
        out.extend([
            ("context.score.v".to_string(), vec![h]),
            ("context.proj.weight".to_string(), vec![h, cfg.context_dim]),
            ("context.proj.bias".to_string(), vec![cfg.context_dim]),
        ]);
    }
    out.push(("head.weight".to_string(), vec![cfg.head_in(), cfg.head_out()]));
    out.push(("head.bias".to_string(), vec![cfg.head_out()]));
    out
}

impl Params {
    fn from_entries(entries: Vec<(String, Tensor)>) -> Params {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Params { entries, index }
    }

    /// Zero-valued registry with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Params> {
        cfg.validate()?;
        let entries = registry_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        Ok(Params::from_entries(entries))
    }

    /// Seeded initialization: weights ~ N(0, 1/√fan_in) drawn in registry
    /// order from one ChaCha8 generator, biases zero, layer-norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Params> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = registry_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else if name.ends_with(".gain") {
                    Tensor::new(shape.clone(), vec![1.0; shape.iter().product()]).expect("positive dims")
                } else {
                    let fan_in = shape[0];
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite stddev");
                    let numel = shape.iter().product();
                    let data: Vec<f64> = (0..numel).map(|_| dist.sample(&mut rng)).collect();
                    Tensor::new(shape, data).expect("positive dims")
                };
                (name, tensor)
            })
            .collect();
        Ok(Params::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    /// Snapshot of all tensors in registry order (for gradient checking).
    pub fn tensor_vec(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace every tensor, in registry order, shape-checked.
    pub fn set_all(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(ModelError::InvalidConfig {
                detail: format!("expected {} parameter tensors, got {}", self.entries.len(), tensors.len()),
            });
        }
        for ((name, slot), t) in self.entries.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(ModelError::InvalidConfig {
                    detail: format!("shape mismatch for {}: {:?} vs {:?}", name, slot.shape(), t.shape()),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Exact scalar-parameter count plus the overhead relative to the same
/// config in baseline mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub delta_vs_baseline: usize,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    let total = Params::zeros(cfg)?.total_scalars();
    let baseline = Params::zeros(&cfg.as_baseline())?.total_scalars();
    Ok(ParamCount { total, delta_vs_baseline: total - baseline })
}

/// Closed form for the context machinery's parameter overhead: the scoring
/// vector (H), the embedding projection (H·D + D), and the head widening
/// (D rows × output width). Zero in baseline mode.
pub fn analytic_context_overhead(cfg: &ModelConfig) -> usize {
    if !cfg.uses_context() {
        return 0;
    }
    let (h, d) = (cfg.hidden_dim, cfg.context_dim);
    h + (h * d + d) + d * cfg.head_out()
}
