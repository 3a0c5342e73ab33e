//! Model configuration and the named-parameter state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { layers: 4, model_dim: 128, heads: 4, ffn_dim: 512, context_len: 64, vocab_size: 512 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_dim < self.model_dim {
            return Err(Error::InvalidArg(format!(
                "ffn_dim {} smaller than model_dim {}",
                self.ffn_dim, self.model_dim
            )));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.context_len == 0 {
            return Err(Error::InvalidArg("layers, vocab_size and context_len must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Exact set of parameter names this config implies, with shapes in the
    /// `(d_out, d_in)` convention.
    pub fn param_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let mut m = BTreeMap::new();
        m.insert("embedding".to_string(), (self.vocab_size, self.model_dim));
        for l in 0..self.layers {
            for proj in ["q", "k", "v", "o"] {
                m.insert(format!("layers.{l}.attn.{proj}"), (self.model_dim, self.model_dim));
            }
            m.insert(format!("layers.{l}.mlp.up"), (self.ffn_dim, self.model_dim));
            m.insert(format!("layers.{l}.mlp.down"), (self.model_dim, self.ffn_dim));
        }
        m.insert("final_norm".to_string(), (1, self.model_dim));
        m.insert("unembedding".to_string(), (self.vocab_size, self.model_dim));
        m
    }

    /// Names of the transformer linear modules (the prune/quantize scope;
    /// embeddings and norms are excluded).
    pub fn linear_module_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers {
            for proj in ["q", "k", "v", "o"] {
                names.push(format!("layers.{l}.attn.{proj}"));
            }
            names.push(format!("layers.{l}.mlp.up"));
            names.push(format!("layers.{l}.mlp.down"));
        }
        names
    }
}

/// All named parameter matrices plus architecture metadata and the seed
/// lineage of every stage that produced this state.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: LmConfig,
    params: BTreeMap<String, Matrix>,
    seed_lineage: Vec<(String, u64)>,
}

impl ModelState {
    /// Random initialization: N(0, 0.02) weights, ones for the final norm.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = BTreeMap::new();
        for (name, (rows, cols)) in config.param_shapes() {
            let m = if name == "final_norm" {
                Matrix::from_vec_unchecked(rows, cols, vec![1.0; rows * cols])
            } else {
                Matrix::from_fn(rows, cols, |_, _| (rng.normal_f32() as f64 * INIT_STD) as f32)
            };
            params.insert(name, m);
        }
        Ok(Self { config, params, seed_lineage: vec![("init".to_string(), seed)] })
    }

    pub(crate) fn from_parts(
        config: LmConfig,
        params: BTreeMap<String, Matrix>,
        seed_lineage: Vec<(String, u64)>,
    ) -> Result<Self> {
        let expected = config.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::CheckpointFormat(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, (rows, cols)) in &expected {
            match params.get(name) {
                Some(m) if m.shape() == (*rows, *cols) => {}
                Some(m) => {
                    return Err(Error::CheckpointFormat(format!(
                        "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                        m.shape()
                    )))
                }
                None => return Err(Error::CheckpointFormat(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { config, params, seed_lineage })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Matrix> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Matrix> {
        self.params.get(name).ok_or_else(|| Error::UnknownModule(name.to_string()))
    }

    /// Returns a new state with one parameter replaced (shape-checked).
    pub fn with_param(&self, name: &str, value: Matrix) -> Result<Self> {
        let old = self.param(name)?;
        if old.shape() != value.shape() {
            return Err(Error::DimMismatch {
                op: "with_param",
                left_rows: old.rows(),
                left_cols: old.cols(),
                right_rows: value.rows(),
                right_cols: value.cols(),
            });
        }
        let mut params = self.params.clone();
        params.insert(name.to_string(), value);
        Ok(Self { config: self.config.clone(), params, seed_lineage: self.seed_lineage.clone() })
    }

    pub fn seed_lineage(&self) -> &[(String, u64)] {
        &self.seed_lineage
    }

    pub fn push_lineage(&mut self, stage: &str, seed: u64) {
        self.seed_lineage.push((stage.to_string(), seed));
    }

    /// True when every tensor of both states is bit-identical.
    pub fn bits_eq(&self, other: &ModelState) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((an, am), (bn, bm))| an == bn && am.bits_eq(bm))
    }

    /// Names of parameters that differ bit-wise between two states.
    pub fn diff_names(&self, other: &ModelState) -> Vec<String> {
        self.params
            .iter()
            .filter(|(name, m)| {
                other.params.get(*name).map(|o| !m.bits_eq(o)).unwrap_or(true)
            })
            .map(|(name, _)| name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_shapes() {
        let cfg = LmConfig::default();
        let shapes = cfg.param_shapes();
        assert_eq!(shapes["embedding"], (512, 128));
        assert_eq!(shapes["layers.0.attn.q"], (128, 128));
        assert_eq!(shapes["layers.3.mlp.down"], (128, 512));
        assert_eq!(shapes["final_norm"], (1, 128));
        assert_eq!(shapes.len(), 3 + 4 * 6);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = LmConfig { heads: 3, ..LmConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = LmConfig { ffn_dim: 64, ..LmConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelState::init(LmConfig::default(), 1).unwrap();
        let b = ModelState::init(LmConfig::default(), 1).unwrap();
        assert!(a.bits_eq(&b));
        let c = ModelState::init(LmConfig::default(), 2).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn with_param_replaces_exactly_one() {
        let a = ModelState::init(LmConfig::default(), 1).unwrap();
        let z = Matrix::zeros(128, 512);
        let b = a.with_param("layers.1.mlp.down", z).unwrap();
        assert_eq!(b.diff_names(&a), vec!["layers.1.mlp.down".to_string()]);
    }
}
