//! Low-rank adapters over a frozen weight: `W + (alpha / r) * B * A`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::LmError;
use crate::rng::SplitMix64;

/// Rank, scaling numerator and input dropout for an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSettings {
    /// rank 128, alpha 256, dropout 0.05
    fn default() -> Self {
        LoraSettings { rank: 128, alpha: 256.0, dropout: 0.05 }
    }
}

impl LoraSettings {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter for a frozen `m x n` weight. `a` is `r x n`, `b` is `m x r` and
/// starts at zero, so a fresh adapter leaves the base weight unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub base: Array2<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub settings: LoraSettings,
}

impl LoraAdapter {
    pub fn new(base: Array2<f64>, settings: LoraSettings, rng: &mut SplitMix64) -> Result<Self, LmError> {
        if settings.rank == 0 {
            return Err(LmError::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&settings.dropout) {
            return Err(LmError::Config(format!("LoRA dropout {} outside [0, 1)", settings.dropout)));
        }
        let (m, n) = base.dim();
        let std = 1.0 / (n as f64).sqrt();
        let a = Array2::from_shape_simple_fn((settings.rank, n), || rng.normal() * std);
        let b = Array2::zeros((m, settings.rank));
        Ok(LoraAdapter { base, a, b, settings })
    }

    pub fn scaling(&self) -> f64 {
        self.settings.scaling()
    }

    /// `W x + (alpha/r) B (A x)`, without forming `B A`.
    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>, LmError> {
        if x.len() != self.base.ncols() {
            return Err(LmError::Shape(format!("input has {} entries, adapter expects {}", x.len(), self.base.ncols())));
        }
        let low = self.a.dot(x);
        Ok(self.base.dot(x) + self.b.dot(&low) * self.scaling())
    }

    /// Training-mode forward: inverted dropout on the adapter input only.
    pub fn forward_train(&self, x: &Array1<f64>, rng: &mut SplitMix64) -> Result<Array1<f64>, LmError> {
        if x.len() != self.base.ncols() {
            return Err(LmError::Shape(format!("input has {} entries, adapter expects {}", x.len(), self.base.ncols())));
        }
        let keep = 1.0 - self.settings.dropout;
        let dropped = x.mapv(|v| if rng.bernoulli(keep) { v / keep } else { 0.0 });
        Ok(self.base.dot(x) + self.b.dot(&self.a.dot(&dropped)) * self.scaling())
    }

    /// Dense `W + (alpha/r) B A`.
    pub fn merge(&self) -> Array2<f64> {
        &self.base + &(self.b.dot(&self.a) * self.scaling())
    }

    /// `r * (m + n)`; the frozen base is not counted.
    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}
