use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sinusoidal embedding of a time / β value.
///
/// Frequencies are `ω_k = κ_k / B` with `κ_k` geometrically spaced in
/// `[kappa_min, kappa_max]`; the output interleaves `[sin ω_k t, cos ω_k t]`.
/// Every component is `kappa_max / B`-Lipschitz in `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub horizon: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
}

impl TimeEmbedding {
    pub const DEFAULT_KAPPA_MIN: f64 = 1.0;
    pub const DEFAULT_KAPPA_MAX: f64 = 10.0;

    pub fn new(dim: usize, horizon: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be positive and even, got {dim}"
            )));
        }
        Ok(TimeEmbedding {
            dim,
            horizon,
            kappa_min: Self::DEFAULT_KAPPA_MIN,
            kappa_max: Self::DEFAULT_KAPPA_MAX,
        })
    }

    pub fn frequency(&self, k: usize) -> f64 {
        let half = self.dim / 2;
        let kappa = if half == 1 {
            self.kappa_min
        } else {
            let r = k as f64 / (half - 1) as f64;
            self.kappa_min * (self.kappa_max / self.kappa_min).powf(r)
        };
        kappa / self.horizon
    }

    pub fn embed_into(&self, t: f64, out: &mut [f64]) {
        for k in 0..self.dim / 2 {
            let (s, c) = (self.frequency(k) * t).sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.embed_into(t, &mut out);
        out
    }
}

/// Embedding with the default frequency range and unit horizon.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    Ok(TimeEmbedding::new(dim, 1.0)?.embed(t))
}
