//! Gaussian kernels and the biased squared-MMD estimator.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    GaussianSingle,
    GaussianMulti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidths {
    /// Explicit kernel widths `sigma` in `exp(-|x-y|^2 / (2 sigma^2))`.
    Sigmas(Vec<f64>),
    /// Widths derived from the median pairwise squared distance of the
    /// joined sample; recomputed on every call.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub bandwidths: Bandwidths,
}

/// Number of widths in the median-anchored mixture.
pub const MEDIAN_KERNELS: i32 = 5;

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kind: KernelKind::GaussianMulti,
            bandwidths: Bandwidths::Median,
        }
    }
}

impl KernelConfig {
    pub fn single(sigma: f64) -> Self {
        KernelConfig {
            kind: KernelKind::GaussianSingle,
            bandwidths: Bandwidths::Sigmas(vec![sigma]),
        }
    }

    pub fn multi(sigmas: Vec<f64>) -> Self {
        KernelConfig {
            kind: KernelKind::GaussianMulti,
            bandwidths: Bandwidths::Sigmas(sigmas),
        }
    }

    /// Fixed widths for comparing populations of `dim`-dimensional
    /// layer-normalized vectors: `sigma^2 = dim * 2^k`, `k = -2..=2`.
    pub fn fixed_for_dim(dim: usize) -> Self {
        let sigmas = (-2..=2).map(|k| (dim as f64 * 2f64.powi(k)).sqrt()).collect();
        KernelConfig::multi(sigmas)
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidths::Sigmas(sigmas) = &self.bandwidths {
            if sigmas.is_empty() {
                return Err(Error::Config("kernel needs at least one bandwidth".into()));
            }
            if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                return Err(Error::Config(format!("kernel bandwidth must be positive, got {bad}")));
            }
            if self.kind == KernelKind::GaussianSingle && sigmas.len() != 1 {
                return Err(Error::Config("gaussian-single takes exactly one bandwidth".into()));
            }
        }
        Ok(())
    }

    /// Concrete widths for a pair of samples.
    pub fn resolve(&self, s: ArrayView2<f64>, t: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.validate()?;
        match &self.bandwidths {
            Bandwidths::Sigmas(sigmas) => Ok(sigmas.clone()),
            Bandwidths::Median => {
                let med = median_sq_distance(s, t);
                let base = if med.is_finite() && med > 0.0 { med } else { 1.0 };
                let ks: Vec<i32> = match self.kind {
                    KernelKind::GaussianSingle => vec![0],
                    KernelKind::GaussianMulti => (-(MEDIAN_KERNELS / 2)..=MEDIAN_KERNELS / 2).collect(),
                };
                Ok(ks.into_iter().map(|k| (base * 2f64.powi(k)).sqrt()).collect())
            }
        }
    }
}

pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median squared distance over distinct pairs of the joined sample.
pub fn median_sq_distance(s: ArrayView2<f64>, t: ArrayView2<f64>) -> f64 {
    let rows: Vec<ArrayView1<f64>> = s.rows().into_iter().chain(t.rows()).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

/// Equal-weight mixture of Gaussians evaluated at squared distance `d2`.
pub fn gaussian_mix(d2: f64, sigmas: &[f64]) -> f64 {
    sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / sigmas.len() as f64
}

/// `c` such that `d/dx G(x, y) = c * (x - y)`.
pub fn gaussian_mix_grad_coeff(d2: f64, sigmas: &[f64]) -> f64 {
    -sigmas
        .iter()
        .map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s))
        .sum::<f64>()
        / sigmas.len() as f64
}

fn mean_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, sigmas: &[f64]) -> f64 {
    let mut sum = 0.0;
    for ra in a.rows() {
        for rb in b.rows() {
            sum += gaussian_mix(sq_dist(ra, rb), sigmas);
        }
    }
    sum / (a.nrows() * b.nrows()) as f64
}

/// `mean K(S,S) + mean K(T,T) - 2 mean K(S,T)` with diagonal terms included.
pub fn mmd_value(s: ArrayView2<f64>, t: ArrayView2<f64>, sigmas: &[f64]) -> f64 {
    mean_kernel(s, s, sigmas) + mean_kernel(t, t, sigmas) - 2.0 * mean_kernel(s, t, sigmas)
}
