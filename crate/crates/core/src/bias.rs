//! Bias of the private gradient estimate on a fixed observed batch, and its
//! split into a magnitude error `a` and a directional error `c` with
//! `g_priv = a·ĝ + c`.
//!
//! Clip factors follow the oracle's convention `M_i = max(1, |g_i| / C)`,
//! so that `clip(g_i) = (η_i / M_i)·ĝ + τ_i / M_i` holds term by term.

use serde::{Deserialize, Serialize};

use crate::autodiff::PerSampleGradients;
use crate::dp::clip_factor;
use crate::error::{check_dim, Error, Result};
use crate::tensor::{cosine, dot, norm2, sub};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl NormSummary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                min: 0.0,
                mean: 0.0,
                max: 0.0,
            };
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Self {
            min,
            mean: sum / values.len() as f64,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// `ĝ_clip − ĝ` with both means over the observed rows.
    pub bias: Vec<f64>,
    pub bias_norm: f64,
    pub fraction_clipped: f64,
    pub norms: NormSummary,
    pub g_hat: Vec<f64>,
    pub g_clip: Vec<f64>,
}

/// Clipping bias on an observed batch. No noise is involved: the Gaussian
/// perturbation is zero-mean and drops out of the expectation.
pub fn bias_vector(psg: &PerSampleGradients, clip_bound: f64) -> Result<BiasReport> {
    let l = psg.batch_size();
    if l == 0 {
        return Err(Error::contract("bias needs at least one sample"));
    }
    if !(clip_bound > 0.0) {
        return Err(Error::contract("clip bound C must be > 0"));
    }
    let d = psg.dim();
    let lf = l as f64;
    let mut hat = vec![0.0; d];
    let mut clipped_sum = vec![0.0; d];
    let mut clipped = 0usize;
    for (row, &norm) in psg.rows().zip(psg.norms()) {
        let m = clip_factor(norm, clip_bound);
        if m > 1.0 {
            clipped += 1;
        }
        for ((h, c), &x) in hat.iter_mut().zip(clipped_sum.iter_mut()).zip(row) {
            *h += x;
            *c += if m > 1.0 { x / m } else { x };
        }
    }
    let g_hat: Vec<f64> = hat.iter().map(|s| s / lf).collect();
    let g_clip: Vec<f64> = clipped_sum.iter().map(|s| s / lf).collect();
    let bias = sub(&g_clip, &g_hat);
    Ok(BiasReport {
        bias_norm: norm2(&bias),
        bias,
        fraction_clipped: clipped as f64 / lf,
        norms: NormSummary::of(psg.norms()),
        g_hat,
        g_clip,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDecomposition {
    /// `ĝ = 0` (or below the guard): projections are undefined.
    pub degenerate: bool,
    pub g_hat: Vec<f64>,
    /// `η_i = <g_i, ĝ> / |ĝ|²`
    pub eta: Vec<f64>,
    /// `M_i = max(1, |g_i| / C)`
    pub clip_factors: Vec<f64>,
    /// `τ_i = g_i − η_i ĝ`, row-major `l x d`.
    pub tau: Vec<f64>,
    /// Summed Gaussian draw (the single equivalent of `Σ β_i`).
    pub noise: Vec<f64>,
    pub denominator: usize,
    /// Magnitude error `a = (1/l) Σ η_i / M_i`.
    pub a: Option<f64>,
    /// Directional error `c = (1/l) (Σ τ_i / M_i + noise)`.
    pub c: Option<Vec<f64>>,
    /// `E[a ĝ + c] − ĝ = (a − 1) ĝ + (1/l) Σ τ_i / M_i`.
    pub expected_bias: Option<Vec<f64>>,
}

impl BiasDecomposition {
    pub fn tau_row(&self, i: usize) -> &[f64] {
        let d = self.g_hat.len();
        &self.tau[i * d..(i + 1) * d]
    }

    pub fn c_norm(&self) -> Option<f64> {
        self.c.as_deref().map(norm2)
    }

    /// `a ĝ + c`.
    pub fn reconstruct(&self) -> Option<Vec<f64>> {
        let a = self.a?;
        let c = self.c.as_ref()?;
        Some(self.g_hat.iter().zip(c).map(|(g, ci)| a * g + ci).collect())
    }
}

/// Default guard below which `|ĝ|` counts as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Decomposes `g_priv = (Σ clip(g_i) + noise) / denominator` into `a ĝ + c`.
pub fn decompose(psg: &PerSampleGradients, clip_bound: f64, noise: &[f64], denominator: usize) -> Result<BiasDecomposition> {
    decompose_with_guard(psg, clip_bound, noise, denominator, DEGENERATE_NORM)
}

pub fn decompose_with_guard(
    psg: &PerSampleGradients,
    clip_bound: f64,
    noise: &[f64],
    denominator: usize,
    guard: f64,
) -> Result<BiasDecomposition> {
    let d = psg.dim();
    check_dim("decompose noise", d, noise.len())?;
    if psg.is_empty() || denominator == 0 {
        return Err(Error::contract("decomposition needs a non-empty batch and l >= 1"));
    }
    let g_hat = psg.mean();
    let gg = dot(&g_hat, &g_hat);
    let clip_factors: Vec<f64> = psg.norms().iter().map(|&n| clip_factor(n, clip_bound)).collect();
    if gg.sqrt() <= guard {
        return Ok(BiasDecomposition {
            degenerate: true,
            g_hat,
            eta: Vec::new(),
            clip_factors,
            tau: Vec::new(),
            noise: noise.to_vec(),
            denominator,
            a: None,
            c: None,
            expected_bias: None,
        });
    }

    let l = denominator as f64;
    let mut eta = Vec::with_capacity(psg.batch_size());
    let mut tau = Vec::with_capacity(psg.batch_size() * d);
    let mut a_sum = 0.0;
    let mut resid = vec![0.0; d];
    for (row, &m) in psg.rows().zip(&clip_factors) {
        let e = dot(row, &g_hat) / gg;
        eta.push(e);
        a_sum += e / m;
        let start = tau.len();
        tau.extend(row.iter().zip(&g_hat).map(|(g, h)| g - e * h));
        for (r, t) in resid.iter_mut().zip(&tau[start..]) {
            *r += t / m;
        }
    }
    let a = a_sum / l;
    let c: Vec<f64> = resid.iter().zip(noise).map(|(r, z)| (r + z) / l).collect();
    let expected_bias = g_hat
        .iter()
        .zip(&resid)
        .map(|(h, r)| (a - 1.0) * h + r / l)
        .collect();
    Ok(BiasDecomposition {
        degenerate: false,
        g_hat,
        eta,
        clip_factors,
        tau,
        noise: noise.to_vec(),
        denominator,
        a: Some(a),
        c: Some(c),
        expected_bias: Some(expected_bias),
    })
}

/// Alignment diagnostics. Degenerate (zero-vector) comparisons read 0 and
/// set the matching flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineMetrics {
    /// `cos(ĝ_priv^(t−1), ĝ^(t))`: alignment of a previous-gradient ascent.
    pub prev_priv_vs_batch: f64,
    pub prev_priv_degenerate: bool,
    /// `(1/l) Σ cos(g_i, ĝ)`: alignment of per-sample ascents.
    pub sample_vs_batch: f64,
    pub sample_degenerate: bool,
    /// `cos(ĝ_clip, ĝ)`.
    pub clip_vs_batch: f64,
    pub clip_degenerate: bool,
}

pub fn cosine_metrics(psg: &PerSampleGradients, clip_bound: f64, prev_priv: Option<&[f64]>) -> Result<CosineMetrics> {
    let report = bias_vector(psg, clip_bound)?;
    let g_hat = &report.g_hat;

    let (prev_priv_vs_batch, prev_priv_degenerate) = match prev_priv {
        Some(p) => {
            check_dim("cosine_metrics previous gradient", g_hat.len(), p.len())?;
            match cosine(p, g_hat) {
                Some(c) => (c, false),
                None => (0.0, true),
            }
        }
        None => (0.0, true),
    };

    let mut sum = 0.0;
    let mut sample_degenerate = false;
    for row in psg.rows() {
        match cosine(row, g_hat) {
            Some(c) => sum += c,
            None => sample_degenerate = true,
        }
    }
    let sample_vs_batch = sum / psg.batch_size() as f64;

    let (clip_vs_batch, clip_degenerate) = match cosine(&report.g_clip, g_hat) {
        Some(c) => (c, false),
        None => (0.0, true),
    };

    Ok(CosineMetrics {
        prev_priv_vs_batch,
        prev_priv_degenerate,
        sample_vs_batch,
        sample_degenerate,
        clip_vs_batch,
        clip_degenerate,
    })
}
