//! The private gradient oracle: Poisson subsampling, per-sample clipping and
//! Gaussian perturbation.
//!
//! Denominators: the privatised estimate divides by the *expected* batch size
//! `l = round(q n)`. Quantities that compare clipped and unclipped means on a
//! fixed observed batch use the *actual* row count instead, which is what
//! makes the zero-bias identity exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::PerSampleGradients;
use crate::error::{Error, Result};
use crate::tensor::{norm2, sum_rows};

/// Stream identifiers. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Sampling,
    Noise,
    Init,
    Split,
    Data,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Sampling => 0x5341_4d50,
            Purpose::Noise => 0x4e4f_4953,
            Purpose::Init => 0x494e_4954,
            Purpose::Split => 0x5350_4c54,
            Purpose::Data => 0x4441_5441,
        }
    }
}

/// Key of a counter-based random stream: `(seed, step, purpose, sample)`.
///
/// The key is packed verbatim into a ChaCha seed, so equal keys give equal
/// draws and distinct keys give independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub step: u64,
    pub purpose: Purpose,
    pub sample: u64,
}

impl RngStream {
    pub fn new(seed: u64, step: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            step,
            purpose,
            sample: 0,
        }
    }

    pub fn with_sample(self, sample: u64) -> Self {
        Self { sample, ..self }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.step.to_le_bytes());
        key[16..24].copy_from_slice(&self.purpose.tag().to_le_bytes());
        key[24..].copy_from_slice(&self.sample.to_le_bytes());
        ChaCha12Rng::from_seed(key)
    }
}

/// Where the Gaussian draw enters the clipped sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// One `N(0, σ²C²I)` draw added after summation.
    #[default]
    AfterSum,
    /// One independent draw per observed sample, inside the sum.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub clip_bound: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub dataset_size: usize,
    pub delta: f64,
    #[serde(default)]
    pub noise_placement: NoisePlacement,
}

impl PrivacyConfig {
    pub fn new(clip_bound: f64, noise_multiplier: f64, sampling_rate: f64, dataset_size: usize, delta: f64) -> Result<Self> {
        let cfg = Self {
            clip_bound,
            noise_multiplier,
            sampling_rate,
            dataset_size,
            delta,
            noise_placement: NoisePlacement::AfterSum,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_bound > 0.0) || self.clip_bound.is_nan() {
            return Err(Error::contract("clip bound C must be > 0"));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::contract("noise multiplier must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.sampling_rate) {
            return Err(Error::contract("sampling rate q must lie in [0, 1]"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::contract("delta must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `l = round(q n)`.
    pub fn expected_batch_size(&self) -> usize {
        (self.sampling_rate * self.dataset_size as f64).round() as usize
    }

    /// Per-step L2 sensitivity of the clipped sum.
    pub fn sensitivity(&self) -> f64 {
        self.clip_bound
    }

    /// Standard deviation of the summed noise, `σ C`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_bound
    }
}

/// Scale factor `max(1, |g| / C)`; dividing by it clips `g`.
pub fn clip_factor(norm: f64, clip_bound: f64) -> f64 {
    (norm / clip_bound).max(1.0)
}

/// `g / max(1, |g|_2 / C)`. Rows within the bound are returned unchanged.
pub fn clip(g: &[f64], clip_bound: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_bound);
    out
}

/// Clips in place; returns whether the row was scaled.
pub fn clip_in_place(g: &mut [f64], clip_bound: f64) -> bool {
    let m = clip_factor(norm2(g), clip_bound);
    if m > 1.0 {
        for x in g.iter_mut() {
            *x /= m;
        }
        true
    } else {
        false
    }
}

/// Includes every index in `0..n` independently with probability `q`.
pub fn poisson_sample(n: usize, q: f64, stream: RngStream) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract("sampling rate q must lie in [0, 1]"));
    }
    let mut rng = stream.rng();
    Ok((0..n).filter(|_| rng.gen::<f64>() < q).collect())
}

/// `N(0, std² I_d)` draw from one stream.
pub fn gaussian_vector(dim: usize, std: f64, stream: RngStream) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Output of one oracle query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimates {
    /// Unclipped mean over the observed rows.
    pub g_hat: Vec<f64>,
    /// Clipped sum divided by the expected batch size.
    pub g_clip: Vec<f64>,
    /// Clipped sum divided by the observed row count.
    pub g_clip_observed: Vec<f64>,
    /// `(sum of clipped rows + noise) / l`.
    pub g_priv: Vec<f64>,
    /// The summed Gaussian draw before division by `l`.
    pub noise: Vec<f64>,
    pub noise_stream: RngStream,
    pub expected_batch_size: usize,
    pub observed_batch_size: usize,
    pub clipped: usize,
    pub empty_batch: bool,
}

/// Clips every row, sums, perturbs once, and divides by the expected batch
/// size. The only data-dependent input to `g_priv` is the clipped rows.
pub fn private_oracle(psg: &PerSampleGradients, cfg: &PrivacyConfig, stream: RngStream) -> Result<GradientEstimates> {
    cfg.validate()?;
    let d = psg.dim();
    let l = cfg.expected_batch_size();
    let observed = psg.batch_size();
    if l == 0 && observed > 0 {
        return Err(Error::contract(
            "expected batch size round(q n) is zero but the batch is not empty",
        ));
    }
    if psg.rows().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::contract("per-sample gradients must be finite"));
    }

    let mut clipped_sum = vec![0.0; d];
    let mut clipped = 0;
    for (row, &norm) in psg.rows().zip(psg.norms()) {
        let m = clip_factor(norm, cfg.clip_bound);
        if m > 1.0 {
            clipped += 1;
            for (s, x) in clipped_sum.iter_mut().zip(row) {
                *s += x / m;
            }
        } else {
            for (s, x) in clipped_sum.iter_mut().zip(row) {
                *s += x;
            }
        }
    }

    let noise = if cfg.noise_multiplier == 0.0 {
        vec![0.0; d]
    } else {
        match cfg.noise_placement {
            NoisePlacement::AfterSum => gaussian_vector(d, cfg.noise_std(), stream),
            NoisePlacement::PerSample => {
                let draws: Vec<Vec<f64>> = (0..observed as u64)
                    .map(|i| gaussian_vector(d, cfg.noise_std(), stream.with_sample(i)))
                    .collect();
                sum_rows(draws.iter().map(Vec::as_slice), d)
            }
        }
    };

    let g_hat = psg.mean();
    let (g_clip, g_priv) = if l == 0 {
        (vec![0.0; d], vec![0.0; d])
    } else {
        let lf = l as f64;
        let g_clip: Vec<f64> = clipped_sum.iter().map(|s| s / lf).collect();
        let g_priv = if cfg.noise_multiplier == 0.0 {
            g_clip.clone()
        } else {
            clipped_sum
                .iter()
                .zip(&noise)
                .map(|(s, z)| (s + z) / lf)
                .collect()
        };
        (g_clip, g_priv)
    };
    let g_clip_observed = if observed == 0 {
        vec![0.0; d]
    } else {
        clipped_sum.iter().map(|s| s / observed as f64).collect()
    };

    Ok(GradientEstimates {
        g_hat,
        g_clip,
        g_clip_observed,
        g_priv,
        noise,
        noise_stream: stream,
        expected_batch_size: l,
        observed_batch_size: observed,
        clipped,
        empty_batch: observed == 0,
    })
}
