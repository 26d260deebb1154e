//! The desk-scale benchmark task and its λ grid.

use biasdp::dp::NoisePlacement;
use biasdp::models::{Activation, LossKind};
use biasdp::optim::{Method, Preset, Schedule, DEFAULT_NORM_GUARD};

use crate::config::{ModelConfig, OptimConfig, PrivacySection, RunConfig};
use crate::data::DatasetSpec;
use crate::error::Result;
use crate::run::train;

/// BAM λ values tried at desk scale: the three preset settings plus three
/// larger ones, since plain SGD on small MLPs tolerates stronger penalties.
pub const DESK_LAMBDA_GRID: [f64; 6] = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2];

/// Training-split size of the desk task.
pub const DESK_TRAIN_N: usize = 10_000;

/// Expected batch size of the desk task.
pub const DESK_BATCH: usize = 512;

/// 10-class Gaussian blobs in 20 dimensions, 10 000 training rows after a
/// 20% hold-out, expected batch 512, C = 1, σ calibrated to (8, 1e-5).
pub fn desk_task(seed: u64, method: Method, lambda: f64) -> RunConfig {
    RunConfig {
        seed,
        epochs: 10,
        q: DESK_BATCH as f64 / DESK_TRAIN_N as f64,
        instrument_every: 5,
        eval_fraction: 0.2,
        timing: false,
        out: None,
        dataset: DatasetSpec::Blobs {
            n: DESK_TRAIN_N * 5 / 4,
            dim: 20,
            classes: 10,
            separation: 1.5,
        },
        model: ModelConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropySoftmax,
        },
        optimizer: OptimConfig {
            method,
            learning_rate: Schedule::Constant(2.0),
            lambda: Schedule::Constant(lambda),
            norm_guard: DEFAULT_NORM_GUARD,
            momentum: None,
        },
        privacy: PrivacySection {
            clip: 1.0,
            sigma: None,
            epsilon: Some(8.0),
            delta: 1e-5,
            noise_placement: NoisePlacement::AfterSum,
        },
    }
}

/// The CIFAR-10 preset λ for DP-SAT.
pub fn desk_dp_sat_lambda() -> f64 {
    Preset::Cifar10.lambda(Method::DpSat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub method: Method,
    pub lambda: f64,
    pub mean_bias_norm: f64,
    pub mean_eval_accuracy: f64,
}

/// Seed-averaged epoch-mean bias norm and final held-out accuracy.
pub fn evaluate(method: Method, lambda: f64, seeds: &[u64]) -> Result<GridPoint> {
    let mut bias = 0.0;
    let mut acc = 0.0;
    for &s in seeds {
        let out = train(&desk_task(s, method, lambda))?;
        let sum = out.summary();
        bias += sum.bias_norm.unwrap_or(f64::NAN);
        acc += sum.eval_accuracy.unwrap_or(f64::NAN);
    }
    let k = seeds.len() as f64;
    Ok(GridPoint {
        method,
        lambda,
        mean_bias_norm: bias / k,
        mean_eval_accuracy: acc / k,
    })
}

/// Runs the grid and picks λ by held-out accuracy, the way a practitioner
/// would tune it; bias plays no part in the choice.
pub fn tune_bam(method: Method, grid: &[f64], seeds: &[u64]) -> Result<(GridPoint, Vec<GridPoint>)> {
    let points = grid
        .iter()
        .map(|&l| evaluate(method, l, seeds))
        .collect::<Result<Vec<_>>>()?;
    let best = points
        .iter()
        .cloned()
        .reduce(|a, b| if b.mean_eval_accuracy > a.mean_eval_accuracy { b } else { a })
        .expect("grid is non-empty");
    Ok((best, points))
}
