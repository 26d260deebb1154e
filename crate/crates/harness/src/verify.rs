//! Quick oracle checks behind the `verify` subcommand.

use biasdp::accountant::{default_orders, rdp_step, reference};
use biasdp::autodiff::oracle::{dense_hessian, mat_vec, OracleOptions};
use biasdp::autodiff::{fd_grad, grad, hvp, per_sample_grads, BatchObjective, PerSampleGradients, DEFAULT_FD_STEP};
use biasdp::bias::decompose;
use biasdp::dp::{private_oracle, PrivacyConfig, Purpose, RngStream};
use biasdp::models::{init_model, make_loss, Activation, LossKind, ModelSpec};
use biasdp::optim::{bao_loss, z_loss};
use biasdp::tensor::{norm2, rel_err, sub, Tensor};
use rand::{Rng, SeedableRng};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, limit: f64) -> Check {
    Check {
        name,
        passed: value <= limit,
        detail: format!("{value:.3e} (limit {limit:.0e})"),
    }
}

pub fn run_verify(seed: u64) -> Result<Vec<Check>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec::new(vec![4, 10, 10, 3], Activation::Tanh, seed);
    let model = make_loss(&spec, LossKind::CrossEntropySoftmax)?;
    let theta = init_model(&spec)?.values().to_vec();
    let n = 12;
    let data: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let x = Tensor::new(vec![n, 4], data)?;
    let f = BatchObjective { loss: &model, x: &x, y: &y };

    let mut out = Vec::new();
    let g = grad(&f, &theta)?;
    out.push(check("gradient vs finite differences", rel_err(&g, &fd_grad(&f, &theta, DEFAULT_FD_STEP)?), 1e-6));

    let v: Vec<f64> = (0..theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dense = mat_vec(&dense_hessian(&f, &theta, OracleOptions::default())?, &v);
    out.push(check("hvp vs dense Hessian", rel_err(&hvp(&f, &theta, &v)?, &dense), 1e-8));

    let mut worst: f64 = 0.0;
    let orders = default_orders();
    for (q, sigma) in [(0.01, 1.1), (0.05, 0.8), (0.3, 2.0)] {
        let prod = rdp_step(q, sigma, &orders)?;
        for (&a, p) in orders.iter().zip(&prod) {
            let r = reference::rdp(q, sigma, a);
            if r > 0.0 {
                worst = worst.max((p - r).abs() / r);
            }
        }
    }
    out.push(check("accountant production vs reference", worst, 1e-6));

    let psg = per_sample_grads(&model, &theta, &x, &y)?;
    let cfg = PrivacyConfig::new(0.1, 1.0, n as f64 / 1000.0, 1000, 1e-5)?;
    let est = private_oracle(&psg, &cfg, RngStream::new(seed, 0, Purpose::Noise))?;
    let dec = decompose(&psg, cfg.clip_bound, &est.noise, cfg.expected_batch_size())?;
    let recon = match dec.reconstruct() {
        Some(r) => norm2(&sub(&r, &est.g_priv)) / norm2(&est.g_priv),
        None => f64::INFINITY,
    };
    out.push(check("bias decomposition reconstruction", recon, 1e-10));

    let gap = z_loss(&model, &theta, &x, &y, 0.5)? - bao_loss(&model, &theta, &x, &y, 0.5)?;
    out.push(Check {
        name: "z_loss <= bao_loss",
        passed: gap <= 1e-12,
        detail: format!("z - bao = {gap:.3e}"),
    });

    let single = PerSampleGradients::from_rows(1, &[vec![3.0], vec![0.5]])?;
    let bias = biasdp::bias::bias_vector(&single, 1.0)?.bias[0];
    out.push(check("hand-evaluated clipping bias", (bias + 1.0).abs(), 1e-15));
    Ok(out)
}
