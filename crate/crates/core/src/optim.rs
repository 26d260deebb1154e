//! Private training steps: DP-SGD, BAM (ascent approximation and exact HVP
//! form) and DP-SAT, plus the two regularised objectives.

use serde::{Deserialize, Serialize};

use crate::accountant::AccountantLedger;
use crate::autodiff::{
    grad, grad_and_hvp, per_sample_grads, per_sample_map, value_and_grad, PerSampleGradients, SampleLoss,
    ScalarFunction,
};
use crate::dp::{poisson_sample, private_oracle, GradientEstimates, PrivacyConfig, Purpose, RngStream};
use crate::error::{check_dim, Error, Result};
use crate::tensor::{norm2, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DpSgd,
    BamSam,
    BamExact,
    DpSat,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DpSgd, Method::DpSat, Method::BamSam, Method::BamExact];

    pub fn name(self) -> &'static str {
        match self {
            Method::DpSgd => "dp_sgd",
            Method::BamSam => "bam_sam",
            Method::BamExact => "bam_exact",
            Method::DpSat => "dp_sat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A per-step scalar: a constant or a linear ramp from `start` to `end`
/// over `steps` steps, held at `end` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    Linear { start: f64, end: f64, steps: u64 },
}

impl Schedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant(v) => v,
            Schedule::Linear { start, end, steps } => {
                if steps == 0 || t >= steps {
                    end
                } else {
                    start + (end - start) * (t as f64 / steps as f64)
                }
            }
        }
    }

    fn endpoints(&self) -> [f64; 2] {
        match *self {
            Schedule::Constant(v) => [v, v],
            Schedule::Linear { start, end, .. } => [start, end],
        }
    }
}

/// Hyperparameter presets for the three reference workloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Cifar10,
    Cifar100,
    Imagenet32,
}

impl Preset {
    pub fn lambda(self, method: Method) -> f64 {
        match (method, self) {
            (Method::DpSgd, _) => 0.0,
            (Method::BamSam | Method::BamExact, Preset::Cifar10) => 0.02,
            (Method::BamSam | Method::BamExact, Preset::Cifar100) => 0.01,
            (Method::BamSam | Method::BamExact, Preset::Imagenet32) => 0.005,
            (Method::DpSat, Preset::Cifar10 | Preset::Cifar100) => 0.086,
            (Method::DpSat, Preset::Imagenet32) => 0.07,
        }
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            Preset::Cifar10 | Preset::Cifar100 => 2e-3,
            Preset::Imagenet32 => 1e-3,
        }
    }

    pub fn clip_bound(self) -> f64 {
        1.0
    }
}

pub const DEFAULT_NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub learning_rate: Schedule,
    pub lambda: Schedule,
    /// Gradients with norm at or below this skip the ascent and are flagged.
    pub norm_guard: f64,
    /// Classical momentum on the privatized gradient; `None` is plain descent.
    pub momentum: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(method: Method, learning_rate: f64, lambda: f64) -> Self {
        Self {
            method,
            learning_rate: Schedule::Constant(learning_rate),
            lambda: Schedule::Constant(lambda),
            norm_guard: DEFAULT_NORM_GUARD,
            momentum: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.endpoints().iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::contract("learning rate must be > 0"));
        }
        if self.lambda.endpoints().iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::contract("lambda must be >= 0"));
        }
        if !(self.norm_guard > 0.0) {
            return Err(Error::contract("norm guard must be > 0"));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::contract("momentum must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub theta: ParamVector,
    step: u64,
    prev_priv: Option<Vec<f64>>,
    velocity: Option<Vec<f64>>,
    ledger: AccountantLedger,
    seed: u64,
    epsilon_budget: Option<f64>,
}

impl TrainState {
    pub fn new(theta: ParamVector, privacy: &PrivacyConfig, seed: u64) -> Result<Self> {
        privacy.validate()?;
        let ledger =
            AccountantLedger::with_default_orders(privacy.sampling_rate, privacy.noise_multiplier, privacy.delta)?;
        Ok(Self {
            theta,
            step: 0,
            prev_priv: None,
            velocity: None,
            ledger,
            seed,
            epsilon_budget: None,
        })
    }

    /// Steps past this ε are still taken but reported as over budget.
    pub fn with_budget(mut self, epsilon: f64) -> Self {
        self.epsilon_budget = Some(epsilon);
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prev_priv(&self) -> Option<&[f64]> {
        self.prev_priv.as_deref()
    }

    pub fn ledger(&self) -> &AccountantLedger {
        &self.ledger
    }

    pub fn stream(&self, purpose: Purpose) -> RngStream {
        RngStream::new(self.seed, self.step, purpose)
    }

    /// Poisson batch for the current step.
    pub fn sample_batch(&self, n: usize, q: f64) -> Result<Vec<usize>> {
        poisson_sample(n, q, self.stream(Purpose::Sampling))
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub method: Method,
    pub lambda: f64,
    pub learning_rate: f64,
    pub estimates: GradientEstimates,
    /// Samples whose ascent was skipped by the norm guard.
    pub flagged: usize,
    /// DP-SAT: whether an ascent from the previous private gradient was used.
    pub shared_ascent: bool,
    pub epsilon: f64,
    pub over_budget: bool,
}

fn batch_losses<L: SampleLoss>(loss: &L, theta: &[f64], x: &Tensor, y: &[usize]) -> Result<PerSampleGradients> {
    if y.is_empty() {
        return Err(Error::contract("objective needs a non-empty batch"));
    }
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "objective batch",
            expected: x.rows(),
            got: y.len(),
        });
    }
    per_sample_grads(loss, theta, x, y)
}

/// `L + λ (1/l) Σ |g_i|`.
pub fn bao_loss<L: SampleLoss>(loss: &L, theta: &[f64], x: &Tensor, y: &[usize], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let psg = batch_losses(loss, theta, x, y)?;
    let mean_norm = psg.norms().iter().sum::<f64>() / psg.batch_size() as f64;
    Ok(psg.mean_loss() + lambda * mean_norm)
}

/// `L + λ |(1/l) Σ g_i|`.
pub fn z_loss<L: SampleLoss>(loss: &L, theta: &[f64], x: &Tensor, y: &[usize], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let psg = batch_losses(loss, theta, x, y)?;
    Ok(psg.mean_loss() + lambda * norm2(&psg.mean()))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::contract("lambda must be >= 0"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BamGrad {
    /// Loss at the unshifted point.
    pub loss: f64,
    pub grad: Vec<f64>,
    pub flagged: bool,
}

/// `∇L + λ ∇²L ∇L/|∇L|` with the Hessian product from one dual sweep.
pub fn bam_grad_exact<F: ScalarFunction>(f: &F, theta: &[f64], lambda: f64, guard: f64) -> Result<BamGrad> {
    check_lambda(lambda)?;
    let (loss, g) = value_and_grad(f, theta)?;
    if lambda == 0.0 {
        return Ok(BamGrad { loss, grad: g, flagged: false });
    }
    let n = norm2(&g);
    if n <= guard {
        return Ok(BamGrad { loss, grad: g, flagged: true });
    }
    let u: Vec<f64> = g.iter().map(|v| v / n).collect();
    let (_, hu) = grad_and_hvp(f, theta, &u)?;
    let grad = g.iter().zip(&hu).map(|(a, b)| a + lambda * b).collect();
    Ok(BamGrad { loss, grad, flagged: false })
}

/// Plain gradient at `θ + λ ∇L/|∇L|`.
pub fn bam_grad_sam<F: ScalarFunction>(f: &F, theta: &[f64], lambda: f64, guard: f64) -> Result<BamGrad> {
    check_lambda(lambda)?;
    let (loss, g) = value_and_grad(f, theta)?;
    if lambda == 0.0 {
        return Ok(BamGrad { loss, grad: g, flagged: false });
    }
    let n = norm2(&g);
    if n <= guard {
        return Ok(BamGrad { loss, grad: g, flagged: true });
    }
    let shifted = ascend(theta, &g, lambda / n);
    Ok(BamGrad {
        loss,
        grad: grad(f, &shifted)?,
        flagged: false,
    })
}

fn ascend(theta: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    theta.iter().zip(dir).map(|(t, d)| t + scale * d).collect()
}

/// Per-sample rows for `method` at the current state. Nothing here has been
/// clipped yet.
pub fn method_rows<L: SampleLoss>(
    loss: &L,
    state: &TrainState,
    x: &Tensor,
    y: &[usize],
    cfg: &OptimizerConfig,
) -> Result<(PerSampleGradients, usize, bool)> {
    let theta = state.theta.values();
    let lambda = cfg.lambda.at(state.step);
    let guard = cfg.norm_guard;
    let mut flagged = 0usize;
    match cfg.method {
        _ if lambda == 0.0 => Ok((per_sample_grads(loss, theta, x, y)?, 0, false)),
        Method::DpSgd => Ok((per_sample_grads(loss, theta, x, y)?, 0, false)),
        Method::BamSam | Method::BamExact => {
            let exact = cfg.method == Method::BamExact;
            let rows = per_sample_map(loss, theta, x, y, |obj, th| {
                let r = if exact {
                    bam_grad_exact(obj, th, lambda, guard)?
                } else {
                    bam_grad_sam(obj, th, lambda, guard)?
                };
                flagged += r.flagged as usize;
                Ok((r.loss, r.grad))
            })?;
            Ok((rows, flagged, false))
        }
        Method::DpSat => match state.prev_priv.as_deref() {
            Some(prev) => {
                let n = norm2(prev);
                if n <= guard {
                    return Ok((per_sample_grads(loss, theta, x, y)?, 1, false));
                }
                let shifted = ascend(theta, prev, lambda / n);
                Ok((per_sample_grads(loss, &shifted, x, y)?, 0, true))
            }
            None => Ok((per_sample_grads(loss, theta, x, y)?, 0, false)),
        },
    }
}

/// One private step on an already-sampled batch.
pub fn step<L: SampleLoss>(
    state: &mut TrainState,
    loss: &L,
    x: &Tensor,
    y: &[usize],
    cfg: &OptimizerConfig,
    privacy: &PrivacyConfig,
) -> Result<StepReport> {
    cfg.validate()?;
    check_dim("step theta", loss.dim(), state.theta.dim())?;
    check_dim("step labels", x.rows(), y.len())?;
    let t = state.step;
    let lambda = cfg.lambda.at(t);
    let learning_rate = cfg.learning_rate.at(t);

    let (rows, flagged, shared_ascent) = method_rows(loss, state, x, y, cfg)?;
    let estimates = private_oracle(&rows, privacy, state.stream(Purpose::Noise))?;

    let direction = match cfg.momentum {
        Some(mu) => {
            let v = state.velocity.get_or_insert_with(|| vec![0.0; estimates.g_priv.len()]);
            for (vi, gi) in v.iter_mut().zip(&estimates.g_priv) {
                *vi = mu * *vi + gi;
            }
            v.clone()
        }
        None => estimates.g_priv.clone(),
    };
    for (p, d) in state.theta.values_mut().iter_mut().zip(&direction) {
        *p -= learning_rate * d;
    }

    state.ledger.step();
    state.prev_priv = Some(estimates.g_priv.clone());
    state.step += 1;
    let (epsilon, _) = state.ledger.epsilon();
    let over_budget = state.epsilon_budget.is_some_and(|b| epsilon > b);

    Ok(StepReport {
        step: t,
        method: cfg.method,
        lambda,
        learning_rate,
        estimates,
        flagged,
        shared_ascent,
        epsilon,
        over_budget,
    })
}
