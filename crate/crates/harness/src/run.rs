//! Training runs, batch-size sweeps and step-time benchmarks.

use std::path::Path;
use std::time::Instant;

use biasdp::accountant::{calibrate_sigma, default_orders, Calibration};
use biasdp::autodiff::per_sample_grads;
use biasdp::bias::{bias_vector, cosine_metrics, decompose};
use biasdp::dp::PrivacyConfig;
use biasdp::models::{init_model, make_loss, Activation, LossKind, Mlp, ModelSpec};
use biasdp::optim::{step, Method, OptimizerConfig, Preset, TrainState};
use biasdp::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{blobs, load_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricRecord, MetricsWriter, RecordKind};

/// Expected number of steps per pass over the training split.
pub fn steps_per_epoch(q: f64) -> u64 {
    (1.0 / q).round().max(1.0) as u64
}

pub fn total_steps(cfg: &RunConfig) -> u64 {
    cfg.epochs as u64 * steps_per_epoch(cfg.q)
}

/// Noise multiplier for the run: the configured σ, or the calibrated one.
pub fn resolve_sigma(cfg: &RunConfig) -> Result<(f64, Option<Calibration>)> {
    match (cfg.privacy.sigma, cfg.privacy.epsilon) {
        (Some(s), _) => Ok((s, None)),
        (None, Some(eps)) => {
            let cal = calibrate_sigma(eps, cfg.privacy.delta, cfg.q, total_steps(cfg), &default_orders())?;
            Ok((cal.sigma, Some(cal)))
        }
        (None, None) => Err(HarnessError::config("one of sigma or epsilon is required")),
    }
}

pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<(Mlp, ModelSpec)> {
    let mut widths = vec![data.features()];
    widths.extend(&cfg.model.hidden);
    widths.push(data.classes);
    let spec = ModelSpec::new(widths, cfg.model.activation, cfg.seed);
    Ok((make_loss(&spec, cfg.model.loss)?, spec))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub sigma: f64,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn summary(&self) -> &MetricRecord {
        self.records.last().expect("a run always ends with a summary")
    }

    pub fn step_records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Step)
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// One full run; records stay in memory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (sigma, _) = resolve_sigma(cfg)?;
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    let (train, eval) = data.split(cfg.eval_fraction, cfg.seed)?;
    if train.is_empty() {
        return Err(HarnessError::config("training split is empty"));
    }
    let (model, spec) = build_model(cfg, &data)?;
    let mut privacy = PrivacyConfig::new(cfg.privacy.clip, sigma, cfg.q, train.len(), cfg.privacy.delta)?;
    privacy.noise_placement = cfg.privacy.noise_placement;
    let opt = cfg.optimizer.to_core();
    let mut state = TrainState::new(init_model(&spec)?, &privacy, cfg.seed)?;
    if let Some(eps) = cfg.privacy.epsilon {
        state = state.with_budget(eps);
    }

    let hash = cfg.hash();
    let method = opt.method.name();
    let spe = steps_per_epoch(cfg.q);
    let steps = cfg.epochs as u64 * spe;
    let clip = cfg.privacy.clip;
    let mut records = Vec::new();
    let mut epoch_bias: Vec<Vec<f64>> = vec![Vec::new(); cfg.epochs];

    for t in 0..steps {
        let epoch = (t / spe) as usize;
        let idx = state.sample_batch(train.len(), cfg.q)?;
        let xb = train.x.select_rows(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
        let instrument = t % cfg.instrument_every == 0;

        let probe = if instrument && !idx.is_empty() {
            let theta = state.theta.values();
            Some((per_sample_grads(&model, theta, &xb, &yb)?, state.prev_priv().map(<[f64]>::to_vec)))
        } else {
            None
        };

        let started = Instant::now();
        let report = step(&mut state, &model, &xb, &yb, &opt, &privacy)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;

        if !instrument {
            continue;
        }
        let mut rec = MetricRecord::blank(RecordKind::Step, cfg.seed, &hash, method);
        rec.step = t;
        rec.epoch = epoch;
        rec.batch_size = idx.len();
        rec.sigma = sigma;
        rec.lambda = report.lambda;
        rec.epsilon = report.epsilon;
        rec.over_budget = report.over_budget;
        rec.flagged_samples = report.flagged;
        rec.empty_batch = idx.is_empty();
        rec.wall_ms = cfg.timing.then_some(wall_ms);
        if !eval.is_empty() {
            rec.eval_accuracy = Some(model.accuracy(state.theta.values(), &eval.x, &eval.y)?);
        }
        if let Some((psg, prev)) = probe {
            let br = bias_vector(&psg, clip)?;
            rec.train_loss = Some(psg.mean_loss());
            rec.bias_norm = Some(br.bias_norm);
            rec.fraction_clipped = Some(br.fraction_clipped);
            rec.grad_norm_mean = Some(br.norms.mean);
            rec.grad_norm_max = Some(br.norms.max);
            epoch_bias[epoch].push(br.bias_norm);

            let dec = decompose(&psg, clip, &report.estimates.noise, privacy.expected_batch_size().max(1))?;
            rec.decomposition_degenerate = dec.degenerate;
            rec.a = dec.a;
            rec.c_norm = dec.c_norm();

            let cm = cosine_metrics(&psg, clip, prev.as_deref())?;
            rec.cos_prev_priv = Some(cm.prev_priv_vs_batch);
            rec.cos_prev_priv_degenerate = cm.prev_priv_degenerate;
            rec.cos_sample = Some(cm.sample_vs_batch);
            rec.cos_sample_degenerate = cm.sample_degenerate;
            rec.cos_clip = Some(cm.clip_vs_batch);
            rec.cos_clip_degenerate = cm.clip_degenerate;
        }
        records.push(rec);
    }

    let mut summary = MetricRecord::blank(RecordKind::Summary, cfg.seed, &hash, method);
    summary.step = steps;
    summary.epoch = cfg.epochs;
    summary.sigma = sigma;
    summary.lambda = opt.lambda.at(steps.saturating_sub(1));
    summary.epsilon = state.ledger().epsilon().0;
    summary.over_budget = cfg.privacy.epsilon.is_some_and(|e| summary.epsilon > e);
    summary.train_accuracy = Some(model.accuracy(state.theta.values(), &train.x, &train.y)?);
    if !eval.is_empty() {
        summary.eval_accuracy = Some(model.accuracy(state.theta.values(), &eval.x, &eval.y)?);
    }
    let per_epoch: Vec<f64> = epoch_bias.iter().filter_map(|b| mean(b.iter().copied())).collect();
    summary.bias_norm = mean(per_epoch.iter().copied());
    summary.epoch_bias_norm = Some(per_epoch);
    let steps_only = || records.iter().filter(|r: &&MetricRecord| r.kind == RecordKind::Step);
    summary.cos_clip = mean(steps_only().filter_map(|r| r.cos_clip));
    summary.fraction_clipped = mean(steps_only().filter_map(|r| r.fraction_clipped));
    summary.a = mean(steps_only().filter_map(|r| r.a));
    summary.c_norm = mean(steps_only().filter_map(|r| r.c_norm));
    summary.flagged_samples = steps_only().map(|r| r.flagged_samples).sum();
    records.push(summary);

    Ok(TrainOutcome { records, sigma, steps })
}

/// [`train`], then write every record to `out` as JSON lines.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let outcome = train(cfg)?;
    let mut w = MetricsWriter::create(out)?;
    for r in &outcome.records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub seed: u64,
    pub q: f64,
    pub sigma: f64,
    pub mean_bias_norm: f64,
    pub mean_cos_clip: f64,
}

/// Re-runs `base` once per (batch size, seed) with `q = batch / n_train`.
pub fn run_bias_sweep(base: &RunConfig, batch_sizes: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let data = load_dataset(&base.dataset, base.seed)?;
    let n_train = data.len() - (data.len() as f64 * base.eval_fraction).round() as usize;
    let mut rows = Vec::new();
    for &b in batch_sizes {
        if b == 0 || b > n_train {
            return Err(HarnessError::config(format!("batch size {b} not achievable with n = {n_train}")));
        }
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.q = b as f64 / n_train as f64;
            let out = train(&cfg)?;
            let s = out.summary();
            rows.push(SweepRow {
                batch_size: b,
                seed,
                q: cfg.q,
                sigma: out.sigma,
                mean_bias_norm: s.bias_norm.unwrap_or(f64::NAN),
                mean_cos_clip: s.cos_clip.unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

/// Averages sweep rows over seeds: `(batch, mean bias_norm, mean cos_clip)`.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(usize, f64, f64)> {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.batch_size).collect();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|b| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.batch_size == b).collect();
            let n = sel.len() as f64;
            (
                b,
                sel.iter().map(|r| r.mean_bias_norm).sum::<f64>() / n,
                sel.iter().map(|r| r.mean_cos_clip).sum::<f64>() / n,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub width: usize,
    pub input: usize,
    pub classes: usize,
    pub batch: usize,
    pub trials: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            width: 32,
            input: 16,
            classes: 10,
            batch: 32,
            trials: 10,
            repetitions: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub depth: usize,
    pub method: Method,
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub samples: usize,
}

/// Per-step wall time for each (depth, method). `depth` counts hidden layers.
/// Methods are interleaved trial by trial so drift hits all of them alike;
/// one warm-up step per method is discarded.
pub fn run_benchmark(depths: &[usize], methods: &[Method], bc: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    if depths.contains(&0) {
        return Err(HarnessError::config("depths must be >= 1"));
    }
    let (data, y, _) = blobs(bc.batch, bc.input, bc.classes, 2.0, bc.seed)?;
    let x = Tensor::new(vec![bc.batch, bc.input], data).map_err(HarnessError::from)?;
    let n = bc.batch * 100;
    let privacy = PrivacyConfig::new(1.0, 1.0, bc.batch as f64 / n as f64, n, 1e-5)?;
    let mut out = Vec::new();
    for &depth in depths {
        let mut widths = vec![bc.input];
        widths.extend(std::iter::repeat_n(bc.width, depth));
        widths.push(bc.classes);
        let spec = ModelSpec::new(widths, Activation::Relu, bc.seed);
        let model = make_loss(&spec, LossKind::CrossEntropySoftmax)?;
        let mut runs = Vec::new();
        for &m in methods {
            let opt = OptimizerConfig::new(m, 1e-3, Preset::Cifar10.lambda(m));
            let mut state = TrainState::new(init_model(&spec)?, &privacy, bc.seed)?;
            step(&mut state, &model, &x, &y, &opt, &privacy)?;
            runs.push((m, opt, state, Vec::with_capacity(bc.trials * bc.repetitions)));
        }
        for _ in 0..bc.trials {
            for (_, opt, state, times) in runs.iter_mut() {
                for _ in 0..bc.repetitions {
                    let t0 = Instant::now();
                    step(state, &model, &x, &y, opt, &privacy)?;
                    times.push(t0.elapsed().as_secs_f64() * 1e3);
                }
            }
        }
        for (m, _, _, times) in runs {
            let k = times.len() as f64;
            let mean_ms = times.iter().sum::<f64>() / k;
            let sd_ms = (times.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (k - 1.0).max(1.0)).sqrt();
            out.push(BenchmarkRow {
                depth,
                method: m,
                mean_ms,
                sd_ms,
                samples: times.len(),
            });
        }
    }
    Ok(out)
}
