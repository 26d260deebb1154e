use std::path::PathBuf;
use std::process::ExitCode;

use biasdp::accountant::{calibrate_sigma, default_orders};
use biasdp::optim::{Method, Schedule};
use biasdp_harness::config::RunConfig;
use biasdp_harness::metrics::export_csv;
use biasdp_harness::run::{run_benchmark, run_bias_sweep, run_train, steps_per_epoch, sweep_means, BenchmarkConfig};
use biasdp_harness::verify::run_verify;
use biasdp_harness::{HarnessError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biasdp", version, about = "Differentially private training with bias-aware minimisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write line-delimited metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also write a CSV export next to the metrics.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-step wall time across MLP depths and methods.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "dp_sgd,dp_sat,bam_sam,bam_exact")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean bias norm and clipped/unclipped alignment per batch size.
    BiasSweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,128,512")]
        batch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Smallest noise multiplier meeting a target budget.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long, conflicts_with = "epochs")]
        steps: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Run the derivative, accountant and decomposition oracles.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, conflicts_with = "sigma")]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, conflicts_with_all = ["epsilon"])]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "instrument-every")]
    instrument_every: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(m) = &self.method {
            cfg.optimizer.method = Method::parse(m)?;
        }
        if let Some(e) = self.epsilon {
            cfg.privacy.epsilon = Some(e);
            cfg.privacy.sigma = None;
        }
        if let Some(s) = self.sigma {
            cfg.privacy.sigma = Some(s);
            cfg.privacy.epsilon = None;
        }
        if let Some(d) = self.delta {
            cfg.privacy.delta = d;
        }
        if let Some(l) = self.lambda {
            cfg.optimizer.lambda = Schedule::Constant(l);
        }
        if let Some(c) = self.clip {
            cfg.privacy.clip = c;
        }
        if let Some(q) = self.q {
            cfg.q = q;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(k) = self.instrument_every {
            cfg.instrument_every = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(path: &Option<PathBuf>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| HarnessError::Io {
            path: p.clone(),
            source: e,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { run, csv } => {
            let cfg = run.resolve()?;
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("metrics.jsonl"));
            let outcome = run_train(&cfg, &out)?;
            if let Some(p) = csv {
                export_csv(&outcome.records, &p)?;
            }
            let s = outcome.summary();
            println!(
                "{} steps, sigma {:.4}, epsilon {:.4}, eval accuracy {}, mean bias norm {}",
                outcome.steps,
                outcome.sigma,
                s.epsilon,
                s.eval_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                s.bias_norm.map_or("-".into(), |b| format!("{b:.4e}")),
            );
            Ok(true)
        }
        Command::Benchmark {
            depths,
            methods,
            width,
            batch,
            seed,
            out,
        } => {
            let methods = methods.iter().map(|m| Method::parse(m)).collect::<biasdp::Result<Vec<_>>>()?;
            let bc = BenchmarkConfig {
                width,
                batch,
                seed,
                ..Default::default()
            };
            let rows = run_benchmark(&depths, &methods, &bc)?;
            for r in &rows {
                eprintln!("depth {:>3} {:<10} {:>9.3} ± {:.3} ms", r.depth, r.method, r.mean_ms, r.sd_ms);
            }
            write_json(&out, &rows)?;
            Ok(true)
        }
        Command::BiasSweep {
            run,
            batch_sizes,
            seeds,
        } => {
            let cfg = run.resolve()?;
            let rows = run_bias_sweep(&cfg, &batch_sizes, &seeds)?;
            for (b, bias, cos) in sweep_means(&rows) {
                eprintln!("batch {b:>5}: bias norm {bias:.4e}, cos(clip, plain) {cos:.4}");
            }
            write_json(&cfg.out, &rows)?;
            Ok(true)
        }
        Command::Calibrate {
            epsilon,
            delta,
            q,
            steps,
            epochs,
        } => {
            let steps = match (steps, epochs) {
                (Some(s), _) => s,
                (None, Some(e)) => e * steps_per_epoch(q),
                (None, None) => return Err(HarnessError::Config("give --steps or --epochs".into())),
            };
            let cal = calibrate_sigma(epsilon, delta, q, steps, &default_orders())?;
            println!(
                "sigma {:.6} gives epsilon {:.6} at order {} over {steps} steps ({} bisection iterations)",
                cal.sigma, cal.epsilon, cal.order, cal.iterations
            );
            Ok(true)
        }
        Command::Verify { seed } => {
            let checks = run_verify(seed)?;
            let mut ok = true;
            for c in &checks {
                println!("{} {:<40} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
