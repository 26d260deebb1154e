//! Line-delimited metric records and their CSV export.
//!
//! Every line is one [`MetricRecord`]. Step records come from instrumented
//! steps; the last line is a summary record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub seed: u64,
    pub config_hash: String,
    pub method: String,
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub lambda: f64,
    /// Mean per-sample loss on the batch at the pre-step parameters.
    pub train_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    /// Summary only.
    pub train_accuracy: Option<f64>,
    pub bias_norm: Option<f64>,
    pub fraction_clipped: Option<f64>,
    pub grad_norm_mean: Option<f64>,
    pub grad_norm_max: Option<f64>,
    pub a: Option<f64>,
    pub c_norm: Option<f64>,
    pub cos_prev_priv: Option<f64>,
    pub cos_sample: Option<f64>,
    pub cos_clip: Option<f64>,
    pub epsilon: f64,
    pub wall_ms: Option<f64>,
    pub empty_batch: bool,
    pub decomposition_degenerate: bool,
    pub cos_prev_priv_degenerate: bool,
    pub cos_sample_degenerate: bool,
    pub cos_clip_degenerate: bool,
    pub flagged_samples: usize,
    pub over_budget: bool,
    /// Summary only: mean `bias_norm` of each epoch's instrumented steps.
    pub epoch_bias_norm: Option<Vec<f64>>,
}

impl MetricRecord {
    pub fn blank(kind: RecordKind, seed: u64, config_hash: &str, method: &str) -> Self {
        Self {
            kind,
            seed,
            config_hash: config_hash.to_string(),
            method: method.to_string(),
            step: 0,
            epoch: 0,
            batch_size: 0,
            sigma: 0.0,
            lambda: 0.0,
            train_loss: None,
            eval_accuracy: None,
            train_accuracy: None,
            bias_norm: None,
            fraction_clipped: None,
            grad_norm_mean: None,
            grad_norm_max: None,
            a: None,
            c_norm: None,
            cos_prev_priv: None,
            cos_sample: None,
            cos_clip: None,
            epsilon: 0.0,
            wall_ms: None,
            empty_batch: false,
            decomposition_degenerate: false,
            cos_prev_priv_degenerate: false,
            cos_sample_degenerate: false,
            cos_clip_degenerate: false,
            flagged_samples: 0,
            over_budget: false,
            epoch_bias_norm: None,
        }
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serialises");
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        let rec = serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            offset,
            message: e.to_string(),
        })?;
        out.push(rec);
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

const CSV_COLUMNS: [&str; 22] = [
    "kind",
    "seed",
    "config_hash",
    "method",
    "step",
    "epoch",
    "batch_size",
    "sigma",
    "lambda",
    "train_loss",
    "eval_accuracy",
    "bias_norm",
    "fraction_clipped",
    "grad_norm_mean",
    "a",
    "c_norm",
    "cos_prev_priv",
    "cos_sample",
    "cos_clip",
    "epsilon",
    "wall_ms",
    "flagged_samples",
];

/// Flat CSV of the scalar fields, one row per record; missing values are empty.
pub fn export_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let err = |e: csv::Error| HarnessError::Parse {
        path: path.to_path_buf(),
        offset: e.position().map_or(0, |p| p.byte()),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(CSV_COLUMNS).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in records {
        let kind = match r.kind {
            RecordKind::Step => "step",
            RecordKind::Summary => "summary",
        };
        w.write_record([
            kind.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.method.clone(),
            r.step.to_string(),
            r.epoch.to_string(),
            r.batch_size.to_string(),
            format!("{:?}", r.sigma),
            format!("{:?}", r.lambda),
            opt(r.train_loss),
            opt(r.eval_accuracy),
            opt(r.bias_norm),
            opt(r.fraction_clipped),
            opt(r.grad_norm_mean),
            opt(r.a),
            opt(r.c_norm),
            opt(r.cos_prev_priv),
            opt(r.cos_sample),
            opt(r.cos_clip),
            format!("{:?}", r.epsilon),
            opt(r.wall_ms),
            r.flagged_samples.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
