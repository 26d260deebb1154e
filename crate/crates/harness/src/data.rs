//! Dataset loading: synthetic blobs and spirals, CSV with a `label` column,
//! and IDX image/label pairs.

use std::fs;
use std::path::{Path, PathBuf};

use biasdp::dp::{Purpose, RngStream};
use biasdp::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic unit-variance clusters. Centres sit at distance
    /// `separation` from the origin: on `±e_1` for two classes, on distinct
    /// axes when `classes <= dim`, on random directions otherwise.
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
    /// Interleaved 2-D spiral arms with Gaussian jitter.
    Spirals { n: usize, classes: usize, noise: f64 },
    /// `classes` defaults to `max label + 1`.
    Csv {
        path: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
    /// `classes` defaults to 10.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        classes: Option<usize>,
    },
}

/// Per-feature shift and scale applied at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub standardization: Standardization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.row_len()
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    /// Shuffled train / held-out split; `eval_fraction` of the rows go to
    /// the second part.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(Split, Split)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(HarnessError::config("eval_fraction must lie in [0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut RngStream::new(seed, 0, Purpose::Split).rng());
        let n_eval = (self.len() as f64 * eval_fraction).round() as usize;
        let (eval, train) = idx.split_at(n_eval);
        let mut train = train.to_vec();
        let mut eval = eval.to_vec();
        train.sort_unstable();
        eval.sort_unstable();
        let make = |ix: &[usize]| {
            let (x, y) = self.subset(ix);
            Split { x, y }
        };
        Ok((make(&train), make(&eval)))
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let (rows, y, classes) = match spec {
        DatasetSpec::Blobs {
            n,
            dim,
            classes,
            separation,
        } => blobs(*n, *dim, *classes, *separation, seed)?,
        DatasetSpec::Spirals { n, classes, noise } => spirals(*n, *classes, *noise, seed)?,
        DatasetSpec::Csv { path, classes } => {
            let (x, y, inferred) = read_csv(path)?;
            (x, y, classes.unwrap_or(inferred))
        }
        DatasetSpec::Idx {
            images,
            labels,
            subset,
            classes,
        } => {
            let (x, y, _) = read_idx_pair(images, labels, *subset)?;
            (x, y, classes.unwrap_or(10))
        }
    };
    finish(rows, y, classes)
}

fn finish(mut data: Vec<f64>, y: Vec<usize>, classes: usize) -> Result<Dataset> {
    let n = y.len();
    if n == 0 {
        return Err(HarnessError::config("dataset is empty"));
    }
    let d = data.len() / n;
    if let Some(bad) = y.iter().find(|&&c| c >= classes) {
        return Err(biasdp::Error::Contract(format!("label {bad} outside [0, {classes})")).into());
    }
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt();
        // constant columns are only centred
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    for row in data.chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, d], data)?,
        y,
        classes,
        standardization: Standardization { mean, std },
    })
}

type Raw = (Vec<f64>, Vec<usize>, usize);

fn check_synthetic(n: usize, classes: usize) -> Result<()> {
    if n == 0 || classes < 2 {
        return Err(HarnessError::config("synthetic data needs n >= 1 and at least 2 classes"));
    }
    Ok(())
}

pub fn blobs(n: usize, dim: usize, classes: usize, separation: f64, seed: u64) -> Result<Raw> {
    check_synthetic(n, classes)?;
    if dim == 0 {
        return Err(HarnessError::config("blobs need dim >= 1"));
    }
    let mut rng = RngStream::new(seed, 0, Purpose::Data).rng();
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if classes == 2 {
                c[0] = if k == 0 { -separation } else { separation };
            } else if classes <= dim {
                c[k] = separation;
            } else {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                c.iter_mut().zip(&dir).for_each(|(ci, di)| *ci = separation * di / norm);
            }
            c
        })
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for c in &centres[k] {
            data.push(c + rng.sample::<f64, _>(StandardNormal));
        }
        y.push(k);
    }
    Ok((data, y, classes))
}

pub fn spirals(n: usize, classes: usize, noise: f64, seed: u64) -> Result<Raw> {
    check_synthetic(n, classes)?;
    let mut rng = RngStream::new(seed, 0, Purpose::Data).rng();
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let t: f64 = rng.gen_range(0.0..1.0);
        let angle = 2.0 * std::f64::consts::PI * (k as f64 / classes as f64) + 3.0 * t;
        data.push(t * angle.cos() + noise * rng.sample::<f64, _>(StandardNormal));
        data.push(t * angle.sin() + noise * rng.sample::<f64, _>(StandardNormal));
        y.push(k);
    }
    Ok((data, y, classes))
}

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Header row required; the `label` column holds integer classes, every
/// other column is a feature. The class count is `max label + 1`.
pub fn read_csv(path: &Path) -> Result<Raw> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| parse_err(path, 0, "no `label` column in header"))?;
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_err(path, e)),
        }
        let offset = record.position().map_or(0, |p| p.byte());
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                let label = field
                    .parse::<usize>()
                    .map_err(|_| parse_err(path, offset, format!("label `{field}` is not a non-negative integer")))?;
                y.push(label);
            } else {
                let v = field
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, offset, format!("feature `{field}` is not a number")))?;
                data.push(v);
            }
        }
    }
    let classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Ok((data, y, classes))
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => parse_err(path, offset, format!("{other:?}")),
    }
}

/// Writes a dataset as CSV with features `x0..` and a trailing `label`.
pub fn write_csv(path: &Path, x: &Tensor, y: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (0..x.row_len()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, &label) in y.iter().enumerate() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// A parsed IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Magic: two zero bytes, type code (only `0x08`, unsigned byte), rank;
/// then one big-endian `u32` per dimension and the payload.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(path, bytes.len() as u64, "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(path, 0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(path, 2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(parse_err(path, 3, "rank must be at least 1"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(parse_err(path, bytes.len() as u64, "truncated dimension list"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() - header != count {
        return Err(parse_err(
            path,
            header as u64,
            format!("payload has {} bytes, dimensions require {count}", bytes.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Images are flattened per sample and scaled to `[0, 1]` before
/// standardisation; labels must be rank 1. The returned class count is
/// `max label + 1`.
pub fn read_idx_pair(images: &Path, labels: &Path, subset: Option<usize>) -> Result<Raw> {
    let read = |p: &Path| fs::read(p).map_err(|e| HarnessError::io(p, e));
    let img = parse_idx(&read(images)?, images)?;
    let lab = parse_idx(&read(labels)?, labels)?;
    if lab.dims.len() != 1 {
        return Err(parse_err(labels, 3, "label file must have rank 1"));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(parse_err(
            labels,
            4,
            format!("{} labels for {} images", lab.dims[0], img.dims[0]),
        ));
    }
    let n = subset.map_or(img.dims[0], |s| s.min(img.dims[0]));
    let per: usize = img.dims[1..].iter().product();
    let data = img.data[..n * per].iter().map(|&b| b as f64 / 255.0).collect();
    let y: Vec<usize> = lab.data[..n].iter().map(|&b| b as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1);
    Ok((data, y, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_standardised() {
        let spec = DatasetSpec::Blobs {
            n: 300,
            dim: 3,
            classes: 3,
            separation: 2.0,
        };
        let a = load_dataset(&spec, 4).unwrap();
        let b = load_dataset(&spec, 4).unwrap();
        assert_eq!(a.x, b.x);
        assert_ne!(a.x, load_dataset(&spec, 5).unwrap().x);
        for j in 0..3 {
            let col: Vec<f64> = (0..300).map(|i| a.x.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 300.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 300.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_partitions_rows() {
        let spec = DatasetSpec::Spirals {
            n: 100,
            classes: 3,
            noise: 0.05,
        };
        let ds = load_dataset(&spec, 1).unwrap();
        let (train, eval) = ds.split(0.2, 9).unwrap();
        assert_eq!((train.len(), eval.len()), (80, 20));
        assert!(ds.split(1.0, 9).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let p = Path::new("mem");
        let bytes = encode_idx(&[2, 3], &[1, 2, 3, 4, 5, 6]);
        let arr = parse_idx(&bytes, p).unwrap();
        assert_eq!(arr.dims, vec![2, 3]);
        match parse_idx(&bytes[..bytes.len() - 1], p).unwrap_err() {
            HarnessError::Parse { offset, .. } => assert_eq!(offset, 12),
            e => panic!("{e}"),
        }
        let mut bad = bytes.clone();
        bad[2] = 0x0D;
        assert!(matches!(parse_idx(&bad, p), Err(HarnessError::Parse { offset: 2, .. })));
    }
}
