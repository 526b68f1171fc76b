//! Procedural datasets and a CSV loader.

use std::f64::consts::PI;
use std::path::PathBuf;

use ifso::ndtensor::{SeededRng, Tensor};
use ifso::net::Dataset;
use serde::{Deserialize, Serialize};

use crate::LabError;

const DATA_STREAM: u64 = 0xDA7A;
const SPLIT_STREAM: u64 = 0x5B17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// Gaussian clusters; class centers sit on a circle of radius 2 in the first two coordinates.
    Blobs { classes: usize, dim: usize, n: usize, spread: f64 },
    /// Two interleaved half circles.
    Moons { n: usize, noise: f64 },
    /// `[1, 8, 8]` images with one bar; the class is its orientation
    /// (0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal).
    Bars8x8 { n: usize, noise: f64 },
    /// Numeric CSV with a header row; every column but `label_column` is a feature.
    Csv { path: PathBuf, label_column: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of samples kept for training; the rest is the holdout split.
    #[serde(default = "default_split")]
    pub split_fraction: f64,
}

fn default_split() -> f64 {
    0.8
}

impl DatasetSpec {
    pub fn blobs(n: usize, spread: f64, seed: u64) -> Self {
        Self { kind: DatasetKind::Blobs { classes: 2, dim: 2, n, spread }, seed, split_fraction: default_split() }
    }

    pub fn bars(n: usize, noise: f64, seed: u64) -> Self {
        Self { kind: DatasetKind::Bars8x8 { n, noise }, seed, split_fraction: default_split() }
    }
}

fn blobs(classes: usize, dim: usize, n: usize, spread: f64, rng: &mut SeededRng) -> Result<Dataset, LabError> {
    if classes < 2 || dim < 2 || n == 0 || !(spread >= 0.0) {
        return Err(LabError::Invalid(format!(
            "blobs need classes ≥ 2, dim ≥ 2, n > 0, spread ≥ 0 (got {classes}, {dim}, {n}, {spread})"
        )));
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = 2.0 * PI * c as f64 / classes as f64;
        for k in 0..dim {
            let center = match k {
                0 => 2.0 * angle.cos(),
                1 => 2.0 * angle.sin(),
                _ => 0.0,
            };
            data.push(center + spread * rng.standard_normal());
        }
        labels.push(c);
    }
    Ok(Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)?)
}

fn moons(n: usize, noise: f64, rng: &mut SeededRng) -> Result<Dataset, LabError> {
    if n == 0 || !(noise >= 0.0) {
        return Err(LabError::Invalid("moons need n > 0 and noise ≥ 0".into()));
    }
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = PI * rng.uniform();
        let (x, y) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        data.push(x + noise * rng.standard_normal());
        data.push(y + noise * rng.standard_normal());
        labels.push(c);
    }
    Ok(Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)?)
}

fn bars(n: usize, noise: f64, rng: &mut SeededRng) -> Result<Dataset, LabError> {
    if n == 0 || !(noise >= 0.0) {
        return Err(LabError::Invalid("bars8x8 need n > 0 and noise ≥ 0".into()));
    }
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 4;
        let mut img = [0.0f64; 64];
        let pos = rng.index(8) as isize;
        let offset = rng.index(5) as isize - 2;
        for (r, row) in img.chunks_mut(8).enumerate() {
            for (col, px) in row.iter_mut().enumerate() {
                let (r, col) = (r as isize, col as isize);
                let on = match c {
                    0 => r == pos,
                    1 => col == pos,
                    2 => col - r == offset,
                    _ => col + r == 7 + offset,
                };
                *px = if on { 1.0 } else { 0.0 } + noise * rng.standard_normal();
            }
        }
        data.extend_from_slice(&img);
        labels.push(c);
    }
    Ok(Dataset::new(Tensor::new(vec![n, 1, 8, 8], data)?, labels, 4)?)
}

fn load_csv(path: &PathBuf, label_column: &str) -> Result<Dataset, LabError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| LabError::Invalid(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| LabError::Invalid(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| LabError::Invalid(format!("no column named {label_column:?} in {}", path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LabError::Invalid(format!("row {}: {e}", row + 1)))?;
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                let label: usize = field
                    .trim()
                    .parse()
                    .map_err(|_| LabError::Invalid(format!("row {}: label {field:?} is not a class index", row + 1)))?;
                labels.push(label);
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| LabError::Invalid(format!("row {}: {field:?} is not a number", row + 1)))?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(LabError::Invalid(format!("{} has no rows", path.display())));
    }
    let dim = headers.len() - 1;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes)?)
}

/// The whole dataset described by `spec`, before splitting.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, LabError> {
    let mut rng = SeededRng::new(spec.seed).split(DATA_STREAM);
    match &spec.kind {
        DatasetKind::Blobs { classes, dim, n, spread } => blobs(*classes, *dim, *n, *spread, &mut rng),
        DatasetKind::Moons { n, noise } => moons(*n, *noise, &mut rng),
        DatasetKind::Bars8x8 { n, noise } => bars(*n, *noise, &mut rng),
        DatasetKind::Csv { path, label_column } => load_csv(path, label_column),
    }
}

/// Disjoint `(train, holdout)` splits.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset), LabError> {
    let all = generate(spec)?;
    let mut rng = SeededRng::new(spec.seed).split(SPLIT_STREAM);
    Ok(all.split(spec.split_fraction, &mut rng)?)
}

/// FNV-1a over the little-endian bytes of inputs then labels.
pub fn checksum(data: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for v in data.inputs.data() {
        eat(&v.to_le_bytes());
    }
    for &l in &data.labels {
        eat(&(l as u64).to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_reproducible_and_balanced() {
        let spec = DatasetSpec::blobs(100, 0.5, 42);
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 50);
        let zero = generate(&DatasetSpec::blobs(10, 0.0, 1)).unwrap();
        assert_eq!(&zero.inputs.data()[..2], &[2.0, 0.0]);
        assert_eq!(&zero.inputs.data()[2..4], &[-2.0, 2.0 * PI.sin()]);
    }

    #[test]
    fn bars_have_one_bar_per_image() {
        let d = generate(&DatasetSpec::bars(8, 0.0, 3)).unwrap();
        assert_eq!(d.inputs.shape(), &[8, 1, 8, 8]);
        for (img, &label) in d.inputs.data().chunks(64).zip(&d.labels) {
            let lit = img.iter().filter(|&&v| v == 1.0).count();
            match label {
                0 | 1 => assert_eq!(lit, 8),
                _ => assert!((6..=8).contains(&lit)),
            }
        }
    }

    #[test]
    fn split_is_disjoint() {
        let spec = DatasetSpec::blobs(50, 1.0, 5);
        let (train, hold) = gen_dataset(&spec).unwrap();
        assert_eq!(train.len() + hold.len(), 50);
        assert_eq!(train.len(), 40);
        let all = generate(&spec).unwrap();
        let rows = |d: &Dataset| -> Vec<Vec<u64>> { d.inputs.data().chunks(2).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect() };
        let mut joined = rows(&train);
        joined.extend(rows(&hold));
        joined.sort();
        let mut expect = rows(&all);
        expect.sort();
        assert_eq!(joined, expect);
    }

    #[test]
    fn csv_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,label,b\n1.0,0,2.0\n-1,1,0.5\n").unwrap();
        let spec = DatasetSpec { kind: DatasetKind::Csv { path: p.clone(), label_column: "label".into() }, seed: 0, split_fraction: 0.5 };
        let d = generate(&spec).unwrap();
        assert_eq!(d.inputs.data(), &[1.0, 2.0, -1.0, 0.5]);
        assert_eq!(d.labels, vec![0, 1]);
        std::fs::write(&p, "a,label\nx,0\n").unwrap();
        assert!(generate(&spec).is_err());
        let bad = DatasetSpec { kind: DatasetKind::Csv { path: p, label_column: "nope".into() }, seed: 0, split_fraction: 0.5 };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn spec_json_is_flat_and_strict() {
        let spec: DatasetSpec = serde_json::from_str(r#"{"kind": "moons", "n": 10, "noise": 0.1, "seed": 4}"#).unwrap();
        assert_eq!(spec, DatasetSpec { kind: DatasetKind::Moons { n: 10, noise: 0.1 }, seed: 4, split_fraction: 0.8 });
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"kind": "moons", "n": 10, "noise": 0.1, "nosie": 1}"#).is_err());
    }
}
