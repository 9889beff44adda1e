//! Datasets, client partitioning and file loaders.
//!
//! Delimited text format: a header line `rows cols label_col` (whitespace or
//! comma separated), then `rows` lines of `cols` comma-separated numbers. The
//! column at `label_col` (0-based) is the label; all other columns are
//! features, in order. MNIST IDX files are supported read-only.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::numerics::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Row-major feature matrix with one label (class ±1 or real target) per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

/// One client's local data. Always non-empty.
pub type ClientDataset = Dataset;

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(DataError::Invalid("feature dimension must be >= 1".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite value".into()));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, features, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Largest squared feature norm, `max_i ‖a_i‖²`.
    pub fn max_row_norm_sqr(&self) -> f64 {
        (0..self.len()).map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max)
    }
}

/// Sorted distinct labels.
fn classes(data: &Dataset) -> Vec<f64> {
    let mut c = data.labels.clone();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Label-skewed split: client c receives samples of class `classes[c mod C]`
/// only. All clients get the same size, the largest that every class can
/// supply; remainders are dropped.
pub fn partition_label_skewed(data: &Dataset, clients: usize, rng: &mut RngStream) -> Result<Vec<ClientDataset>> {
    if clients == 0 {
        return Err(DataError::Invalid("need at least one client".into()));
    }
    let classes = classes(data);
    let mut pools: Vec<Vec<usize>> =
        classes.iter().map(|&c| (0..data.len()).filter(|&i| data.labels[i] == c).collect()).collect();
    for p in pools.iter_mut() {
        p.shuffle(rng);
    }
    let used = classes.len().min(clients);
    let size = (0..used)
        .map(|j| {
            let sharing = (0..clients).filter(|c| c % classes.len() == j).count();
            pools[j].len() / sharing
        })
        .min()
        .unwrap_or(0);
    if size == 0 {
        return Err(DataError::Invalid(format!(
            "{} samples in {} classes cannot be split into {clients} non-empty single-class clients",
            data.len(),
            classes.len()
        )));
    }
    let mut taken = vec![0usize; classes.len()];
    Ok((0..clients)
        .map(|c| {
            let j = c % classes.len();
            let idx = &pools[j][taken[j]..taken[j] + size];
            taken[j] += size;
            data.subset(idx)
        })
        .collect())
}

/// Uniformly shuffled equal-size split (remainder dropped).
pub fn partition_iid(data: &Dataset, clients: usize, rng: &mut RngStream) -> Result<Vec<ClientDataset>> {
    if clients == 0 || data.len() < clients {
        return Err(DataError::Invalid(format!("{} samples cannot fill {clients} clients", data.len())));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let size = data.len() / clients;
    Ok(idx.chunks_exact(size).take(clients).map(|c| data.subset(c)).collect())
}

/// Binary task with labels `sign(w_true · a)`, `a ~ N(0, I/d)`, and a
/// fraction of labels flipped.
#[derive(Debug, Clone)]
pub struct SyntheticBinaryTask {
    w_true: Vec<f64>,
    label_noise: f64,
}

impl SyntheticBinaryTask {
    pub fn new(dim: usize, label_noise: f64, rng: &mut RngStream) -> Self {
        Self { w_true: (0..dim).map(|_| rng.standard_normal()).collect(), label_noise }
    }

    pub fn dim(&self) -> usize {
        self.w_true.len()
    }

    /// `samples` rows, exactly half in each class (before label noise).
    pub fn sample(&self, samples: usize, rng: &mut RngStream) -> Dataset {
        let d = self.dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut quota = [samples / 2, samples - samples / 2];
        let mut features = Vec::with_capacity(samples * d);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut a: Vec<f64> = (0..d).map(|_| rng.standard_normal() * scale).collect();
            let score: f64 = a.iter().zip(&self.w_true).map(|(x, w)| x * w).sum();
            let mut positive = score >= 0.0;
            let class = usize::from(positive);
            if quota[class] == 0 {
                a.iter_mut().for_each(|v| *v = -*v);
                positive = !positive;
            }
            quota[usize::from(positive)] -= 1;
            let flip = rand::Rng::random::<f64>(rng) < self.label_noise;
            labels.push(if positive != flip { 1.0 } else { -1.0 });
            features.extend(a);
        }
        Dataset { dim: d, features, labels }
    }
}

/// Linear regression data `b = a · w_true + noise`, `a ~ N(0, I)`.
pub fn synthetic_regression(samples: usize, w_true: &[f64], noise_std: f64, rng: &mut RngStream) -> Dataset {
    let d = w_true.len();
    let mut features = Vec::with_capacity(samples * d);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let a: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        labels.push(a.iter().zip(w_true).map(|(x, w)| x * w).sum::<f64>() + noise_std * rng.standard_normal());
        features.extend(a);
    }
    Dataset { dim: d, features, labels }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn split_fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty())
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| DataError::Parse(format!("line {line}: cannot parse {s:?}")))
}

/// Parse the delimited text format described in the module docs.
pub fn parse_delimited(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| DataError::Parse("empty file".into()))?;
    let head: Vec<usize> = split_fields(header).map(|s| parse_num(s, 1)).collect::<Result<_>>()?;
    let [rows, cols, label_col] = head[..] else {
        return Err(DataError::Parse("header must be `rows cols label_col`".into()));
    };
    if cols < 2 || label_col >= cols {
        return Err(DataError::Parse(format!("need cols >= 2 and label_col < cols, got {cols}, {label_col}")));
    }
    let mut features = Vec::with_capacity(rows * (cols - 1));
    let mut labels = Vec::with_capacity(rows);
    for (n, line) in lines {
        let vals: Vec<f64> = split_fields(line).map(|s| parse_num(s, n + 1)).collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(DataError::Parse(format!("line {}: expected {cols} values, got {}", n + 1, vals.len())));
        }
        labels.push(vals[label_col]);
        features.extend(vals.iter().enumerate().filter(|(j, _)| *j != label_col).map(|(_, v)| v));
    }
    if labels.len() != rows {
        return Err(DataError::Parse(format!("header declares {rows} rows, found {}", labels.len())));
    }
    Dataset::new(cols - 1, features, labels)
}

pub fn load_delimited(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| DataError::Parse(e.to_string()))?;
    parse_delimited(&text)
}

/// Unsigned-byte IDX payload: dimensions and raw bytes.
fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::Parse("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(DataError::Parse(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let body = 4 + 4 * ndim;
    if bytes.len() < body {
        return Err(DataError::Parse("truncated IDX header".into()));
    }
    let dims: Vec<usize> =
        bytes[4..body].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let total: usize = dims.iter().product();
    if bytes.len() != body + total {
        return Err(DataError::Parse(format!("IDX body has {} bytes, expected {total}", bytes.len() - body)));
    }
    Ok((dims, &bytes[body..]))
}

/// MNIST images and labels as an even-vs-odd task: pixels scaled to [0, 1],
/// label +1 for even digits and −1 for odd.
pub fn parse_mnist_even_odd(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images)?;
    let (ldims, digits) = parse_idx(labels)?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(DataError::Parse(format!("image dims {idims:?} do not match label dims {ldims:?}")));
    }
    let dim = idims[1] * idims[2];
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = digits.iter().map(|&d| if d % 2 == 0 { 1.0 } else { -1.0 }).collect();
    Dataset::new(dim, features, labels)
}

pub fn load_mnist_even_odd(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_mnist_even_odd(&read(images)?, &read(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(mut v: Vec<Vec<u64>>) -> Vec<Vec<u64>> {
        v.sort();
        v
    }

    fn rows_bits(d: &Dataset) -> Vec<Vec<u64>> {
        (0..d.len())
            .map(|i| d.row(i).iter().chain(std::iter::once(&d.label(i))).map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn two_class_two_clients() {
        let data = Dataset::new(1, vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let parts = partition_label_skewed(&data, 2, &mut RngStream::new(0, 0)).unwrap();
        assert!(parts[0].labels().iter().all(|&l| l == -1.0));
        assert!(parts[1].labels().iter().all(|&l| l == 1.0));
        assert_eq!(parts[0].len(), 2);
    }

    #[test]
    fn twenty_clients_of_five_hundred() {
        let mut rng = RngStream::new(1, 0);
        let task = SyntheticBinaryTask::new(8, 0.0, &mut rng);
        let data = task.sample(10_000, &mut rng);
        let parts = partition_label_skewed(&data, 20, &mut rng).unwrap();
        assert_eq!(parts.len(), 20);
        for (c, p) in parts.iter().enumerate() {
            assert_eq!(p.len(), 500);
            let first = p.label(0);
            assert!(p.labels().iter().all(|&l| l == first));
            assert_eq!(first, if c % 2 == 0 { -1.0 } else { 1.0 });
        }
        let union = parts.iter().flat_map(rows_bits).collect();
        assert_eq!(sorted(union), sorted(rows_bits(&data)));
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let data = Dataset::new(1, vec![1.0, 2.0], vec![1.0, -1.0]).unwrap();
        assert!(partition_label_skewed(&data, 4, &mut RngStream::new(0, 0)).is_err());
        assert!(partition_iid(&data, 3, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn iid_partition_conserves_rows() {
        let mut rng = RngStream::new(2, 0);
        let data = synthetic_regression(40, &[1.0, -2.0], 0.1, &mut rng);
        let parts = partition_iid(&data, 4, &mut rng).unwrap();
        assert!(parts.iter().all(|p| p.len() == 10));
        let union = parts.iter().flat_map(rows_bits).collect();
        assert_eq!(sorted(union), sorted(rows_bits(&data)));
    }

    #[test]
    fn synthetic_task_is_balanced_and_mostly_separable() {
        let mut rng = RngStream::new(3, 0);
        let task = SyntheticBinaryTask::new(32, 0.0, &mut rng);
        let data = task.sample(1001, &mut rng);
        let pos = data.labels().iter().filter(|&&l| l > 0.0).count();
        assert_eq!(pos, 501);
        for i in 0..data.len() {
            let s: f64 = data.row(i).iter().zip(&task.w_true).map(|(a, w)| a * w).sum();
            assert!(s * data.label(i) >= 0.0);
        }
    }

    #[test]
    fn delimited_round_trip_and_errors() {
        let d = parse_delimited("3 3 0\n1,0.5,2\n-1, 1.5, 3\n1 2.5 4\n").unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels(), &[1.0, -1.0, 1.0]);
        assert_eq!(d.row(1), &[1.5, 3.0]);
        assert!(parse_delimited("").is_err());
        assert!(parse_delimited("2 3 0\n1,2,3\n").is_err());
        assert!(parse_delimited("1 3 3\n1,2,3\n").is_err());
        assert!(parse_delimited("1 3 0\n1,x,3\n").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "2 2 1\n0.25,1\n0.75,-1\n").unwrap();
        let d = load_delimited(&path).unwrap();
        assert_eq!(d.row(1), &[0.75]);
        assert!(load_delimited(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn mnist_idx_parse() {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        images.extend([0, 255, 51, 0]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 4, 7];
        let d = parse_mnist_even_odd(&images, &labels).unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.row(0), &[0.0, 1.0]);
        assert!((d.row(1)[0] - 0.2).abs() < 1e-15);
        assert_eq!(d.labels(), &[1.0, -1.0]);
        assert!(parse_mnist_even_odd(&images[..10], &labels).is_err());
        let mut bad = labels.clone();
        bad[2] = 0x0d;
        assert!(parse_mnist_even_odd(&images, &bad).is_err());
    }
}
