//! Binary classification datasets: a seeded Gaussian generator and a loader
//! for the CIFAR-10 binary batch format restricted to classes 0 and 1.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Bytes per CIFAR-10 record: one label byte and 32x32x3 pixels.
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("synthetic generator needs an even sample count, got {0}")]
    OddCount(usize),
    #[error("input dimension must be at least 1")]
    ZeroDim,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: size {size} is not a multiple of {CIFAR_RECORD}-byte records")]
    Format { path: String, size: usize },
    #[error("need {needed} records with labels 0/1 but found {found}")]
    Insufficient { needed: usize, found: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// One sample per row.
    pub inputs: Array2<f64>,
    /// Labels stored as 0.0 or 1.0.
    pub labels: Array1<f64>,
}

impl Dataset {
    /// Checks finiteness, 0/1 labels, `n >= 2` and that both classes occur.
    pub fn new(name: impl Into<String>, inputs: Array2<f64>, labels: Array1<f64>) -> Result<Self, DataError> {
        let n = inputs.nrows();
        if labels.len() != n {
            return Err(DataError::Invalid(format!("{} labels for {n} samples", labels.len())));
        }
        if n < 2 {
            return Err(DataError::Invalid(format!("need at least 2 samples, got {n}")));
        }
        if inputs.ncols() == 0 {
            return Err(DataError::ZeroDim);
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature".into()));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(DataError::Invalid("labels must be 0 or 1".into()));
        }
        let ones = labels.iter().filter(|&&y| y == 1.0).count();
        if ones == 0 || ones == n {
            return Err(DataError::Invalid("both classes must be present".into()));
        }
        Ok(Dataset { name: name.into(), inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d0(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn x(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    /// Rows `indices` as a new dataset. The class invariant is not re-checked,
    /// so small probe subsets are allowed.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select(Axis(0), indices),
            labels: self.labels.select(Axis(0), indices),
        }
    }

    /// CSV with header `label,f0,f1,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.d0()).map(|j| format!("f{j}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (row, y) in self.inputs.rows().into_iter().zip(&self.labels) {
            write!(out, "{}", *y as u8)?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Two unit-covariance Gaussian classes with means `±(separation/2) e_1`,
/// labels alternating `0, 1, 0, ...`, rescaled so the feature matrix has
/// root-mean-square 1.
pub fn gen_synthetic(n: usize, d0: usize, separation: f64, seed: u64) -> Result<Dataset, DataError> {
    if n % 2 == 1 {
        return Err(DataError::OddCount(n));
    }
    if d0 == 0 {
        return Err(DataError::ZeroDim);
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::Invalid(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::<f64>::zeros((n, d0));
    let labels = Array1::from_shape_fn(n, |i| (i % 2) as f64);
    for (i, mut row) in inputs.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let sign = if labels[i] == 1.0 { 1.0 } else { -1.0 };
        row[0] += sign * separation / 2.0;
    }
    let rms = (inputs.iter().map(|v| v * v).sum::<f64>() / (n * d0).max(1) as f64).sqrt();
    if rms > 0.0 {
        inputs.mapv_inplace(|v| v / rms);
    }
    Dataset::new(format!("synthetic(sep={separation},seed={seed})"), inputs, labels)
}

/// Generates `n_train + n_test` samples in one draw and splits them, so both
/// halves share the normalization.
pub fn synthetic_split(
    n_train: usize,
    n_test: usize,
    d0: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if n_train % 2 == 1 || n_test % 2 == 1 {
        return Err(DataError::OddCount(if n_train % 2 == 1 { n_train } else { n_test }));
    }
    let all = gen_synthetic(n_train + n_test, d0, separation, seed)?;
    let train = Dataset::new(
        format!("{}/train", all.name),
        all.inputs.slice(s![..n_train, ..]).to_owned(),
        all.labels.slice(s![..n_train]).to_owned(),
    )?;
    let test = Dataset::new(
        format!("{}/test", all.name),
        all.inputs.slice(s![n_train.., ..]).to_owned(),
        all.labels.slice(s![n_train..]).to_owned(),
    )?;
    Ok((train, test))
}

/// Records with label 0 or 1 from a CIFAR-10 binary buffer, pixels in `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8], origin: &str) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::Format { path: origin.to_string(), size: bytes.len() });
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 1 {
            continue;
        }
        labels.push(rec[0] as f64);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn batch_files(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a CIFAR-10 batch file (or a directory of `*.bin` batches), keeps
/// classes 0 and 1, and splits the first `n_train` and next `n_test` records.
pub fn load_cifar2(path: &Path, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset), DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in batch_files(path)? {
        let bytes = fs::read(&file).map_err(|source| DataError::Io { path: file.display().to_string(), source })?;
        let (p, l) = parse_cifar_records(&bytes, &file.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
        if labels.len() >= n_train + n_test {
            break;
        }
    }
    let needed = n_train + n_test;
    if labels.len() < needed {
        return Err(DataError::Insufficient { needed, found: labels.len() });
    }
    let take = |from: usize, count: usize, tag: &str| {
        let x = Array2::from_shape_vec((count, CIFAR_PIXELS), pixels[from * CIFAR_PIXELS..(from + count) * CIFAR_PIXELS].to_vec())
            .expect("record-aligned buffer");
        let y = Array1::from(labels[from..from + count].to_vec());
        Dataset::new(format!("cifar2/{tag}"), x, y)
    };
    Ok((take(0, n_train, "train")?, take(n_train, n_test, "test")?))
}

/// Index batches for one epoch. A full batch comes back in natural order;
/// otherwise the indices are a permutation seeded by `(seed, epoch)`.
pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    batch_indices(ds.len(), batch_size, seed, epoch)
}

pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1 && batch_size <= n.max(1), "batch size {batch_size} out of range for n = {n}");
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size < n {
        let mixed = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_is_deterministic_and_normalized() {
        let a = gen_synthetic(256, 20, 3.0, 1).unwrap();
        let b = gen_synthetic(256, 20, 3.0, 1).unwrap();
        assert_eq!(a, b);
        let ms = a.inputs.iter().map(|v| v * v).sum::<f64>() / (256.0 * 20.0);
        assert!((ms - 1.0).abs() < 1e-12);
        assert_eq!(a.labels.iter().filter(|&&y| y == 1.0).count(), 128);
    }

    #[test]
    fn zero_separation_has_no_planted_mean_gap() {
        let ds = gen_synthetic(4, 2, 0.0, 7).unwrap();
        assert_eq!(ds.len(), 4);
        let big = gen_synthetic(4000, 2, 0.0, 7).unwrap();
        let mean = |cls: f64| {
            let rows: Vec<f64> = (0..big.len()).filter(|&i| big.labels[i] == cls).map(|i| big.inputs[[i, 0]]).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        assert!((mean(1.0) - mean(0.0)).abs() < 0.15);
    }

    #[test]
    fn threshold_on_first_feature_separates_classes() {
        let ds = gen_synthetic(256, 20, 3.0, 1).unwrap();
        let correct = (0..ds.len()).filter(|&i| (ds.inputs[[i, 0]] > 0.0) == (ds.labels[i] == 1.0)).count();
        assert!(correct as f64 / 256.0 > 0.9, "accuracy {correct}/256");
    }

    #[test]
    fn odd_count_rejected() {
        assert!(matches!(gen_synthetic(5, 2, 1.0, 0), Err(DataError::OddCount(5))));
    }

    #[test]
    fn split_shares_one_draw() {
        let (tr, te) = synthetic_split(10, 6, 3, 2.0, 4).unwrap();
        let all = gen_synthetic(16, 3, 2.0, 4).unwrap();
        assert_eq!(tr.inputs, all.inputs.slice(s![..10, ..]));
        assert_eq!(te.labels, all.labels.slice(s![10..]));
    }

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn cifar_filters_other_classes() {
        let bytes: Vec<u8> = [record(0, 10), record(7, 20), record(1, 255)].concat();
        let (pixels, labels) = parse_cifar_records(&bytes, "mem").unwrap();
        assert_eq!(labels, vec![0.0, 1.0]);
        assert_eq!(pixels.len(), 2 * CIFAR_PIXELS);
        assert!(pixels[CIFAR_PIXELS..].iter().all(|&p| p == 1.0));
    }

    #[test]
    fn cifar_rejects_truncated_file() {
        let bytes = vec![0u8; CIFAR_RECORD + 5];
        assert!(matches!(parse_cifar_records(&bytes, "x"), Err(DataError::Format { .. })));
    }

    #[test]
    fn cifar_loader_reads_directories() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = [record(0, 1), record(1, 2), record(3, 3), record(1, 4), record(0, 5)].concat();
        fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let (tr, te) = load_cifar2(dir.path(), 2, 2).unwrap();
        assert_eq!(tr.labels.to_vec(), vec![0.0, 1.0]);
        assert_eq!(te.labels.to_vec(), vec![1.0, 0.0]);
        assert_eq!(tr.d0(), CIFAR_PIXELS);
        assert!(matches!(load_cifar2(dir.path(), 3, 2), Err(DataError::Insufficient { needed: 5, found: 4 })));
    }

    #[test]
    fn cifar_empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("empty.bin");
        fs::write(&f, b"").unwrap();
        assert!(load_cifar2(&f, 0, 0).is_err());
    }

    #[test]
    fn full_batch_is_natural_order() {
        assert_eq!(batch_indices(5, 5, 9, 3), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(batch_indices(4, 2, 1, 0), batch_indices(4, 2, 1, 0));
    }

    #[test]
    fn csv_export_has_header() {
        let ds = gen_synthetic(2, 2, 1.0, 0).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("label,f0,f1\n0,"));
        assert_eq!(text.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 1usize..=64, frac in 0.0f64..1.0, seed in any::<u64>(), epoch in 0u64..5) {
            let bs = 1 + ((n - 1) as f64 * frac) as usize;
            let batches = batch_indices(n, bs, seed, epoch);
            prop_assert_eq!(batches.len(), n.div_ceil(bs));
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn generated_datasets_satisfy_invariants(half in 1usize..40, d0 in 1usize..6, sep in 0.0f64..5.0, seed in any::<u64>()) {
            let ds = gen_synthetic(2 * half, d0, sep, seed).unwrap();
            prop_assert!(Dataset::new("check", ds.inputs.clone(), ds.labels.clone()).is_ok());
        }
    }
}
