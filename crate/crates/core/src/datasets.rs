//! Tabular data for the logistic-regression experiments: CSV ingestion,
//! preprocessing, partitioning across nodes and synthetic generators.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graphs::Graph;
use crate::io::{fmt_full, write_atomic};
use crate::rng::{derive_seed, stream_rng, streams};

/// Standard deviations below this zero the column instead of dividing.
pub const STD_GUARD: f64 = 1e-12;

/// Numeric table as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    /// `m x d`, one sample per row.
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
}

/// Reads a headed CSV of numbers; `label_column` names the target.
pub fn load_csv(path: &Path, label_column: &str) -> Result<RawTable> {
    let file = std::fs::File::open(path)?;
    parse_csv(file, label_column)
}

pub fn parse_csv(reader: impl Read, label_column: &str) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| invalid(format!("label column {label_column:?} not found")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let d = feature_names.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != headers.len() {
            return Err(Error::Cell {
                row,
                column: rec.len().min(headers.len()) + 1,
                message: format!("expected {} cells, found {}", headers.len(), rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::Cell {
                    row,
                    column: c + 1,
                    message: "missing value".into(),
                });
            }
            let x: f64 = cell.parse().map_err(|_| Error::Cell {
                row,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !x.is_finite() {
                return Err(Error::Cell {
                    row,
                    column: c + 1,
                    message: "non-finite value".into(),
                });
            }
            if c == label_idx {
                labels.push(x);
            } else {
                values.push(x);
            }
        }
    }
    let m = labels.len();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(RawTable {
        feature_names,
        features: DMatrix::from_row_slice(m, d, &values),
        labels,
    })
}

/// Preprocessed dataset. Features of every row are transformed with
/// training statistics only; labels are in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `m x d`, one sample per row.
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Row indices (into `features`) held by each node; blocks partition `train`.
    pub partition: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_nodes(&self) -> usize {
        self.partition.len()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    /// Fraction of `rows` whose label matches the sign of `<x, a>` (zero counts as +1).
    pub fn accuracy(&self, x: &DVector<f64>, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let hits = rows
            .iter()
            .filter(|&&i| {
                let s = self.features.row(i).dot(&x.transpose());
                (if s >= 0.0 { 1.0 } else { -1.0 }) == self.labels[i]
            })
            .count();
        hits as f64 / rows.len() as f64
    }

    pub fn test_accuracy(&self, x: &DVector<f64>) -> f64 {
        self.accuracy(x, &self.test)
    }

    /// Writes `features.csv`, `labels.csv`, `split.json` and `partition.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let d = self.dim();
        let mut feats = (0..d).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
        feats.push('\n');
        for i in 0..self.features.nrows() {
            let row: Vec<String> = (0..d).map(|j| fmt_full(self.features[(i, j)])).collect();
            feats.push_str(&row.join(","));
            feats.push('\n');
        }
        write_atomic(&dir.join("features.csv"), feats.as_bytes())?;
        let mut labels = String::from("label\n");
        for y in &self.labels {
            labels.push_str(&format!("{y}\n"));
        }
        write_atomic(&dir.join("labels.csv"), labels.as_bytes())?;
        let split = serde_json::json!({ "train": self.train, "test": self.test });
        write_atomic(&dir.join("split.json"), serde_json::to_string(&split)?.as_bytes())?;
        let partition: BTreeMap<usize, &Vec<usize>> = self.partition.iter().enumerate().collect();
        write_atomic(&dir.join("partition.json"), serde_json::to_string(&partition)?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessOptions {
    pub n_nodes: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Threshold continuous labels at the training median (ties go to +1).
    /// When false, labels must already be ±1.
    #[serde(default = "yes")]
    pub binarize: bool,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

impl PreprocessOptions {
    pub fn new(n_nodes: usize) -> Self {
        PreprocessOptions {
            n_nodes,
            test_fraction: 0.2,
            binarize: true,
        }
    }
}

/// Split, standardize with training statistics, normalize rows, binarize
/// labels and spread the training rows over the nodes.
pub fn preprocess(raw: &RawTable, opts: &PreprocessOptions, seed: u64) -> Result<Dataset> {
    let m = raw.labels.len();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..1.0).contains(&opts.test_fraction) {
        return Err(invalid(format!("test fraction must be in [0, 1), got {}", opts.test_fraction)));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut stream_rng(seed, streams::DATA));
    let n_test = (opts.test_fraction * m as f64).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    if opts.n_nodes == 0 || opts.n_nodes > train.len() {
        return Err(invalid(format!(
            "{} nodes cannot share {} training rows",
            opts.n_nodes,
            train.len()
        )));
    }

    let features = standardize_and_normalize(&raw.features, &train);
    let labels = if opts.binarize {
        binarize_at_median(&raw.labels, &train)
    } else {
        if let Some(bad) = raw.labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Cell {
                row: bad + 1,
                column: 0,
                message: format!("label {} is not ±1", raw.labels[bad]),
            });
        }
        raw.labels.clone()
    };
    let partition = partition_round_robin(&train, opts.n_nodes, derive_seed(seed, streams::DATA));
    Ok(Dataset {
        features,
        labels,
        train,
        test,
        partition,
    })
}

/// z-scores every column with the mean and standard deviation of the `train`
/// rows, then scales each row to unit Euclidean norm (all-zero rows stay zero).
pub fn standardize_and_normalize(x: &DMatrix<f64>, train: &[usize]) -> DMatrix<f64> {
    let (m, d) = x.shape();
    let k = train.len() as f64;
    let mut out = x.clone();
    for j in 0..d {
        let mean = train.iter().map(|&i| x[(i, j)]).sum::<f64>() / k;
        let var = train.iter().map(|&i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / k;
        let std = var.sqrt();
        for i in 0..m {
            out[(i, j)] = if std < STD_GUARD { 0.0 } else { (x[(i, j)] - mean) / std };
        }
    }
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// +1 at or above the training median, -1 below.
pub fn binarize_at_median(y: &[f64], train: &[usize]) -> Vec<f64> {
    let mut vals: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    vals.sort_by(f64::total_cmp);
    let k = vals.len();
    let median = if k % 2 == 1 {
        vals[k / 2]
    } else {
        0.5 * (vals[k / 2 - 1] + vals[k / 2])
    };
    y.iter().map(|&v| if v >= median { 1.0 } else { -1.0 }).collect()
}

/// Shuffles `rows` and deals them into `n` blocks whose sizes differ by at
/// most one (the first `len % n` blocks get the extra row).
pub fn partition_round_robin(rows: &[usize], n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(&mut stream_rng(seed, streams::DATA));
    let base = shuffled.len() / n;
    let extra = shuffled.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for b in 0..n {
        let size = base + usize::from(b < extra);
        out.push(shuffled[start..start + size].to_vec());
        start += size;
    }
    out
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// Unit-norm Gaussian samples labelled by a random hyperplane through the
/// origin, keeping only points at least `margin` away from it. Each node gets
/// `per_user` training rows; a further 25% of that total is held out for test.
pub fn synth_linear(n_users: usize, per_user: usize, d: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n_users == 0 || per_user == 0 || d == 0 {
        return Err(invalid("synthetic sizes must be positive"));
    }
    if !(0.0..1.0).contains(&margin) {
        return Err(invalid(format!("margin must be in [0, 1), got {margin}")));
    }
    let mut rng = stream_rng(seed, streams::DATA);
    let w = unit_gaussian(&mut rng, d);
    let n_train = n_users * per_user;
    let n_test = n_train.div_ceil(4);
    let m = n_train + n_test;
    let mut features = DMatrix::zeros(m, d);
    let mut labels = Vec::with_capacity(m);
    let mut i = 0;
    while i < m {
        let x = unit_gaussian(&mut rng, d);
        let s = w.dot(&x);
        if s.abs() < margin {
            continue;
        }
        features.row_mut(i).copy_from(&x.transpose());
        labels.push(if s >= 0.0 { 1.0 } else { -1.0 });
        i += 1;
    }
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..m).collect();
    let partition = (0..n_users)
        .map(|u| (u * per_user..(u + 1) * per_user).collect())
        .collect();
    Ok(Dataset {
        features,
        labels,
        train,
        test,
        partition,
    })
}

/// `n` i.i.d. standard normal values, e.g. per-node targets for averaging.
pub fn synth_gaussian_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, streams::DATA);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Position-dependent data on a geometric graph: node `v` at `(a, b)` holds
/// `per_node` samples with features `(a, b, 1)` plus jitter, normalized, and
/// `round(per_node * (a + b) / 2)` positive labels, so the share of positives
/// follows the coordinate sum. With `shuffled`, labels are permuted across all
/// samples, keeping features and the label multiset. A quarter of each node's
/// rows (rounded down) is held out for test.
pub fn synth_heterogeneous_geometric(g: &Graph, per_node: usize, seed: u64, shuffled: bool) -> Result<Dataset> {
    let positions = g
        .positions()
        .ok_or_else(|| invalid("graph has no node positions (use the geometric family)"))?;
    if per_node < 2 {
        return Err(invalid("need at least 2 samples per node"));
    }
    let n = g.n();
    let mut rng = stream_rng(seed, streams::DATA);
    let m = n * per_node;
    let mut features = DMatrix::zeros(m, 3);
    let mut labels = vec![0.0; m];
    for (v, &[a, b]) in positions.iter().enumerate() {
        let positives = ((per_node as f64) * (a + b) / 2.0).round() as usize;
        for j in 0..per_node {
            let i = v * per_node + j;
            let ja: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
            let jb: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
            let mut row = DVector::from_vec(vec![a + ja, b + jb, 1.0]);
            row /= row.norm();
            features.row_mut(i).copy_from(&row.transpose());
            labels[i] = if j < positives { 1.0 } else { -1.0 };
        }
    }
    if shuffled {
        let mut perm_rng = stream_rng(derive_seed(seed, 1), streams::DATA);
        labels.shuffle(&mut perm_rng);
    }
    let n_test = per_node / 4;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut partition = Vec::with_capacity(n);
    for v in 0..n {
        let rows: Vec<usize> = (v * per_node..(v + 1) * per_node).collect();
        test.extend_from_slice(&rows[per_node - n_test..]);
        train.extend_from_slice(&rows[..per_node - n_test]);
        partition.push(rows[..per_node - n_test].to_vec());
    }
    Ok(Dataset {
        features,
        labels,
        train,
        test,
        partition,
    })
}

/// Pearson correlation of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Mean label of each node's block (all rows, train and test).
pub fn node_label_means(ds: &Dataset, per_node: usize) -> Vec<f64> {
    ds.labels
        .chunks(per_node)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{generate, Family, GraphSpec};

    fn table(text: &str) -> Result<RawTable> {
        parse_csv(text.as_bytes(), "y")
    }

    #[test]
    fn parses_numeric_table() {
        let t = table("a,b,y\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        assert_eq!(t.features.shape(), (3, 2));
        assert_eq!(t.labels, vec![3.0, 6.0, 9.0]);
        assert_eq!(t.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn reports_bad_cells() {
        match table("a,b,y\n1,2,3\n4,x,6\n").unwrap_err() {
            Error::Cell { row, column, .. } => assert_eq!((row, column), (2, 2)),
            e => panic!("unexpected {e}"),
        }
        match table("a,b,y\n1,,3\n").unwrap_err() {
            Error::Cell { row, column, .. } => assert_eq!((row, column), (1, 2)),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(table("a,b,y\n").unwrap_err(), Error::EmptyDataset));
        assert!(parse_csv("a,b\n1,2\n".as_bytes(), "y").is_err());
    }

    fn random_table(m: usize, d: usize, seed: u64) -> RawTable {
        let mut rng = stream_rng(seed, 99);
        let features = DMatrix::from_fn(m, d, |_, j| rng.random::<f64>() * (j + 1) as f64 + j as f64);
        let labels = (0..m).map(|_| rng.random::<f64>() * 100.0).collect();
        RawTable {
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
            features,
            labels,
        }
    }

    #[test]
    fn preprocess_invariants() {
        let raw = random_table(103, 4, 1);
        let ds = preprocess(&raw, &PreprocessOptions::new(10), 7).unwrap();
        assert_eq!(ds.test.len(), 21);
        assert_eq!(ds.train.len(), 82);
        for &i in &ds.train {
            assert!((ds.features.row(i).norm() - 1.0).abs() < 1e-12);
        }
        assert!(ds.labels.iter().all(|&y| y == 1.0 || y == -1.0));
        let mut all: Vec<usize> = ds.partition.concat();
        all.sort_unstable();
        assert_eq!(all, ds.train);
        let sizes: Vec<usize> = ds.partition.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 9).count(), 2);
        assert_eq!(sizes.iter().filter(|&&s| s == 8).count(), 8);
        assert_eq!(ds, preprocess(&raw, &PreprocessOptions::new(10), 7).unwrap());
        assert_ne!(ds.partition, preprocess(&raw, &PreprocessOptions::new(10), 8).unwrap().partition);
    }

    #[test]
    fn balanced_median_split() {
        let raw = random_table(1000, 3, 2);
        let ds = preprocess(&raw, &PreprocessOptions::new(4), 3).unwrap();
        let pos = ds.train.iter().filter(|&&i| ds.labels[i] > 0.0).count();
        assert_eq!(pos, ds.train.len() / 2);
    }

    #[test]
    fn constant_column_is_zeroed() {
        let mut raw = random_table(50, 3, 4);
        raw.features.column_mut(1).fill(7.5);
        let ds = preprocess(&raw, &PreprocessOptions::new(5), 0).unwrap();
        assert!(ds.features.column(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_many_nodes() {
        let raw = random_table(10, 2, 5);
        assert!(preprocess(&raw, &PreprocessOptions::new(9), 0).is_err());
    }

    #[test]
    fn test_rows_do_not_leak_into_training() {
        let raw = random_table(200, 3, 6);
        let opts = PreprocessOptions::new(8);
        let base = preprocess(&raw, &opts, 11).unwrap();
        let mut altered = raw.clone();
        for &i in &base.test {
            for j in 0..3 {
                altered.features[(i, j)] = 1e6 * (j as f64 + 1.0);
            }
            altered.labels[i] = -1e9;
        }
        let other = preprocess(&altered, &opts, 11).unwrap();
        for &i in &base.train {
            assert_eq!(base.features.row(i), other.features.row(i));
            assert_eq!(base.labels[i], other.labels[i]);
        }
        assert_eq!(base.partition, other.partition);
    }

    #[test]
    fn synth_linear_is_separable() {
        let ds = synth_linear(128, 8, 8, 0.5, 3).unwrap();
        assert_eq!(ds.train.len(), 1024);
        assert_eq!(ds, synth_linear(128, 8, 8, 0.5, 3).unwrap());
        // Perceptron mistakes are bounded by 1 / margin^2 on separable data.
        let mut w = DVector::zeros(8);
        let mut converged = false;
        for _ in 0..100 {
            let mut mistakes = 0;
            for &i in &ds.train {
                let x = ds.row(i);
                if ds.labels[i] * w.dot(&x) <= 0.0 {
                    w += x * ds.labels[i];
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                converged = true;
                break;
            }
        }
        assert!(converged);
        assert_eq!(ds.accuracy(&w, &ds.test), 1.0);
    }

    #[test]
    fn heterogeneous_labels_follow_position() {
        let g = generate(&GraphSpec::new(Family::Geometric { n: 400, radius: None }, 5)).unwrap().graph;
        let per = 10;
        let plain = synth_heterogeneous_geometric(&g, per, 9, false).unwrap();
        let shuffled = synth_heterogeneous_geometric(&g, per, 9, true).unwrap();
        let sums: Vec<f64> = g.positions().unwrap().iter().map(|p| p[0] + p[1]).collect();
        assert!(pearson(&node_label_means(&plain, per), &sums) > 0.9);
        assert!(pearson(&node_label_means(&shuffled, per), &sums).abs() < 0.1);
        assert_eq!(plain.features, shuffled.features);
        let mut a = plain.labels.clone();
        let mut b = shuffled.labels.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        let ring = generate(&GraphSpec::new(Family::Ring { n: 5 }, 0)).unwrap().graph;
        assert!(synth_heterogeneous_geometric(&ring, per, 0, false).is_err());
    }

    #[test]
    fn export_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_linear(4, 2, 3, 0.1, 0).unwrap();
        ds.export(dir.path()).unwrap();
        let p: BTreeMap<String, Vec<usize>> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("partition.json")).unwrap()).unwrap();
        assert_eq!(p["3"], vec![6, 7]);
        let feats = std::fs::read_to_string(dir.path().join("features.csv")).unwrap();
        assert_eq!(feats.lines().count(), 1 + 10);
    }
}
