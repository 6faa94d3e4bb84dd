//! Datasets: synthetic Gaussian blobs, CSV ingestion, Dirichlet non-IID
//! partitioning, and class statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use crate::Scalar;

/// Distance of each blob mean from the origin along its basis axis.
/// Class means sit on a scaled simplex: `mean_c = BLOB_SEPARATION * e_c`.
pub const BLOB_SEPARATION: f64 = 4.0;

const MAX_PARTITION_RETRIES: usize = 100;

/// Labeled feature vectors. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    features: Array2<F>,
    labels: Vec<usize>,
    pub name: String,
    num_classes: usize,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(
        features: Array2<F>,
        labels: Vec<usize>,
        name: impl Into<String>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Config(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<F> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset from a subset of row indices, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let features = Array2::from_shape_fn((indices.len(), self.dim()), |(i, j)| {
            self.features[[indices[i], j]]
        });
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            features,
            labels,
            name: name.into(),
            num_classes: self.num_classes,
        }
    }

    /// Rows `[start, end)` of a batch index list as an owned matrix + labels.
    pub fn batch(&self, indices: &[usize]) -> (Array2<F>, Vec<usize>) {
        let x = Array2::from_shape_fn((indices.len(), self.dim()), |(i, j)| {
            self.features[[indices[i], j]]
        });
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

/// Dirichlet partition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn new(num_clients: usize, dirichlet_alpha: f64, seed: u64) -> Result<Self> {
        if num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if dirichlet_alpha <= 0.0 {
            return Err(Error::HyperparameterRange {
                name: "dirichlet_alpha",
                value: dirichlet_alpha,
                range: "(0, inf)",
            });
        }
        Ok(Self {
            num_clients,
            dirichlet_alpha,
            seed,
        })
    }
}

/// `num_classes` Gaussian clusters with means on a scaled simplex
/// (`BLOB_SEPARATION * e_c`); `spread` is the per-coordinate noise std.
pub fn make_blobs<F: Scalar>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if num_classes < 2 || per_class == 0 {
        return Err(Error::Config("need num_classes >= 2 and per_class >= 1".into()));
    }
    if dim < num_classes {
        return Err(Error::Config(format!(
            "blob dim {dim} must be >= num_classes {num_classes}"
        )));
    }
    let mut rng = derive_rng(seed, &[stream::DATA]);
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for i in 0..per_class {
            let row = c * per_class + i;
            for j in 0..dim {
                let mean = if j == c { BLOB_SEPARATION } else { 0.0 };
                let z: f64 = StandardNormal.sample(&mut rng);
                features[[row, j]] = F::from_f64_c(mean + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, format!("blobs-c{num_classes}-s{seed}"), num_classes)
}

/// Parses `d_x` feature columns plus one integer label column. A header row
/// is detected (first field not numeric) and skipped. The class count is
/// inferred as `max label + 1`.
pub fn load_csv<F: Scalar, P: AsRef<Path>>(path: P) -> Result<Dataset<F>> {
    let name = path
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let file = std::fs::File::open(&path)?;
    let reader = BufReader::new(file);

    let mut rows: Vec<Vec<F>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if rows.is_empty() && width.is_none() && fields[0].parse::<f64>().is_err() {
            // header row
            width = Some(fields.len());
            continue;
        }
        if let Some(w) = width {
            if fields.len() != w {
                return Err(Error::CsvParse {
                    line: line_no,
                    message: format!("expected {w} fields, got {}", fields.len()),
                });
            }
        } else {
            width = Some(fields.len());
        }
        if fields.len() < 2 {
            return Err(Error::CsvParse {
                line: line_no,
                message: "need at least one feature column and a label".into(),
            });
        }
        let mut row = Vec::with_capacity(fields.len() - 1);
        for f in &fields[..fields.len() - 1] {
            let v: f64 = f.parse().map_err(|_| Error::CsvParse {
                line: line_no,
                message: format!("bad feature value {f:?}"),
            })?;
            row.push(F::from_f64_c(v));
        }
        let label: usize = fields[fields.len() - 1].parse().map_err(|_| Error::CsvParse {
            line: line_no,
            message: format!("bad label {:?}", fields[fields.len() - 1]),
        })?;
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no data rows",
            path.as_ref().display()
        )));
    }
    let dim = rows[0].len();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let flat: Vec<F> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((labels.len(), dim), flat)
        .map_err(|e| Error::Config(e.to_string()))?;
    Dataset::new(features, labels, name, num_classes.max(2))
}

/// As [`load_csv`], but validates labels against a declared class count.
pub fn load_csv_with_classes<F: Scalar, P: AsRef<Path>>(
    path: P,
    num_classes: usize,
) -> Result<Dataset<F>> {
    let ds = load_csv::<F, _>(path)?;
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    Dataset::new(ds.features, ds.labels, ds.name, num_classes)
}

/// Writes a dataset in the schema [`load_csv`] reads (with a header row).
pub fn save_csv<F: Scalar, P: AsRef<Path>>(ds: &Dataset<F>, path: P) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    writeln!(file, "{},label", header.join(","))?;
    for i in 0..ds.len() {
        let row: Vec<String> = (0..ds.dim())
            .map(|j| format!("{}", ds.features[[i, j]].to_f64_c()))
            .collect();
        writeln!(file, "{},{}", row.join(","), ds.labels[i])?;
    }
    Ok(())
}

/// Exact per-class histogram of length `num_classes`.
pub fn class_counts<F: Scalar>(ds: &Dataset<F>) -> Vec<usize> {
    let mut counts = vec![0usize; ds.num_classes];
    for &y in &ds.labels {
        counts[y] += 1;
    }
    counts
}

/// Splits a dataset into per-client shards with per-class proportions drawn
/// from `Dirichlet(alpha * 1_N)`. Every sample lands in exactly one shard;
/// draws leaving a client empty are resampled (bounded retries).
pub fn dirichlet_partition<F: Scalar>(
    ds: &Dataset<F>,
    spec: &PartitionSpec,
) -> Result<Vec<Dataset<F>>> {
    let n_clients = spec.num_clients;
    let counts = class_counts(ds);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyDataset(format!("class {c} has no samples")));
    }
    if n_clients == 1 {
        return Ok(vec![ds.subset(
            &(0..ds.len()).collect::<Vec<_>>(),
            format!("{}/client0", ds.name),
        )]);
    }

    let mut rng = derive_rng(spec.seed, &[stream::PARTITION]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }

    for attempt in 0..MAX_PARTITION_RETRIES {
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for indices in &by_class {
            let mut shuffled = indices.clone();
            shuffled.shuffle(&mut rng);
            let proportions = sample_dirichlet(spec.dirichlet_alpha, n_clients, &mut rng);
            let counts = apportion(&proportions, shuffled.len());
            let mut offset = 0;
            for (client, &take) in counts.iter().enumerate() {
                assignment[client].extend_from_slice(&shuffled[offset..offset + take]);
                offset += take;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            return Ok(assignment
                .into_iter()
                .enumerate()
                .map(|(i, mut idx)| {
                    idx.sort_unstable();
                    ds.subset(&idx, format!("{}/client{i}", ds.name))
                })
                .collect());
        }
        log::debug!("partition attempt {attempt}: empty shard, resampling");
    }
    Err(Error::PartitionRetriesExhausted {
        retries: MAX_PARTITION_RETRIES,
    })
}

/// Stratified split: per class, the first `round(fraction * n_c)` shuffled
/// samples go to the first shard.
pub fn stratified_split<F: Scalar>(
    ds: &Dataset<F>,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset<F>, Dataset<F>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::HyperparameterRange {
            name: "fraction",
            value: fraction,
            range: "[0, 1]",
        });
    }
    let mut rng = derive_rng(seed, &[stream::PARTITION, 0x5711]);
    let mut first: Vec<usize> = Vec::new();
    let mut second: Vec<usize> = Vec::new();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for indices in &mut by_class {
        indices.shuffle(&mut rng);
        let take = ((fraction * indices.len() as f64).round() as usize).min(indices.len());
        first.extend_from_slice(&indices[..take]);
        second.extend_from_slice(&indices[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((
        ds.subset(&first, format!("{}/train", ds.name)),
        ds.subset(&second, format!("{}/test", ds.name)),
    ))
}

/// Concatenates datasets row-wise (shared dimension and class count).
pub fn concat<F: Scalar>(parts: &[&Dataset<F>], name: impl Into<String>) -> Result<Dataset<F>> {
    if parts.is_empty() {
        return Err(Error::EmptyDataset("concat of nothing".into()));
    }
    let dim = parts[0].dim();
    let num_classes = parts[0].num_classes;
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for part in parts {
        if part.dim() != dim || part.num_classes != num_classes {
            return Err(Error::Config("concat: mismatched dataset shapes".into()));
        }
        for i in 0..part.len() {
            for j in 0..dim {
                features[[row, j]] = part.features[[i, j]];
            }
            labels.push(part.labels[i]);
            row += 1;
        }
    }
    Dataset::new(features, labels, name, num_classes)
}

/// Machine-readable map `{client_id -> per-class counts}`.
pub fn partition_manifest<F: Scalar>(shards: &[Dataset<F>]) -> BTreeMap<usize, Vec<usize>> {
    shards
        .iter()
        .enumerate()
        .map(|(i, shard)| (i, class_counts(shard)))
        .collect()
}

fn sample_dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    // Gamma(alpha, 1) draws normalized to the simplex.
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE)).collect();
    let total: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= total;
    }
    draws
}

/// Largest-remainder apportionment of `total` items to `proportions`.
fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|p| (p * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    for k in 0..total - assigned {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    counts
}
