//! Datasets: synthetic Gaussian mixtures, Dirichlet label-skew partitioning,
//! resolution-style feature degradation, and CSV / binary I/O.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::streams;
use crate::tensor::{self, Tensor};
use crate::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("feature width {dim} is not divisible by factor {factor}")]
    IndivisibleDim { dim: usize, factor: usize },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: missing value in column `{column}`")]
    MissingValue { line: u64, column: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::InvalidParams(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n × dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(invalid(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Examples at `indices`, in that order. Panics on an empty selection.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parameters of the synthetic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    /// Isotropic within-class standard deviation.
    pub noise_sigma: f64,
    /// Standard deviation of each class-mean coordinate.
    pub mean_scale: f64,
}

impl SyntheticSpec {
    pub const DEFAULT_NOISE_SIGMA: f64 = 0.5;
    pub const DEFAULT_MEAN_SCALE: f64 = 0.15;

    pub fn new(classes: usize, dim: usize, n: usize, seed: u64) -> Self {
        Self {
            classes,
            dim,
            n,
            seed,
            noise_sigma: Self::DEFAULT_NOISE_SIGMA,
            mean_scale: Self::DEFAULT_MEAN_SCALE,
        }
    }
}

/// One Gaussian component per class. Class means are drawn first, then each
/// example draws a uniform label and isotropic noise around that mean.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim < spec.classes || spec.n == 0 {
        return Err(invalid(format!(
            "need classes >= 2, dim >= classes, n >= 1 (got C={}, dim={}, n={})",
            spec.classes, spec.dim, spec.n
        )));
    }
    if !(spec.noise_sigma > 0.0 && spec.noise_sigma.is_finite())
        || !(spec.mean_scale > 0.0 && spec.mean_scale.is_finite())
    {
        return Err(invalid("noise_sigma and mean_scale must be positive"));
    }
    let mut rng = Rng::with_stream(spec.seed, streams::DATA);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| rng.normal() * spec.mean_scale)
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.n * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let c = rng.below(spec.classes);
        labels.push(c);
        data.extend(means[c].iter().map(|m| m + spec.noise_sigma * rng.normal()));
    }
    Dataset::new(
        Tensor::new(vec![spec.n, spec.dim], data)?,
        labels,
        spec.classes,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    /// Smallest client share after repair; 2 guarantees a non-empty train
    /// and test split.
    pub min_per_client: usize,
}

impl PartitionSpec {
    pub fn new(n_clients: usize, dirichlet_alpha: f64, seed: u64) -> Self {
        Self {
            n_clients,
            dirichlet_alpha,
            seed,
            min_per_client: 2,
        }
    }
}

fn dirichlet(alpha: f64, k: usize, rng: &mut Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| rng.gamma(alpha)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        // Every gamma draw underflowed; put the whole class on one client.
        let mut p = vec![0.0; k];
        p[rng.below(k)] = 1.0;
        p
    }
}

/// Example indices per client. Each class is split by its own Dirichlet(α)
/// draw; clients left below `min_per_client` take one example at a time from
/// the currently largest client. Indices within a client are ascending.
pub fn dirichlet_assignment(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let k = spec.n_clients;
    if k == 0 || !(spec.dirichlet_alpha > 0.0 && spec.dirichlet_alpha.is_finite()) {
        return Err(invalid(
            "partition needs n_clients >= 1 and a positive alpha",
        ));
    }
    if ds.len() < k * spec.min_per_client {
        return Err(invalid(format!(
            "{} examples cannot give {} clients {} each",
            ds.len(),
            k,
            spec.min_per_client
        )));
    }
    let mut rng = Rng::with_stream(spec.seed, streams::PARTITION);
    let mut shares: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let p = dirichlet(spec.dirichlet_alpha, k, &mut rng);
        let mut start = 0;
        let mut cum = 0.0;
        for (client, share) in p.iter().enumerate() {
            cum += share;
            let end = if client + 1 == k {
                idx.len()
            } else {
                ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
            };
            shares[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(poor) = (0..k).find(|&c| shares[c].len() < spec.min_per_client) {
        let rich = (0..k)
            .max_by_key(|&c| (shares[c].len(), std::cmp::Reverse(c)))
            .expect("k >= 1");
        let moved = shares[rich].pop().expect("largest client is non-empty");
        shares[poor].push(moved);
    }
    for s in &mut shares {
        s.sort_unstable();
    }
    Ok(shares)
}

pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    Ok(dirichlet_assignment(ds, spec)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}

/// Block-average pooling by `factor`, zero-padded back to the input width.
pub fn feature_shift(ds: &Dataset, factor: usize) -> Result<Dataset> {
    let dim = ds.dim();
    if factor == 0 || !dim.is_multiple_of(factor) {
        return Err(DataError::IndivisibleDim { dim, factor });
    }
    if factor == 1 {
        return Ok(ds.clone());
    }
    let pooled = dim / factor;
    let mut data = vec![0.0; ds.len() * dim];
    for r in 0..ds.len() {
        let row = ds.features.row(r);
        for k in 0..pooled {
            data[r * dim + k] =
                row[k * factor..(k + 1) * factor].iter().sum::<f64>() / factor as f64;
        }
    }
    Dataset::new(
        Tensor::new(vec![ds.len(), dim], data)?,
        ds.labels.clone(),
        ds.classes,
    )
}

/// Seeded shuffle split; both sides keep at least one example.
pub fn train_test_split(
    ds: &Dataset,
    train_fraction: f64,
    rng: &mut Rng,
) -> Result<(Dataset, Dataset)> {
    if ds.len() < 2 || !(0.0..=1.0).contains(&train_fraction) {
        return Err(invalid(format!(
            "cannot split {} examples at fraction {train_fraction}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut idx);
    let n_train = ((ds.len() as f64 * train_fraction).round() as usize).clamp(1, ds.len() - 1);
    let (train, test) = idx.split_at(n_train);
    Ok((ds.subset(train), ds.subset(test)))
}

/// Which CSV column holds the label; every other column is a feature, in
/// header order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
        }
    }
}

/// Loads a headed CSV. Integer labels are used as class indices; any other
/// labels are coded by their sorted order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = fs::read_to_string(path).map_err(io)?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let label_at = header
        .iter()
        .position(|h| *h == schema.label_column)
        .ok_or_else(|| DataError::Parse {
            line: 1,
            message: format!("no label column `{}`", schema.label_column),
        })?;
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(DataError::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, cell) in record.iter().enumerate() {
            if cell.is_empty() {
                return Err(DataError::MissingValue {
                    line,
                    column: header[col].clone(),
                });
            }
            if col == label_at {
                raw_labels.push(cell.to_string());
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    line,
                    message: format!("column `{}`: `{cell}` is not a number", header[col]),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Parse {
                        line,
                        message: format!("column `{}`: non-finite value", header[col]),
                    });
                }
                features.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(DataError::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let numeric: Option<Vec<usize>> = raw_labels.iter().map(|l| l.parse().ok()).collect();
    let (labels, classes) = match numeric {
        Some(ls) => {
            let classes = ls.iter().max().map_or(0, |m| m + 1).max(2);
            (ls, classes)
        }
        None => {
            let mut names = raw_labels.clone();
            names.sort();
            names.dedup();
            let ls = raw_labels
                .iter()
                .map(|l| names.binary_search(l).expect("label is in its own set"))
                .collect();
            (ls, names.len().max(2))
        }
    };
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, dim], features)?, labels, classes)
}

/// Writes `x0..x{dim-1}` feature columns followed by the label column.
/// Values use the shortest representation that parses back to the same bits.
pub fn to_csv(ds: &Dataset, schema: &CsvSchema) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim())
        .map(|i| format!("x{i}"))
        .chain(std::iter::once(schema.label_column.clone()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..ds.len() {
        for v in ds.features.row(r) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.labels[r]));
    }
    out
}

/// JSON sidecar written next to a binary dataset export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub classes: usize,
    pub n: usize,
    pub dim: usize,
    pub seed: Option<u64>,
    pub provenance: String,
}

/// Writes `<stem>.bin` (features tensor, then labels as an `[n]` tensor) and
/// `<stem>.json`.
pub fn export_dataset(
    ds: &Dataset,
    stem: &Path,
    seed: Option<u64>,
    provenance: &str,
) -> Result<()> {
    let mut bytes = Vec::new();
    tensor::write_tensor(&ds.features, &mut bytes);
    let labels = Tensor::new(
        vec![ds.len()],
        ds.labels.iter().map(|&l| l as f64).collect(),
    )?;
    tensor::write_tensor(&labels, &mut bytes);
    let meta = DatasetMeta {
        schema_version: 1,
        classes: ds.classes,
        n: ds.len(),
        dim: ds.dim(),
        seed,
        provenance: provenance.to_string(),
    };
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    fs::write(&bin, bytes).map_err(|source| DataError::Io {
        path: bin.display().to_string(),
        source,
    })?;
    let meta = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&json, meta).map_err(|source| DataError::Io {
        path: json.display().to_string(),
        source,
    })
}

pub fn import_dataset(stem: &Path) -> Result<(Dataset, DatasetMeta)> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| DataError::Io { path: p, source }
    };
    let bytes = fs::read(&bin).map_err(io(&bin))?;
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&json).map_err(io(&json))?)
        .map_err(|e| DataError::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        })?;
    let mut slice = bytes.as_slice();
    let features = tensor::read_tensor(&mut slice)?;
    let labels = tensor::read_tensor(&mut slice)?
        .data()
        .iter()
        .map(|&l| l as usize)
        .collect();
    Ok((Dataset::new(features, labels, meta.classes)?, meta))
}
