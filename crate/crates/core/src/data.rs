//! Datasets, file formats and Dirichlet label-skew partitioning.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassPrior;
use crate::seed;

const DATASET_MAGIC: &[u8; 4] = b"FDS1";

/// Labelled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Domain("dataset must hold at least one sample".into()));
        }
        let dim = features[0].len();
        Self::build(features, labels, classes, dim)
    }

    fn build(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        dim: usize,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        for (j, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!("row {j} has {} features, expected {dim}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("row {j} holds a non-finite feature")));
            }
        }
        if let Some((j, y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Index(format!("row {j} has label {y} but C = {classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            dim,
        })
    }

    /// A dataset with no rows; only meaningful as an empty client's share.
    pub fn empty(classes: usize, dim: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            classes,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, possibly none.
    fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            dim: self.dim,
        }
    }
}

/// One client's share of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub data: Dataset,
    /// `n_i^y` for each class.
    pub class_counts: Vec<usize>,
    /// Row indices into the dataset the client was carved from.
    pub source_indices: Vec<usize>,
}

impl ClientDataset {
    pub fn from_dataset(id: usize, data: Dataset) -> Self {
        let class_counts = data.class_counts();
        let source_indices = (0..data.len()).collect();
        Self {
            id,
            data,
            class_counts,
            source_indices,
        }
    }

    /// `n_i`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub clients: usize,
    pub beta: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("partition needs at least one client".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("Dirichlet beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Result of a Dirichlet split.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<ClientDataset>,
}

impl Partition {
    /// Clients that received no samples at all.
    pub fn empty_clients(&self) -> Vec<usize> {
        self.clients.iter().filter(|c| c.is_empty()).map(|c| c.id).collect()
    }

    /// Per-client per-class count matrix (rows are clients).
    pub fn count_matrix(&self) -> Vec<Vec<usize>> {
        self.clients.iter().map(|c| c.class_counts.clone()).collect()
    }
}

/// Isotropic Gaussian class means `center + spread·N(0, I)`.
pub fn synthetic_means(classes: usize, dim: usize, center: f64, spread: f64, seed_base: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed_base, &[seed::tag::DATA_MEANS]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..classes)
        .map(|_| (0..dim).map(|_| center + spread * normal.sample(&mut rng)).collect())
        .collect()
}

/// Draws `n_per_class` points per class from `N(mean_y, σ²I)`.
///
/// Rows are ordered class by class.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    class_means: &[Vec<f64>],
    sigma: f64,
    seed_base: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    if class_means.len() != classes || class_means.iter().any(|m| m.len() != dim) {
        return Err(Error::Shape(format!("expected {classes} means of dimension {dim}")));
    }
    for a in 0..classes {
        for b in a + 1..classes {
            if class_means[a] == class_means[b] {
                log::warn!("classes {a} and {b} share the same mean");
            }
        }
    }
    let mut rng = seed::rng(seed_base, &[]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (y, mean) in class_means.iter().enumerate() {
        for _ in 0..n_per_class {
            features.push(mean.iter().map(|m| m + sigma * normal.sample(&mut rng)).collect());
            labels.push(y);
        }
    }
    Dataset::new(features, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Csv,
    RawBinary,
}

pub fn load_dataset(path: &Path, format: DataFormat, classes: usize) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(path, classes),
        DataFormat::RawBinary => load_raw(path, classes),
    }
}

pub fn save_dataset(data: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let bytes = match format {
        DataFormat::Csv => {
            let mut out = String::from("label");
            for k in 0..data.dim {
                out.push_str(&format!(",f{k}"));
            }
            out.push('\n');
            for (row, y) in data.features.iter().zip(&data.labels) {
                out.push_str(&y.to_string());
                for v in row {
                    // `{}` prints the shortest representation that round-trips
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
            out.into_bytes()
        }
        DataFormat::RawBinary => {
            if data.classes > u16::MAX as usize + 1 {
                return Err(Error::Config("raw-binary labels are u16".into()));
            }
            let mut out = Vec::with_capacity(16 + data.len() * (8 * data.dim + 2));
            out.extend_from_slice(DATASET_MAGIC);
            for v in [data.len(), data.dim, data.classes] {
                let v = u32::try_from(v).map_err(|_| Error::Config("dimension exceeds u32".into()))?;
                out.extend_from_slice(&v.to_le_bytes());
            }
            for row in &data.features {
                for v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            for &y in &data.labels {
                out.extend_from_slice(&(y as u16).to_le_bytes());
            }
            out
        }
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(Error::parse(path, "line 1: header must start with `label`"));
    }
    let dim = cols.len() - 1;
    for (k, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{k}") {
            return Err(Error::parse(path, format!("line 1: column {} should be f{k}, found `{c}`", k + 1)));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines {
        let line_no = ln + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                path,
                format!("line {line_no}: expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let y: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {line_no}: bad label `{}`", fields[0])))?;
        if y >= classes {
            return Err(Error::parse(
                path,
                format!("line {line_no}: label {y} out of range for C = {classes}"),
            ));
        }
        let row = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, format!("line {line_no}: bad feature `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        features.push(row);
        labels.push(y);
    }
    if features.is_empty() {
        return Err(Error::parse(path, "no data rows"));
    }
    Dataset::build(features, labels, classes, dim)
}

fn load_raw(path: &Path, classes: usize) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::parse(path, format!("offset 0: file too short ({} bytes) for header", bytes.len())));
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(Error::parse(path, "offset 0: bad magic, expected FDS1"));
    }
    let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (n, dim, c) = (word(4), word(8), word(12));
    if c != classes {
        return Err(Error::parse(path, format!("offset 12: file declares C = {c}, expected {classes}")));
    }
    if n == 0 {
        return Err(Error::parse(path, "offset 4: zero samples"));
    }
    let need = 16 + n * dim * 8 + n * 2;
    if bytes.len() < need {
        return Err(Error::parse(
            path,
            format!("offset {}: truncated, need {need} bytes", bytes.len()),
        ));
    }
    let mut off = 16;
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        let row = (0..dim)
            .map(|_| {
                let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
                v
            })
            .collect();
        features.push(row);
    }
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let y = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        if y >= classes {
            return Err(Error::parse(path, format!("offset {off}: sample {j} has label {y}, C = {classes}")));
        }
        labels.push(y);
        off += 2;
    }
    Dataset::build(features, labels, classes, dim)
}

/// Normalised Gamma(β, 1) draws: a sample from `Dir(β·1_m)`.
pub fn sample_dirichlet<R: Rng + ?Sized>(beta: f64, m: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("Dirichlet beta {beta}: {e}")))?;
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.iter().map(|g| g / total).collect())
    } else {
        // every draw underflowed; fall back to the symmetric point
        Ok(vec![1.0 / m as f64; m])
    }
}

/// Splits `n` items by `proportions`, rounding by largest remainder so the
/// counts sum to `n` exactly. Ties go to the lower index.
pub fn largest_remainder(n: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skew split: for each label draw `Dir(β)` proportions over the
/// clients, shuffle that label's rows and hand out contiguous runs.
pub fn dirichlet_partition(data: &Dataset, cfg: &PartitionConfig) -> Result<Partition> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, &[seed::tag::PARTITION]);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); cfg.clients];
    for label in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&j| data.labels[j] == label).collect();
        let props = sample_dirichlet(cfg.beta, cfg.clients, &mut rng)?;
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), &props);
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            per_client[client].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    let clients = per_client
        .into_iter()
        .enumerate()
        .map(|(id, mut indices)| {
            indices.sort_unstable();
            let data = data.select(&indices);
            let class_counts = data.class_counts();
            ClientDataset {
                id,
                data,
                class_counts,
                source_indices: indices,
            }
        })
        .collect::<Vec<_>>();
    let partition = Partition { clients };
    let empty = partition.empty_clients();
    if !empty.is_empty() {
        log::warn!("clients {empty:?} received no samples");
    }
    Ok(partition)
}

/// `π[y] = n_i^y / n_i + δ`.
pub fn class_prior(client: &ClientDataset, delta: f64) -> Result<ClassPrior> {
    if client.is_empty() {
        return Err(Error::EmptyClient(client.id));
    }
    ClassPrior::from_counts(&client.class_counts, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Dataset {
        let means = synthetic_means(3, 2, 0.0, 1.0, 5);
        gen_synthetic(3, 2, 50, &means, 0.3, 6).unwrap()
    }

    #[test]
    fn zero_sigma_returns_means() {
        let means = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let d = gen_synthetic(2, 2, 4, &means, 0.0, 1).unwrap();
        for (row, &y) in d.features().iter().zip(d.labels()) {
            assert_eq!(row, &means[y]);
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        assert_eq!(toy(), toy());
    }

    #[test]
    fn synthetic_class_means_concentrate() {
        let means = synthetic_means(2, 3, 0.0, 2.0, 1);
        let sigma = 0.7;
        let n = 10_000;
        let d = gen_synthetic(2, 3, n, &means, sigma, 2).unwrap();
        for y in 0..2 {
            for k in 0..3 {
                let avg: f64 = d
                    .features()
                    .iter()
                    .zip(d.labels())
                    .filter(|(_, &l)| l == y)
                    .map(|(r, _)| r[k])
                    .sum::<f64>()
                    / n as f64;
                assert!((avg - means[y][k]).abs() < 5.0 * sigma / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn bad_generation_params() {
        let means = vec![vec![0.0]; 2];
        assert!(gen_synthetic(1, 1, 5, &means[..1], 1.0, 0).is_err());
        assert!(gen_synthetic(2, 1, 5, &means, -1.0, 0).is_err());
        assert!(gen_synthetic(2, 2, 5, &means, 1.0, 0).is_err());
    }

    #[test]
    fn single_client_holds_everything() {
        let d = toy();
        let p = dirichlet_partition(&d, &PartitionConfig { clients: 1, beta: 0.1, seed: 3 }).unwrap();
        assert_eq!(p.clients.len(), 1);
        assert_eq!(p.clients[0].data, d);
        assert_eq!(p.clients[0].class_counts, d.class_counts());
    }

    #[test]
    fn partition_conserves_counts() {
        let d = toy();
        let p = dirichlet_partition(&d, &PartitionConfig { clients: 7, beta: 0.1, seed: 9 }).unwrap();
        let total: usize = p.clients.iter().map(|c| c.len()).sum();
        assert_eq!(total, d.len());
        let global = d.class_counts();
        for y in 0..d.classes() {
            assert_eq!(p.clients.iter().map(|c| c.class_counts[y]).sum::<usize>(), global[y]);
        }
        let mut all: Vec<usize> = p.clients.iter().flat_map(|c| c.source_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
    }

    #[test]
    fn large_beta_approaches_global_frequencies() {
        let means = synthetic_means(4, 2, 0.0, 1.0, 1);
        let d = gen_synthetic(4, 2, 1000, &means, 1.0, 2).unwrap();
        let global: Vec<f64> = d.class_counts().iter().map(|&c| c as f64 / d.len() as f64).collect();
        let mut worst = Vec::new();
        for s in 0..5 {
            let p = dirichlet_partition(&d, &PartitionConfig { clients: 5, beta: 10_000.0, seed: s }).unwrap();
            let dev = p
                .clients
                .iter()
                .flat_map(|c| {
                    let n = c.len() as f64;
                    c.class_counts
                        .iter()
                        .zip(&global)
                        .map(move |(&k, g)| ((k as f64 / n) - g).abs() / g)
                })
                .fold(0.0, f64::max);
            worst.push(dev);
        }
        worst.sort_by(f64::total_cmp);
        assert!(worst[2] < 0.05, "median relative deviation {}", worst[2]);
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let d = toy();
        let cfg = PartitionConfig { clients: 4, beta: 0.5, seed: 17 };
        assert_eq!(dirichlet_partition(&d, &cfg).unwrap(), dirichlet_partition(&d, &cfg).unwrap());
    }

    #[test]
    fn prior_examples() {
        let data = Dataset::new(vec![vec![0.0]; 4], vec![0, 0, 0, 1], 3).unwrap();
        let client = ClientDataset::from_dataset(0, data);
        let p = class_prior(&client, 0.01).unwrap();
        let want = [0.76, 0.26, 0.01];
        for (a, b) in p.pi().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.pi().iter().sum::<f64>() - (1.0 + 3.0 * 0.01)).abs() < 1e-12);
        assert!(matches!(class_prior(&client, 0.0), Err(Error::Config(_))));
        let balanced = Dataset::new(vec![vec![0.0]; 3], vec![0, 1, 2], 3).unwrap();
        assert!(class_prior(&ClientDataset::from_dataset(1, balanced), 0.05).unwrap().is_uniform());
    }

    #[test]
    fn empty_client_prior_errors() {
        let d = toy();
        let empty = ClientDataset { id: 4, data: d.select(&[]), class_counts: vec![0; 3], source_indices: vec![] };
        assert!(matches!(class_prior(&empty, 0.01), Err(Error::EmptyClient(4))));
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(10, &[0.33, 0.33, 0.34]), vec![3, 3, 4]);
        assert_eq!(largest_remainder(3, &[0.5, 0.5]), vec![2, 1]);
        assert_eq!(largest_remainder(0, &[0.2, 0.8]), vec![0, 0]);
    }

    proptest! {
        #[test]
        fn dirichlet_draws_are_simplex_points(beta in 0.01f64..100.0, m in 1usize..12, s in 0u64..1000) {
            let mut rng = seed::rng(s, &[]);
            let p = sample_dirichlet(beta, m, &mut rng).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn largest_remainder_preserves_total(n in 0usize..5000, beta in 0.05f64..5.0, m in 1usize..10, s in 0u64..100) {
            let mut rng = seed::rng(s, &[]);
            let p = sample_dirichlet(beta, m, &mut rng).unwrap();
            prop_assert_eq!(largest_remainder(n, &p).iter().sum::<usize>(), n);
        }
    }
}
