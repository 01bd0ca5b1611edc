//! Datasets, IDX ingestion, synthetic blobs and the extended Dirichlet
//! partitioner.

use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, positive, Error, Result};
use crate::rng::{rng_from_seed, Rng};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MAX_ALLOCATION_ATTEMPTS: usize = 1000;
/// Radius of the circle the synthetic class means sit on.
pub const BLOB_RADIUS: f64 = 5.0;

/// Labeled feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return arg("feature dimension must be positive");
        }
        if num_classes < 2 {
            return arg("a dataset needs at least two classes");
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Consistency(format!(
                "{} feature values do not fit {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return arg(format!(
                "label {bad} out of range for {num_classes} classes"
            ));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            dim,
            num_classes,
        })
    }

    /// An empty dataset with the given shape.
    pub fn empty(name: impl Into<String>, dim: usize, num_classes: usize) -> Self {
        Self {
            name: name.into(),
            features: Vec::new(),
            labels: Vec::new(),
            dim,
            num_classes,
        }
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows, in the given order, into a new dataset.
    pub fn select(&self, name: impl Into<String>, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: name.into(),
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes `f0,...,f{F-1},label` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for i in 0..self.len() {
            for v in self.sample(i) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{}", self.labels[i])?;
        }
        Ok(())
    }

    /// Random split into `(train, test)`; `test_fraction` of the samples,
    /// rounded down, go to the test set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return arg("test fraction must lie in [0, 1)");
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from_seed(seed));
        let n_test = (self.len() as f64 * test_fraction).floor() as usize;
        let (test, train) = order.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((
            self.select(format!("{}-train", self.name), &train),
            self.select(format!("{}-test", self.name), &test),
        ))
    }
}

/// Per-class proportions of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub proportions: Vec<f64>,
    /// Set when the source dataset had no samples; proportions are then zero.
    pub empty: bool,
}

impl ClassDistribution {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            proportions: vec![1.0 / num_classes as f64; num_classes],
            empty: false,
        }
    }

    /// Normalizes non-negative weights (counts or proportions).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return arg("class weights must be finite and non-negative");
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Ok(Self {
                proportions: weights,
                empty: true,
            });
        }
        Ok(Self {
            proportions: weights.into_iter().map(|w| w / total).collect(),
            empty: false,
        })
    }

    pub fn len(&self) -> usize {
        self.proportions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }
}

/// `proportions[c] = count(label = c) / |dataset|`.
pub fn class_distribution(dataset: &Dataset, num_classes: usize) -> ClassDistribution {
    let mut counts = vec![0usize; num_classes];
    for &l in dataset.labels() {
        if l < num_classes {
            counts[l] += 1;
        }
    }
    let n = dataset.len();
    if n == 0 {
        return ClassDistribution {
            proportions: vec![0.0; num_classes],
            empty: true,
        };
    }
    ClassDistribution {
        proportions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        empty: false,
    }
}

/// Isotropic Gaussian blobs. Class `c` is centred on the circle of radius
/// [`BLOB_RADIUS`] at angle `2πc/C` in the first two coordinates; the other
/// coordinates are centred at zero. Samples are emitted class by class.
pub fn generate_synthetic(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return arg("n_per_class must be at least 1");
    }
    if num_classes < 2 {
        return arg("need at least two classes");
    }
    if dim < 2 {
        return arg("synthetic data needs at least two feature dimensions");
    }
    if !positive(spread) {
        return arg("spread must be positive");
    }
    let mut rng = rng_from_seed(seed);
    let n = n_per_class * num_classes;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let angle = 2.0 * PI * c as f64 / num_classes as f64;
        let mut mean = vec![0.0; dim];
        mean[0] = BLOB_RADIUS * angle.cos();
        mean[1] = BLOB_RADIUS * angle.sin();
        for _ in 0..n_per_class {
            for m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        format!("blobs-c{num_classes}-f{dim}-s{spread}"),
        features,
        labels,
        dim,
        num_classes,
    )
}

fn read_u32(bytes: &[u8], offset: usize) -> io::Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated IDX header"))
}

fn read_file(path: &Path) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Parses an IDX image/label pair from memory. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let magic = read_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_images = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let n_labels = read_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::Format("image dimensions must be positive".into()));
    }
    let pixels = images
        .get(16..16 + n_images * dim)
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated IDX image data"))?;
    let raw_labels = labels
        .get(8..8 + n_labels)
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated IDX label data"))?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new("idx", features, labels, dim, num_classes)
}

/// Loads an IDX image file and its label file (e.g. Fashion-MNIST).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    let mut ds = parse_idx(&images, &labels)?;
    ds.name = images_path
        .as_ref()
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(ds)
}

/// Parameters of the extended Dirichlet partitioner ExDir(C, α).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(rename = "N")]
    pub clients: usize,
    #[serde(rename = "C")]
    pub classes_per_client: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.clients == 0 {
            return arg("partition needs at least one client");
        }
        if self.classes_per_client == 0 || self.classes_per_client > num_classes {
            return arg(format!(
                "classes per client must lie in [1, {num_classes}], got {}",
                self.classes_per_client
            ));
        }
        if !positive(self.alpha) {
            return arg("alpha must be positive");
        }
        if self.clients * self.classes_per_client < num_classes {
            return arg(format!(
                "{} clients with {} classes each cannot cover {num_classes} classes",
                self.clients, self.classes_per_client
            ));
        }
        Ok(())
    }
}

/// Splits `total` items by `weights` with the largest-remainder method.
/// Ties in the fractional part go to the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws a Dirichlet(α, ..., α) vector of length `k` through normalized
/// Gamma(α, 1) variates. If every variate underflows to zero, all mass goes to
/// one uniformly chosen component.
pub(crate) fn sample_dirichlet(rng: &mut Rng, alpha: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.into_iter().map(|x| x / total).collect()
    } else {
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Assigns each client `C` distinct classes, redrawing until every class has
/// at least one holder. Returns the sorted holder list for each class.
fn allocate_classes(
    rng: &mut Rng,
    spec: &PartitionSpec,
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    for _ in 0..MAX_ALLOCATION_ATTEMPTS {
        let mut holders = vec![Vec::new(); num_classes];
        for client in 0..spec.clients {
            let mut classes: Vec<usize> = (0..num_classes).collect();
            let (chosen, _) = classes.partial_shuffle(rng, spec.classes_per_client);
            for &c in chosen.iter() {
                holders[c].push(client);
            }
        }
        if holders.iter().all(|h| !h.is_empty()) {
            return Ok(holders);
        }
    }
    arg(format!(
        "no class allocation covering all classes found in {MAX_ALLOCATION_ATTEMPTS} attempts"
    ))
}

/// Partitions `dataset` across `spec.clients` clients with ExDir(C, α).
///
/// Each client receives `C` distinct classes uniformly at random. The samples
/// of class `c` are then shuffled and split among the clients holding `c` by a
/// Dirichlet(α) draw restricted to those holders, rounded with the
/// largest-remainder method. Client datasets keep the original sample order.
pub fn partition_exdir(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    if dataset.is_empty() {
        return arg("cannot partition an empty dataset");
    }
    let num_classes = dataset.num_classes();
    spec.validate(num_classes)?;
    let counts = dataset.class_counts();
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return arg(format!("class {missing} has no samples"));
    }

    let mut rng = rng_from_seed(spec.seed);
    let holders = allocate_classes(&mut rng, spec, num_classes)?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); spec.clients];
    for (class, members) in by_class.iter_mut().enumerate() {
        let owners = &holders[class];
        let proportions = sample_dirichlet(&mut rng, spec.alpha, owners.len());
        members.shuffle(&mut rng);
        let shares = apportion(members.len(), &proportions);
        let mut start = 0;
        for (&client, &share) in owners.iter().zip(&shares) {
            client_indices[client].extend_from_slice(&members[start..start + share]);
            start += share;
        }
    }

    Ok(client_indices
        .into_iter()
        .enumerate()
        .map(|(n, mut idx)| {
            idx.sort_unstable();
            dataset.select(format!("{}-client{n}", dataset.name), &idx)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(labels: &[usize], num_classes: usize) -> Dataset {
        let features = labels.iter().map(|&l| l as f64).collect();
        Dataset::new("t", features, labels.to_vec(), 1, num_classes).unwrap()
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = generate_synthetic(10, 3, 2, 1.0, 7).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
        let b = generate_synthetic(10, 3, 2, 1.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(generate_synthetic(0, 3, 2, 1.0, 7).is_err());
        assert!(generate_synthetic(10, 1, 2, 1.0, 7).is_err());
        assert!(generate_synthetic(10, 3, 1, 1.0, 7).is_err());
        assert!(generate_synthetic(10, 3, 2, 0.0, 7).is_err());
    }

    #[test]
    fn class_distribution_examples() {
        let d = class_distribution(&labelled(&[0, 0, 1, 2], 3), 3);
        assert_eq!(d.proportions, vec![0.5, 0.25, 0.25]);
        assert!(!d.empty);
        let d = class_distribution(&labelled(&[0, 0, 0], 4), 4);
        assert_eq!(d.proportions, vec![1.0, 0.0, 0.0, 0.0]);
        let d = class_distribution(&Dataset::empty("e", 1, 3), 3);
        assert_eq!(d.proportions, vec![0.0; 3]);
        assert!(d.empty);
    }

    #[test]
    fn apportion_largest_remainder() {
        assert_eq!(apportion(10, &[0.5, 0.5]), vec![5, 5]);
        // quotas 3.33.. each: one leftover goes to the lowest index
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.1, 0.6, 0.3]), vec![1, 4, 2]);
        assert_eq!(apportion(0, &[0.3, 0.7]), vec![0, 0]);
    }

    #[test]
    fn one_hot_partition_keeps_whole_classes() {
        let ds = labelled(&[0, 1, 0, 1, 0, 1, 1], 2);
        let spec = PartitionSpec {
            clients: 2,
            classes_per_client: 1,
            alpha: 0.5,
            seed: 11,
        };
        let parts = partition_exdir(&ds, &spec).unwrap();
        let mut seen: Vec<Vec<usize>> = parts.iter().map(|p| p.class_counts()).collect();
        seen.sort();
        assert_eq!(seen, vec![vec![0, 4], vec![3, 0]]);
    }

    #[test]
    fn partition_rejects_bad_specs() {
        let ds = labelled(&[0, 1, 2, 0, 1, 2], 3);
        let base = PartitionSpec {
            clients: 3,
            classes_per_client: 1,
            alpha: 1.0,
            seed: 0,
        };
        assert!(partition_exdir(&ds, &PartitionSpec { clients: 2, ..base }).is_err());
        assert!(partition_exdir(&ds, &PartitionSpec { alpha: 0.0, ..base }).is_err());
        assert!(partition_exdir(
            &ds,
            &PartitionSpec {
                classes_per_client: 4,
                ..base
            }
        )
        .is_err());
        assert!(partition_exdir(&Dataset::empty("e", 1, 3), &base).is_err());
        let missing = labelled(&[0, 1, 0, 1], 3);
        assert!(partition_exdir(&missing, &base).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = generate_synthetic(20, 3, 2, 1.0, 1).unwrap();
        let (train, test) = ds.split(0.25, 9).unwrap();
        assert_eq!(test.len(), 15);
        assert_eq!(train.len() + test.len(), ds.len());
        assert!(ds.split(1.0, 9).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let ds = Dataset::new("c", vec![1.5, -2.0], vec![1], 2, 2).unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "f0,f1,label\n1.5,-2,1\n");
    }
}
