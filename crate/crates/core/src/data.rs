//! Datasets, pool partitioning and oracles.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DralError, Result};
use crate::fsutil;
use crate::nn::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
}

/// Feature matrix with optional ground truth and optional 2-D display
/// coordinates (used for scatter exports).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub num_classes: usize,
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub coords: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    meta: DatasetMeta,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<[f64; 2]>>,
}

impl Dataset {
    pub fn new(
        meta: DatasetMeta,
        num_classes: usize,
        features: Matrix,
        labels: Option<Vec<usize>>,
        coords: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let ds = Dataset { meta, num_classes, features, labels, coords };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if n == 0 || self.features.cols() == 0 {
            return Err(DralError::Param("dataset needs at least one sample and one feature".into()));
        }
        if self.num_classes == 0 {
            return Err(DralError::Param("dataset needs at least one class".into()));
        }
        if !self.features.is_finite() {
            return Err(DralError::NonFinite { path: "dataset.features".into() });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(DralError::Param(format!("{} labels for {n} samples", labels.len())));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= self.num_classes) {
                return Err(DralError::Param(format!("label {bad} out of range for {} classes", self.num_classes)));
            }
        }
        if let Some(coords) = &self.coords {
            if coords.len() != n {
                return Err(DralError::Param(format!("{} coordinates for {n} samples", coords.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn true_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| DralError::State(format!("dataset '{}' has no ground-truth labels", self.meta.name)))
    }

    pub fn labels_for(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let labels = self.true_labels()?;
        ids.iter()
            .map(|&i| {
                labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| DralError::Param(format!("sample id {i} out of range for {} samples", labels.len())))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            meta: self.meta.clone(),
            num_classes: self.num_classes,
            features: self.features.row_iter().map(<[f64]>::to_vec).collect(),
            labels: self.labels.clone(),
            coords: self.coords.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let features = Matrix::from_rows(&file.features)?;
        Dataset::new(file.meta, file.num_classes, features, file.labels, file.coords)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_json(&fsutil::read_to_string(path)?)
    }
}

/// Parameters of a Gaussian-blob dataset.
///
/// Class centers sit on a circle in a 2-D plane with adjacent centers
/// `center_spacing` apart. Each sample is drawn around its center with
/// isotropic standard deviation `cluster_std`, then embedded into `dims`
/// dimensions by a fixed random map with orthonormal columns, so distances
/// in feature space equal distances in the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub cluster_std: f64,
    pub center_spacing: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { num_classes: 4, dims: 16, samples_per_class: 500, cluster_std: 1.0, center_spacing: 4.0 }
    }
}

impl BlobSpec {
    /// Planar class centers.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let k = self.num_classes;
        if k == 1 {
            return vec![[0.0, 0.0]];
        }
        let radius = self.center_spacing / (2.0 * (std::f64::consts::PI / k as f64).sin());
        (0..k)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                [radius * angle.cos(), radius * angle.sin()]
            })
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.dims < 1 {
            return Err(DralError::Param("dims must be at least 1".into()));
        }
        if self.num_classes < 1 || self.samples_per_class < 1 {
            return Err(DralError::Param("class and sample counts must be at least 1".into()));
        }
        if !self.cluster_std.is_finite() || self.cluster_std <= 0.0 {
            return Err(DralError::Param("cluster_std must be positive".into()));
        }
        let mut rng = stream_rng(seed, Stream::Data);
        let embed = orthonormal_embedding(self.dims, &mut rng);
        let centers = self.centers();
        let n = self.num_classes * self.samples_per_class;
        let mut coords = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..self.samples_per_class {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                coords.push([center[0] + self.cluster_std * dx, center[1] + self.cluster_std * dy]);
                labels.push(c);
            }
        }
        let features = Matrix::from_fn(n, self.dims, |r, c| embed[c][0] * coords[r][0] + embed[c][1] * coords[r][1]);
        Dataset::new(
            DatasetMeta { name: format!("blobs-{}c-{}d", self.num_classes, self.dims), seed },
            self.num_classes,
            features,
            Some(labels),
            Some(coords),
        )
    }
}

/// `dims × 2` map. Columns are orthonormal when `dims ≥ 2`; a single unit
/// row when `dims = 1`.
fn orthonormal_embedding<R: Rng>(dims: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut u: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut u);
    if dims == 1 {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        return vec![[angle.cos(), angle.sin()]];
    }
    let mut v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(b, a)| *b -= proj * a);
    normalize(&mut v);
    u.into_iter().zip(v).map(|(a, b)| [a, b]).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Blobs with the default center spacing.
pub fn make_gaussian_blobs(
    num_classes: usize,
    dims: usize,
    samples_per_class: usize,
    cluster_std: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobSpec { num_classes, dims, samples_per_class, cluster_std, ..BlobSpec::default() }.generate(seed)
}

/// Partition of a dataset's indices plus the oracle ledger.
///
/// `labels` holds every label obtained from the oracle so far, including
/// labels of samples that were queried but not (yet) admitted to the
/// labeled set; re-selecting such a sample costs nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    labeled: BTreeSet<usize>,
    unlabeled: BTreeSet<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
    labels: BTreeMap<usize, usize>,
    oracle_queries_spent: usize,
}

pub fn split_pool(
    dataset: &Dataset,
    seed_labeled_size: usize,
    validation_size: usize,
    test_size: usize,
    rng_seed: u64,
) -> Result<PoolState> {
    let n = dataset.len();
    let requested = seed_labeled_size + validation_size + test_size;
    if requested > n {
        return Err(DralError::Param(format!("seed + validation + test = {requested} exceeds {n} samples")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut stream_rng(rng_seed, Stream::Split));
    let (seed, rest) = ids.split_at(seed_labeled_size);
    let (val, rest) = rest.split_at(validation_size);
    let (test, unlabeled) = rest.split_at(test_size);
    Ok(PoolState {
        labeled: seed.iter().copied().collect(),
        unlabeled: unlabeled.iter().copied().collect(),
        validation: val.to_vec(),
        test: test.to_vec(),
        labels: BTreeMap::new(),
        oracle_queries_spent: seed_labeled_size,
    })
}

impl PoolState {
    pub fn labeled_ids(&self) -> Vec<usize> {
        self.labeled.iter().copied().collect()
    }

    pub fn unlabeled_ids(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn validation_ids(&self) -> &[usize] {
        &self.validation
    }

    pub fn test_ids(&self) -> &[usize] {
        &self.test
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn is_labeled(&self, id: usize) -> bool {
        self.labeled.contains(&id)
    }

    pub fn is_unlabeled(&self, id: usize) -> bool {
        self.unlabeled.contains(&id)
    }

    pub fn oracle_queries_spent(&self) -> usize {
        self.oracle_queries_spent
    }

    /// Label already obtained from the oracle, if any.
    pub fn known_label(&self, id: usize) -> Option<usize> {
        self.labels.get(&id).copied()
    }

    /// Labels of the labeled set, in ascending id order.
    pub fn labeled_with_labels(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let ids = self.labeled_ids();
        let labels = ids
            .iter()
            .map(|id| {
                self.known_label(*id).ok_or_else(|| DralError::State(format!("labeled sample {id} has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((ids, labels))
    }

    /// Asks the oracle for the seed set's labels. The seed set is already
    /// counted in the ledger by [`split_pool`].
    pub fn label_seed_set(&mut self, oracle: &mut dyn Oracle, num_classes: usize) -> Result<()> {
        let ids: Vec<usize> = self.labeled.iter().copied().filter(|id| !self.labels.contains_key(id)).collect();
        let labels = checked_query(oracle, &ids, num_classes)?;
        self.labels.extend(ids.into_iter().zip(labels));
        Ok(())
    }

    /// Labels for `ids` (all unlabeled), querying the oracle only for ids
    /// never queried before. Returns the labels in `ids` order and the
    /// number of fresh oracle queries.
    pub fn fetch_labels(
        &mut self,
        oracle: &mut dyn Oracle,
        ids: &[usize],
        num_classes: usize,
    ) -> Result<(Vec<usize>, usize)> {
        let mut fresh = Vec::new();
        let mut seen = BTreeSet::new();
        for &id in ids {
            if !self.unlabeled.contains(&id) {
                return Err(DralError::Param(format!("sample {id} is not in the unlabeled pool")));
            }
            if !seen.insert(id) {
                return Err(DralError::Param(format!("sample {id} requested twice")));
            }
            if !self.labels.contains_key(&id) {
                fresh.push(id);
            }
        }
        if !fresh.is_empty() {
            let labels = checked_query(oracle, &fresh, num_classes)?;
            self.oracle_queries_spent += fresh.len();
            self.labels.extend(fresh.iter().copied().zip(labels));
        }
        let labels = ids.iter().map(|id| self.labels[id]).collect();
        Ok((labels, fresh.len()))
    }

    /// Number of the given ids that would cost an oracle query.
    pub fn count_uncached(&self, ids: &[usize]) -> usize {
        ids.iter().filter(|id| !self.labels.contains_key(id)).count()
    }

    /// Moves already-labeled-by-oracle ids from the unlabeled to the labeled set.
    pub fn commit(&mut self, ids: &[usize]) -> Result<()> {
        for id in ids {
            if !self.unlabeled.contains(id) {
                return Err(DralError::State(format!("cannot commit {id}: not unlabeled")));
            }
            if !self.labels.contains_key(id) {
                return Err(DralError::State(format!("cannot commit {id}: no label obtained")));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.labeled.insert(*id);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Simulated,
    Deferred,
}

/// Label source for queried samples.
pub trait Oracle: Send {
    fn kind(&self) -> OracleKind;

    /// Labels for `ids`, in order.
    fn query(&mut self, ids: &[usize]) -> Result<Vec<usize>>;
}

fn checked_query(oracle: &mut dyn Oracle, ids: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let labels = oracle.query(ids)?;
    if labels.len() != ids.len() {
        return Err(DralError::Oracle(format!("asked for {} labels, got {}", ids.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(DralError::Oracle(format!("label {bad} out of range for {num_classes} classes")));
    }
    Ok(labels)
}

/// Answers from the dataset's ground truth.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    labels: Vec<usize>,
}

impl SimulatedOracle {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        Ok(SimulatedOracle { labels: dataset.true_labels()?.to_vec() })
    }
}

pub fn simulated_oracle(dataset: &Dataset) -> Result<SimulatedOracle> {
    SimulatedOracle::new(dataset)
}

impl Oracle for SimulatedOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Simulated
    }

    fn query(&mut self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                self.labels.get(i).copied().ok_or_else(|| {
                    DralError::Param(format!("sample id {i} out of range for {} samples", self.labels.len()))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        make_gaussian_blobs(4, 16, 500, 0.5, 11).unwrap()
    }

    fn nearest_center_accuracy(ds: &Dataset, spec: &BlobSpec) -> f64 {
        let centers = spec.centers();
        let coords = ds.coords.as_ref().unwrap();
        let labels = ds.true_labels().unwrap();
        let correct = coords
            .iter()
            .zip(labels)
            .filter(|(p, &y)| {
                let d = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                let best =
                    (0..centers.len()).min_by(|&a, &b| d(&centers[a]).partial_cmp(&d(&centers[b])).unwrap()).unwrap();
                best == y
            })
            .count();
        correct as f64 / labels.len() as f64
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(small(), small());
        assert_ne!(small().features, make_gaussian_blobs(4, 16, 500, 0.5, 12).unwrap().features);
    }

    #[test]
    fn tiny_std_is_perfectly_separable() {
        let spec = BlobSpec { cluster_std: 1e-9, samples_per_class: 50, ..BlobSpec::default() };
        let ds = spec.generate(3).unwrap();
        assert_eq!(nearest_center_accuracy(&ds, &spec), 1.0);
    }

    #[test]
    fn monte_carlo_bayes_accuracy() {
        // 4 classes, std 0.5, adjacent centers 4 apart.
        let spec = BlobSpec { cluster_std: 0.5, center_spacing: 4.0, samples_per_class: 2500, ..BlobSpec::default() };
        let ds = spec.generate(5).unwrap();
        assert!(nearest_center_accuracy(&ds, &spec) >= 0.99);
    }

    #[test]
    fn embedding_preserves_distances() {
        let ds = small();
        let c = ds.coords.as_ref().unwrap();
        for (a, b) in [(0, 1), (5, 900), (17, 1999)] {
            let df: f64 = ds.features.row(a).iter().zip(ds.features.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
            let dc = (c[a][0] - c[b][0]).powi(2) + (c[a][1] - c[b][1]).powi(2);
            assert!((df - dc).abs() < 1e-9 * (1.0 + dc));
        }
    }

    #[test]
    fn bad_parameters() {
        assert!(make_gaussian_blobs(4, 0, 10, 0.5, 1).is_err());
        assert!(make_gaussian_blobs(4, 2, 10, 0.0, 1).is_err());
    }

    #[test]
    fn split_sizes() {
        let ds = small();
        let pool = split_pool(&ds, 100, 200, 400, 9).unwrap();
        assert_eq!(pool.num_unlabeled(), 1300);
        assert_eq!(pool.num_labeled(), 100);
        assert_eq!(pool.oracle_queries_spent(), 100);
        let mut all: Vec<usize> = pool.labeled_ids();
        all.extend(pool.unlabeled_ids());
        all.extend(pool.validation_ids());
        all.extend(pool.test_ids());
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
    }

    #[test]
    fn split_all_labeled_and_oversized() {
        let ds = make_gaussian_blobs(2, 2, 10, 1.0, 1).unwrap();
        let pool = split_pool(&ds, 20, 0, 0, 1).unwrap();
        assert_eq!(pool.num_unlabeled(), 0);
        assert!(matches!(split_pool(&ds, 15, 5, 1, 1), Err(DralError::Param(_))));
    }

    #[test]
    fn seed_class_balance_is_hypergeometric() {
        let ds = small();
        let labels = ds.true_labels().unwrap();
        let (n_total, k_success, draws) = (2000.0, 500.0, 100.0);
        let mean = draws * k_success / n_total;
        let var = draws * (k_success / n_total) * (1.0 - k_success / n_total) * (n_total - draws) / (n_total - 1.0);
        let counts: Vec<f64> = (0..100)
            .map(|s| {
                let pool = split_pool(&ds, 100, 200, 400, s).unwrap();
                pool.labeled_ids().iter().filter(|&&i| labels[i] == 0).count() as f64
            })
            .collect();
        let avg = counts.iter().sum::<f64>() / counts.len() as f64;
        // standard error of the mean over 100 independent splits
        assert!((avg - mean).abs() <= 3.0 * (var / 100.0).sqrt(), "avg {avg} vs {mean}");
        for c in counts {
            assert!((c - mean).abs() <= 5.0 * var.sqrt());
        }
    }

    #[test]
    fn simulated_oracle_answers_truth() {
        let ds = small();
        let mut oracle = simulated_oracle(&ds).unwrap();
        assert!(oracle.query(&[]).unwrap().is_empty());
        assert_eq!(oracle.query(&[7]).unwrap(), vec![ds.true_labels().unwrap()[7]]);
        let all: Vec<usize> = (0..ds.len()).collect();
        assert_eq!(oracle.query(&all).unwrap(), ds.true_labels().unwrap());
        assert!(matches!(oracle.query(&[ds.len()]), Err(DralError::Param(_))));
    }

    #[test]
    fn ledger_counts_distinct_queries() {
        let ds = small();
        let mut oracle = simulated_oracle(&ds).unwrap();
        let mut pool = split_pool(&ds, 10, 0, 0, 4).unwrap();
        pool.label_seed_set(&mut oracle, 4).unwrap();
        assert_eq!(pool.oracle_queries_spent(), 10);
        let ids: Vec<usize> = pool.unlabeled_ids()[..5].to_vec();
        let (_, fresh) = pool.fetch_labels(&mut oracle, &ids, 4).unwrap();
        assert_eq!(fresh, 5);
        let (_, fresh) = pool.fetch_labels(&mut oracle, &ids[..3], 4).unwrap();
        assert_eq!(fresh, 0);
        assert_eq!(pool.oracle_queries_spent(), 15);
        pool.commit(&ids[..2]).unwrap();
        assert_eq!(pool.num_labeled() + pool.num_unlabeled(), 2000);
        assert!(pool.commit(&ids[..1]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let ds = make_gaussian_blobs(3, 4, 5, 1.0, 2).unwrap();
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
        let v: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
        for key in ["meta", "num_classes", "features", "labels"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
