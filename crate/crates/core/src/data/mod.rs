//! Desk-scale datasets and the heterogeneity protocol.
//!
//! Everything here is a pure function of its arguments and seed: generators,
//! partitions, splits, distillation pools and corruptions.

mod corrupt;
mod idx;
mod partition;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor_nn::{Batch, Matrix};

pub use corrupt::{corrupt, CorruptionKind, SEVERITY_LEVELS};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{
    covariate_shift_partition, dirichlet_partition, label_histogram, label_tv_distance,
    mean_label_tv, PartitionScheme, PartitionSpec, ShiftKind, DEFAULT_MIN_PER_CLIENT,
};

/// Inputs with class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("dataset rows vs labels", inputs.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `indices`, in that order. Fails if the selection is empty.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {bad} out of range for {} rows", self.len())));
        }
        LabeledDataset::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Concatenation in argument order.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let inputs = Matrix::vstack(&parts.iter().map(|p| &p.inputs).collect::<Vec<_>>())?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        LabeledDataset::new(inputs, labels, first.num_classes)
    }

    pub fn batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: Some(self.labels.clone()),
        }
    }

    /// Same labels, new inputs (used by transforms and corruptions).
    pub(crate) fn with_inputs(&self, inputs: Matrix) -> Result<LabeledDataset> {
        LabeledDataset::new(inputs, self.labels.clone(), self.num_classes)
    }
}

/// Unlabeled auxiliary inputs for server-side distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    inputs: Matrix,
}

impl UnlabeledPool {
    pub fn new(inputs: Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Empty("distillation pool"));
        }
        Ok(Self { inputs })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// The first `ceil(fraction · n)` rows; the pool is already in random order.
    pub fn fraction(&self, fraction: f64) -> Result<UnlabeledPool> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("distillation fraction must be in (0, 1], got {fraction}")));
        }
        let n = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len());
        let idx: Vec<usize> = (0..n).collect();
        UnlabeledPool::new(self.inputs.select_rows(&idx))
    }
}

/// Isotropic Gaussian class clusters with unit noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Matrix,
    noise_std: f64,
}

impl GaussianMixture {
    /// `k` class means with pairwise distance `class_sep` when `k <= d`
    /// (scaled orthonormal directions); random unit directions otherwise.
    pub fn new(k: usize, d: usize, class_sep: f64, seed: u64) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(Error::invalid(format!("need k >= 2 and d >= 1, got k={k}, d={d}")));
        }
        if !(class_sep >= 0.0) || !class_sep.is_finite() {
            return Err(Error::invalid(format!("class_sep must be finite and >= 0, got {class_sep}")));
        }
        let mut rng = stream_rng(seed, Stream::DatasetMeans, &[]);
        let dirs = random_directions(k, d, &mut rng);
        let scale = class_sep / std::f64::consts::SQRT_2;
        Ok(Self {
            means: dirs.map(|v| v * scale),
            noise_std: 1.0,
        })
    }

    pub fn from_means(means: Matrix, noise_std: f64) -> Result<Self> {
        if means.rows() < 2 || means.cols() == 0 {
            return Err(Error::invalid("a mixture needs >= 2 means of dimension >= 1"));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
        }
        Ok(Self { means, noise_std })
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.means.cols()
    }

    /// A related task: every mean moved by independent `N(0, shift²)` noise.
    pub fn perturbed(&self, shift: f64, seed: u64) -> Result<GaussianMixture> {
        let mut rng = stream_rng(seed, Stream::DatasetMeans, &[1]);
        let mut means = self.means.clone();
        for v in means.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += shift * z;
        }
        GaussianMixture::from_means(means, self.noise_std)
    }

    /// `n` samples with balanced labels (counts differ by at most one), in
    /// shuffled order.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<LabeledDataset> {
        let k = self.num_classes();
        if n < k {
            return Err(Error::invalid(format!("need n >= k, got n={n}, k={k}")));
        }
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(rng);
        let d = self.input_dim();
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            for &m in self.means.row(y) {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + self.noise_std * z);
            }
        }
        LabeledDataset::new(Matrix::from_vec(n, d, data)?, labels, k)
    }
}

/// `k` unit vectors in `R^d`: orthonormal (Gram-Schmidt on Gaussian draws)
/// when `k <= d`, independent uniform directions otherwise.
fn random_directions<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros(k, d);
    for i in 0..k {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            if k <= d {
                for j in 0..i {
                    let prev = out.row(j);
                    let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (a, b) in v.iter_mut().zip(prev) {
                        *a -= proj * b;
                    }
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (o, a) in out.row_mut(i).iter_mut().zip(&v) {
                    *o = a / norm;
                }
                break;
            }
        }
    }
    out
}

/// `n` balanced samples from a fresh mixture with the given parameters.
pub fn synth_gaussian_mixture(k: usize, d: usize, n: usize, class_sep: f64, seed: u64) -> Result<LabeledDataset> {
    let mixture = GaussianMixture::new(k, d, class_sep, seed)?;
    mixture.sample(n, &mut stream_rng(seed, Stream::DatasetSamples, &[]))
}

/// Where distillation inputs come from.
pub enum PoolSource<'a> {
    /// Held-out rows of an existing dataset (labels dropped).
    Dataset(&'a LabeledDataset),
    /// Fresh draws from a generator (labels dropped).
    Generator(&'a GaussianMixture),
}

pub fn make_distillation_pool(source: PoolSource<'_>, n_aux: usize, seed: u64) -> Result<UnlabeledPool> {
    if n_aux == 0 {
        return Err(Error::invalid("n_aux must be >= 1"));
    }
    let mut rng = stream_rng(seed, Stream::DistillPool, &[]);
    match source {
        PoolSource::Dataset(ds) => {
            if n_aux > ds.len() {
                return Err(Error::invalid(format!(
                    "n_aux ({n_aux}) exceeds the source dataset ({})",
                    ds.len()
                )));
            }
            let idx = rand::seq::index::sample(&mut rng, ds.len(), n_aux).into_vec();
            UnlabeledPool::new(ds.inputs().select_rows(&idx))
        }
        PoolSource::Generator(g) => {
            let n = n_aux.max(g.num_classes());
            let sample = g.sample(n, &mut rng)?;
            let idx: Vec<usize> = (0..n_aux).collect();
            UnlabeledPool::new(sample.inputs().select_rows(&idx))
        }
    }
}

/// One client's shard before the train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    /// Row indices into the source dataset.
    pub indices: Vec<usize>,
    /// The rows themselves (possibly transformed).
    pub data: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Source-row indices of `train` and `test`.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub data: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    /// Union of the clients' local-test splits, in client order.
    pub global_test: LabeledDataset,
    pub distill_pool: UnlabeledPool,
    pub ood: Vec<OodSet>,
}

/// Share of each shard held out as its local-test split.
pub const TEST_FRACTION: f64 = 0.2;

impl FederatedDataset {
    /// Splits every shard 80/20 (shuffled, at least one test row and one train
    /// row per client) and pools the test splits into the global test set.
    pub fn assemble(shards: Vec<ClientShard>, distill_pool: UnlabeledPool, seed: u64) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Empty("client list"));
        }
        let mut clients = Vec::with_capacity(shards.len());
        for (id, shard) in shards.into_iter().enumerate() {
            let n = shard.data.len();
            if n < 2 {
                return Err(Error::Infeasible(format!("client {id} has {n} rows; need >= 2 for a train/test split")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(seed, Stream::TestSplit, &[id as u64]));
            let n_test = ((TEST_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
            let (test_pos, train_pos) = order.split_at(n_test);
            clients.push(ClientData {
                id,
                train: shard.data.select(train_pos)?,
                test: shard.data.select(test_pos)?,
                train_indices: train_pos.iter().map(|&p| shard.indices[p]).collect(),
                test_indices: test_pos.iter().map(|&p| shard.indices[p]).collect(),
            });
        }
        let tests: Vec<&LabeledDataset> = clients.iter().map(|c| &c.test).collect();
        let global_test = LabeledDataset::concat(&tests)?;
        Ok(Self {
            clients,
            global_test,
            distill_pool,
            ood: Vec::new(),
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_classes(&self) -> usize {
        self.global_test.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.global_test.input_dim()
    }

    /// Adds corrupted copies of the global test set at every listed severity.
    pub fn with_ood(mut self, kinds: &[CorruptionKind], severities: &[u8], seed: u64) -> Result<Self> {
        for &kind in kinds {
            for &severity in severities {
                let data = corrupt(&self.global_test, kind, severity, seed)?;
                self.ood.push(OodSet { kind, severity, data });
            }
        }
        Ok(self)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            num_classes: self.num_classes(),
            input_dim: self.input_dim(),
            distill_pool_size: self.distill_pool.len(),
            global_test_size: self.global_test.len(),
            clients: self
                .clients
                .iter()
                .map(|c| ManifestClient {
                    id: c.id,
                    train: c.train_indices.clone(),
                    test: c.test_indices.clone(),
                    label_histogram: label_histogram(c.train.labels(), self.num_classes()),
                })
                .collect(),
        }
    }
}

/// Reproducibility record of a partition: client id to source-row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub input_dim: usize,
    pub distill_pool_size: usize,
    pub global_test_size: usize,
    pub clients: Vec<ManifestClient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClient {
    pub id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub label_histogram: Vec<usize>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
