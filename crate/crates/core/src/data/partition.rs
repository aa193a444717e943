//! Label-shift (Dirichlet) and covariate-shift client partitions.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor_nn::Matrix;

use super::{random_directions, ClientShard, LabeledDataset};

pub const DEFAULT_MIN_PER_CLIENT: usize = 10;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    DirichletLabel,
    CovariateShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    /// Dirichlet concentration; smaller is more heterogeneous.
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::invalid("num_clients must be >= 1"));
        }
        if self.scheme == PartitionScheme::DirichletLabel && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Rotation by `magnitude` radians inside a client-specific random 2-plane.
    Rotation,
    /// Translation by `magnitude` along a client-specific random unit vector.
    Affine,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(ShiftKind::Rotation),
            "affine" => Ok(ShiftKind::Affine),
            other => Err(Error::invalid(format!("unsupported shift kind `{other}` (rotation, affine)"))),
        }
    }
}

/// Splits each class across clients with `Dir(α·1_M)` proportions, redrawing
/// the whole partition until every client holds `min_per_client` rows.
/// Returned index lists are sorted, disjoint and cover `0..labels.len()`.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    spec: &PartitionSpec,
    min_per_client: usize,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if spec.scheme != PartitionScheme::DirichletLabel {
        return Err(Error::invalid("dirichlet_partition needs scheme dirichlet_label"));
    }
    let m = spec.num_clients;
    if labels.len() < m * min_per_client {
        return Err(Error::Infeasible(format!(
            "{} rows cannot give {m} clients {min_per_client} rows each",
            labels.len()
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label {y} out of range for {num_classes} classes")))?
            .push(i);
    }
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = stream_rng(spec.seed, Stream::Partition, &[]);
    for _ in 0..MAX_ATTEMPTS {
        let mut parts = vec![Vec::new(); m];
        for class_idx in &by_class {
            let mut idx = class_idx.clone();
            idx.shuffle(&mut rng);
            let props = dirichlet(&gamma, m, &mut rng);
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == m { n } else { ((cum * n as f64).round() as usize).min(n) };
                parts[client].extend_from_slice(&idx[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if parts.iter().all(|p| p.len() >= min_per_client) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::Infeasible(format!(
        "no Dirichlet(alpha={}) draw gave all {m} clients >= {min_per_client} rows in {MAX_ATTEMPTS} attempts",
        spec.alpha
    )))
}

fn dirichlet<R: Rng + ?Sized>(gamma: &Gamma<f64>, m: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return g.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Stratified split with equal label histograms (within one row per class),
/// then a client-specific input transform. Client 0 keeps the identity as the
/// reference domain; `magnitude = 0` makes every transform the identity.
pub fn covariate_shift_partition(
    data: &LabeledDataset,
    num_clients: usize,
    kind: ShiftKind,
    magnitude: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if num_clients < 2 {
        return Err(Error::invalid("covariate shift needs >= 2 clients"));
    }
    if !magnitude.is_finite() {
        return Err(Error::invalid("shift magnitude must be finite"));
    }
    let mut rng = stream_rng(seed, Stream::Partition, &[1]);
    let mut by_class = vec![Vec::new(); data.num_classes()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut parts = vec![Vec::new(); num_clients];
    let mut next = 0;
    for class_idx in &mut by_class {
        class_idx.shuffle(&mut rng);
        for &i in class_idx.iter() {
            parts[next].push(i);
            next = (next + 1) % num_clients;
        }
    }
    let d = data.input_dim();
    let mut shards = Vec::with_capacity(num_clients);
    for (client, mut indices) in parts.into_iter().enumerate() {
        indices.sort_unstable();
        let mut shard = data.select(&indices)?;
        if client > 0 {
            let mut trng = stream_rng(seed, Stream::Partition, &[2, client as u64]);
            let inputs = match kind {
                ShiftKind::Affine => {
                    let dir = random_directions(1, d, &mut trng);
                    translate(shard.inputs(), dir.row(0), magnitude)
                }
                ShiftKind::Rotation => {
                    if d < 2 {
                        return Err(Error::invalid("rotation shift needs input_dim >= 2"));
                    }
                    let plane = random_directions(2, d, &mut trng);
                    rotate_in_plane(shard.inputs(), plane.row(0), plane.row(1), magnitude)
                }
            };
            shard = shard.with_inputs(inputs)?;
        }
        shards.push(ClientShard { indices, data: shard });
    }
    Ok(shards)
}

fn translate(x: &Matrix, dir: &[f64], magnitude: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, u) in out.row_mut(i).iter_mut().zip(dir) {
            *v += magnitude * u;
        }
    }
    out
}

/// `x + (cos θ − 1)(⟨x,a⟩a + ⟨x,b⟩b) + sin θ (⟨x,a⟩b − ⟨x,b⟩a)` for orthonormal `a`, `b`.
fn rotate_in_plane(x: &Matrix, a: &[f64], b: &[f64], angle: f64) -> Matrix {
    let (s, c) = angle.sin_cos();
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let pa: f64 = row.iter().zip(a).map(|(v, u)| v * u).sum();
        let pb: f64 = row.iter().zip(b).map(|(v, u)| v * u).sum();
        for ((v, &ua), &ub) in row.iter_mut().zip(a).zip(b) {
            *v += (c - 1.0) * (pa * ua + pb * ub) + s * (pa * ub - pb * ua);
        }
    }
    out
}

pub fn label_histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &y in labels {
        if y < num_classes {
            h[y] += 1;
        }
    }
    h
}

/// Total-variation distance between two label histograms (normalized).
pub fn label_tv_distance(a: &[usize], b: &[usize]) -> f64 {
    let na: usize = a.iter().sum();
    let nb: usize = b.iter().sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na as f64 - y as f64 / nb as f64).abs())
        .sum::<f64>()
}

/// Mean over clients of the TV distance between each client's label
/// histogram and the overall one.
pub fn mean_label_tv(labels: &[usize], num_classes: usize, parts: &[Vec<usize>]) -> f64 {
    if parts.is_empty() {
        return 0.0;
    }
    let global = label_histogram(labels, num_classes);
    parts
        .iter()
        .map(|p| {
            let ys: Vec<usize> = p.iter().map(|&i| labels[i]).collect();
            label_tv_distance(&label_histogram(&ys, num_classes), &global)
        })
        .sum::<f64>()
        / parts.len() as f64
}

