//! Frozen backbone plus residual adapters.
//!
//! One [`NetSpec`] fixes the layout shared by every adapter in a run
//! (personalized, local and global), so adapters can be averaged and compared
//! coordinate-wise.

mod snapshot;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_nn::{GradTape, Layer, Matrix, Network, ParamVector};

pub use snapshot::{decode_snapshot, encode_snapshot, read_snapshot, write_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

/// Adapters share the flat vector representation.
pub type AdapterParams = ParamVector;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Bottleneck width of each adapter.
    pub adapter_rank: usize,
    /// Indices into `hidden_dims` that carry an adapter after their ReLU.
    pub adapter_positions: Vec<usize>,
    /// Adds a zero-initialized trainable delta on the classification head.
    pub adapter_includes_head: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl NetSpec {
    /// Desk default: 20 → [64, 64] → 10, rank-4 adapters on both hidden layers.
    pub fn desk_default() -> Self {
        Self {
            input_dim: 20,
            hidden_dims: vec![64, 64],
            num_classes: 10,
            adapter_rank: 4,
            adapter_positions: vec![0, 1],
            adapter_includes_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("network dimensions must be > 0"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.adapter_rank == 0 {
            return Err(Error::invalid("adapter_rank must be >= 1"));
        }
        let mut seen = vec![false; self.hidden_dims.len()];
        for &p in &self.adapter_positions {
            if p >= self.hidden_dims.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!(
                    "adapter position {p} is out of range or repeated (hidden layers: {})",
                    self.hidden_dims.len()
                )));
            }
        }
        let counts = self.param_counts();
        if counts.adapter >= counts.backbone {
            return Err(Error::invalid(format!(
                "adapter ({}) must be smaller than the backbone ({})",
                counts.adapter, counts.backbone
            )));
        }
        Ok(())
    }

    fn trunk_layers(&self, trainable: bool, with_adapters: bool) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut prev = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            layers.push(Layer::Linear {
                input: prev,
                output: h,
                trainable,
                delta: false,
            });
            layers.push(Layer::Relu);
            if with_adapters && self.adapter_positions.contains(&i) {
                layers.push(Layer::Adapter {
                    dim: h,
                    rank: self.adapter_rank,
                });
            }
            prev = h;
        }
        layers.push(Layer::Linear {
            input: prev,
            output: self.num_classes,
            trainable,
            delta: with_adapters && self.adapter_includes_head,
        });
        layers
    }

    /// Backbone (frozen) plus adapters (trainable).
    pub fn adapter_network(&self) -> Result<Network> {
        Network::new(self.input_dim, self.trunk_layers(false, true))
    }

    /// The plain trunk with every weight trainable: used for pretraining and
    /// for full-model personalization baselines.
    pub fn full_network(&self) -> Result<Network> {
        Network::new(self.input_dim, self.trunk_layers(true, false))
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut backbone = 0;
        let mut adapter = 0;
        let mut prev = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            backbone += prev * h + h;
            if self.adapter_positions.contains(&i) {
                adapter += 2 * h * self.adapter_rank + self.adapter_rank;
            }
            prev = h;
        }
        let head = prev * self.num_classes + self.num_classes;
        backbone += head;
        if self.adapter_includes_head {
            adapter += head;
        }
        ParamCounts::from_counts(backbone, adapter)
    }

    /// Stable 64-bit FNV-1a hash of the canonical spec string.
    pub fn spec_hash(&self) -> u64 {
        let join = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let canon = format!(
            "in={};h={};k={};r={};pos={};head={}",
            self.input_dim,
            join(&self.hidden_dims),
            self.num_classes,
            self.adapter_rank,
            join(&self.adapter_positions),
            u8::from(self.adapter_includes_head)
        );
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canon.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub adapter: usize,
    /// `adapter / (backbone + adapter)`
    pub trainable_fraction: f64,
}

impl ParamCounts {
    pub fn from_counts(backbone: usize, adapter: usize) -> Self {
        let total = backbone + adapter;
        let trainable_fraction = if total == 0 {
            0.0
        } else {
            adapter as f64 / total as f64
        };
        Self {
            backbone,
            adapter,
            trainable_fraction,
        }
    }
}

/// Pretrained trunk parameters `u`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: NetSpec,
    params: ParamVector,
}

/// Random He-initialized backbone (`N(0, 2/fan_in)` weights, zero biases).
pub fn build_backbone<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Backbone> {
    spec.validate()?;
    let mut params = Vec::with_capacity(spec.param_counts().backbone);
    let mut prev = spec.input_dim;
    for &out in spec.hidden_dims.iter().chain(std::iter::once(&spec.num_classes)) {
        let normal = Normal::new(0.0, (2.0 / prev as f64).sqrt()).expect("valid std");
        params.extend((0..prev * out).map(|_| normal.sample(rng)));
        params.extend(std::iter::repeat_n(0.0, out));
        prev = out;
    }
    Backbone::from_params(spec.clone(), ParamVector::from_vec(params))
}

impl Backbone {
    pub fn from_params(spec: NetSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_counts().backbone;
        if params.len() != expected {
            return Err(Error::shape("backbone parameters", expected, params.len()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Logits of the backbone alone (no adapter layers in the graph).
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        let net = self.spec.full_network()?;
        net.predict(&ParamVector::zeros(0), &self.params, inputs)
    }
}

/// `f((u, a), x)`: a network plus the frozen parameters it runs with.
///
/// Two flavours share this type. The adapter flavour keeps `u` frozen and
/// trains adapter blocks. The full-model flavour has no frozen group; its
/// trainable vector is a complete copy of the trunk.
#[derive(Debug, Clone)]
pub struct AdapterNet {
    spec: NetSpec,
    network: Arc<Network>,
    frozen: Arc<ParamVector>,
    full_model: bool,
}

impl AdapterNet {
    pub fn new(backbone: &Backbone) -> Result<Self> {
        Ok(Self {
            spec: backbone.spec.clone(),
            network: Arc::new(backbone.spec.adapter_network()?),
            frozen: Arc::new(backbone.params.clone()),
            full_model: false,
        })
    }

    /// Trainable copy of the whole trunk. Initial parameters: `backbone.params()`.
    pub fn full_model(backbone: &Backbone) -> Result<Self> {
        Ok(Self {
            spec: backbone.spec.clone(),
            network: Arc::new(backbone.spec.full_network()?),
            frozen: Arc::new(ParamVector::zeros(0)),
            full_model: true,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn frozen_params(&self) -> &ParamVector {
        &self.frozen
    }

    pub fn is_full_model(&self) -> bool {
        self.full_model
    }

    pub fn trainable_len(&self) -> usize {
        self.network.trainable_len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Per-position parameter ranges inside an adapter vector.
    pub fn adapter_blocks(&self) -> Vec<std::ops::Range<usize>> {
        self.network.adapter_ranges()
    }

    pub fn forward(&self, adapter: &AdapterParams, inputs: &Matrix) -> Result<(Matrix, GradTape)> {
        self.network.forward(&self.frozen, adapter, inputs)
    }

    pub fn predict(&self, adapter: &AdapterParams, inputs: &Matrix) -> Result<Matrix> {
        self.network.predict(&self.frozen, adapter, inputs)
    }

    pub fn backward(&self, tape: &GradTape, upstream: &Matrix) -> Result<AdapterParams> {
        self.network.backward(tape, upstream)
    }
}

/// Same as [`AdapterNet::forward`], spelled the way callers reason about it.
pub fn adapter_forward(
    net: &AdapterNet,
    adapter: &AdapterParams,
    inputs: &Matrix,
) -> Result<(Matrix, GradTape)> {
    net.forward(adapter, inputs)
}

/// Adapter whose residual branches output exactly zero: up-projections and
/// biases are zero, down-projections are He-initialized so gradients can
/// reach them once the up-projection moves.
pub fn init_adapter_zero<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<AdapterParams> {
    spec.validate()?;
    let net = spec.adapter_network()?;
    let mut params = vec![0.0; net.trainable_len()];
    let r = spec.adapter_rank;
    for (range, &pos) in net.adapter_ranges().iter().zip(&spec.adapter_positions) {
        let dim = spec.hidden_dims[pos];
        let normal = Normal::new(0.0, (2.0 / dim as f64).sqrt()).expect("valid std");
        for v in &mut params[range.start..range.start + r * dim] {
            *v = normal.sample(rng);
        }
    }
    Ok(ParamVector::from_vec(params))
}

/// Coordinate-wise weighted mean. `weights` must sum to 1; uniform when absent.
///
/// The uniform mean is computed as `p_0 + Σ (p_i - p_0) / n`, which returns
/// `p` exactly when every input equals `p`.
pub fn average_params(params: &[AdapterParams], weights: Option<&[f64]>) -> Result<AdapterParams> {
    let first = params.first().ok_or(Error::Empty("parameter list"))?;
    for p in params {
        if p.len() != first.len() {
            return Err(Error::shape("average_params", first.len(), p.len()));
        }
    }
    match weights {
        None => {
            let n = params.len() as f64;
            let mut out = first.clone();
            let base = first.as_slice();
            for (j, o) in out.as_mut_slice().iter_mut().enumerate() {
                let dev: f64 = params[1..].iter().map(|p| p.as_slice()[j] - base[j]).sum();
                *o = base[j] + dev / n;
            }
            Ok(out)
        }
        Some(w) => {
            if w.len() != params.len() {
                return Err(Error::shape("average_params weights", params.len(), w.len()));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 || w.iter().any(|&x| x < 0.0) {
                return Err(Error::invalid(format!(
                    "averaging weights must be nonnegative and sum to 1, got sum {total}"
                )));
            }
            let mut out = ParamVector::zeros(first.len());
            for (p, &wi) in params.iter().zip(w) {
                out.axpy(wi, p)?;
            }
            Ok(out)
        }
    }
}

/// `Σ_positions ‖a_pos - b_pos‖²` plus any non-adapter trainable blocks.
pub fn blockwise_sq_distance(
    net: &AdapterNet,
    a: &AdapterParams,
    b: &AdapterParams,
) -> Result<f64> {
    if a.len() != b.len() || a.len() != net.trainable_len() {
        return Err(Error::shape("blockwise_sq_distance", a.len(), b.len()));
    }
    let blocks = net.adapter_blocks();
    let mut covered = vec![false; a.len()];
    let mut total = 0.0;
    let mut add = |r: std::ops::Range<usize>| -> f64 {
        r.map(|i| {
            covered[i] = true;
            let d = a.as_slice()[i] - b.as_slice()[i];
            d * d
        })
        .sum()
    };
    for r in blocks {
        total += add(r);
    }
    let rest: Vec<usize> = (0..a.len()).filter(|&i| !covered[i]).collect();
    for i in rest {
        let d = a.as_slice()[i] - b.as_slice()[i];
        total += d * d;
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
