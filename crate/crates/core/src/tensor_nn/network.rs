//! Sequential networks over a fixed layer vocabulary with exact reverse-mode
//! gradients.
//!
//! Parameters live in two groups. The *frozen* group feeds the forward pass
//! only; the *trainable* group is what [`Network::backward`] differentiates.
//! Each layer draws its parameters from its group in layer order.

use super::matrix::{dot, linear_into, relu_grad, Matrix};
use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Layer {
    /// Affine map `input -> output` with weights `output × input` then bias.
    /// `trainable` selects the parameter group. With `delta`, a second
    /// trainable weight/bias block of the same shape is added to the frozen
    /// one (`W + ΔW`), starting from zero.
    Linear {
        input: usize,
        output: usize,
        trainable: bool,
        delta: bool,
    },
    Relu,
    /// Bottleneck residual adapter: `h + Up · relu(Down · h + b)`.
    /// Trainable layout: `Down (rank × dim)`, `b (rank)`, `Up (dim × rank)`.
    Adapter { dim: usize, rank: usize },
}

impl Layer {
    fn frozen_len(&self) -> usize {
        match *self {
            Layer::Linear {
                input,
                output,
                trainable: false,
                ..
            } => input * output + output,
            _ => 0,
        }
    }

    fn trainable_len(&self) -> usize {
        match *self {
            Layer::Linear {
                input,
                output,
                trainable,
                delta,
            } => {
                let block = input * output + output;
                usize::from(trainable) * block + usize::from(delta) * block
            }
            Layer::Relu => 0,
            Layer::Adapter { dim, rank } => 2 * dim * rank + rank,
        }
    }
}

/// Labeled or unlabeled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn labeled(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::shape("Batch::labeled", inputs.rows(), labels.len()));
        }
        Ok(Self {
            inputs,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(inputs: Matrix) -> Self {
        Self {
            inputs,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    frozen: usize,
    trainable: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
    offsets: Vec<(usize, usize)>,
    frozen_len: usize,
    trainable_len: usize,
    output_dim: usize,
    fingerprint: u64,
}

/// Activations cached by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    fingerprint: u64,
    frozen: Vec<f64>,
    trainable: Vec<f64>,
    /// Input of each layer.
    inputs: Vec<Matrix>,
    /// Bottleneck pre-activations for adapter layers.
    bottleneck: Vec<Option<Matrix>>,
    output_shape: (usize, usize),
    min_abs_preactivation: f64,
}

impl GradTape {
    /// Smallest |pre-activation| seen at any ReLU; finite-difference checks use
    /// it to stay away from kinks.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.min_abs_preactivation
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("network input dimension must be > 0"));
        }
        let mut dim = input_dim;
        let mut offsets = Vec::with_capacity(layers.len());
        let (mut f, mut t) = (0, 0);
        for layer in &layers {
            match *layer {
                Layer::Linear { input, output, .. } => {
                    if input != dim {
                        return Err(Error::shape("Network::new (linear input)", dim, input));
                    }
                    if output == 0 {
                        return Err(Error::invalid("linear layer output must be > 0"));
                    }
                    dim = output;
                }
                Layer::Relu => {}
                Layer::Adapter { dim: d, rank } => {
                    if d != dim {
                        return Err(Error::shape("Network::new (adapter dim)", dim, d));
                    }
                    if rank == 0 {
                        return Err(Error::invalid("adapter rank must be >= 1"));
                    }
                }
            }
            offsets.push((f, t));
            f += layer.frozen_len();
            t += layer.trainable_len();
        }
        let fingerprint = fnv1a(format!("{input_dim}:{layers:?}").into_bytes());
        Ok(Self {
            input_dim,
            layers,
            offsets,
            frozen_len: f,
            trainable_len: t,
            output_dim: dim,
            fingerprint,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn frozen_len(&self) -> usize {
        self.frozen_len
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable_len
    }

    /// Trainable-vector ranges of each adapter layer, in layer order.
    pub fn adapter_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers
            .iter()
            .zip(&self.offsets)
            .filter(|(l, _)| matches!(l, Layer::Adapter { .. }))
            .map(|(l, &(_, t))| t..t + l.trainable_len())
            .collect()
    }

    fn check_params(&self, frozen: &ParamVector, trainable: &ParamVector) -> Result<()> {
        if frozen.len() != self.frozen_len {
            return Err(Error::shape("frozen parameters", self.frozen_len, frozen.len()));
        }
        if trainable.len() != self.trainable_len {
            return Err(Error::shape(
                "trainable parameters",
                self.trainable_len,
                trainable.len(),
            ));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim {
            return Err(Error::shape("network inputs", self.input_dim, inputs.shape()));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(
        &self,
        frozen: &ParamVector,
        trainable: &ParamVector,
        inputs: &Matrix,
    ) -> Result<Matrix> {
        self.check_params(frozen, trainable)?;
        self.check_inputs(inputs)?;
        let mut h = inputs.clone();
        for (layer, &(fo, to)) in self.layers.iter().zip(&self.offsets) {
            let off = Offsets {
                frozen: fo,
                trainable: to,
            };
            h = self.layer_forward(layer, off, frozen.as_slice(), trainable.as_slice(), &h, None);
        }
        Ok(h)
    }

    pub fn forward(
        &self,
        frozen: &ParamVector,
        trainable: &ParamVector,
        inputs: &Matrix,
    ) -> Result<(Matrix, GradTape)> {
        self.check_params(frozen, trainable)?;
        self.check_inputs(inputs)?;
        let mut tape_inputs = Vec::with_capacity(self.layers.len());
        let mut bottleneck = Vec::with_capacity(self.layers.len());
        let mut min_abs = f64::INFINITY;
        let mut h = inputs.clone();
        for (layer, &(fo, to)) in self.layers.iter().zip(&self.offsets) {
            let off = Offsets {
                frozen: fo,
                trainable: to,
            };
            let mut z = None;
            let next = self.layer_forward(
                layer,
                off,
                frozen.as_slice(),
                trainable.as_slice(),
                &h,
                Some(&mut z),
            );
            if matches!(layer, Layer::Relu) {
                min_abs = h.as_slice().iter().fold(min_abs, |m, v| m.min(v.abs()));
            }
            if let Some(zm) = &z {
                min_abs = zm.as_slice().iter().fold(min_abs, |m, v| m.min(v.abs()));
            }
            tape_inputs.push(std::mem::replace(&mut h, next));
            bottleneck.push(z);
        }
        let tape = GradTape {
            fingerprint: self.fingerprint,
            frozen: frozen.as_slice().to_vec(),
            trainable: trainable.as_slice().to_vec(),
            inputs: tape_inputs,
            bottleneck,
            output_shape: h.shape(),
            min_abs_preactivation: min_abs,
        };
        Ok((h, tape))
    }

    fn linear_weights<'a>(
        layer: &Layer,
        off: Offsets,
        frozen: &'a [f64],
        trainable: &'a [f64],
    ) -> std::borrow::Cow<'a, [f64]> {
        let Layer::Linear {
            input,
            output,
            trainable: is_trainable,
            delta,
        } = *layer
        else {
            unreachable!()
        };
        let block = input * output + output;
        let base = if is_trainable {
            &trainable[off.trainable..off.trainable + block]
        } else {
            &frozen[off.frozen..off.frozen + block]
        };
        if !delta {
            return std::borrow::Cow::Borrowed(base);
        }
        let dstart = off.trainable + if is_trainable { block } else { 0 };
        let d = &trainable[dstart..dstart + block];
        std::borrow::Cow::Owned(base.iter().zip(d).map(|(a, b)| a + b).collect())
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        off: Offsets,
        frozen: &[f64],
        trainable: &[f64],
        h: &Matrix,
        bottleneck: Option<&mut Option<Matrix>>,
    ) -> Matrix {
        match *layer {
            Layer::Linear { input, output, .. } => {
                let wb = Self::linear_weights(layer, off, frozen, trainable);
                let (w, b) = wb.split_at(input * output);
                let mut out = Matrix::zeros(h.rows(), output);
                linear_into(w, b, h, output, &mut out);
                out
            }
            Layer::Relu => h.map(|v| if v > 0.0 { v } else { 0.0 }),
            Layer::Adapter { dim, rank } => {
                let p = &trainable[off.trainable..off.trainable + 2 * dim * rank + rank];
                let (down, rest) = p.split_at(rank * dim);
                let (bias, up) = rest.split_at(rank);
                let mut z = Matrix::zeros(h.rows(), rank);
                linear_into(down, bias, h, rank, &mut z);
                let mut out = h.clone();
                let mut act = vec![0.0; rank];
                for i in 0..h.rows() {
                    for (a, &zv) in act.iter_mut().zip(z.row(i)) {
                        *a = if zv > 0.0 { zv } else { 0.0 };
                    }
                    let oi = out.row_mut(i);
                    for (j, o) in oi.iter_mut().enumerate() {
                        *o += dot(&up[j * rank..(j + 1) * rank], &act);
                    }
                }
                if let Some(slot) = bottleneck {
                    *slot = Some(z);
                }
                out
            }
        }
    }

    /// Gradient of the trainable group given `∂loss/∂logits`. Frozen
    /// parameters get no entries.
    pub fn backward(&self, tape: &GradTape, upstream: &Matrix) -> Result<ParamVector> {
        if tape.fingerprint != self.fingerprint || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape("tape recorded on a different network".into()));
        }
        if upstream.shape() != tape.output_shape {
            return Err(Error::StaleTape(format!(
                "upstream {:?} vs logits {:?}",
                upstream.shape(),
                tape.output_shape
            )));
        }
        let frozen = tape.frozen.as_slice();
        let trainable = tape.trainable.as_slice();
        let mut grad = vec![0.0; self.trainable_len];
        let mut g = upstream.clone();
        for (idx, (layer, &(fo, to))) in self.layers.iter().zip(&self.offsets).enumerate().rev() {
            let off = Offsets {
                frozen: fo,
                trainable: to,
            };
            let x = &tape.inputs[idx];
            g = match *layer {
                Layer::Linear {
                    input,
                    output,
                    trainable: is_trainable,
                    delta,
                } => {
                    let block = input * output + output;
                    let mut slots = Vec::new();
                    if is_trainable {
                        slots.push(off.trainable);
                    }
                    if delta {
                        slots.push(off.trainable + if is_trainable { block } else { 0 });
                    }
                    if !slots.is_empty() {
                        // dW = gᵀ x, db = Σ g; shared by the base and delta blocks.
                        let mut gw = vec![0.0; block];
                        for i in 0..x.rows() {
                            let gi = g.row(i);
                            let xi = x.row(i);
                            for (o, &go) in gi.iter().enumerate() {
                                if go != 0.0 {
                                    let row = &mut gw[o * input..(o + 1) * input];
                                    for (r, &xv) in row.iter_mut().zip(xi) {
                                        *r += go * xv;
                                    }
                                }
                                gw[input * output + o] += go;
                            }
                        }
                        for s in slots {
                            for (dst, v) in grad[s..s + block].iter_mut().zip(&gw) {
                                *dst += v;
                            }
                        }
                    }
                    if idx == 0 {
                        break;
                    }
                    let wb = Self::linear_weights(layer, off, frozen, trainable);
                    let w = &wb[..input * output];
                    let mut dx = Matrix::zeros(g.rows(), input);
                    for i in 0..g.rows() {
                        let gi = g.row(i);
                        let di = dx.row_mut(i);
                        for (o, &go) in gi.iter().enumerate() {
                            if go != 0.0 {
                                for (d, &wv) in di.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                                    *d += go * wv;
                                }
                            }
                        }
                    }
                    dx
                }
                Layer::Relu => {
                    let mut dx = g;
                    for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *d *= relu_grad(xv);
                    }
                    dx
                }
                Layer::Adapter { dim, rank } => {
                    let z = tape.bottleneck[idx]
                        .as_ref()
                        .ok_or_else(|| Error::StaleTape("missing adapter activations".into()))?;
                    let p = &trainable[off.trainable..off.trainable + 2 * dim * rank + rank];
                    let (down, rest) = p.split_at(rank * dim);
                    let up = &rest[rank..];
                    let t0 = off.trainable;
                    let (g_down_start, g_bias_start, g_up_start) =
                        (t0, t0 + rank * dim, t0 + rank * dim + rank);
                    let mut dx = g.clone();
                    let mut act = vec![0.0; rank];
                    let mut dz = vec![0.0; rank];
                    for i in 0..x.rows() {
                        let gi = g.row(i);
                        let zi = z.row(i);
                        for (a, &zv) in act.iter_mut().zip(zi) {
                            *a = if zv > 0.0 { zv } else { 0.0 };
                        }
                        // dUp[j][r] += g[j] * act[r]; da[r] = Σ_j g[j] Up[j][r]
                        dz.iter_mut().for_each(|v| *v = 0.0);
                        for (j, &gj) in gi.iter().enumerate() {
                            if gj == 0.0 {
                                continue;
                            }
                            let urow = &up[j * rank..(j + 1) * rank];
                            let grow = &mut grad[g_up_start + j * rank..g_up_start + (j + 1) * rank];
                            for r in 0..rank {
                                grow[r] += gj * act[r];
                                dz[r] += gj * urow[r];
                            }
                        }
                        for (d, &zv) in dz.iter_mut().zip(zi) {
                            *d *= relu_grad(zv);
                        }
                        let xi = x.row(i);
                        let di = dx.row_mut(i);
                        for r in 0..rank {
                            let dr = dz[r];
                            if dr == 0.0 {
                                continue;
                            }
                            grad[g_bias_start + r] += dr;
                            let grow = &mut grad[g_down_start + r * dim..g_down_start + (r + 1) * dim];
                            for (gv, &xv) in grow.iter_mut().zip(xi) {
                                *gv += dr * xv;
                            }
                            for (d, &wv) in di.iter_mut().zip(&down[r * dim..(r + 1) * dim]) {
                                *d += dr * wv;
                            }
                        }
                    }
                    dx
                }
            };
        }
        Ok(ParamVector::from_vec(grad))
    }
}
