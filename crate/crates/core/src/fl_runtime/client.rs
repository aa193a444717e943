use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{AdapterNet, AdapterParams};
use crate::objectives::{local_loss, personal_objective};
use crate::tensor_nn::{sgd_step, Batch};

/// Uniform sample of `c` distinct ids from `0..m`, sorted ascending.
pub fn sample_clients<R: Rng + ?Sized>(m: usize, c: usize, rng: &mut R) -> Result<Vec<usize>> {
    if c == 0 || c > m {
        return Err(Error::invalid(format!("cannot sample {c} of {m} clients")));
    }
    let mut ids = rand::seq::index::sample(rng, m, c).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// The full dataset when `batch_size >= n`; otherwise `batch_size` distinct
/// rows drawn independently of any earlier batch.
pub fn minibatch<R: Rng + ?Sized>(data: &LabeledDataset, batch_size: usize, rng: &mut R) -> Batch {
    if batch_size >= data.len() {
        return data.batch();
    }
    let idx = rand::seq::index::sample(rng, data.len(), batch_size).into_vec();
    Batch {
        inputs: data.inputs().select_rows(&idx),
        labels: Some(idx.iter().map(|&i| data.labels()[i]).collect()),
    }
}

/// Step count, learning rate and minibatch size of one client loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub params: AdapterParams,
    /// Mean minibatch objective over the steps taken (NaN when no step ran).
    pub mean_loss: f64,
}

/// SGD on `L_m(v) + λ/2 ‖v − w‖²` starting from `v`; `w` is read only.
pub fn client_update_personal<R: Rng + ?Sized>(
    net: &AdapterNet,
    v: &AdapterParams,
    w: &AdapterParams,
    lambda: f64,
    train: &LabeledDataset,
    schedule: Schedule,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let mut params = v.clone();
    let mut total = 0.0;
    for _ in 0..schedule.steps {
        let batch = minibatch(train, schedule.batch_size, rng);
        let (loss, grad) = personal_objective(net, &params, w, &batch, lambda)?;
        total += loss;
        params = sgd_step(&params, &grad, schedule.lr)?;
    }
    Ok(ClientUpdate {
        params,
        mean_loss: mean_or_nan(total, schedule.steps),
    })
}

/// SGD on `L_m(θ)` starting from `θ = w`.
pub fn client_update_local<R: Rng + ?Sized>(
    net: &AdapterNet,
    w: &AdapterParams,
    train: &LabeledDataset,
    schedule: Schedule,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let mut params = w.clone();
    let mut total = 0.0;
    for _ in 0..schedule.steps {
        let batch = minibatch(train, schedule.batch_size, rng);
        let (loss, grad) = local_loss(net, &params, &batch)?;
        total += loss;
        params = sgd_step(&params, &grad, schedule.lr)?;
    }
    Ok(ClientUpdate {
        params,
        mean_loss: mean_or_nan(total, schedule.steps),
    })
}

pub(crate) fn mean_or_nan(total: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}
