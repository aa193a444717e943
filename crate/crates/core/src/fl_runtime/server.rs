use rand::Rng;

use crate::data::UnlabeledPool;
use crate::error::{Error, Result};
use crate::metrics_theory::distillation_distance_from_logits;
use crate::model::{average_params, AdapterNet, AdapterParams};
use crate::objectives::{kd_against_logits, mean_individual_kd_against_logits, mean_logits};
use crate::tensor_nn::{adam_step, sgd_step, AdamState, Matrix};

use super::{RoundConfig, ServerOptimizer, ServerRule};

#[derive(Debug, Clone)]
pub struct ServerUpdate {
    pub global: AdapterParams,
    /// Minibatch distillation loss before each server step.
    pub kd_losses: Vec<f64>,
    /// Distillation distance on the whole pool after averaging and after each
    /// server step (`steps + 1` values).
    pub phi: Vec<f64>,
}

impl ServerUpdate {
    pub fn phi_before(&self) -> f64 {
        self.phi[0]
    }

    pub fn phi_after(&self) -> f64 {
        *self.phi.last().expect("phi has at least one value")
    }
}

/// Uniform average of the uploaded local adapters, then
/// `cfg.effective_server_steps()` distillation steps toward the teachers'
/// predictions on the pool. The optimizer state starts fresh every round.
pub fn server_round<R: Rng + ?Sized>(
    net: &AdapterNet,
    locals: &[AdapterParams],
    pool: &UnlabeledPool,
    cfg: &RoundConfig,
    rng: &mut R,
) -> Result<ServerUpdate> {
    if locals.is_empty() {
        return Err(Error::Empty("local adapter list"));
    }
    let mut w = average_params(locals, None)?;
    let teacher_logits = locals
        .iter()
        .map(|t| net.predict(t, pool.inputs()))
        .collect::<Result<Vec<_>>>()?;
    let phi_of = |w: &AdapterParams| -> Result<f64> {
        distillation_distance_from_logits(&teacher_logits, &net.predict(w, pool.inputs())?)
    };
    let mut phi = vec![phi_of(&w)?];
    let steps = cfg.effective_server_steps();
    if steps == 0 {
        return Ok(ServerUpdate {
            global: w,
            kd_losses: Vec::new(),
            phi,
        });
    }
    let ensemble = mean_logits(&teacher_logits)?;
    let n = pool.len();
    let mut adam = AdamState::fresh();
    let mut kd_losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let rows: Option<Vec<usize>> = if cfg.distill_batch >= n {
            None
        } else {
            Some(rand::seq::index::sample(rng, n, cfg.distill_batch).into_vec())
        };
        let pick = |m: &Matrix| match &rows {
            None => m.clone(),
            Some(r) => m.select_rows(r),
        };
        let inputs = pick(pool.inputs());
        let (loss, grad) = match cfg.server_rule {
            ServerRule::Ensemble => kd_against_logits(net, &pick(&ensemble), &w, &inputs, cfg.tau)?,
            ServerRule::Relaxed => {
                let teachers: Vec<Matrix> = teacher_logits.iter().map(&pick).collect();
                mean_individual_kd_against_logits(net, &teachers, &w, &inputs, cfg.tau)?
            }
        };
        kd_losses.push(loss);
        let grad = grad.scale(cfg.beta);
        w = match cfg.server_optimizer {
            ServerOptimizer::Sgd => sgd_step(&w, &grad, cfg.server_lr)?,
            ServerOptimizer::Adam => {
                let (next, state) = adam_step(&adam, &w, &grad, cfg.server_lr, cfg.adam)?;
                adam = state;
                next
            }
        };
        phi.push(phi_of(&w)?);
    }
    Ok(ServerUpdate { global: w, kd_losses, phi })
}
