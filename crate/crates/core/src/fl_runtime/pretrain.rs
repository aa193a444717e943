use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{build_backbone, Backbone, NetSpec};
use crate::objectives::cross_entropy;
use crate::rng::{stream_rng, Stream};
use crate::tensor_nn::{adam_step, AdamConfig, AdamState, ParamVector};

use super::client::minibatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    /// Minibatch cross-entropy before each step.
    pub losses: Vec<f64>,
}

/// Trains every trunk weight with Adam on a labeled source task, starting
/// from a He-initialized backbone.
pub fn pretrain_backbone(spec: &NetSpec, data: &LabeledDataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if data.input_dim() != spec.input_dim || data.num_classes() != spec.num_classes {
        return Err(Error::shape(
            "pretraining data (input_dim, classes) vs network",
            (data.input_dim(), data.num_classes()),
            (spec.input_dim, spec.num_classes),
        ));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::invalid("pretraining needs batch_size >= 1 and lr >= 0"));
    }
    let init = build_backbone(spec, &mut stream_rng(cfg.seed, Stream::Backbone, &[]))?;
    let net = spec.full_network()?;
    let frozen = ParamVector::zeros(0);
    let mut params = init.params().clone();
    let mut state = AdamState::fresh();
    let mut rng = stream_rng(cfg.seed, Stream::Pretrain, &[]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = minibatch(data, cfg.batch_size, &mut rng);
        let (logits, tape) = net.forward(&frozen, &params, &batch.inputs)?;
        let (loss, up) = cross_entropy(&logits, batch.labels.as_deref().expect("labeled"))?;
        losses.push(loss);
        let grad = net.backward(&tape, &up)?;
        let (next, s) = adam_step(&state, &params, &grad, cfg.lr, AdamConfig::default())?;
        params = next;
        state = s;
    }
    Ok(PretrainOutcome {
        backbone: Backbone::from_params(spec.clone(), params)?,
        losses,
    })
}
