use std::time::Instant;

use serde::Serialize;

use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::metrics_theory::{stationarity, StationarityInputs};
use crate::model::{init_adapter_zero, AdapterNet, AdapterParams, Backbone};
use crate::rng::{stream_rng, Stream};

use super::client::{client_update_local, client_update_personal, mean_or_nan, sample_clients, Schedule};
use super::server::server_round;
use super::{RoundConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Personalized parameters `v_m`; changes only in rounds the client is sampled.
    pub personal: AdapterParams,
    /// Last local adapter `θ_m` the client produced (the initial global adapter
    /// before its first participation).
    pub local: AdapterParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: AdapterParams,
    pub round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityRecord {
    /// `mean_m ‖∇_θ F_m(θ_m^t, w^t)‖² + ‖∇_w F_m(θ_m^{t+1}, w^t)‖²`
    pub global: f64,
    /// `mean_m ‖∇_v P_m(v_m^t, w^t)‖² + ‖∇_w P_m(v_m^{t+1}, w^t)‖²`
    pub personal: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Mean personalized-objective value per sampled client (sampled order).
    pub personal_losses: Vec<f64>,
    /// Mean local loss per sampled client (sampled order).
    pub local_losses: Vec<f64>,
    pub kd_losses: Vec<f64>,
    /// Distillation distance on the pool after averaging and after each
    /// server step; empty for variants without a server.
    pub phi: Vec<f64>,
    pub stationarity: Option<StationarityRecord>,
    pub communicated_params: usize,
    pub trainable_params_per_client: usize,
    pub wall_time_secs: f64,
}

impl RoundTrace {
    /// Bitwise equality of everything except wall time.
    pub fn numerics_eq(&self, other: &RoundTrace) -> bool {
        let bits = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let opt = |a: Option<f64>, b: Option<f64>| a.map(f64::to_bits) == b.map(f64::to_bits);
        self.round == other.round
            && self.sampled == other.sampled
            && bits(&self.personal_losses, &other.personal_losses)
            && bits(&self.local_losses, &other.local_losses)
            && bits(&self.kd_losses, &other.kd_losses)
            && bits(&self.phi, &other.phi)
            && opt(self.stationarity.map(|s| s.global), other.stationarity.map(|s| s.global))
            && opt(self.stationarity.map(|s| s.personal), other.stationarity.map(|s| s.personal))
            && self.communicated_params == other.communicated_params
            && self.trainable_params_per_client == other.trainable_params_per_client
    }

    /// Mean over sampled clients of their mean local loss (NaN if none).
    pub fn mean_local_loss(&self) -> f64 {
        mean_or_nan(self.local_losses.iter().sum(), self.local_losses.len())
    }

    pub fn mean_personal_loss(&self) -> f64 {
        mean_or_nan(self.personal_losses.iter().sum(), self.personal_losses.len())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub config: RoundConfig,
    pub net: AdapterNet,
    pub global: AdapterParams,
    /// Per-client personalized parameters; the global ones for variants that
    /// do not personalize.
    pub personal: Vec<AdapterParams>,
    pub local: Vec<AdapterParams>,
    pub traces: Vec<RoundTrace>,
}

/// Round-by-round driver over borrowed data.
pub struct Trainer<'a> {
    cfg: RoundConfig,
    net: AdapterNet,
    data: &'a FederatedDataset,
    server: ServerState,
    clients: Vec<ClientState>,
    traces: Vec<RoundTrace>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: RoundConfig, backbone: &Backbone, data: &'a FederatedDataset) -> Result<Self> {
        cfg.validate()?;
        if data.num_clients() != cfg.num_clients {
            return Err(Error::shape("clients in data vs config", data.num_clients(), cfg.num_clients));
        }
        let spec = backbone.spec();
        if data.input_dim() != spec.input_dim || data.num_classes() != spec.num_classes {
            return Err(Error::shape(
                "data (input_dim, classes) vs network",
                (data.input_dim(), data.num_classes()),
                (spec.input_dim, spec.num_classes),
            ));
        }
        let (net, w0) = if cfg.variant == Variant::DittoFull {
            (AdapterNet::full_model(backbone)?, backbone.params().clone())
        } else {
            let mut rng = stream_rng(cfg.seed, Stream::AdapterInit, &[]);
            (AdapterNet::new(backbone)?, init_adapter_zero(spec, &mut rng)?)
        };
        let clients = (0..cfg.num_clients)
            .map(|id| ClientState {
                id,
                personal: w0.clone(),
                local: w0.clone(),
            })
            .collect();
        Ok(Self {
            cfg,
            net,
            data,
            server: ServerState { global: w0, round: 0 },
            clients,
            traces: Vec::new(),
        })
    }

    pub fn config(&self) -> &RoundConfig {
        &self.cfg
    }

    pub fn net(&self) -> &AdapterNet {
        &self.net
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn traces(&self) -> &[RoundTrace] {
        &self.traces
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.cfg.rounds
    }

    /// Runs one round and returns its trace.
    pub fn step(&mut self) -> Result<&RoundTrace> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let t = self.server.round;
        let variant = cfg.variant;
        let sampled = sample_clients(
            cfg.num_clients,
            cfg.clients_per_round,
            &mut stream_rng(cfg.seed, Stream::ClientSampling, &[t as u64]),
        )?;
        let w_t = self.server.global.clone();
        let before = cfg
            .track_stationarity
            .then(|| self.clients.iter().map(|c| (c.personal.clone(), c.local.clone())).collect::<Vec<_>>());

        let personal_schedule = Schedule {
            steps: cfg.personal_steps,
            lr: cfg.personal_lr,
            batch_size: cfg.client_batch,
        };
        let local_schedule = Schedule {
            steps: cfg.local_steps,
            lr: cfg.local_lr,
            batch_size: cfg.client_batch,
        };
        let lambda = if variant == Variant::Standalone { 0.0 } else { cfg.lambda };
        let mut personal_losses = Vec::new();
        let mut local_losses = Vec::new();
        let mut locals = Vec::new();
        for &m in &sampled {
            let train = &self.data.clients[m].train;
            let coords = [m as u64, t as u64];
            if variant.personalizes() {
                let mut rng = stream_rng(cfg.seed, Stream::PersonalBatches, &coords);
                let update = client_update_personal(
                    &self.net,
                    &self.clients[m].personal,
                    &w_t,
                    lambda,
                    train,
                    personal_schedule,
                    &mut rng,
                )?;
                self.clients[m].personal = update.params;
                personal_losses.push(update.mean_loss);
            }
            if variant.communicates() {
                let mut rng = stream_rng(cfg.seed, Stream::LocalBatches, &coords);
                let update = client_update_local(&self.net, &w_t, train, local_schedule, &mut rng)?;
                self.clients[m].local = update.params.clone();
                locals.push(update.params);
                local_losses.push(update.mean_loss);
            }
        }

        let mut trace = RoundTrace {
            round: t,
            sampled,
            personal_losses,
            local_losses,
            kd_losses: Vec::new(),
            phi: Vec::new(),
            stationarity: None,
            communicated_params: 0,
            trainable_params_per_client: self.net.trainable_len(),
            wall_time_secs: 0.0,
        };
        if variant.communicates() {
            let mut rng = stream_rng(cfg.seed, Stream::ServerBatches, &[t as u64]);
            let update = server_round(&self.net, &locals, &self.data.distill_pool, cfg, &mut rng)?;
            self.server.global = update.global;
            trace.kd_losses = update.kd_losses;
            trace.phi = update.phi;
            trace.communicated_params = cfg.clients_per_round * self.net.trainable_len();
            if variant.personalizes() {
                trace.trainable_params_per_client = 2 * self.net.trainable_len();
            }
        }
        if let Some(before) = before {
            let inputs = StationarityInputs {
                global_prev: &w_t,
                local_prev: before.iter().map(|(_, l)| l).collect(),
                local_next: self.clients.iter().map(|c| &c.local).collect(),
                personal_prev: before.iter().map(|(p, _)| p).collect(),
                personal_next: self.clients.iter().map(|c| &c.personal).collect(),
            };
            trace.stationarity = Some(stationarity(&self.net, self.data, &inputs, cfg.lambda, cfg.beta, cfg.tau)?);
        }
        self.server.round += 1;
        trace.wall_time_secs = start.elapsed().as_secs_f64();
        self.traces.push(trace);
        Ok(self.traces.last().expect("just pushed"))
    }

    /// Runs the remaining rounds.
    pub fn run(mut self) -> Result<TrainingOutcome> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainingOutcome {
        let personalizes = self.cfg.variant.personalizes();
        let personal = self
            .clients
            .iter()
            .map(|c| {
                if personalizes {
                    c.personal.clone()
                } else {
                    self.server.global.clone()
                }
            })
            .collect();
        TrainingOutcome {
            local: self.clients.into_iter().map(|c| c.local).collect(),
            config: self.cfg,
            net: self.net,
            global: self.server.global,
            personal,
            traces: self.traces,
        }
    }
}

/// Runs `cfg.rounds` rounds of `cfg.variant`.
pub fn run_training(cfg: &RoundConfig, backbone: &Backbone, data: &FederatedDataset) -> Result<TrainingOutcome> {
    Trainer::new(cfg.clone(), backbone, data)?.run()
}

/// [`run_training`] with the variant overridden.
pub fn run_baseline(
    variant: Variant,
    cfg: &RoundConfig,
    backbone: &Backbone,
    data: &FederatedDataset,
) -> Result<TrainingOutcome> {
    let mut cfg = cfg.clone();
    cfg.variant = variant;
    run_training(&cfg, backbone, data)
}
