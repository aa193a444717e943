//! Round loop: client sampling, personalized and local adapter updates,
//! server averaging plus distillation, and the baseline variants.

mod client;
mod pretrain;
mod server;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_nn::{check_tau, AdamConfig};

pub use client::{client_update_local, client_update_personal, minibatch, sample_clients, ClientUpdate, Schedule};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainOutcome};
pub use server::{server_round, ServerUpdate};
pub use trainer::{
    run_baseline, run_training, ClientState, RoundTrace, ServerState, StationarityRecord, Trainer,
    TrainingOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Personalized adapters, local adapters, server averaging and distillation.
    Perada,
    /// As `Perada` with zero distillation steps.
    PeradaMinus,
    /// One shared adapter, averaging only.
    Fedavg,
    /// Shared adapter with server distillation.
    FedavgKd,
    /// Local training of each client's adapter, no communication.
    Standalone,
    /// Proximal personalization of full unfrozen model copies.
    DittoFull,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Perada,
        Variant::PeradaMinus,
        Variant::Fedavg,
        Variant::FedavgKd,
        Variant::Standalone,
        Variant::DittoFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Perada => "perada",
            Variant::PeradaMinus => "perada_minus",
            Variant::Fedavg => "fedavg",
            Variant::FedavgKd => "fedavg_kd",
            Variant::Standalone => "standalone",
            Variant::DittoFull => "ditto_full",
        }
    }

    /// Keeps a separate personalized parameter vector per client.
    pub fn personalizes(self) -> bool {
        matches!(
            self,
            Variant::Perada | Variant::PeradaMinus | Variant::Standalone | Variant::DittoFull
        )
    }

    /// Runs the local-adapter branch and server aggregation.
    pub fn communicates(self) -> bool {
        self != Variant::Standalone
    }

    pub fn distills(self) -> bool {
        matches!(self, Variant::Perada | Variant::FedavgKd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerRule {
    /// Gradient of distillation against the mean teacher logits.
    Ensemble,
    /// Mean over teachers of the per-teacher distillation gradients.
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub variant: Variant,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub personal_steps: usize,
    pub local_steps: usize,
    pub server_steps: usize,
    pub personal_lr: f64,
    pub local_lr: f64,
    pub server_lr: f64,
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub client_batch: usize,
    pub distill_batch: usize,
    pub server_rule: ServerRule,
    pub server_optimizer: ServerOptimizer,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Full-batch stationarity diagnostics every round (costly).
    pub track_stationarity: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Perada,
            num_clients: 20,
            clients_per_round: 8,
            rounds: 200,
            personal_steps: 5,
            local_steps: 5,
            server_steps: 5,
            personal_lr: 0.05,
            local_lr: 0.05,
            server_lr: 1e-3,
            lambda: 1.0,
            beta: 1.0,
            tau: 1.0,
            client_batch: 32,
            distill_batch: 64,
            server_rule: ServerRule::Ensemble,
            server_optimizer: ServerOptimizer::Adam,
            adam: AdamConfig::default(),
            seed: 0,
            track_stationarity: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::invalid(format!(
                "clients_per_round must be in 1..={}, got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        for (name, v) in [
            ("personal_lr", self.personal_lr),
            ("local_lr", self.local_lr),
            ("server_lr", self.server_lr),
            ("lambda", self.lambda),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.client_batch == 0 || self.distill_batch == 0 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        check_tau(self.tau)
    }

    /// Distillation steps after variant rules are applied.
    pub fn effective_server_steps(&self) -> usize {
        if self.variant.distills() {
            self.server_steps
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests;
