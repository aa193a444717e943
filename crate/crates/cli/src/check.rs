//! The theory and invariant check suite behind `perada check`.

use std::fmt;
use std::time::Instant;

use anyhow::Result;
use perada_core::data::{
    dirichlet_partition, make_distillation_pool, ClientShard, FederatedDataset, GaussianMixture, PartitionScheme,
    PartitionSpec, PoolSource,
};
use perada_core::fl_runtime::{run_baseline, run_training, RoundConfig, Trainer, Variant};
use perada_core::metrics_theory::{
    check_relaxation_sweep, gradient_audit_with, AuditTarget, GradientSuite, RelaxationReport, RelaxationSweep,
};
use perada_core::model::{build_backbone, init_adapter_zero, AdapterNet, Backbone, NetSpec};
use perada_core::rng::{stream_rng, Stream};
use perada_core::tensor_nn::Matrix;
use rand::Rng;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_INSTANCES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> Vec<&CheckLine> {
        self.lines.iter().filter(|l| !l.passed).collect()
    }
}

/// One line per audited objective, named by the objective.
pub fn gradient_checks(suite: &GradientSuite, seed: u64) -> Result<(Vec<CheckLine>, f64)> {
    let start = Instant::now();
    let report = gradient_audit_with(suite, GRADIENT_TOLERANCE, GRADIENT_INSTANCES, seed)?;
    let secs = start.elapsed().as_secs_f64();
    let lines = report
        .entries
        .iter()
        .map(|e| {
            CheckLine::new(
                format!("gradient:{}", e.target),
                e.max_rel_error < report.tolerance,
                format!(
                    "max relative error {:.3e} over {} instances (tolerance {:.0e})",
                    e.max_rel_error, e.instances, report.tolerance
                ),
            )
        })
        .collect();
    Ok((lines, secs))
}

pub fn relaxation_check(sweep: &RelaxationSweep) -> Result<(CheckLine, RelaxationReport)> {
    let report = check_relaxation_sweep(sweep)?;
    let mut detail = format!(
        "min gap {:.4e} over {} draws, {} below -1e-12",
        report.min_gap, report.draws, report.violations
    );
    if let Some(w) = &report.worst {
        detail += &format!(
            "; worst: {} teachers, {} classes, tau {}",
            w.teachers.len(),
            w.student.len(),
            w.tau
        );
    }
    Ok((CheckLine::new("relaxation_gap", report.passed(), detail), report))
}

/// Zero adapters on a random desk backbone reproduce its logits exactly.
pub fn zero_adapter_check(seed: u64) -> Result<CheckLine> {
    let spec = NetSpec::desk_default();
    let backbone = build_backbone(&spec, &mut stream_rng(seed, Stream::Backbone, &[]))?;
    let net = AdapterNet::new(&backbone)?;
    let zero = init_adapter_zero(&spec, &mut stream_rng(seed, Stream::AdapterInit, &[]))?;
    let mut rng = stream_rng(seed, Stream::Check, &[3]);
    let n = 100;
    let inputs = Matrix::from_vec(
        n,
        spec.input_dim,
        (0..n * spec.input_dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
    )?;
    let same = backbone.logits(&inputs)?.bitwise_eq(&net.predict(&zero, &inputs)?);
    Ok(CheckLine::new(
        "zero_adapter_identity",
        same,
        format!("{n} random inputs, logits bitwise {}", if same { "equal" } else { "different" }),
    ))
}

/// Small seeded federated instance for the reduction checks.
pub fn reduction_instance(seed: u64) -> Result<(Backbone, FederatedDataset, RoundConfig)> {
    let spec = NetSpec {
        input_dim: 8,
        hidden_dims: vec![16, 12],
        num_classes: 4,
        adapter_rank: 2,
        adapter_positions: vec![0, 1],
        adapter_includes_head: false,
    };
    let clients = 6;
    let backbone = build_backbone(&spec, &mut stream_rng(seed, Stream::Backbone, &[]))?;
    let mix = GaussianMixture::new(4, 8, 3.0, seed)?;
    let data = mix.sample(60 * clients, &mut stream_rng(seed, Stream::DatasetSamples, &[]))?;
    let part = PartitionSpec {
        scheme: PartitionScheme::DirichletLabel,
        alpha: 0.5,
        num_clients: clients,
        seed,
    };
    let shards = dirichlet_partition(data.labels(), 4, &part, 10)?
        .into_iter()
        .map(|indices| {
            Ok(ClientShard {
                data: data.select(&indices)?,
                indices,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = make_distillation_pool(PoolSource::Generator(&mix), 64, seed)?;
    let fed = FederatedDataset::assemble(shards, pool, seed)?;
    let cfg = RoundConfig {
        num_clients: clients,
        clients_per_round: 3,
        rounds: 6,
        personal_steps: 3,
        local_steps: 3,
        server_steps: 3,
        client_batch: 16,
        distill_batch: 32,
        seed,
        ..RoundConfig::default()
    };
    Ok((backbone, fed, cfg))
}

/// The three bitwise reductions: no distillation equals PerAda⁻, an
/// unregularized personal branch equals standalone training, and no local or
/// server steps leave the global adapter fixed.
pub fn reduction_checks(seed: u64) -> Result<Vec<CheckLine>> {
    let (backbone, data, cfg) = reduction_instance(seed)?;
    let mut lines = Vec::new();

    let a = run_training(&RoundConfig { server_steps: 0, ..cfg.clone() }, &backbone, &data)?;
    let b = run_baseline(Variant::PeradaMinus, &cfg, &backbone, &data)?;
    let same = a.traces.len() == b.traces.len()
        && a.traces.iter().zip(&b.traces).all(|(x, y)| x.numerics_eq(y))
        && a.global.bitwise_eq(&b.global)
        && a.personal.iter().zip(&b.personal).all(|(x, y)| x.bitwise_eq(y));
    lines.push(CheckLine::new(
        "reduction:no_distillation_is_perada_minus",
        same,
        format!("{} rounds, traces and adapters bitwise", a.traces.len()),
    ));

    let a = run_training(
        &RoundConfig {
            server_steps: 0,
            lambda: 0.0,
            ..cfg.clone()
        },
        &backbone,
        &data,
    )?;
    let b = run_baseline(Variant::Standalone, &cfg, &backbone, &data)?;
    let bits = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    let same = a.personal.iter().zip(&b.personal).all(|(x, y)| x.bitwise_eq(y))
        && a
            .traces
            .iter()
            .zip(&b.traces)
            .all(|(x, y)| x.sampled == y.sampled && bits(&x.personal_losses, &y.personal_losses));
    lines.push(CheckLine::new(
        "reduction:unregularized_personal_is_standalone",
        same,
        "personal adapters and personal losses bitwise",
    ));

    let frozen = RoundConfig {
        local_steps: 0,
        server_steps: 0,
        ..cfg
    };
    let mut trainer = Trainer::new(frozen, &backbone, &data)?;
    let w0 = trainer.server().global.clone();
    let mut fixed = true;
    while !trainer.is_finished() {
        trainer.step()?;
        fixed &= trainer.server().global.bitwise_eq(&w0);
    }
    lines.push(CheckLine::new(
        "reduction:no_local_or_server_steps_fix_global",
        fixed,
        "global adapter bitwise constant across rounds",
    ));
    Ok(lines)
}

/// Parameter and communication accounting on the desk spec.
pub fn accounting_check(seed: u64) -> Result<CheckLine> {
    let spec = NetSpec::desk_default();
    let counts = spec.param_counts();
    let backbone = build_backbone(&spec, &mut stream_rng(seed, Stream::Backbone, &[]))?;
    let mix = GaussianMixture::new(spec.num_classes, spec.input_dim, 3.0, seed)?;
    let clients = 4;
    let sample = mix.sample(50 * clients, &mut stream_rng(seed, Stream::DatasetSamples, &[]))?;
    let shards = (0..clients)
        .map(|c| {
            let indices: Vec<usize> = (c * 50..(c + 1) * 50).collect();
            Ok(ClientShard {
                data: sample.select(&indices)?,
                indices,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = make_distillation_pool(PoolSource::Generator(&mix), 32, seed)?;
    let fed = FederatedDataset::assemble(shards, pool, seed)?;
    let cfg = RoundConfig {
        num_clients: clients,
        clients_per_round: 2,
        rounds: 1,
        seed,
        ..RoundConfig::default()
    };
    let comm = |v| -> Result<usize> { Ok(run_baseline(v, &cfg, &backbone, &fed)?.traces[0].communicated_params) };
    let perada = comm(Variant::Perada)?;
    let ditto = comm(Variant::DittoFull)?;
    let c = cfg.clients_per_round;
    let passed = counts.trainable_fraction < 0.15 && perada == c * counts.adapter && ditto == c * counts.backbone;
    Ok(CheckLine::new(
        "accounting",
        passed,
        format!(
            "trainable fraction {}/{} = {:.4}; per-round communication perada {} (C·d_a = {}), ditto_full {} (C·full = {})",
            counts.adapter,
            counts.backbone + counts.adapter,
            counts.trainable_fraction,
            perada,
            c * counts.adapter,
            ditto,
            c * counts.backbone
        ),
    ))
}

/// Everything `perada check` runs. `fault` sign-flips one audited gradient.
pub fn run_checks(seed: u64, fault: Option<AuditTarget>) -> Result<CheckReport> {
    let suite = match fault {
        Some(t) => GradientSuite::with_sign_flip(t),
        None => GradientSuite::reference(),
    };
    let mut lines = gradient_checks(&suite, seed)?.0;
    lines.push(
        relaxation_check(&RelaxationSweep {
            seed,
            ..RelaxationSweep::default()
        })?
        .0,
    );
    lines.push(zero_adapter_check(seed)?);
    lines.extend(reduction_checks(seed)?);
    lines.push(accounting_check(seed)?);
    Ok(CheckReport { lines })
}
