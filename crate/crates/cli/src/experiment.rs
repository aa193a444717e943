//! Dataset and backbone preparation plus the `pretrain`, `partition` and
//! `run` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use perada_core::data::{
    covariate_shift_partition, dirichlet_partition, load_idx, make_distillation_pool, ClientShard, FederatedDataset,
    GaussianMixture, LabeledDataset, PartitionScheme, PartitionSpec, PoolSource, UnlabeledPool,
};
use perada_core::fl_runtime::{pretrain_backbone, PretrainConfig, RoundConfig, Trainer, Variant};
use perada_core::metrics_theory::{accuracy, evaluate_all, mean_prediction_distance, EvalReport};
use perada_core::model::{build_backbone, read_snapshot, write_snapshot, AdapterParams, Backbone};
use perada_core::rng::{stream_rng, Stream};

use crate::config::{AblationConfig, DataSource, ExperimentConfig, PoolChoice, PretrainMode};
use crate::report::{MetricsWriter, Scope, TimingWriter};

pub const BACKBONE_FILE: &str = "backbone.pada";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// Client data plus both candidate distillation pools and the pretraining
/// source set.
pub struct PreparedData {
    pub data: FederatedDataset,
    pub in_domain_pool: UnlabeledPool,
    pub source_pool: UnlabeledPool,
    pub source_train: LabeledDataset,
    pub source_test: LabeledDataset,
}

impl PreparedData {
    /// The federated dataset with the requested pool swapped in.
    pub fn with_pool(&self, choice: PoolChoice, fraction: f64) -> Result<FederatedDataset> {
        let pool = match choice {
            PoolChoice::InDomain => &self.in_domain_pool,
            PoolChoice::SourceDomain => &self.source_pool,
        };
        Ok(FederatedDataset {
            distill_pool: pool.fraction(fraction)?,
            ..self.data.clone()
        })
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let m = cfg.training.num_clients;
    let seed = cfg.seed;
    let k = cfg.model.num_classes;
    let n_clients = m * d.samples_per_client;
    let (clients, in_pool, source_train, source_test, source_pool) = match d.source {
        DataSource::Generator => {
            let mix = GaussianMixture::new(k, cfg.model.input_dim, d.class_sep, seed)?;
            let source = mix.perturbed(cfg.pretrain.source_shift, seed)?;
            let clients = mix.sample(n_clients, &mut stream_rng(seed, Stream::DatasetSamples, &[]))?;
            let source_train = source.sample(cfg.pretrain.source_samples, &mut stream_rng(seed, Stream::PretrainData, &[]))?;
            let source_test = source.sample(1000, &mut stream_rng(seed, Stream::PretrainData, &[1]))?;
            let in_pool = make_distillation_pool(PoolSource::Generator(&mix), d.pool_size, seed)?;
            let source_pool = make_distillation_pool(PoolSource::Generator(&source), d.pool_size, seed)?;
            (clients, in_pool, source_train, source_test, source_pool)
        }
        DataSource::Idx => {
            let (images, labels) = (d.images.as_ref().expect("validated"), d.labels.as_ref().expect("validated"));
            let all = load_idx(images, labels).with_context(|| format!("loading {}", images.display()))?;
            if all.input_dim() != cfg.model.input_dim || all.num_classes() > k {
                bail!(
                    "IDX data has {} features and {} classes; model expects {} and {}",
                    all.input_dim(),
                    all.num_classes(),
                    cfg.model.input_dim,
                    k
                );
            }
            let all = LabeledDataset::new(all.inputs().clone(), all.labels().to_vec(), k)?;
            // rows: source train | source test | in-domain pool | clients
            let n_src = cfg.pretrain.source_samples;
            let n_src_test = (n_src / 5).max(1);
            let need = n_src + n_src_test + d.pool_size + n_clients;
            if all.len() < need {
                bail!("IDX data has {} rows; this config needs {need}", all.len());
            }
            let range = |a: usize, b: usize| all.select(&(a..b).collect::<Vec<_>>());
            let source_train = range(0, n_src)?;
            let source_test = range(n_src, n_src + n_src_test)?;
            let held = range(n_src + n_src_test, n_src + n_src_test + d.pool_size)?;
            let clients = range(need - n_clients, need)?;
            let in_pool = UnlabeledPool::new(held.inputs().clone())?;
            let source_pool = make_distillation_pool(PoolSource::Dataset(&source_train), d.pool_size.min(n_src), seed)?;
            (clients, in_pool, source_train, source_test, source_pool)
        }
    };
    let shards = match d.partition {
        PartitionScheme::DirichletLabel => {
            let spec = PartitionSpec {
                scheme: PartitionScheme::DirichletLabel,
                alpha: d.alpha,
                num_clients: m,
                seed,
            };
            dirichlet_partition(clients.labels(), k, &spec, d.min_per_client)?
                .into_iter()
                .map(|indices| {
                    Ok(ClientShard {
                        data: clients.select(&indices)?,
                        indices,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        PartitionScheme::CovariateShift => covariate_shift_partition(&clients, m, d.shift_kind, d.shift_magnitude, seed)?,
    };
    let data = FederatedDataset::assemble(shards, in_pool.clone(), seed)?.with_ood(&d.ood_kinds, &d.ood_severities, seed)?;
    let data = FederatedDataset {
        distill_pool: match d.pool_source {
            PoolChoice::InDomain => in_pool.fraction(d.pool_fraction)?,
            PoolChoice::SourceDomain => source_pool.fraction(d.pool_fraction)?,
        },
        ..data
    };
    Ok(PreparedData {
        data,
        in_domain_pool: in_pool,
        source_pool,
        source_train,
        source_test,
    })
}

pub struct PreparedBackbone {
    pub backbone: Backbone,
    /// Accuracy of the pretrained network on held-out source data.
    pub source_accuracy: f64,
    pub pretrain_losses: Vec<f64>,
}

pub fn prepare_backbone(cfg: &ExperimentConfig, prepared: &PreparedData) -> Result<PreparedBackbone> {
    let spec = &cfg.model;
    let (backbone, losses) = if let Some(path) = &cfg.pretrain.backbone {
        let params = read_snapshot(path, spec.spec_hash(), spec.param_counts().backbone)
            .with_context(|| format!("reading backbone {}", path.display()))?;
        (Backbone::from_params(spec.clone(), params)?, Vec::new())
    } else {
        match cfg.pretrain.mode {
            PretrainMode::None => (build_backbone(spec, &mut stream_rng(cfg.seed, Stream::Backbone, &[]))?, Vec::new()),
            PretrainMode::Source => {
                let pc = PretrainConfig {
                    steps: cfg.pretrain.steps,
                    lr: cfg.pretrain.lr,
                    batch_size: cfg.pretrain.batch_size,
                    seed: cfg.seed,
                };
                let out = pretrain_backbone(spec, &prepared.source_train, &pc)?;
                (out.backbone, out.losses)
            }
        }
    };
    let full = perada_core::model::AdapterNet::full_model(&backbone)?;
    let source_accuracy = accuracy(&full, backbone.params(), &prepared.source_test)?;
    Ok(PreparedBackbone {
        backbone,
        source_accuracy,
        pretrain_losses: losses,
    })
}

pub struct PretrainSummary {
    pub path: PathBuf,
    pub source_accuracy: f64,
    pub final_loss: Option<f64>,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    cfg.write_resolved(&cfg.output_dir)?;
    let prepared = prepare_data(cfg)?;
    let pb = prepare_backbone(cfg, &prepared)?;
    let path = cfg.output_dir.join(BACKBONE_FILE);
    write_snapshot(&path, cfg.model.spec_hash(), pb.backbone.params())?;
    Ok(PretrainSummary {
        path,
        source_accuracy: pb.source_accuracy,
        final_loss: pb.pretrain_losses.last().copied(),
    })
}

pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.write_resolved(&cfg.output_dir)?;
    let prepared = prepare_data(cfg)?;
    let path = cfg.output_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&prepared.data.manifest())?;
    fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// One training run of the plan: a variant under one ablation setting.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub round: RoundConfig,
    pub pool_source: PoolChoice,
    pub pool_fraction: f64,
}

/// Variants crossed with the ablation grids. Run ids are the variant name,
/// followed by `;axis=value` for each ablated axis.
pub fn plan_runs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let AblationConfig {
        lambda,
        server_steps,
        pool_fraction,
        pool_source,
    } = &cfg.ablation;
    let axis = |v: &[String]| if v.is_empty() { vec![None] } else { v.iter().cloned().map(Some).collect() };
    let lambdas = axis(&lambda.iter().map(|x| x.to_string()).collect::<Vec<_>>());
    let steps = axis(&server_steps.iter().map(|x| x.to_string()).collect::<Vec<_>>());
    let fractions = axis(&pool_fraction.iter().map(|x| x.to_string()).collect::<Vec<_>>());
    let sources = axis(&pool_source.iter().map(|x| x.name().to_string()).collect::<Vec<_>>());
    let mut runs = Vec::new();
    for variant in cfg.variants() {
        for l in &lambdas {
            for s in &steps {
                for f in &fractions {
                    for p in &sources {
                        let mut round = RoundConfig {
                            variant,
                            ..cfg.training.clone()
                        };
                        let mut run = RunSpec {
                            run_id: variant.name().to_string(),
                            round: round.clone(),
                            pool_source: cfg.dataset.pool_source,
                            pool_fraction: cfg.dataset.pool_fraction,
                        };
                        if let Some(l) = l {
                            round.lambda = l.parse().expect("formatted float");
                            run.run_id += &format!(";lambda={l}");
                        }
                        if let Some(s) = s {
                            round.server_steps = s.parse().expect("formatted int");
                            run.run_id += &format!(";server_steps={s}");
                        }
                        if let Some(f) = f {
                            run.pool_fraction = f.parse().expect("formatted float");
                            run.run_id += &format!(";pool_fraction={f}");
                        }
                        if let Some(p) = p {
                            run.pool_source = if p == "in_domain" {
                                PoolChoice::InDomain
                            } else {
                                PoolChoice::SourceDomain
                            };
                            run.run_id += &format!(";pool_source={p}");
                        }
                        run.round = round;
                        runs.push(run);
                    }
                }
            }
        }
    }
    runs
}

/// Final models and evaluation of one run.
pub struct RunResult {
    pub run_id: String,
    pub variant: Variant,
    pub global: AdapterParams,
    pub personal: Vec<AdapterParams>,
    pub report: EvalReport,
    pub prediction_distance: f64,
}

fn current_models(trainer: &Trainer<'_>) -> (AdapterParams, Vec<AdapterParams>) {
    let global = trainer.server().global.clone();
    let personal = if trainer.config().variant.personalizes() {
        trainer.clients().iter().map(|c| c.personal.clone()).collect()
    } else {
        vec![global.clone(); trainer.clients().len()]
    };
    (global, personal)
}

/// Trains one planned run, streaming per-round rows into `metrics`.
pub fn execute_run(
    run: &RunSpec,
    backbone: &Backbone,
    data: &FederatedDataset,
    eval_every: usize,
    metrics: &mut MetricsWriter,
    mut timing: Option<&mut TimingWriter>,
) -> Result<RunResult> {
    let variant = run.round.variant;
    let mut trainer = Trainer::new(run.round.clone(), backbone, data)?;
    let emit_eval = |trainer: &Trainer<'_>, round: usize, metrics: &mut MetricsWriter| -> Result<(EvalReport, f64)> {
        let (global, personal) = current_models(trainer);
        let report = evaluate_all(trainer.net(), &global, &personal, data)?;
        let pd = mean_prediction_distance(trainer.net(), &personal, &global, data)?;
        metrics.eval_rows(&run.run_id, variant, round, &report, pd)?;
        Ok((report, pd))
    };
    let mut last_eval = None;
    while !trainer.is_finished() {
        let trace = trainer.step()?;
        let round = trace.round + 1;
        metrics.trace_rows(&run.run_id, variant, round, trace)?;
        if let Some(t) = timing.as_deref_mut() {
            t.row(&run.run_id, round, trace.wall_time_secs)?;
        }
        let last = round == run.round.rounds;
        if last || (eval_every > 0 && round % eval_every == 0) {
            last_eval = Some(emit_eval(&trainer, round, metrics)?);
        }
        metrics.flush()?;
    }
    let (report, pd) = match last_eval {
        Some(e) => e,
        None => emit_eval(&trainer, 0, metrics)?,
    };
    metrics.flush()?;
    let outcome = trainer.finish();
    Ok(RunResult {
        run_id: run.run_id.clone(),
        variant,
        global: outcome.global,
        personal: outcome.personal,
        report,
        prediction_distance: pd,
    })
}

fn snapshot_dir(output: &Path, run_id: &str) -> PathBuf {
    let safe: String = run_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-=".contains(c) { c } else { '_' })
        .collect();
    output.join("snapshots").join(safe)
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let out = &cfg.output_dir;
    cfg.write_resolved(out)?;
    let started = Instant::now();
    let prepared = prepare_data(cfg)?;
    let pb = prepare_backbone(cfg, &prepared)?;
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let mut timing = TimingWriter::create(&out.join(TIMING_FILE))?;
    metrics.row("setup", "none", 0, "source_accuracy", Scope::GlobalModel, pb.source_accuracy)?;
    let mut results = Vec::new();
    for run in plan_runs(cfg) {
        let data = prepared.with_pool(run.pool_source, run.pool_fraction)?;
        let result = execute_run(&run, &pb.backbone, &data, cfg.eval_every, &mut metrics, Some(&mut timing))
            .with_context(|| format!("run {}", run.run_id))?;
        let dir = snapshot_dir(out, &run.run_id);
        let hash = cfg.model.spec_hash();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_snapshot(&dir.join("global.pada"), hash, &result.global)?;
        for (m, v) in result.personal.iter().enumerate() {
            write_snapshot(&dir.join(format!("personal_{m}.pada")), hash, v)?;
        }
        results.push(result);
    }
    timing.row("total", 0, started.elapsed().as_secs_f64())?;
    timing.flush()?;
    Ok(results)
}
