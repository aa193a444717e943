//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always shown.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 5`. Criteria listed in `KNOWN_FAILURES`
//! are reported as FAIL but do not fail the process; any other failure does.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use perada_cli::check::{accounting_check, relaxation_check, reduction_checks, zero_adapter_check};
use perada_cli::config::{parse_config, ExperimentConfig};
use perada_cli::experiment::{prepare_backbone, prepare_data, METRICS_FILE};
use perada_core::data::FederatedDataset;
use perada_core::fl_runtime::{run_training, RoundConfig, ServerRule, TrainingOutcome, Variant};
use perada_core::metrics_theory::{evaluate_all, gradient_audit_with, mean_prediction_distance, GradientSuite, RelaxationSweep};
use perada_core::model::Backbone;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Criteria that cannot hold as stated, with the reason printed on their line.
const KNOWN_FAILURES: [(usize, &str); 3] = [
    (2, "the convexity claim behind the relaxation is false; see the pinned counterexample in the objectives tests"),
    (7, "Φ targets the mean of teacher probabilities while ensemble distillation targets softmax of mean logits"),
    (8, "the global measure plateaus at a heterogeneity floor at fixed step sizes"),
];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn desk_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    parse_config(&path).expect("configs/desk.toml parses")
}

struct DeskSeed {
    backbone: Backbone,
    data: FederatedDataset,
    training: RoundConfig,
}

fn desk_seed(seed: u64) -> DeskSeed {
    let cfg = ExperimentConfig { seed, ..desk_config() }.resolve();
    let prepared = prepare_data(&cfg).expect("desk data");
    let backbone = prepare_backbone(&cfg, &prepared).expect("desk backbone").backbone;
    DeskSeed {
        backbone,
        data: prepared.data,
        training: cfg.training,
    }
}

fn train(desk: &DeskSeed, edit: impl FnOnce(&mut RoundConfig)) -> TrainingOutcome {
    let mut cfg = desk.training.clone();
    edit(&mut cfg);
    run_training(&cfg, &desk.backbone, &desk.data).expect("training run")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Lazily trained desk runs shared by criteria 6, 7 and 9.
#[derive(Default)]
struct DeskRuns {
    seeds: Vec<DeskSeed>,
    perada: Vec<TrainingOutcome>,
}

impl DeskRuns {
    fn ensure(&mut self) {
        if self.seeds.is_empty() {
            for &s in &SEEDS {
                let desk = desk_seed(s);
                self.perada.push(train(&desk, |c| c.variant = Variant::Perada));
                self.seeds.push(desk);
            }
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let report = gradient_audit_with(&GradientSuite::reference(), 1e-4, 100, 0).expect("gradient audit");
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = report.failures().iter().map(|e| e.target.name()).collect();
    outcome(
        report.passed() && secs < 60.0,
        format!(
            "{} objectives x 100 instances, worst relative error {:.3e} < 1e-4, {secs:.1}s < 60s{}",
            report.entries.len(),
            report.max_rel_error(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (line, report) = relaxation_check(&RelaxationSweep::default()).expect("sweep");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        report.passed() && secs < 30.0,
        format!("{}; {secs:.1}s < 30s", line.detail),
    )
}

fn criterion_3() -> Outcome {
    let line = zero_adapter_check(0).expect("identity check");
    outcome(line.passed, line.detail)
}

fn criterion_4() -> Outcome {
    let lines = reduction_checks(0).expect("reduction checks");
    let detail = lines
        .iter()
        .map(|l| format!("{} {}", l.name.trim_start_matches("reduction:"), if l.passed { "ok" } else { "differs" }))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(lines.iter().all(|l| l.passed), detail)
}

fn criterion_5() -> Outcome {
    let line = accounting_check(0).expect("accounting");
    outcome(line.passed, line.detail)
}

fn criterion_6(runs: &mut DeskRuns) -> Outcome {
    let start = Instant::now();
    runs.ensure();
    let mut perada = Vec::new();
    let mut fedavg = Vec::new();
    for (desk, p) in runs.seeds.iter().zip(&runs.perada) {
        let f = train(desk, |c| c.variant = Variant::Fedavg);
        perada.push(evaluate_all(&p.net, &p.global, &p.personal, &desk.data).unwrap().personalized_local.mean);
        fedavg.push(evaluate_all(&f.net, &f.global, &f.personal, &desk.data).unwrap().global_model_local.mean);
    }
    let secs = start.elapsed().as_secs_f64();
    let gap = mean(&perada) - mean(&fedavg);
    outcome(
        gap >= 0.05 && secs < 600.0,
        format!(
            "Local-test: PerAda personalized {:.4} vs FedAvg global {:.4}, gap {:+.2} pts >= 5 over {} seeds; {secs:.0}s < 600s",
            mean(&perada),
            mean(&fedavg),
            100.0 * gap,
            SEEDS.len()
        ),
    )
}

fn strictly_decreasing_rounds(out: &TrainingOutcome) -> usize {
    out.traces.iter().filter(|t| t.phi.windows(2).all(|w| w[1] < w[0])).count()
}

fn criterion_7(runs: &mut DeskRuns) -> Outcome {
    runs.ensure();
    let mut with_kd = Vec::new();
    let mut without = Vec::new();
    for (desk, p) in runs.seeds.iter().zip(&runs.perada) {
        let m = train(desk, |c| c.variant = Variant::PeradaMinus);
        with_kd.push(evaluate_all(&p.net, &p.global, &p.personal, &desk.data).unwrap().global_model_global);
        without.push(evaluate_all(&m.net, &m.global, &m.personal, &desk.data).unwrap().global_model_global);
    }
    let accuracy_ok = mean(&with_kd) >= mean(&without);
    let reference = &runs.perada[0];
    let decreasing = strictly_decreasing_rounds(reference);
    let relaxed = train(&runs.seeds[0], |c| {
        c.variant = Variant::Perada;
        c.server_rule = ServerRule::Relaxed;
    });
    let rounds = reference.traces.len();
    outcome(
        accuracy_ok && decreasing == rounds,
        format!(
            "Global-test of global model: PerAda {:.4} vs PerAda⁻ {:.4} ({}); Φ strictly decreasing across KD steps in {decreasing}/{rounds} rounds on seed 0 (relaxed server rule, diagnostic only: {}/{rounds})",
            mean(&with_kd),
            mean(&without),
            if accuracy_ok { "ok" } else { "lower" },
            strictly_decreasing_rounds(&relaxed)
        ),
    )
}

fn criterion_8() -> Outcome {
    let desk = desk_seed(0);
    let out = train(&desk, |c| {
        c.variant = Variant::Perada;
        c.track_stationarity = true;
    });
    let records: Vec<_> = out.traces.iter().filter_map(|t| t.stationarity).collect();
    let decile = records.len() / 10;
    let first = |f: fn(&perada_core::fl_runtime::StationarityRecord) -> f64| mean(&records[..decile].iter().map(f).collect::<Vec<_>>());
    let last = |f: fn(&perada_core::fl_runtime::StationarityRecord) -> f64| {
        mean(&records[records.len() - decile..].iter().map(f).collect::<Vec<_>>())
    };
    let (g0, g1) = (first(|r| r.global), last(|r| r.global));
    let (p0, p1) = (first(|r| r.personal), last(|r| r.personal));
    outcome(
        g1 < 0.5 * g0 && p1 < 0.5 * p0,
        format!(
            "T={}: global measure {g0:.3} -> {g1:.3} (ratio {:.3}), personal measure {p0:.3} -> {p1:.3} (ratio {:.3}); need both < 0.5",
            records.len(),
            g1 / g0,
            p1 / p0
        ),
    )
}

fn criterion_9(runs: &mut DeskRuns) -> Outcome {
    runs.ensure();
    let lambdas = [0.1, 1.0, 10.0];
    let mut distance = [0.0; 3];
    let mut local = [0.0; 3];
    for (desk, p) in runs.seeds.iter().zip(&runs.perada) {
        for (i, &lambda) in lambdas.iter().enumerate() {
            let fresh;
            let out = if lambda == desk.training.lambda {
                p
            } else {
                fresh = train(desk, |c| {
                    c.variant = Variant::Perada;
                    c.lambda = lambda;
                });
                &fresh
            };
            let n = SEEDS.len() as f64;
            distance[i] += mean_prediction_distance(&out.net, &out.personal, &out.global, &desk.data).unwrap() / n;
            local[i] += evaluate_all(&out.net, &out.global, &out.personal, &desk.data).unwrap().personalized_local.mean / n;
        }
    }
    let monotone = distance[1] <= distance[0] && distance[2] <= distance[1];
    let degrade = local[2] <= local[0].max(local[1]);
    outcome(
        monotone && degrade,
        format!(
            "prediction distance at λ=0.1/1/10: {:.4}/{:.4}/{:.4} ({}); Local-test {:.4}/{:.4}/{:.4} ({})",
            distance[0],
            distance[1],
            distance[2],
            if monotone { "non-increasing" } else { "not monotone" },
            local[0],
            local[1],
            local[2],
            if degrade { "λ=10 not above best" } else { "λ=10 above best" }
        ),
    )
}

fn criterion_10() -> Outcome {
    let base = tempfile::tempdir().expect("temp dir");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir: PathBuf = base.path().join(name);
        let cfg = ExperimentConfig {
            output_dir: dir.clone(),
            variants: vec![Variant::Perada],
            ..desk_config()
        };
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_perada"))
            .args(["run", "--config"])
            .arg(&path)
            .env_remove("PERADA_SEED")
            .output()
            .expect("spawn perada");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        outputs.push(std::fs::read(dir.join(METRICS_FILE)).unwrap());
    }
    let same = outputs[0] == outputs[1];
    outcome(
        same,
        format!(
            "two `perada run` invocations: metrics.csv {} bytes each, {}",
            outputs[0].len(),
            if same { "byte-identical" } else { "different" }
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut runs = DeskRuns::default();
    let mut unexpected = Vec::new();
    let mut passed = 0;
    let mut failed = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut runs),
            7 => criterion_7(&mut runs),
            8 => criterion_8(),
            9 => criterion_9(&mut runs),
            _ => criterion_10(),
        };
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == n).map(|(_, why)| *why);
        if result.passed {
            passed += 1;
            println!("criterion {n:>2}: PASS  {} [{secs:.1}s]", result.detail);
        } else {
            failed += 1;
            match known {
                Some(why) => println!("criterion {n:>2}: FAIL  {} [{secs:.1}s] (known: {why})", result.detail),
                None => {
                    println!("criterion {n:>2}: FAIL  {} [{secs:.1}s]", result.detail);
                    unexpected.push(n);
                }
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {} unexpected", unexpected.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
