use super::*;
use crate::data::{
    dirichlet_partition, make_distillation_pool, ClientShard, FederatedDataset, GaussianMixture, PartitionScheme,
    PartitionSpec, PoolSource,
};
use crate::metrics_theory::{distillation_distance, evaluate_all};
use crate::model::{average_params, build_backbone, init_adapter_zero, AdapterNet, Backbone, NetSpec};
use crate::objectives::{ensemble_kd_loss, local_loss, mean_individual_kd_against_logits};
use crate::rng::{stream_rng, Stream};
use crate::tensor_nn::{sgd_step, ParamVector};

fn small_spec() -> NetSpec {
    NetSpec {
        input_dim: 6,
        hidden_dims: vec![12, 10],
        num_classes: 4,
        adapter_rank: 2,
        adapter_positions: vec![0, 1],
        adapter_includes_head: false,
    }
}

fn fixture(clients: usize, seed: u64) -> (Backbone, FederatedDataset) {
    let spec = small_spec();
    let backbone = build_backbone(&spec, &mut stream_rng(seed, Stream::Backbone, &[])).unwrap();
    let mix = GaussianMixture::new(4, 6, 3.0, seed).unwrap();
    let data = mix.sample(60 * clients, &mut stream_rng(seed, Stream::DatasetSamples, &[])).unwrap();
    let spec_p = PartitionSpec {
        scheme: PartitionScheme::DirichletLabel,
        alpha: 0.5,
        num_clients: clients,
        seed,
    };
    let parts = dirichlet_partition(data.labels(), 4, &spec_p, 10).unwrap();
    let shards = parts
        .into_iter()
        .map(|indices| ClientShard {
            data: data.select(&indices).unwrap(),
            indices,
        })
        .collect();
    let pool = make_distillation_pool(PoolSource::Generator(&mix), 64, seed).unwrap();
    (backbone, FederatedDataset::assemble(shards, pool, seed).unwrap())
}

fn small_cfg(clients: usize) -> RoundConfig {
    RoundConfig {
        num_clients: clients,
        clients_per_round: clients.min(3),
        rounds: 4,
        personal_steps: 3,
        local_steps: 3,
        server_steps: 3,
        personal_lr: 0.1,
        local_lr: 0.1,
        server_lr: 1e-2,
        client_batch: 16,
        distill_batch: 32,
        ..RoundConfig::default()
    }
}

fn random_adapter(net: &AdapterNet, seed: u64, scale: f64) -> ParamVector {
    use rand::Rng;
    let mut rng = stream_rng(seed, Stream::Check, &[7]);
    ParamVector::from_vec((0..net.trainable_len()).map(|_| rng.random_range(-scale..scale)).collect())
}

#[test]
fn sample_clients_edge_cases() {
    let mut rng = stream_rng(0, Stream::Check, &[]);
    assert_eq!(sample_clients(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(sample_clients(1, 1, &mut rng).unwrap(), vec![0]);
    assert!(sample_clients(3, 4, &mut rng).is_err());
    assert!(sample_clients(3, 0, &mut rng).is_err());
}

#[test]
fn sample_clients_is_uniform() {
    let (m, c, draws) = (10usize, 3usize, 10_000usize);
    let mut counts = vec![0usize; m];
    let mut rng = stream_rng(1, Stream::Check, &[]);
    for _ in 0..draws {
        let s = sample_clients(m, c, &mut rng).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for id in s {
            counts[id] += 1;
        }
    }
    let p = c as f64 / m as f64;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for &n in &counts {
        assert!((n as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
    }
    // chi-square with 9 degrees of freedom, 99.9th percentile 27.88
    let chi2: f64 = counts.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 27.88, "{chi2}");
}

#[test]
fn minibatch_full_and_partial() {
    let (_, fed) = fixture(3, 0);
    let train = &fed.clients[0].train;
    let mut rng = stream_rng(0, Stream::Check, &[]);
    assert_eq!(minibatch(train, train.len(), &mut rng), train.batch());
    let b = minibatch(train, 5, &mut rng);
    assert_eq!(b.len(), 5);
    let rows: Vec<&[f64]> = b.inputs.iter_rows().collect();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            assert_ne!(rows[i], rows[j]);
        }
    }
}

#[test]
fn personal_update_reductions() {
    let (backbone, fed) = fixture(3, 1);
    let net = AdapterNet::new(&backbone).unwrap();
    let v = random_adapter(&net, 1, 0.2);
    let w = random_adapter(&net, 2, 0.2);
    let train = &fed.clients[0].train;
    let sched = |steps| Schedule {
        steps,
        lr: 0.1,
        batch_size: 8,
    };
    let mut rng = stream_rng(0, Stream::Check, &[]);
    let u = client_update_personal(&net, &v, &w, 1.0, train, sched(0), &mut rng).unwrap();
    assert!(u.params.bitwise_eq(&v));
    assert!(u.mean_loss.is_nan());

    // lambda = 0 is plain SGD on the local loss with the same batches
    let got = client_update_personal(&net, &v, &w, 0.0, train, sched(4), &mut stream_rng(5, Stream::Check, &[])).unwrap();
    let mut rng = stream_rng(5, Stream::Check, &[]);
    let mut expect = v.clone();
    for _ in 0..4 {
        let batch = minibatch(train, 8, &mut rng);
        let (_, g) = local_loss(&net, &expect, &batch).unwrap();
        expect = sgd_step(&expect, &g, 0.1).unwrap();
    }
    assert!(got.params.bitwise_eq(&expect));

    // one full-batch step: v - lr (grad L(v) + lambda (v - w))
    let full = Schedule {
        steps: 1,
        lr: 0.1,
        batch_size: usize::MAX,
    };
    let got = client_update_personal(&net, &v, &w, 2.0, train, full, &mut rng).unwrap();
    let (_, g) = local_loss(&net, &v, &train.batch()).unwrap();
    for i in 0..v.len() {
        let e = v.as_slice()[i] - 0.1 * (g.as_slice()[i] + 2.0 * (v.as_slice()[i] - w.as_slice()[i]));
        assert!((got.params.as_slice()[i] - e).abs() < 1e-14);
    }
}

#[test]
fn local_update_closed_forms() {
    let (backbone, fed) = fixture(3, 2);
    let net = AdapterNet::new(&backbone).unwrap();
    let w = random_adapter(&net, 3, 0.2);
    let train = &fed.clients[1].train;
    let mut rng = stream_rng(0, Stream::Check, &[]);
    let zero = Schedule {
        steps: 0,
        lr: 0.1,
        batch_size: 8,
    };
    assert!(client_update_local(&net, &w, train, zero, &mut rng).unwrap().params.bitwise_eq(&w));
    let one = Schedule {
        steps: 1,
        lr: 0.1,
        batch_size: usize::MAX,
    };
    let got = client_update_local(&net, &w, train, one, &mut rng).unwrap();
    let (_, g) = local_loss(&net, &w, &train.batch()).unwrap();
    assert!(got.params.bitwise_eq(&sgd_step(&w, &g, 0.1).unwrap()));

    // small full-batch steps never increase the local loss
    let mut theta = w.clone();
    let mut prev = f64::INFINITY;
    for _ in 0..20 {
        let (loss, g) = local_loss(&net, &theta, &train.batch()).unwrap();
        assert!(loss <= prev + 1e-12);
        prev = loss;
        theta = sgd_step(&theta, &g, 0.05).unwrap();
    }
}

#[test]
fn personal_and_local_order_is_irrelevant() {
    let (backbone, fed) = fixture(3, 3);
    let net = AdapterNet::new(&backbone).unwrap();
    let v = random_adapter(&net, 4, 0.2);
    let w = random_adapter(&net, 5, 0.2);
    let train = &fed.clients[2].train;
    let s = Schedule {
        steps: 3,
        lr: 0.1,
        batch_size: 8,
    };
    let personal = |seed| client_update_personal(&net, &v, &w, 1.0, train, s, &mut stream_rng(seed, Stream::PersonalBatches, &[2, 0])).unwrap();
    let local = |seed| client_update_local(&net, &w, train, s, &mut stream_rng(seed, Stream::LocalBatches, &[2, 0])).unwrap();
    let (p1, l1) = (personal(9), local(9));
    let (l2, p2) = (local(9), personal(9));
    assert!(p1.params.bitwise_eq(&p2.params));
    assert!(l1.params.bitwise_eq(&l2.params));
}

#[test]
fn server_round_without_steps_is_plain_average() {
    let (backbone, fed) = fixture(3, 4);
    let net = AdapterNet::new(&backbone).unwrap();
    let locals = vec![random_adapter(&net, 1, 0.3), random_adapter(&net, 2, 0.3)];
    let cfg = RoundConfig {
        server_steps: 0,
        ..small_cfg(3)
    };
    let u = server_round(&net, &locals, &fed.distill_pool, &cfg, &mut stream_rng(0, Stream::Check, &[])).unwrap();
    assert!(u.global.bitwise_eq(&average_params(&locals, None).unwrap()));
    assert!(u.kd_losses.is_empty());
    assert_eq!(u.phi.len(), 1);
    assert!(server_round(&net, &[], &fed.distill_pool, &cfg, &mut stream_rng(0, Stream::Check, &[])).is_err());
}

#[test]
fn identical_locals_leave_server_unchanged() {
    let (backbone, fed) = fixture(3, 5);
    let net = AdapterNet::new(&backbone).unwrap();
    let theta = random_adapter(&net, 1, 0.3);
    for optimizer in [ServerOptimizer::Sgd, ServerOptimizer::Adam] {
        for rule in [ServerRule::Ensemble, ServerRule::Relaxed] {
            let cfg = RoundConfig {
                server_optimizer: optimizer,
                server_rule: rule,
                ..small_cfg(3)
            };
            let locals = vec![theta.clone(); 3];
            let u = server_round(&net, &locals, &fed.distill_pool, &cfg, &mut stream_rng(0, Stream::Check, &[])).unwrap();
            assert!(u.global.bitwise_eq(&theta));
            assert!(u.kd_losses.iter().all(|&l| l == 0.0));
            assert!(u.phi.iter().all(|&p| p < 1e-14));
        }
    }
}

#[test]
fn ensemble_distillation_lowers_held_out_kd_loss() {
    let (backbone, fed) = fixture(3, 6);
    let net = AdapterNet::new(&backbone).unwrap();
    let locals: Vec<_> = (0..3).map(|i| random_adapter(&net, 10 + i, 0.5)).collect();
    let cfg = RoundConfig {
        variant: Variant::Perada,
        server_steps: 50,
        server_lr: 1e-2,
        distill_batch: 32,
        ..small_cfg(3)
    };
    let held_out = GaussianMixture::new(4, 6, 3.0, 6)
        .unwrap()
        .sample(40, &mut stream_rng(99, Stream::Check, &[]))
        .unwrap();
    let w0 = average_params(&locals, None).unwrap();
    let u = server_round(&net, &locals, &fed.distill_pool, &cfg, &mut stream_rng(0, Stream::Check, &[])).unwrap();
    let before = ensemble_kd_loss(&net, &locals, &w0, held_out.inputs(), 1.0).unwrap().0;
    let after = ensemble_kd_loss(&net, &locals, &u.global, held_out.inputs(), 1.0).unwrap().0;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn relaxed_full_batch_steps_never_increase_mean_individual_kd() {
    let (backbone, fed) = fixture(3, 7);
    let net = AdapterNet::new(&backbone).unwrap();
    let locals: Vec<_> = (0..3).map(|i| random_adapter(&net, 20 + i, 0.5)).collect();
    let pool = fed.distill_pool.inputs();
    let teacher_logits: Vec<_> = locals.iter().map(|t| net.predict(t, pool).unwrap()).collect();
    let mut w = average_params(&locals, None).unwrap();
    let r_kd_start = ensemble_kd_loss(&net, &locals, &w, pool, 1.0).unwrap().0;
    let mut prev = f64::INFINITY;
    for _ in 0..30 {
        let (loss, g) = mean_individual_kd_against_logits(&net, &teacher_logits, &w, pool, 1.0).unwrap();
        assert!(loss <= prev + 1e-12);
        prev = loss;
        w = sgd_step(&w, &g, 0.05).unwrap();
    }
    assert!(ensemble_kd_loss(&net, &locals, &w, pool, 1.0).unwrap().0 <= r_kd_start);
    // the server round with the relaxed rule takes these same steps
    let cfg = RoundConfig {
        server_rule: ServerRule::Relaxed,
        server_optimizer: ServerOptimizer::Sgd,
        server_steps: 30,
        server_lr: 0.05,
        distill_batch: usize::MAX,
        ..small_cfg(3)
    };
    let u = server_round(&net, &locals, &fed.distill_pool, &cfg, &mut stream_rng(0, Stream::Check, &[])).unwrap();
    assert!(u.global.bitwise_eq(&w));
    assert!((u.phi_after() - distillation_distance(&net, &locals, &w, pool).unwrap()).abs() < 1e-15);
}

#[test]
fn no_local_or_server_steps_keep_global_fixed() {
    let (backbone, fed) = fixture(4, 8);
    let cfg = RoundConfig {
        clients_per_round: 4,
        local_steps: 0,
        server_steps: 0,
        ..small_cfg(4)
    };
    let mut trainer = Trainer::new(cfg, &backbone, &fed).unwrap();
    let w0 = trainer.server().global.clone();
    for _ in 0..3 {
        trainer.step().unwrap();
        assert!(trainer.server().global.bitwise_eq(&w0));
    }
}

#[test]
fn perada_without_server_steps_matches_perada_minus() {
    let (backbone, fed) = fixture(5, 9);
    let a = run_training(&RoundConfig { server_steps: 0, ..small_cfg(5) }, &backbone, &fed).unwrap();
    let b = run_baseline(Variant::PeradaMinus, &small_cfg(5), &backbone, &fed).unwrap();
    assert!(a.global.bitwise_eq(&b.global));
    assert!(a.traces.iter().zip(&b.traces).all(|(x, y)| x.numerics_eq(y)));
    assert!(a.personal.iter().zip(&b.personal).all(|(x, y)| x.bitwise_eq(y)));
}

#[test]
fn unregularized_personal_branch_matches_standalone() {
    let (backbone, fed) = fixture(5, 10);
    let cfg = RoundConfig {
        lambda: 0.0,
        server_steps: 0,
        ..small_cfg(5)
    };
    let a = run_training(&cfg, &backbone, &fed).unwrap();
    let b = run_baseline(Variant::Standalone, &small_cfg(5), &backbone, &fed).unwrap();
    assert!(a.personal.iter().zip(&b.personal).all(|(x, y)| x.bitwise_eq(y)));
    for (x, y) in a.traces.iter().zip(&b.traces) {
        assert_eq!(x.sampled, y.sampled);
        assert_eq!(y.communicated_params, 0);
        assert!(y.local_losses.is_empty());
    }
}

#[test]
fn unsampled_clients_keep_their_adapters() {
    let (backbone, fed) = fixture(6, 11);
    let mut trainer = Trainer::new(small_cfg(6), &backbone, &fed).unwrap();
    for _ in 0..3 {
        let before: Vec<_> = trainer.clients().to_vec();
        let sampled = trainer.step().unwrap().sampled.clone();
        for (b, a) in before.iter().zip(trainer.clients()) {
            if !sampled.contains(&b.id) {
                assert!(a.personal.bitwise_eq(&b.personal));
                assert!(a.local.bitwise_eq(&b.local));
            }
        }
    }
}

#[test]
fn communication_and_memory_accounting() {
    let (backbone, fed) = fixture(4, 12);
    let cfg = small_cfg(4);
    let d_a = backbone.spec().param_counts().adapter;
    let full = backbone.spec().param_counts().backbone;
    let check = |variant, comm, trainable| {
        let out = run_baseline(variant, &RoundConfig { rounds: 1, ..cfg.clone() }, &backbone, &fed).unwrap();
        assert_eq!(out.traces[0].communicated_params, comm, "{variant}");
        assert_eq!(out.traces[0].trainable_params_per_client, trainable, "{variant}");
    };
    check(Variant::Perada, 3 * d_a, 2 * d_a);
    check(Variant::PeradaMinus, 3 * d_a, 2 * d_a);
    check(Variant::Fedavg, 3 * d_a, d_a);
    check(Variant::FedavgKd, 3 * d_a, d_a);
    check(Variant::Standalone, 0, d_a);
    check(Variant::DittoFull, 3 * full, 2 * full);
}

#[test]
fn fedavg_full_participation_is_gradient_descent_on_mean_loss() {
    let (backbone, fed) = fixture(4, 13);
    let cfg = RoundConfig {
        variant: Variant::Fedavg,
        clients_per_round: 4,
        rounds: 1,
        local_steps: 1,
        client_batch: usize::MAX,
        ..small_cfg(4)
    };
    let out = run_training(&cfg, &backbone, &fed).unwrap();
    let net = AdapterNet::new(&backbone).unwrap();
    let w0 = init_adapter_zero(backbone.spec(), &mut stream_rng(cfg.seed, Stream::AdapterInit, &[])).unwrap();
    let mut mean_grad = ParamVector::zeros(w0.len());
    for c in &fed.clients {
        let (_, g) = local_loss(&net, &w0, &c.train.batch()).unwrap();
        mean_grad.axpy(0.25, &g).unwrap();
    }
    let expect = sgd_step(&w0, &mean_grad, cfg.local_lr).unwrap();
    for (a, b) in out.global.as_slice().iter().zip(expect.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_rounds_returns_initial_state() {
    let (backbone, fed) = fixture(3, 14);
    let out = run_training(&RoundConfig { rounds: 0, ..small_cfg(3) }, &backbone, &fed).unwrap();
    assert!(out.traces.is_empty());
    assert!(out.global.max_abs() > 0.0);
    assert!(out.personal.iter().all(|v| v.bitwise_eq(&out.global)));
}

#[test]
fn training_is_deterministic_and_keeps_backbone() {
    let (backbone, fed) = fixture(4, 15);
    let cfg = RoundConfig {
        track_stationarity: true,
        ..small_cfg(4)
    };
    let a = run_training(&cfg, &backbone, &fed).unwrap();
    let b = run_training(&cfg, &backbone, &fed).unwrap();
    assert!(a.global.bitwise_eq(&b.global));
    assert!(a.traces.iter().zip(&b.traces).all(|(x, y)| x.numerics_eq(y)));
    assert!(a.net.frozen_params().bitwise_eq(backbone.params()));
    assert!(a.traces.iter().all(|t| t.stationarity.is_some()));
}

#[test]
fn training_reduces_local_loss() {
    let (backbone, fed) = fixture(4, 16);
    let cfg = RoundConfig {
        rounds: 30,
        clients_per_round: 4,
        ..small_cfg(4)
    };
    let out = run_training(&cfg, &backbone, &fed).unwrap();
    let first = out.traces[0].mean_local_loss();
    let last = out.traces.last().unwrap().mean_local_loss();
    assert!(last < first, "{last} >= {first}");
    let report = evaluate_all(&out.net, &out.global, &out.personal, &fed).unwrap();
    assert!(report.personalized_local.mean > 0.25);
}

#[test]
fn config_validation() {
    assert!(RoundConfig::default().validate().is_ok());
    let bad = [
        RoundConfig { clients_per_round: 21, ..RoundConfig::default() },
        RoundConfig { clients_per_round: 0, ..RoundConfig::default() },
        RoundConfig { lambda: -1.0, ..RoundConfig::default() },
        RoundConfig { tau: 0.0, ..RoundConfig::default() },
        RoundConfig { client_batch: 0, ..RoundConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert!("feddf".parse::<Variant>().is_err());
    assert_eq!("ditto_full".parse::<Variant>().unwrap(), Variant::DittoFull);
}

#[test]
fn trainer_rejects_mismatched_data() {
    let (backbone, fed) = fixture(3, 17);
    assert!(Trainer::new(small_cfg(4), &backbone, &fed).is_err());
}
