use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor_nn::{finite_diff_grad, relative_error, Matrix};

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn backbone_param_count_for_single_hidden_layer() {
    let spec = NetSpec {
        input_dim: 7,
        hidden_dims: vec![32],
        num_classes: 4,
        adapter_rank: 2,
        adapter_positions: vec![0],
        adapter_includes_head: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = build_backbone(&spec, &mut rng).unwrap();
    assert_eq!(b.params().len(), 7 * 32 + 32 + 32 * 4 + 4);
    assert_eq!(spec.param_counts().backbone, 7 * 32 + 32 + 32 * 4 + 4);
}

#[test]
fn backbone_is_deterministic_per_seed() {
    let spec = NetSpec::desk_default();
    let a = build_backbone(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = build_backbone(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let c = build_backbone(&spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert!(a.params().bitwise_eq(b.params()));
    assert!(!a.params().bitwise_eq(c.params()));
}

#[test]
fn degenerate_specs_are_rejected() {
    let mut spec = NetSpec::desk_default();
    spec.hidden_dims = vec![64, 0];
    assert!(build_backbone(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    let mut spec = NetSpec::desk_default();
    spec.num_classes = 1;
    assert!(spec.validate().is_err());
    let mut spec = NetSpec::desk_default();
    spec.adapter_rank = 0;
    assert!(spec.validate().is_err());
    let mut spec = NetSpec::desk_default();
    spec.adapter_positions = vec![0, 0];
    assert!(spec.validate().is_err());
    // Adapter as large as the backbone.
    let spec = NetSpec {
        input_dim: 2,
        hidden_dims: vec![4],
        num_classes: 2,
        adapter_rank: 8,
        adapter_positions: vec![0],
        adapter_includes_head: false,
    };
    assert!(spec.validate().is_err());
}

#[test]
fn zero_adapter_is_exact_identity() {
    for includes_head in [false, true] {
        let mut spec = NetSpec::desk_default();
        spec.adapter_includes_head = includes_head;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let backbone = build_backbone(&spec, &mut rng).unwrap();
        let net = AdapterNet::new(&backbone).unwrap();
        let zero = init_adapter_zero(&spec, &mut rng).unwrap();
        assert!(zero.as_slice().iter().any(|&v| v != 0.0), "down-projections are random");
        let x = random_inputs(&mut rng, 100, spec.input_dim);
        let with_adapter = net.predict(&zero, &x).unwrap();
        let plain = backbone.logits(&x).unwrap();
        assert!(with_adapter.bitwise_eq(&plain));
    }
}

#[test]
fn nonzero_step_changes_outputs() {
    let spec = NetSpec::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let backbone = build_backbone(&spec, &mut rng).unwrap();
    let net = AdapterNet::new(&backbone).unwrap();
    let zero = init_adapter_zero(&spec, &mut rng).unwrap();
    let x = random_inputs(&mut rng, 8, spec.input_dim);
    let (logits, tape) = net.forward(&zero, &x).unwrap();
    let mut up = Matrix::zeros(logits.rows(), logits.cols());
    up.set(0, 0, 1.0);
    let g = net.backward(&tape, &up).unwrap();
    assert!(g.norm() > 0.0);
    let stepped = crate::tensor_nn::sgd_step(&zero, &g, 0.1).unwrap();
    let after = net.predict(&stepped, &x).unwrap();
    assert!(!after.bitwise_eq(&logits));
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut spec = NetSpec::desk_default();
    spec.input_dim = 5;
    spec.hidden_dims = vec![8, 6];
    spec.num_classes = 3;
    spec.adapter_rank = 2;
    spec.adapter_includes_head = true;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let backbone = build_backbone(&spec, &mut rng).unwrap();
    let net = AdapterNet::new(&backbone).unwrap();
    let mut done = 0;
    while done < 10 {
        let a = ParamVector::from_vec(
            (0..net.trainable_len()).map(|_| rng.random_range(-0.5..0.5)).collect(),
        );
        let x = random_inputs(&mut rng, 3, spec.input_dim);
        let (y, tape) = net.forward(&a, &x).unwrap();
        if tape.min_abs_preactivation() < 1e-3 {
            continue;
        }
        // loss = ½‖logits‖²
        let g = net.backward(&tape, &y).unwrap();
        let fd = finite_diff_grad(
            |p| 0.5 * net.predict(p, &x).unwrap().as_slice().iter().map(|v| v * v).sum::<f64>(),
            &a,
            1e-5,
        );
        assert!(relative_error(g.as_slice(), fd.as_slice(), 1e-12).0 < 1e-4);
        done += 1;
    }
}

#[test]
fn argmax_invariant_to_temperature() {
    let spec = NetSpec::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let backbone = build_backbone(&spec, &mut rng).unwrap();
    let net = AdapterNet::new(&backbone).unwrap();
    let a = init_adapter_zero(&spec, &mut rng).unwrap();
    let x = random_inputs(&mut rng, 20, spec.input_dim);
    let logits = net.predict(&a, &x).unwrap();
    for row in logits.iter_rows() {
        let p1 = crate::tensor_nn::softmax(row, 1.0).unwrap();
        let p2 = crate::tensor_nn::softmax(row, 2.0).unwrap();
        let am = |p: &[f64]| {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        assert_eq!(am(&p1), am(&p2));
    }
}

#[test]
fn param_counts_examples() {
    // 1.41M adapter parameters out of an 11.18M model.
    let c = ParamCounts::from_counts(11_180_000 - 1_410_000, 1_410_000);
    assert!((c.trainable_fraction - 0.126).abs() < 5e-4);
    assert_eq!(ParamCounts::from_counts(100, 0).trainable_fraction, 0.0);

    // Desk spec: backbone 20·64+64 + 64·64+64 + 64·10+10 = 6154; each adapter 64·4 + 4 + 4·64 = 516.
    let c = NetSpec::desk_default().param_counts();
    assert_eq!(c.backbone, 6154);
    assert_eq!(c.adapter, 1032);
    assert!((c.trainable_fraction - 1032.0 / 7186.0).abs() < 1e-15);
    assert!(c.trainable_fraction < 0.15);
    let net = NetSpec::desk_default().adapter_network().unwrap();
    assert_eq!(net.trainable_len(), 1032);
    assert_eq!(net.frozen_len(), 6154);
}

#[test]
fn average_examples_and_errors() {
    let p = ParamVector::from_vec(vec![1.0, 3.0]);
    let q = ParamVector::from_vec(vec![3.0, 1.0]);
    assert!(average_params(std::slice::from_ref(&p), None).unwrap().bitwise_eq(&p));
    assert_eq!(average_params(&[p.clone(), q.clone()], None).unwrap().as_slice(), &[2.0, 2.0]);
    let copies = vec![ParamVector::from_vec(vec![0.1, -7.3, 1e-9]); 7];
    assert!(average_params(&copies, None).unwrap().bitwise_eq(&copies[0]));
    assert!(average_params(&[], None).is_err());
    assert!(average_params(&[p.clone(), ParamVector::zeros(3)], None).is_err());
    let w = average_params(&[p.clone(), q.clone()], Some(&[0.25, 0.75])).unwrap();
    assert_eq!(w.as_slice(), &[2.5, 1.5]);
    assert!(average_params(&[p, q], Some(&[0.5, 0.6])).is_err());
}

#[test]
fn blockwise_distance_matches_flat_norm() {
    let mut spec = NetSpec::desk_default();
    spec.adapter_includes_head = true;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let backbone = build_backbone(&spec, &mut rng).unwrap();
    let net = AdapterNet::new(&backbone).unwrap();
    let a = ParamVector::from_vec((0..net.trainable_len()).map(|_| rng.random()).collect());
    let b = ParamVector::from_vec((0..net.trainable_len()).map(|_| rng.random()).collect());
    let blockwise = blockwise_sq_distance(&net, &a, &b).unwrap();
    let flat = a.sq_distance(&b).unwrap();
    assert!((blockwise - flat).abs() <= 1e-12 * flat);
    assert_eq!(net.adapter_blocks().len(), 2);
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetSpec::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut params = init_adapter_zero(&spec, &mut rng).unwrap();
    params.as_mut_slice()[0] = -0.0;
    params.as_mut_slice()[1] = f64::MIN_POSITIVE / 3.0;
    let path = dir.path().join("a.pada");
    write_snapshot(&path, spec.spec_hash(), &params).unwrap();
    let back = read_snapshot(&path, spec.spec_hash(), params.len()).unwrap();
    assert!(back.bitwise_eq(&params));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[0..4], b"PADA");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes.len(), 16 + 8 * params.len());
    assert!(read_snapshot(&path, spec.spec_hash() ^ 1, params.len()).is_err());
    assert!(decode_snapshot(b"PADB\x01\0\0\0\0\0\0\0\0\0\0\0").is_err());
    assert!(decode_snapshot(&bytes[..20]).is_err());
}

proptest! {
    #[test]
    fn averaging_is_permutation_invariant_and_affine(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6),
        a in -3.0f64..3.0,
        c in -3.0f64..3.0,
        rot in 0usize..6,
    ) {
        let ps: Vec<ParamVector> = rows.iter().cloned().map(ParamVector::from_vec).collect();
        let avg = average_params(&ps, None).unwrap();
        let mut permuted = ps.clone();
        let n = permuted.len();
        permuted.rotate_left(rot % n);
        let avg_p = average_params(&permuted, None).unwrap();
        prop_assert!(avg.sq_distance(&avg_p).unwrap() < 1e-20);
        let shifted: Vec<ParamVector> = ps
            .iter()
            .map(|p| ParamVector::from_vec(p.as_slice().iter().map(|v| a * v + c).collect()))
            .collect();
        let lhs = average_params(&shifted, None).unwrap();
        for (l, r) in lhs.as_slice().iter().zip(avg.as_slice()) {
            prop_assert!((l - (a * r + c)).abs() < 1e-10);
        }
    }
}
