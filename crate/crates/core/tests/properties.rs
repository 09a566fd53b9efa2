mod common;

use common::*;
use gridcert::certificate::*;
use gridcert::network_model::*;
use gridcert::reduced_model::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(seed: u64, n: usize, loaded: bool) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = RandomNet {
        n,
        load_scale: if loaded { 1.0 } else { 0.0 },
        ..Default::default()
    };
    random_network(&mut rng, &spec)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn network_matrices_have_zero_row_sums(seed in any::<u64>(), n in 2usize..6, loaded in any::<bool>()) {
        let ms = matrix_set_for(&net(seed, n, loaded)).unwrap();
        for m in [&ms.b, &ms.g] {
            for i in 0..n {
                let s: f64 = m.row(i).iter().sum();
                prop_assert!(s.abs() <= 1e-9 * m.amax(), "row {i} sums to {s}");
            }
        }
        for m in [&ms.btilde, &ms.gtilde, &ms.lambda_p, &ms.lambda_q] {
            prop_assert_eq!(m.clone(), DMatrix::from_diagonal(&m.diagonal()));
        }
    }

    #[test]
    fn unloaded_networks_have_no_load_matrices(seed in any::<u64>(), n in 2usize..5) {
        let ms = matrix_set_for(&net(seed, n, false)).unwrap();
        prop_assert!(ms.btilde.amax() <= 1e-9 * ms.b.amax());
        prop_assert!(ms.gtilde.amax() <= 1e-9 * ms.g.amax());
    }

    #[test]
    fn impedance_scaling_divides_every_network_matrix(seed in any::<u64>(), n in 2usize..5, alpha in 0.1f64..10.0, loaded in any::<bool>()) {
        let m = net(seed, n, loaded);
        let a = matrix_set_for(&m).unwrap();
        let b = matrix_set_for(&m.scaled_impedances(alpha)).unwrap();
        prop_assert!(rel(&(&b.b * alpha), &a.b) < 1e-8);
        prop_assert!(rel(&(&b.g * alpha), &a.g) < 1e-8);
        prop_assert!(rel(&(&b.bprime * alpha), &a.bprime) < 1e-8);
        prop_assert!(rel(&(&b.gprime * alpha), &a.gprime) < 1e-8);
        if loaded {
            prop_assert!(rel(&(&b.btilde * alpha), &a.btilde) < 1e-8);
        }
    }

    #[test]
    fn certificate_verdict_is_invariant_under_joint_scaling(seed in any::<u64>(), n in 2usize..5, alpha in 0.1f64..10.0) {
        let m = net(seed, n, false);
        let scaled = m.scaled_impedances(alpha);
        let mp: Vec<f64> = m.mp_percent().iter().map(|x| x * alpha).collect();
        let mq: Vec<f64> = m.mq_percent().iter().map(|x| x * alpha).collect();
        let a = matrix_set_for(&m).unwrap();
        let b = matrix_set_for(&scaled).unwrap().with_droops(&mp, &mq);
        let ids = m.inverter_ids();
        let ra = check_network(&a, &ids).unwrap();
        let rb = check_network(&b, &ids).unwrap();
        for (pa, pb) in ra.pairs.iter().zip(&rb.pairs) {
            for (ca, cb) in pa.conditions.iter().zip(&pb.conditions) {
                if ca.slack.is_finite() && ca.slack.abs() > 10.0 * ca.tol {
                    prop_assert_eq!(ca.holds, cb.holds, "{} on {:?}", ca.name, pa.ids);
                    prop_assert!((cb.slack * alpha - ca.slack).abs() <= 1e-6 * ca.slack.abs().max(ca.tol));
                }
            }
        }
    }

    #[test]
    fn pq_load_round_trip(p in 1.0f64..1e6, q in -1e6f64..1e6, v in 100.0f64..30e3) {
        let load = LoadSpec { bus: 0, phases: [Some(LoadPhase::Pq { p, q }), None, None] };
        let z = load_to_impedance(&load, v, default_omega0()).unwrap();
        let zc = num_complex::Complex64::new(z.r[(0, 0)], default_omega0() * z.l[(0, 0)]);
        let s = v * v / zc.conj();
        prop_assert!((s.re - p).abs() <= 1e-9 * (p.abs() + q.abs()));
        prop_assert!((s.im - q).abs() <= 1e-9 * (p.abs() + q.abs()));
    }

    #[test]
    fn pair_partitions_reconstruct_network_matrices(seed in any::<u64>(), n in 2usize..6, loaded in any::<bool>()) {
        let ms = matrix_set_for(&net(seed, n, loaded)).unwrap();
        let topo = Topology::from_matrix_set(&ms);
        for (name, x) in ms.named() {
            let mut sum = DMatrix::zeros(n, n);
            for (i, k) in topo.pairs() {
                sum += embed_pair(&pair_partition(x, i, k, &topo).unwrap(), i, k, n);
            }
            prop_assert!(rel(&sum, x) < 1e-12, "{name}");
        }
    }

    #[test]
    fn lyapunov_identity_holds(seed in any::<u64>(), n in 2usize..5, loaded in any::<bool>()) {
        let ms = matrix_set_for(&net(seed, n, loaded)).unwrap();
        let ss = assemble_state_space(&ms).unwrap();
        let lb = build_lyapunov(&ms).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        prop_assert!(verify_lyapunov_identity(&ss, &lb, 20, &mut rng) < 1e-8);
    }

    #[test]
    fn certified_implies_stable(seed in any::<u64>(), n in 2usize..5, loaded in any::<bool>()) {
        let m = net(seed, n, loaded);
        let ms = matrix_set_for(&m).unwrap();
        if check_network(&ms, &m.inverter_ids()).unwrap().certified {
            prop_assert!(eig_report(&ms).unwrap().stable);
        }
    }

    #[test]
    fn state_space_satisfies_model_equations(seed in any::<u64>(), n in 2usize..5, loaded in any::<bool>()) {
        let ms = matrix_set_for(&net(seed, n, loaded)).unwrap();
        let ss = assemble_state_space(&ms).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_fn(3 * n, |_, _| rng.gen_range(-1.0..1.0));
        let xdot = &ss.a * &x;
        let (rp, rq) = model_residual(&ms, &x, &xdot);
        prop_assert!(rp < 1e-9 && rq < 1e-9, "{rp} {rq}");
    }

    #[test]
    fn uniform_angle_shift_is_a_zero_mode(seed in any::<u64>(), n in 2usize..5, loaded in any::<bool>()) {
        let ms = matrix_set_for(&net(seed, n, loaded)).unwrap();
        let ss = assemble_state_space(&ms).unwrap();
        let mut x = DVector::zeros(3 * n);
        x.rows_mut(0, n).fill(1.0);
        prop_assert!((&ss.a * x).amax() <= 1e-9 * ss.a.amax());
    }
}
