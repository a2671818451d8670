use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crisp::numerics::{matmul, pseudo_inverse, svd, weighted_kmeans, LossConfig, LossKind, Matrix};
use crisp::recombinator::{
    gate, generate_weight, layer_backward, linear_product, param_count, Activation, FactorizationConfig, GateConfig,
    Placement,
};
use crisp::store::{decode_container, encode_container, Tensor};

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape() && a.relative_error(b) <= tol
}

/// (d_in, d_out, r, s) with s dividing d_in.
fn shapes() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..6, 1usize..4, 1usize..9, 1usize..4).prop_map(|(s, k, d_out, r)| (s * k, d_out, r, s))
}

fn gates() -> impl Strategy<Value = GateConfig> {
    (0usize..4, 0usize..4).prop_map(|(p, a)| GateConfig::new(Placement::ALL[p], Activation::ALL[a]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_weight_is_reshaped_product((d_in, d_out, r, s) in shapes(), seed in any::<u64>()) {
        let cfg = FactorizationConfig::new(d_in, d_out, r, s).unwrap();
        let b = matrix(cfg.u(), r, seed);
        let a = matrix(r, s, seed ^ 1);
        let w = generate_weight(&b, &a, &cfg, &GateConfig::NONE).unwrap();
        prop_assert_eq!(w.shape(), (d_out, d_in));
        let flat = matmul(&b, &a).unwrap();
        prop_assert_eq!(w.data(), flat.data());
        prop_assert_eq!(&linear_product(&b, &a, &cfg).unwrap(), &w);
    }

    #[test]
    fn pre_gate_is_linear_in_the_basis((d_in, d_out, r, s) in shapes(), g in gates(), k in 0.1f32..4.0, seed in any::<u64>()) {
        prop_assume!(g.placement == Placement::Pre || g.effective().is_none());
        let cfg = FactorizationConfig::new(d_in, d_out, r, s).unwrap();
        let b = matrix(cfg.u(), r, seed);
        let a = matrix(r, s, seed ^ 2);
        let w = generate_weight(&b, &a, &cfg, &g).unwrap();
        let wk = generate_weight(&b.scale(k), &a, &cfg, &g).unwrap();
        prop_assert!(close(&wk, &w.scale(k), 1e-5));
    }

    #[test]
    fn backward_is_zero_for_zero_upstream((d_in, d_out, r, s) in shapes(), g in gates(), seed in any::<u64>()) {
        let cfg = FactorizationConfig::new(d_in, d_out, r, s).unwrap();
        let b = matrix(cfg.u(), r, seed);
        let a = matrix(r, s, seed ^ 3);
        let (db, da) = layer_backward(&Matrix::zeros(d_out, d_in), &b, &a, &cfg, &g).unwrap();
        prop_assert_eq!(db.shape(), b.shape());
        prop_assert_eq!(da.shape(), a.shape());
        prop_assert_eq!(db.max_abs(), 0.0);
        prop_assert_eq!(da.max_abs(), 0.0);
    }

    #[test]
    fn gate_derivative_matches_difference(g in gates(), seed in any::<u64>()) {
        let a = matrix(4, 5, seed);
        let (_, d) = gate(&a, &g);
        let h = 1e-3f32;
        let up = gate(&a.map(|v| v + h), &g).0;
        let down = gate(&a.map(|v| v - h), &g).0;
        for i in 0..a.len() {
            // relu's kink
            if a.data()[i].abs() < 2.0 * h {
                continue;
            }
            let numeric = (up.data()[i] - down.data()[i]) as f64 / (2.0 * h as f64);
            prop_assert!((numeric - d.data()[i] as f64).abs() < 1e-2, "{numeric} vs {}", d.data()[i]);
        }
    }

    #[test]
    fn transpose_and_reshape_round_trip(rows in 1usize..7, cols in 1usize..7, seed in any::<u64>()) {
        let m = matrix(rows, cols, seed);
        prop_assert_eq!(&m.transpose().transpose(), &m);
        prop_assert_eq!(&m.clone().reshape(cols, rows).unwrap().reshape(rows, cols).unwrap(), &m);
        prop_assert!(m.clone().reshape(rows + 1, cols).is_err());
    }

    #[test]
    fn svd_reconstructs_with_sorted_values(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let m = matrix(rows, cols, seed);
        let d = svd(&m).unwrap();
        prop_assert!(close(&d.reconstruct(), &m, 1e-5));
        prop_assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(d.s.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pinv_satisfies_penrose_identity(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let m = matrix(rows, cols, seed);
        let p = pseudo_inverse(&m, 1e-6).unwrap();
        prop_assert_eq!(p.shape(), (cols, rows));
        let mpm = matmul(&matmul(&m, &p).unwrap(), &m).unwrap();
        prop_assert!(close(&mpm, &m, 1e-4));
        let pmp = matmul(&matmul(&p, &m).unwrap(), &p).unwrap();
        prop_assert!(close(&pmp, &p, 1e-4));
    }

    #[test]
    fn kmeans_is_deterministic_and_consistent(n in 2usize..30, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(n);
        let pts = matrix(n, 3, seed);
        let w: Vec<f32> = (0..n).map(|i| 0.5 + (i % 3) as f32).collect();
        let a = weighted_kmeans(&pts, &w, k, seed, 50).unwrap();
        let b = weighted_kmeans(&pts, &w, k, seed, 50).unwrap();
        prop_assert_eq!(&a.assignments, &b.assignments);
        prop_assert_eq!(a.num_clusters(), k);
        prop_assert!((0..k).all(|c| !a.members(c).is_empty()));
        prop_assert!(a.inertia >= 0.0);
        // inertia never increases between Lloyd iterations
        prop_assert!(a.history.windows(2).all(|h| h[1] <= h[0] * (1.0 + 1e-6) + 1e-9));
    }

    #[test]
    fn losses_are_nonnegative_and_zero_at_target(seed in any::<u64>(), kind in 0usize..4) {
        let cfg = LossConfig::new(LossKind::ALL[kind]);
        let p = matrix(3, 4, seed);
        let t = matrix(3, 4, seed ^ 5);
        let (l, _) = crisp::numerics::loss_and_grad(&p, &t, &cfg).unwrap();
        prop_assert!(l >= 0.0);
        let (z, g) = crisp::numerics::loss_and_grad(&p, &p, &cfg).unwrap();
        prop_assert_eq!(z, 0.0);
        prop_assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn param_count_matches_shapes((d_in, d_out, r, s) in shapes(), layers in 1usize..5, groups in 1usize..4) {
        let cfg = FactorizationConfig::new(d_in, d_out, r, s).unwrap();
        let (total, per_layer) = param_count(&cfg, layers, groups);
        prop_assert_eq!(per_layer, r * s);
        prop_assert_eq!(total, groups * (cfg.u() * r + layers * r * s));
    }

    #[test]
    fn container_round_trips_any_bits(values in proptest::collection::vec(any::<u32>(), 0..64), bytes in proptest::collection::vec(any::<u8>(), 0..32)) {
        let floats: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
        let tensors = vec![
            Tensor::f32("w", vec![floats.len()], floats.clone()),
            Tensor::bytes("meta", bytes.clone()),
        ];
        let enc = encode_container(&tensors).unwrap();
        let dec = decode_container(&enc).unwrap();
        prop_assert_eq!(dec.len(), 2);
        let back: Vec<u32> = dec[0].as_f32().unwrap().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back, values);
        prop_assert_eq!(dec[1].as_bytes().unwrap(), &bytes[..]);
        prop_assert_eq!(encode_container(&dec).unwrap(), enc);
    }
}
