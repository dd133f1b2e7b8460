//! Invariants checked over random inputs.

use geoscale::attention::{layer_scores, normalize_tokens, softmax_rows, TokenBatch};
use geoscale::bounds::{
    calibrate, interaction_bound, naive_bound, overflow_prob_bound, CalibrationTarget, ModelDims,
};
use geoscale::calibration::{finalize_alpha, quantile, AutoAlphaConfig, SlackBuffer};
use geoscale::fp8::{decode, encode, finite_codebook, DelayedScaleState, OverflowMode, E4M3_MAX};
use geoscale::spectral::{
    backward_product, cold_start, converge, forward_product, interaction_matrix, power_step,
    AttentionWeights, Convergence,
};
use geoscale::tensor::{sample_sphere, spectral_norm_oracle, Matrix, Rng, ORACLE_TOL};
use proptest::prelude::*;

fn gqa_shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    // (d_h, n_kv, g, seed); d = n_q·d_h.
    (1usize..=4, 1usize..=3, prop::sample::select(vec![1usize, 2, 4]), any::<u64>())
}

fn weights(d_h: usize, n_kv: usize, g: usize, seed: u64) -> AttentionWeights {
    let n_q = n_kv * g;
    let mut rng = Rng::new(seed);
    AttentionWeights::gaussian(n_q * d_h, d_h, n_q, n_kv, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_backward_are_adjoint((d_h, n_kv, g, seed) in gqa_shape()) {
        let w = weights(d_h, n_kv, g, seed);
        let mut rng = Rng::new(seed ^ 1);
        let u = sample_sphere(&mut rng, w.d()).unwrap();
        let v = sample_sphere(&mut rng, w.d()).unwrap();
        let lhs = forward_product(&w, &v).unwrap().dot(&u);
        let rhs = backward_product(&w, &u).unwrap().dot(&v);
        let scale = w.wq().frobenius_norm() * w.wk().frobenius_norm();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn implicit_product_matches_explicit((d_h, n_kv, g, seed) in gqa_shape()) {
        let w = weights(d_h, n_kv, g, seed);
        let m = interaction_matrix(&w);
        let v = sample_sphere(&mut Rng::new(seed ^ 2), w.d()).unwrap();
        let implicit = forward_product(&w, &v).unwrap();
        let explicit = geoscale::tensor::matvec(&m, &v).unwrap();
        for (a, b) in implicit.data().iter().zip(explicit.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * m.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn oracle_is_transpose_invariant(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let a = Matrix::gaussian(rows, cols, &mut Rng::new(seed));
        let s = spectral_norm_oracle(&a, ORACLE_TOL).unwrap();
        let t = spectral_norm_oracle(&a.transpose(), ORACLE_TOL).unwrap();
        prop_assert!((s - t).abs() <= 1e-10 * s.max(1.0));
        prop_assert!(s <= a.frobenius_norm() * (1.0 + 1e-12));
        prop_assert!(s >= a.max_abs() * (1.0 - 1e-12));
    }

    #[test]
    fn power_estimates_increase_and_stay_below_norm((d_h, n_kv, g, seed) in gqa_shape()) {
        let w = weights(d_h, n_kv, g, seed);
        let exact = spectral_norm_oracle(&interaction_matrix(&w), ORACLE_TOL).unwrap();
        let mut state = cold_start(&w, &Rng::new(seed), 1).unwrap();
        let mut prev = state.sigma();
        for _ in 0..30 {
            let s = power_step(&w, &mut state).unwrap();
            prop_assert!(s >= prev * (1.0 - 1e-12));
            prop_assert!(s <= exact * (1.0 + 1e-10));
            prev = s;
        }
    }

    #[test]
    fn sigma_scales_quadratically((d_h, n_kv, g, seed) in gqa_shape(), s in 0.1f64..10.0) {
        let w = weights(d_h, n_kv, g, seed);
        let a = spectral_norm_oracle(&interaction_matrix(&w), ORACLE_TOL).unwrap();
        let b = spectral_norm_oracle(&interaction_matrix(&w.scaled(s)), ORACLE_TOL).unwrap();
        prop_assert!((b - s * s * a).abs() <= 1e-9 * b.max(1e-300));
    }

    #[test]
    fn warm_start_tracks_slow_drift((d_h, n_kv, g, seed) in gqa_shape()) {
        let w = weights(d_h, n_kv, g, seed);
        let crit = Convergence { tol: 1e-13, max_iters: 100_000 };
        let mut state = cold_start(&w, &Rng::new(seed), 5).unwrap();
        converge(&w, &mut state, crit).unwrap();
        // Uniform rescale keeps the singular vectors; one warm step suffices.
        let w2 = w.scaled(1.01);
        let exact = spectral_norm_oracle(&interaction_matrix(&w2), ORACLE_TOL).unwrap();
        let s = power_step(&w2, &mut state).unwrap();
        prop_assert!((s - exact).abs() <= 1e-6 * exact.max(1e-300));
    }

    #[test]
    fn interaction_bound_is_tighter((d_h, n_kv, g, seed) in gqa_shape()) {
        let w = weights(d_h, n_kv, g, seed);
        for h in 0..w.n_q() {
            let head = w.head(h).unwrap();
            let sq = spectral_norm_oracle(head.wq(), ORACLE_TOL).unwrap();
            let sk = spectral_norm_oracle(head.wk(), ORACLE_TOL).unwrap();
            let sqk = spectral_norm_oracle(&interaction_matrix(&head), ORACLE_TOL).unwrap();
            let bx = (w.d() as f64).sqrt();
            prop_assert!(interaction_bound(sqk, bx, d_h) <= naive_bound(sq, sk, bx, d_h) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn scores_are_bilinear(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let w = AttentionWeights::gaussian(8, 2, 4, 2, &mut rng).unwrap();
        let x = TokenBatch::spherical(&mut rng, 5, 8).unwrap();
        let s = layer_scores(&x, &x, &w).unwrap();
        let sc = layer_scores(&x.scaled_raw(c), &x.scaled_raw(c), &w).unwrap();
        for (a, b) in s.data().iter().zip(sc.data()) {
            prop_assert!((c * c * a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn normalization_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let raw = Matrix::gaussian(4, 6, &mut Rng::new(seed));
        let a = normalize_tokens(&raw).unwrap();
        let b = normalize_tokens(&raw.scaled(c)).unwrap();
        for (x, y) in a.matrix().data().iter().zip(b.matrix().data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), spread in 0.0f64..200.0) {
        let s = Matrix::gaussian(4, 7, &mut Rng::new(seed)).scaled(spread);
        let p = softmax_rows(&s);
        for i in 0..4 {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(i).iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn encode_picks_a_nearest_code(x in -460.0f64..460.0) {
        let e = encode(x, OverflowMode::FlagNan);
        if x.abs() > E4M3_MAX {
            prop_assert!(e.overflowed && e.code.is_nan());
        } else {
            let got = decode(e.code);
            let best = finite_codebook()
                .into_iter()
                .map(|(_, v)| (v - x).abs())
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!((got - x).abs(), best);
        }
    }

    #[test]
    fn delayed_scale_tracks_history_max(obs in prop::collection::vec(0.0f64..1e4, 1..40)) {
        let mut st = DelayedScaleState::default();
        for o in &obs {
            st.update(*o).unwrap();
        }
        let window: Vec<f64> = std::iter::repeat_n(1.0, 16).chain(obs.iter().copied()).collect();
        let expect = window[window.len() - 16..].iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(st.scale(), expect / (448.0 * 0.9));
    }

    #[test]
    fn quantile_within_range_and_monotone(xs in prop::collection::vec(0.0f64..1.0, 1..50), q1 in 0.01f64..0.99, q2 in 0.01f64..0.99) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = quantile(&xs, lo).unwrap();
        let b = quantile(&xs, hi).unwrap();
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(0.0, f64::max);
        prop_assert!(min <= a && a <= b && b <= max);
    }

    #[test]
    fn finalized_alpha_dominates_quantile(xs in prop::collection::vec(0.001f64..1.0, 100..150), kappa in 1.0f64..3.0) {
        let mut buf = SlackBuffer::new();
        for x in &xs {
            buf.record(*x, 1.0).unwrap();
        }
        let cfg = AutoAlphaConfig { kappa, ..AutoAlphaConfig::default() };
        let a = finalize_alpha(&buf, &cfg).unwrap();
        let q = quantile(&xs, cfg.q).unwrap();
        prop_assert!(a >= q);
        prop_assert_eq!(a == q, kappa == 1.0);
    }

    #[test]
    fn calibration_is_sound(
        d_h_pow in 3u32..8,
        width in 2usize..65,
        n_layers in 1usize..100,
        seq_pow in 6u32..14,
        delta_exp in 2i32..12,
    ) {
        let d_h = 1usize << d_h_pow;
        let dims = ModelDims::new(d_h * width, d_h, n_layers, width).unwrap();
        let target = CalibrationTarget::new(10f64.powi(-delta_exp), 1 << seq_pow).unwrap();
        if let Ok(r) = calibrate(&dims, &target) {
            let p = overflow_prob_bound(&dims, &target, r.gamma, r.alpha_min);
            prop_assert!(p <= target.delta_star + 1e-9);
            prop_assert!((p - r.overflow_bound).abs() <= 1e-15);
            prop_assert!(r.alpha_min > 0.0 && r.alpha_min < 1.0);
        }
    }
}

#[test]
fn every_finite_code_round_trips() {
    for (code, value) in finite_codebook() {
        assert_eq!(encode(value, OverflowMode::FlagNan).code, code);
        assert_eq!(decode(code), value);
    }
}
