use altlora::adapter::LoraLayer;
use altlora::matcore::{damped_gram_inverse, gauge_sample, inverse, projector, Matrix, SeededRng, Side, Space};
use altlora::optim::{align_momentum_b, scaled_grad_b};
use altlora::oracle::{lstsq_oracle, LstsqObjective};
use proptest::prelude::*;

fn tall(seed: u64, rows: usize, cols: usize) -> Matrix {
    SeededRng::new(seed).gaussian_matrix(rows, cols, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn projector_is_symmetric_idempotent(seed in any::<u64>(), r in 1usize..6, extra in 0usize..20) {
        let m = tall(seed, r + extra, r);
        let p = projector(&m, Space::ColumnSpace, 0.0).unwrap();
        prop_assert!(p.rel_err(&p.transpose()) < 1e-12);
        prop_assert!(p.matmul(&p).unwrap().rel_err(&p) < 1e-10);
        prop_assert!((p.trace() - r as f64).abs() < 1e-9);
    }

    #[test]
    fn damped_inverse_inverts(seed in any::<u64>(), r in 1usize..6, rows in 1usize..20, lambda in 1e-6f64..1.0) {
        let m = tall(seed, rows, r);
        let inv = damped_gram_inverse(&m, Side::Left, lambda).unwrap();
        let mut gram = m.t_matmul(&m).unwrap();
        gram.add_diag(lambda);
        let eye = Matrix::identity(r);
        prop_assert!(gram.matmul(&inv).unwrap().sub(&eye).unwrap().max_abs() < 1e-6 * (1.0 + 1.0 / lambda));
    }

    #[test]
    fn projectors_and_merged_weight_ignore_gauge(seed in any::<u64>(), r in 1usize..6, k in 6usize..20, d in 6usize..20) {
        let mut rng = SeededRng::new(seed);
        let a = rng.gaussian_matrix(r, d, 1.0);
        let b = rng.gaussian_matrix(k, r, 1.0);
        let gauge = gauge_sample(r, 10.0, seed);
        let a2 = inverse(&gauge).unwrap().matmul(&a).unwrap();
        let b2 = b.matmul(&gauge).unwrap();
        let p1 = projector(&b, Space::ColumnSpace, 0.0).unwrap();
        let p2 = projector(&b2, Space::ColumnSpace, 0.0).unwrap();
        prop_assert!(p2.rel_err(&p1) < 1e-9);
        let q1 = projector(&a, Space::RowSpace, 0.0).unwrap();
        let q2 = projector(&a2, Space::RowSpace, 0.0).unwrap();
        prop_assert!(q2.rel_err(&q1) < 1e-9);
        let w0 = rng.gaussian_matrix(k, d, 1.0);
        let l1 = LoraLayer::new(w0.clone(), a, b, 2.0).unwrap();
        let l2 = LoraLayer::new(w0, a2, b2, 2.0).unwrap();
        prop_assert!(l2.merged_weight().rel_err(&l1.merged_weight()) < 1e-12);
    }

    #[test]
    fn scaled_grad_b_matches_oracle(seed in any::<u64>(), r in 1usize..6, k in 1usize..20, extra in 0usize..20, s in 0.1f64..8.0) {
        let mut rng = SeededRng::new(seed);
        let a = rng.gaussian_matrix(r, r + extra, 1.0);
        let g = rng.gaussian_matrix(k, r + extra, 1.0);
        let got = scaled_grad_b(&g.matmul_t(&a).unwrap().scale(s), &a, s, 0.0).unwrap();
        let want = lstsq_oracle(LstsqObjective::RightFactor { s, a: &a, g: &g }).unwrap();
        prop_assert!(got.rel_err(&want) < 1e-9);
    }

    #[test]
    fn aligned_momentum_preserves_induced_update_in_same_subspace(seed in any::<u64>(), r in 1usize..5, k in 1usize..12, d in 6usize..16) {
        let mut rng = SeededRng::new(seed);
        let a_old = rng.gaussian_matrix(r, d, 1.0);
        let mix = gauge_sample(r, 10.0, seed ^ 1);
        let a_new = mix.matmul(&a_old).unwrap();
        let mb = rng.gaussian_matrix(k, r, 1.0);
        let aligned = align_momentum_b(&mb, &a_old, &a_new, 0.0).unwrap();
        let before = mb.matmul(&a_old).unwrap();
        let after = aligned.matmul(&a_new).unwrap();
        prop_assert!(after.rel_err(&before) < 1e-9);
    }
}
