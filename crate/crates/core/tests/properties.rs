use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patchtrack::appearance::{accumulate_fragments, spatial_weights, ScaleLabel};
use patchtrack::bench::{compute_curves, format_results, overlap_score, parse_results, BBox};
use patchtrack::filter::{map_index, propagate, resample, reweight, AffineState, ParticleSet};
use patchtrack::image::GrayImage;
use patchtrack::patching::{extract_patches, TEMPLATE_SIDE};
use patchtrack::sparse::{somp_solve, somp_solve_traced, SolverConfig};

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..300.0f64, -50.0..300.0f64, 0.0..120.0f64, 0.0..120.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #[test]
    fn overlap_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = overlap_score(&a, &b);
        prop_assert_eq!(ab, overlap_score(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.w > 0.0 && a.h > 0.0 {
            prop_assert_eq!(overlap_score(&a, &a), 1.0);
        }
    }

    #[test]
    fn curves_are_monotone(pairs in prop::collection::vec((bbox(), bbox()), 1..30)) {
        let (track, gt): (Vec<BBox>, Vec<BBox>) = pairs.into_iter().unzip();
        let c = compute_curves(&track, &gt).unwrap();
        prop_assert!(c.precision.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.success.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((0.0..=1.0).contains(&c.auc));
        prop_assert_eq!(c.dp20, c.precision[20]);
    }

    #[test]
    fn results_round_trip_at_written_precision(boxes in prop::collection::vec(bbox(), 1..20)) {
        let back = parse_results(&format_results(&boxes)).unwrap();
        prop_assert_eq!(back.len(), boxes.len());
        for (a, b) in back.iter().zip(&boxes) {
            for (u, v) in a.to_array().iter().zip(b.to_array()) {
                prop_assert!((u - v).abs() <= 5e-4 + 1e-9);
            }
        }
    }

    #[test]
    fn somp_respects_budget_and_shrinks_residual(
        d in matrix(10, 16),
        x in matrix(10, 3),
        budget in 1usize..6,
    ) {
        let cfg = SolverConfig { max_atoms: budget, residual_tol: 0.0 };
        let (out, trace) = somp_solve_traced(&d, &x, &cfg).unwrap();
        prop_assert!(out.row_support_size() <= budget);
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
    }

    #[test]
    fn permuting_atoms_permutes_rows(d in matrix(6, 9), x in matrix(6, 2), shift in 1usize..9) {
        // a cyclic shift keeps ties resolved the same way only without ties, which
        // random continuous data gives almost surely
        let perm: Vec<usize> = (0..9).map(|j| (j + shift) % 9).collect();
        let dp = DMatrix::from_fn(6, 9, |r, c| d[(r, perm[c])]);
        let cfg = SolverConfig { max_atoms: 3, residual_tol: 0.0 };
        let a = somp_solve(&d, &x, &cfg).unwrap();
        let b = somp_solve(&dp, &x, &cfg).unwrap();
        for c in 0..9 {
            for k in 0..2 {
                prop_assert!((b.matrix()[(c, k)] - a.matrix()[(perm[c], k)]).abs() < 1e-9);
            }
        }
        let ra = (&x - &d * a.matrix()).norm();
        let rb = (&x - &dp * b.matrix()).norm();
        prop_assert!((ra - rb).abs() < 1e-9);
    }

    #[test]
    fn patches_are_unit_or_zero(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = GrayImage::from_fn(TEMPLATE_SIDE, TEMPLATE_SIDE, |_, _| rng.random::<f64>());
        for label in [ScaleLabel::Small, ScaleLabel::Large] {
            let p = extract_patches(&t, &label.grid()).unwrap();
            for c in p.matrix().column_iter() {
                prop_assert!((c.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fragments_are_nonnegative_means(code in prop::collection::vec(-1.0..1.0f64, 1..12), n in 1usize..4) {
        let len = code.len() - code.len() % n;
        prop_assume!(len > 0);
        let v = DVector::from_vec(code[..len].to_vec());
        let z = accumulate_fragments(&v, n).unwrap();
        prop_assert_eq!(z.len(), len / n);
        prop_assert!(z.iter().all(|&q| (0.0..=1.0).contains(&q)));
    }

    #[test]
    fn spatial_weights_lie_in_one_two(flags in prop::collection::vec(any::<bool>(), 9), beta in 0.0..5.0f64) {
        let w = spatial_weights(&ScaleLabel::Large.grid(), &flags, beta).unwrap();
        for (k, &f) in flags.iter().enumerate() {
            let ok = if f { w[k] > 1.0 && w[k] <= 2.0 } else { w[k] == 1.0 };
            prop_assert!(ok);
        }
    }

    #[test]
    fn reweighted_particles_form_a_distribution(lik in prop::collection::vec(0.0..10.0f64, 1..50)) {
        let set = ParticleSet::uniform(AffineState::from_box(0.0, 0.0, 32.0, 32.0), lik.len()).unwrap();
        let w = reweight(&set, &lik).unwrap();
        let total: f64 = w.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(w.degenerate, lik.iter().all(|&l| l == 0.0));
        let best = map_index(&w).unwrap();
        prop_assert!(lik.iter().all(|&l| l <= lik[best]));
    }

    #[test]
    fn resampling_only_draws_weighted_states(seed in any::<u64>(), n in 2usize..40) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = ParticleSet::uniform(AffineState::from_box(10.0, 10.0, 32.0, 32.0), n).unwrap();
        let moved = propagate(&base, &[3.0, 3.0, 0.0, 0.0, 0.0, 0.0], &mut rng).unwrap();
        let lik: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { rng.random::<f64>() + 0.1 } else { 0.0 }).collect();
        let drawn = resample(&reweight(&moved, &lik).unwrap(), &mut rng).unwrap();
        prop_assert_eq!(drawn.len(), n);
        for s in &drawn.states {
            let i = moved.states.iter().position(|m| m == s).unwrap();
            prop_assert!(lik[i] > 0.0);
        }
    }
}
