use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use psf_unmix_core::coherence::{estimate_lipschitz, CoherenceCache, LipschitzEstimates};
use psf_unmix_core::linalg::LeastSquares;
use psf_unmix_core::radius::{radius_bound, theorem_constants};
use psf_unmix_core::varpro::{evaluate, loss, HessianForm};
use psf_unmix_core::{build_dictionary, KernelFamily, Order, ProblemSpec, SampleGrid, SupportSpec};

fn family() -> impl Strategy<Value = KernelFamily> {
    prop_oneof![
        (0.5f64..25.0).prop_map(KernelFamily::u_laplace),
        Just(KernelFamily::gaussian()),
        Just(KernelFamily::lorentzian()),
    ]
}

/// Two or three groups of grid-aligned spikes with gaps of at least `lag` steps.
fn instance() -> impl Strategy<Value = (ProblemSpec, Vec<f64>, DVector<f64>)> {
    (
        family(),
        20usize..80,
        2usize..=3,
        proptest::collection::vec(0.05f64..0.3, 3),
        any::<u64>(),
    )
        .prop_map(|(kernel, lag, p, widths, seed)| {
            let grid = SampleGrid::centered(601, 1.0).unwrap();
            let h = grid.spacing();
            let first = 300 - lag * p / 2;
            let groups: Vec<Vec<f64>> = (0..p).map(|i| vec![grid.instant(first + i * lag)]).collect();
            let delta = lag as f64 * h;
            let theta: Vec<f64> = widths[..p].iter().map(|w| w * delta).collect();
            let spec = ProblemSpec::new(kernel, grid, SupportSpec::new(groups).unwrap()).unwrap();
            // deterministic pseudo-random data
            let mut state = seed | 1;
            let x = DVector::from_fn(601, |_, _| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            (spec, theta, x)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn kernels_are_even(k in family(), theta in 1e-3f64..1.0, t in -1.0f64..1.0) {
        for order in Order::ALL {
            let a = k.eval(theta, t, order).unwrap();
            let b = k.eval(theta, -t, order).unwrap();
            prop_assert!((a - b).abs() <= 1e-14 * a.abs() + 1e-300);
        }
    }

    #[test]
    fn u_laplace_tails_shrink_with_u(u1 in 0.5f64..10.0, du in 0.1f64..10.0, theta in 1e-2f64..0.5, r in 1.001f64..3.0) {
        let t = r * theta;
        let lo = KernelFamily::u_laplace(u1).eval(theta, t, Order::Zero).unwrap();
        let hi = KernelFamily::u_laplace(u1 + du).eval(theta, t, Order::Zero).unwrap();
        prop_assert!(hi <= lo);
        prop_assert_eq!(KernelFamily::u_laplace(u1).eval(theta, 0.0, Order::Zero).unwrap(), 1.0);
    }

    #[test]
    fn projector_annihilates_the_dictionary((spec, theta, x) in instance()) {
        let g = build_dictionary(&spec, &theta).unwrap();
        let ls = LeastSquares::new(&g).unwrap();
        for j in 0..g.ncols() {
            let col = g.column(j).into_owned();
            prop_assert!(ls.project_complement(&col).norm() <= 1e-10 * col.norm());
        }
        // the least-squares amplitudes beat any perturbation of them
        let eta = ls.solve(&x);
        let best = (&x - &g * &eta).norm();
        for k in 0..10 {
            let bump = DVector::from_fn(eta.len(), |i, _| 1e-3 * ((i + k) as f64).sin());
            prop_assert!((&x - &g * (&eta + bump)).norm() >= best);
        }
    }

    #[test]
    fn evaluation_is_consistent((spec, theta, x) in instance()) {
        let n = spec.n_samples() as f64;
        for form in [HessianForm::Exact, HessianForm::Unprojected] {
            let ev = evaluate(&spec, &theta, &x, form).unwrap();
            prop_assert!(ev.loss >= 0.0);
            let expect = (&ev.curvature_e + &ev.residual_r) / n;
            prop_assert!((&ev.hessian - &expect).amax() <= 1e-12 * (1.0 + expect.amax()));
            let g = build_dictionary(&spec, &theta).unwrap();
            prop_assert!(g.tr_mul(&ev.projected_residual).amax() <= 1e-10 * x.norm() * g.amax());
            prop_assert!(ev.weyl_holds());
        }
        prop_assert!((loss(&spec, &theta, &x).unwrap() * 2.0 * n - evaluate(&spec, &theta, &x, HessianForm::Exact).unwrap().projected_residual.norm_squared()).abs() <= 1e-10 * x.norm_squared());
    }

    #[test]
    fn coherence_is_monotone_in_separation(k in family(), ti in 5e-3f64..0.05, tj in 5e-3f64..0.05) {
        let cache = CoherenceCache::new(k, SampleGrid::centered(801, 1.0).unwrap());
        for order in Order::ALL {
            let mut last_mu = f64::INFINITY;
            let mut last_total = f64::INFINITY;
            for d in [0.02, 0.05, 0.1, 0.2, 0.4] {
                let mu = cache.mu(ti, tj, d, order).unwrap();
                let total = cache.total(ti, tj, d, order).unwrap().total;
                prop_assert!(mu >= 0.0 && total >= 0.0);
                prop_assert!(mu <= last_mu * (1.0 + 1e-12) && total <= last_total * (1.0 + 1e-12));
                last_mu = mu;
                last_total = total;
            }
        }
    }

    // Swapping the atoms moves the window edges, so symmetry needs tails
    // that have died out before them.
    #[test]
    fn coherence_is_symmetric_for_short_atoms(u in 2.0f64..25.0, ti in 5e-3f64..0.05, tj in 5e-3f64..0.05) {
        let cache = CoherenceCache::new(KernelFamily::u_laplace(u), SampleGrid::centered(801, 1.0).unwrap());
        for order in Order::ALL {
            for d in [0.0, 0.02, 0.05, 0.1, 0.2, 0.4] {
                let a = cache.mu(ti, tj, d, order).unwrap();
                let b = cache.mu(tj, ti, d, order).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.max(b) + 1e-300);
            }
        }
    }

    #[test]
    fn radius_shrinks_with_noise((spec, theta, _x) in instance()) {
        let c = theorem_constants(&spec, &theta, &LipschitzEstimates::zero()).unwrap();
        for a in 0..3 {
            prop_assert!(c.lambda_min[a] <= c.lambda_max[a]);
            if c.big_lambda_min[a] > 0.0 {
                prop_assert!(c.big_lambda_min[a] <= c.big_lambda_max[a]);
            }
        }
        let mut last = f64::INFINITY;
        for w in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5] {
            let x = (1.0f64 + w * w).sqrt();
            let eps = radius_bound(&c, x, w, 1.0);
            prop_assert!(eps >= 0.0 && eps <= last);
            last = eps;
        }
        let at_zero = radius_bound(&c, 1.0, 0.0, 1.0);
        let near_zero = radius_bound(&c, (1.0f64 + 1e-20).sqrt(), 1e-10, 1.0);
        if at_zero.is_finite() {
            prop_assert!((at_zero - near_zero).abs() <= 1e-6 * at_zero.max(1e-300));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn lipschitz_estimates_grow_with_probes(k in family(), theta in 0.01f64..0.03) {
        let grid = SampleGrid::centered(401, 1.0).unwrap();
        let spec = ProblemSpec::new(k, grid, SupportSpec::new(vec![vec![-0.2], vec![0.2]]).unwrap()).unwrap();
        let coarse = estimate_lipschitz(&spec, (0.9 * theta, 1.1 * theta), 0.4, 3).unwrap();
        let fine = estimate_lipschitz(&spec, (0.9 * theta, 1.1 * theta), 0.4, 9).unwrap();
        let all = |e: &LipschitzEstimates| [e.c_mu, e.c_delta, e.c_g, e.c_g_plus];
        for (a, b) in all(&coarse).into_iter().zip(all(&fine)) {
            prop_assert!(a >= 0.0 && b >= a);
        }
    }
}

#[test]
fn gramian_of_separated_atoms_is_nearly_diagonal() {
    let grid = SampleGrid::centered(1001, 1.0).unwrap();
    let spec = ProblemSpec::new(
        KernelFamily::gaussian(),
        grid,
        SupportSpec::new(vec![vec![-0.5], vec![0.5]]).unwrap(),
    )
    .unwrap();
    let g = build_dictionary(&spec, &[0.01, 0.01]).unwrap();
    let gram: DMatrix<f64> = g.tr_mul(&g);
    assert!(gram[(0, 1)].abs() <= 1e-12 * gram[(0, 0)]);
}
