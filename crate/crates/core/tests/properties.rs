//! Randomized checks of the library's structural guarantees: box invariance,
//! gate bounds, contraction soundness, equilibrium residuals, projection
//! geometry, horizon arithmetic, solver monotonicity, and round trips.

use gru_mpc::estimation::{
    estimate_lambda, generate_excitation, normalize_dataset, Episode, ExcitationKind,
    TrajectoryPairConfig,
};
use gru_mpc::gru::{
    deltaiss_certificate, gate_bounds, gru_gates, gru_output, gru_step, kappa_x,
    sample_input_box, sample_invariant_box, GruParams, InvariantBox,
};
use gru_mpc::mpc::{
    fhocp_cost, find_equilibrium, min_simulation_horizon, solve_fhocp, EquilibriumOptions,
    FhocpSpec, InputBox, SolverOptions,
};
use gru_mpc::observer::{observer_step, tune_observer};
use gru_mpc::sim::ReferenceSchedule;
use gru_mpc::simplex::solve_lp;
use gru_mpc::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shrinking every weight tightens all the certificate norms, so this loop
/// terminates for any starting point.
fn certified(n_x: usize, n_u: usize, n_y: usize, scale: f64, seed: u64) -> GruParams {
    let mut p = GruParams::random_scaled(n_x, n_u, n_y, scale, seed);
    while !deltaiss_certificate(&p, &InvariantBox::unit()).certified {
        p.scale_mut(0.8);
    }
    p
}

fn settle(p: &GruParams, u: &DVector<f64>, steps: usize) -> DVector<f64> {
    let mut x = DVector::zeros(p.n_x());
    for _ in 0..steps {
        x = gru_step(p, &x, u).unwrap();
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any weights, any radius at least one: the state box maps into itself.
    #[test]
    fn state_box_is_forward_invariant(
        n_x in 1usize..=4,
        n_u in 1usize..=2,
        scale in 0.1f64..2.0,
        radius in 1.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let p = GruParams::random_scaled(n_x, n_u, 1, scale, seed);
        let bx = InvariantBox::new(radius).unwrap();
        let mut x = sample_invariant_box(&bx, n_x, 1, seed ^ 1)[0].clone();
        let inputs = sample_input_box(n_u, 200, seed ^ 2);
        for u in &inputs {
            x = gru_step(&p, &x, u).unwrap();
            prop_assert!(x.amax() <= radius + 1e-12, "state escaped the box: {}", x.amax());
        }
    }

    /// Gate activations along admissible trajectories never leave the
    /// worst-case intervals used by the certificate.
    #[test]
    fn gate_activations_respect_worst_case_bounds(
        n_x in 1usize..=4,
        n_u in 1usize..=2,
        scale in 0.1f64..1.5,
        radius in 1.0f64..2.5,
        seed in any::<u64>(),
    ) {
        let p = GruParams::random_scaled(n_x, n_u, 1, scale, seed);
        let bx = InvariantBox::new(radius).unwrap();
        let gb = gate_bounds(&p, &bx);
        prop_assert!(gb.sigma_z >= 0.5 && gb.sigma_z < 1.0);
        prop_assert!(gb.sigma_f >= 0.5 && gb.sigma_f < 1.0);
        prop_assert!((0.0..1.0).contains(&gb.phi_r));
        let xs = sample_invariant_box(&bx, n_x, 20, seed ^ 3);
        let us = sample_input_box(n_u, 20, seed ^ 4);
        for (x, u) in xs.iter().zip(&us) {
            let g = gru_gates(&p, x, u).unwrap();
            for i in 0..n_x {
                prop_assert!(g.z[i] >= 1.0 - gb.sigma_z - 1e-12 && g.z[i] <= gb.sigma_z + 1e-12);
                prop_assert!(g.f[i] >= 1.0 - gb.sigma_f - 1e-12 && g.f[i] <= gb.sigma_f + 1e-12);
                prop_assert!(g.r[i].abs() <= gb.phi_r + 1e-12);
            }
        }
    }

    /// The per-step contraction factor is affine in the update gate, so its
    /// maximum over the reachable gate interval sits at an endpoint.
    #[test]
    fn contraction_factor_is_affine_and_extremal_at_endpoints(
        n_x in 1usize..=4,
        scale in 0.1f64..1.5,
        radius in 1.0f64..2.5,
        t in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let p = GruParams::random_scaled(n_x, 1, 1, scale, seed);
        let bx = InvariantBox::new(radius).unwrap();
        let gb = gate_bounds(&p, &bx);
        let (lo, hi) = (1.0 - gb.sigma_z, gb.sigma_z);
        let mid = lo + t * (hi - lo);
        let k_lo = kappa_x(&p, &bx, lo).unwrap();
        let k_hi = kappa_x(&p, &bx, hi).unwrap();
        let k_mid = kappa_x(&p, &bx, mid).unwrap();
        let affine = (1.0 - t) * k_lo + t * k_hi;
        prop_assert!((k_mid - affine).abs() <= 1e-9 * (1.0 + affine.abs()));
        prop_assert!(k_mid <= k_lo.max(k_hi) + 1e-12);
        let cert = deltaiss_certificate(&p, &bx);
        prop_assert!((cert.lambda - k_lo.max(k_hi)).abs() <= 1e-12 * (1.0 + cert.lambda));
    }

    /// Certified models: two trajectories under a shared input sequence lose
    /// a factor of at least lambda in the infinity norm every single step.
    #[test]
    fn certified_models_contract_shared_input_pairs(
        n_x in 1usize..=4,
        n_u in 1usize..=2,
        seed in any::<u64>(),
    ) {
        let p = certified(n_x, n_u, 1, 0.6, seed);
        let cert = deltaiss_certificate(&p, &InvariantBox::unit());
        let bx = InvariantBox::unit();
        let mut xa = sample_invariant_box(&bx, n_x, 1, seed ^ 5)[0].clone();
        let mut xb = sample_invariant_box(&bx, n_x, 1, seed ^ 6)[0].clone();
        let d0 = (&xa - &xb).norm();
        let inputs = sample_input_box(n_u, 30, seed ^ 7);
        for (k, u) in inputs.iter().enumerate() {
            let d_before = (&xa - &xb).amax();
            xa = gru_step(&p, &xa, u).unwrap();
            xb = gru_step(&p, &xb, u).unwrap();
            let d_after = (&xa - &xb).amax();
            prop_assert!(
                d_after <= d_before * (cert.lambda + 1e-10) + 1e-300,
                "step ratio {} exceeds lambda {}", d_after / d_before, cert.lambda
            );
            let bound = cert.mu * cert.lambda.powi(k as i32 + 1) * d0;
            prop_assert!((&xa - &xb).norm() <= bound * (1.0 + 1e-9) + 1e-300);
        }
    }

    /// The sampled rate can never exceed the certified one.
    #[test]
    fn empirical_rate_never_exceeds_certified_rate(
        n_x in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let p = certified(n_x, 1, 1, 0.7, seed);
        let cert = deltaiss_certificate(&p, &InvariantBox::unit());
        let hat = estimate_lambda(&p, &TrajectoryPairConfig {
            n_pairs: 64,
            horizon: 40,
            mu: cert.mu,
            seed,
            state_box: InvariantBox::unit(),
        }).unwrap();
        prop_assert!(hat <= cert.lambda + 1e-12, "estimate {hat} above certificate {}", cert.lambda);
    }

    /// Whatever operating point the solver returns really is a fixed point
    /// producing the requested output.
    #[test]
    fn equilibrium_solutions_are_fixed_points(
        n_x in 1usize..=3,
        u_hold in -0.9f64..0.9,
        seed in any::<u64>(),
    ) {
        let p = certified(n_x, 1, 1, 0.6, seed);
        let bx = InvariantBox::unit();
        let u = DVector::from_vec(vec![u_hold]);
        let x_inf = settle(&p, &u, 4_000);
        prop_assume!(x_inf.amax() < 0.9);
        let y_target = gru_output(&p, &x_inf).unwrap();
        let eq = find_equilibrium(
            &p, &bx, &y_target,
            (&DVector::zeros(n_x), &DVector::zeros(1)),
            EquilibriumOptions::default(),
        ).unwrap();
        let x_next = gru_step(&p, &eq.x, &eq.u).unwrap();
        prop_assert!((&x_next - &eq.x).amax() <= 1e-8);
        prop_assert!((gru_output(&p, &eq.x).unwrap() - &y_target).amax() <= 1e-8);
        prop_assert!(eq.state_residual <= 1e-9 && eq.output_residual <= 1e-9);
    }

    /// Projection onto the input box is idempotent, feasible, and no farther
    /// from the query than any feasible point, coordinate by coordinate.
    #[test]
    fn input_projection_is_idempotent_and_minimal(
        n_u in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0));
        let lo = a.zip_map(&b, f64::min);
        let hi = a.zip_map(&b, f64::max);
        let bx = InputBox::new(lo.clone(), hi.clone()).unwrap();
        let v = DVector::from_fn(n_u, |_, _| rng.random_range(-3.0..3.0));
        let pv = bx.project(&v);
        prop_assert!(bx.contains(&pv));
        prop_assert_eq!(bx.project(&pv), pv.clone());
        let inside = DVector::from_fn(n_u, |j, _| rng.random_range(lo[j]..=hi[j]));
        for j in 0..n_u {
            prop_assert!((pv[j] - v[j]).abs() <= (inside[j] - v[j]).abs() + 1e-15);
        }
    }

    /// The returned horizon is the smallest integer strictly above the real
    /// bound, and a slower rate never shortens it.
    #[test]
    fn horizon_count_is_the_smallest_admissible_integer(
        lambda in 0.05f64..0.995,
        mu in 0.3f64..3.0,
        q_max in 0.1f64..4.0,
        gap in 0.01f64..2.0,
        dim in 1usize..=3,
    ) {
        let q = DMatrix::identity(dim, dim) * q_max;
        let s = DMatrix::identity(dim, dim) * (q_max + gap);
        let h = min_simulation_horizon(mu, lambda, &q, &s).unwrap();
        prop_assert!((h.m_min as f64) > h.bound);
        if h.m_min > 0 {
            prop_assert!(((h.m_min - 1) as f64) <= h.bound);
        } else {
            prop_assert!(h.bound < 0.0);
        }
        let slower = lambda.sqrt();
        let h2 = min_simulation_horizon(mu, slower, &q, &s).unwrap();
        prop_assert!(h2.m_min >= h.m_min, "rate {slower} needs {} < {}", h2.m_min, h.m_min);
    }

    /// Piecewise-constant reference lookup agrees with a linear scan.
    #[test]
    fn reference_schedule_matches_a_linear_scan(
        times in prop::collection::btree_set(1usize..300, 0..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = vec![(0usize, DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))];
        for t in &times {
            steps.push((*t, DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))));
        }
        let schedule = ReferenceSchedule::new(steps.clone()).unwrap();
        for k in 0..320 {
            let expected = steps.iter().rev().find(|(start, _)| *start <= k).map(|(_, v)| v).unwrap();
            prop_assert_eq!(schedule.value_at(k), expected);
        }
        let changes: Vec<usize> = times.iter().copied().collect();
        prop_assert_eq!(schedule.change_steps(), changes);
    }

    /// Feasible-by-construction linear programs come back feasible and at
    /// least as good as the constructed point.
    #[test]
    fn feasible_linear_programs_solve_to_feasible_optima(
        n in 1usize..=5,
        m in 1usize..=5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let slack: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let ax0 = &a * DVector::from_vec(x0.clone());
        let b: Vec<f64> = (0..m).map(|i| ax0[i] + slack[i]).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        match solve_lp(&c, &a, &b) {
            Ok(sol) => {
                let ax = &a * DVector::from_vec(sol.x.clone());
                for i in 0..m {
                    prop_assert!(ax[i] <= b[i] + 1e-7, "row {i} violated: {} > {}", ax[i], b[i]);
                }
                for (j, v) in sol.x.iter().enumerate() {
                    prop_assert!(*v >= -1e-9, "x[{j}] negative: {v}");
                }
                let obj0: f64 = c.iter().zip(&x0).map(|(ci, xi)| ci * xi).sum();
                prop_assert!(sol.objective <= obj0 + 1e-7);
            }
            Err(Error::LpUnbounded) => {}
            Err(e) => prop_assert!(false, "unexpected solver error: {e}"),
        }
    }

    /// Normalized data stays in the unit range and denormalizes back to the
    /// original samples.
    #[test]
    fn dataset_normalization_round_trips(
        n_u in 1usize..=2,
        n_y in 1usize..=2,
        len in 5usize..=40,
        episodes in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Episode> = (0..episodes)
            .map(|_| {
                let inputs = (0..len)
                    .map(|_| DVector::from_fn(n_u, |_, _| rng.random_range(-5.0..5.0)))
                    .collect();
                let outputs = (0..len)
                    .map(|_| DVector::from_fn(n_y, |_, _| rng.random_range(-3.0..7.0)))
                    .collect();
                Episode::new(inputs, outputs).unwrap()
            })
            .collect();
        let ds = normalize_dataset(&raw).unwrap();
        for (ep, orig) in ds.episodes.iter().zip(&raw) {
            for (t, u) in ep.inputs.iter().enumerate() {
                prop_assert!(u.amax() <= 1.0 + 1e-9);
                let back = ds.normalization.denormalize_input(u);
                prop_assert!((back - &orig.inputs[t]).amax() <= 1e-9 * 6.0);
            }
            for (t, y) in ep.outputs.iter().enumerate() {
                prop_assert!(y.amax() <= 1.0 + 1e-9);
                let back = ds.normalization.denormalize_output(y);
                prop_assert!((back - &orig.outputs[t]).amax() <= 1e-9 * 8.0);
            }
        }
    }

    /// Excitation signals are admissible inputs and reproducible from the
    /// seed alone.
    #[test]
    fn excitation_is_admissible_and_reproducible(
        kind in prop::sample::select(vec![ExcitationKind::Multisine, ExcitationKind::RandomSteps]),
        length in 8usize..=200,
        channels in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let a = generate_excitation(kind, length, channels, seed).unwrap();
        let b = generate_excitation(kind, length, channels, seed).unwrap();
        prop_assert_eq!(a.len(), length);
        for (ua, ub) in a.iter().zip(&b) {
            prop_assert_eq!(ua.len(), channels);
            prop_assert!(ua.amax() <= 1.0);
            prop_assert_eq!(ua.as_slice(), ub.as_slice());
        }
    }

    /// Weight JSON serialisation is lossless.
    #[test]
    fn weight_json_round_trip_is_exact(
        n_x in 1usize..=4,
        n_u in 1usize..=2,
        n_y in 1usize..=2,
        scale in 0.1f64..2.0,
        seed in any::<u64>(),
    ) {
        let p = GruParams::random_scaled(n_x, n_u, n_y, scale, seed);
        let back = GruParams::from_json(&p.to_json()).unwrap();
        prop_assert_eq!(back, p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Tuned observer gains contract the estimation error in the infinity
    /// norm at every step, whatever the inputs.
    #[test]
    fn tuned_observer_contracts_every_step(
        n_x in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let p = certified(n_x, 1, 1, 0.5, seed);
        let bx = InvariantBox::unit();
        let design = tune_observer(&p, &bx).unwrap();
        let mut x = sample_invariant_box(&bx, n_x, 1, seed ^ 8)[0].clone();
        let mut x_hat = sample_invariant_box(&bx, n_x, 1, seed ^ 9)[0].clone();
        let inputs = sample_input_box(1, 20, seed ^ 10);
        for u in &inputs {
            let e_before = (&x - &x_hat).amax();
            let y = gru_output(&p, &x).unwrap();
            x = gru_step(&p, &x, u).unwrap();
            x_hat = observer_step(&p, &design.gains, &x_hat, u, &y).unwrap();
            let e_after = (&x - &x_hat).amax();
            prop_assert!(
                e_after <= design.lambda * e_before + 1e-12,
                "error grew: {e_after} > {} * {e_before}", design.lambda
            );
        }
    }

    /// The solver never returns a worse objective than the warm start it was
    /// given, and its inputs always respect the box.
    #[test]
    fn solver_never_worsens_the_warm_start(
        u_hold in -0.6f64..0.6,
        seed in any::<u64>(),
    ) {
        let p = certified(2, 1, 1, 0.4, seed);
        let bx = InvariantBox::unit();
        let cert = deltaiss_certificate(&p, &bx);
        let u = DVector::from_vec(vec![u_hold]);
        let x_inf = settle(&p, &u, 4_000);
        prop_assume!(x_inf.amax() < 0.9);
        let y_target = gru_output(&p, &x_inf).unwrap();
        let target = find_equilibrium(
            &p, &bx, &y_target,
            (&x_inf, &u),
            EquilibriumOptions::default(),
        ).unwrap();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1) * 0.25;
        let s = DMatrix::identity(2, 2) * 2.0;
        let m = min_simulation_horizon(cert.mu, cert.lambda, &q, &s).unwrap().m_min;
        let spec = FhocpSpec::new(
            q, r, s, 2, m, InputBox::unit(1), target, cert.mu, cert.lambda,
        ).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let x0 = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        let warm: Vec<DVector<f64>> =
            (0..2).map(|_| DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0))).collect();
        let warm_cost = fhocp_cost(&p, &spec, &x0, &warm).unwrap().total;
        let sol = solve_fhocp(&p, &spec, &x0, Some(&warm), &SolverOptions::default()).unwrap();
        prop_assert!(sol.cost <= warm_cost + 1e-9, "{} > {}", sol.cost, warm_cost);
        for ui in &sol.inputs {
            prop_assert!(spec.input_box.contains(ui));
        }
        let recomputed = fhocp_cost(&p, &spec, &x0, &sol.inputs).unwrap().total;
        prop_assert!((recomputed - sol.cost).abs() <= 1e-9 * (1.0 + sol.cost));
    }
}
