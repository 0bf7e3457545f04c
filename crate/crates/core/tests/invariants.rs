use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use g2ldp::coefficients::CoefficientSet;
use g2ldp::controls::*;
use g2ldp::field_io::{field_from_bytes, field_from_csv, field_to_bytes, field_to_csv};
use g2ldp::integrator::SolverOptions;
use g2ldp::ldp::LinearDiagnostic;
use g2ldp::skeleton::{default_initial_state, solve_skeleton};
use g2ldp::spectral::*;

fn params(n: usize) -> FluidParams {
    FluidParams::default().with_cutoff(n)
}

fn field(n: usize, seed: u64) -> SpectralField {
    SpectralField::random(n, &mut ChaCha8Rng::seed_from_u64(seed), 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bilinear_term_does_no_work(seed in any::<u64>(), n in 2usize..7) {
        let p = params(n);
        let (u, v) = (field(n, seed), field(n, seed ^ 1));
        let self_work = inner_w(&apply_b_hat(&u, &u, &p), &u, &p);
        prop_assert!(self_work.abs() <= 1e-10 * norm_w(&u, &p) * norm_v(&u, &p).powi(2), "W work {self_work}");
        let cross_work = inner_v(&apply_b_hat(&u, &v, &p), &v, &p);
        prop_assert!(cross_work.abs() <= 1e-10 * norm_w(&u, &p) * norm_v(&v, &p).powi(2), "V work {cross_work}");
    }

    #[test]
    fn generalized_stokes_is_the_v_riesz_map(seed in any::<u64>(), n in 2usize..9) {
        let p = params(n);
        let (f, g) = (field(n, seed), field(n, seed ^ 2));
        let lhs = inner_v(&solve_generalized_stokes(&f, &p), &g, &p);
        prop_assert!((lhs - inner_l2(&f, &g, &p)).abs() <= 1e-12 * norm_l2(&f, &p) * norm_l2(&g, &p));
    }

    #[test]
    fn fields_round_trip_through_storage(seed in any::<u64>(), n in 1usize..9) {
        let p = params(n);
        let u = field(n, seed);
        prop_assert_eq!(&field_from_csv(&field_to_csv(&u, &p)).unwrap().field, &u);
        prop_assert_eq!(&field_from_bytes(&field_to_bytes(&u, &p)).unwrap().field, &u);
    }

    #[test]
    fn controls_round_trip_through_csv(vals in prop::collection::vec(0.0f64..5.0, 1..8)) {
        let f = ScalarControl::uniform(1.0, vals.clone()).unwrap();
        prop_assert_eq!(scalar_control_from_csv(&scalar_control_to_csv(&f).unwrap()).unwrap(), f);
        let doubled: Vec<f64> = vals.iter().flat_map(|v| [*v, v + 0.5]).collect();
        let g = IntensityControl::uniform(1.0, 2, doubled).unwrap();
        prop_assert_eq!(intensity_control_from_csv(&intensity_control_to_csv(&g).unwrap(), 2).unwrap(), g);
    }

    #[test]
    fn brownian_oracle_is_quadratic(d in 0.01f64..1.0, cells in 1usize..20) {
        let diag = LinearDiagnostic::new(params(4), (1, 0), 1.0).unwrap();
        let (a, b) = (diag.brownian_cost(d, cells), diag.brownian_cost(2.0 * d, cells));
        prop_assert!((b - 4.0 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn jump_oracle_is_convex_with_zero_minimum(d in 0.01f64..0.3) {
        let diag = LinearDiagnostic::new(params(4), (1, 0), 1.0).unwrap();
        let cost = |x: f64| diag.jump_cost(x, 1.0, 10).unwrap();
        prop_assert!(cost(0.0).abs() <= 1e-12);
        prop_assert!(cost(d) > 0.0 && cost(-d) > 0.0);
        prop_assert!(cost(0.5 * d) <= 0.5 * (cost(0.0) + cost(d)) + 1e-12);
    }

    #[test]
    fn skeleton_states_stay_real(f in -1.0f64..1.0, g in 0.2f64..3.0) {
        let p = params(4);
        let c = CoefficientSet::default_family(&p).unwrap();
        let q = ControlPair::new(
            ScalarControl::constant(0.2, f).unwrap(),
            IntensityControl::constant(0.2, 2, g).unwrap(),
        ).unwrap();
        let traj = solve_skeleton(&default_initial_state(&p), &q, &c, &p, &SolverOptions::default().with_dt(0.01)).unwrap();
        prop_assert!(traj.states.iter().all(|x| x.reality_defect() <= 1e-12 && x.is_finite()));
    }
}
