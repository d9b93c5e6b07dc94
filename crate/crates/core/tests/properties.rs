use mvldp::measure::{coupling_bound_check, wasserstein2, EmpiricalMeasure};
use mvldp::rate::q2_cost;
use mvldp::skeleton::MdpSystem;
use mvldp::*;
use proptest::prelude::*;

fn cloud(dim: usize, v: Vec<f64>) -> EmpiricalMeasure {
    EmpiricalMeasure::new(dim, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aligned_coupling_dominates_w2(
        (dim, x, y) in (1usize..=3, 2usize..=12).prop_flat_map(|(d, n)| (
            Just(d),
            prop::collection::vec(-10.0..10.0f64, n * d),
            prop::collection::vec(-10.0..10.0f64, n * d),
        ))
    ) {
        let r = coupling_bound_check(&cloud(dim, x), &cloud(dim, y)).unwrap();
        prop_assert!(r.w2 <= r.coupling_cost + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn w2_is_a_metric(
        a in prop::collection::vec(-5.0..5.0f64, 10),
        b in prop::collection::vec(-5.0..5.0f64, 10),
        c in prop::collection::vec(-5.0..5.0f64, 10),
    ) {
        let (a, b, c) = (cloud(2, a), cloud(2, b), cloud(2, c));
        let w = |p: &EmpiricalMeasure, q: &EmpiricalMeasure| wasserstein2(p, q).unwrap().value;
        prop_assert!(w(&a, &a) < 1e-12);
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() < 1e-12);
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-12);
    }

    #[test]
    fn q2_vanishes_only_at_unit_tilt(psi in prop::collection::vec(0.0..4.0f64, 10), unit in any::<bool>()) {
        let g = TimeGrid::uniform(1.0, 5).unwrap();
        let m = IntensityMeasure::new(1, vec![(vec![0.2], 1.0), (vec![-0.2], 0.5)]).unwrap();
        let psi = if unit { vec![1.0; 10] } else { psi };
        let q = q2_cost(&psi, &m, &g).unwrap();
        prop_assert!(q >= 0.0);
        prop_assert_eq!(q == 0.0, psi.iter().all(|&p| p == 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mdp_skeleton_is_linear_in_the_control(
        p in prop::collection::vec(-3.0..3.0f64, 50),
        q in prop::collection::vec(-3.0..3.0f64, 50),
        vp in prop::collection::vec(-3.0..3.0f64, 100),
        vq in prop::collection::vec(-3.0..3.0f64, 100),
        alpha in -2.0..2.0f64,
        beta in -2.0..2.0f64,
    ) {
        let spec = builtin("logistic_mf").unwrap();
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let x0 = solve_limit_ode(&spec, &g).unwrap();
        let sys = MdpSystem::new(&spec, &x0, &g).unwrap();
        let mk = |phi: &[f64], vphi: &[f64]| {
            let mut u = MdpControl::zero(&g, 1, 2);
            u.phi.copy_from_slice(phi);
            u.vphi.copy_from_slice(vphi);
            u
        };
        let (u1, u2) = (mk(&p, &vp), mk(&q, &vq));
        let k = sys.solve(&u1.combine(alpha, &u2, beta)).unwrap();
        let (k1, k2) = (sys.solve(&u1).unwrap(), sys.solve(&u2).unwrap());
        for i in 0..k.values().len() {
            let lin = alpha * k1.values()[i] + beta * k2.values()[i];
            prop_assert!((k.values()[i] - lin).abs() <= 1e-9 * (1.0 + lin.abs()));
        }
    }
}

#[test]
fn null_control_reproduces_uncontrolled_runs_bitwise() {
    for name in ["example11", "pure_jump", "logistic_mf"] {
        let spec = builtin(name).unwrap();
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let u = Control::null(&g, spec.dim, spec.n_cells());
        let base = simulate_mvsde(&spec, 0.05, 40, &g, 11, &SimOptions::default()).unwrap();
        let frozen = simulate_controlled_frozen(&spec, 0.05, &u, &base, 40, &g, 11, &SimOptions::default()).unwrap();
        let selfc = simulate_controlled_selfconsistent(&spec, 0.05, &u, 40, &g, 11, &SimOptions::default()).unwrap();
        for k in 0..=50 {
            assert_eq!(base.states_at(k), selfc.states_at(k), "{name} self-consistent, node {k}");
        }
        // the frozen run reads the same law the uncontrolled particles built
        assert_eq!(base.terminal(), frozen.terminal(), "{name} frozen");
    }
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let spec = builtin("logistic_mf").unwrap();
    let g = TimeGrid::uniform(1.0, 40).unwrap();
    let run = |jobs| {
        let o = SimOptions {
            jobs,
            ..SimOptions::default()
        };
        simulate_mvsde(&spec, 0.1, 64, &g, 3, &o).unwrap()
    };
    let a = run(Some(1));
    for jobs in [None, Some(1), Some(3), Some(8)] {
        let b = run(jobs);
        assert_eq!(a.terminal(), b.terminal());
        assert_eq!(a.mean(20), b.mean(20));
    }
    let other = simulate_mvsde(&spec, 0.1, 64, &g, 4, &SimOptions::default()).unwrap();
    assert_ne!(a.terminal(), other.terminal());
}
