use std::sync::Arc;

use lintrack::cstr::{self, CstrParams};
use lintrack::equilibria::{linearized_equilibrium_from_input, solve_nonlinear_equilibrium};
use lintrack::model::{central_difference, evaluate_affine, evaluate_step, linearize, SystemModel};
use lintrack::qp::{solve_qp, QpProblem, QpStatus};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;

fn reactor_model() -> SystemModel {
    let p = CstrParams::default();
    let (pa, pb) = (p.clone(), p.clone());
    SystemModel::new(
        move |x| pa.step(x, &dvector![0.0]),
        p.input_jacobian(&dvector![0.5, 0.5]),
        |x| dvector![x[1]],
        dmatrix![0.0],
    )
    .unwrap()
    .with_jacobians(Some(Arc::new(move |x: &DVector<f64>| pb.state_jacobian(x, &dvector![0.0]))), None)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn affine_model_is_exact_at_its_point(
        x1 in 0.05f64..1.0, x2 in 0.05f64..1.0, u in 0.1f64..2.0,
    ) {
        let model = reactor_model();
        let x = dvector![x1, x2];
        let u = dvector![u];
        let lin = linearize(&model, &x).unwrap();
        let exact = evaluate_step(&model, &x, &u).unwrap();
        let affine = evaluate_affine(&lin, &x, &u).unwrap();
        prop_assert!((exact - affine).amax() <= 1e-12);
        let y = &lin.c * &x + &lin.d * &u + &lin.r;
        prop_assert!((y[0] - x2).abs() <= 1e-14);
    }

    #[test]
    fn reactor_jacobians_match_finite_differences(
        x1 in 0.05f64..1.0, x2 in 0.1f64..1.0, u in 0.1f64..2.0,
    ) {
        let plant = cstr::cstr();
        let x = dvector![x1, x2];
        let u = dvector![u];
        let fd_x = central_difference(|v| plant.step(v, &u), &x);
        let fd_u = central_difference(|v| plant.step(&x, v), &u);
        prop_assert!((fd_x - plant.state_jacobian(&x, &u)).amax() <= 1e-6);
        prop_assert!((fd_u - plant.input_jacobian(&x, &u)).amax() <= 1e-6);
    }

    #[test]
    fn linearized_equilibrium_matches_direct_solve(
        a in prop::collection::vec(-0.4f64..0.4, 9),
        b in prop::collection::vec(-1.0f64..1.0, 3),
        e in prop::collection::vec(-1.0f64..1.0, 3),
        u in -2.0f64..2.0,
    ) {
        // spectral radius below 1.2 * 3 * 0.4 < 1 keeps I - A invertible
        let a = DMatrix::from_row_slice(3, 3, &a);
        let model = SystemModel::linear(
            a.clone(),
            DMatrix::from_column_slice(3, 1, &b),
            DVector::from_column_slice(&e),
            dmatrix![1.0, 0.0, 0.0],
            dmatrix![0.0],
            dvector![0.0],
        ).unwrap();
        let lin = linearize(&model, &DVector::zeros(3)).unwrap();
        let eq = linearized_equilibrium_from_input(&lin, &dvector![u]).unwrap();
        let rhs = DVector::from_column_slice(&b) * u + DVector::from_column_slice(&e);
        let direct = (DMatrix::identity(3, 3) - a).lu().solve(&rhs).unwrap();
        prop_assert!((eq.x_s - direct).amax() <= 1e-10);
    }
}

/// Random strictly convex QP with boxes and consistent equalities.
fn random_qp(
    d: usize,
    q: usize,
    m_entries: &[f64],
    g_entries: &[f64],
    a_entries: &[f64],
    frac: &[f64],
) -> (QpProblem, DVector<f64>) {
    let m = DMatrix::from_row_slice(d, d, &m_entries[..d * d]);
    let h = m.transpose() * &m + DMatrix::identity(d, d) * 0.1;
    let g = DVector::from_column_slice(&g_entries[..d]);
    let z_feas = DVector::from_fn(d, |i, _| 2.0 * frac[i] - 1.0);
    let a_eq = DMatrix::from_row_slice(q, d, &a_entries[..q * d]);
    let b_eq = &a_eq * &z_feas;
    let mut a_in = DMatrix::zeros(2 * d, d);
    a_in.view_mut((0, 0), (d, d)).fill_with_identity();
    a_in.view_mut((d, 0), (d, d)).copy_from(&(-DMatrix::<f64>::identity(d, d)));
    let b_in = DVector::from_element(2 * d, 1.0);
    (QpProblem::new(h, g, a_eq, b_eq, a_in, b_in).unwrap(), z_feas)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn qp_solution_is_optimal_and_beats_feasible_points(
        d in 2usize..12,
        q_frac in 0.0f64..0.34,
        m_entries in prop::collection::vec(-1.0f64..1.0, 144),
        g_entries in prop::collection::vec(-3.0f64..3.0, 12),
        a_entries in prop::collection::vec(-1.0f64..1.0, 48),
        frac in prop::collection::vec(0.0f64..1.0, 12),
        t in 0.0f64..1.0,
    ) {
        let q = ((d as f64) * q_frac) as usize;
        let (p, z_feas) = random_qp(d, q, &m_entries, &g_entries, &a_entries, &frac);
        let sol = solve_qp(&p, None).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(sol.kkt.within(1e-7), "{:?}", sol.kkt);
        // any feasible point, including points on the segment to the
        // solution, has no smaller objective
        let mid = &z_feas * (1.0 - t) + &sol.z * t;
        prop_assert!(sol.objective <= p.objective(&z_feas) + 1e-9);
        prop_assert!(sol.objective <= p.objective(&mid) + 1e-9);
        // warm starting from the answer returns the same point
        let again = solve_qp(&p, Some(&sol.z)).unwrap();
        prop_assert!((again.z - &sol.z).amax() <= 1e-8);
    }
}

#[test]
fn nonlinear_equilibrium_matches_bisection_on_manifold() {
    // The reactor manifold is parameterized by x2: each x2 gives one
    // (x1, u). Roots of u(x2) = 0.7 on a fine scan are the equilibria.
    let params = CstrParams::default();
    let target = 0.7;
    let u_of = |x2: f64| params.steady_state_at(x2).1 - target;
    let grid: Vec<f64> = (1..=2000).map(|i| i as f64 / 2000.0).collect();
    let mut roots = Vec::new();
    for w in grid.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        if u_of(lo).signum() == u_of(hi).signum() {
            continue;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if u_of(mid).signum() == u_of(lo).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    assert!(!roots.is_empty());
    let plant = cstr::cstr();
    for guess in [dvector![0.9, 0.4], dvector![0.5, 0.5], dvector![0.2, 0.7]] {
        let Ok(eq) = solve_nonlinear_equilibrium(plant.as_ref(), &dvector![target], &guess) else {
            continue;
        };
        let near = roots.iter().any(|r| {
            let (x1, _) = params.steady_state_at(*r);
            (eq.x_s[1] - r).abs() < 1e-8 && (eq.x_s[0] - x1).abs() < 1e-8
        });
        assert!(near, "{:?} is not among the bisection roots {roots:?}", eq.x_s);
    }
}

#[test]
fn unreachable_target_optimum_matches_input_grid() {
    use lintrack::equilibria::{optimal_reachable_equilibrium_nonlinear, TargetSpec};
    use lintrack::sets::BoxSet;
    let plant = cstr::cstr();
    let us = BoxSet::interval(0.11, 1.99).unwrap();
    let target = TargetSpec::new(dvector![2.0], dmatrix![1.0]).unwrap();
    let opt = optimal_reachable_equilibrium_nonlinear(plant.as_ref(), &target, &us, &[dvector![0.9, 0.4]]).unwrap();

    // brute force: 10^4 inputs, continuation along the grid from both ends
    let n = 10_000;
    let mut best = f64::INFINITY;
    for start in [dvector![0.95, 0.3], dvector![0.1, 0.9]] {
        let mut guess = start.clone();
        for i in 0..n {
            let u = 0.11 + (1.99 - 0.11) * i as f64 / (n - 1) as f64;
            for g in [guess.clone(), start.clone()] {
                if let Ok(eq) = solve_nonlinear_equilibrium(plant.as_ref(), &dvector![u], &g) {
                    best = best.min(target.cost(&eq.y_s));
                    guess = eq.x_s;
                    break;
                }
            }
        }
    }
    assert!(opt.cost <= best + 1e-6, "optimizer {} vs grid {best}", opt.cost);
    assert!(opt.cost >= best - 1e-3, "optimizer {} below grid {best}", opt.cost);
}
