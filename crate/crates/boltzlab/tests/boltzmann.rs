mod common;

use std::sync::Arc;

use boltzlab::boltzmann::{add_noise, measure, solve_nonlinear, MeasurementSet, Regime, SolverOptions};
use boltzlab::geometry::outgoing_quadrature;
use boltzlab::transport::DataPair;

use common::{desk, Desk};

fn probe_data(d: &Desk, frac: f64) -> DataPair {
    let a = frac * d.k1.regime.kappa;
    let gauss = DataPair::velocity_profile(|v| (-((v[0] - 1.0).powi(2) + v[1] * v[1])).exp(), 1.0);
    DataPair::combine(&[(a / 4.0, &gauss), (a / 4.0, &DataPair::constant(1.0))])
}

fn set(d: &Desk) -> Arc<MeasurementSet> {
    let b = outgoing_quadrature(&d.domain, 16, 4, 4.0).unwrap();
    Arc::new(MeasurementSet::standard(&d.domain, &d.grid, &b))
}

#[test]
fn regime_satisfies_smallness() {
    for m in [1.0, 37.0, 315.8] {
        let r = Regime::select(m, 1.0, 0.9);
        assert!(r.contraction_ok());
        assert!((r.c - 2.0 * r.kappa).abs() < 1e-15);
        assert!(2.0 * m * (r.kappa + r.c).powi(2) <= r.c);
        assert!(r.bound_factor() < 1.0);
    }
    assert_eq!(Regime::select(0.0, 1.0, 0.9).kappa, 1.0);
}

#[test]
fn fixed_point_and_a_priori() {
    let d = desk();
    let data = probe_data(&d, 1.0);
    let opts = SolverOptions { full_field: true, ..SolverOptions::default() };
    let sol = d.k1.solve(&data, &opts).unwrap();
    let r = &sol.report;
    assert!(r.guards_pass());
    assert!(d.k1.fixed_point_residual(&sol, opts.n_quad) <= 2.0 * opts.tol);
    let f = sol.field(&d.domain);
    assert!(f.sup_norm() <= r.a_priori_constant * data.amplitude() * (1.0 + 1e-12));
    // F - F~ is second order in the amplitude
    let m = d.k1.kernel.m_bound;
    assert!(sol.g.sup_norm() <= 2.0 * m * f.sup_norm().powi(2));
    // residuals decrease after the first sweep
    assert!(r.residuals.windows(2).skip(1).all(|w| w[1] <= w[0]));
}

#[test]
fn zero_kernel_reproduces_free_transport() {
    let d = desk();
    let data = probe_data(&d, 0.5);
    let (f, report) = solve_nonlinear(&d.k2, &data, &SolverOptions::default()).unwrap();
    assert!(report.iterations <= 1);
    for tx in (0..d.grid.n_tx()).step_by(31) {
        let (t, x) = d.grid.tx_point(tx);
        for iv in 0..d.grid.n_vel() {
            let v = d.grid.v_node(iv);
            assert!((f.velocity_slice(tx)[iv] - data.free_solution(&d.domain, t, &x, &v)).abs() < 1e-15);
        }
    }
}

#[test]
fn measurements_match_shape_and_are_finite() {
    let d = desk();
    let s = set(&d);
    let m = measure(&d.k1, &probe_data(&d, 0.5), &s, &SolverOptions::default()).unwrap();
    assert_eq!(m.outgoing.len(), s.outgoing.len());
    assert_eq!(m.terminal.len(), s.terminal.len());
    assert!(m.finite());
}

#[test]
fn noise_contract() {
    let d = desk();
    let s = set(&d);
    let m = measure(&d.k1, &probe_data(&d, 0.5), &s, &SolverOptions::default()).unwrap();
    assert_eq!(add_noise(&m, 0.0, 3), m);
    let a = add_noise(&m, 1e-3, 3);
    let b = add_noise(&m, 1e-3, 3);
    assert_eq!(a, b);
    assert!(a.same_shape(&m));
    assert!(a.max_abs_diff(&m) <= 1e-3);
    assert_ne!(add_noise(&m, 1e-3, 4), a);
}
