use proptest::prelude::*;

use boltzlab::geometry::{exit_time, Domain, Sign};
use boltzlab::transport::{duhamel_point, solve_linear, sup_norm, Axis, DataPair, Field, LinearOptions, PhaseGrid, Vec2, ZeroSource};

fn setup() -> (Domain, PhaseGrid) {
    let d = Domain::disk(1.0, 1.0).unwrap();
    let g = PhaseGrid::new(&d, 16, 12, 6, 4.0).unwrap();
    (d, g)
}

#[test]
fn axis_locate_clamps() {
    let a = Axis::new(0.0, 1.0, 11).unwrap();
    assert!((a.step() - 0.1).abs() < 1e-15);
    let (i, f, clamped) = a.locate(0.35);
    assert_eq!(i, 3);
    assert!((f - 0.5).abs() < 1e-12);
    assert!(!clamped);
    assert_eq!(a.locate(1.5), (9, 1.0, true));
    assert!(Axis::new(0.0, 1.0, 1).is_err());
}

#[test]
fn constant_field_is_preserved() {
    let (d, g) = setup();
    let f = solve_linear(&d, &ZeroSource, &DataPair::constant(1.0), &g, &LinearOptions::default()).unwrap();
    assert!(f.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
    assert_eq!(sup_norm(&f), 1.0);
}

#[test]
fn unit_source_bounded_by_horizon() {
    let (d, g) = setup();
    let one = |_: f64, _: &Vec2, _: &Vec2| 1.0;
    let f = solve_linear(&d, &one, &DataPair::zero(), &g, &LinearOptions::default()).unwrap();
    assert!(f.sup_norm() <= 1.0 + 1e-12);
    // away from the boundary the solution is min(t, tau_-)
    let x = [0.1, -0.2];
    let v = [0.5, 0.5];
    let tau = exit_time(&d, &x, &v, Sign::Backward).unwrap();
    let p = duhamel_point(&d, &one, &DataPair::zero(), 0.7, &x, &v, &LinearOptions::default());
    assert!((p - 0.7_f64.min(tau)).abs() < 1e-12);
}

#[test]
fn boundary_datum_selected_at_entry() {
    // H(0) = 1: at t = tau_- the boundary value is used
    let d = Domain::disk(1.0, 1.0).unwrap();
    let data = DataPair::new(|_, _, _| 2.0, |_, _| 5.0, 2.0, 5.0);
    let x = [0.0, 0.0];
    let v = [2.0, 0.0];
    let tau = exit_time(&d, &x, &v, Sign::Backward).unwrap();
    assert_eq!(data.free_solution(&d, tau, &x, &v), 2.0);
    assert_eq!(data.free_solution(&d, 0.9 * tau, &x, &v), 5.0);
}

#[test]
fn a_priori_bound_random_data() {
    let (d, g) = setup();
    // g, h, f with sup norms read off a dense sample
    let gf = |t: f64, x: &Vec2, v: &Vec2| (3.0 * t + x[0] - v[1]).sin() * 0.4;
    let hf = |x: &Vec2, v: &Vec2| (x[1] * v[0]).cos() * 0.7;
    let src = |t: f64, x: &Vec2, v: &Vec2| 0.3 * (t * x[0] + v[0] * v[1]).cos();
    let f = solve_linear(&d, &src, &DataPair::new(gf, hf, 0.4, 0.7), &g, &LinearOptions::default()).unwrap();
    let mut gs: f64 = 0.0;
    let mut hs: f64 = 0.0;
    let mut fs: f64 = 0.0;
    for i in 0..40 {
        for j in 0..40 {
            let t = i as f64 / 39.0;
            let x = [2.0 * j as f64 / 39.0 - 1.0, 1.0 - 2.0 * i as f64 / 39.0];
            let v = [4.0 * (j as f64 / 39.0) - 2.0, 3.0 * t - 1.5];
            gs = gs.max(gf(t, &x, &v).abs());
            hs = hs.max(hf(&x, &v).abs());
            fs = fs.max(src(t, &x, &v).abs());
        }
    }
    assert!(f.sup_norm() <= 0.4 + 0.7 + 0.3 + 1e-9, "{} > bound", f.sup_norm());
    assert!(f.sup_norm() <= gs.max(0.4) + hs.max(0.7) + fs.max(0.3) + 1e-9);
}

fn manufactured(n_quad: usize) -> f64 {
    let (d, g) = setup();
    let exact = |t: f64, x: &Vec2| t * (-(x[0] * x[0] + x[1] * x[1])).exp();
    let src = |t: f64, x: &Vec2, v: &Vec2| (-(x[0] * x[0] + x[1] * x[1])).exp() * (1.0 - 2.0 * t * (v[0] * x[0] + v[1] * x[1]));
    let data = DataPair::new(move |t, x, _| exact(t, x), |_, _| 0.0, 1.0, 0.0);
    let f = solve_linear(&d, &src, &data, &g, &LinearOptions { n_quad }).unwrap();
    let mut err: f64 = 0.0;
    for tx in 0..g.n_tx() {
        let (t, x) = g.tx_point(tx);
        for v in f.velocity_slice(tx) {
            err = err.max((v - exact(t, &x)).abs());
        }
    }
    err
}

#[test]
fn manufactured_solution_converges() {
    let e = [manufactured(8), manufactured(16), manufactured(32)];
    assert!(e[1] <= 0.5 * e[0] && e[2] <= 0.5 * e[1], "{e:?}");
}

#[test]
fn field_interpolation_is_exact_for_multilinear() {
    let (_, g) = setup();
    let lin = |t: f64, x: &Vec2, v: &Vec2| 1.0 + 2.0 * t - x[0] + 0.5 * x[1] + 0.25 * v[0] - v[1];
    let f = Field::from_fn(g, lin);
    for (t, x, v) in [(0.33, [0.1, -0.47], [0.3, 1.1]), (0.9, [-0.8, 0.2], [-2.5, 0.7])] {
        assert!((f.eval(t, &x, &v) - lin(t, &x, &v)).abs() < 1e-12);
    }
}

#[test]
fn axpby_requires_matching_grids() {
    let d = Domain::disk(1.0, 1.0).unwrap();
    let a = Field::zeros(PhaseGrid::new(&d, 4, 4, 4, 2.0).unwrap());
    let b = Field::zeros(PhaseGrid::new(&d, 4, 4, 6, 2.0).unwrap());
    assert!(a.axpby(1.0, &b, 1.0).is_err());
    assert!(a.axpby(1.0, &a, 2.0).is_ok());
}

#[test]
fn combine_constants_exactly() {
    let c = DataPair::combine(&[(0.5, &DataPair::constant(2.0)), (-1.0, &DataPair::constant(0.25))]);
    assert_eq!(c.amplitude(), 1.5);
    let d = Domain::disk(1.0, 1.0).unwrap();
    assert_eq!(c.free_solution(&d, 0.3, &[0.0, 0.0], &[1.0, 0.0]), 0.75);
}

proptest! {
    #[test]
    fn characteristics_are_consistent(
        x1 in -0.6..0.6_f64, x2 in -0.6..0.6_f64, v1 in -2.0..2.0_f64, v2 in -2.0..2.0_f64,
        t in 0.3..1.0_f64, frac in 0.05..0.95_f64,
    ) {
        // with f = 0, F(t, x, v) = F(t - s, x - s v, v) for s < min(t, tau_-)
        let d = Domain::disk(1.0, 1.0).unwrap();
        let x = [x1, x2];
        let v = [v1, v2];
        prop_assume!(v1.abs() + v2.abs() > 0.1);
        let tau = exit_time(&d, &x, &v, Sign::Backward).unwrap();
        let s = frac * t.min(tau);
        let data = DataPair::new(|t, x, v| (t + x[0] * v[1]).sin(), |x, v| (x[1] - v[0]).cos(), 1.0, 1.0);
        let opts = LinearOptions::default();
        let a = duhamel_point(&d, &ZeroSource, &data, t, &x, &v, &opts);
        let b = duhamel_point(&d, &ZeroSource, &data, t - s, &[x[0] - s * v[0], x[1] - s * v[1]], &v, &opts);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn linear_in_source(a in -2.0..2.0_f64, b in -2.0..2.0_f64) {
        let d = Domain::disk(1.0, 1.0).unwrap();
        let f1 = |t: f64, x: &Vec2, _: &Vec2| t * x[0];
        let f2 = |_: f64, x: &Vec2, v: &Vec2| x[1] * v[1];
        let mix = move |t: f64, x: &Vec2, v: &Vec2| a * f1(t, x, v) + b * f2(t, x, v);
        let opts = LinearOptions::default();
        let (t, x, v) = (0.8, [0.2, 0.3], [1.0, -0.4]);
        let z = DataPair::zero();
        let lhs = duhamel_point(&d, &mix, &z, t, &x, &v, &opts);
        let rhs = a * duhamel_point(&d, &f1, &z, t, &x, &v, &opts) + b * duhamel_point(&d, &f2, &z, t, &x, &v, &opts);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
