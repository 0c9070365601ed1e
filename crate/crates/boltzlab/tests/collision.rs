mod common;

use std::f64::consts::PI;

use proptest::prelude::*;

use boltzlab::collision::{
    admissibility_norm, apply_q, p_weight, post_collision, psi_p_constant, theta_floor, CollisionError, CollisionQuadrature, KernelSpec, Phi, Psi,
};
use boltzlab::geometry::Domain;
use boltzlab::transport::{PhaseGrid, Vec2};

use common::{bump_phi, R_V};

fn grid() -> PhaseGrid {
    PhaseGrid::new(&Domain::disk(1.0, 1.0).unwrap(), 16, 8, 8, R_V).unwrap()
}

fn gl(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (half, mid) = (0.5 * (b - a), 0.5 * (a + b));
    gauss_quad::GaussLegendre::new(n.try_into().unwrap()).iter().map(|(x, w)| (mid + half * x, half * w)).unzip()
}

#[test]
fn quadrature_weights() {
    let q = CollisionQuadrature::new(8, 16, 4.0).unwrap();
    assert!((q.omega_weight_sum() - 2.0 * PI).abs() < 1e-10);
    assert!((q.u_weight_sum() - PI * 16.0).abs() < 1e-10);
    assert!(q.u_offsets.iter().all(|u| u[0].hypot(u[1]) <= 4.0));
    assert!(CollisionQuadrature::new(8, 15, 4.0).is_err());
}

#[test]
fn post_collision_rejects_bad_omega() {
    assert!(matches!(post_collision(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]), Err(CollisionError::NotUnit(_))));
    assert!(post_collision(&[1.0, 0.0], &[0.0], &[1.0, 0.0]).is_err());
}

#[test]
fn post_collision_three_dimensions() {
    let (up, vp) = post_collision(&[1.0, 2.0, -1.0], &[0.5, -0.3, 2.0], &[0.0, 0.6, 0.8]).unwrap();
    let s: Vec<f64> = (0..3).map(|i| up[i] + vp[i]).collect();
    assert!((s[0] - 1.5).abs() < 1e-14 && (s[1] - 1.7).abs() < 1e-14 && (s[2] - 1.0).abs() < 1e-14);
}

#[test]
fn psi_zero_gives_zero_constant() {
    let q = CollisionQuadrature::new(8, 16, 4.0).unwrap();
    let k = KernelSpec::new(bump_phi(), Psi::constant(0.0), 4.0, &q, &grid());
    assert_eq!(psi_p_constant(&[1.0, 0.0], &k, &q, 0.1, 0.3).unwrap(), 0.0);
}

#[test]
fn psi_p_constant_matches_dense_oracle() {
    // 2 pi int_0^4 rho int_0^{2 pi} P(rho cos phi, rho^2) dphi drho
    let (rn, rw) = gl(200, 0.0, 4.0);
    let (an, aw) = gl(400, 0.0, 2.0 * PI);
    let mut oracle = 0.0;
    for (r, wr) in rn.iter().zip(&rw) {
        for (a, wa) in an.iter().zip(&aw) {
            let p = r * a.cos();
            oracle += wr * wa * r * (1.0 - (p * p).exp()) * ((-p * p).exp() - (-r * r).exp());
        }
    }
    oracle *= 2.0 * PI;
    let fine = CollisionQuadrature::new(128, 128, 4.0).unwrap();
    let k = KernelSpec::new(bump_phi(), Psi::constant(1.0), 4.0, &fine, &grid());
    let c = psi_p_constant(&[1.0, 0.0], &k, &fine, 0.2, 0.3).unwrap();
    assert!(c < 0.0);
    assert!((c - oracle).abs() < 2e-3 * oracle.abs(), "{c} vs {oracle}");
    assert!(c.abs() >= theta_floor(0.2, 0.3, 1.0));
}

#[test]
fn psi_p_constant_rotation_invariant() {
    let q = CollisionQuadrature::new(8, 16, 4.0).unwrap();
    let k = KernelSpec::new(bump_phi(), Psi::constant(1.0), 4.0, &q, &grid());
    let base = psi_p_constant(&[1.0, 0.0], &k, &q, 0.1, 0.3).unwrap();
    for a in [0.3, 1.1, 2.9] {
        let c = psi_p_constant(&[f64::cos(a), f64::sin(a)], &k, &q, 0.1, 0.3).unwrap();
        assert!((c - base).abs() < 1e-12 * base.abs());
    }
}

#[test]
fn mollified_psi_dominates_floor() {
    let psi = Psi::mollified(0.8, 0.5, 4.0);
    let w = [0.6, 0.8];
    let v = [1.0, 0.0];
    for r in [0.0, 1.0, 2.9] {
        assert!(psi.eval(&v, &[v[0] + r, v[1]], &w) >= 0.8 - 1e-12);
    }
    assert_eq!(psi.eval(&v, &[v[0] + 4.5, v[1]], &w), 0.0);
}

#[test]
fn reported_bound_dominates_sampled_sup() {
    let q = CollisionQuadrature::new(8, 16, 4.0).unwrap();
    let g = grid();
    let k = KernelSpec::new(bump_phi(), Psi::mollified(1.0, 0.5, 4.0), 4.0, &q, &g);
    let samples: Vec<(f64, Vec2, Vec2)> = (0..g.n_tx()).map(|tx| g.tx_point(tx)).flat_map(|(t, x)| [(t, x, [1.0, 0.0]), (t, x, [0.0, -2.0])]).collect();
    assert!(k.m_bound >= admissibility_norm(&k, &q, &samples));
}

#[test]
fn zero_kernel_has_zero_bound() {
    let k = KernelSpec::zero(4.0);
    assert!(k.is_zero());
    assert_eq!(k.m_bound, 0.0);
    assert!(Phi::zero().is_zero());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conservation(u1 in -4.0..4.0_f64, u2 in -4.0..4.0_f64, v1 in -4.0..4.0_f64, v2 in -4.0..4.0_f64, a in 0.0..(2.0 * PI)) {
        let (up, vp) = post_collision(&[u1, u2], &[v1, v2], &[a.cos(), a.sin()]).unwrap();
        prop_assert!((up[0] + vp[0] - u1 - v1).abs() <= 1e-12);
        prop_assert!((up[1] + vp[1] - u2 - v2).abs() <= 1e-12);
        let e0 = u1 * u1 + u2 * u2 + v1 * v1 + v2 * v2;
        let e1 = up[0] * up[0] + up[1] * up[1] + vp[0] * vp[0] + vp[1] * vp[1];
        prop_assert!((e1 - e0).abs() <= 1e-12);
    }

    #[test]
    fn p_weight_nonpositive(u1 in -4.0..4.0_f64, u2 in -4.0..4.0_f64, a in 0.0..(2.0 * PI)) {
        prop_assert!(p_weight(&[1.0, 0.0], &[u1, u2], &[a.cos(), a.sin()]).unwrap() <= 0.0);
    }

    #[test]
    fn bilinear_and_bounded(a in -2.0..2.0_f64, b in -2.0..2.0_f64, t in 0.25..0.75_f64, r in 0.0..0.5_f64, ang in 0.0..(2.0 * PI)) {
        let q = CollisionQuadrature::new(8, 16, 4.0).unwrap();
        let k = KernelSpec::new(bump_phi(), Psi::constant(1.0), 4.0, &q, &grid());
        let f1 = |_: f64, _: &Vec2, v: &Vec2| (-(v[0] * v[0] + v[1] * v[1]) / 4.0).exp();
        let g1 = |_: f64, x: &Vec2, v: &Vec2| (v[0] - x[1]).cos();
        let f2 = |_: f64, _: &Vec2, v: &Vec2| 0.5 + 0.5 * (v[1]).sin();
        let mix = move |t: f64, x: &Vec2, v: &Vec2| a * f1(t, x, v) + b * g1(t, x, v);
        let x = [r * ang.cos(), r * ang.sin()];
        let v = [0.7, -0.2];
        let lhs = apply_q(&k, &mix, &f2, &q, t, &x, &v);
        let rhs = a * apply_q(&k, &f1, &f2, &q, t, &x, &v) + b * apply_q(&k, &g1, &f2, &q, t, &x, &v);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        prop_assert!(apply_q(&k, &f1, &f2, &q, t, &x, &v).abs() <= 2.0 * k.m_bound);
    }
}
