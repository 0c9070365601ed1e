mod common;

use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;

use boltzlab::geometry::Domain;
use boltzlab::rayrecover::{
    assemble_and_extend, e_delta, e_delta_gradient, error_norms, estimate_light_rays, fourier_slice, invert_spectrum, light_ray_oracle,
    light_ray_oracle_field, line_exit, non_increasing, optimal_probe_parameters, AlphaRule, CellKind, Chi, ErrorNorms, Exit, ExtensionConfig,
    LightRayField, ProbeConfig, RayError, ReconConfig, SpaceTimeField, SpectralSlab,
};

use common::{bump_phi, desk};

fn gl(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (half, mid) = (0.5 * (b - a), 0.5 * (a + b));
    gauss_quad::GaussLegendre::new(n.try_into().unwrap()).iter().map(|(x, w)| (mid + half * x, half * w)).unzip()
}

#[test]
fn chi_is_normalized() {
    let chi = Chi::get();
    assert!((chi.l1_norm() - 1.0).abs() < 1e-6);
    let rule = chi.seven_point();
    let total: f64 = rule.iter().map(|(_, w)| w).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn phi_lambda_has_unit_mass() {
    // polar Gauss rule on the product of the two balls of radius lambda
    for lambda in [0.05, 0.1, 0.3] {
        let p = ProbeConfig::new([0.2, -0.1], [1.0, 0.0], lambda, 1e-6, 1e-3).unwrap();
        let (rn, rw) = gl(48, 0.0, lambda);
        let (an, aw) = gl(32, 0.0, 2.0 * PI);
        let mut mass_y = 0.0;
        for (r, wr) in rn.iter().zip(&rw) {
            for (a, wa) in an.iter().zip(&aw) {
                let y = [0.2 + r * a.cos(), -0.1 + r * a.sin()];
                mass_y += wr * wa * r * p.phi_lambda(&y, &[1.0, 0.0]);
            }
        }
        // the v factor at v = v* is chi(0) / lambda^2; divide it out
        let chi0 = Chi::get().eval(&[0.0, 0.0]) / (lambda * lambda);
        assert!((mass_y / chi0 - 1.0).abs() < 1e-4, "lambda {lambda}: {}", mass_y / chi0);
        let nodes = p.nodes();
        assert_eq!(nodes.len(), 49);
        assert!((nodes.iter().map(|n| n.2).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn probe_config_validation() {
    assert!(matches!(ProbeConfig::new([0.0; 2], [1.0, 0.0], 1.0, 1e-6, 1e-3), Err(RayError::Probe(_))));
    assert!(ProbeConfig::new([0.0; 2], [1.0, 0.0], 0.1, 1e-3, 1e-3).is_err());
    assert!(ProbeConfig::new([0.0; 2], [0.0, 0.0], 0.1, 1e-6, 1e-3).is_err());
    assert!(ProbeConfig::new([0.0; 2], [1.0, 0.0], 0.1, 1e-6, 1e-3).is_ok());
}

#[test]
fn line_exit_cases() {
    let d = Domain::disk(1.0, 1.0).unwrap();
    assert_eq!(line_exit(&d, &[0.0, 3.0], &[1.0, 0.0]), Exit::Never);
    match line_exit(&d, &[-0.5, 0.0], &[1.0, 0.0]) {
        Exit::Terminal(x) => assert!((x[0] - 0.5).abs() < 1e-12),
        e => panic!("{e:?}"),
    }
    match line_exit(&d, &[0.0, 0.0], &[2.0, 0.0]) {
        Exit::Outgoing(t, x) => {
            assert!((t - 0.5).abs() < 1e-12);
            assert!((x[0] - 1.0).abs() < 1e-12);
        }
        e => panic!("{e:?}"),
    }
}

#[test]
fn oracle_matches_closed_form_through_center() {
    // Phi = b((t - 0.5)/0.3) b(|x|/0.6) along the line x = 0 at speed 0 in x
    // picks up int_0^1 b((t - 0.5)/0.3) dt when y = 0 and v is tiny
    let phi = bump_phi();
    let (tn, tw) = gl(200, 0.2, 0.8);
    let expect: f64 = tn.iter().zip(&tw).map(|(t, w)| w * phi.eval(*t, &[0.0, 0.0], 1e-9)).sum();
    let got = light_ray_oracle(&phi, 1.0, &[0.0, 0.0], &[1e-9, 0.0]);
    assert!((got - expect).abs() < 1e-10 * expect);
    assert_eq!(light_ray_oracle(&phi, 1.0, &[1.9, 1.9], &[1.0, 0.0]), 0.0);
}

#[test]
fn estimator_tracks_oracle_and_support() {
    let d = desk();
    let cfg = ReconConfig { n_dir: 4, ..ReconConfig::default() };
    let kappa = d.k1.regime.kappa;
    let est = estimate_light_rays(&d.k1, &d.k2, &cfg, kappa / 16.0, 0.1, 0.0, 1).unwrap();
    let oracle = light_ray_oracle_field(&bump_phi(), 1.0, 1.0, 4, cfg.n_y, cfg.half_width);
    let num: f64 = est.values.iter().zip(&oracle.values).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = oracle.values.iter().map(|b| b * b).sum();
    assert!((num / den).sqrt() <= 0.05);
    let peak = est.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for k in 0..4 {
        for i in 0..est.n_y {
            for j in 0..est.n_y {
                let y = est.offset(i, j);
                if y[0].hypot(y[1]) > 2.0 {
                    assert!(est.values[(k * est.n_y + i) * est.n_y + j].abs() <= 0.01 * peak);
                }
            }
        }
    }
}

#[test]
fn lightray_text_round_trip() {
    let f = light_ray_oracle_field(&bump_phi(), 1.0, 1.0, 4, 8, 2.0);
    let back = LightRayField::from_text(&f.to_text()).unwrap();
    assert_eq!(back.n_y, 8);
    assert_eq!(back.directions.len(), 4);
    for (a, b) in f.values.iter().zip(&back.values) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }
    assert!(LightRayField::from_text("# slab nt=2").is_err());
}

fn small_slab() -> SpectralSlab {
    let f = light_ray_oracle_field(&bump_phi(), 1.0, 1.0, 16, 16, 2.0);
    let d = Domain::disk(1.0, 1.0).unwrap();
    assemble_and_extend(&f, &d, &ExtensionConfig { nt: 8, nx: 8, ..ExtensionConfig::default() }).unwrap()
}

#[test]
fn slab_is_hermitian_and_round_trips() {
    let s = small_slab();
    assert!(s.hermitian_defect() < 1e-12);
    assert!(s.mask.iter().any(|m| *m == CellKind::Cone));
    assert!(s.mask.iter().any(|m| *m == CellKind::Extended));
    let back = SpectralSlab::from_text(&s.to_text()).unwrap();
    assert_eq!(back.mask, s.mask);
    for (a, b) in s.values.iter().zip(&back.values) {
        assert!((a - b).norm() <= 1e-14 * a.norm().max(1e-300));
    }
}

#[test]
fn spectrum_inversion_round_trip() {
    let truth = SpaceTimeField::from_fn(8, 16, 1.0, 1.0, |t, x| bump_phi().eval(t, x, 1.0));
    let spec = truth.spectrum();
    let mut slab = SpectralSlab::zeros(8, 16, 1.0, 1.0, 1.0, 1e9);
    slab.values = spec;
    assert!(slab.hermitian_defect() < 1e-12);
    let inv = invert_spectrum(&slab);
    let e = error_norms(&inv.field, &truth).unwrap();
    assert!(e.linf < 1e-12);
    assert!(inv.imag_residue < 1e-12);
}

#[test]
fn cone_cells_use_cone_frequencies() {
    let s = small_slab();
    for it in 0..s.nt {
        for i1 in 0..s.nx {
            for i2 in 0..s.nx {
                let k = s.index(it, i1, i2);
                let xi = s.xi(i1).hypot(s.xi(i2));
                if s.mask[k] == CellKind::Cone {
                    assert!(s.tau(it).abs() <= s.r * xi + 1e-12);
                }
                if s.radius(it, i1, i2) > s.alpha {
                    assert_eq!(s.mask[k], CellKind::Outside);
                    assert_eq!(s.values[k], Complex64::new(0.0, 0.0));
                }
            }
        }
    }
}

#[test]
fn alpha_rules() {
    assert_eq!(AlphaRule::Fixed(3.0).value(1e-4, 2), 3.0);
    let r = AlphaRule::LogDelta { mu: 0.5, cap: 100.0 };
    assert_eq!(r.value(0.0, 2), 100.0);
    let expect = 0.5 / (2.0 * 5.0) * (1e-4_f64).ln().abs();
    assert!((r.value(1e-4, 2) - expect).abs() < 1e-12);
}

#[test]
fn trend_helper() {
    assert!(non_increasing(&[3.0, 2.0, 2.0, 1.0], 0));
    assert!(!non_increasing(&[3.0, 4.0, 1.0], 0));
    assert!(non_increasing(&[3.0, 4.0, 1.0], 1));
}

#[test]
fn optimal_parameters_reject_bad_delta() {
    assert!(matches!(optimal_probe_parameters(0.0, 0.1, 2, 10.0), Err(RayError::Delta(_))));
    assert!(optimal_probe_parameters(1.5, 0.1, 2, 10.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn slices_lie_on_the_cone(k in 0usize..8) {
        let f = LightRayField::from_fn(1.0, 8, 8, 2.0, |y, v| (y[0] * v[1] - y[1]).sin());
        let v = f.directions[k];
        let r = v[0].hypot(v[1]);
        prop_assert!((r - 1.0).abs() < 1e-14);
        for s in fourier_slice(&f, k) {
            let xi = s.xi[0].hypot(s.xi[1]);
            prop_assert!(s.tau.abs() <= r * xi * (1.0 + 1e-15) + 1e-15);
        }
    }

    #[test]
    fn h_minus1_below_l2(seed in any::<u64>()) {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut f = SpaceTimeField::zeros(4, 8, 1.0, 1.0);
        for v in f.values.iter_mut() {
            *v = next();
        }
        let n = ErrorNorms::of(&f);
        prop_assert!(n.h_minus1 <= n.l2 * (1.0 + 1e-12));
        prop_assert!(n.l2 <= n.linf * 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn critical_point_zeroes_partials(ld in -9.0..-1.0_f64, kappa in 1e-4..0.3_f64, big in 1.0..50.0_f64, n in 2i32..4) {
        let delta = 10f64.powf(ld);
        let (eps, lambda) = optimal_probe_parameters(delta, kappa, n, big).unwrap();
        let (ge, gl) = e_delta_gradient(eps, lambda, delta, kappa, n, big);
        prop_assert!(ge.abs() < 1e-10 && gl.abs() < 1e-10);
        prop_assert!(eps < kappa / 4.0);
        // the critical point is a minimum along both axes
        let e0 = e_delta(eps, lambda, delta, kappa, n, big);
        prop_assert!(e_delta(eps * 1.01, lambda, delta, kappa, n, big) >= e0);
        prop_assert!(e_delta(eps, lambda * 0.99, delta, kappa, n, big) >= e0);
    }
}
