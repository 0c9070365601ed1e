//! Desk-scale acceptance criteria. Each test writes one PASS/FAIL line to the
//! real stdout (bypassing capture) and then asserts.

mod common;

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use boltzlab::boltzmann::SolverOptions;
use boltzlab::cli::{run_sweep, ExperimentConfig, Mode};
use boltzlab::collision::{p_weight, post_collision};
use boltzlab::geometry::Domain;
use boltzlab::linearize::{expansion_identity, integral_identity_check, remainder_order_study, IdentityConfig, ProbePair};
use boltzlab::rayrecover::{
    e_delta, e_delta_gradient, fourier_slice, light_ray_oracle_field, optimal_probe_parameters, reconstruct, ReconConfig, ReconOutcome,
};
use boltzlab::transport::{solve_linear, DataPair, LinearOptions, PhaseGrid, Vec2};

use common::{bump_phi, desk};

fn report(id: u32, ok: bool, detail: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} criterion {id:>2}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

fn full() -> SolverOptions {
    SolverOptions { full_field: true, ..SolverOptions::default() }
}

fn manufactured_error(n_quad: usize) -> f64 {
    let domain = Domain::disk(1.0, 1.0).unwrap();
    let grid = PhaseGrid::new(&domain, 64, 16, 8, 4.0).unwrap();
    let exact = |t: f64, x: &Vec2| t * (-(x[0] * x[0] + x[1] * x[1])).exp();
    let source = |t: f64, x: &Vec2, v: &Vec2| (-(x[0] * x[0] + x[1] * x[1])).exp() * (1.0 - 2.0 * t * (v[0] * x[0] + v[1] * x[1]));
    let data = DataPair::new(move |t, x, _| exact(t, x), |_, _| 0.0, 1.0, 0.0);
    let f = solve_linear(&domain, &source, &data, &grid, &LinearOptions { n_quad }).unwrap();
    let (mut err, mut peak) = (0.0_f64, 0.0_f64);
    for tx in 0..grid.n_tx() {
        let (t, x) = grid.tx_point(tx);
        if !domain.contains_closed(&x) {
            continue;
        }
        let e = exact(t, &x);
        peak = peak.max(e.abs());
        for &value in f.velocity_slice(tx) {
            err = err.max((value - e).abs());
        }
    }
    err / peak
}

#[test]
fn criterion_01_transport_exactness() {
    let base = manufactured_error(64);
    let fine = manufactured_error(128);
    let ok = base <= 1e-3 && fine <= 0.5 * base;
    report(1, ok, format!("manufactured residual {base:.3e} at 64 nodes, {fine:.3e} at 128 (ratio {:.3})", fine / base));
    assert!(ok);
}

#[test]
fn criterion_02_collision_conservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..1_000_000 {
        let u = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let v = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let a: f64 = rng.gen_range(0.0..2.0 * PI);
        let (up, vp) = post_collision(&u, &v, &[a.cos(), a.sin()]).unwrap();
        let mom = (up[0] + vp[0] - u[0] - v[0]).abs().max((up[1] + vp[1] - u[1] - v[1]).abs());
        let en = (up[0] * up[0] + up[1] * up[1] + vp[0] * vp[0] + vp[1] * vp[1] - u[0] * u[0] - u[1] * u[1] - v[0] * v[0] - v[1] * v[1]).abs();
        worst = worst.max(mom).max(en);
    }
    let ok = worst <= 1e-12;
    report(2, ok, format!("max conservation error {worst:.2e} over 1e6 triples"));
    assert!(ok);
}

#[test]
fn criterion_03_contraction() {
    let d = desk();
    let kappa = d.k1.regime.kappa;
    let v_star = [1.0, 0.0];
    let gauss = DataPair::velocity_profile(move |v| (-((v[0] - v_star[0]).powi(2) + (v[1] - v_star[1]).powi(2))).exp(), 1.0);
    let data = DataPair::combine(&[(kappa / 4.0, &gauss), (kappa / 4.0, &DataPair::constant(1.0))]);
    let sol = d.k1.solve(&data, &SolverOptions { tol: 1e-10, max_iter: 50, ..full() }).unwrap();
    let r = &sol.report;
    let bound = d.k1.regime.bound_factor();
    let ratios_ok = r.ratios.iter().skip(1).all(|q| *q <= bound);
    let ok = r.guards_pass() && ratios_ok && r.iterations <= 50 && r.final_residual <= 1e-10;
    report(
        3,
        ok,
        format!("{} iterations, max ratio {:.3e} <= 4MT(kappa+c) = {bound:.3}, final residual {:.2e}", r.iterations, r.contraction_factor, r.final_residual),
    );
    assert!(ok);
}

#[test]
fn criterion_04_expansion_orders() {
    let d = desk();
    let kappa = d.k1.regime.kappa;
    let probes = ProbePair::gaussian_constant(&d.domain, &d.grid, [1.0, 0.0], 1.0, 1.0).unwrap();
    let eps: Vec<f64> = [8.0, 16.0, 32.0, 64.0].iter().map(|q| kappa / q).collect();
    let s = remainder_order_study(&d.k1, &probes, &eps, &full()).unwrap();
    let ok = (1.8..=2.2).contains(&s.first_order_slope) && (2.7..=3.3).contains(&s.remainder_slope);
    report(4, ok, format!("slopes first order {:.4}, remainder {:.4}", s.first_order_slope, s.remainder_slope));
    assert!(ok);
}

#[test]
fn criterion_05_algebraic_identity() {
    let d = desk();
    let e = d.k1.regime.kappa / 16.0;
    let probes = ProbePair::gaussian_constant(&d.domain, &d.grid, [1.0, 0.0], e, e).unwrap();
    let id = expansion_identity(&d.k1, &probes, &full()).unwrap();
    let ok = id.relative_error <= 1e-10;
    report(5, ok, format!("max |D2F - W11 - D2R| / max |D2F| = {:.2e}", id.relative_error));
    assert!(ok);
}

#[test]
fn criterion_06_integral_identity() {
    let d = desk();
    let e = d.k1.regime.kappa / 16.0;
    let probes = ProbePair::gaussian_constant(&d.domain, &d.grid, [1.0, 0.0], e, e).unwrap();
    let opts = SolverOptions { full_field: false, ..SolverOptions::default() };
    let base = integral_identity_check(&d.k1, &probes, &IdentityConfig::default(), &opts).unwrap();
    let fine = integral_identity_check(&d.k1, &probes, &IdentityConfig::default().refined(), &opts).unwrap();
    let ok = base.residual <= 2e-2 && fine.residual < base.residual;
    report(6, ok, format!("relative residual {:.3e} at default resolution, {:.3e} refined", base.residual, fine.residual));
    assert!(ok);
}

#[test]
fn criterion_07_p_weight() {
    let v_star = [1.0, 0.0];
    let (mut positive, mut stray_zero, mut bad_set) = (0usize, 0usize, 0.0_f64);
    let (nr, na, nw) = (40, 50, 50);
    for ir in 0..nr {
        let rho = 4.0 * (ir as f64 + 0.5) / nr as f64;
        for ia in 0..na {
            let a = 2.0 * PI * ia as f64 / na as f64 + 0.1;
            let w = [rho * a.cos(), rho * a.sin()];
            let u = [v_star[0] + w[0], v_star[1] + w[1]];
            for iw in 0..nw {
                let b = 2.0 * PI * iw as f64 / nw as f64 + 0.05;
                let om = [b.cos(), b.sin()];
                let p = p_weight(&v_star, &u, &om).unwrap();
                if p > 0.0 {
                    positive += 1;
                }
                if p == 0.0 {
                    let dot = w[0] * om[0] + w[1] * om[1];
                    if dot.abs() > 1e-10 && (rho * rho - dot * dot).abs() > 1e-10 {
                        stray_zero += 1;
                    }
                }
            }
            // points on the two zero sets
            for om in [[-a.sin(), a.cos()], [a.cos(), a.sin()], [-a.cos(), -a.sin()]] {
                bad_set = bad_set.max(p_weight(&v_star, &u, &om).unwrap().abs());
            }
        }
    }
    let ok = positive == 0 && stray_zero == 0 && bad_set <= 1e-10;
    report(
        7,
        ok,
        format!("{} sweep points: {positive} positive, {stray_zero} zeros off the zero sets, max |P| on zero sets {bad_set:.1e}", nr * na * nw),
    );
    assert!(ok);
}

/// The noise-free default reconstruction, shared by criteria 8 and 10.
fn noise_free() -> &'static ReconOutcome {
    static OUT: OnceLock<ReconOutcome> = OnceLock::new();
    OUT.get_or_init(|| {
        let d = desk();
        let cfg = ReconConfig::default();
        reconstruct(&d.k1, &d.k2, &cfg, d.k1.regime.kappa / 16.0, 0.1, 0.0, 1).unwrap()
    })
}

#[test]
fn criterion_08_light_ray_extraction() {
    let out = noise_free();
    let est = &out.lightray;
    let oracle = light_ray_oracle_field(&bump_phi(), 1.0, est.r, est.directions.len(), est.n_y, est.half_width);
    let num: f64 = est.values.iter().zip(&oracle.values).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = oracle.values.iter().map(|b| b * b).sum();
    let rel = (num / den).sqrt();
    let ok = rel <= 0.05;
    report(8, ok, format!("estimator vs oracle relative L2 {rel:.4} over {} probes (lambda 0.1, eps kappa/16)", est.values.len()));
    assert!(ok);
}

/// Max slice error relative to the peak over frequencies below half-Nyquist,
/// against the transform of Phi = T(t) X(x) by tensor Gauss rules on its
/// support box.
fn slice_error(n_y: usize) -> (f64, usize) {
    let p = common::bump_params();
    let phi = bump_phi();
    let field = light_ray_oracle_field(&phi, 1.0, 1.0, 4, n_y, 2.0);
    let (tn, tw) = gauss_legendre(64, 0.2, 0.8);
    let (xn, xw) = gauss_legendre(128, -0.6, 0.6);
    let spatial: Vec<(Vec2, f64)> = xn
        .iter()
        .zip(&xw)
        .flat_map(|(a, wa)| xn.iter().zip(&xw).map(move |(b, wb)| ([*a, *b], wa * wb * p.space_factor(&[*a, *b]))))
        .filter(|(_, w)| *w != 0.0)
        .collect();
    let x_hat = |xi: &Vec2| spatial.iter().map(|(x, w)| Complex64::from_polar(*w, -(x[0] * xi[0] + x[1] * xi[1]))).sum::<Complex64>();
    let t_hat = |tau: f64| tn.iter().zip(&tw).map(|(t, w)| Complex64::from_polar(w * p.time_factor(*t), -t * tau)).sum::<Complex64>();
    let half = PI / field.step() / 2.0;
    let mut cache = std::collections::HashMap::new();
    let (mut worst, mut peak, mut count) = (0.0_f64, 0.0_f64, 0usize);
    for k in 0..field.directions.len() {
        for s in fourier_slice(&field, k) {
            if s.xi[0].abs() >= half || s.xi[1].abs() >= half {
                continue;
            }
            let key = (s.xi[0].to_bits(), s.xi[1].to_bits());
            let xh = *cache.entry(key).or_insert_with(|| x_hat(&s.xi));
            let r = p.amplitude * xh * t_hat(s.tau);
            worst = worst.max((s.value - r).norm());
            peak = peak.max(r.norm());
            count += 1;
        }
    }
    (worst / peak, count)
}

#[test]
fn criterion_09_fourier_slice() {
    // 32^2 probe grid of the pipeline: aliasing of the y sampling sits near 1e-3
    let (coarse, _) = slice_error(32);
    let (rel, count) = slice_error(64);
    let ok = rel <= 1e-3;
    report(
        9,
        ok,
        format!("max slice error {rel:.2e} relative to peak over {count} frequencies below half-Nyquist on the 64^2 y grid ({coarse:.2e} on 32^2)"),
    );
    assert!(ok);
}

fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (half, mid) = (0.5 * (b - a), 0.5 * (a + b));
    gauss_quad::GaussLegendre::new(n.try_into().unwrap()).iter().map(|(x, w)| (mid + half * x, half * w)).unzip()
}

#[test]
fn criterion_10_noise_free_reconstruction() {
    let out = noise_free();
    let ok = out.errors.l2 <= 0.15;
    report(
        10,
        ok,
        format!("relative errors L2 {:.4}, H^-1 {:.4}, Linf {:.4}", out.errors.l2, out.errors.h_minus1, out.errors.linf),
    );
    assert!(ok);
}

#[test]
fn criterion_11_stability_trend() {
    let cfg = ExperimentConfig { mode: Mode::Sweep, ..ExperimentConfig::default() };
    let first = run_sweep(&cfg).unwrap();
    let second = run_sweep(&cfg).unwrap();
    let table = &first.reports[0];
    let h: Vec<f64> = table.column("h_minus1").unwrap().iter().map(|s| s.parse().unwrap()).collect();
    let status = table.column("status").unwrap();
    let monotone = h.windows(2).all(|w| w[1] <= w[0]);
    let identical = table.to_csv() == second.reports[0].to_csv();
    let ok = monotone && identical && status.iter().all(|s| s == "ok");
    report(
        11,
        ok,
        format!("H^-1 errors {:?} for delta 1e-2, 1e-4, 1e-6; non-increasing {monotone}; rerun byte-identical {identical}", h.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>()),
    );
    assert!(ok);
}

#[test]
fn criterion_12_critical_point() {
    let kappa = desk().k1.regime.kappa;
    let mut worst_grad = 0.0_f64;
    let mut worst_fd = 0.0_f64;
    let mut below = true;
    for &(k, n, big) in &[(kappa, 2, 10.0), (0.05, 2, 10.0), (0.2, 2, 1.0), (0.1, 3, 10.0), (0.02, 3, 2.0)] {
        for &delta in &[1e-2, 1e-4, 1e-6, 1e-8] {
            let (eps, lambda) = optimal_probe_parameters(delta, k, n, big).unwrap();
            let (ge, gl) = e_delta_gradient(eps, lambda, delta, k, n, big);
            worst_grad = worst_grad.max(ge.abs()).max(gl.abs());
            below &= eps < k / 4.0;
            // central differences of E_delta itself
            let h = 1e-6;
            let fe = (e_delta(eps * (1.0 + h), lambda, delta, k, n, big) - e_delta(eps * (1.0 - h), lambda, delta, k, n, big)) / (2.0 * h * eps);
            let fl = (e_delta(eps, lambda * (1.0 + h), delta, k, n, big) - e_delta(eps, lambda * (1.0 - h), delta, k, n, big)) / (2.0 * h * lambda);
            worst_fd = worst_fd.max(fe.abs()).max(fl.abs());
        }
    }
    let ok = worst_grad <= 1e-10 && below && worst_fd <= 1e-6;
    report(12, ok, format!("max |dE/d eps|, |dE/d lambda| = {worst_grad:.1e} (finite differences {worst_fd:.1e}); eps < kappa/4: {below}"));
    assert!(ok);
}
