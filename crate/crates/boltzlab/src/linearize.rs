//! Second-order linearization: finite differences in the data amplitudes,
//! probe solutions, correctors W and the integral identity.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::boltzmann::{BoltzmannError, MeasureMode, MeasurementPair, MeasurementSet, NonlinearSolution, OutgoingPoint, Solver, SolverOptions, TerminalPoint};
use crate::collision::{apply_q, norm2, BracketPlan, CollisionQuadrature, KernelSpec};
use crate::quad::gauss_legendre;
use crate::rayrecover::Chi;
use crate::transport::{solve_linear, DataPair, Field, LinearOptions, PhaseGrid, Profile, TransportError, Vec2};
use crate::geometry::Domain;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearizeError {
    #[error("shape mismatch in second difference")]
    Shape,
    #[error("amplitudes must be positive (got {0}, {1})")]
    Amplitude(f64, f64),
    #[error("probe amplitude {amplitude:e} exceeds kappa = {kappa:e}")]
    Guard { amplitude: f64, kappa: f64 },
    #[error("need at least two amplitudes")]
    TooFew,
    #[error(transparent)]
    Solve(#[from] BoltzmannError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// (A(e1, e2) - A(e1, 0) - A(0, e2)) / (e1 e2).
pub trait SecondDifference: Sized {
    fn second_difference(a11: &Self, a10: &Self, a01: &Self, e1: f64, e2: f64) -> Result<Self, LinearizeError>;
}

fn check_amplitudes(e1: f64, e2: f64) -> Result<(), LinearizeError> {
    if e1 > 0.0 && e2 > 0.0 {
        Ok(())
    } else {
        Err(LinearizeError::Amplitude(e1, e2))
    }
}

fn diff_values(a11: &[f64], a10: &[f64], a01: &[f64], e1: f64, e2: f64) -> Result<Vec<f64>, LinearizeError> {
    check_amplitudes(e1, e2)?;
    if a11.len() != a10.len() || a11.len() != a01.len() {
        return Err(LinearizeError::Shape);
    }
    let s = 1.0 / (e1 * e2);
    Ok(a11.iter().zip(a10).zip(a01).map(|((a, b), c)| (a - b - c) * s).collect())
}

impl SecondDifference for Vec<f64> {
    fn second_difference(a11: &Self, a10: &Self, a01: &Self, e1: f64, e2: f64) -> Result<Self, LinearizeError> {
        diff_values(a11, a10, a01, e1, e2)
    }
}

impl SecondDifference for Field {
    fn second_difference(a11: &Self, a10: &Self, a01: &Self, e1: f64, e2: f64) -> Result<Self, LinearizeError> {
        if a11.grid != a10.grid || a11.grid != a01.grid {
            return Err(LinearizeError::Shape);
        }
        Ok(Field { grid: a11.grid, values: diff_values(&a11.values, &a10.values, &a01.values, e1, e2)? })
    }
}

impl SecondDifference for MeasurementPair {
    fn second_difference(a11: &Self, a10: &Self, a01: &Self, e1: f64, e2: f64) -> Result<Self, LinearizeError> {
        if !a11.same_shape(a10) || !a11.same_shape(a01) {
            return Err(LinearizeError::Shape);
        }
        Ok(MeasurementPair {
            set: a11.set.clone(),
            outgoing: diff_values(&a11.outgoing, &a10.outgoing, &a01.outgoing, e1, e2)?,
            terminal: diff_values(&a11.terminal, &a10.terminal, &a01.terminal, e1, e2)?,
        })
    }
}

pub fn second_difference<T: SecondDifference>(a11: &T, a10: &T, a01: &T, e1: f64, e2: f64) -> Result<T, LinearizeError> {
    T::second_difference(a11, a10, a01, e1, e2)
}

/// Free-transport probes V1, V2 with their data and amplitudes.
#[derive(Debug, Clone)]
pub struct ProbePair {
    pub d1: DataPair,
    pub d2: DataPair,
    pub v1: Field,
    pub v2: Field,
    pub eps1: f64,
    pub eps2: f64,
}

impl ProbePair {
    pub fn new(domain: &Domain, grid: &PhaseGrid, d1: DataPair, d2: DataPair, eps1: f64, eps2: f64) -> Result<Self, LinearizeError> {
        let opts = LinearOptions::default();
        let zero = crate::transport::ZeroSource;
        let v1 = solve_linear(domain, &zero, &d1, grid, &opts)?;
        let v2 = solve_linear(domain, &zero, &d2, grid, &opts)?;
        Ok(ProbePair { d1, d2, v1, v2, eps1, eps2 })
    }

    /// V1 = exp(-|v - v*|^2) and V2 = 1, entering through both g and h.
    pub fn gaussian_constant(domain: &Domain, grid: &PhaseGrid, v_star: Vec2, eps1: f64, eps2: f64) -> Result<Self, LinearizeError> {
        let d1 = DataPair::velocity_profile(move |v| (-((v[0] - v_star[0]).powi(2) + (v[1] - v_star[1]).powi(2))).exp(), 1.0);
        ProbePair::new(domain, grid, d1, DataPair::constant(1.0), eps1, eps2)
    }

    pub fn with_amplitudes(&self, eps1: f64, eps2: f64) -> Self {
        ProbePair { eps1, eps2, ..self.clone() }
    }

    /// e1 (g1, h1) + e2 (g2, h2).
    pub fn data(&self, e1: f64, e2: f64) -> DataPair {
        DataPair::combine(&[(e1, &self.d1), (e2, &self.d2)])
    }

    /// e1 (|g1| + |h1|) + e2 (|g2| + |h2|).
    pub fn amplitude(&self) -> f64 {
        self.eps1 * self.d1.amplitude() + self.eps2 * self.d2.amplitude()
    }

    pub fn check_guard(&self, kappa: f64) -> Result<(), LinearizeError> {
        let amplitude = self.amplitude();
        if amplitude > kappa * (1.0 + 1e-12) {
            return Err(LinearizeError::Guard { amplitude, kappa });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceOrder {
    /// Q(V1, V1)
    S20,
    /// Q(V1, V2) + Q(V2, V1)
    S11,
    /// Q(V2, V2)
    S02,
}

/// Source S_(k1,k2) at every grid node, with V1 and V2 interpolated from
/// their Fields at the post-collision velocities.
pub fn source_s(kernel: &KernelSpec, v1: &Field, v2: &Field, which: SourceOrder, quad: &CollisionQuadrature) -> Field {
    let grid = v1.grid;
    let nv = grid.n_vel();
    let mut values = vec![0.0; grid.len()];
    values.par_chunks_mut(nv).enumerate().for_each(|(tx, chunk)| {
        let (t, x) = grid.tx_point(tx);
        for (iv, out) in chunk.iter_mut().enumerate() {
            let v = grid.v_node(iv);
            *out = match which {
                SourceOrder::S20 => apply_q(kernel, v1, v1, quad, t, &x, &v),
                SourceOrder::S02 => apply_q(kernel, v2, v2, quad, t, &x, &v),
                SourceOrder::S11 => apply_q(kernel, v1, v2, quad, t, &x, &v) + apply_q(kernel, v2, v1, quad, t, &x, &v),
            };
        }
    });
    Field { grid, values }
}

/// Collision bracket of two point-value vectors on a plan, without Phi:
/// sum W f(u') g(v') - f(u) g(v).
fn bilinear(plan: &BracketPlan, f: &[f64], g: &[f64]) -> f64 {
    let v = plan.v_index as usize;
    let gain: f64 = plan.gain.iter().map(|&(i, j, w)| w * f[i as usize] * g[j as usize]).sum();
    let loss: f64 = plan.loss.iter().map(|&(u, w)| w * f[u as usize]).sum();
    gain - loss * g[v]
}

fn velocity_fn(d: &DataPair) -> Option<Arc<dyn Fn(&Vec2) -> f64 + Send + Sync>> {
    match d.profile() {
        Profile::General => None,
        Profile::Constant(c) => {
            let c = *c;
            Some(Arc::new(move |_: &Vec2| c))
        }
        Profile::Velocity(a) => Some(a.clone()),
    }
}

/// The v-dependent factor C(v) of S = Phi * C(v) at an arbitrary velocity,
/// for probes whose data depend on v only.
pub fn velocity_factor(solver: &Solver, v: &Vec2, d1: &DataPair, d2: &DataPair, which: SourceOrder) -> Option<f64> {
    source_velocity_factor(&BracketPlan::new(v, &solver.kernel.psi, &solver.quad), d1, d2, which)
}

pub(crate) fn source_velocity_factor(plan: &BracketPlan, d1: &DataPair, d2: &DataPair, which: SourceOrder) -> Option<f64> {
    let (a1, a2) = (velocity_fn(d1)?, velocity_fn(d2)?);
    let p1: Vec<f64> = plan.points.iter().map(|w| a1(w)).collect();
    let p2: Vec<f64> = plan.points.iter().map(|w| a2(w)).collect();
    Some(match which {
        SourceOrder::S20 => bilinear(plan, &p1, &p1),
        SourceOrder::S02 => bilinear(plan, &p2, &p2),
        SourceOrder::S11 => bilinear(plan, &p1, &p2) + bilinear(plan, &p2, &p1),
    })
}

/// Source S_(k1,k2) with V1, V2 evaluated exactly at every quadrature point.
/// This is the discretization the nonlinear solver expands into.
pub fn source_s_exact(solver: &Solver, d1: &DataPair, d2: &DataPair, which: SourceOrder) -> Field {
    let grid = solver.grid;
    let nv = grid.n_vel();
    let factors: Option<Vec<f64>> =
        (0..nv).map(|iv| source_velocity_factor(solver.plan(iv), d1, d2, which)).collect();
    let mut values = vec![0.0; grid.len()];
    match factors {
        Some(c) => {
            values.par_chunks_mut(nv).enumerate().for_each(|(tx, chunk)| {
                for (iv, out) in chunk.iter_mut().enumerate() {
                    let phi = solver.phi_at(tx, iv);
                    if phi != 0.0 {
                        *out = phi * c[iv];
                    }
                }
            });
        }
        None => {
            let domain = solver.domain;
            values.par_chunks_mut(nv).enumerate().for_each(|(tx, chunk)| {
                let (t, x) = grid.tx_point(tx);
                for (iv, out) in chunk.iter_mut().enumerate() {
                    let phi = solver.phi_at(tx, iv);
                    if phi == 0.0 {
                        continue;
                    }
                    let plan = solver.plan(iv);
                    let p1: Vec<f64> = plan.points.iter().map(|w| d1.free_solution(&domain, t, &x, w)).collect();
                    let p2: Vec<f64> = plan.points.iter().map(|w| d2.free_solution(&domain, t, &x, w)).collect();
                    let b = match which {
                        SourceOrder::S20 => bilinear(plan, &p1, &p1),
                        SourceOrder::S02 => bilinear(plan, &p2, &p2),
                        SourceOrder::S11 => bilinear(plan, &p1, &p2) + bilinear(plan, &p2, &p1),
                    };
                    *out = phi * b;
                }
            });
        }
    }
    Field { grid, values }
}

/// W with zero data and source S, on the solver's transport discretization.
pub fn solve_w(solver: &Solver, s: &Field, n_quad: usize) -> Field {
    solver.transport_field(s, n_quad)
}

/// Expansion F = e1 V1 + e2 V2 + e1^2 W20 + e1 e2 W11 + e2^2 W02 + R.
#[derive(Debug, Clone)]
pub struct SecondOrderBundle {
    pub s20: Field,
    pub s11: Field,
    pub s02: Field,
    pub w20: Field,
    pub w11: Field,
    pub w02: Field,
    pub eps1: f64,
    pub eps2: f64,
    /// F at (eps1, eps2).
    pub f: Field,
    pub r: Field,
}

impl SecondOrderBundle {
    pub fn correctors(solver: &Solver, probes: &ProbePair, n_quad: usize) -> [(Field, Field); 3] {
        [SourceOrder::S20, SourceOrder::S11, SourceOrder::S02].map(|o| {
            let s = source_s_exact(solver, &probes.d1, &probes.d2, o);
            let w = solve_w(solver, &s, n_quad);
            (s, w)
        })
    }

    pub fn compute(solver: &Solver, probes: &ProbePair, opts: &SolverOptions) -> Result<Self, LinearizeError> {
        let [(s20, w20), (s11, w11), (s02, w02)] = Self::correctors(solver, probes, opts.n_quad);
        let (f, _) = solve_full(solver, probes, probes.eps1, probes.eps2, opts)?;
        let r = remainder(&f, probes, probes.eps1, probes.eps2, [&w20, &w11, &w02]);
        Ok(SecondOrderBundle { s20, s11, s02, w20, w11, w02, eps1: probes.eps1, eps2: probes.eps2, f, r })
    }
}

fn solve_full(solver: &Solver, probes: &ProbePair, e1: f64, e2: f64, opts: &SolverOptions) -> Result<(Field, NonlinearSolution), LinearizeError> {
    let sol = solver.solve(&probes.data(e1, e2), &SolverOptions { full_field: true, ..*opts })?;
    Ok((sol.field(&solver.domain), sol))
}

/// F - e1 V1 - e2 V2 - e1^2 W20 - e1 e2 W11 - e2^2 W02.
pub fn remainder(f: &Field, probes: &ProbePair, e1: f64, e2: f64, w: [&Field; 3]) -> Field {
    let values = f
        .values
        .par_iter()
        .enumerate()
        .map(|(k, fv)| {
            fv - e1 * probes.v1.values[k] - e2 * probes.v2.values[k]
                - e1 * e1 * w[0].values[k]
                - e1 * e2 * w[1].values[k]
                - e2 * e2 * w[2].values[k]
        })
        .collect();
    Field { grid: f.grid, values }
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderRow {
    pub eps: f64,
    /// sup |F - eps V1 - eps V2|
    pub first_order: f64,
    /// sup |R|
    pub remainder: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderStudy {
    pub rows: Vec<OrderRow>,
    pub first_order_slope: f64,
    pub remainder_slope: f64,
}

/// Sup norms of F - eps(V1 + V2) and R at e1 = e2 = eps for each amplitude.
pub fn remainder_order_study(solver: &Solver, probes: &ProbePair, eps: &[f64], opts: &SolverOptions) -> Result<OrderStudy, LinearizeError> {
    if eps.len() < 2 {
        return Err(LinearizeError::TooFew);
    }
    for &e in eps {
        check_amplitudes(e, e)?;
        probes.with_amplitudes(e, e).check_guard(solver.regime.kappa)?;
    }
    let [(_, w20), (_, w11), (_, w02)] = SecondOrderBundle::correctors(solver, probes, opts.n_quad);
    let mut rows = Vec::new();
    for &e in eps {
        let (f, _) = solve_full(solver, probes, e, e, opts)?;
        let first = f
            .values
            .iter()
            .enumerate()
            .fold(0.0_f64, |m, (k, fv)| m.max((fv - e * probes.v1.values[k] - e * probes.v2.values[k]).abs()));
        let r = remainder(&f, probes, e, e, [&w20, &w11, &w02]);
        rows.push(OrderRow { eps: e, first_order: first, remainder: r.sup_norm() });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let first_order_slope = loglog_slope(&xs, &rows.iter().map(|r| r.first_order).collect::<Vec<_>>());
    let remainder_slope = if rows.iter().all(|r| r.remainder > 0.0) {
        loglog_slope(&xs, &rows.iter().map(|r| r.remainder).collect::<Vec<_>>())
    } else {
        f64::NAN
    };
    Ok(OrderStudy { rows, first_order_slope, remainder_slope })
}

/// Algebraic check of D^2 F = W11 + D^2 R from three full solves.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionIdentity {
    /// max |D^2 F - W11 - D^2 R| / max |D^2 F|
    pub relative_error: f64,
    pub d2f_norm: f64,
    pub w11_norm: f64,
    pub d2r_norm: f64,
}

pub fn expansion_identity(solver: &Solver, probes: &ProbePair, opts: &SolverOptions) -> Result<ExpansionIdentity, LinearizeError> {
    let (e1, e2) = (probes.eps1, probes.eps2);
    probes.check_guard(solver.regime.kappa)?;
    let [(_, w20), (_, w11), (_, w02)] = SecondOrderBundle::correctors(solver, probes, opts.n_quad);
    let (f11, _) = solve_full(solver, probes, e1, e2, opts)?;
    let (f10, _) = solve_full(solver, probes, e1, 0.0, opts)?;
    let (f01, _) = solve_full(solver, probes, 0.0, e2, opts)?;
    let w = [&w20, &w11, &w02];
    let r11 = remainder(&f11, probes, e1, e2, w);
    let r10 = remainder(&f10, probes, e1, 0.0, w);
    let r01 = remainder(&f01, probes, 0.0, e2, w);
    let d2f = second_difference(&f11, &f10, &f01, e1, e2)?;
    let d2r = second_difference(&r11, &r10, &r01, e1, e2)?;
    let err = d2f
        .values
        .iter()
        .zip(&w11.values)
        .zip(&d2r.values)
        .fold(0.0_f64, |m, ((a, b), c)| m.max((a - b - c).abs()));
    let d2f_norm = d2f.sup_norm();
    Ok(ExpansionIdentity {
        relative_error: if d2f_norm > 0.0 { err / d2f_norm } else { err },
        d2f_norm,
        w11_norm: w11.sup_norm(),
        d2r_norm: d2r.sup_norm(),
    })
}

/// Quadrature sizes and the test function phi(y, v) = chi((y - y0)/a) chi((v - v0)/a)
/// of the integral identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityConfig {
    pub y0: Vec2,
    pub v0: Vec2,
    pub width: f64,
    /// Polar Gauss rule on supp_v phi.
    pub v_radial: usize,
    pub v_angular: usize,
    /// Gauss nodes in t for the volume and outgoing terms.
    pub n_t: usize,
    /// Polar Gauss rule on supp_y phi for the volume terms.
    pub y_radial: usize,
    pub y_angular: usize,
    /// Polar rule on the disk for the final term.
    pub x_radial: usize,
    pub x_angular: usize,
    /// Gauss nodes on the outgoing arc.
    pub n_arc: usize,
    /// Midpoints per characteristic in the measurement.
    pub n_quad: usize,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig {
            y0: [-0.3, 0.1],
            v0: [1.0, 0.2],
            width: 0.5,
            v_radial: 4,
            v_angular: 8,
            n_t: 32,
            y_radial: 12,
            y_angular: 24,
            x_radial: 16,
            x_angular: 32,
            n_arc: 32,
            n_quad: 64,
        }
    }
}

impl IdentityConfig {
    /// Every resolution doubled.
    pub fn refined(&self) -> Self {
        IdentityConfig {
            v_radial: 2 * self.v_radial,
            v_angular: 2 * self.v_angular,
            n_t: 2 * self.n_t,
            y_radial: 2 * self.y_radial,
            y_angular: 2 * self.y_angular,
            x_radial: 2 * self.x_radial,
            x_angular: 2 * self.x_angular,
            n_arc: 2 * self.n_arc,
            n_quad: 2 * self.n_quad,
            ..*self
        }
    }

    fn test_fn(&self, y: &Vec2, v: &Vec2) -> f64 {
        let chi = Chi::get();
        let a = self.width;
        chi.eval(&[(y[0] - self.y0[0]) / a, (y[1] - self.y0[1]) / a]) * chi.eval(&[(v[0] - self.v0[0]) / a, (v[1] - self.v0[1]) / a])
    }
}

/// Polar Gauss nodes on the disk of radius `r` around `c`.
pub(crate) fn polar_rule(c: &Vec2, r: f64, n_r: usize, n_a: usize) -> Vec<(Vec2, f64)> {
    let (rs, wr) = gauss_legendre(n_r, 0.0, r);
    let mut out = Vec::with_capacity(n_r * n_a);
    let wa = 2.0 * PI / n_a as f64;
    for (rho, w) in rs.iter().zip(&wr) {
        for k in 0..n_a {
            let a = (k as f64 + 0.5) * wa;
            out.push(([c[0] + rho * a.cos(), c[1] + rho * a.sin()], w * rho * wa));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport {
    /// Integral of psi S11 over U_T.
    pub lhs: f64,
    pub final_term: f64,
    pub outgoing_term: f64,
    /// Integral of psi D^2 S_eps over U_T.
    pub remainder_term: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Both sides of the integral identity for psi(t, x, v) = phi(x - t v, v).
///
/// The left side and the remainder term integrate the sources over
/// (t, y, v) with x = y + t v. The right side uses D^2 of the measurement
/// operator at final and outgoing quadrature points.
/// Composite Gauss rule on [0, T] along t -> (t, y + t v), broken at every
/// crossing of a grid plane so the interpolated tables are polynomial on
/// each piece.
fn line_rule(grid: &PhaseGrid, y: &Vec2, v: &Vec2, horizon: f64, per_piece: usize) -> Vec<(f64, f64)> {
    let mut cuts = vec![0.0, horizon];
    let ht = grid.t.step();
    for k in 1..grid.t.n - 1 {
        cuts.push(k as f64 * ht);
    }
    let hx = grid.x.step();
    for i in 0..2 {
        if v[i].abs() < 1e-14 {
            continue;
        }
        for j in 0..grid.x.n {
            let t = (grid.x.lo + j as f64 * hx - y[i]) / v[i];
            if t > 0.0 && t < horizon {
                cuts.push(t);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    let (g, gw) = gauss_legendre(per_piece, 0.0, 1.0);
    let mut out = Vec::with_capacity(cuts.len() * per_piece);
    for wdw in cuts.windows(2) {
        let len = wdw[1] - wdw[0];
        if len <= 1e-14 {
            continue;
        }
        out.extend(g.iter().zip(&gw).map(|(a, w)| (wdw[0] + a * len, w * len)));
    }
    out
}

pub fn integral_identity_check(solver: &Solver, probes: &ProbePair, cfg: &IdentityConfig, opts: &SolverOptions) -> Result<IdentityReport, LinearizeError> {
    let (e1, e2) = (probes.eps1, probes.eps2);
    check_amplitudes(e1, e2)?;
    probes.check_guard(solver.regime.kappa)?;
    let domain = solver.domain;
    let horizon = domain.horizon;
    let chi = Chi::get();
    let supp = cfg.width * chi.rho;
    let velocities: Vec<(Vec2, f64)> = polar_rule(&cfg.v0, supp, cfg.v_radial, cfg.v_angular)
        .into_iter()
        .map(|(v, w)| (v, w * chi.eval(&[(v[0] - cfg.v0[0]) / cfg.width, (v[1] - cfg.v0[1]) / cfg.width])))
        .collect();
    let s_opts = SolverOptions { full_field: false, ..*opts };
    let sols = [
        solver.solve(&probes.data(e1, e2), &s_opts)?,
        solver.solve(&probes.data(e1, 0.0), &s_opts)?,
        solver.solve(&probes.data(0.0, e2), &s_opts)?,
    ];

    // right side sample points
    let (tt, tw) = gauss_legendre(cfg.n_t, 0.0, horizon);
    let (arc, arc_w) = gauss_legendre(cfg.n_arc, -PI / 2.0, PI / 2.0);
    let disk = polar_rule(&[0.0, 0.0], domain.d, cfg.x_radial, cfg.x_angular);
    let mut set = MeasurementSet::default();
    let mut out_w = Vec::new();
    let mut fin_w = Vec::new();
    for (v, wv) in &velocities {
        let speed = norm2(v);
        let th_v = v[1].atan2(v[0]);
        for (x, wx) in &disk {
            let y = [x[0] - horizon * v[0], x[1] - horizon * v[1]];
            let psi = cfg.test_fn(&y, v);
            if psi != 0.0 {
                set.terminal.push(TerminalPoint { x: *x, v: *v });
                fin_w.push(wv * wx * psi);
            }
        }
        for (a, wa) in arc.iter().zip(&arc_w) {
            let th = th_v + a;
            let x = [domain.d * th.cos(), domain.d * th.sin()];
            let vn = speed * a.cos();
            for (t, wt) in tt.iter().zip(&tw) {
                let y = [x[0] - t * v[0], x[1] - t * v[1]];
                let psi = cfg.test_fn(&y, v);
                if psi != 0.0 {
                    set.outgoing.push(OutgoingPoint { t: *t, x, v: *v });
                    out_w.push(wv * wa * domain.d * wt * vn * psi);
                }
            }
        }
    }
    let set = Arc::new(set);
    let m: Vec<MeasurementPair> = sols.iter().map(|s| solver.measure_with(s, &set, cfg.n_quad, MeasureMode::Characteristic)).collect();
    let d2m = second_difference(&m[0], &m[1], &m[2], e1, e2)?;
    let final_term: f64 = d2m.terminal.iter().zip(&fin_w).map(|(a, w)| a * w).sum();
    let outgoing_term: f64 = d2m.outgoing.iter().zip(&out_w).map(|(a, w)| a * w).sum();

    // volume terms
    let ys = polar_rule(&cfg.y0, supp, cfg.y_radial, cfg.y_angular);
    let mut lhs = 0.0;
    let mut rem = 0.0;
    for (v, wv) in &velocities {
        let plan = BracketPlan::new(v, &solver.kernel.psi, &solver.quad);
        let c11 = source_velocity_factor(&plan, &probes.d1, &probes.d2, SourceOrder::S11);
        let tables: Vec<Vec<f64>> = sols.iter().map(|s| solver.bracket_table(&s.data, &s.g, v)).collect();
        let d2b = diff_values(&tables[0], &tables[1], &tables[2], e1, e2)?;
        let r = norm2(v);
        let (l, s) = ys
            .par_iter()
            .map(|(y, wy)| {
                let phi_y = cfg.test_fn(y, v);
                if phi_y == 0.0 {
                    return (0.0, 0.0);
                }
                let mut l = 0.0;
                let mut s = 0.0;
                for (t, wt) in &line_rule(&solver.grid, y, v, horizon, 4) {
                    let x = [y[0] + t * v[0], y[1] + t * v[1]];
                    if !domain.contains(&x) {
                        continue;
                    }
                    let phi_k = solver.kernel.phi.eval(*t, &x, r);
                    if phi_k == 0.0 {
                        continue;
                    }
                    let s11 = match c11 {
                        Some(c) => phi_k * c,
                        None => {
                            let f1 = |tq: f64, xq: &Vec2, w: &Vec2| probes.d1.free_solution(&domain, tq, xq, w);
                            let f2 = |tq: f64, xq: &Vec2, w: &Vec2| probes.d2.free_solution(&domain, tq, xq, w);
                            apply_q(&solver.kernel, &f1, &f2, &solver.quad, *t, &x, v)
                                + apply_q(&solver.kernel, &f2, &f1, &solver.quad, *t, &x, v)
                        }
                    };
                    let d2q = phi_k * crate::boltzmann::interp_tx(&solver.grid, &d2b, *t, &x);
                    l += wt * s11;
                    s += wt * (d2q - s11);
                }
                (wy * phi_y * l, wy * phi_y * s)
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        lhs += wv * l;
        rem += wv * s;
    }
    let rhs = final_term + outgoing_term - rem;
    let residual = (lhs - rhs).abs() / lhs.abs().max(1e-300);
    Ok(IdentityReport { lhs, final_term, outgoing_term, remainder_term: rem, rhs, residual: if lhs == 0.0 && rhs == 0.0 { 0.0 } else { residual } })
}
