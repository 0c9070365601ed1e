//! Nonlinear initial-boundary value problem by Picard iteration on the
//! correction G in F = F~ + G, and the measurement operator.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::collision::{norm2, BracketPlan, CollisionQuadrature, KernelSpec};
use crate::geometry::{backward_exit_2d, Domain};
use crate::transport::{transport_at_nodes, windows_from_mask, DataPair, Field, PhaseGrid, Profile, TransportError, Vec2, Window};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoltzmannError {
    #[error("no convergence in {iterations} iterations; residuals {residuals:?}")]
    Divergence { iterations: usize, residuals: Vec<f64> },
    #[error("non-finite collision term at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("measurement shapes differ")]
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop when sup |G_{m+1} - G_m| <= tol * sup |F|.
    pub tol: f64,
    pub max_iter: usize,
    /// Midpoint nodes per characteristic.
    pub n_quad: usize,
    /// Fill G at every grid node after convergence (otherwise only where
    /// measurements need it).
    pub full_field: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 50, n_quad: 64, full_field: true }
    }
}

/// kappa and c with 2MT(kappa+c)^2 <= c and 4MT(kappa+c) < 1 for c = 2 kappa.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub kappa: f64,
    pub c: f64,
    pub m: f64,
    pub horizon: f64,
}

impl Regime {
    /// Largest admissible kappa found by bisection, times `safety`.
    pub fn select(m: f64, horizon: f64, safety: f64) -> Regime {
        if m == 0.0 {
            return Regime { kappa: 1.0, c: 2.0, m, horizon };
        }
        let ok = |k: f64| {
            let c = 2.0 * k;
            2.0 * m * horizon * (k + c).powi(2) <= c && 4.0 * m * horizon * (k + c) < 1.0
        };
        let (mut lo, mut hi) = (0.0, 1.0 / (m * horizon));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let kappa = safety * lo;
        Regime { kappa, c: 2.0 * kappa, m, horizon }
    }

    /// 4MT(kappa + c), the contraction factor bound.
    pub fn bound_factor(&self) -> f64 {
        4.0 * self.m * self.horizon * (self.kappa + self.c)
    }

    /// C in ||F|| <= C(||g|| + ||h||) implied by the contraction argument.
    pub fn a_priori_constant(&self) -> f64 {
        1.0 / (1.0 - 0.5 * self.bound_factor())
    }

    pub fn contraction_ok(&self) -> bool {
        self.bound_factor() < 1.0 && 2.0 * self.m * self.horizon * (self.kappa + self.c).powi(2) <= self.c * (1.0 + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// residual_{m+1} / residual_m for m >= 1.
    pub ratios: Vec<f64>,
    pub contraction_factor: f64,
    pub bound_factor: f64,
    pub final_residual: f64,
    pub data_in_x_kappa: bool,
    pub contraction_guard: bool,
    pub regime: Regime,
    pub a_priori_constant: f64,
    /// Post-collision points clamped to the velocity hull, per sweep.
    pub clamped_points: u64,
}

impl SolveReport {
    pub fn guards_pass(&self) -> bool {
        self.data_in_x_kappa && self.contraction_guard
    }
}

/// Picard state: F~ is the exact free solution of the data and G lives on
/// the grid.
#[derive(Debug, Clone)]
pub struct NonlinearSolution {
    pub data: DataPair,
    /// G at grid nodes (zero where not filled).
    pub g: Field,
    /// Collision term Q(F, F) at grid nodes for the final iterate.
    pub q: Field,
    pub full: bool,
    pub report: SolveReport,
}

impl NonlinearSolution {
    /// F = F~ + G on the grid.
    pub fn field(&self, domain: &Domain) -> Field {
        let grid = self.g.grid;
        let nv = grid.n_vel();
        let mut values = self.g.values.clone();
        values.par_chunks_mut(nv).enumerate().for_each(|(tx, chunk)| {
            let (t, x) = grid.tx_point(tx);
            for (iv, c) in chunk.iter_mut().enumerate() {
                *c += self.data.free_solution(domain, t, &x, &grid.v_node(iv));
            }
        });
        Field { grid, values }
    }
}

/// Reusable solver state for one (domain, grid, kernel, quadrature).
pub struct Solver {
    pub domain: Domain,
    pub grid: PhaseGrid,
    pub kernel: KernelSpec,
    pub quad: Arc<CollisionQuadrature>,
    pub regime: Regime,
    plans: Vec<BracketPlan>,
    stencils: Vec<Vec<[(u32, f64); 4]>>,
    clamped_points: u64,
    /// Phi at every grid node.
    phi: Vec<f64>,
    /// (t, x) nodes where Phi is nonzero for some grid velocity.
    q_nodes: Vec<usize>,
    /// q_nodes plus every node sharing a cell with one, plus nodes near the
    /// declared support of Phi.
    near_nodes: Vec<usize>,
    /// Integration windows from the nonzero pattern of Phi.
    windows: Vec<Option<Window>>,
}

impl Solver {
    pub fn new(domain: Domain, grid: PhaseGrid, kernel: KernelSpec, quad: Arc<CollisionQuadrature>, regime: Regime) -> Self {
        let nv = grid.n_vel();
        let mut plans = Vec::with_capacity(nv);
        let mut stencils = Vec::with_capacity(nv);
        let mut clamped_points = 0;
        for iv in 0..nv {
            let plan = BracketPlan::new(&grid.v_node(iv), &kernel.psi, &quad);
            let (st, c) = plan.stencils(&grid);
            clamped_points += c;
            plans.push(plan);
            stencils.push(st);
        }
        let mut phi = vec![0.0; grid.len()];
        phi.par_chunks_mut(nv).enumerate().for_each(|(tx, chunk)| {
            let (t, x) = grid.tx_point(tx);
            for (iv, c) in chunk.iter_mut().enumerate() {
                *c = kernel.phi.eval(t, &x, norm2(&grid.v_node(iv)));
            }
        });
        let q_nodes: Vec<usize> =
            (0..grid.n_tx()).filter(|&tx| phi[tx * nv..(tx + 1) * nv].iter().any(|p| *p != 0.0)).collect();
        let near_nodes = near_set(&grid, &q_nodes, &kernel);
        let windows = windows_from_mask(&grid, |tx, iv| phi[tx * nv + iv] != 0.0);
        Solver { domain, grid, kernel, quad, regime, plans, stencils, clamped_points, phi, q_nodes, near_nodes, windows }
    }

    /// Zero-data transport of a source that vanishes wherever Phi does, at
    /// the listed (t, x) nodes. The Picard iteration and the second-order
    /// correctors share this discretization.
    pub(crate) fn transport(&self, source: &Field, nodes: &[usize], n_quad: usize, out: &mut [f64]) {
        transport_at_nodes(&self.domain, source, Some(&self.windows), nodes, n_quad, out);
    }

    /// Zero-data transport on the whole grid.
    pub fn transport_field(&self, source: &Field, n_quad: usize) -> Field {
        let all: Vec<usize> = (0..self.grid.n_tx()).collect();
        let mut out = vec![0.0; self.grid.len()];
        self.transport(source, &all, n_quad, &mut out);
        Field { grid: self.grid, values: out }
    }

    pub(crate) fn plan(&self, iv: usize) -> &BracketPlan {
        &self.plans[iv]
    }

    /// Phi at a grid node.
    pub fn phi_at(&self, tx: usize, iv: usize) -> f64 {
        self.phi[tx * self.grid.n_vel() + iv]
    }

    pub fn q_node_count(&self) -> usize {
        self.q_nodes.len()
    }

    /// Picard iteration G_{m+1} = L^{-1}[Q(F~ + G_m, F~ + G_m)], G_0 = 0.
    pub fn solve(&self, data: &DataPair, opts: &SolverOptions) -> Result<NonlinearSolution, BoltzmannError> {
        let grid = self.grid;
        let nv = grid.n_vel();
        let regime = self.regime;
        let mut report = SolveReport {
            iterations: 0,
            residuals: Vec::new(),
            ratios: Vec::new(),
            contraction_factor: 0.0,
            bound_factor: regime.bound_factor(),
            final_residual: 0.0,
            data_in_x_kappa: data.amplitude() <= regime.kappa * (1.0 + 1e-12),
            contraction_guard: regime.contraction_ok(),
            regime,
            a_priori_constant: regime.a_priori_constant(),
            clamped_points: self.clamped_points,
        };
        let mut g = Field::zeros(grid);
        let mut q = Field::zeros(grid);
        if self.kernel.is_zero() || self.q_nodes.is_empty() || data.is_zero() {
            report.iterations = 1;
            report.residuals.push(0.0);
            return Ok(NonlinearSolution { data: data.clone(), g, q, full: true, report });
        }
        let a_vals = self.profile_values(data);
        let bank = self.bank(a_vals.as_deref());
        let scale = self.free_scale(data);
        let mut next = vec![0.0; self.q_nodes.len() * nv];
        for m in 1..=opts.max_iter {
            self.collision_at(data, bank.as_ref(), &g, &self.q_nodes, &mut q);
            if q.values.iter().any(|v| !v.is_finite()) {
                return Err(BoltzmannError::NonFinite(m));
            }
            self.transport(&q, &self.q_nodes, opts.n_quad, &mut next);
            let mut res = 0.0_f64;
            let mut gmax = 0.0_f64;
            for (k, &tx) in self.q_nodes.iter().enumerate() {
                let slot = &mut g.values[tx * nv..(tx + 1) * nv];
                for (o, n) in slot.iter_mut().zip(&next[k * nv..(k + 1) * nv]) {
                    res = res.max((n - *o).abs());
                    gmax = gmax.max(n.abs());
                    *o = *n;
                }
            }
            report.iterations = m;
            if let Some(prev) = report.residuals.last() {
                if *prev > 0.0 {
                    report.ratios.push(res / prev);
                }
            }
            report.residuals.push(res);
            if res <= opts.tol * (scale + gmax) {
                break;
            }
            if m == opts.max_iter {
                return Err(BoltzmannError::Divergence { iterations: m, residuals: report.residuals });
            }
        }
        report.final_residual = *report.residuals.last().unwrap_or(&0.0);
        report.contraction_factor = report.ratios.iter().skip(1).fold(0.0_f64, |a, b| a.max(*b));
        // G at nodes outside the Phi support follows from the final Q
        let fill: Vec<usize> = if opts.full_field {
            let inside: std::collections::HashSet<usize> = self.q_nodes.iter().copied().collect();
            (0..grid.n_tx()).filter(|tx| !inside.contains(tx)).collect()
        } else {
            let inside: std::collections::HashSet<usize> = self.q_nodes.iter().copied().collect();
            self.near_nodes.iter().copied().filter(|tx| !inside.contains(tx)).collect()
        };
        let mut extra = vec![0.0; fill.len() * nv];
        self.transport(&q, &fill, opts.n_quad, &mut extra);
        for (k, &tx) in fill.iter().enumerate() {
            g.values[tx * nv..(tx + 1) * nv].copy_from_slice(&extra[k * nv..(k + 1) * nv]);
        }
        Ok(NonlinearSolution { data: data.clone(), g, q, full: opts.full_field, report })
    }

    /// F~ at the plan points, when it depends on v only.
    fn profile_values(&self, data: &DataPair) -> Option<Vec<Vec<f64>>> {
        match data.profile() {
            Profile::General => None,
            Profile::Constant(c) => Some(self.plans.iter().map(|p| vec![*c; p.points.len()]).collect()),
            Profile::Velocity(a) => Some(self.plans.iter().map(|p| p.points.iter().map(|w| a(w)).collect()).collect()),
        }
    }

    fn free_scale(&self, data: &DataPair) -> f64 {
        let nv = self.grid.n_vel();
        let mut s = 0.0_f64;
        for &tx in &self.q_nodes {
            let (t, x) = self.grid.tx_point(tx);
            for iv in 0..nv {
                s = s.max(data.free_solution(&self.domain, t, &x, &self.grid.v_node(iv)).abs());
            }
        }
        s
    }

    /// Forms for every grid velocity when F~ depends on v only.
    fn bank(&self, a_vals: Option<&[Vec<f64>]>) -> Option<FormBank> {
        let nv = self.grid.n_vel();
        a_vals.map(|a| {
            let forms: Vec<QuadForm> =
                (0..nv).map(|iv| QuadForm::new(&self.plans[iv], &self.stencils[iv], &a[iv], nv)).collect();
            FormBank::new(&forms, nv)
        })
    }

    /// Q = Phi * bracket(F~ + G) at the listed nodes, written into `q`.
    fn collision_at(&self, data: &DataPair, bank: Option<&FormBank>, g: &Field, nodes: &[usize], q: &mut Field) {
        let nv = self.grid.n_vel();
        if let Some(bank) = bank {
            let b = bank_at_nodes(bank, g, nodes);
            for (k, &tx) in nodes.iter().enumerate() {
                for iv in 0..nv {
                    q.values[tx * nv + iv] = self.phi[tx * nv + iv] * b[k * nv + iv];
                }
            }
            return;
        }
        let results: Vec<(usize, Vec<f64>)> = nodes
            .par_iter()
            .map(|&tx| {
                let gs = g.velocity_slice(tx);
                let (t, x) = self.grid.tx_point(tx);
                let mut out = vec![0.0; nv];
                let mut f = Vec::new();
                for (iv, o) in out.iter_mut().enumerate() {
                    let phi = self.phi[tx * nv + iv];
                    if phi == 0.0 {
                        continue;
                    }
                    let plan = &self.plans[iv];
                    f.clear();
                    f.extend(
                        plan.points
                            .iter()
                            .zip(&self.stencils[iv])
                            .map(|(w, s)| data.free_solution(&self.domain, t, &x, w) + interp(gs, s)),
                    );
                    *o = phi * plan.bracket(&f);
                }
                (tx, out)
            })
            .collect();
        for (tx, out) in results {
            q.values[tx * nv..(tx + 1) * nv].copy_from_slice(&out);
        }
    }

    /// Bracket of F~ + G at velocity v on the (t, x) grid, at `near_nodes`.
    pub(crate) fn bracket_table(&self, data: &DataPair, g: &Field, v: &Vec2) -> Vec<f64> {
        let plan = BracketPlan::new(v, &self.kernel.psi, &self.quad);
        let (st, clamped) = plan.stencils(&self.grid);
        self.quad.add_clamped(clamped);
        let a: Option<Vec<f64>> = match data.profile() {
            Profile::General => None,
            Profile::Constant(c) => Some(vec![*c; plan.points.len()]),
            Profile::Velocity(a) => Some(plan.points.iter().map(|w| a(w)).collect()),
        };
        let vals: Vec<(usize, f64)> = match &a {
            Some(a) => {
                let bank = FormBank::new(&[QuadForm::new(&plan, &st, a, self.grid.n_vel())], self.grid.n_vel());
                let b = bank_at_nodes(&bank, g, &self.near_nodes);
                self.near_nodes.iter().copied().zip(b).collect()
            }
            None => self
                .near_nodes
                .par_iter()
                .map(|&tx| {
                    let gs = g.velocity_slice(tx);
                    let (t, x) = self.grid.tx_point(tx);
                    let f: Vec<f64> = plan
                        .points
                        .iter()
                        .zip(&st)
                        .map(|(w, s)| data.free_solution(&self.domain, t, &x, w) + interp(gs, s))
                        .collect();
                    (tx, plan.bracket(&f))
                })
                .collect(),
        };
        let mut table = vec![0.0; self.grid.n_tx()];
        for (tx, b) in vals {
            table[tx] = b;
        }
        table
    }

    /// Evaluate F at the measurement points. The Duhamel integral is taken
    /// along the exact characteristic from the sample point, with the source
    /// Phi(t, x, |v|) * bracket(v) using exact Phi and the bracket
    /// interpolated on the (t, x) grid.
    pub fn measure(&self, sol: &NonlinearSolution, set: &Arc<MeasurementSet>, n_quad: usize) -> MeasurementPair {
        self.measure_with(sol, set, n_quad, MeasureMode::Auto)
    }

    pub fn measure_with(
        &self,
        sol: &NonlinearSolution,
        set: &Arc<MeasurementSet>,
        n_quad: usize,
        mode: MeasureMode,
    ) -> MeasurementPair {
        let mut by_v: HashMap<[u64; 2], Vec<(bool, usize)>> = HashMap::new();
        for (i, p) in set.outgoing.iter().enumerate() {
            by_v.entry(key(&p.v)).or_default().push((true, i));
        }
        for (i, p) in set.terminal.iter().enumerate() {
            by_v.entry(key(&p.v)).or_default().push((false, i));
        }
        let mut keys: Vec<[u64; 2]> = by_v.keys().copied().collect();
        keys.sort_unstable();
        let mut outgoing = vec![0.0; set.outgoing.len()];
        let mut terminal = vec![0.0; set.terminal.len()];
        let horizon = self.domain.horizon;
        let active = !(self.kernel.is_zero() || self.q_nodes.is_empty() || sol.data.is_zero());
        let tables = match mode {
            MeasureMode::Auto => keys.len() <= 4 * self.grid.n_vel(),
            MeasureMode::Characteristic => true,
            MeasureMode::Grid => false,
        };
        for k in keys {
            let v = [f64::from_bits(k[0]), f64::from_bits(k[1])];
            let items = &by_v[&k];
            let table = if active && tables { Some(self.bracket_table(&sol.data, &sol.g, &v)) } else { None };
            let vals: Vec<f64> = items
                .par_iter()
                .map(|&(out, i)| {
                    let (t, x) = if out {
                        (set.outgoing[i].t, set.outgoing[i].x)
                    } else {
                        (horizon, set.terminal[i].x)
                    };
                    let free = sol.data.free_solution(&self.domain, t, &x, &v);
                    match &table {
                        Some(tab) => free + self.line_source(tab, t, &x, &v, n_quad),
                        None if active => free + self.grid_line_source(&sol.q, t, &x, &v, n_quad),
                        None => free,
                    }
                })
                .collect();
            for (&(out, i), val) in items.iter().zip(vals) {
                if out {
                    outgoing[i] = val;
                } else {
                    terminal[i] = val;
                }
            }
        }
        MeasurementPair { set: set.clone(), outgoing, terminal }
    }

    /// Integral of the gridded Q along the backward characteristic from (t, x).
    fn grid_line_source(&self, q: &Field, t: f64, x: &Vec2, v: &Vec2, n_quad: usize) -> f64 {
        let len = t.min(backward_exit_2d(x, v, self.domain.d));
        if len <= 0.0 {
            return 0.0;
        }
        let h = len / n_quad as f64;
        let mut acc = 0.0;
        for k in 0..n_quad {
            let s = (k as f64 + 0.5) * h;
            acc += q.eval(t - s, &[x[0] - s * v[0], x[1] - s * v[1]], v);
        }
        acc * h
    }

    /// Integral of Phi * bracket along the backward characteristic from (t, x).
    pub(crate) fn line_source(&self, table: &[f64], t: f64, x: &Vec2, v: &Vec2, n_quad: usize) -> f64 {
        let len = t.min(backward_exit_2d(x, v, self.domain.d));
        let Some((s0, s1)) = self.support_window(t, x, v, len) else {
            return 0.0;
        };
        let r = norm2(v);
        let n = ((n_quad as f64 * (s1 - s0) / self.domain.horizon).ceil() as usize).clamp(4, n_quad);
        let h = (s1 - s0) / n as f64;
        let mut acc = 0.0;
        for k in 0..n {
            let s = s0 + (k as f64 + 0.5) * h;
            let (ts, xs) = (t - s, [x[0] - s * v[0], x[1] - s * v[1]]);
            let phi = self.kernel.phi.eval(ts, &xs, r);
            if phi != 0.0 {
                acc += phi * interp_tx(&self.grid, table, ts, &xs);
            }
        }
        acc * h
    }

    /// Part of [0, len] where (t - s, x - s v) can meet the support of Phi.
    fn support_window(&self, t: f64, x: &Vec2, v: &Vec2, len: f64) -> Option<(f64, f64)> {
        if len <= 0.0 {
            return None;
        }
        let Some((t_lo, t_hi, xc, rad)) = self.kernel.phi.support else {
            return Some((0.0, len));
        };
        let mut s0 = (t - t_hi).max(0.0);
        let mut s1 = (t - t_lo).min(len);
        for k in 0..2 {
            let (lo, hi) = (xc[k] - rad, xc[k] + rad);
            if v[k] == 0.0 {
                if x[k] < lo || x[k] > hi {
                    return None;
                }
            } else {
                let (a, b) = ((x[k] - hi) / v[k], (x[k] - lo) / v[k]);
                s0 = s0.max(a.min(b));
                s1 = s1.min(a.max(b));
            }
        }
        (s1 > s0).then_some((s0, s1))
    }

    /// Bracket tables for the given velocities (exposed for diagnostics).
    pub fn bracket_tables(&self, sol: &NonlinearSolution, velocities: &[Vec2]) -> Vec<Vec<f64>> {
        velocities.iter().map(|v| self.bracket_table(&sol.data, &sol.g, v)).collect()
    }

    /// Phi * bracket at an arbitrary point from a table for velocity v.
    pub fn source_from_table(&self, table: &[f64], t: f64, x: &Vec2, v: &Vec2) -> f64 {
        let phi = self.kernel.phi.eval(t, x, norm2(v));
        if phi == 0.0 {
            0.0
        } else {
            phi * interp_tx(&self.grid, table, t, x)
        }
    }

    /// sup |G - L^{-1}[Q(F, F)]| over the solver's q-nodes, recomputing Q
    /// from the returned G (the fixed-point residual).
    pub fn fixed_point_residual(&self, sol: &NonlinearSolution, n_quad: usize) -> f64 {
        let nv = self.grid.n_vel();
        let a_vals = self.profile_values(&sol.data);
        let bank = self.bank(a_vals.as_deref());
        let mut q = Field::zeros(self.grid);
        self.collision_at(&sol.data, bank.as_ref(), &sol.g, &self.q_nodes, &mut q);
        let all: Vec<usize> = (0..self.grid.n_tx()).collect();
        let mut next = vec![0.0; all.len() * nv];
        self.transport(&q, &all, n_quad, &mut next);
        next.iter().zip(&sol.g.values).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}


/// bracket(a + S g) = c + l.g + g^T A g for fixed point values a and stencil
/// matrix S, where g holds G at the velocity nodes of one (t, x) node.
#[derive(Debug, Clone)]
struct QuadForm {
    c: f64,
    l: Vec<f64>,
    /// nv x nv, row-major.
    a: Vec<f64>,
}

impl QuadForm {
    fn new(plan: &BracketPlan, st: &[[(u32, f64); 4]], a: &[f64], nv: usize) -> Self {
        let mut form = QuadForm { c: 0.0, l: vec![0.0; nv], a: vec![0.0; nv * nv] };
        let v = plan.v_index as usize;
        for &(i, j, w) in &plan.gain {
            form.add_product(i as usize, j as usize, w, st, a, nv);
        }
        for &(u, w) in &plan.loss {
            form.add_product(u as usize, v, -w, st, a, nv);
        }
        form
    }

    fn add_product(&mut self, i: usize, j: usize, w: f64, st: &[[(u32, f64); 4]], a: &[f64], nv: usize) {
        self.c += w * a[i] * a[j];
        for &(k, s) in &st[j] {
            self.l[k as usize] += w * a[i] * s;
        }
        for &(k, s) in &st[i] {
            self.l[k as usize] += w * a[j] * s;
        }
        for &(p, sp) in &st[i] {
            for &(q, sq) in &st[j] {
                self.a[p as usize * nv + q as usize] += w * sp * sq;
            }
        }
    }
}

/// Stacked forms: evaluates every form at every node with two matrix products.
struct FormBank {
    nv: usize,
    c: Vec<f64>,
    /// forms x nv
    l: DMatrix<f64>,
    /// (forms * nv) x nv
    a: DMatrix<f64>,
}

impl FormBank {
    fn new(forms: &[QuadForm], nv: usize) -> Self {
        let nf = forms.len();
        let c = forms.iter().map(|f| f.c).collect();
        let l = DMatrix::from_fn(nf, nv, |r, k| forms[r].l[k]);
        let a = DMatrix::from_fn(nf * nv, nv, |r, k| forms[r / nv].a[(r % nv) * nv + k]);
        FormBank { nv, c, l, a }
    }

    /// out[node][form] for the given G columns (nv values per node, concatenated).
    fn eval(&self, g: &[f64]) -> Vec<f64> {
        let nv = self.nv;
        let nn = g.len() / nv;
        let nf = self.c.len();
        let gm = DMatrix::from_column_slice(nv, nn, g);
        let lin = &self.l * &gm;
        let y = &self.a * &gm;
        let mut out = vec![0.0; nn * nf];
        for n in 0..nn {
            let col = gm.column(n);
            let yc = y.column(n);
            for f in 0..nf {
                let quad: f64 = (0..nv).map(|i| yc[f * nv + i] * col[i]).sum();
                out[n * nf + f] = self.c[f] + lin[(f, n)] + quad;
            }
        }
        out
    }
}

/// Evaluate a bank at the listed nodes in chunks, returning [node][form].
fn bank_at_nodes(bank: &FormBank, g: &Field, nodes: &[usize]) -> Vec<f64> {
    const CHUNK: usize = 256;
    let nv = bank.nv;
    let parts: Vec<Vec<f64>> = nodes
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut cols = Vec::with_capacity(chunk.len() * nv);
            for &tx in chunk {
                cols.extend_from_slice(g.velocity_slice(tx));
            }
            bank.eval(&cols)
        })
        .collect();
    parts.concat()
}

#[inline]
fn interp(gs: &[f64], s: &[(u32, f64); 4]) -> f64 {
    s[0].1 * gs[s[0].0 as usize] + s[1].1 * gs[s[1].0 as usize] + s[2].1 * gs[s[2].0 as usize] + s[3].1 * gs[s[3].0 as usize]
}

#[inline]
fn key(v: &Vec2) -> [u64; 2] {
    [v[0].to_bits(), v[1].to_bits()]
}

/// Trilinear interpolation of a (t, x) table.
#[inline]
pub(crate) fn interp_tx(grid: &PhaseGrid, table: &[f64], t: f64, x: &Vec2) -> f64 {
    let (it, ft, _) = grid.t.locate(t);
    let (i1, f1, _) = grid.x.locate(x[0]);
    let (i2, f2, _) = grid.x.locate(x[1]);
    let nx = grid.x.n;
    let b = grid.tx_index(it, i1, i2);
    let c = |o: usize| table[b + o];
    let lo = (1.0 - f1) * ((1.0 - f2) * c(0) + f2 * c(1)) + f1 * ((1.0 - f2) * c(nx) + f2 * c(nx + 1));
    if ft == 0.0 {
        return lo;
    }
    let s = nx * nx;
    let hi = (1.0 - f1) * ((1.0 - f2) * c(s) + f2 * c(s + 1)) + f1 * ((1.0 - f2) * c(s + nx) + f2 * c(s + nx + 1));
    (1.0 - ft) * lo + ft * hi
}

fn near_set(grid: &PhaseGrid, q_nodes: &[usize], kernel: &KernelSpec) -> Vec<usize> {
    let mut mark = vec![false; grid.n_tx()];
    let (nt, nx) = (grid.t.n as isize, grid.x.n as isize);
    for &tx in q_nodes {
        let (it, i1, i2) = grid.tx_split(tx);
        for dt in -1..=1 {
            for d1 in -1..=1 {
                for d2 in -1..=1 {
                    let (a, b, c) = (it as isize + dt, i1 as isize + d1, i2 as isize + d2);
                    if a >= 0 && a < nt && b >= 0 && b < nx && c >= 0 && c < nx {
                        mark[grid.tx_index(a as usize, b as usize, c as usize)] = true;
                    }
                }
            }
        }
    }
    if let Some((t_lo, t_hi, xc, rad)) = kernel.phi.support {
        let (ht, hx) = (grid.t.step(), grid.x.step());
        for (tx, m) in mark.iter_mut().enumerate() {
            let (t, x) = grid.tx_point(tx);
            let r = ((x[0] - xc[0]).powi(2) + (x[1] - xc[1]).powi(2)).sqrt();
            if t > t_lo - ht && t < t_hi + ht && r < rad + 1.5 * hx {
                *m = true;
            }
        }
    }
    (0..grid.n_tx()).filter(|&tx| mark[tx]).collect()
}

/// How `Solver::measure` evaluates the Duhamel integral at sample points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureMode {
    /// Characteristic tables when the set has few distinct velocities.
    Auto,
    /// Per-velocity bracket tables with exact Phi along each line.
    Characteristic,
    /// Five-linear interpolation of the gridded Q.
    Grid,
}

/// A point of Gamma_+^T where the outgoing trace is recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutgoingPoint {
    pub t: f64,
    pub x: Vec2,
    pub v: Vec2,
}

/// A point of U where F(T, x, v) is recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalPoint {
    pub x: Vec2,
    pub v: Vec2,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    pub outgoing: Vec<OutgoingPoint>,
    pub terminal: Vec<TerminalPoint>,
}

impl MeasurementSet {
    /// Boundary samples crossed with the interior time nodes, and the (x, v)
    /// grid nodes inside the closed disk at t = T.
    pub fn standard(domain: &Domain, grid: &PhaseGrid, boundary: &[crate::geometry::BoundarySample]) -> Self {
        let mut outgoing = Vec::new();
        for it in 1..grid.t.n {
            let t = grid.t.node(it);
            for b in boundary {
                outgoing.push(OutgoingPoint { t, x: [b.x[0], b.x[1]], v: [b.v[0], b.v[1]] });
            }
        }
        let mut terminal = Vec::new();
        for i1 in 0..grid.x.n {
            for i2 in 0..grid.x.n {
                let x = [grid.x.node(i1), grid.x.node(i2)];
                if !domain.contains_closed(&x) {
                    continue;
                }
                for iv in 0..grid.n_vel() {
                    terminal.push(TerminalPoint { x, v: grid.v_node(iv) });
                }
            }
        }
        MeasurementSet { outgoing, terminal }
    }

    pub fn len(&self) -> usize {
        self.outgoing.len() + self.terminal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// (A_out, A_T): the outgoing trace and the final state on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPair {
    pub set: Arc<MeasurementSet>,
    pub outgoing: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl MeasurementPair {
    pub fn zeros(set: Arc<MeasurementSet>) -> Self {
        let (a, b) = (set.outgoing.len(), set.terminal.len());
        MeasurementPair { set, outgoing: vec![0.0; a], terminal: vec![0.0; b] }
    }

    pub fn same_shape(&self, other: &MeasurementPair) -> bool {
        self.outgoing.len() == other.outgoing.len() && self.terminal.len() == other.terminal.len()
    }

    pub fn finite(&self) -> bool {
        self.outgoing.iter().chain(&self.terminal).all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &MeasurementPair) -> f64 {
        self.outgoing
            .iter()
            .zip(&other.outgoing)
            .chain(self.terminal.iter().zip(&other.terminal))
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Solve and measure in one call.
pub fn measure(solver: &Solver, data: &DataPair, set: &Arc<MeasurementSet>, opts: &SolverOptions) -> Result<MeasurementPair, BoltzmannError> {
    let sol = solver.solve(data, &SolverOptions { full_field: false, ..*opts })?;
    Ok(solver.measure(&sol, set, opts.n_quad))
}

/// Solve the nonlinear problem and return F on the full grid.
pub fn solve_nonlinear(solver: &Solver, data: &DataPair, opts: &SolverOptions) -> Result<(Field, SolveReport), BoltzmannError> {
    let sol = solver.solve(data, &SolverOptions { full_field: true, ..*opts })?;
    let f = sol.field(&solver.domain);
    Ok((f, sol.report))
}

/// Add independent uniform noise on [-delta, delta] to every stored value.
pub fn add_noise(m: &MeasurementPair, delta: f64, seed: u64) -> MeasurementPair {
    assert!(delta >= 0.0, "noise level must be nonnegative");
    if delta == 0.0 {
        return m.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: &f64| v + delta * (2.0 * rng.gen::<f64>() - 1.0);
    let outgoing = m.outgoing.iter().map(&mut jitter).collect();
    let terminal = m.terminal.iter().map(&mut jitter).collect();
    MeasurementPair { set: m.set.clone(), outgoing, terminal }
}
