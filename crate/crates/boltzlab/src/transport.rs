//! Linear transport by direct evaluation of the Duhamel formula along
//! characteristics, plus the sampled phase-space field type.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{backward_exit_2d, Domain};

pub type Vec2 = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("non-finite {what} at node t={t}, x={x:?}, v={v:?}")]
    NonFinite { what: &'static str, t: f64, x: Vec2, v: Vec2 },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("field grids differ")]
    GridMismatch,
}

/// Uniform nodes lo, lo + h, ..., hi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self, TransportError> {
        if n < 2 || !(hi > lo) {
            return Err(TransportError::Grid(format!("axis [{lo}, {hi}] with {n} nodes")));
        }
        Ok(Axis { lo, hi, n })
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    /// Cell index and local coordinate in [0, 1], clamped to the hull. The
    /// flag reports whether clamping was needed.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64, bool) {
        let s = (x - self.lo) / self.step();
        let last = (self.n - 2) as f64;
        if s <= 0.0 {
            (0, 0.0, s < -1e-9)
        } else if s >= last + 1.0 {
            (self.n - 2, 1.0, s > last + 1.0 + 1e-9)
        } else {
            let i = (s.floor() as usize).min(self.n - 2);
            (i, s - i as f64, false)
        }
    }
}

/// Tensor grid over [0, T] x [-d, d]^2 x [-R_v, R_v]^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseGrid {
    pub t: Axis,
    pub x: Axis,
    pub v: Axis,
}

impl PhaseGrid {
    /// `t_steps` intervals in time, `nx` and `nv` nodes per space and velocity axis.
    pub fn new(domain: &Domain, t_steps: usize, nx: usize, nv: usize, r_v: f64) -> Result<Self, TransportError> {
        if domain.n != 2 {
            return Err(TransportError::Grid(format!("solver grids are planar, got n = {}", domain.n)));
        }
        Ok(PhaseGrid {
            t: Axis::new(0.0, domain.horizon, t_steps + 1)?,
            x: Axis::new(-domain.d, domain.d, nx)?,
            v: Axis::new(-r_v, r_v, nv)?,
        })
    }

    #[inline]
    pub fn n_vel(&self) -> usize {
        self.v.n * self.v.n
    }

    #[inline]
    pub fn n_space(&self) -> usize {
        self.x.n * self.x.n
    }

    /// Number of (t, x) nodes.
    #[inline]
    pub fn n_tx(&self) -> usize {
        self.t.n * self.n_space()
    }

    pub fn len(&self) -> usize {
        self.n_tx() * self.n_vel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn tx_index(&self, it: usize, ix1: usize, ix2: usize) -> usize {
        (it * self.x.n + ix1) * self.x.n + ix2
    }

    #[inline]
    pub fn index(&self, it: usize, ix1: usize, ix2: usize, iv: usize) -> usize {
        self.tx_index(it, ix1, ix2) * self.n_vel() + iv
    }

    /// (t, x) of a flat (t, x) index.
    #[inline]
    pub fn tx_point(&self, tx: usize) -> (f64, Vec2) {
        let ns = self.n_space();
        let it = tx / ns;
        let r = tx % ns;
        (self.t.node(it), [self.x.node(r / self.x.n), self.x.node(r % self.x.n)])
    }

    #[inline]
    pub fn tx_split(&self, tx: usize) -> (usize, usize, usize) {
        let ns = self.n_space();
        (tx / ns, (tx % ns) / self.x.n, tx % self.x.n)
    }

    #[inline]
    pub fn v_node(&self, iv: usize) -> Vec2 {
        [self.v.node(iv / self.v.n), self.v.node(iv % self.v.n)]
    }

    /// Bilinear stencil of a velocity on the velocity grid. Returns the clamp flag.
    #[inline]
    pub fn v_stencil(&self, w: &Vec2) -> ([(u32, f64); 4], bool) {
        let (i, a, c1) = self.v.locate(w[0]);
        let (j, b, c2) = self.v.locate(w[1]);
        let n = self.v.n;
        let k = (i * n + j) as u32;
        (
            [
                (k, (1.0 - a) * (1.0 - b)),
                (k + 1, (1.0 - a) * b),
                (k + n as u32, a * (1.0 - b)),
                (k + n as u32 + 1, a * b),
            ],
            c1 || c2,
        )
    }
}

/// Anything that can be evaluated at a phase point (t, x, v).
pub trait PhaseFunction: Sync {
    fn value(&self, t: f64, x: &Vec2, v: &Vec2) -> f64;

    /// Whether `v` lies inside the velocity hull of the representation.
    fn in_velocity_hull(&self, _v: &Vec2) -> bool {
        true
    }

    fn as_field(&self) -> Option<&Field> {
        None
    }

    fn is_zero(&self) -> bool {
        false
    }
}

impl<F> PhaseFunction for F
where
    F: Fn(f64, &Vec2, &Vec2) -> f64 + Sync,
{
    fn value(&self, t: f64, x: &Vec2, v: &Vec2) -> f64 {
        self(t, x, v)
    }
}

/// The zero function, recognised by the solvers.
pub struct ZeroSource;

impl PhaseFunction for ZeroSource {
    fn value(&self, _t: f64, _x: &Vec2, _v: &Vec2) -> f64 {
        0.0
    }
    fn is_zero(&self) -> bool {
        true
    }
}

/// Sampled F(t, x, v) with multilinear interpolation clamped to the hull.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: PhaseGrid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: PhaseGrid) -> Self {
        Field { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn(f64, &Vec2, &Vec2) -> f64 + Sync) -> Self {
        let nv = grid.n_vel();
        let mut values = vec![0.0; grid.len()];
        values.par_chunks_mut(nv).enumerate().for_each(|(tx, chunk)| {
            let (t, x) = grid.tx_point(tx);
            for (iv, c) in chunk.iter_mut().enumerate() {
                *c = f(t, &x, &grid.v_node(iv));
            }
        });
        Field { grid, values }
    }

    #[inline]
    pub fn at(&self, it: usize, ix1: usize, ix2: usize, iv: usize) -> f64 {
        self.values[self.grid.index(it, ix1, ix2, iv)]
    }

    /// Values over the velocity grid at one (t, x) node.
    #[inline]
    pub fn velocity_slice(&self, tx: usize) -> &[f64] {
        let nv = self.grid.n_vel();
        &self.values[tx * nv..(tx + 1) * nv]
    }

    /// Multilinear interpolation in (t, x1, x2, v1, v2).
    pub fn eval(&self, t: f64, x: &Vec2, v: &Vec2) -> f64 {
        let g = &self.grid;
        let (it, ft, _) = g.t.locate(t);
        let (i1, f1, _) = g.x.locate(x[0]);
        let (i2, f2, _) = g.x.locate(x[1]);
        let (st, _) = g.v_stencil(v);
        let nv = g.n_vel();
        let mut acc = 0.0;
        for (dt, wt) in [(0, 1.0 - ft), (1, ft)] {
            if wt == 0.0 {
                continue;
            }
            for (d1, w1) in [(0, 1.0 - f1), (1, f1)] {
                if w1 == 0.0 {
                    continue;
                }
                for (d2, w2) in [(0, 1.0 - f2), (1, f2)] {
                    if w2 == 0.0 {
                        continue;
                    }
                    let base = g.tx_index(it + dt, i1 + d1, i2 + d2) * nv;
                    let mut s = 0.0;
                    for (k, w) in st {
                        if w != 0.0 {
                            s += w * self.values[base + k as usize];
                        }
                    }
                    acc += wt * w1 * w2 * s;
                }
            }
        }
        acc
    }

    /// Trilinear interpolation in (t, x) at a grid velocity index.
    #[inline]
    pub fn eval_at_velocity(&self, t: f64, x: &Vec2, iv: usize) -> f64 {
        let g = &self.grid;
        let (it, ft, _) = g.t.locate(t);
        let (i1, f1, _) = g.x.locate(x[0]);
        let (i2, f2, _) = g.x.locate(x[1]);
        let nv = g.n_vel();
        let nx = g.x.n;
        let base = g.tx_index(it, i1, i2) * nv + iv;
        let stride_t = nx * nx * nv;
        let stride_1 = nx * nv;
        let val = &self.values;
        let c = |o: usize| val[base + o];
        let lo = (1.0 - f1) * ((1.0 - f2) * c(0) + f2 * c(nv)) + f1 * ((1.0 - f2) * c(stride_1) + f2 * c(stride_1 + nv));
        if ft == 0.0 {
            return lo;
        }
        let b = stride_t;
        let hi = (1.0 - f1) * ((1.0 - f2) * c(b) + f2 * c(b + nv))
            + f1 * ((1.0 - f2) * c(b + stride_1) + f2 * c(b + stride_1 + nv));
        (1.0 - ft) * lo + ft * hi
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(self)
    }

    /// Elementwise a*self + b*other.
    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Result<Field, TransportError> {
        if self.grid != other.grid {
            return Err(TransportError::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(p, q)| a * p + b * q).collect();
        Ok(Field { grid: self.grid, values })
    }
}

impl PhaseFunction for Field {
    fn value(&self, t: f64, x: &Vec2, v: &Vec2) -> f64 {
        self.eval(t, x, v)
    }
    fn in_velocity_hull(&self, v: &Vec2) -> bool {
        let a = &self.grid.v;
        let tol = 1e-9 * a.step();
        v.iter().all(|c| *c >= a.lo - tol && *c <= a.hi + tol)
    }
    fn as_field(&self) -> Option<&Field> {
        Some(self)
    }
}

/// Max of |values| over all nodes.
pub fn sup_norm(field: &Field) -> f64 {
    field.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

type BoundaryFn = Arc<dyn Fn(f64, &Vec2, &Vec2) -> f64 + Send + Sync>;
type InitialFn = Arc<dyn Fn(&Vec2, &Vec2) -> f64 + Send + Sync>;
type VelocityFn = Arc<dyn Fn(&Vec2) -> f64 + Send + Sync>;

/// How the data depend on (t, x). Data equal to a(v) on both Gamma_- and
/// {t = 0} transport to F~ = a(v), which the solvers evaluate exactly.
#[derive(Clone)]
pub enum Profile {
    General,
    Velocity(VelocityFn),
    Constant(f64),
}

/// Incoming boundary data g on Gamma_- and initial data h.
#[derive(Clone)]
pub struct DataPair {
    g: BoundaryFn,
    h: InitialFn,
    pub g_bound: f64,
    pub h_bound: f64,
    profile: Profile,
}

impl std::fmt::Debug for DataPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.profile {
            Profile::General => "general".to_string(),
            Profile::Velocity(_) => "velocity".to_string(),
            Profile::Constant(c) => format!("constant({c})"),
        };
        f.debug_struct("DataPair")
            .field("profile", &kind)
            .field("g_bound", &self.g_bound)
            .field("h_bound", &self.h_bound)
            .finish()
    }
}

impl DataPair {
    /// General data; the bounds must dominate |g| and |h|.
    pub fn new(
        g: impl Fn(f64, &Vec2, &Vec2) -> f64 + Send + Sync + 'static,
        h: impl Fn(&Vec2, &Vec2) -> f64 + Send + Sync + 'static,
        g_bound: f64,
        h_bound: f64,
    ) -> Self {
        DataPair { g: Arc::new(g), h: Arc::new(h), g_bound, h_bound, profile: Profile::General }
    }

    pub fn zero() -> Self {
        DataPair::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        DataPair {
            g: Arc::new(move |_, _, _| c),
            h: Arc::new(move |_, _| c),
            g_bound: c.abs(),
            h_bound: c.abs(),
            profile: Profile::Constant(c),
        }
    }

    /// g(t, x, v) = h(x, v) = a(v) with sup |a| <= bound.
    pub fn velocity_profile(a: impl Fn(&Vec2) -> f64 + Send + Sync + 'static, bound: f64) -> Self {
        let a: VelocityFn = Arc::new(a);
        let (ag, ah) = (a.clone(), a.clone());
        DataPair {
            g: Arc::new(move |_, _, v| ag(v)),
            h: Arc::new(move |_, v| ah(v)),
            g_bound: bound,
            h_bound: bound,
            profile: Profile::Velocity(a),
        }
    }

    #[inline]
    pub fn g(&self, t: f64, x: &Vec2, v: &Vec2) -> f64 {
        (self.g)(t, x, v)
    }

    #[inline]
    pub fn h(&self, x: &Vec2, v: &Vec2) -> f64 {
        (self.h)(x, v)
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    /// ||g|| + ||h||, the quantity bounded by kappa.
    pub fn amplitude(&self) -> f64 {
        self.g_bound + self.h_bound
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.profile, Profile::Constant(c) if c == 0.0)
    }

    /// sum_k c_k * data_k. Bounds combine by the triangle inequality, except
    /// for constants, which combine exactly.
    pub fn combine(terms: &[(f64, &DataPair)]) -> DataPair {
        let terms: Vec<(f64, DataPair)> = terms.iter().filter(|(c, _)| *c != 0.0).map(|(c, d)| (*c, (*d).clone())).collect();
        if terms.is_empty() {
            return DataPair::zero();
        }
        if terms.iter().all(|(_, d)| matches!(d.profile, Profile::Constant(_))) {
            let c = terms
                .iter()
                .map(|(k, d)| match d.profile {
                    Profile::Constant(v) => k * v,
                    _ => unreachable!(),
                })
                .sum();
            return DataPair::constant(c);
        }
        let g_bound = terms.iter().map(|(k, d)| k.abs() * d.g_bound).sum();
        let h_bound = terms.iter().map(|(k, d)| k.abs() * d.h_bound).sum();
        let all_velocity = terms.iter().all(|(_, d)| !matches!(d.profile, Profile::General));
        if all_velocity {
            let parts: Vec<(f64, Profile)> = terms.iter().map(|(k, d)| (*k, d.profile.clone())).collect();
            let a = move |v: &Vec2| {
                parts
                    .iter()
                    .map(|(k, p)| match p {
                        Profile::Constant(c) => k * c,
                        Profile::Velocity(f) => k * f(v),
                        Profile::General => unreachable!(),
                    })
                    .sum()
            };
            let mut out = DataPair::velocity_profile(a, g_bound);
            out.h_bound = h_bound;
            return out;
        }
        let tg = terms.clone();
        let th = terms;
        DataPair {
            g: Arc::new(move |t, x, v| tg.iter().map(|(k, d)| k * d.g(t, x, v)).sum()),
            h: Arc::new(move |x, v| th.iter().map(|(k, d)| k * d.h(x, v)).sum()),
            g_bound,
            h_bound,
            profile: Profile::General,
        }
    }

    /// Homogeneous solution at a point: g(t - tau, x - tau v, v) if t >= tau_-
    /// (H(0) = 1 selects the boundary datum), else h(x - t v, v).
    #[inline]
    pub fn free_solution(&self, domain: &Domain, t: f64, x: &Vec2, v: &Vec2) -> f64 {
        match &self.profile {
            Profile::Constant(c) => *c,
            Profile::Velocity(a) => a(v),
            Profile::General => {
                let tau = backward_exit_2d(x, v, domain.d);
                if t >= tau {
                    self.g(t - tau, &[x[0] - tau * v[0], x[1] - tau * v[1]], v)
                } else {
                    self.h(&[x[0] - t * v[0], x[1] - t * v[1]], v)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearOptions {
    /// Composite midpoint nodes along each characteristic.
    pub n_quad: usize,
}

impl Default for LinearOptions {
    fn default() -> Self {
        LinearOptions { n_quad: 64 }
    }
}

/// Source term of the Duhamel formula at one point.
#[inline]
fn source_integral(
    domain: &Domain,
    source: &(impl PhaseFunction + ?Sized),
    t: f64,
    x: &Vec2,
    v: &Vec2,
    n_quad: usize,
) -> f64 {
    let len = t.min(backward_exit_2d(x, v, domain.d));
    if len <= 0.0 {
        return 0.0;
    }
    let h = len / n_quad as f64;
    let mut acc = 0.0;
    for k in 0..n_quad {
        let s = (k as f64 + 0.5) * h;
        acc += source.value(t - s, &[x[0] - s * v[0], x[1] - s * v[1]], v);
    }
    acc * h
}

/// A Field source stored velocity-major, with the time window outside of
/// which each velocity slice vanishes. Line integrals at grid velocities are
/// trilinear in (t, x) and only sample the window.
/// [t_lo, t_hi, x1_lo, x1_hi, x2_lo, x2_hi] of one velocity slice.
pub(crate) type Window = [f64; 6];

/// Per-velocity boxes, padded by one cell, containing the nodes where `nonzero` holds.
pub(crate) fn windows_from_mask(grid: &PhaseGrid, nonzero: impl Fn(usize, usize) -> bool) -> Vec<Option<Window>> {
    let (ht, hx) = (grid.t.step(), grid.x.step());
    (0..grid.n_vel())
        .map(|iv| {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for tx in 0..grid.n_tx() {
                if nonzero(tx, iv) {
                    let (it, i1, i2) = grid.tx_split(tx);
                    for (k, i) in [it, i1, i2].into_iter().enumerate() {
                        lo[k] = lo[k].min(i);
                        hi[k] = hi[k].max(i);
                    }
                }
            }
            (lo[0] != usize::MAX).then(|| {
                [
                    grid.t.node(lo[0]) - ht,
                    grid.t.node(hi[0]) + ht,
                    grid.x.node(lo[1]) - hx,
                    grid.x.node(hi[1]) + hx,
                    grid.x.node(lo[2]) - hx,
                    grid.x.node(hi[2]) + hx,
                ]
            })
        })
        .collect()
}

pub(crate) struct ColumnSource {
    grid: PhaseGrid,
    cols: Vec<f64>,
    /// Per velocity: [t_lo, t_hi, x1_lo, x1_hi, x2_lo, x2_hi] outside of
    /// which the interpolant is zero.
    window: Vec<Option<Window>>,
}

impl ColumnSource {
    pub(crate) fn new(source: &Field) -> Self {
        let nv = source.grid.n_vel();
        let window = windows_from_mask(&source.grid, |tx, iv| source.values[tx * nv + iv] != 0.0);
        ColumnSource::with_windows(source, window)
    }

    /// Uses the given windows, which must contain every nonzero of `source`.
    pub(crate) fn with_windows(source: &Field, window: Vec<Option<Window>>) -> Self {
        let grid = source.grid;
        let (nv, ntx) = (grid.n_vel(), grid.n_tx());
        let mut cols = vec![0.0; nv * ntx];
        for (tx, slice) in source.values.chunks(nv).enumerate() {
            for (iv, val) in slice.iter().enumerate() {
                cols[iv * ntx + tx] = *val;
            }
        }
        ColumnSource { grid, cols, window }
    }

    /// Integral over s in [0, min(t, tau_-)] of the source at (t - s, x - s v_iv)
    /// by the midpoint rule on the part of the chord inside the window, with
    /// step at most T / n_quad.
    #[inline]
    pub(crate) fn integral(&self, domain: &Domain, t: f64, x: &Vec2, iv: usize, n_quad: usize) -> f64 {
        let Some(w) = self.window[iv] else {
            return 0.0;
        };
        let v = self.grid.v_node(iv);
        let len = t.min(backward_exit_2d(x, &v, domain.d));
        let mut s0 = (t - w[1]).max(0.0);
        let mut s1 = (t - w[0]).min(len);
        // x - s v inside [lo, hi] in each coordinate
        for k in 0..2 {
            let (lo, hi) = (w[2 + 2 * k], w[3 + 2 * k]);
            if v[k] == 0.0 {
                if x[k] < lo || x[k] > hi {
                    return 0.0;
                }
            } else {
                let (a, b) = ((x[k] - hi) / v[k], (x[k] - lo) / v[k]);
                s0 = s0.max(a.min(b));
                s1 = s1.min(a.max(b));
            }
        }
        if s1 <= s0 {
            return 0.0;
        }
        let g = &self.grid;
        let ntx = g.n_tx();
        let col = &self.cols[iv * ntx..(iv + 1) * ntx];
        let nx = g.x.n;
        let (it_max, ix_max) = ((g.t.n - 2) as f64, (nx - 2) as f64);
        let (it_inv, ix_inv) = (1.0 / g.t.step(), 1.0 / g.x.step());
        let n = ((n_quad as f64 * (s1 - s0) / domain.horizon).ceil() as usize).clamp(4, n_quad);
        let h = (s1 - s0) / n as f64;
        // grid coordinates are affine in the midpoint index
        let c0 = [
            (t - s0 - 0.5 * h - g.t.lo) * it_inv,
            (x[0] - (s0 + 0.5 * h) * v[0] - g.x.lo) * ix_inv,
            (x[1] - (s0 + 0.5 * h) * v[1] - g.x.lo) * ix_inv,
        ];
        let dc = [-h * it_inv, -h * v[0] * ix_inv, -h * v[1] * ix_inv];
        let cell = |c: f64, max: f64| {
            let c = c.clamp(0.0, max + 1.0);
            let i = c.floor().min(max);
            (i as usize, c - i)
        };
        let (st, s1x) = (nx * nx, nx);
        let mut acc = 0.0;
        for k in 0..n {
            let kf = k as f64;
            let (it, ft) = cell(c0[0] + kf * dc[0], it_max);
            let (i1, f1) = cell(c0[1] + kf * dc[1], ix_max);
            let (i2, f2) = cell(c0[2] + kf * dc[2], ix_max);
            let b = (it * nx + i1) * nx + i2;
            let c = |o: usize| col[b + o];
            let lo = (1.0 - f1) * ((1.0 - f2) * c(0) + f2 * c(1)) + f1 * ((1.0 - f2) * c(s1x) + f2 * c(s1x + 1));
            let hi = (1.0 - f1) * ((1.0 - f2) * c(st) + f2 * c(st + 1))
                + f1 * ((1.0 - f2) * c(st + s1x) + f2 * c(st + s1x + 1));
            acc += (1.0 - ft) * lo + ft * hi;
        }
        acc * h
    }
}

/// Mesh-free Duhamel evaluation at an arbitrary point.
pub fn duhamel_point(
    domain: &Domain,
    source: &(impl PhaseFunction + ?Sized),
    data: &DataPair,
    t: f64,
    x: &Vec2,
    v: &Vec2,
    opts: &LinearOptions,
) -> f64 {
    let free = data.free_solution(domain, t, x, v);
    if source.is_zero() {
        free
    } else {
        free + source_integral(domain, source, t, x, v, opts.n_quad)
    }
}

/// Solve d_t F + v . grad_x F = f with F = g on Gamma_- and F(0) = h, by
/// evaluating the closed formula at every grid node.
///
/// Nodes outside the closed disk have tau_- = 0 and carry the boundary datum.
/// When the source is a Field on the same grid, interpolation reduces to
/// trilinear in (t, x) because the velocity is a grid node.
pub fn solve_linear(
    domain: &Domain,
    source: &(impl PhaseFunction + ?Sized),
    data: &DataPair,
    grid: &PhaseGrid,
    opts: &LinearOptions,
) -> Result<Field, TransportError> {
    let nv = grid.n_vel();
    let same_grid = source.as_field().filter(|f| f.grid == *grid).map(ColumnSource::new);
    let zero = source.is_zero();
    let mut values = vec![0.0; grid.len()];
    values.par_chunks_mut(nv).enumerate().try_for_each(|(tx, chunk)| {
        let (t, x) = grid.tx_point(tx);
        for (iv, out) in chunk.iter_mut().enumerate() {
            let v = grid.v_node(iv);
            let free = data.free_solution(domain, t, &x, &v);
            if !free.is_finite() {
                return Err(TransportError::NonFinite { what: "data", t, x, v });
            }
            let src = if zero {
                0.0
            } else if let Some(f) = &same_grid {
                f.integral(domain, t, &x, iv, opts.n_quad)
            } else {
                source_integral(domain, source, t, &x, &v, opts.n_quad)
            };
            if !src.is_finite() {
                return Err(TransportError::NonFinite { what: "source", t, x, v });
            }
            *out = free + src;
        }
        Ok(())
    })?;
    Ok(Field { grid: *grid, values })
}

/// Transport a Field source with zero data at the listed (t, x) nodes only,
/// writing the velocity slices into `out` (len = nodes.len() * n_vel).
pub(crate) fn transport_at_nodes(
    domain: &Domain,
    source: &Field,
    windows: Option<&[Option<Window>]>,
    nodes: &[usize],
    n_quad: usize,
    out: &mut [f64],
) {
    let grid = source.grid;
    let nv = grid.n_vel();
    let cols = match windows {
        Some(w) => ColumnSource::with_windows(source, w.to_vec()),
        None => ColumnSource::new(source),
    };
    // velocity-major sweep keeps one column in cache
    let by_v: Vec<Vec<f64>> = (0..nv)
        .into_par_iter()
        .map(|iv| {
            nodes
                .iter()
                .map(|&tx| {
                    let (t, x) = grid.tx_point(tx);
                    cols.integral(domain, t, &x, iv, n_quad)
                })
                .collect()
        })
        .collect();
    for (iv, col) in by_v.iter().enumerate() {
        for (k, val) in col.iter().enumerate() {
            out[k * nv + iv] = *val;
        }
    }
}
