//! Light-ray extraction from second-order measurement differences, the
//! Fourier slice relation, timelike extension and inversion.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::boltzmann::{BoltzmannError, MeasureMode, MeasurementPair, MeasurementSet, OutgoingPoint, Solver, SolverOptions, TerminalPoint};
use crate::collision::{bump, norm2, psi_p_integral, theta_floor, CollisionQuadrature, Phi, Psi};
use crate::geometry::{line_disk_interval, Domain};
use crate::linearize::{second_difference, velocity_factor, LinearizeError, ProbePair, SourceOrder};
use crate::quad::gauss_legendre;
use crate::transport::Vec2;

#[derive(Debug, Error)]
pub enum RayError {
    #[error("probe parameter out of range: {0}")]
    Probe(String),
    #[error("noise level {0} outside (0, min(1, Lambda))")]
    Delta(f64),
    #[error("|C_Psi| = {value:.3e} is below the floor {floor:.3e}")]
    BelowFloor { value: f64, floor: f64 },
    #[error("measurements do not match the probe lines")]
    Shape,
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("extension fit failed: {0}")]
    Fit(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Solve(#[from] BoltzmannError),
}

/// chi(z) = b(|z| / rho) with b the unit-height mollifier and rho chosen so
/// that the integral of chi over the plane is 1. Then chi(0) = 1,
/// 0 <= chi <= 1 and supp chi is the ball of radius rho < 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chi {
    pub rho: f64,
    /// Second and fourth radial moments of chi.
    pub m2: f64,
    pub m4: f64,
}

fn radial_moment(k: i32) -> f64 {
    quadrature::integrate(|s| bump(s) * s.powi(k), 0.0, 1.0, 1e-14).integral
}

impl Chi {
    pub fn get() -> &'static Chi {
        static CHI: OnceLock<Chi> = OnceLock::new();
        CHI.get_or_init(|| {
            let rho = 1.0 / (2.0 * PI * radial_moment(1)).sqrt();
            Chi {
                rho,
                m2: 2.0 * PI * rho.powi(4) * radial_moment(3),
                m4: 2.0 * PI * rho.powi(6) * radial_moment(5),
            }
        })
    }

    #[inline]
    pub fn eval(&self, z: &Vec2) -> f64 {
        bump((z[0] * z[0] + z[1] * z[1]).sqrt() / self.rho)
    }

    /// L1 norm by a polar Gauss rule, independent of the construction.
    pub fn l1_norm(&self) -> f64 {
        let (r, wr) = gauss_legendre(64, 0.0, self.rho);
        r.iter().zip(&wr).map(|(s, w)| 2.0 * PI * s * w * bump(s / self.rho)).sum()
    }

    /// Seven-node rule for integrals against chi: the center and a regular
    /// hexagon, exact for polynomials of degree <= 5.
    pub fn seven_point(&self) -> [(Vec2, f64); 7] {
        let r = (self.m4 / self.m2).sqrt();
        let w1 = self.m2 * self.m2 / (6.0 * self.m4);
        let mut out = [([0.0, 0.0], 1.0 - 6.0 * w1); 7];
        for (k, o) in out.iter_mut().skip(1).enumerate() {
            let a = k as f64 * PI / 3.0;
            *o = ([r * a.cos(), r * a.sin()], w1);
        }
        out
    }
}

/// One localized probe at (y*, v*) with width lambda and amplitude eps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub y_star: Vec2,
    pub v_star: Vec2,
    pub lambda: f64,
    pub eps: f64,
}

impl ProbeConfig {
    pub fn new(y_star: Vec2, v_star: Vec2, lambda: f64, eps: f64, kappa: f64) -> Result<Self, RayError> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(RayError::Probe(format!("lambda = {lambda} not in (0, 1)")));
        }
        if !(eps > 0.0 && 4.0 * eps < kappa) {
            return Err(RayError::Probe(format!("eps = {eps:e} needs 0 < 4 eps < kappa = {kappa:e}")));
        }
        if norm2(&v_star) == 0.0 {
            return Err(RayError::Probe("v* = 0".into()));
        }
        let l1 = Chi::get().l1_norm();
        if (l1 - 1.0).abs() > 1e-6 {
            return Err(RayError::Probe(format!("chi has L1 norm {l1}")));
        }
        Ok(ProbeConfig { y_star, v_star, lambda, eps })
    }

    pub fn speed(&self) -> f64 {
        norm2(&self.v_star)
    }

    /// phi_lambda(y, v) = lambda^{-4} chi((y - y*)/lambda) chi((v - v*)/lambda).
    pub fn phi_lambda(&self, y: &Vec2, v: &Vec2) -> f64 {
        let chi = Chi::get();
        let l = self.lambda;
        let a = [(y[0] - self.y_star[0]) / l, (y[1] - self.y_star[1]) / l];
        let b = [(v[0] - self.v_star[0]) / l, (v[1] - self.v_star[1]) / l];
        chi.eval(&a) * chi.eval(&b) / l.powi(4)
    }

    /// psi_lambda(t, x, v) = phi_lambda(x - t v, v), constant along lines.
    pub fn psi_lambda(&self, t: f64, x: &Vec2, v: &Vec2) -> f64 {
        self.phi_lambda(&[x[0] - t * v[0], x[1] - t * v[1]], v)
    }

    /// 49 (y, v, weight) nodes integrating exactly against phi_lambda for
    /// polynomials of degree <= 5 in each variable. Weights sum to 1.
    pub fn nodes(&self) -> Vec<(Vec2, Vec2, f64)> {
        let rule = Chi::get().seven_point();
        let l = self.lambda;
        let mut out = Vec::with_capacity(49);
        for (zv, wv) in &rule {
            let v = [self.v_star[0] + l * zv[0], self.v_star[1] + l * zv[1]];
            for (zy, wy) in &rule {
                let y = [self.y_star[0] + l * zy[0], self.y_star[1] + l * zy[1]];
                out.push((y, v, wv * wy));
            }
        }
        out
    }
}

/// Where the line s -> y + s v, s in [0, T], leaves the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exit {
    /// The line misses U_T.
    Never,
    /// Still inside at t = T.
    Terminal(Vec2),
    /// Crosses the boundary outward at time t < T.
    Outgoing(f64, Vec2),
}

pub fn line_exit(domain: &Domain, y: &Vec2, v: &Vec2) -> Exit {
    let horizon = domain.horizon;
    let Some((s0, s1)) = line_disk_interval(y, v, domain.d) else {
        return Exit::Never;
    };
    if s1 <= 0.0 || s0 >= horizon {
        return Exit::Never;
    }
    if s1 >= horizon {
        Exit::Terminal([y[0] + horizon * v[0], y[1] + horizon * v[1]])
    } else {
        Exit::Outgoing(s1, [y[0] + s1 * v[0], y[1] + s1 * v[1]])
    }
}

/// Measurement points of a batch of probes with the weight each point
/// carries in the estimator of each probe.
#[derive(Debug, Clone)]
pub struct ProbeLines {
    pub set: Arc<MeasurementSet>,
    /// Per probe: (outgoing?, index into the set, weight).
    terms: Vec<Vec<(bool, usize, f64)>>,
}

impl ProbeLines {
    pub fn new(domain: &Domain, probes: &[ProbeConfig]) -> Self {
        let mut set = MeasurementSet::default();
        let terms = probes
            .iter()
            .map(|p| {
                let mut row = Vec::new();
                for (y, v, w) in p.nodes() {
                    match line_exit(domain, &y, &v) {
                        Exit::Never => {}
                        Exit::Terminal(x) => {
                            row.push((false, set.terminal.len(), w));
                            set.terminal.push(TerminalPoint { x, v });
                        }
                        Exit::Outgoing(t, x) => {
                            row.push((true, set.outgoing.len(), w));
                            set.outgoing.push(OutgoingPoint { t, x, v });
                        }
                    }
                }
                row
            })
            .collect();
        ProbeLines { set: Arc::new(set), terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn apply(&self, m: &MeasurementPair) -> Vec<f64> {
        self.terms
            .iter()
            .map(|row| row.iter().map(|&(out, i, w)| w * if out { m.outgoing[i] } else { m.terminal[i] }).sum())
            .collect()
    }
}

/// The data-computable part of the difference identity for every probe in
/// `lines`: the final-state and outgoing integrals of psi_lambda against
/// D^2 (A_K1 - A_K2). Triples are ordered (eps, eps), (eps, 0), (0, eps).
/// The unknown-kernel remainder is dropped, which costs O(eps) bias.
pub fn extract_time_integrated_source(
    m1: &[MeasurementPair; 3],
    m2: &[MeasurementPair; 3],
    eps: f64,
    lines: &ProbeLines,
) -> Result<Vec<f64>, RayError> {
    for m in m1.iter().chain(m2.iter()) {
        if m.set.outgoing.len() != lines.set.outgoing.len() || m.set.terminal.len() != lines.set.terminal.len() {
            return Err(RayError::Shape);
        }
    }
    let d1 = second_difference(&m1[0], &m1[1], &m1[2], eps, eps)?;
    let d2 = second_difference(&m2[0], &m2[1], &m2[2], eps, eps)?;
    let (a, b) = (lines.apply(&d1), lines.apply(&d2));
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Default Theta = {a <= omega.(u - v*)/|u - v*| <= b} for the floor on C_Psi.
pub const THETA: (f64, f64) = (0.1, 0.3);

/// C_Psi(v*): the integral of Psi P over u and omega, with the floor check.
pub fn psi_constant(v_star: &Vec2, psi: &Psi, quad: &CollisionQuadrature, theta: (f64, f64)) -> Result<f64, RayError> {
    let value = psi_p_integral(v_star, psi, quad);
    let floor = theta_floor(theta.0, theta.1, psi.c0);
    if !(value.abs() >= floor) {
        return Err(RayError::BelowFloor { value, floor });
    }
    Ok(value)
}

/// L_r Phi(y*, v*) = E / C_Psi(v*).
pub fn light_ray_from_source(e: f64, v_star: &Vec2, psi: &Psi, quad: &CollisionQuadrature, theta: (f64, f64)) -> Result<f64, RayError> {
    Ok(e / psi_constant(v_star, psi, quad, theta)?)
}

/// Adaptive quadrature of the line integral of Phi(s, y + s v, |v|) over
/// [0, T], clipped to the support box when the kernel records one.
pub fn light_ray_oracle(phi: &Phi, horizon: f64, y: &Vec2, v: &Vec2) -> f64 {
    if phi.is_zero() {
        return 0.0;
    }
    let r = norm2(v);
    let (mut s0, mut s1) = (0.0_f64, horizon);
    if let Some((t_lo, t_hi, xc, rad)) = phi.support {
        s0 = s0.max(t_lo);
        s1 = s1.min(t_hi);
        let yc = [y[0] - xc[0], y[1] - xc[1]];
        match line_disk_interval(&yc, v, rad) {
            Some((a, b)) => {
                s0 = s0.max(a);
                s1 = s1.min(b);
            }
            None => return 0.0,
        }
    }
    if s1 <= s0 {
        return 0.0;
    }
    quadrature::integrate(|s| phi.eval(s, &[y[0] + s * v[0], y[1] + s * v[1]], r), s0, s1, 1e-13).integral
}

/// Direct integral of the S11 difference along (t, y* + t v*, v*); the
/// verification-mode target of the estimator.
pub fn direct_source_integral(k1: &Solver, k2: &Solver, probes: &ProbePair, y_star: &Vec2, v_star: &Vec2) -> f64 {
    let horizon = k1.domain.horizon;
    let part = |s: &Solver| -> f64 {
        if s.kernel.is_zero() {
            return 0.0;
        }
        let c = velocity_factor(s, v_star, &probes.d1, &probes.d2, SourceOrder::S11).expect("probe data must depend on v only");
        c * light_ray_oracle(&s.kernel.phi, horizon, y_star, v_star)
    };
    part(k1) - part(k2)
}

/// E_delta(eps, lambda) = eps^-2 lambda^-n m delta + eps + lambda with
/// m = (kappa/8)^{n+3} / Lambda.
pub fn e_delta(eps: f64, lambda: f64, delta: f64, kappa: f64, n: i32, big_lambda: f64) -> f64 {
    let m = (kappa / 8.0).powi(n + 3) / big_lambda;
    m * delta / (eps * eps * lambda.powi(n)) + eps + lambda
}

/// (dE/deps, dE/dlambda).
pub fn e_delta_gradient(eps: f64, lambda: f64, delta: f64, kappa: f64, n: i32, big_lambda: f64) -> (f64, f64) {
    let m = (kappa / 8.0).powi(n + 3) / big_lambda;
    let a = m * delta / (eps * eps * lambda.powi(n));
    (1.0 - 2.0 * a / eps, 1.0 - n as f64 * a / lambda)
}

/// Critical point (eps, lambda) of E_delta.
pub fn optimal_probe_parameters(delta: f64, kappa: f64, n: i32, big_lambda: f64) -> Result<(f64, f64), RayError> {
    if !(delta > 0.0 && delta < 1.0_f64.min(big_lambda)) {
        return Err(RayError::Delta(delta));
    }
    let nf = n as f64;
    let p = 1.0 / (nf + 3.0);
    let s = (kappa / 8.0) * (delta / big_lambda).powf(p);
    let eps = 2f64.powf((nf + 1.0) * p) * nf.powf(-nf * p) * s;
    let lambda = 2f64.powf(-2.0 * p) * nf.powf(3.0 * p) * s;
    Ok((eps, lambda))
}

/// Index -> signed frequency number in FFT order.
#[inline]
fn fft_k(i: usize, n: usize) -> isize {
    if i <= (n - 1) / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// In-place unnormalized FFT along every axis of a row-major array.
fn fft_nd(data: &mut [Complex64], dims: &[usize], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let total = data.len();
    for ax in 0..dims.len() {
        let n = dims[ax];
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let stride: usize = dims[ax + 1..].iter().product();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for outer in 0..total / (n * stride) {
            for inner in 0..stride {
                let base = outer * n * stride + inner;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = data[base + k * stride];
                }
                fft.process(&mut buf);
                for (k, b) in buf.iter().enumerate() {
                    data[base + k * stride] = *b;
                }
            }
        }
    }
}

fn parse_header(line: &str, tag: &str) -> Result<Vec<(String, String)>, RayError> {
    let rest = line
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|l| l.strip_prefix(tag))
        .ok_or_else(|| RayError::Parse { line: 1, msg: format!("expected '# {tag} ...'") })?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| RayError::Parse { line: 1, msg: format!("bad field '{kv}'") })
        })
        .collect()
}

fn header_value<T: std::str::FromStr>(fields: &[(String, String)], key: &str) -> Result<T, RayError> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| RayError::Parse { line: 1, msg: format!("missing or bad '{key}'") })
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64, RayError> {
    tok.and_then(|s| s.parse().ok()).ok_or_else(|| RayError::Parse { line, msg: "expected a number".into() })
}

/// Samples of L_r Phi on a uniform y-grid over [-w, w)^2 for evenly spaced
/// directions of speed r. Values are direction-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LightRayField {
    pub r: f64,
    pub directions: Vec<Vec2>,
    pub n_y: usize,
    pub half_width: f64,
    pub values: Vec<f64>,
}

impl LightRayField {
    pub fn zeros(r: f64, n_dir: usize, n_y: usize, half_width: f64) -> Self {
        let directions = (0..n_dir)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n_dir as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        LightRayField { r, directions, n_y, half_width, values: vec![0.0; n_dir * n_y * n_y] }
    }

    pub fn from_fn(r: f64, n_dir: usize, n_y: usize, half_width: f64, f: impl Fn(&Vec2, &Vec2) -> f64 + Sync) -> Self {
        let mut out = LightRayField::zeros(r, n_dir, n_y, half_width);
        let ny2 = n_y * n_y;
        let dirs = out.directions.clone();
        let offsets: Vec<Vec2> = (0..ny2).map(|p| out.offset(p / n_y, p % n_y)).collect();
        out.values.par_chunks_mut(ny2).zip(&dirs).for_each(|(row, v)| {
            for (val, y) in row.iter_mut().zip(&offsets) {
                *val = f(y, v);
            }
        });
        out
    }

    #[inline]
    pub fn step(&self) -> f64 {
        2.0 * self.half_width / self.n_y as f64
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> Vec2 {
        let h = self.step();
        [-self.half_width + i as f64 * h, -self.half_width + j as f64 * h]
    }

    pub fn direction_values(&self, k: usize) -> &[f64] {
        let n = self.n_y * self.n_y;
        &self.values[k * n..(k + 1) * n]
    }

    /// Header `# lightray r=.. n_dir=.. n_y=.. half_width=..` and one row
    /// `k i j y1 y2 v1 v2 value` per sample.
    pub fn to_text(&self) -> String {
        let mut s = format!("# lightray r={} n_dir={} n_y={} half_width={}\n", self.r, self.directions.len(), self.n_y, self.half_width);
        for (k, v) in self.directions.iter().enumerate() {
            for i in 0..self.n_y {
                for j in 0..self.n_y {
                    let y = self.offset(i, j);
                    let val = self.values[(k * self.n_y + i) * self.n_y + j];
                    let _ = writeln!(s, "{k} {i} {j} {} {} {} {} {}", y[0], y[1], v[0], v[1], val);
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RayError> {
        let mut lines = text.lines();
        let fields = parse_header(lines.next().unwrap_or(""), "lightray")?;
        let r = header_value(&fields, "r")?;
        let n_dir: usize = header_value(&fields, "n_dir")?;
        let n_y: usize = header_value(&fields, "n_y")?;
        let half_width = header_value(&fields, "half_width")?;
        let mut out = LightRayField::zeros(r, n_dir, n_y, half_width);
        let mut seen = 0;
        for (ln, line) in lines.enumerate() {
            let mut tok = line.split_whitespace();
            let idx: Vec<usize> = (0..3).filter_map(|_| tok.next().and_then(|s| s.parse().ok())).collect();
            if idx.len() != 3 || idx[0] >= n_dir || idx[1] >= n_y || idx[2] >= n_y {
                return Err(RayError::Parse { line: ln + 2, msg: "bad sample index".into() });
            }
            let mut nums = [0.0; 5];
            for x in nums.iter_mut() {
                *x = parse_f64(tok.next(), ln + 2)?;
            }
            out.directions[idx[0]] = [nums[2], nums[3]];
            out.values[(idx[0] * n_y + idx[1]) * n_y + idx[2]] = nums[4];
            seen += 1;
        }
        if seen != out.values.len() {
            return Err(RayError::Parse { line: seen + 1, msg: format!("expected {} samples", out.values.len()) });
        }
        Ok(out)
    }
}

/// L_r Phi on the field's grid from the adaptive oracle.
pub fn light_ray_oracle_field(phi: &Phi, horizon: f64, r: f64, n_dir: usize, n_y: usize, half_width: f64) -> LightRayField {
    LightRayField::from_fn(r, n_dir, n_y, half_width, |y, v| light_ray_oracle(phi, horizon, y, v))
}

/// One Fourier-slice sample: Phi-hat at (tau, xi) = (-v.xi, xi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceSample {
    pub tau: f64,
    pub xi: Vec2,
    pub value: Complex64,
}

/// DFT in y of the samples for direction k, for every frequency of the
/// y-grid, placed at tau = -v.xi. Ordering follows the FFT (index = i * n + j).
pub fn fourier_slice(field: &LightRayField, k: usize) -> Vec<SliceSample> {
    let n = field.n_y;
    let h = field.step();
    let mut data: Vec<Complex64> = field.direction_values(k).iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_nd(&mut data, &[n, n], false);
    let dk = PI / field.half_width;
    let v = field.directions[k];
    let w = field.half_width;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let xi = [dk * fft_k(i, n) as f64, dk * fft_k(j, n) as f64];
            let value = data[i * n + j] * Complex64::from_polar(h * h, (xi[0] + xi[1]) * w);
            out.push(SliceSample { tau: -(v[0] * xi[0] + v[1] * xi[1]), xi, value });
        }
    }
    out
}

/// How a slab cell got its value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    /// Outside B_alpha; zero.
    Outside,
    /// Spacelike cell |tau| <= r |xi| filled from slices.
    Cone,
    /// Timelike cell filled by the extension.
    Extended,
}

/// Spectrum of Phi on the DFT grid of the box [0, T) x [-d, d)^2, in FFT
/// order (index = (it * nx + i1) * nx + i2).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSlab {
    pub nt: usize,
    pub nx: usize,
    pub horizon: f64,
    pub d: f64,
    pub r: f64,
    pub alpha: f64,
    pub values: Vec<Complex64>,
    pub mask: Vec<CellKind>,
}

impl SpectralSlab {
    pub fn zeros(nt: usize, nx: usize, horizon: f64, d: f64, r: f64, alpha: f64) -> Self {
        let len = nt * nx * nx;
        SpectralSlab { nt, nx, horizon, d, r, alpha, values: vec![Complex64::new(0.0, 0.0); len], mask: vec![CellKind::Outside; len] }
    }

    #[inline]
    pub fn index(&self, it: usize, i1: usize, i2: usize) -> usize {
        (it * self.nx + i1) * self.nx + i2
    }

    pub fn tau(&self, it: usize) -> f64 {
        2.0 * PI * fft_k(it, self.nt) as f64 / self.horizon
    }

    pub fn xi(&self, i: usize) -> f64 {
        PI * fft_k(i, self.nx) as f64 / self.d
    }

    /// |(tau, xi)| of a cell.
    pub fn radius(&self, it: usize, i1: usize, i2: usize) -> f64 {
        (self.tau(it).powi(2) + self.xi(i1).powi(2) + self.xi(i2).powi(2)).sqrt()
    }

    /// Index of the cell at minus the frequency (FFT-periodic).
    fn mirror(&self, it: usize, i1: usize, i2: usize) -> usize {
        let m = |i: usize, n: usize| (n - i) % n;
        self.index(m(it, self.nt), m(i1, self.nx), m(i2, self.nx))
    }

    /// max |S(-z) - conj S(z)| / max |S|.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut peak: f64 = 0.0;
        for it in 0..self.nt {
            for i1 in 0..self.nx {
                for i2 in 0..self.nx {
                    let a = self.values[self.index(it, i1, i2)];
                    let b = self.values[self.mirror(it, i1, i2)];
                    worst = worst.max((a - b.conj()).norm());
                    peak = peak.max(a.norm());
                }
            }
        }
        if peak == 0.0 {
            0.0
        } else {
            worst / peak
        }
    }

    fn symmetrize(&mut self) {
        let old = self.values.clone();
        for it in 0..self.nt {
            for i1 in 0..self.nx {
                for i2 in 0..self.nx {
                    let k = self.index(it, i1, i2);
                    self.values[k] = 0.5 * (old[k] + old[self.mirror(it, i1, i2)].conj());
                }
            }
        }
    }

    /// Header `# slab nt=.. nx=.. horizon=.. d=.. r=.. alpha=..` and rows
    /// `it i1 i2 tau xi1 xi2 re im kind` with kind in {outside, cone, extended}.
    pub fn to_text(&self) -> String {
        let mut s = format!("# slab nt={} nx={} horizon={} d={} r={} alpha={}\n", self.nt, self.nx, self.horizon, self.d, self.r, self.alpha);
        for it in 0..self.nt {
            for i1 in 0..self.nx {
                for i2 in 0..self.nx {
                    let k = self.index(it, i1, i2);
                    let kind = match self.mask[k] {
                        CellKind::Outside => "outside",
                        CellKind::Cone => "cone",
                        CellKind::Extended => "extended",
                    };
                    let v = self.values[k];
                    let _ = writeln!(s, "{it} {i1} {i2} {} {} {} {} {} {kind}", self.tau(it), self.xi(i1), self.xi(i2), v.re, v.im);
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RayError> {
        let mut lines = text.lines();
        let f = parse_header(lines.next().unwrap_or(""), "slab")?;
        let mut out = SpectralSlab::zeros(
            header_value(&f, "nt")?,
            header_value(&f, "nx")?,
            header_value(&f, "horizon")?,
            header_value(&f, "d")?,
            header_value(&f, "r")?,
            header_value(&f, "alpha")?,
        );
        let mut seen = 0;
        for (ln, line) in lines.enumerate() {
            let l = ln + 2;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 9 {
                return Err(RayError::Parse { line: l, msg: "expected 9 columns".into() });
            }
            let idx: Vec<usize> = tok[..3].iter().filter_map(|s| s.parse().ok()).collect();
            if idx.len() != 3 || idx[0] >= out.nt || idx[1] >= out.nx || idx[2] >= out.nx {
                return Err(RayError::Parse { line: l, msg: "bad cell index".into() });
            }
            let k = out.index(idx[0], idx[1], idx[2]);
            out.values[k] = Complex64::new(parse_f64(Some(tok[6]), l)?, parse_f64(Some(tok[7]), l)?);
            out.mask[k] = match tok[8] {
                "outside" => CellKind::Outside,
                "cone" => CellKind::Cone,
                "extended" => CellKind::Extended,
                other => return Err(RayError::Parse { line: l, msg: format!("unknown cell kind '{other}'") }),
            };
            seen += 1;
        }
        if seen != out.values.len() {
            return Err(RayError::Parse { line: seen + 1, msg: format!("expected {} cells", out.values.len()) });
        }
        Ok(out)
    }
}

/// Slab size and the penalty weights of the pixel extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtensionConfig {
    pub nt: usize,
    pub nx: usize,
    pub alpha: f64,
    /// Tikhonov weight on the identity.
    pub w_id: f64,
    /// Weights on squared forward differences in t and in x.
    pub w_t: f64,
    pub w_x: f64,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        ExtensionConfig { nt: 16, nx: 16, alpha: 60.0, w_id: 1e-6, w_t: 1e-5, w_x: 1e-5 }
    }
}

/// Field on the grid t_i = i T / nt, x_j = -d + j 2d / nx (row-major
/// (it, j1, j2)). Values outside the open disk are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub nt: usize,
    pub nx: usize,
    pub horizon: f64,
    pub d: f64,
    pub values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(nt: usize, nx: usize, horizon: f64, d: f64) -> Self {
        SpaceTimeField { nt, nx, horizon, d, values: vec![0.0; nt * nx * nx] }
    }

    pub fn from_fn(nt: usize, nx: usize, horizon: f64, d: f64, f: impl Fn(f64, &Vec2) -> f64) -> Self {
        let mut out = SpaceTimeField::zeros(nt, nx, horizon, d);
        for it in 0..nt {
            for j1 in 0..nx {
                for j2 in 0..nx {
                    let (t, x) = out.point(it, j1, j2);
                    if out.inside(&x) {
                        out.values[(it * nx + j1) * nx + j2] = f(t, &x);
                    }
                }
            }
        }
        out
    }

    pub fn point(&self, it: usize, j1: usize, j2: usize) -> (f64, Vec2) {
        let hx = 2.0 * self.d / self.nx as f64;
        (it as f64 * self.horizon / self.nt as f64, [-self.d + j1 as f64 * hx, -self.d + j2 as f64 * hx])
    }

    #[inline]
    fn inside(&self, x: &Vec2) -> bool {
        x[0] * x[0] + x[1] * x[1] < self.d * self.d
    }

    fn cell_volume(&self) -> f64 {
        let hx = 2.0 * self.d / self.nx as f64;
        self.horizon / self.nt as f64 * hx * hx
    }

    /// Continuous Fourier transform on the slab grid by the Riemann sum.
    pub fn spectrum(&self) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = self.values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft_nd(&mut data, &[self.nt, self.nx, self.nx], false);
        let dv = self.cell_volume();
        let dk = PI / self.d;
        for i1 in 0..self.nx {
            for i2 in 0..self.nx {
                let ph = Complex64::from_polar(dv, dk * (fft_k(i1, self.nx) + fft_k(i2, self.nx)) as f64 * self.d);
                for it in 0..self.nt {
                    data[(it * self.nx + i1) * self.nx + i2] *= ph;
                }
            }
        }
        data
    }
}

/// Cone samples grouped by slab xi cell: (tau, value) lists for cells
/// (i1, i2), from every direction of the light-ray field.
fn slab_samples(field: &LightRayField, slab: &SpectralSlab) -> Result<Vec<Vec<(f64, Complex64)>>, RayError> {
    let ratio = field.half_width / slab.d;
    let q = ratio.round() as usize;
    if (ratio - q as f64).abs() > 1e-9 || q == 0 {
        return Err(RayError::Grid(format!("y half width {} is not a multiple of d = {}", field.half_width, slab.d)));
    }
    if field.n_y < q * slab.nx {
        return Err(RayError::Grid(format!("{} y nodes cannot resolve {} x frequencies", field.n_y, slab.nx)));
    }
    let nx = slab.nx;
    let per_dir: Vec<Vec<SliceSample>> = (0..field.directions.len()).into_par_iter().map(|k| fourier_slice(field, k)).collect();
    let mut cells = vec![Vec::with_capacity(field.directions.len()); nx * nx];
    let ny = field.n_y as isize;
    for sl in &per_dir {
        for i1 in 0..nx {
            for i2 in 0..nx {
                let yi = |i: usize| (fft_k(i, nx) * q as isize).rem_euclid(ny) as usize;
                let s = sl[yi(i1) * field.n_y + yi(i2)];
                cells[i1 * nx + i2].push((s.tau, s.value));
            }
        }
    }
    Ok(cells)
}

/// Linear interpolation in tau, clamped at the ends; coincident nodes are
/// averaged.
fn interp_tau(samples: &[(f64, Complex64)], tau: f64) -> Complex64 {
    let mut s: Vec<(f64, Complex64)> = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, Complex64, f64)> = Vec::new();
    for (t, v) in s {
        match merged.last_mut() {
            Some(m) if (t - m.0).abs() <= 1e-12 * (1.0 + t.abs()) => {
                m.1 += v;
                m.2 += 1.0;
            }
            _ => merged.push((t, v, 1.0)),
        }
    }
    let pts: Vec<(f64, Complex64)> = merged.into_iter().map(|(t, v, c)| (t, v / c)).collect();
    if tau <= pts[0].0 {
        return pts[0].1;
    }
    if tau >= pts[pts.len() - 1].0 {
        return pts[pts.len() - 1].1;
    }
    let k = pts.partition_point(|p| p.0 <= tau);
    let (a, b) = (pts[k - 1], pts[k]);
    let f = (tau - a.0) / (b.0 - a.0);
    a.1 * (1.0 - f) + b.1 * f
}

/// Scatter the slices onto the slab, keep the spacelike cells in B_alpha
/// and fill the timelike ones from a penalized least-squares surrogate:
/// a pixel field on (0, T) x Omega whose exact DFT matches every slice
/// sample in B_alpha. The result is made Hermitian.
pub fn assemble_and_extend(field: &LightRayField, domain: &Domain, cfg: &ExtensionConfig) -> Result<SpectralSlab, RayError> {
    let mut slab = SpectralSlab::zeros(cfg.nt, cfg.nx, domain.horizon, domain.d, field.r, cfg.alpha);
    let cells = slab_samples(field, &slab)?;
    let (nt, nx) = (cfg.nt, cfg.nx);

    for i1 in 0..nx {
        for i2 in 0..nx {
            let rxi = field.r * slab.xi(i1).hypot(slab.xi(i2));
            for it in 0..nt {
                if slab.tau(it).abs() <= rxi + 1e-12 && slab.radius(it, i1, i2) <= cfg.alpha {
                    let k = slab.index(it, i1, i2);
                    slab.values[k] = interp_tau(&cells[i1 * nx + i2], slab.tau(it));
                    slab.mask[k] = CellKind::Cone;
                }
            }
        }
    }

    let model = fit_pixels(&cells, &slab, cfg)?;
    let spec = model.spectrum();
    for it in 0..nt {
        for i1 in 0..nx {
            for i2 in 0..nx {
                let k = slab.index(it, i1, i2);
                if slab.mask[k] != CellKind::Cone && slab.radius(it, i1, i2) <= cfg.alpha {
                    slab.values[k] = spec[k];
                    slab.mask[k] = CellKind::Extended;
                }
            }
        }
    }
    slab.symmetrize();
    Ok(slab)
}

fn fit_pixels(cells: &[Vec<(f64, Complex64)>], slab: &SpectralSlab, cfg: &ExtensionConfig) -> Result<SpaceTimeField, RayError> {
    let (nt, nx) = (cfg.nt, cfg.nx);
    let mut model = SpaceTimeField::zeros(nt, nx, slab.horizon, slab.d);
    let ht = slab.horizon / nt as f64;
    let hx = 2.0 * slab.d / nx as f64;
    let dv = ht * hx * hx;

    // unknowns: grid points with 0 < t < T and |x| < d
    let mut pix: Vec<(usize, usize, usize)> = Vec::new();
    let mut id = vec![usize::MAX; nt * nx * nx];
    for it in 1..nt {
        for j1 in 0..nx {
            for j2 in 0..nx {
                let (_, x) = model.point(it, j1, j2);
                if model.inside(&x) {
                    id[(it * nx + j1) * nx + j2] = pix.len();
                    pix.push((it, j1, j2));
                }
            }
        }
    }
    let n = pix.len();
    if n == 0 {
        return Err(RayError::Fit("no unknowns".into()));
    }

    // samples inside B_alpha, per xi cell
    let used: Vec<(Vec2, Vec<(f64, Complex64)>)> = (0..nx * nx)
        .map(|c| {
            let xi = [slab.xi(c / nx), slab.xi(c % nx)];
            let keep = cells[c].iter().copied().filter(|(t, _)| (t * t + xi[0] * xi[0] + xi[1] * xi[1]).sqrt() <= cfg.alpha).collect();
            (xi, keep)
        })
        .filter(|(_, s): &(Vec2, Vec<_>)| !s.is_empty())
        .collect();
    let rows: usize = used.iter().map(|(_, s)| s.len()).sum();
    if rows == 0 {
        return Err(RayError::Fit("no spectral samples inside B_alpha".into()));
    }

    // normal matrix N[p,q] = Re sum_s e^{i(tau dt + xi.dx)} dV^2 depends only
    // on index differences
    let (mt, mx) = (2 * nt - 1, 2 * nx - 1);
    let table: Vec<f64> = (0..mt * mx * mx)
        .into_par_iter()
        .map(|k| {
            let dt = (k / (mx * mx)) as f64 - (nt - 1) as f64;
            let d1 = ((k / mx) % mx) as f64 - (nx - 1) as f64;
            let d2 = (k % mx) as f64 - (nx - 1) as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            for (xi, s) in &used {
                let a: Complex64 = s.iter().map(|(tau, _)| Complex64::from_polar(1.0, tau * dt * ht)).sum();
                acc += a * Complex64::from_polar(1.0, (xi[0] * d1 + xi[1] * d2) * hx);
            }
            acc.re * dv * dv
        })
        .collect();
    let lookup = |p: &(usize, usize, usize), q: &(usize, usize, usize)| {
        let a = p.0 + nt - 1 - q.0;
        let b = p.1 + nx - 1 - q.1;
        let c = p.2 + nx - 1 - q.2;
        table[(a * mx + b) * mx + c]
    };
    let mut m = DMatrix::<f64>::from_fn(n, n, |i, j| lookup(&pix[i], &pix[j]));
    let rhs = DVector::<f64>::from_iterator(
        n,
        pix.iter().map(|&(it, j1, j2)| {
            let (t, x) = model.point(it, j1, j2);
            let mut acc = Complex64::new(0.0, 0.0);
            for (xi, s) in &used {
                let b: Complex64 = s.iter().map(|(tau, val)| val * Complex64::from_polar(1.0, tau * t)).sum();
                acc += b * Complex64::from_polar(1.0, xi[0] * x[0] + xi[1] * x[1]);
            }
            acc.re * dv
        }),
    );

    // penalty tr(N)/n (w_id I + w_t Dt'Dt ht^2 + w_x Dx'Dx hx^2), forward
    // differences over every grid pair touching an unknown
    let scale = m.trace() / n as f64;
    for i in 0..n {
        m[(i, i)] += scale * cfg.w_id;
    }
    let mut pair = |a: usize, b: usize, w: f64| {
        let (ia, ib) = (id[a], id[b]);
        if ia != usize::MAX {
            m[(ia, ia)] += w;
        }
        if ib != usize::MAX {
            m[(ib, ib)] += w;
        }
        if ia != usize::MAX && ib != usize::MAX {
            m[(ia, ib)] -= w;
            m[(ib, ia)] -= w;
        }
    };
    let flat = |it: usize, j1: usize, j2: usize| (it * nx + j1) * nx + j2;
    for it in 0..nt {
        for j1 in 0..nx {
            for j2 in 0..nx {
                let a = flat(it, j1, j2);
                if it + 1 < nt {
                    pair(a, flat(it + 1, j1, j2), scale * cfg.w_t);
                }
                if j1 + 1 < nx {
                    pair(a, flat(it, j1 + 1, j2), scale * cfg.w_x);
                }
                if j2 + 1 < nx {
                    pair(a, flat(it, j1, j2 + 1), scale * cfg.w_x);
                }
            }
        }
    }
    let chol = m.cholesky().ok_or_else(|| RayError::Fit("normal matrix is not positive definite".into()))?;
    let u = chol.solve(&rhs);
    for (k, &(it, j1, j2)) in pix.iter().enumerate() {
        model.values[flat(it, j1, j2)] = u[k];
    }
    Ok(model)
}

/// Reconstruction with the norm of the discarded imaginary part relative
/// to the real part.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub field: SpaceTimeField,
    pub imag_residue: f64,
}

/// Inverse DFT of the slab, restricted to the grid points of (0, T) x Omega.
pub fn invert_spectrum(slab: &SpectralSlab) -> Inversion {
    let (nt, nx) = (slab.nt, slab.nx);
    let mut data = slab.values.clone();
    let dk = PI / slab.d;
    for i1 in 0..nx {
        for i2 in 0..nx {
            let ph = Complex64::from_polar(1.0, -dk * (fft_k(i1, nx) + fft_k(i2, nx)) as f64 * slab.d);
            for it in 0..nt {
                data[(it * nx + i1) * nx + i2] *= ph;
            }
        }
    }
    fft_nd(&mut data, &[nt, nx, nx], true);
    let norm = 1.0 / (slab.horizon * 4.0 * slab.d * slab.d);
    let mut field = SpaceTimeField::zeros(nt, nx, slab.horizon, slab.d);
    let (mut re2, mut im2) = (0.0, 0.0);
    for it in 0..nt {
        for j1 in 0..nx {
            for j2 in 0..nx {
                let k = (it * nx + j1) * nx + j2;
                let z = data[k] * norm;
                re2 += z.re * z.re;
                im2 += z.im * z.im;
                let (_, x) = field.point(it, j1, j2);
                if field.inside(&x) {
                    field.values[k] = z.re;
                }
            }
        }
    }
    let imag_residue = if re2 > 0.0 { (im2 / re2).sqrt() } else { im2.sqrt() };
    Inversion { field, imag_residue }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorNorms {
    pub h_minus1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl ErrorNorms {
    /// Norms of f itself (H^-1 via Plancherel with weight (1 + |z|^2)^-1).
    pub fn of(f: &SpaceTimeField) -> ErrorNorms {
        let dv = f.cell_volume();
        let l2 = (f.values.iter().map(|x| x * x).sum::<f64>() * dv).sqrt();
        let linf = f.values.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let spec = f.spectrum();
        let scale = 1.0 / (f.horizon * 4.0 * f.d * f.d);
        let template = SpectralSlab::zeros(f.nt, f.nx, f.horizon, f.d, 1.0, 0.0);
        let mut h = 0.0;
        for it in 0..f.nt {
            for i1 in 0..f.nx {
                for i2 in 0..f.nx {
                    let z2 = template.radius(it, i1, i2).powi(2);
                    h += spec[template.index(it, i1, i2)].norm_sqr() / (1.0 + z2);
                }
            }
        }
        ErrorNorms { h_minus1: (h * scale).sqrt(), l2, linf }
    }

    /// Each norm divided by the same norm of `reference`.
    pub fn relative_to(&self, reference: &ErrorNorms) -> ErrorNorms {
        let q = |a: f64, b: f64| if b == 0.0 { a } else { a / b };
        ErrorNorms { h_minus1: q(self.h_minus1, reference.h_minus1), l2: q(self.l2, reference.l2), linf: q(self.linf, reference.linf) }
    }
}

/// Absolute norms of rec - truth on their common grid.
pub fn error_norms(rec: &SpaceTimeField, truth: &SpaceTimeField) -> Result<ErrorNorms, RayError> {
    if rec.nt != truth.nt || rec.nx != truth.nx || rec.horizon != truth.horizon || rec.d != truth.d {
        return Err(RayError::Grid("reconstruction and truth grids differ".into()));
    }
    let diff = SpaceTimeField { values: rec.values.iter().zip(&truth.values).map(|(a, b)| a - b).collect(), ..truth.clone() };
    Ok(ErrorNorms::of(&diff))
}

/// Rule for the spectral cutoff alpha.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaRule {
    Fixed(f64),
    /// alpha = mu / ((3 - 2 mu)(n + 3)) |log delta|, capped; the cap is used
    /// at delta = 0.
    LogDelta { mu: f64, cap: f64 },
}

impl AlphaRule {
    pub fn value(&self, delta: f64, n: usize) -> f64 {
        match *self {
            AlphaRule::Fixed(a) => a,
            AlphaRule::LogDelta { mu, cap } => {
                if delta <= 0.0 {
                    cap
                } else {
                    (mu / ((3.0 - 2.0 * mu) * (n as f64 + 3.0)) * delta.ln().abs()).min(cap)
                }
            }
        }
    }
}

/// Settings of the light-ray estimator and reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconConfig {
    pub r: f64,
    pub n_dir: usize,
    pub n_y: usize,
    pub half_width: f64,
    pub lambda: f64,
    /// Probe amplitude; None uses kappa / 16.
    pub eps: Option<f64>,
    pub theta: (f64, f64),
    pub alpha: AlphaRule,
    pub extension: ExtensionConfig,
    pub n_quad: usize,
    pub solver: SolverOptions,
    /// Lambda in the critical-point formulas.
    pub big_lambda: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            r: 1.0,
            n_dir: 64,
            n_y: 32,
            half_width: 2.0,
            lambda: 0.1,
            eps: None,
            theta: THETA,
            alpha: AlphaRule::Fixed(60.0),
            extension: ExtensionConfig::default(),
            n_quad: 64,
            solver: SolverOptions { full_field: false, ..SolverOptions::default() },
            big_lambda: 10.0,
        }
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Measurement triple (eps, eps), (eps, 0), (0, eps) on the probe lines.
fn measure_triple(solver: &Solver, probes: &ProbePair, lines: &ProbeLines, eps: f64, n_quad: usize, opts: &SolverOptions) -> Result<[MeasurementPair; 3], RayError> {
    let amps = [(eps, eps), (eps, 0.0), (0.0, eps)];
    let mut out = Vec::with_capacity(3);
    for (a, b) in amps {
        let sol = solver.solve(&probes.data(a, b), opts)?;
        out.push(solver.measure_with(&sol, &lines.set, n_quad, MeasureMode::Auto));
    }
    Ok(out.try_into().expect("three amplitudes"))
}

/// Estimated L_r (Phi1 - Phi2) on the probe grid of `cfg`. Noise of size
/// delta is added to the K1 measurements; `lambda` and `eps` override cfg.
pub fn estimate_light_rays(k1: &Solver, k2: &Solver, cfg: &ReconConfig, eps: f64, lambda: f64, delta: f64, seed: u64) -> Result<LightRayField, RayError> {
    let domain = k1.domain;
    let kappa = k1.regime.kappa;
    let mut field = LightRayField::zeros(cfg.r, cfg.n_dir, cfg.n_y, cfg.half_width);
    let ny2 = cfg.n_y * cfg.n_y;
    for k in 0..cfg.n_dir {
        let v_star = field.directions[k];
        let probe_grid: Vec<ProbeConfig> =
            (0..ny2).map(|p| ProbeConfig::new(field.offset(p / cfg.n_y, p % cfg.n_y), v_star, lambda, eps, kappa)).collect::<Result<_, _>>()?;
        let lines = ProbeLines::new(&domain, &probe_grid);
        let probes = ProbePair::gaussian_constant(&domain, &k1.grid, v_star, eps, eps)?;
        probes.check_guard(kappa)?;
        let mut m1 = measure_triple(k1, &probes, &lines, eps, cfg.n_quad, &cfg.solver)?;
        if delta > 0.0 {
            for (j, m) in m1.iter_mut().enumerate() {
                *m = crate::boltzmann::add_noise(m, delta, mix_seed(seed, 3 * k as u64 + j as u64));
            }
        }
        let m2 = measure_triple(k2, &probes, &lines, eps, cfg.n_quad, &cfg.solver)?;
        let e = extract_time_integrated_source(&m1, &m2, eps, &lines)?;
        let c = psi_constant(&v_star, &k1.kernel.psi, &k1.quad, cfg.theta)?;
        for (dst, val) in field.values[k * ny2..(k + 1) * ny2].iter_mut().zip(e) {
            *dst = val / c;
        }
    }
    Ok(field)
}

#[derive(Debug, Clone)]
pub struct ReconOutcome {
    pub eps: f64,
    pub lambda: f64,
    pub delta: f64,
    pub lightray: LightRayField,
    pub slab: SpectralSlab,
    pub inversion: Inversion,
    pub truth: SpaceTimeField,
    /// Error norms relative to the norms of the truth.
    pub errors: ErrorNorms,
}

/// Full pipeline at one noise level: estimate light rays, assemble and
/// extend the spectrum, invert, compare with Phi1 - Phi2.
pub fn reconstruct(k1: &Solver, k2: &Solver, cfg: &ReconConfig, eps: f64, lambda: f64, delta: f64, seed: u64) -> Result<ReconOutcome, RayError> {
    let lightray = estimate_light_rays(k1, k2, cfg, eps, lambda, delta, seed)?;
    let domain = k1.domain;
    let ext = ExtensionConfig { alpha: cfg.alpha.value(delta, domain.n), ..cfg.extension };
    let slab = assemble_and_extend(&lightray, &domain, &ext)?;
    let inversion = invert_spectrum(&slab);
    let diff = k1.kernel.phi.difference(&k2.kernel.phi);
    let truth = SpaceTimeField::from_fn(ext.nt, ext.nx, domain.horizon, domain.d, |t, x| diff.eval(t, x, cfg.r));
    let errors = error_norms(&inversion.field, &truth)?.relative_to(&ErrorNorms::of(&truth));
    Ok(ReconOutcome { eps, lambda, delta, lightray, slab, inversion, truth, errors })
}

/// One row of the stability table; `error` holds the failing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta: f64,
    pub eps: f64,
    pub lambda: f64,
    pub errors: Option<ErrorNorms>,
    pub error: Option<String>,
}

/// Pipeline per delta with the critical-point (eps, lambda).
pub fn stability_sweep(k1: &Solver, k2: &Solver, cfg: &ReconConfig, deltas: &[f64], seed: u64) -> Vec<SweepRow> {
    let kappa = k1.regime.kappa;
    let n = k1.domain.n as i32;
    deltas
        .iter()
        .map(|&delta| {
            let params = if delta == 0.0 {
                Ok((cfg.eps.unwrap_or(kappa / 16.0), cfg.lambda))
            } else {
                optimal_probe_parameters(delta, kappa, n, cfg.big_lambda)
            };
            match params.and_then(|(eps, lambda)| reconstruct(k1, k2, cfg, eps, lambda, delta, seed).map(|o| (eps, lambda, o))) {
                Ok((eps, lambda, o)) => SweepRow { delta, eps, lambda, errors: Some(o.errors), error: None },
                Err(e) => SweepRow { delta, eps: f64::NAN, lambda: f64::NAN, errors: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Whether a column is non-increasing in order, allowing `slack` inversions.
pub fn non_increasing(values: &[f64], slack: usize) -> bool {
    values.windows(2).filter(|w| w[1] > w[0]).count() <= slack
}
