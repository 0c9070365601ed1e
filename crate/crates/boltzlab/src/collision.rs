//! Collision operator for product kernels K = Phi(t, x, |v|) Psi(v, u, omega),
//! the post-collision map, the admissibility norm and the P-weight.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::dot;
use crate::transport::{PhaseFunction, PhaseGrid, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollisionError {
    #[error("omega is not a unit vector (|omega| = {0})")]
    NotUnit(f64),
    #[error("dimension mismatch between u, v and omega")]
    Shape,
    #[error("quadrature sizes invalid: {0}")]
    Quadrature(String),
    #[error("|C_Psi| = {value:e} is below the floor {floor:e}; Psi violates its lower bound near v*")]
    BelowFloor { value: f64, floor: f64 },
    #[error("unknown preset '{0}'")]
    Preset(String),
    #[error("Psi takes a negative value {0} at a sampled point")]
    Negative(f64),
}

type PhiFn = Arc<dyn Fn(f64, &Vec2, f64) -> f64 + Send + Sync>;
type PsiFn = Arc<dyn Fn(&Vec2, &Vec2, &Vec2) -> f64 + Send + Sync>;

/// The mollifier exp(1 - 1/(1 - s^2)) on (-1, 1), equal to 1 at 0.
#[inline]
pub fn bump(s: f64) -> f64 {
    let q = 1.0 - s * s;
    if q <= 0.0 {
        0.0
    } else {
        (1.0 - 1.0 / q).exp()
    }
}

/// Parameters of the Gaussian-weighted bump
/// amp * exp(-(t-tc)^2/2st^2) b((t-tc)/at) * exp(-|x-xc|^2/2sx^2) b(|x-xc|/ax).
/// Infinite widths drop the Gaussian factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpParams {
    pub amplitude: f64,
    pub t_center: f64,
    pub t_half_width: f64,
    pub t_sigma: f64,
    pub x_center: Vec2,
    pub x_radius: f64,
    pub x_sigma: f64,
}

impl BumpParams {
    #[inline]
    pub fn time_factor(&self, t: f64) -> f64 {
        let s = t - self.t_center;
        gauss(s, self.t_sigma) * bump(s / self.t_half_width)
    }

    #[inline]
    pub fn space_factor(&self, x: &Vec2) -> f64 {
        let r = ((x[0] - self.x_center[0]).powi(2) + (x[1] - self.x_center[1]).powi(2)).sqrt();
        gauss(r, self.x_sigma) * bump(r / self.x_radius)
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &Vec2) -> f64 {
        self.amplitude * self.time_factor(t) * self.space_factor(x)
    }
}

#[inline]
fn gauss(s: f64, sigma: f64) -> f64 {
    if sigma.is_infinite() {
        1.0
    } else {
        (-0.5 * (s / sigma).powi(2)).exp()
    }
}

/// The kernel factor Phi(t, x, r), radial in v.
#[derive(Clone)]
pub struct Phi {
    pub name: String,
    f: PhiFn,
    zero: bool,
    /// sup |Phi|, used for the admissibility bound.
    pub sup: f64,
    /// Support box (t_lo, t_hi, x_center, x_radius) if known.
    pub support: Option<(f64, f64, Vec2, f64)>,
    pub bump: Option<BumpParams>,
}

impl std::fmt::Debug for Phi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Phi").field("name", &self.name).field("sup", &self.sup).finish()
    }
}

impl Phi {
    pub fn zero() -> Self {
        Phi { name: "phi_zero".into(), f: Arc::new(|_, _, _| 0.0), zero: true, sup: 0.0, support: None, bump: None }
    }

    pub fn gaussian_bump(p: BumpParams) -> Self {
        Phi {
            name: "phi_gaussian_bump".into(),
            f: Arc::new(move |t, x, _| p.eval(t, x)),
            zero: p.amplitude == 0.0,
            sup: p.amplitude.abs(),
            support: Some((p.t_center - p.t_half_width, p.t_center + p.t_half_width, p.x_center, p.x_radius)),
            bump: Some(p),
        }
    }

    pub fn from_fn(name: &str, sup: f64, f: impl Fn(f64, &Vec2, f64) -> f64 + Send + Sync + 'static) -> Self {
        Phi { name: name.into(), f: Arc::new(f), zero: false, sup, support: None, bump: None }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &Vec2, r: f64) -> f64 {
        if self.zero {
            0.0
        } else {
            (self.f)(t, x, r)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// c * Phi.
    pub fn scaled(&self, c: f64) -> Self {
        let f = self.f.clone();
        Phi {
            name: self.name.clone(),
            f: Arc::new(move |t, x, r| c * f(t, x, r)),
            zero: self.zero || c == 0.0,
            sup: self.sup * c.abs(),
            support: self.support,
            bump: self.bump.map(|mut b| {
                b.amplitude *= c;
                b
            }),
        }
    }

    /// self - other, the difference driving the inverse problem.
    pub fn difference(&self, other: &Phi) -> Self {
        if other.zero {
            return self.clone();
        }
        let (a, b) = (self.clone(), other.clone());
        Phi {
            name: format!("{}-{}", self.name, other.name),
            f: Arc::new(move |t, x, r| a.eval(t, x, r) - b.eval(t, x, r)),
            zero: self.zero && other.zero,
            sup: self.sup + other.sup,
            support: None,
            bump: None,
        }
    }
}

/// The kernel factor Psi(v, u, omega) >= 0.
#[derive(Clone)]
pub struct Psi {
    pub name: String,
    f: PsiFn,
    zero: bool,
    /// Lower bound c0 on B_3(v) x S^1.
    pub c0: f64,
    /// Psi(v,u,omega) = c for all arguments.
    pub constant: Option<f64>,
}

impl std::fmt::Debug for Psi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Psi").field("name", &self.name).field("c0", &self.c0).finish()
    }
}

impl Psi {
    pub fn constant(c: f64) -> Self {
        Psi { name: "psi_constant".into(), f: Arc::new(move |_, _, _| c), zero: c == 0.0, c0: c.max(0.0), constant: Some(c) }
    }

    /// c0 (1 + beta ((u-v).omega)^2 / (1 + |u-v|^2)) m(|u-v|), where m = 1 on
    /// [0, 3] and decays smoothly to 0 at `r_cut`.
    pub fn mollified(c0: f64, beta: f64, r_cut: f64) -> Self {
        let f = move |v: &Vec2, u: &Vec2, w: &Vec2| {
            let d = [u[0] - v[0], u[1] - v[1]];
            let rr = d[0] * d[0] + d[1] * d[1];
            let p = d[0] * w[0] + d[1] * w[1];
            c0 * (1.0 + beta * p * p / (1.0 + rr)) * flat_top(rr.sqrt(), 3.0, r_cut)
        };
        Psi { name: "psi_mollified".into(), f: Arc::new(f), zero: c0 == 0.0, c0, constant: None }
    }

    pub fn from_fn(name: &str, c0: f64, f: impl Fn(&Vec2, &Vec2, &Vec2) -> f64 + Send + Sync + 'static) -> Self {
        Psi { name: name.into(), f: Arc::new(f), zero: false, c0, constant: None }
    }

    #[inline]
    pub fn eval(&self, v: &Vec2, u: &Vec2, w: &Vec2) -> f64 {
        if self.zero {
            0.0
        } else {
            (self.f)(v, u, w)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn scaled(&self, c: f64) -> Self {
        let f = self.f.clone();
        Psi {
            name: self.name.clone(),
            f: Arc::new(move |v, u, w| c * f(v, u, w)),
            zero: self.zero || c == 0.0,
            c0: self.c0 * c,
            constant: self.constant.map(|k| k * c),
        }
    }
}

/// 1 on [0, a], 0 beyond b, smooth in between.
fn flat_top(r: f64, a: f64, b: f64) -> f64 {
    if r <= a {
        1.0
    } else if r >= b {
        0.0
    } else {
        let s = (r - a) / (b - a);
        let e = |z: f64| if z <= 0.0 { 0.0 } else { (-1.0 / z).exp() };
        e(1.0 - s) / (e(1.0 - s) + e(s))
    }
}

/// K = Phi Psi with the u-ball radius and admissibility bound.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub phi: Phi,
    pub psi: Psi,
    pub r_u: f64,
    /// Bound M on sup over (t,x,v) of the u-omega integral of |K|.
    pub m_bound: f64,
}

impl KernelSpec {
    /// Builds the kernel and sets M from the closed-form bound
    /// sup|Phi| * sup|Psi| * |B_{R_u}| * |S^1| when Psi is constant, else from
    /// sup|Phi| times the quadrature of |Psi| at every grid velocity.
    pub fn new(phi: Phi, psi: Psi, r_u: f64, quad: &CollisionQuadrature, grid: &PhaseGrid) -> Self {
        let mut k = KernelSpec { phi, psi, r_u, m_bound: 0.0 };
        let m = match k.psi.constant {
            Some(c) => k.phi.sup * c.abs() * PI * r_u * r_u * 2.0 * PI,
            None => {
                let psi_sup = (0..grid.n_vel()).map(|iv| psi_abs_integral(&k.psi, quad, &grid.v_node(iv))).fold(0.0, f64::max);
                k.phi.sup * psi_sup
            }
        };
        k.m_bound = m;
        k
    }

    pub fn zero(r_u: f64) -> Self {
        KernelSpec { phi: Phi::zero(), psi: Psi::constant(1.0), r_u, m_bound: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.phi.is_zero() || self.psi.is_zero()
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &Vec2, v: &Vec2, u: &Vec2, w: &Vec2) -> f64 {
        self.phi.eval(t, x, norm2(v)) * self.psi.eval(v, u, w)
    }
}

#[inline]
pub(crate) fn norm2(v: &Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// u-nodes on the ball |u - center| <= R_u and uniform angles on S^1.
#[derive(Debug)]
pub struct CollisionQuadrature {
    pub r_u: f64,
    /// Offsets from the ball center; every node has weight `u_weight`.
    pub u_offsets: Vec<Vec2>,
    pub u_weight: f64,
    pub omegas: Vec<Vec2>,
    pub omega_weight: f64,
    clamped: AtomicU64,
}

impl Clone for CollisionQuadrature {
    fn clone(&self) -> Self {
        CollisionQuadrature {
            r_u: self.r_u,
            u_offsets: self.u_offsets.clone(),
            u_weight: self.u_weight,
            omegas: self.omegas.clone(),
            omega_weight: self.omega_weight,
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl CollisionQuadrature {
    /// Midpoint tensor rule with `n_u` nodes per axis on [-R_u, R_u]^2, nodes
    /// outside the ball dropped and weights rescaled to the ball area.
    pub fn new(n_u: usize, n_omega: usize, r_u: f64) -> Result<Self, CollisionError> {
        if n_u < 2 || n_omega < 2 || n_omega % 2 != 0 || !(r_u > 0.0) {
            return Err(CollisionError::Quadrature(format!("n_u={n_u}, n_omega={n_omega} (even), R_u={r_u}")));
        }
        let h = 2.0 * r_u / n_u as f64;
        let mut u_offsets = Vec::new();
        for i in 0..n_u {
            for j in 0..n_u {
                let p = [-r_u + (i as f64 + 0.5) * h, -r_u + (j as f64 + 0.5) * h];
                if p[0] * p[0] + p[1] * p[1] <= r_u * r_u {
                    u_offsets.push(p);
                }
            }
        }
        let u_weight = PI * r_u * r_u / u_offsets.len() as f64;
        let omegas = (0..n_omega)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n_omega as f64;
                [a.cos(), a.sin()]
            })
            .collect();
        Ok(CollisionQuadrature {
            r_u,
            u_offsets,
            u_weight,
            omegas,
            omega_weight: 2.0 * PI / n_omega as f64,
            clamped: AtomicU64::new(0),
        })
    }

    /// Number of post-collision evaluations that fell outside a velocity hull.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub(crate) fn add_clamped(&self, n: u64) {
        if n > 0 {
            self.clamped.fetch_add(n, Ordering::Relaxed);
        }
    }

    /// Angles 0..n/2; angle k + n/2 is -omega_k and yields the same (u', v').
    #[inline]
    pub fn half_omegas(&self) -> &[Vec2] {
        &self.omegas[..self.omegas.len() / 2]
    }

    pub fn omega_weight_sum(&self) -> f64 {
        self.omega_weight * self.omegas.len() as f64
    }

    pub fn u_weight_sum(&self) -> f64 {
        self.u_weight * self.u_offsets.len() as f64
    }
}

/// u' = u - [(u-v).omega] omega, v' = v + [(u-v).omega] omega in any dimension.
pub fn post_collision(u: &[f64], v: &[f64], omega: &[f64]) -> Result<(Vec<f64>, Vec<f64>), CollisionError> {
    if u.len() != v.len() || v.len() != omega.len() {
        return Err(CollisionError::Shape);
    }
    let nw = dot(omega, omega).sqrt();
    if (nw - 1.0).abs() > 1e-12 {
        return Err(CollisionError::NotUnit(nw));
    }
    let p: f64 = u.iter().zip(v).zip(omega).map(|((a, b), w)| (a - b) * w).sum();
    let up = u.iter().zip(omega).map(|(a, w)| a - p * w).collect();
    let vp = v.iter().zip(omega).map(|(b, w)| b + p * w).collect();
    Ok((up, vp))
}

#[inline]
pub(crate) fn post_collision2(u: &Vec2, v: &Vec2, w: &Vec2) -> (Vec2, Vec2) {
    let p = (u[0] - v[0]) * w[0] + (u[1] - v[1]) * w[1];
    ([u[0] - p * w[0], u[1] - p * w[1]], [v[0] + p * w[0], v[1] + p * w[1]])
}

/// Quadrature of the u-omega integral of K [F1(u')F2(v') - F1(u)F2(v)] at
/// (t, x, v), with u on the ball centered at v. Opposite angles are paired.
#[allow(clippy::too_many_arguments)]
pub fn apply_q(
    kernel: &KernelSpec,
    f1: &(impl PhaseFunction + ?Sized),
    f2: &(impl PhaseFunction + ?Sized),
    quad: &CollisionQuadrature,
    t: f64,
    x: &Vec2,
    v: &Vec2,
) -> f64 {
    let phi = kernel.phi.eval(t, x, norm2(v));
    if phi == 0.0 || kernel.psi.is_zero() {
        return 0.0;
    }
    let f2v = f2.value(t, x, v);
    let n_half = quad.omegas.len() / 2;
    let mut clamped = 0u64;
    let mut acc = 0.0;
    for off in &quad.u_offsets {
        let u = [v[0] + off[0], v[1] + off[1]];
        let f1u = f1.value(t, x, &u);
        if !f1.in_velocity_hull(&u) {
            clamped += 1;
        }
        for k in 0..n_half {
            let w = &quad.omegas[k];
            let psi = kernel.psi.eval(v, &u, w) + kernel.psi.eval(v, &u, &quad.omegas[k + n_half]);
            if psi == 0.0 {
                continue;
            }
            let (up, vp) = post_collision2(&u, v, w);
            if !f1.in_velocity_hull(&up) || !f2.in_velocity_hull(&vp) {
                clamped += 1;
            }
            acc += psi * (f1.value(t, x, &up) * f2.value(t, x, &vp) - f1u * f2v);
        }
    }
    quad.add_clamped(clamped);
    phi * acc * quad.u_weight * quad.omega_weight
}

fn psi_abs_integral(psi: &Psi, quad: &CollisionQuadrature, v: &Vec2) -> f64 {
    let mut s = 0.0;
    for off in &quad.u_offsets {
        let u = [v[0] + off[0], v[1] + off[1]];
        for w in &quad.omegas {
            s += psi.eval(v, &u, w).abs();
        }
    }
    s * quad.u_weight * quad.omega_weight
}

/// Max over the samples of the quadrature of |K| over u and omega.
pub fn admissibility_norm(kernel: &KernelSpec, quad: &CollisionQuadrature, samples: &[(f64, Vec2, Vec2)]) -> f64 {
    let mut best = 0.0_f64;
    for (t, x, v) in samples {
        let phi = kernel.phi.eval(*t, x, norm2(v)).abs();
        if phi == 0.0 {
            continue;
        }
        best = best.max(phi * psi_abs_integral(&kernel.psi, quad, v));
    }
    best
}

/// P(v*, u, omega) = (1 - e^{p^2})(e^{-p^2} - e^{-|u-v*|^2}) with p = (u-v*).omega.
pub fn p_weight(v_star: &[f64], u: &[f64], omega: &[f64]) -> Result<f64, CollisionError> {
    if v_star.len() != u.len() || u.len() != omega.len() {
        return Err(CollisionError::Shape);
    }
    let nw = dot(omega, omega).sqrt();
    if (nw - 1.0).abs() > 1e-12 {
        return Err(CollisionError::NotUnit(nw));
    }
    let w: Vec<f64> = u.iter().zip(v_star).map(|(a, b)| a - b).collect();
    Ok(p_weight_raw(dot(&w, omega), dot(&w, &w)))
}

#[inline]
pub(crate) fn p_weight_raw(p: f64, ww: f64) -> f64 {
    let p2 = p * p;
    // exp_m1 keeps both factors accurate near their zeros
    let a = -p2.exp_m1();
    let b = (-p2).exp() * -((p2 - ww).exp_m1());
    a * b
}

/// Floor c1 = c0 |Theta| |B_1| (e^{a^2} - 1)(e^{-9b^2} - e^{-1}) for n = 2,
/// Theta = {omega : a <= omega.(u-v*)/|u-v*| <= b}.
pub fn theta_floor(a: f64, b: f64, c0: f64) -> f64 {
    assert!(0.0 < a && a <= b && b < 1.0 / 3.0, "need 0 < a <= b < 1/3");
    let theta = 2.0 * (a.acos() - b.acos());
    c0 * theta * PI * (a * a).exp_m1() * ((-9.0 * b * b).exp() - (-1.0_f64).exp())
}

/// C_Psi(v*) = quadrature of Psi(v*, u, omega) P(v*, u, omega) over the ball
/// around v*, checked against the floor built from (a, b) and the kernel's c0.
pub fn psi_p_constant(
    v_star: &Vec2,
    kernel: &KernelSpec,
    quad: &CollisionQuadrature,
    a: f64,
    b: f64,
) -> Result<f64, CollisionError> {
    let c = psi_p_integral(v_star, &kernel.psi, quad);
    let floor = theta_floor(a, b, kernel.psi.c0);
    if c.abs() < floor {
        return Err(CollisionError::BelowFloor { value: c, floor });
    }
    Ok(c)
}

pub(crate) fn psi_p_integral(v_star: &Vec2, psi: &Psi, quad: &CollisionQuadrature) -> f64 {
    if psi.is_zero() {
        return 0.0;
    }
    let mut acc = 0.0;
    for off in &quad.u_offsets {
        let u = [v_star[0] + off[0], v_star[1] + off[1]];
        let ww = off[0] * off[0] + off[1] * off[1];
        for w in &quad.omegas {
            let p = off[0] * w[0] + off[1] * w[1];
            acc += psi.eval(v_star, &u, w) * p_weight_raw(p, ww);
        }
    }
    acc * quad.u_weight * quad.omega_weight
}

/// Precomputed gain/loss evaluation points for one velocity v. The bracket
/// sum W [F(u')F(v') - F(u)F(v)] is evaluated from point values of F, with
/// Psi folded into the weights (Phi is applied by the caller).
#[derive(Debug, Clone)]
pub(crate) struct BracketPlan {
    pub points: Vec<Vec2>,
    /// (index of u', index of v', weight)
    pub gain: Vec<(u32, u32, f64)>,
    /// (index of u, summed weight)
    pub loss: Vec<(u32, f64)>,
    pub v_index: u32,
}

impl BracketPlan {
    pub fn new(v: &Vec2, psi: &Psi, quad: &CollisionQuadrature) -> Self {
        let mut points = vec![*v];
        let mut gain = Vec::new();
        let mut loss = Vec::new();
        let n_half = quad.omegas.len() / 2;
        let base = quad.u_weight * quad.omega_weight;
        for off in &quad.u_offsets {
            let u = [v[0] + off[0], v[1] + off[1]];
            let ui = points.len() as u32;
            points.push(u);
            let mut wsum = 0.0;
            for k in 0..n_half {
                let w = &quad.omegas[k];
                let psi_w = base * (psi.eval(v, &u, w) + psi.eval(v, &u, &quad.omegas[k + n_half]));
                if psi_w == 0.0 {
                    continue;
                }
                let (up, vp) = post_collision2(&u, v, w);
                let i = points.len() as u32;
                points.push(up);
                points.push(vp);
                gain.push((i, i + 1, psi_w));
                wsum += psi_w;
            }
            if wsum != 0.0 {
                loss.push((ui, wsum));
            }
        }
        BracketPlan { points, gain, loss, v_index: 0 }
    }

    /// Bracket from point values f (len = points.len()).
    #[inline]
    pub fn bracket(&self, f: &[f64]) -> f64 {
        let mut g = 0.0;
        for &(i, j, w) in &self.gain {
            g += w * f[i as usize] * f[j as usize];
        }
        let mut l = 0.0;
        for &(i, w) in &self.loss {
            l += w * f[i as usize];
        }
        g - l * f[self.v_index as usize]
    }

    /// Bilinear stencils of every point on the velocity grid, with the count
    /// of points clamped to the hull.
    pub fn stencils(&self, grid: &PhaseGrid) -> (Vec<[(u32, f64); 4]>, u64) {
        let mut clamped = 0;
        let st = self
            .points
            .iter()
            .map(|p| {
                let (s, c) = grid.v_stencil(p);
                clamped += c as u64;
                s
            })
            .collect();
        (st, clamped)
    }
}
