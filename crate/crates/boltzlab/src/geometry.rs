//! The spatial domain: a ball of radius `d` in R^n, exit times along straight
//! characteristics, and quadrature on the outgoing boundary set.

use std::f64::consts::PI;

use thiserror::Error;

use crate::quad::gauss_legendre;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension must be >= 2, got {0}")]
    Dimension(usize),
    #[error("radius must be positive, got {0}")]
    Radius(f64),
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error("zero velocity has an unbounded exit time")]
    ZeroVelocity,
    #[error("point lies outside the closed domain (|x| = {0})")]
    Outside(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("quadrature counts must be >= 4")]
    Counts,
}

/// Omega = B_d in R^n on the time horizon [0, T].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub n: usize,
    pub d: f64,
    pub horizon: f64,
}

impl Domain {
    pub fn new(n: usize, d: f64, horizon: f64) -> Result<Self, GeometryError> {
        if n < 2 {
            return Err(GeometryError::Dimension(n));
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(GeometryError::Radius(d));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(GeometryError::Horizon(horizon));
        }
        Ok(Domain { n, d, horizon })
    }

    /// The planar disk used by the solver pipeline.
    pub fn disk(d: f64, horizon: f64) -> Result<Self, GeometryError> {
        Domain::new(2, d, horizon)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dot(x, x) < self.d * self.d
    }

    pub fn contains_closed(&self, x: &[f64]) -> bool {
        dot(x, x).sqrt() <= self.d * (1.0 + 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    /// tau_+: time to leave the domain moving along +v.
    Forward,
    /// tau_-: time since entering the domain, i.e. moving along -v.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// A node of the outgoing boundary rule; `weight` discretizes |n(x).v| dsigma_x dv.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySample {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub weight: f64,
    pub normal: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Positive root of |x + s w|^2 = d^2 for |x| <= d, written without cancellation.
#[inline]
fn chord_root(xw: f64, ww: f64, xx: f64, d: f64) -> f64 {
    let gap = (d * d - xx).max(0.0);
    let disc = (xw * xw + ww * gap).max(0.0).sqrt();
    if xw > 0.0 {
        gap / (xw + disc)
    } else {
        (disc - xw) / ww
    }
}

/// sup{s >= 0 : x + s v in Omega} (Forward) or sup{s >= 0 : x - s v in Omega} (Backward).
pub fn exit_time(domain: &Domain, x: &[f64], v: &[f64], sign: Sign) -> Result<f64, GeometryError> {
    if x.len() != domain.n {
        return Err(GeometryError::Shape { expected: domain.n, got: x.len() });
    }
    if v.len() != domain.n {
        return Err(GeometryError::Shape { expected: domain.n, got: v.len() });
    }
    let ww = dot(v, v);
    if ww == 0.0 {
        return Err(GeometryError::ZeroVelocity);
    }
    let xx = dot(x, x);
    if xx.sqrt() > domain.d * (1.0 + 1e-12) {
        return Err(GeometryError::Outside(xx.sqrt()));
    }
    let xv = dot(x, v);
    let xw = match sign {
        Sign::Forward => xv,
        Sign::Backward => -xv,
    };
    Ok(chord_root(xw, ww, xx, domain.d))
}

/// Backward exit time in the plane for hot loops. Points outside the closed
/// disk (beyond a relative 1e-12 slack) and the zero velocity return 0, so such
/// nodes read boundary data.
#[inline]
pub(crate) fn backward_exit_2d(x: &[f64; 2], v: &[f64; 2], d: f64) -> f64 {
    let ww = v[0] * v[0] + v[1] * v[1];
    let xx = x[0] * x[0] + x[1] * x[1];
    if ww == 0.0 || xx > d * d * (1.0 + 1e-12) {
        return 0.0;
    }
    chord_root(-(x[0] * v[0] + x[1] * v[1]), ww, xx, d)
}

/// Parameter interval where the line y + s v lies in the closed disk, if any.
pub(crate) fn line_disk_interval(y: &[f64; 2], v: &[f64; 2], d: f64) -> Option<(f64, f64)> {
    let a = v[0] * v[0] + v[1] * v[1];
    if a == 0.0 {
        return None;
    }
    let b = y[0] * v[0] + y[1] * v[1];
    let c = y[0] * y[0] + y[1] * y[1] - d * d;
    let disc = b * b - a * c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // stable pair of roots of a s^2 + 2 b s + c
    let q = -(b + b.signum() * sq);
    let (r1, r2) = if q == 0.0 { (-sq / a, sq / a) } else { (q / a, c / q) };
    Some((r1.min(r2), r1.max(r2)))
}

/// Product rule on {(x, v): x in dOmega, v.n(x) > 0, |v| <= R_v} for the disk.
///
/// Boundary points are equally spaced in angle. At each point the velocity
/// half-disk is covered in polar coordinates relative to the normal with
/// Gauss-Legendre nodes in both radius and angle, so no node is tangential.
pub fn outgoing_quadrature(
    domain: &Domain,
    n_boundary: usize,
    n_velocity: usize,
    r_v: f64,
) -> Result<Vec<BoundarySample>, GeometryError> {
    if n_boundary < 4 || n_velocity < 4 {
        return Err(GeometryError::Counts);
    }
    if domain.n != 2 {
        return Err(GeometryError::Dimension(domain.n));
    }
    let (rho, w_rho) = gauss_legendre(n_velocity, 0.0, r_v);
    let (ang, w_ang) = gauss_legendre(n_velocity, -PI / 2.0, PI / 2.0);
    let ds = 2.0 * PI * domain.d / n_boundary as f64;
    let mut out = Vec::with_capacity(n_boundary * n_velocity * n_velocity);
    for k in 0..n_boundary {
        let th = 2.0 * PI * (k as f64 + 0.5) / n_boundary as f64;
        let normal = [th.cos(), th.sin()];
        let x = vec![domain.d * normal[0], domain.d * normal[1]];
        for (r, wr) in rho.iter().zip(&w_rho) {
            for (a, wa) in ang.iter().zip(&w_ang) {
                let phi = th + a;
                let v = vec![r * phi.cos(), r * phi.sin()];
                let vn = r * a.cos();
                out.push(BoundarySample {
                    x: x.clone(),
                    v,
                    weight: vn * r * wr * wa * ds,
                    normal: normal.to_vec(),
                });
            }
        }
    }
    Ok(out)
}
