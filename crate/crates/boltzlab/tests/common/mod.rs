#![allow(dead_code)]

use std::sync::Arc;

use boltzlab::boltzmann::{Regime, Solver};
use boltzlab::collision::{BumpParams, CollisionQuadrature, KernelSpec, Phi, Psi};
use boltzlab::geometry::Domain;
use boltzlab::transport::PhaseGrid;

pub const R_V: f64 = 4.0;

pub fn bump_params() -> BumpParams {
    BumpParams {
        amplitude: 1.0,
        t_center: 0.5,
        t_half_width: 0.3,
        t_sigma: f64::INFINITY,
        x_center: [0.0, 0.0],
        x_radius: 0.6,
        x_sigma: f64::INFINITY,
    }
}

pub fn bump_phi() -> Phi {
    Phi::gaussian_bump(bump_params())
}

pub struct Desk {
    pub domain: Domain,
    pub grid: PhaseGrid,
    pub quad: Arc<CollisionQuadrature>,
    pub k1: Solver,
    pub k2: Solver,
}

pub fn desk_with(phi: Phi, psi: Psi) -> Desk {
    let domain = Domain::disk(1.0, 1.0).unwrap();
    let grid = PhaseGrid::new(&domain, 64, 16, 8, R_V).unwrap();
    let quad = Arc::new(CollisionQuadrature::new(8, 16, R_V).unwrap());
    let kernel = KernelSpec::new(phi, psi, R_V, &quad, &grid);
    let regime = Regime::select(kernel.m_bound, 1.0, 0.9);
    let k1 = Solver::new(domain, grid, kernel, quad.clone(), regime);
    let k2 = Solver::new(domain, grid, KernelSpec::zero(R_V), quad.clone(), regime);
    Desk { domain, grid, quad, k1, k2 }
}

pub fn desk() -> Desk {
    desk_with(bump_phi(), Psi::constant(1.0))
}
