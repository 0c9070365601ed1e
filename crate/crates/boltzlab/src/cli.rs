//! Experiment configuration, the canonical runs and report files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boltzmann::{MeasurementSet, Regime, Solver, SolverOptions};
use crate::collision::{BumpParams, CollisionQuadrature, KernelSpec, Phi, Psi};
use crate::geometry::{outgoing_quadrature, Domain};
use crate::linearize::{integral_identity_check, remainder_order_study, IdentityConfig, ProbePair};
use crate::rayrecover::{non_increasing, reconstruct, stability_sweep, AlphaRule, ExtensionConfig, RayError, ReconConfig};
use crate::transport::{DataPair, PhaseGrid, Vec2};

/// Environment variable giving the default worker count.
pub const WORKERS_ENV: &str = "BOLTZLAB_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {msg}")]
    Stage { stage: &'static str, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Stage { stage, msg: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Forward,
    ExpandCheck,
    IdentityCheck,
    Reconstruct,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub n: usize,
    pub d: f64,
    pub horizon: f64,
    pub r_v: f64,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection { n: 2, d: 1.0, horizon: 1.0, r_v: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub t_steps: usize,
    pub nx: usize,
    pub nv: usize,
    pub n_u: usize,
    pub n_omega: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { t_steps: 64, nx: 16, nv: 8, n_u: 8, n_omega: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiPreset {
    Zero,
    Bump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiPreset {
    Constant,
    Mollified,
}

/// Phi preset with the bump parameters (infinite sigma drops the Gaussian;
/// write sigma = inf in TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhiSection {
    pub preset: PhiPreset,
    pub amplitude: f64,
    pub t_center: f64,
    pub t_half_width: f64,
    pub t_sigma: f64,
    pub x_center: Vec2,
    pub x_radius: f64,
    pub x_sigma: f64,
}

impl PhiSection {
    fn zero() -> Self {
        PhiSection { preset: PhiPreset::Zero, ..PhiSection::default() }
    }

    pub fn build(&self) -> Phi {
        match self.preset {
            PhiPreset::Zero => Phi::zero(),
            PhiPreset::Bump => Phi::gaussian_bump(BumpParams {
                amplitude: self.amplitude,
                t_center: self.t_center,
                t_half_width: self.t_half_width,
                t_sigma: self.t_sigma,
                x_center: self.x_center,
                x_radius: self.x_radius,
                x_sigma: self.x_sigma,
            }),
        }
    }
}

impl Default for PhiSection {
    fn default() -> Self {
        PhiSection {
            preset: PhiPreset::Bump,
            amplitude: 1.0,
            t_center: 0.5,
            t_half_width: 0.3,
            t_sigma: f64::INFINITY,
            x_center: [0.0, 0.0],
            x_radius: 0.6,
            x_sigma: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiSection {
    pub preset: PsiPreset,
    pub c0: f64,
    pub beta: f64,
    pub r_cut: f64,
}

impl PsiSection {
    pub fn build(&self) -> Psi {
        match self.preset {
            PsiPreset::Constant => Psi::constant(self.c0),
            PsiPreset::Mollified => Psi::mollified(self.c0, self.beta, self.r_cut),
        }
    }
}

impl Default for PsiSection {
    fn default() -> Self {
        PsiSection { preset: PsiPreset::Constant, c0: 1.0, beta: 0.5, r_cut: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    pub n_quad: usize,
    /// Fraction of the largest admissible kappa.
    pub safety: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection { tol: 1e-10, max_iter: 50, n_quad: 64, safety: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataPreset {
    Constant,
    Gaussian,
    Probe,
}

/// Probe settings. eps = 0 means kappa / 16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub r: f64,
    pub lambda: f64,
    pub eps: f64,
    pub v_star: Vec2,
    /// Data for the forward run.
    pub data: DataPreset,
    /// Forward data amplitude as a fraction of kappa.
    pub amplitude: f64,
    /// Divisors of kappa for the expansion study.
    pub eps_divisors: Vec<f64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            r: 1.0,
            lambda: 0.1,
            eps: 0.0,
            v_star: [1.0, 0.0],
            data: DataPreset::Probe,
            amplitude: 0.125,
            eps_divisors: vec![8.0, 16.0, 32.0, 64.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Noise level of the single reconstruction.
    pub delta: f64,
    pub deltas: Vec<f64>,
    pub seed: u64,
    pub big_lambda: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { delta: 0.0, deltas: vec![1e-2, 1e-4, 1e-6], seed: 1, big_lambda: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    Fixed,
    LogDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSection {
    pub n_dir: usize,
    pub n_y: usize,
    pub half_width: f64,
    pub nt: usize,
    pub nx: usize,
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    pub mu: f64,
    pub w_id: f64,
    pub w_t: f64,
    pub w_x: f64,
    pub theta_a: f64,
    pub theta_b: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        let e = ExtensionConfig::default();
        ReconSection {
            n_dir: 64,
            n_y: 32,
            half_width: 2.0,
            nt: e.nt,
            nx: e.nx,
            alpha_mode: AlphaMode::Fixed,
            alpha: e.alpha,
            mu: 0.5,
            w_id: e.w_id,
            w_t: e.w_t,
            w_x: e.w_x,
            theta_a: crate::rayrecover::THETA.0,
            theta_b: crate::rayrecover::THETA.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentitySection {
    pub y0: Vec2,
    pub v0: Vec2,
    pub width: f64,
    /// Also run every resolution doubled.
    pub refine: bool,
}

impl Default for IdentitySection {
    fn default() -> Self {
        let c = IdentityConfig::default();
        IdentitySection { y0: c.y0, v0: c.v0, width: c.width, refine: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub out: PathBuf,
    /// 0 uses the environment default or all cores.
    pub workers: usize,
    pub domain: DomainSection,
    pub grid: GridSection,
    pub phi: PhiSection,
    pub psi: PsiSection,
    /// Phi2 of the reference kernel; Psi is shared.
    pub reference: PhiSection,
    pub solver: SolverSection,
    pub probe: ProbeSection,
    pub noise: NoiseSection,
    pub recon: ReconSection,
    pub identity: IdentitySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Forward,
            out: PathBuf::from("out"),
            workers: 0,
            domain: DomainSection::default(),
            grid: GridSection::default(),
            phi: PhiSection::default(),
            psi: PsiSection::default(),
            reference: PhiSection::zero(),
            solver: SolverSection::default(),
            probe: ProbeSection::default(),
            noise: NoiseSection::default(),
            recon: ReconSection::default(),
            identity: IdentitySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let mut inner = e.into_inner();
            inner.set_input(Some(text));
            CliError::Config(format!("field `{path}`: {inner}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization,
    /// ignoring the output directory and worker count.
    pub fn hash(&self) -> String {
        let canon = ExperimentConfig { out: PathBuf::new(), workers: 0, ..self.clone() };
        let digest = Sha256::digest(canon.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        if self.domain.n != 2 {
            return bad("domain.n", "only n = 2 is implemented");
        }
        if !(self.domain.d > 0.0 && self.domain.horizon > 0.0 && self.domain.r_v > 0.0) {
            return bad("domain", "d, horizon and r_v must be positive");
        }
        for (name, v) in [("recon.nt", self.recon.nt), ("recon.nx", self.recon.nx), ("recon.n_y", self.recon.n_y)] {
            if !v.is_power_of_two() {
                return bad(name, "FFT sizes must be powers of two");
            }
        }
        if self.recon.n_dir < 4 {
            return bad("recon.n_dir", "need at least 4 directions");
        }
        if !(self.probe.lambda > 0.0 && self.probe.lambda < 1.0) {
            return bad("probe.lambda", "must lie in (0, 1)");
        }
        if self.probe.eps < 0.0 {
            return bad("probe.eps", "must be >= 0 (0 selects kappa/16)");
        }
        if self.noise.deltas.iter().any(|d| !(*d >= 0.0 && *d < 1.0)) {
            return bad("noise.deltas", "values must lie in [0, 1)");
        }
        if !(self.noise.delta >= 0.0 && self.noise.delta < 1.0) {
            return bad("noise.delta", "must lie in [0, 1)");
        }
        if !(self.recon.theta_a > 0.0 && self.recon.theta_a <= self.recon.theta_b && self.recon.theta_b < 1.0 / 3.0) {
            return bad("recon.theta_a", "need 0 < theta_a <= theta_b < 1/3");
        }
        if self.probe.eps_divisors.len() < 2 {
            return bad("probe.eps_divisors", "need at least two amplitudes");
        }
        Ok(())
    }
}

/// The forward solvers for K1 = Phi Psi and K2 = Phi2 Psi on a common
/// grid, sharing the regime selected for K1.
pub struct Setup {
    pub domain: Domain,
    pub grid: PhaseGrid,
    pub quad: Arc<CollisionQuadrature>,
    pub k1: Solver,
    pub k2: Solver,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let dm = &cfg.domain;
        let g = &cfg.grid;
        let domain = Domain::disk(dm.d, dm.horizon).map_err(stage("setup"))?;
        let grid = PhaseGrid::new(&domain, g.t_steps, g.nx, g.nv, dm.r_v).map_err(stage("setup"))?;
        let quad = Arc::new(CollisionQuadrature::new(g.n_u, g.n_omega, dm.r_v).map_err(stage("setup"))?);
        let psi = cfg.psi.build();
        let kern1 = KernelSpec::new(cfg.phi.build(), psi.clone(), dm.r_v, &quad, &grid);
        let kern2 = KernelSpec::new(cfg.reference.build(), psi, dm.r_v, &quad, &grid);
        let regime = Regime::select(kern1.m_bound.max(kern2.m_bound), dm.horizon, cfg.solver.safety);
        let k1 = Solver::new(domain, grid, kern1, quad.clone(), regime);
        let k2 = Solver::new(domain, grid, kern2, quad.clone(), regime);
        Ok(Setup { domain, grid, quad, k1, k2 })
    }

    pub fn kappa(&self) -> f64 {
        self.k1.regime.kappa
    }

    pub fn probe_eps(&self, cfg: &ExperimentConfig) -> f64 {
        if cfg.probe.eps > 0.0 {
            cfg.probe.eps
        } else {
            self.kappa() / 16.0
        }
    }
}

pub fn solver_options(cfg: &ExperimentConfig) -> SolverOptions {
    SolverOptions { tol: cfg.solver.tol, max_iter: cfg.solver.max_iter, n_quad: cfg.solver.n_quad, full_field: false }
}

pub fn recon_config(cfg: &ExperimentConfig) -> ReconConfig {
    let r = &cfg.recon;
    ReconConfig {
        r: cfg.probe.r,
        n_dir: r.n_dir,
        n_y: r.n_y,
        half_width: r.half_width,
        lambda: cfg.probe.lambda,
        eps: (cfg.probe.eps > 0.0).then_some(cfg.probe.eps),
        theta: (r.theta_a, r.theta_b),
        alpha: match r.alpha_mode {
            AlphaMode::Fixed => AlphaRule::Fixed(r.alpha),
            AlphaMode::LogDelta => AlphaRule::LogDelta { mu: r.mu, cap: r.alpha },
        },
        extension: ExtensionConfig { nt: r.nt, nx: r.nx, alpha: r.alpha, w_id: r.w_id, w_t: r.w_t, w_x: r.w_x },
        n_quad: cfg.solver.n_quad,
        solver: solver_options(cfg),
        big_lambda: cfg.noise.big_lambda,
    }
}

/// A CSV report: '#' comment lines then a header row and records.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    fn new(name: &str, cfg: &ExperimentConfig, header: &[&str]) -> Self {
        Report {
            name: name.to_string(),
            comments: vec![format!("boltzlab {} {}", env!("CARGO_PKG_VERSION"), name), format!("config_hash={}", cfg.hash())],
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// Text body: comments, header, records.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        out.push_str(std::str::from_utf8(&w.into_inner().expect("flush")).expect("utf8"));
        out
    }

    /// Column by header name.
    pub fn column(&self, name: &str) -> Option<Vec<String>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].clone()).collect())
    }
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

/// Output of one run: CSV reports plus extra text artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub reports: Vec<Report>,
    pub artifacts: Vec<(String, String)>,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
}

fn data_for(cfg: &ExperimentConfig, setup: &Setup) -> Result<DataPair, CliError> {
    let a = cfg.probe.amplitude * setup.kappa();
    let v_star = cfg.probe.v_star;
    let gauss = move |v: &Vec2| (-((v[0] - v_star[0]).powi(2) + (v[1] - v_star[1]).powi(2))).exp();
    Ok(match cfg.probe.data {
        DataPreset::Constant => DataPair::constant(a / 2.0),
        DataPreset::Gaussian => DataPair::velocity_profile(move |v| a / 2.0 * gauss(v), a / 2.0),
        DataPreset::Probe => DataPair::combine(&[(a / 4.0, &DataPair::velocity_profile(gauss, 1.0)), (a / 4.0, &DataPair::constant(1.0))]),
    })
}

pub fn run_forward(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let setup = Setup::new(cfg)?;
    let data = data_for(cfg, &setup)?;
    let s = &setup.k1;
    let sol = s.solve(&data, &solver_options(cfg)).map_err(stage("solve"))?;
    let boundary = outgoing_quadrature(&setup.domain, 32, 8, cfg.domain.r_v).map_err(stage("measure"))?;
    let set = Arc::new(MeasurementSet::standard(&setup.domain, &setup.grid, &boundary));
    let m = s.measure(&sol, &set, cfg.solver.n_quad);
    let mut rep = Report::new("forward", cfg, &["kind", "t", "x1", "x2", "v1", "v2", "value", "free"]);
    let r = &sol.report;
    rep.comments.push(format!(
        "iterations={} contraction_factor={} bound_factor={} final_residual={} guards_pass={}",
        r.iterations,
        num(r.contraction_factor),
        num(r.bound_factor),
        num(r.final_residual),
        r.guards_pass()
    ));
    let horizon = setup.domain.horizon;
    for (p, val) in set.outgoing.iter().zip(&m.outgoing) {
        let free = data.free_solution(&setup.domain, p.t, &p.x, &p.v);
        rep.push(vec!["outgoing".into(), num(p.t), num(p.x[0]), num(p.x[1]), num(p.v[0]), num(p.v[1]), num(*val), num(free)]);
    }
    for (p, val) in set.terminal.iter().zip(&m.terminal) {
        let free = data.free_solution(&setup.domain, horizon, &p.x, &p.v);
        rep.push(vec!["terminal".into(), num(horizon), num(p.x[0]), num(p.x[1]), num(p.v[0]), num(p.v[1]), num(*val), num(free)]);
    }
    let summary = vec![format!("forward: {} samples, {} Picard iterations, contraction factor {:.3e}", set.len(), r.iterations, r.contraction_factor)];
    Ok(RunOutput { reports: vec![rep], artifacts: Vec::new(), summary })
}

pub fn run_expand_check(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let setup = Setup::new(cfg)?;
    let kappa = setup.kappa();
    let probes = ProbePair::gaussian_constant(&setup.domain, &setup.grid, cfg.probe.v_star, 1.0, 1.0).map_err(stage("probes"))?;
    let eps: Vec<f64> = cfg.probe.eps_divisors.iter().map(|d| kappa / d).collect();
    let opts = SolverOptions { full_field: true, ..solver_options(cfg) };
    let study = remainder_order_study(&setup.k1, &probes, &eps, &opts).map_err(stage("expand-check"))?;
    let mut rep = Report::new("expand_check", cfg, &["eps", "first_order", "remainder", "first_order_slope", "remainder_slope"]);
    for r in &study.rows {
        rep.push(vec![num(r.eps), num(r.first_order), num(r.remainder), num(study.first_order_slope), num(study.remainder_slope)]);
    }
    let summary = vec![format!("expand-check: slopes first order {:.4}, remainder {:.4}", study.first_order_slope, study.remainder_slope)];
    Ok(RunOutput { reports: vec![rep], artifacts: Vec::new(), summary })
}

pub fn run_identity_check(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let setup = Setup::new(cfg)?;
    let eps = setup.probe_eps(cfg);
    let probes = ProbePair::gaussian_constant(&setup.domain, &setup.grid, cfg.probe.v_star, eps, eps).map_err(stage("probes"))?;
    let base = IdentityConfig { y0: cfg.identity.y0, v0: cfg.identity.v0, width: cfg.identity.width, ..IdentityConfig::default() };
    let mut levels = vec![("base", base)];
    if cfg.identity.refine {
        levels.push(("refined", base.refined()));
    }
    let mut rep = Report::new("identity_check", cfg, &["level", "lhs", "final", "outgoing", "remainder", "rhs", "residual"]);
    let mut summary = Vec::new();
    for (name, ic) in levels {
        let r = integral_identity_check(&setup.k1, &probes, &ic, &solver_options(cfg)).map_err(stage("identity-check"))?;
        rep.push(vec![name.into(), num(r.lhs), num(r.final_term), num(r.outgoing_term), num(r.remainder_term), num(r.rhs), num(r.residual)]);
        summary.push(format!("identity-check {name}: relative residual {:.3e}", r.residual));
    }
    Ok(RunOutput { reports: vec![rep], artifacts: Vec::new(), summary })
}

pub fn run_reconstruct(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let setup = Setup::new(cfg)?;
    let rc = recon_config(cfg);
    let delta = cfg.noise.delta;
    let (eps, lambda) = if delta > 0.0 {
        crate::rayrecover::optimal_probe_parameters(delta, setup.kappa(), cfg.domain.n as i32, cfg.noise.big_lambda).map_err(stage("parameters"))?
    } else {
        (setup.probe_eps(cfg), cfg.probe.lambda)
    };
    let o = reconstruct(&setup.k1, &setup.k2, &rc, eps, lambda, delta, cfg.noise.seed).map_err(|e: RayError| CliError::Stage { stage: "reconstruct", msg: e.to_string() })?;
    let mut rep = Report::new("reconstruct", cfg, &["delta", "eps", "lambda", "h_minus1", "l2", "linf", "imag_residue"]);
    rep.push(vec![num(delta), num(eps), num(lambda), num(o.errors.h_minus1), num(o.errors.l2), num(o.errors.linf), num(o.inversion.imag_residue)]);
    let mut field = Report::new("reconstruction_field", cfg, &["t", "x1", "x2", "reconstructed", "truth"]);
    let f = &o.inversion.field;
    for it in 0..f.nt {
        for j1 in 0..f.nx {
            for j2 in 0..f.nx {
                let (t, x) = f.point(it, j1, j2);
                let k = (it * f.nx + j1) * f.nx + j2;
                field.push(vec![num(t), num(x[0]), num(x[1]), num(f.values[k]), num(o.truth.values[k])]);
            }
        }
    }
    let summary = vec![format!("reconstruct: relative errors H^-1 {:.4}, L2 {:.4}, Linf {:.4}", o.errors.h_minus1, o.errors.l2, o.errors.linf)];
    Ok(RunOutput {
        reports: vec![rep, field],
        artifacts: vec![("lightray.txt".into(), o.lightray.to_text()), ("slab.txt".into(), o.slab.to_text())],
        summary,
    })
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let setup = Setup::new(cfg)?;
    let rc = recon_config(cfg);
    let rows = stability_sweep(&setup.k1, &setup.k2, &rc, &cfg.noise.deltas, cfg.noise.seed);
    let mut rep = Report::new("sweep", cfg, &["delta", "eps", "lambda", "h_minus1", "l2", "linf", "status"]);
    let mut h = Vec::new();
    for r in &rows {
        let (a, b, c) = r.errors.map(|e| (e.h_minus1, e.l2, e.linf)).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        if r.errors.is_some() {
            h.push(a);
        }
        let status = r.error.clone().unwrap_or_else(|| "ok".into());
        rep.push(vec![num(r.delta), num(r.eps), num(r.lambda), num(a), num(b), num(c), status]);
    }
    let trend = non_increasing(&h, 0);
    rep.comments.push(format!("h_minus1_non_increasing={trend}"));
    let summary = vec![format!("sweep: {} rows, H^-1 column non-increasing: {trend}", rows.len())];
    Ok(RunOutput { reports: vec![rep], artifacts: Vec::new(), summary })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    match cfg.mode {
        Mode::Forward => run_forward(cfg),
        Mode::ExpandCheck => run_expand_check(cfg),
        Mode::IdentityCheck => run_identity_check(cfg),
        Mode::Reconstruct => run_reconstruct(cfg),
        Mode::Sweep => run_sweep(cfg),
    }
}

/// Write reports, artifacts and the manifest into cfg.out.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, seconds: f64) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    for r in &out.reports {
        let p = cfg.out.join(format!("{}.csv", r.name));
        fs::write(&p, r.to_csv())?;
        written.push(p);
    }
    for (name, text) in &out.artifacts {
        let p = cfg.out.join(name);
        fs::write(&p, text)?;
        written.push(p);
    }
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let files: Vec<String> = written.iter().filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned())).collect();
    let manifest = format!(
        "# boltzlab run manifest\nversion = \"{}\"\nconfig_hash = \"{}\"\nunix_time = {}\nwall_clock_seconds = {:.3}\nworkers = {}\nfiles = {:?}\n\n# config\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.hash(),
        stamp,
        seconds,
        rayon::current_num_threads(),
        files,
        cfg.to_toml()
    );
    let p = cfg.out.join("manifest.toml");
    fs::write(&p, manifest)?;
    written.push(p);
    Ok(written)
}

/// Quick internal checks; one line per check.
pub fn selftest() -> Vec<(String, bool)> {
    use crate::collision::post_collision;
    use crate::rayrecover::{optimal_probe_parameters, e_delta_gradient, Chi};
    let mut out = Vec::new();
    let (u, v, w) = ([0.3, -1.2], [2.0, 0.5], [0.6, 0.8]);
    let ok = post_collision(&u, &v, &w)
        .map(|(up, vp)| {
            let mom = (up[0] + vp[0] - u[0] - v[0]).abs() + (up[1] + vp[1] - u[1] - v[1]).abs();
            let en = (up[0] * up[0] + up[1] * up[1] + vp[0] * vp[0] + vp[1] * vp[1]) - (u[0] * u[0] + u[1] * u[1] + v[0] * v[0] + v[1] * v[1]);
            mom < 1e-12 && en.abs() < 1e-12
        })
        .unwrap_or(false);
    out.push(("collision conservation".into(), ok));
    out.push(("chi normalization".into(), (Chi::get().l1_norm() - 1.0).abs() < 1e-6));
    let ok = optimal_probe_parameters(1e-3, 0.1, 2, 10.0)
        .map(|(e, l)| {
            let (a, b) = e_delta_gradient(e, l, 1e-3, 0.1, 2, 10.0);
            a.abs() < 1e-10 && b.abs() < 1e-10 && e < 0.1 / 4.0
        })
        .unwrap_or(false);
    out.push(("critical point".into(), ok));
    let cfg = ExperimentConfig::default();
    let round = ExperimentConfig::parse(&cfg.to_toml()).map(|c| c == cfg).unwrap_or(false);
    out.push(("config round trip".into(), round));
    out
}

#[derive(Debug, Parser)]
#[command(name = "boltzlab", version, about = "Boltzmann forward solves and light-ray kernel recovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Solve and dump the measurement operator.
    Forward,
    /// Expansion order study.
    ExpandCheck,
    /// Integral identity residual.
    IdentityCheck,
    /// Single-delta reconstruction with error norms.
    Reconstruct,
    /// Stability table over the delta list.
    Sweep,
    /// Fast internal checks.
    Selftest,
    /// Print the default config.
    DefaultConfig,
}

impl Command {
    fn mode(self) -> Option<Mode> {
        match self {
            Command::Forward => Some(Mode::Forward),
            Command::ExpandCheck => Some(Mode::ExpandCheck),
            Command::IdentityCheck => Some(Mode::IdentityCheck),
            Command::Reconstruct => Some(Mode::Reconstruct),
            Command::Sweep => Some(Mode::Sweep),
            Command::Selftest | Command::DefaultConfig => None,
        }
    }
}

/// Worker count: flag, then config, then the environment variable.
pub fn resolve_workers(flag: Option<usize>, cfg: usize, env: Option<&str>) -> usize {
    flag.filter(|&n| n > 0)
        .or((cfg > 0).then_some(cfg))
        .or_else(|| env.and_then(|s| s.trim().parse().ok()).filter(|&n| n > 0))
        .unwrap_or(0)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with(args: Cli) -> i32 {
    if let Command::DefaultConfig = args.command {
        print!("{}", ExperimentConfig::default().to_toml());
        return 0;
    }
    if let Command::Selftest = args.command {
        let checks = selftest();
        for (name, ok) in &checks {
            println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
        }
        return if checks.iter().all(|c| c.1) { 0 } else { 1 };
    }
    let mut cfg = match &args.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(m) = args.command.mode() {
        cfg.mode = m;
    }
    if let Some(o) = args.out {
        cfg.out = o;
    }
    if let Some(s) = args.seed {
        cfg.noise.seed = s;
    }
    let env = std::env::var(WORKERS_ENV).ok();
    cfg.workers = resolve_workers(args.workers, cfg.workers, env.as_deref());
    if cfg.workers > 0 {
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let t0 = Instant::now();
    match run(&cfg).and_then(|out| write_outputs(&cfg, &out, t0.elapsed().as_secs_f64()).map(|w| (out, w))) {
        Ok((out, written)) => {
            for s in &out.summary {
                println!("{s}");
            }
            for p in written {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
