//! Outer fixed point of the extended mean-field system and the master-value
//! evaluator built on top of it.
//!
//! The primary iteration acts on the initial value slice:
//! `Φ ↦ F(Φ)` integrates the population flow with `P(0) = D_xΦ(X₀)` and then
//! solves the HJB equation backward along that flow, returning `u(·, 0)`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{fmt_f64, Ensemble};
use crate::error::{MfgError, Result};
use crate::family::HamiltonianFamily;
use crate::flow::{integrate_flow, TrajectoryEnsemble};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::hjb::{
    regularity_report, resolve_grid, solve_backward_on, GridConfig, QueryTally, RegularityReport, ValueGrid, ValueSlice,
};
use crate::velocity::solve_velocity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointMode {
    /// Damped Picard on the initial value slice.
    #[default]
    ValueSlice,
    /// Damped Picard on the population trajectory with closed-loop re-integration.
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Sample count used when the initial ensemble is generated from a recipe.
    #[serde(skip)]
    pub particles: usize,
    pub nodes: usize,
    pub steps: usize,
    pub controls: usize,
    pub v_max: Option<f64>,
    pub domain: Option<(f64, f64)>,
    pub damping: f64,
    pub tol_fix: f64,
    pub tol_traj: f64,
    pub max_outer: usize,
    #[serde(skip)]
    pub horizon: f64,
    pub mode: FixedPointMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            particles: 64,
            nodes: 201,
            steps: 200,
            controls: 201,
            v_max: None,
            domain: None,
            damping: 0.5,
            tol_fix: 1e-4,
            tol_traj: 1e-4,
            max_outer: 100,
            horizon: 1.0,
            mode: FixedPointMode::ValueSlice,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MfgError::InvalidConfig(msg));
        if self.particles == 0 || self.steps == 0 || self.max_outer == 0 {
            return bad("particles, steps and max_outer must be positive".into());
        }
        if self.nodes < 8 || self.controls < 2 {
            return bad(format!("nodes = {}, controls = {} too small", self.nodes, self.controls));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping {} outside (0, 1]", self.damping));
        }
        if !(self.tol_fix > 0.0 && self.tol_traj > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon {} must be positive", self.horizon));
        }
        if self.v_max.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return bad("v_max must be positive".into());
        }
        Ok(())
    }

    fn grid_config(&self) -> GridConfig {
        GridConfig { nodes: self.nodes, controls: self.controls, v_max: self.v_max, domain: self.domain }
    }
}

/// Grids and control set shared by every iterate of one solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub time: TimeGrid,
    pub space: SpaceGrid,
    pub v_max: f64,
    pub controls: usize,
}

impl Discretization {
    /// Resolves the grid against the stationary trajectory at `x0` on `[0, T]`.
    pub fn resolve(fam: &HamiltonianFamily, x0: &Ensemble, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let time = TimeGrid::new(0.0, cfg.horizon, cfg.steps)?;
        let stationary = TrajectoryEnsemble::stationary(x0, time);
        let (space, v_max) = resolve_grid(fam, &stationary, &cfg.grid_config())?;
        Ok(Self { time, space, v_max, controls: cfg.controls })
    }

    /// Same space and controls on the tail `[t_m, T]` of the time grid.
    pub fn tail(&self, m: usize) -> Result<Self> {
        let time = TimeGrid::new(self.time.time(m), self.time.end, self.time.steps - m)?;
        Ok(Self { time, ..*self })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualRecord {
    pub iter: usize,
    /// `‖F(Φ_k) − Φ_k‖_∞` on the grid.
    pub phi_residual: f64,
    /// `max_t W_q(X_k(t), X_{k−1}(t))`; iterate 0 is compared with `X₀`.
    pub traj_residual: f64,
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub value: ValueGrid,
    pub traj: TrajectoryEnsemble,
    pub residual_history: Vec<ResidualRecord>,
    pub regularity_history: Vec<RegularityReport>,
    pub converged: bool,
    /// Iterate returned as `value`/`traj`.
    pub best_iter: usize,
}

impl MfgSolution {
    pub fn final_residual(&self) -> ResidualRecord {
        self.residual_history[self.best_iter]
    }

    /// `u(x, t_m)` by linear interpolation.
    pub fn value_at(&self, x: f64, m: usize) -> f64 {
        self.value.value_at(x, m)
    }

    pub fn write_bundle(&self, dir: &Path, config: &serde_json::Value, wall_seconds: f64) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.value.write_csv(BufWriter::new(fs::File::create(dir.join("value.csv"))?))?;
        self.traj.write_csv(BufWriter::new(fs::File::create(dir.join("trajectory.csv"))?))?;
        write_residuals(&self.residual_history, BufWriter::new(fs::File::create(dir.join("residuals.csv"))?))?;
        let meta = serde_json::json!({
            "config": config,
            "converged": self.converged,
            "iterations": self.residual_history.len(),
            "best_iter": self.best_iter,
            "final_phi_residual": self.final_residual().phi_residual,
            "final_traj_residual": self.final_residual().traj_residual,
            "v_max": self.value.v_max,
            "domain": [self.value.space.lo, self.value.space.hi],
            "wall_time_seconds": wall_seconds,
        });
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

pub fn write_residuals<W: std::io::Write>(history: &[ResidualRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "phi_residual", "traj_residual"])?;
    for r in history {
        w.write_record([r.iter.to_string(), fmt_f64(r.phi_residual), fmt_f64(r.traj_residual)])?;
    }
    w.flush()?;
    Ok(())
}

/// One application of `F`: the flow seeded by `phi`, then the backward sweep
/// along it. Returns the whole value grid and the trajectory.
pub fn apply_f_full(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    phi: &ValueSlice,
    disc: &Discretization,
) -> Result<(ValueGrid, TrajectoryEnsemble)> {
    if !phi.is_finite() {
        return Err(MfgError::InvalidConfig("initial value slice is not finite".into()));
    }
    let traj = integrate_flow(fam, x0, phi, disc.time)?;
    let value = solve_backward_on(fam, &traj, disc.space, disc.v_max, disc.controls)?;
    Ok((value, traj))
}

/// `F(Φ) = ũ(·, 0)` on the grid of `phi`.
pub fn apply_f(fam: &HamiltonianFamily, x0: &Ensemble, phi: &ValueSlice, cfg: &SolverConfig) -> Result<ValueSlice> {
    let mut disc = Discretization::resolve(fam, x0, cfg)?;
    disc.space = phi.space;
    Ok(apply_f_full(fam, x0, phi, &disc)?.0.slice(0))
}

/// `Φ₀ = ψ(·, X₀)` on the grid.
pub fn terminal_guess(fam: &HamiltonianFamily, x0: &Ensemble, space: SpaceGrid) -> ValueSlice {
    let frozen = fam.terminal.freeze(x0);
    ValueSlice::from_fn(space, |x| frozen.value(&[x]))
}

pub fn solve_mfg(fam: &HamiltonianFamily, x0: &Ensemble, cfg: &SolverConfig) -> Result<MfgSolution> {
    let disc = Discretization::resolve(fam, x0, cfg)?;
    let phi0 = terminal_guess(fam, x0, disc.space);
    solve_mfg_on(fam, x0, cfg, &disc, phi0)
}

/// Runs the configured fixed-point iteration from an explicit `Φ₀`.
pub fn solve_mfg_on(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    cfg: &SolverConfig,
    disc: &Discretization,
    phi0: ValueSlice,
) -> Result<MfgSolution> {
    cfg.validate()?;
    fam.validate()?;
    if x0.dim() != 1 {
        return Err(MfgError::UnsupportedDimension { dim: x0.dim(), context: "grid-based MFG solve" });
    }
    match cfg.mode {
        FixedPointMode::ValueSlice => value_slice_picard(fam, x0, cfg, disc, phi0),
        FixedPointMode::Trajectory => trajectory_picard(fam, x0, cfg, disc),
    }
}

struct Tracker {
    history: Vec<ResidualRecord>,
    regularity: Vec<RegularityReport>,
    best: Option<(f64, usize, ValueGrid, TrajectoryEnsemble)>,
}

impl Tracker {
    fn new() -> Self {
        Self { history: Vec::new(), regularity: Vec::new(), best: None }
    }

    /// Records an iterate; returns whether both tolerances are met.
    fn push(&mut self, cfg: &SolverConfig, record: ResidualRecord, value: ValueGrid, traj: TrajectoryEnsemble) -> bool {
        log::debug!(
            "iteration {}: phi residual {:.3e}, trajectory residual {:.3e}",
            record.iter,
            record.phi_residual,
            record.traj_residual
        );
        self.regularity.push(regularity_report(&value, value.time.end));
        self.history.push(record);
        let score = (record.phi_residual / cfg.tol_fix).max(record.traj_residual / cfg.tol_traj);
        if self.best.as_ref().is_none_or(|b| score < b.0) {
            self.best = Some((score, record.iter, value, traj));
        }
        score <= 1.0
    }

    fn finish(self, converged: bool) -> MfgSolution {
        let (_, best_iter, value, traj) = self.best.expect("at least one iterate");
        if !converged {
            log::warn!(
                "fixed point not reached after {} iterations; returning iterate {best_iter}",
                self.history.len()
            );
        }
        MfgSolution {
            value,
            traj,
            residual_history: self.history,
            regularity_history: self.regularity,
            converged,
            best_iter,
        }
    }
}

fn value_slice_picard(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    cfg: &SolverConfig,
    disc: &Discretization,
    mut phi: ValueSlice,
) -> Result<MfgSolution> {
    let mut tracker = Tracker::new();
    let mut previous = TrajectoryEnsemble::stationary(x0, disc.time);
    for iter in 0..cfg.max_outer {
        let (value, traj) = apply_f_full(fam, x0, &phi, disc)?;
        let image = value.slice(0);
        let record = ResidualRecord {
            iter,
            phi_residual: image.sup_distance(&phi),
            traj_residual: traj.max_law_distance(&previous)?,
        };
        phi = phi.blend(&image, cfg.damping);
        previous = traj.clone();
        if tracker.push(cfg, record, value, traj) {
            return Ok(tracker.finish(true));
        }
    }
    Ok(tracker.finish(false))
}

/// Closed-loop re-integration: particles move with the velocity generated by
/// `D_xu` of the frozen value grid, the law being the moving ensemble itself.
pub fn feedback_flow(fam: &HamiltonianFamily, x0: &Ensemble, value: &ValueGrid) -> Result<TrajectoryEnsemble> {
    let time = value.time;
    let dt = time.dt();
    let mut tally = QueryTally::default();
    let mut field = |x: &Ensemble, m: usize, w: f64| -> Result<Ensemble> {
        let p = x.map_samples(1, |_, s| {
            let a = tally.record(value.gradient_at(s[0], m), s[0]);
            if w == 0.0 {
                vec![a]
            } else {
                vec![(1.0 - w) * a + w * value.gradient_at(s[0], m + 1).value]
            }
        })?;
        solve_velocity(fam, x, &p, x)
    };
    let mut states = Vec::with_capacity(time.len());
    let mut velocities = Vec::with_capacity(time.len());
    let mut x = x0.clone();
    for m in 0..time.steps {
        let k1 = field(&x, m, 0.0)?;
        let k2 = field(&x.axpby(1.0, &k1, 0.5 * dt), m, 0.5)?;
        let k3 = field(&x.axpby(1.0, &k2, 0.5 * dt), m, 0.5)?;
        let k4 = field(&x.axpby(1.0, &k3, dt), m + 1, 0.0)?;
        let s = k1.axpby(1.0, &k2, 2.0).axpby(1.0, &k3, 2.0).axpby(1.0, &k4, 1.0);
        let next = x.axpby(1.0, &s, dt / 6.0);
        if next.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(MfgError::BlowUp { step: m + 1 });
        }
        states.push(std::mem::replace(&mut x, next));
        velocities.push(k1);
    }
    velocities.push(field(&x, time.steps, 0.0)?);
    states.push(x);
    tally.finish()?;
    TrajectoryEnsemble::new(time, states, velocities, None)
}

fn trajectory_picard(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    cfg: &SolverConfig,
    disc: &Discretization,
) -> Result<MfgSolution> {
    let mut tracker = Tracker::new();
    let mut traj = TrajectoryEnsemble::stationary(x0, disc.time);
    let mut previous_slice = terminal_guess(fam, x0, disc.space);
    for iter in 0..cfg.max_outer {
        let value = solve_backward_on(fam, &traj, disc.space, disc.v_max, disc.controls)?;
        let fresh = feedback_flow(fam, x0, &value)?;
        let record = ResidualRecord {
            iter,
            phi_residual: value.slice(0).sup_distance(&previous_slice),
            traj_residual: fresh.max_law_distance(&traj)?,
        };
        previous_slice = value.slice(0);
        let lambda = cfg.damping;
        let blended = TrajectoryEnsemble::new(
            disc.time,
            traj.states.iter().zip(&fresh.states).map(|(a, b)| a.axpby(1.0 - lambda, b, lambda)).collect(),
            traj.velocities.iter().zip(&fresh.velocities).map(|(a, b)| a.axpby(1.0 - lambda, b, lambda)).collect(),
            None,
        )?;
        let converged = tracker.push(cfg, record, value, fresh);
        traj = blended;
        if converged {
            return Ok(tracker.finish(true));
        }
    }
    Ok(tracker.finish(false))
}

/// `Ṽ(x, Y, t_m) = u(x, t_m)` where `u` solves the system on `[t_m, T]` with `X(t_m) = Y`,
/// evaluated at several points with a single solve.
pub fn master_values(
    fam: &HamiltonianFamily,
    xs: &[f64],
    y: &Ensemble,
    m: usize,
    cfg: &SolverConfig,
    disc: &Discretization,
) -> Result<Vec<f64>> {
    if m == disc.time.steps {
        let frozen = fam.terminal.freeze(y);
        return Ok(xs.iter().map(|&x| frozen.value(&[x])).collect());
    }
    let tail = disc.tail(m)?;
    let sol = solve_mfg_on(fam, y, cfg, &tail, terminal_guess(fam, y, tail.space))?;
    if !sol.converged {
        log::warn!("master-value solve from t = {} did not converge", tail.time.start);
    }
    Ok(xs.iter().map(|&x| sol.value_at(x, 0)).collect())
}

/// `Ṽ(x, Y, t)` on a fresh discretization of `[t, T]` with the configured step size.
pub fn master_value(fam: &HamiltonianFamily, x: f64, y: &Ensemble, t: f64, cfg: &SolverConfig) -> Result<f64> {
    if !(t < cfg.horizon) {
        let frozen = fam.terminal.freeze(y);
        return Ok(frozen.value(&[x]));
    }
    let steps = ((cfg.steps as f64) * (cfg.horizon - t) / cfg.horizon).round().max(1.0) as usize;
    let sub = SolverConfig { horizon: cfg.horizon - t, steps, ..cfg.clone() };
    let disc = Discretization::resolve(fam, y, &sub)?;
    let sol = solve_mfg_on(fam, y, &sub, &disc, terminal_guess(fam, y, disc.space))?;
    Ok(sol.value_at(x, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MasterProbe {
    pub x: f64,
    pub time_index: usize,
}

/// Deterministic probes: time indices uniform on the grid, points uniform in
/// the population hull at that time.
pub fn master_probes(sol: &MfgSolution, count: usize, seed: u64) -> Vec<MasterProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = sol.traj.time.steps;
    (0..count)
        .map(|_| {
            let m = rng.gen_range(0..steps);
            let (lo, hi) = sol.traj.states[m].hull_1d();
            let x = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            MasterProbe { x, time_index: m }
        })
        .collect()
}

/// `max |u(x, t) − Ṽ(x, X(t), t)|` over the probes, restarting the system at
/// each probed time from the solution's own population.
pub fn master_consistency_residual(
    sol: &MfgSolution,
    fam: &HamiltonianFamily,
    cfg: &SolverConfig,
    probes: &[MasterProbe],
) -> Result<f64> {
    let disc =
        Discretization { time: sol.value.time, space: sol.value.space, v_max: sol.value.v_max, controls: cfg.controls };
    let mut times: Vec<usize> = probes.iter().map(|p| p.time_index).collect();
    times.sort_unstable();
    times.dedup();
    let per_time: Vec<Result<f64>> = times
        .par_iter()
        .map(|&m| {
            let xs: Vec<f64> = probes.iter().filter(|p| p.time_index == m).map(|p| p.x).collect();
            let master = master_values(fam, &xs, &sol.traj.states[m], m, cfg, &disc)?;
            Ok(xs.iter().zip(master).map(|(&x, v)| (sol.value_at(x, m) - v).abs()).fold(0.0, f64::max))
        })
        .collect();
    per_time.into_iter().try_fold(0.0f64, |acc, r| Ok(acc.max(r?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStatus {
    Conclusive,
    /// At least one run did not converge; the distance is reported but not evidence.
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub status: ProbeStatus,
    /// Largest pairwise sup distance between the final initial slices.
    pub max_distance: f64,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

/// Perturbed starting slice `ψ(·, X₀) + a·sin(ωx + φ)`; Lipschitz constant
/// grows by at most `a·ω`.
pub fn random_initial_slice(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    space: SpaceGrid,
    rng: &mut ChaCha8Rng,
) -> ValueSlice {
    let a = rng.gen_range(0.1..0.5);
    let omega = rng.gen_range(0.5..2.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let frozen = fam.terminal.freeze(x0);
    ValueSlice::from_fn(space, |x| frozen.value(&[x]) + a * (omega * x + phase).sin())
}

/// Solves from `runs` random starting slices and compares the fixed points.
pub fn uniqueness_probe(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    cfg: &SolverConfig,
    runs: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    if runs == 0 {
        return Err(MfgError::InvalidConfig("uniqueness probe needs at least one run".into()));
    }
    let disc = Discretization::resolve(fam, x0, cfg)?;
    let starts: Vec<ValueSlice> = (0..runs)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            random_initial_slice(fam, x0, disc.space, &mut rng)
        })
        .collect();
    let solutions: Vec<MfgSolution> =
        starts.into_par_iter().map(|phi0| solve_mfg_on(fam, x0, cfg, &disc, phi0)).collect::<Result<_>>()?;
    let slices: Vec<ValueSlice> = solutions.iter().map(|s| s.value.slice(0)).collect();
    let mut max_distance = 0.0f64;
    for i in 0..runs {
        for j in i + 1..runs {
            max_distance = max_distance.max(slices[i].sup_distance(&slices[j]));
        }
    }
    let converged: Vec<bool> = solutions.iter().map(|s| s.converged).collect();
    let status = if converged.iter().all(|&c| c) { ProbeStatus::Conclusive } else { ProbeStatus::Inconclusive };
    Ok(UniquenessReport {
        status,
        max_distance,
        converged,
        iterations: solutions.iter().map(|s| s.residual_history.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{CustomHamiltonian, LawFunction};
    use std::sync::Arc;

    fn uniform(n: usize, lo: f64, hi: f64) -> Ensemble {
        Ensemble::from_scalars((0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()).unwrap()
    }

    fn small_cfg() -> SolverConfig {
        SolverConfig { nodes: 81, steps: 40, controls: 81, v_max: Some(2.0), ..SolverConfig::default() }
    }

    #[test]
    fn zero_problem_is_a_fixed_point() {
        let fam = HamiltonianFamily::zero();
        let x0 = uniform(8, -1.0, 1.0);
        let sol = solve_mfg(&fam, &x0, &small_cfg()).unwrap();
        assert!(sol.converged);
        assert!(sol.residual_history.len() <= 2);
        assert!(sol.value.values.iter().flatten().all(|&v| v.abs() < 1e-14));
        for xs in &sol.traj.states {
            assert_eq!(xs, &x0);
        }
        let slice = apply_f(&fam, &x0, &sol.value.slice(0), &small_cfg()).unwrap();
        assert!(slice.values.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn unit_running_cost_gives_the_horizon() {
        let c = CustomHamiltonian {
            hamiltonian: Arc::new(|_x, p, _y, _z| 0.5 * p[0] * p[0] - 1.0),
            lagrangian: Arc::new(|_x, v, _y, _z| 0.5 * v[0] * v[0] + 1.0),
            dp_hamiltonian: Arc::new(|_x, p, _y, _z| vec![p[0]]),
            dx_hamiltonian: Some(Arc::new(|_x, _p, _y, _z| vec![0.0])),
            contraction: 0.0,
        };
        let fam = HamiltonianFamily::custom(c, LawFunction::Zero);
        let x0 = uniform(4, -0.5, 0.5);
        let cfg = SolverConfig { horizon: 0.7, ..small_cfg() };
        let disc = Discretization::resolve(&fam, &x0, &cfg).unwrap();
        let out = apply_f(&fam, &x0, &ValueSlice::from_fn(disc.space, |_| 3.0), &cfg).unwrap();
        assert!(out.values.iter().all(|&v| (v - 0.7).abs() < 1e-12), "{:?}", &out.values[..3]);
    }

    #[test]
    fn trajectory_mode_agrees_with_slice_mode() {
        let fam = HamiltonianFamily::quadratic_coupled(
            0.5,
            LawFunction::MeanSquareDistance { weight: 0.5 },
            LawFunction::MeanSquareDistance { weight: 0.5 },
        );
        let x0 = uniform(16, -1.0, 0.5);
        let cfg = small_cfg();
        let a = solve_mfg(&fam, &x0, &cfg).unwrap();
        let b = solve_mfg(&fam, &x0, &SolverConfig { mode: FixedPointMode::Trajectory, ..cfg }).unwrap();
        assert!(a.converged && b.converged);
        let gap = a.value.slice(0).sup_distance(&b.value.slice(0));
        assert!(gap < 2e-2, "gap {gap}");
        assert!(a.traj.max_law_distance(&b.traj).unwrap() < 2e-2);
    }

    #[test]
    fn converged_solution_is_idempotent() {
        let fam = HamiltonianFamily::quadratic_coupled(
            0.5,
            LawFunction::MeanSquareDistance { weight: 0.5 },
            LawFunction::MeanSquareDistance { weight: 1.0 },
        );
        let x0 = uniform(16, -1.0, 0.6);
        let cfg = small_cfg();
        let sol = solve_mfg(&fam, &x0, &cfg).unwrap();
        assert!(sol.converged);
        let disc = Discretization::resolve(&fam, &x0, &cfg).unwrap();
        let phi = sol.value.slice(0);
        let (image, _) = apply_f_full(&fam, &x0, &phi, &disc).unwrap();
        assert!(image.slice(0).sup_distance(&phi) <= 2.0 * cfg.tol_fix);
        let first = sol.residual_history[0].phi_residual;
        assert!(sol.final_residual().phi_residual < first);
    }

    #[test]
    fn non_convergence_is_reported() {
        let fam = HamiltonianFamily::quadratic_coupled(
            0.5,
            LawFunction::MeanSquareDistance { weight: 1.0 },
            LawFunction::MeanSquareDistance { weight: 1.0 },
        );
        let x0 = uniform(8, -1.0, 0.4);
        let cfg = SolverConfig { max_outer: 2, ..small_cfg() };
        let sol = solve_mfg(&fam, &x0, &cfg).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.residual_history.len(), 2);
    }

    #[test]
    fn master_value_at_the_horizon_is_terminal_cost() {
        let fam = HamiltonianFamily::quadratic_coupled(
            0.0,
            LawFunction::Zero,
            LawFunction::MeanSquareDistance { weight: 1.0 },
        );
        let y = uniform(4, 0.0, 1.0);
        let v = master_value(&fam, 0.3, &y, 1.0, &small_cfg()).unwrap();
        let expected = y.as_slice().iter().map(|s| (0.3 - s) * (0.3 - s)).sum::<f64>() / 4.0;
        assert!((v - expected).abs() < 1e-14);
        assert_eq!(master_value(&HamiltonianFamily::zero(), 0.1, &y, 0.4, &small_cfg()).unwrap(), 0.0);
    }

    #[test]
    fn bundle_and_config_round_trip() {
        let cfg = SolverConfig { v_max: Some(3.0), domain: Some((-2.0, 2.0)), ..SolverConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SolverConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(serde_json::from_str::<SolverConfig>(r#"{"nodes": 11, "bogus": 1}"#).is_err());
        assert!(SolverConfig { damping: 1.5, ..cfg }.validate().is_err());

        let fam = HamiltonianFamily::zero();
        let x0 = uniform(4, -1.0, 1.0);
        let sol = solve_mfg(&fam, &x0, &small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        sol.write_bundle(dir.path(), &serde_json::json!({}), 0.0).unwrap();
        for f in ["value.csv", "trajectory.csv", "residuals.csv", "meta.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let residuals = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
        assert!(residuals.starts_with("iter,phi_residual,traj_residual\n"));
    }
}
