//! Backward semi-Lagrangian solver for `−u_t + H(x, D_xu, X(t), Ẋ(t)) = 0`,
//! `u(·, T) = ψ(·, X(T))`, with the population trajectory frozen.
//!
//! Each slice is obtained from the next one by a discrete dynamic-programming
//! step over a uniform control set,
//!
//! ```text
//! u[m][i] = min_v  dt·L(x_i, v, X[m], V[m]) + interp(u[m+1], foot(x_i, v))
//! ```
//!
//! where `foot(x, v) = x + v·dt` for direct dynamics and `x + (v/x)·dt` for
//! state-scaled dynamics. Linear interpolation with nonnegative weights makes
//! the scheme monotone, so the discrete comparison principle holds.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{fmt_f64, Ensemble};
use crate::error::{MfgError, Result};
use crate::family::{Dynamics, HamiltonianFamily};
use crate::flow::TrajectoryEnsemble;
use crate::grid::{SpaceGrid, TimeGrid};

/// Fraction of population nodes allowed to pick an extreme control.
const SATURATION_LIMIT: f64 = 0.01;
/// Fraction of gradient queries allowed to fall outside the grid.
const CLAMP_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub nodes: usize,
    pub controls: usize,
    /// Control bound; derived from coercivity when absent.
    pub v_max: Option<f64>,
    /// Explicit spatial domain; derived from the initial hull when absent.
    pub domain: Option<(f64, f64)>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nodes: 201, controls: 201, v_max: None, domain: None }
    }
}

/// Spatial values and gradient at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSlice {
    pub space: SpaceGrid,
    pub values: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl ValueSlice {
    pub fn new(space: SpaceGrid, values: Vec<f64>) -> Self {
        let gradient = space.gradient(&values);
        Self { space, values, gradient }
    }

    pub fn from_fn<F: Fn(f64) -> f64>(space: SpaceGrid, f: F) -> Self {
        Self::new(space, space.nodes_iter().map(f).collect())
    }

    pub fn value_at(&self, x: f64) -> f64 {
        self.space.interpolate(&self.values, x)
    }

    pub fn gradient_at(&self, x: f64) -> GradientSample {
        GradientSample { value: self.space.interpolate(&self.gradient, x), clamped: !self.space.contains(x) }
    }

    pub fn sup_distance(&self, other: &ValueSlice) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `(1 − λ)·self + λ·other`.
    pub fn blend(&self, other: &ValueSlice, lambda: f64) -> ValueSlice {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
        ValueSlice::new(self.space, values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample {
    pub value: f64,
    pub clamped: bool,
}

/// Counts gradient queries that had to be clamped to the grid.
#[derive(Debug, Default, Clone, Copy)]
pub struct QueryTally {
    pub total: usize,
    pub clamped: usize,
}

impl QueryTally {
    pub fn record(&mut self, sample: GradientSample, x: f64) -> f64 {
        self.total += 1;
        if sample.clamped {
            self.clamped += 1;
            log::warn!("gradient query at x = {x} clamped to the grid");
        }
        sample.value
    }

    pub fn finish(&self) -> Result<()> {
        if self.total > 0 {
            let fraction = self.clamped as f64 / self.total as f64;
            if fraction > CLAMP_LIMIT {
                return Err(MfgError::DomainTooSmall { fraction });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub space: SpaceGrid,
    pub time: TimeGrid,
    /// `values[m][i] = u(x_i, t_m)`.
    pub values: Vec<Vec<f64>>,
    pub gradient: Vec<Vec<f64>>,
    pub v_max: f64,
    /// Fraction of population nodes whose argmin sat on `±v_max`.
    pub saturation: f64,
}

impl ValueGrid {
    pub fn slice(&self, m: usize) -> ValueSlice {
        ValueSlice { space: self.space, values: self.values[m].clone(), gradient: self.gradient[m].clone() }
    }

    pub fn value_at(&self, x: f64, m: usize) -> f64 {
        self.space.interpolate(&self.values[m], x)
    }

    /// Linear interpolation of the stored gradient at `x` on slice `m`.
    pub fn gradient_at(&self, x: f64, m: usize) -> GradientSample {
        GradientSample { value: self.space.interpolate(&self.gradient[m], x), clamped: !self.space.contains(x) }
    }

    pub fn regularity_report(&self, t1: f64) -> RegularityReport {
        regularity_report(self, t1)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "x", "u", "du_dx"])?;
        for (m, t) in self.time.times().enumerate() {
            for i in 0..self.space.nodes {
                w.write_record([
                    fmt_f64(t),
                    fmt_f64(self.space.node(i)),
                    fmt_f64(self.values[m][i]),
                    fmt_f64(self.gradient[m][i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Discrete versions of the bound, Lipschitz and semiconcavity constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub max_abs: f64,
    pub lip_const: f64,
    /// `max (u[i+1] + u[i−1] − 2u[i]) / dx²` over slices with `t ≤ t₁`.
    pub semiconcavity_const: f64,
}

impl RegularityReport {
    /// Every constant of `self` within `slack` times the matching constant of `reference`.
    pub fn within(&self, reference: &RegularityReport, slack: f64) -> bool {
        let ok = |c: f64, r: f64| c <= r + (slack - 1.0) * r.abs() + 1e-9;
        ok(self.max_abs, reference.max_abs)
            && ok(self.lip_const, reference.lip_const)
            && ok(self.semiconcavity_const, reference.semiconcavity_const)
    }
}

pub fn regularity_report(vg: &ValueGrid, t1: f64) -> RegularityReport {
    let dx = vg.space.dx();
    let last = vg.time.index_at_or_before(t1);
    let mut max_abs = 0.0f64;
    let mut lip = 0.0f64;
    for row in &vg.values {
        for w in row.windows(2) {
            lip = lip.max((w[1] - w[0]).abs() / dx);
        }
        max_abs = row.iter().fold(max_abs, |a, v| a.max(v.abs()));
    }
    let mut semi = f64::NEG_INFINITY;
    for row in &vg.values[..=last] {
        for w in row.windows(3) {
            semi = semi.max((w[2] + w[0] - 2.0 * w[1]) / (dx * dx));
        }
    }
    RegularityReport { max_abs, lip_const: lip, semiconcavity_const: semi }
}

/// Regularity constants of a single slice (the fixed-point iterates `Φ`).
pub fn slice_regularity(slice: &ValueSlice) -> RegularityReport {
    let dx = slice.space.dx();
    let v = &slice.values;
    RegularityReport {
        max_abs: v.iter().fold(0.0, |a, x| a.max(x.abs())),
        lip_const: v.windows(2).map(|w| (w[1] - w[0]).abs() / dx).fold(0.0, f64::max),
        semiconcavity_const: v
            .windows(3)
            .map(|w| (w[2] + w[0] - 2.0 * w[1]) / (dx * dx))
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Control bound from coercivity: the smallest `v` with
/// `L(x, ±v) ≥ L(x, 0) + Lip(ψ)·v` at every probe point, doubled.
pub fn default_v_max(fam: &HamiltonianFamily, traj: &TrajectoryEnsemble) -> Result<f64> {
    let pop = &traj.states[0];
    let vel = &traj.velocities[0];
    let (mut lo, mut hi) = pop.hull_1d();
    if hi - lo < 1e-9 {
        let c = 0.5 * (lo + hi);
        let w = if fam.dynamics() == Dynamics::StateScaled { 0.25 * c.abs() } else { 1.0 };
        lo = c - w;
        hi = c + w;
    }
    let lip = fam.terminal.lipschitz_estimate_1d(traj.states.last().unwrap(), lo, hi, 201);
    let probes: Vec<f64> = (0..9).map(|k| lo + (hi - lo) * k as f64 / 8.0).collect();
    let base: Vec<f64> = probes.iter().map(|&x| fam.lagrangian(&[x], &[0.0], pop, vel)).collect();
    let step = 0.01;
    for k in 1..=100_000 {
        let v = k as f64 * step;
        let dominated = probes
            .iter()
            .zip(&base)
            .all(|(&x, &l0)| [v, -v].iter().all(|&s| fam.lagrangian(&[x], &[s], pop, vel) >= l0 + lip * v));
        if dominated {
            return Ok((2.0 * v).max(1.0));
        }
    }
    Err(MfgError::InvalidConfig("Lagrangian is not coercive on the probe points; set v_max".into()))
}

/// Spatial domain wide enough that characteristics of speed `≤ v_max` started
/// in the hull of `x0` stay inside for `duration`.
pub fn computational_domain(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    v_max: f64,
    duration: f64,
    nodes: usize,
) -> Result<SpaceGrid> {
    if x0.dim() != 1 {
        return Err(MfgError::UnsupportedDimension { dim: x0.dim(), context: "HJB grid" });
    }
    if nodes < 8 {
        return Err(MfgError::InvalidConfig(format!("need at least 8 grid nodes, got {nodes}")));
    }
    let (lo, hi) = x0.hull_1d();
    let intervals = (nodes - 1) as f64;
    match fam.dynamics() {
        Dynamics::Direct => {
            let mut core = hi - lo + 2.0 * v_max * duration;
            if core <= 1e-12 {
                core = 2.0;
            }
            let dx = core / (intervals - 6.0);
            let pad = 0.5 * (core - (hi - lo)) + 3.0 * dx;
            SpaceGrid::new(lo - pad, hi + pad, nodes)
        }
        Dynamics::StateScaled => {
            if lo > 0.0 {
                let inner = 0.25 * lo;
                let outer = hi + v_max * duration / hi;
                let dx = (outer - inner) / (intervals - 3.0);
                SpaceGrid::new(inner, outer + 3.0 * dx, nodes)
            } else if hi < 0.0 {
                let inner = 0.25 * hi;
                let outer = lo + v_max * duration / lo;
                let dx = (inner - outer) / (intervals - 3.0);
                SpaceGrid::new(outer - 3.0 * dx, inner, nodes)
            } else {
                Err(MfgError::InvalidConfig("state-scaled dynamics need initial samples bounded away from 0".into()))
            }
        }
    }
}

/// Resolves `v_max` and the spatial grid for a backward solve along `traj`.
pub fn resolve_grid(fam: &HamiltonianFamily, traj: &TrajectoryEnsemble, cfg: &GridConfig) -> Result<(SpaceGrid, f64)> {
    let v_max = match cfg.v_max {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(v) => return Err(MfgError::InvalidConfig(format!("v_max = {v} must be positive"))),
        None => default_v_max(fam, traj)?,
    };
    let space = match cfg.domain {
        Some((lo, hi)) => SpaceGrid::new(lo, hi, cfg.nodes)?,
        None => computational_domain(fam, &traj.states[0], v_max, traj.time.end - traj.time.start, cfg.nodes)?,
    };
    Ok((space, v_max))
}

pub fn solve_backward(fam: &HamiltonianFamily, traj: &TrajectoryEnsemble, cfg: &GridConfig) -> Result<ValueGrid> {
    let (space, v_max) = resolve_grid(fam, traj, cfg)?;
    solve_backward_on(fam, traj, space, v_max, cfg.controls)
}

/// Backward sweep on an explicit grid.
pub fn solve_backward_on(
    fam: &HamiltonianFamily,
    traj: &TrajectoryEnsemble,
    space: SpaceGrid,
    v_max: f64,
    controls: usize,
) -> Result<ValueGrid> {
    if traj.dim() != 1 {
        return Err(MfgError::UnsupportedDimension { dim: traj.dim(), context: "HJB grid" });
    }
    if controls < 2 {
        return Err(MfgError::InvalidConfig("need at least two controls".into()));
    }
    let time = traj.time;
    let steps = time.steps;
    let dt = time.dt();
    let nodes: Vec<f64> = space.nodes_iter().collect();
    let dv = 2.0 * v_max / (controls - 1) as f64;
    let control = |k: usize| if k + 1 == controls { v_max } else { -v_max + k as f64 * dv };
    let dynamics = fam.dynamics();

    let terminal_law = &traj.states[steps];
    let frozen_terminal = fam.terminal.freeze(terminal_law);
    let mut values = vec![Vec::new(); steps + 1];
    values[steps] = nodes.iter().map(|&x| frozen_terminal.value(&[x])).collect();

    let mut saturated = 0usize;
    let mut population_nodes = 0usize;
    for m in (0..steps).rev() {
        let next = &values[m + 1];
        let running = fam.slice_lagrangian(&nodes, &traj.states[m], &traj.velocities[m]);
        let (plo, phi) = traj.states[m].hull_1d();
        let solved: Vec<(f64, usize)> = nodes
            .par_iter()
            .enumerate()
            .map(|(i, &x)| {
                let mut best = f64::INFINITY;
                let mut arg = 0usize;
                for k in 0..controls {
                    let v = control(k);
                    let foot = match dynamics {
                        Dynamics::Direct => x + v * dt,
                        Dynamics::StateScaled => x + v / x * dt,
                    };
                    let c = dt * running.cost(i, x, v) + space.interpolate(next, foot);
                    // Strict comparison keeps the smallest control index on ties.
                    if c < best {
                        best = c;
                        arg = k;
                    }
                }
                (best, arg)
            })
            .collect();
        for (&x, &(_, arg)) in nodes.iter().zip(&solved) {
            if x >= plo && x <= phi {
                population_nodes += 1;
                if arg == 0 || arg + 1 == controls {
                    saturated += 1;
                }
            }
        }
        if solved.iter().any(|(v, _)| !v.is_finite()) {
            return Err(MfgError::BlowUp { step: m });
        }
        values[m] = solved.into_iter().map(|(v, _)| v).collect();
    }

    let saturation = if population_nodes == 0 { 0.0 } else { saturated as f64 / population_nodes as f64 };
    if saturation > SATURATION_LIMIT {
        return Err(MfgError::ControlSaturation { fraction: saturation, v_max });
    }
    let gradient = values.iter().map(|row| space.gradient(row)).collect();
    Ok(ValueGrid { space, time, values, gradient, v_max, saturation })
}

/// Largest pointwise residual of `−u_t + H(x, D_xu, X, Ẋ)` for a candidate
/// value function, using centred differences on interior space-time nodes.
pub fn hjb_residual<F>(fam: &HamiltonianFamily, traj: &TrajectoryEnsemble, space: &SpaceGrid, value: F) -> f64
where
    F: Fn(f64, usize) -> f64,
{
    let time = traj.time;
    let dt = time.dt();
    let dx = space.dx();
    let mut worst = 0.0f64;
    for m in 1..time.steps {
        for i in 1..space.nodes - 1 {
            let x = space.node(i);
            let ut = (value(x, m + 1) - value(x, m - 1)) / (2.0 * dt);
            let ux = (value(x + dx, m) - value(x - dx, m)) / (2.0 * dx);
            let h = fam.hamiltonian(&[x], &[ux], &traj.states[m], &traj.velocities[m]);
            worst = worst.max((-ut + h).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{CustomHamiltonian, LawFunction};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn static_traj(samples: Vec<f64>, t_end: f64, steps: usize) -> TrajectoryEnsemble {
        let x0 = Ensemble::from_scalars(samples).unwrap();
        TrajectoryEnsemble::stationary(&x0, TimeGrid::new(0.0, t_end, steps).unwrap())
    }

    fn free(terminal: LawFunction) -> HamiltonianFamily {
        HamiltonianFamily::quadratic_coupled(0.0, LawFunction::Zero, terminal)
    }

    #[test]
    fn zero_problem_has_zero_value() {
        let traj = static_traj(vec![-0.5, 0.5], 1.0, 20);
        let vg =
            solve_backward(&free(LawFunction::Zero), &traj, &GridConfig { v_max: Some(2.0), ..Default::default() })
                .unwrap();
        assert!(vg.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn hopf_lax_linear_terminal() {
        let alpha = 0.6;
        let t_end = 1.0;
        let traj = static_traj(vec![-1.0, 0.0, 1.0], t_end, 100);
        // v = −α lies on the control set (step 0.02).
        let cfg = GridConfig { nodes: 201, controls: 201, v_max: Some(2.0), domain: None };
        let vg = solve_backward(&free(LawFunction::Linear(vec![alpha])), &traj, &cfg).unwrap();
        for m in [0, 37, 99] {
            let t = vg.time.time(m);
            for x in [-1.0, -0.3, 0.4, 1.0] {
                let exact = alpha * x - alpha * alpha * (t_end - t) / 2.0;
                assert_abs_diff_eq!(vg.value_at(x, m), exact, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn constant_running_cost_gives_time_to_go() {
        let c = CustomHamiltonian {
            hamiltonian: Arc::new(|_x, p, _y, _z| 0.5 * p[0] * p[0] - 1.0),
            lagrangian: Arc::new(|_x, v, _y, _z| 0.5 * v[0] * v[0] + 1.0),
            dp_hamiltonian: Arc::new(|_x, p, _y, _z| vec![p[0]]),
            dx_hamiltonian: None,
            contraction: 0.0,
        };
        let fam = HamiltonianFamily::custom(c, LawFunction::Zero);
        let traj = static_traj(vec![0.0, 1.0], 2.0, 40);
        let vg = solve_backward(&fam, &traj, &GridConfig { nodes: 51, controls: 21, v_max: Some(1.0), domain: None })
            .unwrap();
        for (m, t) in vg.time.times().enumerate() {
            for &u in &vg.values[m] {
                assert_abs_diff_eq!(u, 2.0 - t, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn refinement_does_not_increase_hopf_lax_error() {
        // ψ(x) = x²/2 keeps the interpolation error visible.
        let psi = LawFunction::MeanSquareDistance { weight: 0.5 };
        let mut errors = Vec::new();
        for level in 0..3 {
            let scale = 1usize << level;
            let traj = static_traj(vec![0.0], 0.5, 25 * scale);
            let cfg = GridConfig {
                nodes: 50 * scale + 1,
                controls: 40 * scale + 1,
                v_max: Some(2.0),
                domain: Some((-1.0, 1.0)),
            };
            let vg = solve_backward(&free(psi.clone()), &traj, &cfg).unwrap();
            // u(x, t) = x² / (2(1 + T − t)).
            let err = (0..=vg.time.steps)
                .flat_map(|m| {
                    let tau = 0.5 - vg.time.time(m);
                    let vg = &vg;
                    (0..vg.space.nodes).filter_map(move |i| {
                        let x = vg.space.node(i);
                        (x.abs() <= 0.5).then(|| (vg.values[m][i] - x * x / (2.0 * (1.0 + tau))).abs())
                    })
                })
                .fold(0.0, f64::max);
            errors.push(err);
        }
        assert!(errors[1] <= 1.1 * errors[0] && errors[2] <= 1.1 * errors[1], "{errors:?}");
        assert!(errors[2] < 0.6 * errors[0], "{errors:?}");
    }

    #[test]
    fn saturation_is_reported() {
        let traj = static_traj(vec![-1.0, 1.0], 1.0, 20);
        let cfg = GridConfig { nodes: 41, controls: 11, v_max: Some(0.1), domain: None };
        let err = solve_backward(&free(LawFunction::Linear(vec![3.0])), &traj, &cfg).unwrap_err();
        assert!(matches!(err, MfgError::ControlSaturation { .. }));
    }

    #[test]
    fn gradient_queries() {
        let space = SpaceGrid::new(-1.0, 1.0, 41).unwrap();
        let zero = ValueSlice::from_fn(space, |_| 0.0);
        assert_eq!(zero.gradient_at(0.3).value, 0.0);
        let lin = ValueSlice::from_fn(space, |x| 1.7 * x);
        assert_abs_diff_eq!(lin.gradient_at(-0.42).value, 1.7, epsilon = 1e-12);
        let par = ValueSlice::from_fn(space, |x| x * x);
        assert_abs_diff_eq!(par.gradient_at(0.0).value, 0.0, epsilon = 1e-14);

        let mut tally = QueryTally::default();
        for k in 0..99 {
            tally.record(lin.gradient_at(-1.0 + k as f64 * 0.02), 0.0);
        }
        tally.record(lin.gradient_at(3.0), 3.0);
        assert!(tally.finish().is_ok());
        tally.record(lin.gradient_at(3.0), 3.0);
        assert!(matches!(tally.finish(), Err(MfgError::DomainTooSmall { .. })));
    }

    fn grid_of(f: impl Fn(f64) -> f64) -> ValueGrid {
        let space = SpaceGrid::new(-1.0, 1.0, 21).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let row: Vec<f64> = space.nodes_iter().map(f).collect();
        let values = vec![row; 3];
        let gradient = values.iter().map(|r| space.gradient(r)).collect();
        ValueGrid { space, time, values, gradient, v_max: 1.0, saturation: 0.0 }
    }

    #[test]
    fn regularity_examples() {
        let r = grid_of(|_| 0.0).regularity_report(0.9);
        assert_eq!((r.max_abs, r.lip_const), (0.0, 0.0));
        assert_eq!(r.semiconcavity_const, 0.0);

        let r = grid_of(|x| 2.5 * x).regularity_report(0.9);
        assert_abs_diff_eq!(r.max_abs, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lip_const, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.semiconcavity_const, 0.0, epsilon = 1e-9);

        let r = grid_of(|x| -x * x).regularity_report(0.9);
        // Largest slope between nodes 0.9 and 1.0 is 1.9; the continuum value is 2.
        assert_abs_diff_eq!(r.lip_const, 1.9, epsilon = 1e-9);
        assert_abs_diff_eq!(r.semiconcavity_const, -2.0, epsilon = 1e-9);
    }

    #[test]
    fn default_v_max_follows_the_coercivity_rule() {
        // L = v²/2, Lip(ψ) = 1 on the hull ⇒ v = 2, doubled to 4.
        let traj = static_traj(vec![-1.0, 1.0], 1.0, 10);
        let v = default_v_max(&free(LawFunction::Linear(vec![1.0])), &traj).unwrap();
        assert_abs_diff_eq!(v, 4.0, epsilon = 0.03);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn raising_the_terminal_cost_never_lowers_the_value(
            a in -1.0f64..1.0, b in -0.5f64..0.5, lift in 0.0f64..0.5, freq in 0.5f64..2.0
        ) {
            let traj = static_traj(vec![-0.5, 0.5], 0.5, 20);
            let low = LawFunction::Custom {
                value: Arc::new(move |x, _| a * x[0] + b * (freq * x[0]).sin()),
                gradient: None,
            };
            let high = LawFunction::Custom {
                value: Arc::new(move |x, _| a * x[0] + b * (freq * x[0]).sin() + lift * (1.0 + x[0].cos())),
                gradient: None,
            };
            let fam_low = free(low);
            let fam_high = free(high);
            let lo = solve_backward_on(&fam_low, &traj, SpaceGrid::new(-2.0, 2.0, 61).unwrap(), 3.0, 41).unwrap();
            let hi = solve_backward_on(&fam_high, &traj, SpaceGrid::new(-2.0, 2.0, 61).unwrap(), 3.0, 41).unwrap();
            for (rl, rh) in lo.values.iter().zip(&hi.values) {
                for (l, h) in rl.iter().zip(rh) {
                    prop_assert!(h >= l);
                }
            }
        }
    }
}
