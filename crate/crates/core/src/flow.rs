//! Hamiltonian flow of the population in ensemble space:
//! `Ẋ = G(X, P, X)`, `Ṗ = D_xH(X, P, X, G(X, P, X))`, `X(0) = X₀`, `P(0) = D_xΦ(X₀)`.

use std::io::Write;

use crate::ensemble::{fmt_f64, law_distance, Ensemble};
use crate::error::{MfgError, Result};
use crate::family::HamiltonianFamily;
use crate::grid::TimeGrid;
use crate::hjb::{QueryTally, ValueSlice};
use crate::velocity::solve_velocity;

/// Time-indexed ensemble `(X(t_m), Ẋ(t_m))`, optionally with costates `P(t_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub time: TimeGrid,
    pub states: Vec<Ensemble>,
    pub velocities: Vec<Ensemble>,
    pub costates: Option<Vec<Ensemble>>,
}

impl TrajectoryEnsemble {
    pub fn new(
        time: TimeGrid,
        states: Vec<Ensemble>,
        velocities: Vec<Ensemble>,
        costates: Option<Vec<Ensemble>>,
    ) -> Result<Self> {
        let len = time.len();
        if states.len() != len || velocities.len() != len || costates.as_ref().is_some_and(|c| c.len() != len) {
            return Err(MfgError::InvalidEnsemble(format!("trajectory needs {len} time slices")));
        }
        let (n, d) = (states[0].len(), states[0].dim());
        let all = states.iter().chain(&velocities).chain(costates.iter().flatten());
        if all.clone().any(|e| e.len() != n || e.dim() != d) {
            return Err(MfgError::InvalidEnsemble("sample count and dimension must be constant in time".into()));
        }
        Ok(Self { time, states, velocities, costates })
    }

    /// `X(t) ≡ X₀`, `Ẋ ≡ 0`.
    pub fn stationary(x0: &Ensemble, time: TimeGrid) -> Self {
        let states = vec![x0.clone(); time.len()];
        let velocities = vec![x0.zeros_like(); time.len()];
        Self { time, states, velocities, costates: None }
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn samples(&self) -> usize {
        self.states[0].len()
    }

    pub fn final_states(&self) -> &Ensemble {
        self.states.last().expect("trajectory has at least one slice")
    }

    pub fn mean_path(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(Ensemble::mean).collect()
    }

    /// `max_m W_q(X[m], other.X[m])` (moment proxy for `d > 1`).
    pub fn max_law_distance(&self, other: &TrajectoryEnsemble) -> Result<f64> {
        let q = self.states[0].q();
        let mut worst = 0.0f64;
        for (a, b) in self.states.iter().zip(&other.states) {
            worst = worst.max(law_distance(a, b, q)?);
        }
        Ok(worst)
    }

    /// `max_m ‖(X[m+1] − X[m])/dt − V[m]‖_{L^q}`.
    pub fn finite_difference_gap(&self) -> f64 {
        let dt = self.time.dt();
        self.states
            .windows(2)
            .zip(&self.velocities)
            .map(|(w, v)| w[1].axpby(1.0 / dt, &w[0], -1.0 / dt).lq_distance(v))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "sample_index", "x", "v", "p"])?;
        for (m, t) in self.time.times().enumerate() {
            let (xs, vs) = (&self.states[m], &self.velocities[m]);
            for i in 0..xs.len() {
                let p = self.costates.as_ref().map(|c| fmt_f64(c[m].scalar(i))).unwrap_or_default();
                w.write_record([fmt_f64(t), i.to_string(), fmt_f64(xs.scalar(i)), fmt_f64(vs.scalar(i)), p])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `(X, P)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub states: Ensemble,
    pub costates: Ensemble,
    pub t: f64,
}

impl FlowState {
    /// `(E|X|^q + E|P|^q)^{1/q}`.
    pub fn norm(&self) -> f64 {
        let q = self.states.q();
        (self.states.moment(q) + self.costates.moment(q)).powf(1.0 / q)
    }
}

/// Integrates the flow with `P(0) = D_xΦ(X₀)` read from the slice gradient.
pub fn integrate_flow(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    phi: &ValueSlice,
    time: TimeGrid,
) -> Result<TrajectoryEnsemble> {
    if x0.dim() != 1 {
        return Err(MfgError::UnsupportedDimension { dim: x0.dim(), context: "grid-seeded flow" });
    }
    let mut tally = QueryTally::default();
    let p0 = x0.map_samples(1, |_, x| vec![tally.record(phi.gradient_at(x[0]), x[0])])?;
    tally.finish()?;
    integrate_flow_from(fam, x0, &p0, time)
}

fn flow_field(fam: &HamiltonianFamily, x: &Ensemble, p: &Ensemble) -> Result<(Ensemble, Ensemble)> {
    let z = solve_velocity(fam, x, p, x)?;
    let dp = fam.dx_hamiltonian_batch(x, p, x, &z)?;
    Ok((z, dp))
}

fn finite(e: &Ensemble) -> bool {
    e.as_slice().iter().all(|v| v.is_finite() && v.abs() < 1e150)
}

/// Fixed-step RK4 from explicit initial costates. The implicit velocity is
/// resolved by the velocity solver at every stage.
pub fn integrate_flow_from(
    fam: &HamiltonianFamily,
    x0: &Ensemble,
    p0: &Ensemble,
    time: TimeGrid,
) -> Result<TrajectoryEnsemble> {
    if x0.len() != p0.len() || x0.dim() != p0.dim() {
        return Err(MfgError::InvalidEnsemble("initial states and costates must be paired".into()));
    }
    warn_on_duplicates(x0);
    let dt = time.dt();
    let mut states = Vec::with_capacity(time.len());
    let mut costates = Vec::with_capacity(time.len());
    let mut velocities = Vec::with_capacity(time.len());
    let (mut x, mut p) = (x0.clone(), p0.clone());
    for m in 0..time.steps {
        // A non-finite stage surfaces as an invalid ensemble; report it as blow-up.
        let blown = |e: MfgError| match e {
            MfgError::InvalidEnsemble(_) => MfgError::BlowUp { step: m + 1 },
            other => other,
        };
        let (z1, f1) = flow_field(fam, &x, &p).map_err(blown)?;
        let (x2, p2) = (x.axpby(1.0, &z1, 0.5 * dt), p.axpby(1.0, &f1, 0.5 * dt));
        let (z2, f2) = flow_field(fam, &x2, &p2).map_err(blown)?;
        let (x3, p3) = (x.axpby(1.0, &z2, 0.5 * dt), p.axpby(1.0, &f2, 0.5 * dt));
        let (z3, f3) = flow_field(fam, &x3, &p3).map_err(blown)?;
        let (x4, p4) = (x.axpby(1.0, &z3, dt), p.axpby(1.0, &f3, dt));
        let (z4, f4) = flow_field(fam, &x4, &p4).map_err(blown)?;

        let xn = rk4_combine(&x, [&z1, &z2, &z3, &z4], dt);
        let pn = rk4_combine(&p, [&f1, &f2, &f3, &f4], dt);
        if !finite(&xn) || !finite(&pn) {
            return Err(MfgError::BlowUp { step: m + 1 });
        }
        states.push(std::mem::replace(&mut x, xn));
        costates.push(std::mem::replace(&mut p, pn));
        velocities.push(z1);
    }
    let (z_end, _) = flow_field(fam, &x, &p)?;
    states.push(x);
    costates.push(p);
    velocities.push(z_end);
    TrajectoryEnsemble::new(time, states, velocities, Some(costates))
}

fn rk4_combine(y: &Ensemble, k: [&Ensemble; 4], dt: f64) -> Ensemble {
    let s = k[0].axpby(1.0, k[1], 2.0).axpby(1.0, k[2], 2.0).axpby(1.0, k[3], 1.0);
    y.axpby(1.0, &s, dt / 6.0)
}

fn warn_on_duplicates(x0: &Ensemble) {
    let sorted = x0.sorted();
    let dups = (1..sorted.len()).filter(|&i| sorted.sample(i) == sorted.sample(i - 1)).count();
    if dups > 0 {
        log::warn!("initial ensemble has {dups} repeated samples; they follow identical paths");
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    /// `min |X_i(t) − X_j(t)| / |X_i(0) − X_j(0)|` over pairs and times.
    pub min_ratio: f64,
    pub pair: (usize, usize),
    pub time_index: usize,
    /// Pairs skipped because their initial samples coincide.
    pub excluded_pairs: usize,
}

/// Pairwise trajectory separation relative to initial separation, over the
/// time slices with `t ≤ t1` (all slices when `t1` is `None`).
pub fn separation_diagnostic(traj: &TrajectoryEnsemble, t1: Option<f64>) -> Result<SeparationReport> {
    if traj.dim() != 1 {
        return Err(MfgError::UnsupportedDimension { dim: traj.dim(), context: "separation diagnostic" });
    }
    let last = t1.map_or(traj.time.steps, |t| traj.time.index_at_or_before(t));
    let n = traj.samples();
    let x0 = &traj.states[0];
    let mut report = SeparationReport { min_ratio: f64::INFINITY, pair: (0, 0), time_index: 0, excluded_pairs: 0 };
    for i in 0..n {
        for j in i + 1..n {
            let gap0 = (x0.scalar(i) - x0.scalar(j)).abs();
            if gap0 == 0.0 {
                report.excluded_pairs += 1;
                continue;
            }
            for (m, xs) in traj.states[..=last].iter().enumerate() {
                let ratio = (xs.scalar(i) - xs.scalar(j)).abs() / gap0;
                if ratio < report.min_ratio {
                    report.min_ratio = ratio;
                    report.pair = (i, j);
                    report.time_index = m;
                }
            }
        }
    }
    if report.excluded_pairs > 0 {
        log::warn!("separation diagnostic skipped {} pairs with identical starts", report.excluded_pairs);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GronwallReport {
    /// `max_t R(t) / (1 + R(0))` over the whole horizon.
    pub constant: f64,
    /// Same ratio restricted to the first half of the horizon.
    pub half_horizon_constant: f64,
    /// `constant / half_horizon_constant`.
    pub excess: f64,
}

/// Growth of `R = ‖(X, P)‖` along a trajectory carrying costates.
pub fn gronwall_report(traj: &TrajectoryEnsemble) -> Result<GronwallReport> {
    let costates =
        traj.costates.as_ref().ok_or_else(|| MfgError::InvalidConfig("Gronwall report needs costates".into()))?;
    let norms: Vec<f64> = traj
        .states
        .iter()
        .zip(costates)
        .map(|(x, p)| FlowState { states: x.clone(), costates: p.clone(), t: 0.0 }.norm())
        .collect();
    let base = 1.0 + norms[0];
    let half = traj.time.steps / 2;
    let constant = norms.iter().fold(0.0f64, |a, r| a.max(r / base));
    let half_horizon_constant = norms[..=half].iter().fold(0.0f64, |a, r| a.max(r / base));
    Ok(GronwallReport { constant, half_horizon_constant, excess: constant / half_horizon_constant })
}
