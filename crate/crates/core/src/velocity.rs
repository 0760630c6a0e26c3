//! The velocity equation `Z = −D_pH(x, P, Y, Z)` and its solution map `G(X, P, Y)`.

use crate::ensemble::Ensemble;
use crate::error::{MfgError, Result};
use crate::family::{Family, HamiltonianFamily};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for VelocityOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct VelocitySolution {
    pub velocity: Ensemble,
    pub iterations: usize,
    /// `‖Z + D_pH(x, P, Y, Z)‖_{L^q}` at the returned `Z`.
    pub residual: f64,
    /// Geometric mean of successive-change ratios; `None` for closed forms.
    pub measured_rate: Option<f64>,
    /// Successive changes `‖Z_{k+1} − Z_k‖_{L^q}`, iteration order.
    pub changes: Vec<f64>,
}

/// `G(X, P, Y)` with default tolerances.
pub fn solve_velocity(
    fam: &HamiltonianFamily,
    states: &Ensemble,
    costates: &Ensemble,
    law: &Ensemble,
) -> Result<Ensemble> {
    solve_velocity_with(fam, states, costates, law, VelocityOptions::default()).map(|s| s.velocity)
}

pub fn solve_velocity_with(
    fam: &HamiltonianFamily,
    states: &Ensemble,
    costates: &Ensemble,
    law: &Ensemble,
    opts: VelocityOptions,
) -> Result<VelocitySolution> {
    if states.len() != costates.len() || states.dim() != costates.dim() {
        return Err(MfgError::InvalidEnsemble("states and costates must be paired".into()));
    }
    match &fam.family {
        Family::QuadraticCoupled | Family::Lq(_) => {
            if fam.beta == -1.0 {
                return Err(MfgError::SingularCoupling);
            }
            // Z + βEZ = −P  ⇒  EZ = −EP/(1+β),  Z = β/(1+β)·EP − P.
            let shift: Vec<f64> = costates.mean().iter().map(|m| fam.beta / (1.0 + fam.beta) * m).collect();
            let velocity =
                costates.map_samples(costates.dim(), |_, p| p.iter().zip(&shift).map(|(pi, s)| s - pi).collect())?;
            let residual = residual(fam, states, costates, law, &velocity)?;
            Ok(VelocitySolution { velocity, iterations: 0, residual, measured_rate: None, changes: vec![] })
        }
        Family::Quartic(_) => {
            if states.dim() != 1 {
                return Err(MfgError::UnsupportedDimension { dim: states.dim(), context: "quartic family" });
            }
            let velocity = costates.map_samples(1, |i, p| {
                let x = states.scalar(i);
                vec![-p[0] / (x * x)]
            })?;
            let residual = residual(fam, states, costates, law, &velocity)?;
            Ok(VelocitySolution { velocity, iterations: 0, residual, measured_rate: None, changes: vec![] })
        }
        Family::Custom(c) => {
            if !(c.contraction < 1.0) {
                return Err(MfgError::InvalidConfig(format!(
                    "declared contraction constant {} is not below 1",
                    c.contraction
                )));
            }
            contraction_solve(fam, states, costates, law, opts)
        }
    }
}

fn step(
    fam: &HamiltonianFamily,
    states: &Ensemble,
    costates: &Ensemble,
    law: &Ensemble,
    z: &Ensemble,
) -> Result<Ensemble> {
    states.map_samples(states.dim(), |i, x| {
        fam.dp_hamiltonian(x, costates.sample(i), law, z).into_iter().map(|v| -v).collect()
    })
}

fn contraction_solve(
    fam: &HamiltonianFamily,
    states: &Ensemble,
    costates: &Ensemble,
    law: &Ensemble,
    opts: VelocityOptions,
) -> Result<VelocitySolution> {
    let mut z = costates.axpby(-1.0, costates, 0.0);
    let mut changes = Vec::new();
    for iteration in 1..=opts.max_iter {
        let next = match step(fam, states, costates, law, &z) {
            Ok(n) => n,
            Err(_) => return Err(MfgError::ContractionFailure { iterations: iteration, residual: f64::INFINITY }),
        };
        let change = next.lq_distance(&z);
        changes.push(change);
        z = next;
        if change <= opts.tol {
            let residual = residual(fam, states, costates, law, &z)?;
            if residual > 10.0 * opts.tol {
                return Err(MfgError::ContractionFailure { iterations: iteration, residual });
            }
            let measured_rate = geometric_rate(&changes, opts.tol);
            return Ok(VelocitySolution { velocity: z, iterations: iteration, residual, measured_rate, changes });
        }
    }
    let residual = residual(fam, states, costates, law, &z).unwrap_or(f64::INFINITY);
    Err(MfgError::ContractionFailure { iterations: opts.max_iter, residual })
}

/// Geometric mean of `c_{k+1}/c_k` over changes still well above round-off.
fn geometric_rate(changes: &[f64], tol: f64) -> Option<f64> {
    let floor = (tol * 1e3).max(1e-13);
    let usable: Vec<f64> = changes.iter().copied().take_while(|&c| c > floor).collect();
    // The first change reflects the starting guess, not the contraction.
    if usable.len() < 3 {
        return None;
    }
    let tail = &usable[1..];
    let k = (tail.len() - 1) as f64;
    Some((tail[tail.len() - 1] / tail[0]).powf(1.0 / k))
}

/// `‖Z + D_pH(x, P, Y, Z)‖_{L^q}` evaluated samplewise.
pub fn residual(
    fam: &HamiltonianFamily,
    states: &Ensemble,
    costates: &Ensemble,
    law: &Ensemble,
    z: &Ensemble,
) -> Result<f64> {
    let dp = states.map_samples(states.dim(), |i, x| fam.dp_hamiltonian(x, costates.sample(i), law, z))?;
    Ok(z.axpby(1.0, &dp, 1.0).lq_norm())
}
