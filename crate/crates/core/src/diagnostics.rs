//! Monte Carlo checks of the monotonicity hypotheses behind uniqueness.
//!
//! For a law-dependent `f(x, X)` the tested quantity is
//! `E[f(X, X) − f(X, X̃) + f(X̃, X̃) − f(X̃, X)]`, where `f(X, Y)` averages
//! `f(X_i, law Y)` over the samples of `X`. Pairs `(X, X̃)` share a sample
//! count so the two random variables live on the same probability space.
//!
//! Sampling cannot prove a universally quantified condition: `Satisfied`
//! means no violation was found in the recorded number of trials.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::ensemble::{dot, Ensemble, PairedEnsemble};
use crate::error::{MfgError, Result};
use crate::family::{HamiltonianFamily, LawFunction};

const SAMPLE_COUNTS: [usize; 4] = [1, 2, 8, 64];
/// Tolerance for the invariance spot checks.
const INVARIANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Potential: expression strictly negative.
    Potential,
    /// Terminal cost: expression nonnegative.
    Terminal,
    /// Lagrangian: expression strictly positive.
    Lagrangian,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Potential => "potential",
            Condition::Terminal => "terminal",
            Condition::Lagrangian => "lagrangian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

/// Pair attaining the recorded minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub first: PairedEnsemble,
    pub second: PairedEnsemble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub condition: Condition,
    pub trials: usize,
    /// Minimum of the oriented score: `−expr` for the potential, `expr` otherwise.
    /// The condition holds on a pair when the score is positive (nonnegative for
    /// the terminal cost).
    pub min_value: f64,
    pub argmin_trial: usize,
    pub verdict: Verdict,
    pub certificate: Option<Certificate>,
    /// For the Lagrangian check: whether `L` ignored the law on every sampled pair.
    pub law_independent: Option<bool>,
    pub note: Option<String>,
}

impl MonotonicityReport {
    /// Re-evaluates the oriented score on the stored certificate.
    pub fn reevaluate(&self, target: &CheckTarget<'_>) -> Option<f64> {
        let c = self.certificate.as_ref()?;
        Some(target.score(&c.first, &c.second))
    }

    pub fn to_json(&self, certificate_files: &[String]) -> serde_json::Value {
        serde_json::json!({
            "condition": self.condition,
            "trials": self.trials,
            "min_value": self.min_value,
            "argmin_trial": self.argmin_trial,
            "verdict": self.verdict,
            "law_independent": self.law_independent,
            "note": self.note,
            "certificate_files": certificate_files,
        })
    }

    /// `report.json` plus `certificate_first.csv`/`certificate_second.csv` when present.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        if let Some(c) = &self.certificate {
            for (name, pair) in [("certificate_first.csv", &c.first), ("certificate_second.csv", &c.second)] {
                pair.write_csv(fs::File::create(dir.join(name))?)?;
                files.push(name.to_string());
            }
        }
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.to_json(&files))?)?;
        Ok(())
    }
}

/// What a check evaluates on a pair.
pub enum CheckTarget<'a> {
    Potential(&'a LawFunction),
    Terminal(&'a LawFunction),
    Lagrangian(&'a HamiltonianFamily),
}

impl CheckTarget<'_> {
    fn condition(&self) -> Condition {
        match self {
            CheckTarget::Potential(_) => Condition::Potential,
            CheckTarget::Terminal(_) => Condition::Terminal,
            CheckTarget::Lagrangian(_) => Condition::Lagrangian,
        }
    }

    /// Oriented score: positive means the condition holds on this pair.
    pub fn score(&self, a: &PairedEnsemble, b: &PairedEnsemble) -> f64 {
        match self {
            CheckTarget::Potential(v) => -cross_expression(v, a.states(), b.states()),
            CheckTarget::Terminal(psi) => cross_expression(psi, a.states(), b.states()),
            CheckTarget::Lagrangian(fam) => lagrangian_expression(fam, a, b),
        }
    }

    fn holds(&self, score: f64) -> bool {
        match self {
            CheckTarget::Terminal(_) => score >= 0.0,
            _ => score > 0.0,
        }
    }
}

fn average_at(f: &LawFunction, points: &Ensemble, law: &Ensemble) -> f64 {
    let frozen = f.freeze(law);
    points.samples().map(|x| frozen.value(x)).sum::<f64>() / points.len() as f64
}

/// `E[f(X, X) − f(X, X̃) + f(X̃, X̃) − f(X̃, X)]`.
pub fn cross_expression(f: &LawFunction, x: &Ensemble, y: &Ensemble) -> f64 {
    average_at(f, x, x) - average_at(f, x, y) + average_at(f, y, y) - average_at(f, y, x)
}

fn lagrangian_average(fam: &HamiltonianFamily, at: &PairedEnsemble, law: &PairedEnsemble) -> f64 {
    let (xs, vs) = (at.states(), at.velocities());
    let total: f64 =
        (0..xs.len()).map(|i| fam.lagrangian(xs.sample(i), vs.sample(i), law.states(), law.velocities())).sum();
    total / xs.len() as f64
}

/// `E[L(X, Z; X, Z) − L(X̃, Z̃; X, Z) + L(X̃, Z̃; X̃, Z̃) − L(X, Z; X̃, Z̃)]`.
pub fn lagrangian_expression(fam: &HamiltonianFamily, a: &PairedEnsemble, b: &PairedEnsemble) -> f64 {
    lagrangian_average(fam, a, a) - lagrangian_average(fam, b, a) + lagrangian_average(fam, b, b)
        - lagrangian_average(fam, a, b)
}

/// For the `|p + βEZ|²/2 + V` family the Lagrangian expression should equal
/// `β|EZ − EZ̃|²` minus the potential expression; returns the discrepancy.
pub fn lagrangian_reduction_gap(fam: &HamiltonianFamily, a: &PairedEnsemble, b: &PairedEnsemble) -> Option<f64> {
    if !fam.is_quadratic_coupled() {
        return None;
    }
    let dz: Vec<f64> = a.velocities().mean().iter().zip(b.velocities().mean()).map(|(p, q)| p - q).collect();
    let reduced = fam.beta * dot(&dz, &dz) - cross_expression(&fam.potential, a.states(), b.states());
    Some((lagrangian_expression(fam, a, b) - reduced).abs())
}

/// Shapes used to draw ensembles: point masses, uniform clouds and two clusters,
/// with sample counts from `{1, 2, 8, 64}`.
pub fn sample_ensemble(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Ensemble {
    let shape = rng.gen_range(0..3);
    let centre: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut data = Vec::with_capacity(n * dim);
    match shape {
        0 => {
            for _ in 0..n {
                data.extend_from_slice(&centre);
            }
        }
        1 => {
            let width = rng.gen_range(0.05..1.5);
            for _ in 0..n {
                data.extend(centre.iter().map(|c| c + width * rng.gen_range(-1.0..1.0)));
            }
        }
        _ => {
            let other: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for i in 0..n {
                let c = if i % 2 == 0 { &centre } else { &other };
                data.extend(c.iter().map(|v| v + 0.05 * rng.gen_range(-1.0..1.0)));
            }
        }
    }
    Ensemble::new(dim, data, 2.0).expect("finite samples")
}

fn sample_pair(rng: &mut ChaCha8Rng, dim: usize) -> (PairedEnsemble, PairedEnsemble) {
    let n = SAMPLE_COUNTS[rng.gen_range(0..SAMPLE_COUNTS.len())];
    let mut draw = || {
        let x = sample_ensemble(rng, n, dim);
        let z = sample_ensemble(rng, n, dim);
        PairedEnsemble::new(x, z).expect("matching shapes")
    };
    (draw(), draw())
}

/// Independent stream for trial `k` of a seeded run.
pub fn trial_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// `f(x, X)` must not change when the samples of `X` are permuted.
fn shuffle_invariant(target: &CheckTarget<'_>, dim: usize, seed: u64) -> bool {
    let mut rng = trial_rng(seed ^ 0x5eed, usize::MAX);
    (0..8).all(|_| {
        let law = PairedEnsemble::new(sample_ensemble(&mut rng, 8, dim), sample_ensemble(&mut rng, 8, dim)).unwrap();
        let mut perm: Vec<usize> = (0..8).collect();
        for i in (1..8).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = law.permuted(&perm);
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (a, b) = match target {
            CheckTarget::Potential(f) | CheckTarget::Terminal(f) => {
                (f.value(&x, law.states()), f.value(&x, shuffled.states()))
            }
            CheckTarget::Lagrangian(fam) => (
                fam.lagrangian(&x, &v, law.states(), law.velocities()),
                fam.lagrangian(&x, &v, shuffled.states(), shuffled.velocities()),
            ),
        };
        (a - b).abs() <= INVARIANCE_TOL * (1.0 + a.abs())
    })
}

/// `L(x, v, X, Z) = L(x, v, X̃, Z̃)` at every sample point of the pair.
fn law_independent_on(fam: &HamiltonianFamily, a: &PairedEnsemble, b: &PairedEnsemble) -> bool {
    [a, b].iter().all(|p| {
        (0..p.len()).all(|i| {
            let (x, v) = (p.states().sample(i), p.velocities().sample(i));
            let l1 = fam.lagrangian(x, v, a.states(), a.velocities());
            let l2 = fam.lagrangian(x, v, b.states(), b.velocities());
            (l1 - l2).abs() <= INVARIANCE_TOL * (1.0 + l1.abs())
        })
    })
}

fn same_law(a: &PairedEnsemble, b: &PairedEnsemble, lagrangian: bool) -> bool {
    let sorted_eq = |x: &Ensemble, y: &Ensemble| x.sorted() == y.sorted();
    if lagrangian {
        // Compare joint laws through the sorted concatenated pairs.
        let joint = |p: &PairedEnsemble| {
            let pts: Vec<Vec<f64>> = (0..p.len())
                .map(|i| p.states().sample(i).iter().chain(p.velocities().sample(i)).copied().collect())
                .collect();
            Ensemble::from_points(&pts, 2.0).expect("finite").sorted()
        };
        joint(a) == joint(b)
    } else {
        sorted_eq(a.states(), b.states())
    }
}

/// Monte Carlo search for a pair violating the condition of `target`.
pub fn run_check(target: &CheckTarget<'_>, dim: usize, trials: usize, seed: u64) -> Result<MonotonicityReport> {
    if trials == 0 || dim == 0 {
        return Err(MfgError::InvalidConfig("monotonicity check needs trials > 0 and dim > 0".into()));
    }
    let condition = target.condition();
    let lagrangian = condition == Condition::Lagrangian;
    let scored: Vec<(f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = trial_rng(seed, k);
            let (a, b) = sample_pair(&mut rng, dim);
            let score = if same_law(&a, &b, lagrangian) { f64::INFINITY } else { target.score(&a, &b) };
            let free = match target {
                CheckTarget::Lagrangian(fam) => law_independent_on(fam, &a, &b),
                _ => false,
            };
            (score, free)
        })
        .collect();
    // Smallest score, earliest trial on ties.
    let (argmin_trial, min_value) =
        scored.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, &(s, _))| if s < acc.1 { (k, s) } else { acc });

    let mut note = None;
    let mut verdict = if target.holds(min_value) { Verdict::Satisfied } else { Verdict::Violated };
    if !shuffle_invariant(target, dim, seed) {
        verdict = Verdict::Inconclusive;
        note = Some("function changes under a permutation of the law samples".to_string());
    }
    if min_value.is_nan() {
        verdict = Verdict::Inconclusive;
        note = Some("expression evaluated to NaN".to_string());
    }
    let law_independent = lagrangian.then(|| scored.iter().all(|&(_, free)| free));
    if lagrangian && verdict == Verdict::Violated && law_independent == Some(true) {
        note = Some(
            "L does not depend on the law on any sampled pair; the weaker law-independence condition holds".into(),
        );
    }
    let certificate = (verdict == Verdict::Violated).then(|| {
        let mut rng = trial_rng(seed, argmin_trial);
        let (first, second) = sample_pair(&mut rng, dim);
        Certificate { first, second }
    });
    Ok(MonotonicityReport { condition, trials, min_value, argmin_trial, verdict, certificate, law_independent, note })
}

/// Potential condition: expression strictly negative on every sampled pair.
pub fn check_v_monotone(v: &LawFunction, dim: usize, trials: usize, seed: u64) -> Result<MonotonicityReport> {
    run_check(&CheckTarget::Potential(v), dim, trials, seed)
}

/// Terminal condition: expression nonnegative on every sampled pair.
pub fn check_psi_monotone(psi: &LawFunction, dim: usize, trials: usize, seed: u64) -> Result<MonotonicityReport> {
    run_check(&CheckTarget::Terminal(psi), dim, trials, seed)
}

/// Lagrangian condition: expression strictly positive on every sampled pair.
pub fn check_l_monotone(fam: &HamiltonianFamily, dim: usize, trials: usize, seed: u64) -> Result<MonotonicityReport> {
    run_check(&CheckTarget::Lagrangian(fam), dim, trials, seed)
}

/// Mixed second derivative `∂²/∂s∂r` at `0` of
/// `E L(X + sY, Z + sW; law(X + rY), law(Z + rW))`: the sum of the four
/// point/law cross blocks of the Hessian of `L` applied to the direction
/// `(Y, W)`.
pub fn second_derivative_form(
    fam: &HamiltonianFamily,
    probe: &PairedEnsemble,
    direction: &PairedEnsemble,
) -> Result<f64> {
    if probe.len() != direction.len() || probe.dim() != direction.dim() {
        return Err(MfgError::InvalidEnsemble("probe and direction must be paired".into()));
    }
    let phi = |s: f64, r: f64| {
        let at_x = probe.states().axpby(1.0, direction.states(), s);
        let at_v = probe.velocities().axpby(1.0, direction.velocities(), s);
        let law_x = probe.states().axpby(1.0, direction.states(), r);
        let law_z = probe.velocities().axpby(1.0, direction.velocities(), r);
        let total: f64 = (0..at_x.len()).map(|i| fam.lagrangian(at_x.sample(i), at_v.sample(i), &law_x, &law_z)).sum();
        total / at_x.len() as f64
    };
    let mixed = |h: f64| (phi(h, h) - phi(h, -h) - phi(-h, h) + phi(-h, -h)) / (4.0 * h * h);
    let h = 1e-3;
    let (coarse, fine) = (mixed(h), mixed(0.5 * h));
    if !coarse.is_finite() || !fine.is_finite() || (coarse - fine).abs() > 1e-4 * (1.0 + fine.abs()) {
        return Err(MfgError::NonSmoothProbe { coarse, fine });
    }
    Ok(fine)
}

/// Smallest value of the second-derivative form over random unit-scale directions.
pub fn second_derivative_min(
    fam: &HamiltonianFamily,
    probe: &PairedEnsemble,
    directions: usize,
    seed: u64,
) -> Result<f64> {
    let (n, d) = (probe.len(), probe.dim());
    let mut worst = f64::INFINITY;
    for k in 0..directions {
        let mut rng = trial_rng(seed, k);
        let mut draw = || {
            Ensemble::new(d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), probe.states().q())
                .expect("finite direction")
        };
        let dir = PairedEnsemble::new(draw(), draw())?;
        worst = worst.min(second_derivative_form(fam, probe, &dir)?);
    }
    Ok(worst)
}
