//! Reference solutions for the linear-quadratic and quartic families.
//!
//! LQ: with `V = ½xᵀA(X)x + B(X)·x + C(X)` and `ψ = ½xᵀM(X)x + N(X)·x + Q(X)`,
//! the ansatz `u = ½xᵀΓx + Θ·x + ζ` reduces the system to
//!
//! ```text
//! Γ̇ = ΓᵀΓ + A,                     Γ(T) = M
//! Θ̇ = Γ(Θ + βEẊ) + B,              Θ(T) = N
//! ζ̇ = ½|Θ + βEẊ|² + C,             ζ(T) = Q
//! Ẋ = −ΓX − Θ/(1+β) + β/(1+β)·ΓEX,  EẊ = −(ΓEX + Θ)/(1+β)
//! ```
//!
//! Quartic: `u = x⁴p(t) + q(t)` with `p' = 8p² − 1`, `p(T) = A`, `q' = −U`,
//! `q(T) = B` and `Ẋ = −4pX`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{fmt_f64, Ensemble};
use crate::error::{MfgError, Result};
use crate::family::{Coefficient, HamiltonianFamily, LawFunction, LqCoefficients, QuadraticLaw, QuarticCoefficients};
use crate::flow::TrajectoryEnsemble;
use crate::grid::TimeGrid;

/// Entry size beyond which a Riccati solution is treated as escaped.
const ESCAPE_BOUND: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiccatiConvention {
    /// `−Γ̇ + ΓᵀΓ + A = 0`, the form obtained by substituting the ansatz.
    #[default]
    Derived,
    /// `−Γ̇ + ½ΓᵀΓ + A = 0`.
    HalfFactor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqOptions {
    pub convention: RiccatiConvention,
    /// RK4 substeps per output time step.
    pub refine: usize,
    pub max_iter: usize,
    /// Trajectory change at which the frozen-coefficient iteration stops.
    pub tol: f64,
}

impl Default for LqOptions {
    fn default() -> Self {
        Self { convention: RiccatiConvention::Derived, refine: 1, max_iter: 200, tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqState {
    pub time: TimeGrid,
    pub beta: f64,
    pub gamma: Vec<DMatrix<f64>>,
    pub theta: Vec<DVector<f64>>,
    pub zeta: Vec<f64>,
    /// `EX(t_m)`.
    pub mean: Vec<DVector<f64>>,
    pub iterations: usize,
}

impl LqState {
    pub fn dim(&self) -> usize {
        self.theta[0].len()
    }

    /// `u(x, t_m) = ½xᵀΓx + Θ·x + ζ`.
    pub fn value(&self, x: &[f64], m: usize) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.gamma[m] * &xv)) + self.theta[m].dot(&xv) + self.zeta[m]
    }

    /// `D_xu(x, t_m) = Γx + Θ` for symmetric `Γ`.
    pub fn gradient(&self, x: &[f64], m: usize) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        (&self.gamma[m] * xv + &self.theta[m]).iter().copied().collect()
    }

    /// `EẊ(t_m)`.
    pub fn mean_velocity(&self, m: usize) -> DVector<f64> {
        -(&self.gamma[m] * &self.mean[m] + &self.theta[m]) / (1.0 + self.beta)
    }

    /// `t,gamma,theta,zeta` for `d = 1`; flattened `gamma_i_j`, `theta_i` columns otherwise.
    pub fn write_coefficients_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        if d == 1 {
            header.extend(["gamma", "theta", "zeta"].map(String::from));
        } else {
            header.extend((0..d).flat_map(|i| (0..d).map(move |j| format!("gamma_{i}_{j}"))));
            header.extend((0..d).map(|i| format!("theta_{i}")));
            header.push("zeta".into());
        }
        w.write_record(&header)?;
        for (m, t) in self.time.times().enumerate() {
            let mut row = vec![fmt_f64(t)];
            row.extend(self.gamma[m].transpose().iter().map(|v| fmt_f64(*v)));
            row.extend(self.theta[m].iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.zeta[m]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Maps the quadratic potentials of a family onto LQ coefficients, when possible.
pub fn lq_coefficients(fam: &HamiltonianFamily, dim: usize) -> Option<LqCoefficients> {
    if !fam.is_quadratic_coupled() {
        return None;
    }
    Some(LqCoefficients {
        running: quadratic_form(&fam.potential, dim)?,
        terminal: quadratic_form(&fam.terminal, dim)?,
    })
}

fn quadratic_form(f: &LawFunction, dim: usize) -> Option<QuadraticLaw> {
    let eye = DMatrix::<f64>::identity(dim, dim);
    Some(match f {
        LawFunction::Zero => QuadraticLaw::zero(dim),
        LawFunction::Constant(c) => QuadraticLaw::constant(DMatrix::zeros(dim, dim), DVector::zeros(dim), *c),
        LawFunction::Linear(a) if a.len() == dim => {
            QuadraticLaw::constant(DMatrix::zeros(dim, dim), DVector::from_column_slice(a), 0.0)
        }
        // w·E|x − X|² = ½(2w)|x|² − 2w·EX·x + w·E|X|².
        LawFunction::MeanSquareDistance { weight } => {
            let w = *weight;
            QuadraticLaw {
                hessian: Coefficient::Constant(eye * (2.0 * w)),
                linear: Coefficient::Law(std::sync::Arc::new(move |law: &Ensemble| {
                    DVector::from_vec(law.mean()) * (-2.0 * w)
                })),
                constant: Coefficient::Law(std::sync::Arc::new(move |law: &Ensemble| w * law.moment(2.0))),
            }
        }
        LawFunction::Quadratic(q) => q.clone(),
        _ => return None,
    })
}

/// Coefficients frozen along a candidate trajectory on the fine grid.
struct Frozen {
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    c: Vec<f64>,
    /// Midpoint values of `A`, `B`, `C` (fine-grid interval `j`).
    a_mid: Vec<DMatrix<f64>>,
    b_mid: Vec<DVector<f64>>,
    c_mid: Vec<f64>,
    m_end: DMatrix<f64>,
    n_end: DVector<f64>,
    q_end: f64,
}

fn freeze_coefficients(coeffs: &LqCoefficients, path: &[Ensemble]) -> Frozen {
    let running = &coeffs.running;
    let mids: Vec<Ensemble> = path.windows(2).map(|w| w[0].axpby(0.5, &w[1], 0.5)).collect();
    let last = path.last().expect("nonempty path");
    Frozen {
        a: path.iter().map(|x| running.hessian.eval(x)).collect(),
        b: path.iter().map(|x| running.linear.eval(x)).collect(),
        c: path.iter().map(|x| running.constant.eval(x)).collect(),
        a_mid: mids.iter().map(|x| running.hessian.eval(x)).collect(),
        b_mid: mids.iter().map(|x| running.linear.eval(x)).collect(),
        c_mid: mids.iter().map(|x| running.constant.eval(x)).collect(),
        m_end: coeffs.terminal.hessian.eval(last),
        n_end: coeffs.terminal.linear.eval(last),
        q_end: coeffs.terminal.constant.eval(last),
    }
}

/// Cubic Hermite midpoint from endpoint values and slopes over an interval of length `h`.
fn hermite_mid<T>(y0: &T, y1: &T, d0: &T, d1: &T, h: f64) -> T
where
    for<'a> &'a T: std::ops::Add<&'a T, Output = T> + std::ops::Sub<&'a T, Output = T>,
    T: std::ops::Mul<f64, Output = T> + std::ops::Add<T, Output = T>,
{
    (y0 + y1) * 0.5 + (d0 - d1) * (h / 8.0)
}

struct LqPass {
    gamma: Vec<DMatrix<f64>>,
    theta: Vec<DVector<f64>>,
    zeta: Vec<f64>,
    mean: Vec<DVector<f64>>,
    states: Vec<Ensemble>,
}

fn riccati_rhs(g: &DMatrix<f64>, a: &DMatrix<f64>, half: bool) -> DMatrix<f64> {
    let quad = g.transpose() * g;
    if half {
        quad * 0.5 + a
    } else {
        quad + a
    }
}

fn lq_pass(fr: &Frozen, beta: f64, x0: &Ensemble, fine: TimeGrid, opts: &LqOptions) -> Result<LqPass> {
    let n = fine.steps;
    let h = fine.dt();
    let half = opts.convention == RiccatiConvention::HalfFactor;
    let k = 1.0 / (1.0 + beta);

    // Γ backward.
    let mut gamma = vec![fr.m_end.clone(); n + 1];
    for j in (0..n).rev() {
        let g = &gamma[j + 1];
        let k1 = riccati_rhs(g, &fr.a[j + 1], half);
        let k2 = riccati_rhs(&(g - &k1 * (0.5 * h)), &fr.a_mid[j], half);
        let k3 = riccati_rhs(&(g - &k2 * (0.5 * h)), &fr.a_mid[j], half);
        let k4 = riccati_rhs(&(g - &k3 * h), &fr.a[j], half);
        let next = g - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite() || v.abs() > ESCAPE_BOUND) {
            return Err(MfgError::FiniteEscape { time: fine.time(j) });
        }
        gamma[j] = next;
    }
    let gamma_dot: Vec<DMatrix<f64>> = gamma.iter().zip(&fr.a).map(|(g, a)| riccati_rhs(g, a, half)).collect();
    let gamma_mid: Vec<DMatrix<f64>> =
        (0..n).map(|j| hermite_mid(&gamma[j], &gamma[j + 1], &gamma_dot[j], &gamma_dot[j + 1], h)).collect();

    // (EX, Θ): EX forward from EX₀, Θ backward from N; linear in Θ(0), solved by superposition.
    let rhs = |g: &DMatrix<f64>, b: &DVector<f64>, m: &DVector<f64>, th: &DVector<f64>| {
        let dm = -(g * m + th) * k;
        let dth = g * (th - g * m * beta) * k + b;
        (dm, dth)
    };
    let shoot = |theta0: &DVector<f64>| -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut ms = vec![DVector::from_vec(x0.mean())];
        let mut ths = vec![theta0.clone()];
        for j in 0..n {
            let (m, th) = (&ms[j], &ths[j]);
            let (a1, b1) = rhs(&gamma[j], &fr.b[j], m, th);
            let (a2, b2) = rhs(&gamma_mid[j], &fr.b_mid[j], &(m + &a1 * (0.5 * h)), &(th + &b1 * (0.5 * h)));
            let (a3, b3) = rhs(&gamma_mid[j], &fr.b_mid[j], &(m + &a2 * (0.5 * h)), &(th + &b2 * (0.5 * h)));
            let (a4, b4) = rhs(&gamma[j + 1], &fr.b[j + 1], &(m + &a3 * h), &(th + &b3 * h));
            ms.push(m + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0));
            ths.push(th + (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (h / 6.0));
        }
        (ms, ths)
    };
    let d = x0.dim();
    let base = DVector::zeros(d);
    let (_, th_base) = shoot(&base);
    let end_base = th_base[n].clone();
    let mut jac = DMatrix::zeros(d, d);
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        let (_, th_e) = shoot(&e);
        jac.set_column(i, &(&th_e[n] - &end_base));
    }
    let theta0 = jac
        .lu()
        .solve(&(&fr.n_end - &end_base))
        .ok_or_else(|| MfgError::RootSolve("linear shooting system for Θ(0) is singular".into()))?;
    let (mean, theta) = shoot(&theta0);
    if theta.iter().chain(&mean).any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(MfgError::FiniteEscape { time: 0.0 });
    }

    let (dm, dth): (Vec<_>, Vec<_>) = (0..=n).map(|j| rhs(&gamma[j], &fr.b[j], &mean[j], &theta[j])).unzip();
    let mean_mid: Vec<DVector<f64>> =
        (0..n).map(|j| hermite_mid(&mean[j], &mean[j + 1], &dm[j], &dm[j + 1], h)).collect();
    let theta_mid: Vec<DVector<f64>> =
        (0..n).map(|j| hermite_mid(&theta[j], &theta[j + 1], &dth[j], &dth[j + 1], h)).collect();

    // ζ backward: the right side depends on t only, so Simpson on each interval.
    let zeta_rhs = |g: &DMatrix<f64>, m: &DVector<f64>, th: &DVector<f64>, c: f64| {
        let s = (th - g * m * beta) * k;
        0.5 * s.dot(&s) + c
    };
    let mut zeta = vec![fr.q_end; n + 1];
    for j in (0..n).rev() {
        let f0 = zeta_rhs(&gamma[j], &mean[j], &theta[j], fr.c[j]);
        let f1 = zeta_rhs(&gamma[j + 1], &mean[j + 1], &theta[j + 1], fr.c[j + 1]);
        let fm = zeta_rhs(&gamma_mid[j], &mean_mid[j], &theta_mid[j], fr.c_mid[j]);
        zeta[j] = zeta[j + 1] - h / 6.0 * (f0 + 4.0 * fm + f1);
    }

    // Samples forward.
    let drift = |g: &DMatrix<f64>, th: &DVector<f64>, m: &DVector<f64>, x: &Ensemble| -> Ensemble {
        let shift = (g * m * beta - th) * k;
        x.map_samples(d, |_, s| {
            let xv = DVector::from_column_slice(s);
            (-(g * xv) + &shift).iter().copied().collect()
        })
        .expect("finite drift")
    };
    let mut states = vec![x0.clone()];
    for j in 0..n {
        let x = &states[j];
        let k1 = drift(&gamma[j], &theta[j], &mean[j], x);
        let k2 = drift(&gamma_mid[j], &theta_mid[j], &mean_mid[j], &x.axpby(1.0, &k1, 0.5 * h));
        let k3 = drift(&gamma_mid[j], &theta_mid[j], &mean_mid[j], &x.axpby(1.0, &k2, 0.5 * h));
        let k4 = drift(&gamma[j + 1], &theta[j + 1], &mean[j + 1], &x.axpby(1.0, &k3, h));
        let s = k1.axpby(1.0, &k2, 2.0).axpby(1.0, &k3, 2.0).axpby(1.0, &k4, 1.0);
        states.push(x.axpby(1.0, &s, h / 6.0));
    }
    Ok(LqPass { gamma, theta, zeta, mean, states })
}

pub fn lq_solve(
    coeffs: &LqCoefficients,
    beta: f64,
    x0: &Ensemble,
    horizon: f64,
    steps: usize,
) -> Result<(LqState, TrajectoryEnsemble)> {
    lq_solve_with(coeffs, beta, x0, horizon, steps, LqOptions::default())
}

pub fn lq_solve_with(
    coeffs: &LqCoefficients,
    beta: f64,
    x0: &Ensemble,
    horizon: f64,
    steps: usize,
    opts: LqOptions,
) -> Result<(LqState, TrajectoryEnsemble)> {
    if beta == -1.0 {
        return Err(MfgError::SingularCoupling);
    }
    let time = TimeGrid::new(0.0, horizon, steps)?;
    let fine = TimeGrid::new(0.0, horizon, steps * opts.refine.max(1))?;
    let constant = coeffs.running.is_constant() && coeffs.terminal.is_constant();
    let mut path = vec![x0.clone(); fine.len()];
    let mut iterations = 0;
    let pass = loop {
        iterations += 1;
        let pass = lq_pass(&freeze_coefficients(coeffs, &path), beta, x0, fine, &opts)?;
        if constant {
            break pass;
        }
        let change = pass.states.iter().zip(&path).map(|(a, b)| a.lq_distance(b)).fold(0.0, f64::max);
        path = pass.states.clone();
        if change <= opts.tol {
            break pass;
        }
        if iterations >= opts.max_iter {
            return Err(MfgError::ContractionFailure { iterations, residual: change });
        }
    };

    let r = opts.refine.max(1);
    let pick = |j: usize| j * r;
    let state = LqState {
        time,
        beta,
        gamma: (0..=steps).map(|m| pass.gamma[pick(m)].clone()).collect(),
        theta: (0..=steps).map(|m| pass.theta[pick(m)].clone()).collect(),
        zeta: (0..=steps).map(|m| pass.zeta[pick(m)]).collect(),
        mean: (0..=steps).map(|m| pass.mean[pick(m)].clone()).collect(),
        iterations,
    };
    let states: Vec<Ensemble> = (0..=steps).map(|m| pass.states[pick(m)].clone()).collect();
    let d = x0.dim();
    let k = 1.0 / (1.0 + beta);
    let mut velocities = Vec::with_capacity(states.len());
    let mut costates = Vec::with_capacity(states.len());
    for (m, x) in states.iter().enumerate() {
        let (g, th, mean) = (&state.gamma[m], &state.theta[m], &state.mean[m]);
        let shift = (g * mean * beta - th) * k;
        velocities
            .push(x.map_samples(d, |_, s| (-(g * DVector::from_column_slice(s)) + &shift).iter().copied().collect())?);
        costates.push(x.map_samples(d, |_, s| state.gradient(s, m))?);
    }
    let traj = TrajectoryEnsemble::new(time, states, velocities, Some(costates))?;
    Ok((state, traj))
}

/// Largest gap between the oracle on its own grid and an 8× refined run.
pub fn lq_self_error(coeffs: &LqCoefficients, beta: f64, x0: &Ensemble, horizon: f64, steps: usize) -> Result<f64> {
    let (coarse, _) = lq_solve(coeffs, beta, x0, horizon, steps)?;
    let (fine, _) = lq_solve_with(coeffs, beta, x0, horizon, steps, LqOptions { refine: 8, ..LqOptions::default() })?;
    let mut worst = 0.0f64;
    for m in 0..=steps {
        worst = worst
            .max((&coarse.gamma[m] - &fine.gamma[m]).amax())
            .max((&coarse.theta[m] - &fine.theta[m]).amax())
            .max((coarse.zeta[m] - fine.zeta[m]).abs());
    }
    Ok(worst)
}

const SQRT2: f64 = std::f64::consts::SQRT_2;
/// Stable equilibrium `1/(2√2)` of `p' = 8p² − 1`.
pub const QUARTIC_EQUILIBRIUM: f64 = 1.0 / (2.0 * SQRT2);
/// Exponent rate `4√2` of the closed form.
pub const QUARTIC_RATE: f64 = 4.0 * SQRT2;

/// `p(t) = (1/(2√2))·(1 + c·e^{4√2t})/(1 − c·e^{4√2t})`.
pub fn quartic_p(c: f64, t: f64) -> f64 {
    let w = c * (QUARTIC_RATE * t).exp();
    QUARTIC_EQUILIBRIUM * (1.0 + w) / (1.0 - w)
}

/// Integration constant `c` with `p(T) = A`.
pub fn quartic_constant(a: f64, horizon: f64) -> Result<f64> {
    let s = a / QUARTIC_EQUILIBRIUM;
    if !a.is_finite() || (s + 1.0).abs() < 1e-14 {
        return Err(MfgError::RootSolve(format!("terminal value A = {a} is not reached by the closed form")));
    }
    let c = (s - 1.0) / ((s + 1.0) * (QUARTIC_RATE * horizon).exp());
    let check = quartic_p(c, horizon);
    if !((check - a).abs() <= 1e-10 * (1.0 + a.abs())) {
        return Err(MfgError::RootSolve(format!("closed form gives p(T) = {check}, expected {a}")));
    }
    Ok(c)
}

/// `X(t) = X₀·e^{−√2t}·((1 − c·e^{4√2t})/(1 − c))^{1/2}`, the exact solution of `Ẋ = −4pX`.
pub fn quartic_state(c: f64, x0: f64, t: f64) -> f64 {
    let ratio = (1.0 - c * (QUARTIC_RATE * t).exp()) / (1.0 - c);
    x0 * (-SQRT2 * t).exp() * ratio.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuarticState {
    pub time: TimeGrid,
    pub c: f64,
    pub a: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Backward RK4 of `p' = 8p² − 1` on an 8× refined grid, sampled at the output times.
    pub p_rk4: Vec<f64>,
}

impl QuarticState {
    /// `u(x, t_m) = x⁴p(t_m) + q(t_m)`.
    pub fn value(&self, x: f64, m: usize) -> f64 {
        x.powi(4) * self.p[m] + self.q[m]
    }

    pub fn closed_vs_rk4_gap(&self) -> f64 {
        self.p.iter().zip(&self.p_rk4).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn write_coefficients_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "p", "q"])?;
        for (m, t) in self.time.times().enumerate() {
            w.write_record([fmt_f64(t), fmt_f64(self.p[m]), fmt_f64(self.q[m])])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Backward RK4 for `p' = 8p² − 1` from `p(T) = a`, `refine` substeps per output step.
pub fn quartic_p_rk4(a: f64, time: TimeGrid, refine: usize) -> Vec<f64> {
    let h = time.dt() / refine as f64;
    let f = |p: f64| 8.0 * p * p - 1.0;
    let mut out = vec![a; time.len()];
    let mut p = a;
    for m in (0..time.steps).rev() {
        for _ in 0..refine {
            let k1 = f(p);
            let k2 = f(p - 0.5 * h * k1);
            let k3 = f(p - 0.5 * h * k2);
            let k4 = f(p - h * k3);
            p -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out[m] = p;
    }
    out
}

pub fn quartic_solve(
    coeffs: &QuarticCoefficients,
    x0: &Ensemble,
    horizon: f64,
    steps: usize,
) -> Result<(QuarticState, TrajectoryEnsemble)> {
    let a = match &coeffs.a {
        Coefficient::Constant(a) => *a,
        Coefficient::Law(_) => return Err(MfgError::InvalidConfig("the quartic reference needs a constant A".into())),
    };
    if x0.dim() != 1 {
        return Err(MfgError::UnsupportedDimension { dim: x0.dim(), context: "quartic family" });
    }
    if x0.as_slice().iter().any(|&x| x.abs() < 1e-8) {
        return Err(MfgError::InvalidConfig("quartic samples must stay away from 0".into()));
    }
    let time = TimeGrid::new(0.0, horizon, steps)?;
    let c = quartic_constant(a, horizon)?;
    // 1 − c·e^{kt} is monotone in t, so checking both ends detects a sign change.
    let den = |t: f64| 1.0 - c * (QUARTIC_RATE * t).exp();
    if den(0.0) * den(horizon) <= 0.0 {
        let time = (1.0 / c).ln() / QUARTIC_RATE;
        return Err(MfgError::SingularDenominator { time });
    }
    let p: Vec<f64> = time.times().map(|t| quartic_p(c, t)).collect();
    let p_rk4 = quartic_p_rk4(a, time, 8);

    // Ẋ = −4p(t)X with the exact p at the stages.
    let dt = time.dt();
    let mut states = vec![x0.clone()];
    for m in 0..steps {
        let t = time.time(m);
        let (p0, ph, p1) = (p[m], quartic_p(c, t + 0.5 * dt), p[m + 1]);
        let x = &states[m];
        let next = x.map_samples(1, |_, s| {
            let y = s[0];
            let k1 = -4.0 * p0 * y;
            let k2 = -4.0 * ph * (y + 0.5 * dt * k1);
            let k3 = -4.0 * ph * (y + 0.5 * dt * k2);
            let k4 = -4.0 * p1 * (y + dt * k3);
            vec![y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)]
        })?;
        states.push(next);
    }
    let velocities: Vec<Ensemble> =
        states.iter().zip(&p).map(|(x, &pm)| x.map_samples(1, |_, s| vec![-4.0 * pm * s[0]])).collect::<Result<_>>()?;
    let costates: Vec<Ensemble> = states
        .iter()
        .zip(&p)
        .map(|(x, &pm)| x.map_samples(1, |_, s| vec![4.0 * pm * s[0].powi(3)]))
        .collect::<Result<_>>()?;

    // q' = −U(X, Ẋ), q(T) = B(X(T)), trapezoid backward.
    let running: Vec<f64> = states.iter().zip(&velocities).map(|(x, v)| coeffs.running_cost(x, v)).collect();
    let mut q = vec![coeffs.b.eval(&states[steps]); steps + 1];
    for m in (0..steps).rev() {
        q[m] = q[m + 1] + 0.5 * dt * (running[m] + running[m + 1]);
    }

    let traj = TrajectoryEnsemble::new(time, states, velocities, Some(costates))?;
    Ok((QuarticState { time, c, a, p, q, p_rk4 }, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpaceGrid;
    use crate::hjb::hjb_residual;
    use approx::assert_abs_diff_eq;

    fn uniform(n: usize, lo: f64, hi: f64) -> Ensemble {
        Ensemble::from_scalars((0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()).unwrap()
    }

    fn scalar_lq(a: f64, b: f64, c: f64, m: f64, n: f64, q: f64) -> LqCoefficients {
        LqCoefficients { running: QuadraticLaw::scalar(a, b, c), terminal: QuadraticLaw::scalar(m, n, q) }
    }

    #[test]
    fn terminal_only_riccati() {
        let coeffs = scalar_lq(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let x0 = uniform(16, -1.0, 1.0);
        let (st, traj) = lq_solve(&coeffs, 0.0, &x0, 1.0, 50).unwrap();
        for (m, t) in st.time.times().enumerate() {
            assert_abs_diff_eq!(st.gamma[m][(0, 0)], 1.0 / (2.0 - t), epsilon = 1e-9);
            assert_abs_diff_eq!(st.theta[m][0], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(st.zeta[m], 0.0, epsilon = 1e-14);
            for i in 0..16 {
                let exact = x0.scalar(i) * (2.0 - t) / 2.0;
                assert_abs_diff_eq!(traj.states[m].scalar(i), exact, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn decoupled_constants() {
        let coeffs = scalar_lq(0.0, 0.0, 0.7, 0.0, 0.0, 0.2);
        let x0 = uniform(4, 0.0, 1.0);
        let (st, traj) = lq_solve(&coeffs, 0.3, &x0, 2.0, 20).unwrap();
        for (m, t) in st.time.times().enumerate() {
            assert_abs_diff_eq!(st.gamma[m][(0, 0)], 0.0);
            assert_abs_diff_eq!(st.zeta[m], 0.2 - 0.7 * (2.0 - t), epsilon = 1e-12);
            assert_eq!(traj.states[m], x0);
        }
    }

    #[test]
    fn coupling_with_constant_drift() {
        // N = n gives Θ ≡ n, Ẋ = −n/(1+β), ζ(t) = −(T−t)·n²/(2(1+β)²).
        let (beta, n) = (0.5, 0.6);
        let coeffs = scalar_lq(0.0, 0.0, 0.0, 0.0, n, 0.0);
        let x0 = uniform(5, -1.0, 1.0);
        let (st, traj) = lq_solve(&coeffs, beta, &x0, 1.0, 10).unwrap();
        for (m, t) in st.time.times().enumerate() {
            assert_abs_diff_eq!(st.theta[m][0], n, epsilon = 1e-12);
            assert_abs_diff_eq!(st.zeta[m], -(1.0 - t) * n * n / (2.0 * (1.0 + beta).powi(2)), epsilon = 1e-12);
            for i in 0..5 {
                assert_abs_diff_eq!(traj.states[m].scalar(i), x0.scalar(i) - t * n / (1.0 + beta), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn finite_escape_is_reported() {
        // Γ̇ = Γ² with Γ(T) = −1 escapes at T − t = 1.
        let coeffs = scalar_lq(0.0, 0.0, 0.0, -1.0, 0.0, 0.0);
        let err = lq_solve(&coeffs, 0.0, &uniform(4, -1.0, 1.0), 2.0, 400).unwrap_err();
        match err {
            MfgError::FiniteEscape { time } => assert!((time - 1.0).abs() < 0.05, "{time}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn symmetric_data_gives_even_values() {
        let fam = HamiltonianFamily::quadratic_coupled(
            0.5,
            LawFunction::MeanSquareDistance { weight: 0.5 },
            LawFunction::Quadratic(QuadraticLaw::scalar(1.0, 0.0, 0.0)),
        );
        let coeffs = lq_coefficients(&fam, 1).unwrap();
        let x0 = uniform(10, -1.0, 1.0);
        let (st, _) = lq_solve(&coeffs, fam.beta, &x0, 1.0, 40).unwrap();
        assert!(st.iterations >= 1);
        for m in 0..=40 {
            for x in [0.1, 0.5, 1.3] {
                assert_abs_diff_eq!(st.value(&[x], m), st.value(&[-x], m), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn law_dependent_coefficients_match_the_generic_hjb_residual() {
        let fam = HamiltonianFamily::quadratic_coupled(
            0.5,
            LawFunction::MeanSquareDistance { weight: 0.5 },
            LawFunction::MeanSquareDistance { weight: 1.0 },
        );
        let coeffs = lq_coefficients(&fam, 1).unwrap();
        let x0 = uniform(12, -0.8, 1.2);
        let space = SpaceGrid::new(-2.0, 2.0, 81).unwrap();
        let residual = |steps| {
            let (st, traj) = lq_solve(&coeffs, fam.beta, &x0, 1.0, steps).unwrap();
            hjb_residual(&fam, &traj, &space, |x, m| st.value(&[x], m))
        };
        // Second order in time: the exact-in-x ansatz leaves only the dt² terms.
        let (coarse, fine) = (residual(100), residual(200));
        assert!(fine < 2e-3 && coarse / fine > 3.5, "{coarse} {fine}");
        let (st, traj) = lq_solve(&coeffs, fam.beta, &x0, 1.0, 100).unwrap();
        // Terminal condition at the self-consistent X(T).
        let last = traj.time.steps;
        for x in [-1.0, 0.3] {
            assert_abs_diff_eq!(st.value(&[x], last), fam.terminal_value(&[x], &traj.states[last]), epsilon = 1e-10);
        }
        // EẊ from the coefficients equals the ensemble mean velocity.
        for m in [0, 50, 100] {
            assert_abs_diff_eq!(st.mean_velocity(m)[0], traj.velocities[m].mean()[0], epsilon = 1e-8);
        }
    }

    #[test]
    fn hjb_residual_selects_the_derived_convention() {
        let fam = HamiltonianFamily::lq(0.0, scalar_lq(1.0, 0.0, 0.0, 1.0, 0.0, 0.0));
        let Family::Lq(coeffs) = &fam.family else { unreachable!() };
        let x0 = uniform(8, -1.0, 1.0);
        let space = SpaceGrid::new(-1.5, 1.5, 61).unwrap();
        let residual = |convention| {
            let opts = LqOptions { convention, ..LqOptions::default() };
            let (st, traj) = lq_solve_with(coeffs, 0.0, &x0, 1.0, 100, opts).unwrap();
            hjb_residual(&fam, &traj, &space, |x, m| st.value(&[x], m))
        };
        let derived = residual(RiccatiConvention::Derived);
        let half = residual(RiccatiConvention::HalfFactor);
        assert!(derived < 1e-3, "{derived}");
        assert!(half > 100.0 * derived, "{half} vs {derived}");
    }

    #[test]
    fn refined_oracle_agrees() {
        let coeffs = scalar_lq(0.5, 0.1, 0.0, 1.0, -0.2, 0.0);
        let err = lq_self_error(&coeffs, 0.5, &uniform(8, -1.0, 1.0), 1.0, 50).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn two_dimensional_lq() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let coeffs = LqCoefficients {
            running: QuadraticLaw::zero(2),
            terminal: QuadraticLaw::constant(m, DVector::zeros(2), 0.0),
        };
        let x0 = Ensemble::from_points(&[vec![1.0, 1.0], vec![-1.0, 0.5]], 2.0).unwrap();
        let (st, _) = lq_solve(&coeffs, 0.0, &x0, 1.0, 200).unwrap();
        assert_abs_diff_eq!(st.gamma[0][(0, 0)], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(st.gamma[0][(1, 1)], 2.0 / 3.0, epsilon = 1e-9);
        let mut buf = Vec::new();
        st.write_coefficients_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("t,gamma_0_0,gamma_0_1,gamma_1_0,gamma_1_1,theta_0,theta_1,zeta\n"));
    }

    #[test]
    fn quartic_steady_state() {
        let coeffs = QuarticCoefficients::constant(QUARTIC_EQUILIBRIUM, 0.0);
        let x0 = uniform(8, 0.5, 1.5);
        let (st, traj) = quartic_solve(&coeffs, &x0, 0.5, 50).unwrap();
        assert_eq!(st.c, 0.0);
        assert_abs_diff_eq!(8.0 * st.p[0] * st.p[0], 1.0, epsilon = 1e-14);
        assert!(st.closed_vs_rk4_gap() < 1e-12);
        assert_abs_diff_eq!(st.value(1.2, 0), 1.2f64.powi(4) * QUARTIC_EQUILIBRIUM, epsilon = 1e-14);
        for (m, t) in traj.time.times().enumerate() {
            for i in 0..8 {
                let exact = x0.scalar(i) * (-SQRT2 * t).exp();
                assert_abs_diff_eq!(traj.states[m].scalar(i), exact, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn quartic_unit_terminal() {
        let c = quartic_constant(1.0, 1.0).unwrap();
        let s = 2.0 * SQRT2;
        assert_abs_diff_eq!(c, (s - 1.0) / ((s + 1.0) * QUARTIC_RATE.exp()), epsilon = 1e-16);
        let coeffs = QuarticCoefficients::constant(1.0, 0.0);
        let x0 = uniform(4, 0.5, 1.5);
        let (st, traj) = quartic_solve(&coeffs, &x0, 1.0, 200).unwrap();
        assert!(st.closed_vs_rk4_gap() <= 1e-8, "{}", st.closed_vs_rk4_gap());
        for (m, t) in traj.time.times().enumerate() {
            // 8p² − 1 from a centred difference of the closed form.
            let h = 1e-5;
            let dp = (quartic_p(c, t + h) - quartic_p(c, t - h)) / (2.0 * h);
            assert_abs_diff_eq!(dp, 8.0 * st.p[m].powi(2) - 1.0, epsilon = 1e-6);
            for i in 0..4 {
                assert_abs_diff_eq!(traj.states[m].scalar(i), quartic_state(c, x0.scalar(i), t), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn sign_flipped_trajectory_formula_is_not_a_solution() {
        // X₀·e^{√2t}·((c·e^{4√2t} − 1)/(c − 1))^{−1/2} against Ẋ = −4pX.
        let c = quartic_constant(1.0, 1.0).unwrap();
        let flipped = |t: f64| (-1.0 + c * (QUARTIC_RATE * t).exp()) / (c - 1.0);
        let alt = |t: f64| (SQRT2 * t).exp() * flipped(t).powf(-0.5);
        let (t, h) = (0.5, 1e-5);
        let lhs = (alt(t + h) - alt(t - h)) / (2.0 * h);
        let rhs = -4.0 * quartic_p(c, t) * alt(t);
        assert!((lhs - rhs).abs() > 1e-2);
        let ok = |t: f64| quartic_state(c, 1.0, t);
        let lhs = (ok(t + h) - ok(t - h)) / (2.0 * h);
        assert_abs_diff_eq!(lhs, -4.0 * quartic_p(c, t) * ok(t), epsilon = 1e-7);
    }

    #[test]
    fn quartic_failures() {
        let x0 = uniform(4, 0.5, 1.5);
        let unreachable = QuarticCoefficients::constant(-QUARTIC_EQUILIBRIUM, 0.0);
        assert!(matches!(quartic_solve(&unreachable, &x0, 1.0, 10), Err(MfgError::RootSolve(_))));
        // A below −1/(2√2) blows up backward in finite time.
        let escaping = QuarticCoefficients::constant(-1.0, 0.0);
        assert!(matches!(quartic_solve(&escaping, &x0, 2.0, 10), Err(MfgError::SingularDenominator { .. })));
    }

    #[test]
    fn quartic_running_cost_and_terminal_constant() {
        let mut coeffs = QuarticCoefficients::constant(QUARTIC_EQUILIBRIUM, 0.25);
        coeffs.u = Some(std::sync::Arc::new(|_x: &Ensemble, _z: &Ensemble| 2.0));
        let (st, _) = quartic_solve(&coeffs, &uniform(4, 0.5, 1.5), 0.5, 10).unwrap();
        assert_abs_diff_eq!(st.q[0], 0.25 + 2.0 * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(st.q[10], 0.25);
    }

    use crate::family::Family;
}
