//! Hamiltonian/Lagrangian families.
//!
//! Every evaluator takes the population state law `X` and velocity law `Z` as
//! [`Ensemble`]s and must depend on them only through their (joint) law.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{dot, Ensemble};
use crate::error::{MfgError, Result};

pub type EnsembleMap<T> = Arc<dyn Fn(&Ensemble) -> T + Send + Sync>;
pub type JointLawMap = Arc<dyn Fn(&Ensemble, &Ensemble) -> f64 + Send + Sync>;
pub type PointLawMap = Arc<dyn Fn(&[f64], &Ensemble) -> f64 + Send + Sync>;
pub type PointLawGradient = Arc<dyn Fn(&[f64], &Ensemble) -> Vec<f64> + Send + Sync>;
/// `(x, p or v, X, Z) -> scalar`.
pub type PhaseMap = Arc<dyn Fn(&[f64], &[f64], &Ensemble, &Ensemble) -> f64 + Send + Sync>;
/// `(x, p, X, Z) -> vector`.
pub type PhaseVectorMap = Arc<dyn Fn(&[f64], &[f64], &Ensemble, &Ensemble) -> Vec<f64> + Send + Sync>;

const FD_STEP: f64 = 1e-6;

/// A coefficient that is either fixed or a function of the population law.
#[derive(Clone)]
pub enum Coefficient<T> {
    Constant(T),
    Law(EnsembleMap<T>),
}

impl<T: Clone> Coefficient<T> {
    pub fn eval(&self, law: &Ensemble) -> T {
        match self {
            Coefficient::Constant(c) => c.clone(),
            Coefficient::Law(f) => f(law),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }

    pub fn constant_value(&self) -> Option<&T> {
        match self {
            Coefficient::Constant(c) => Some(c),
            Coefficient::Law(_) => None,
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Coefficient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Coefficient::Law(_) => f.write_str("Law(<fn>)"),
        }
    }
}

/// `½ xᵀA(X)x + B(X)·x + C(X)`.
#[derive(Clone, Debug)]
pub struct QuadraticLaw {
    pub hessian: Coefficient<DMatrix<f64>>,
    pub linear: Coefficient<DVector<f64>>,
    pub constant: Coefficient<f64>,
}

impl QuadraticLaw {
    pub fn constant(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Self {
        Self {
            hessian: Coefficient::Constant(hessian),
            linear: Coefficient::Constant(linear),
            constant: Coefficient::Constant(constant),
        }
    }

    /// Scalar (`d = 1`) constant-coefficient form `½ a x² + b x + c`.
    pub fn scalar(a: f64, b: f64, c: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), c)
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(DMatrix::zeros(dim, dim), DVector::zeros(dim), 0.0)
    }

    pub fn is_constant(&self) -> bool {
        self.hessian.is_constant() && self.linear.is_constant() && self.constant.is_constant()
    }
}

/// Scalar functions `f(x, X)` of a point and a population law: potentials `V`
/// and terminal costs `ψ`.
#[derive(Clone)]
pub enum LawFunction {
    Zero,
    Constant(f64),
    /// `α·x`.
    Linear(Vec<f64>),
    /// `w·E|x − X|²`.
    MeanSquareDistance {
        weight: f64,
    },
    Quadratic(QuadraticLaw),
    /// `a(X)|x|⁴ + b(X)`.
    Quartic {
        a: Coefficient<f64>,
        b: Coefficient<f64>,
    },
    Custom {
        value: PointLawMap,
        gradient: Option<PointLawGradient>,
    },
}

impl fmt::Debug for LawFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LawFunction::Zero => f.write_str("Zero"),
            LawFunction::Constant(c) => write!(f, "Constant({c})"),
            LawFunction::Linear(a) => write!(f, "Linear({a:?})"),
            LawFunction::MeanSquareDistance { weight } => {
                write!(f, "MeanSquareDistance {{ weight: {weight} }}")
            }
            LawFunction::Quadratic(q) => f.debug_tuple("Quadratic").field(q).finish(),
            LawFunction::Quartic { a, b } => f.debug_struct("Quartic").field("a", a).field("b", b).finish(),
            LawFunction::Custom { .. } => f.write_str("Custom(<fn>)"),
        }
    }
}

/// A [`LawFunction`] with its law-dependent parts evaluated once.
pub enum FrozenLaw<'a> {
    Zero,
    Constant(f64),
    Linear(&'a [f64]),
    MeanSquareDistance { weight: f64, mean: Vec<f64>, second_moment: f64 },
    Quadratic { hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64 },
    Quartic { a: f64, b: f64 },
    Custom { value: &'a PointLawMap, gradient: Option<&'a PointLawGradient>, law: &'a Ensemble },
}

impl LawFunction {
    pub fn freeze<'a>(&'a self, law: &'a Ensemble) -> FrozenLaw<'a> {
        match self {
            LawFunction::Zero => FrozenLaw::Zero,
            LawFunction::Constant(c) => FrozenLaw::Constant(*c),
            LawFunction::Linear(a) => FrozenLaw::Linear(a),
            LawFunction::MeanSquareDistance { weight } => {
                FrozenLaw::MeanSquareDistance { weight: *weight, mean: law.mean(), second_moment: law.moment(2.0) }
            }
            LawFunction::Quadratic(q) => FrozenLaw::Quadratic {
                hessian: q.hessian.eval(law),
                linear: q.linear.eval(law),
                constant: q.constant.eval(law),
            },
            LawFunction::Quartic { a, b } => FrozenLaw::Quartic { a: a.eval(law), b: b.eval(law) },
            LawFunction::Custom { value, gradient } => FrozenLaw::Custom { value, gradient: gradient.as_ref(), law },
        }
    }

    pub fn value(&self, x: &[f64], law: &Ensemble) -> f64 {
        self.freeze(law).value(x)
    }

    pub fn gradient(&self, x: &[f64], law: &Ensemble) -> Vec<f64> {
        self.freeze(law).gradient(x)
    }

    /// Largest difference quotient of `x ↦ f(x, X)` over a uniform 1-d sampling of `[lo, hi]`.
    pub fn lipschitz_estimate_1d(&self, law: &Ensemble, lo: f64, hi: f64, samples: usize) -> f64 {
        let frozen = self.freeze(law);
        let n = samples.max(2);
        let h = (hi - lo) / (n - 1) as f64;
        let vals: Vec<f64> = (0..n).map(|i| frozen.value(&[lo + i as f64 * h])).collect();
        vals.windows(2).map(|w| (w[1] - w[0]).abs() / h).fold(0.0, f64::max)
    }

    pub fn sup_norm_1d(&self, law: &Ensemble, lo: f64, hi: f64, samples: usize) -> f64 {
        let frozen = self.freeze(law);
        let n = samples.max(2);
        let h = (hi - lo) / (n - 1) as f64;
        (0..n).map(|i| frozen.value(&[lo + i as f64 * h]).abs()).fold(0.0, f64::max)
    }
}

impl FrozenLaw<'_> {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            FrozenLaw::Zero => 0.0,
            FrozenLaw::Constant(c) => *c,
            FrozenLaw::Linear(a) => dot(a, x),
            FrozenLaw::MeanSquareDistance { weight, mean, second_moment } => {
                weight * (dot(x, x) - 2.0 * dot(x, mean) + second_moment)
            }
            FrozenLaw::Quadratic { hessian, linear, constant } => {
                let xv = DVector::from_column_slice(x);
                0.5 * xv.dot(&(hessian * &xv)) + linear.dot(&xv) + constant
            }
            FrozenLaw::Quartic { a, b } => a * dot(x, x).powi(2) + b,
            FrozenLaw::Custom { value, law, .. } => value(x, law),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FrozenLaw::Zero | FrozenLaw::Constant(_) => vec![0.0; x.len()],
            FrozenLaw::Linear(a) => a.to_vec(),
            FrozenLaw::MeanSquareDistance { weight, mean, .. } => {
                x.iter().zip(mean).map(|(xi, mi)| 2.0 * weight * (xi - mi)).collect()
            }
            FrozenLaw::Quadratic { hessian, linear, .. } => {
                let xv = DVector::from_column_slice(x);
                let g = 0.5 * (hessian + hessian.transpose()) * xv + linear;
                g.iter().copied().collect()
            }
            FrozenLaw::Quartic { a, .. } => {
                let r2 = dot(x, x);
                x.iter().map(|xi| 4.0 * a * r2 * xi).collect()
            }
            FrozenLaw::Custom { value, gradient, law } => match gradient {
                Some(g) => g(x, law),
                None => central_difference(|y| value(y, law), x),
            },
        }
    }
}

pub(crate) fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = FD_STEP * (1.0 + x[k].abs());
            y[k] = x[k] + h;
            let up = f(&y);
            y[k] = x[k] - h;
            let down = f(&y);
            y[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Running (`A, B, C`) and terminal (`M, N, Q`) quadratic coefficients.
#[derive(Clone, Debug)]
pub struct LqCoefficients {
    pub running: QuadraticLaw,
    pub terminal: QuadraticLaw,
}

impl LqCoefficients {
    pub fn dim(&self) -> Option<usize> {
        self.running.hessian.constant_value().map(|m| m.nrows())
    }
}

/// `L = |v|²/2 + |x|⁴ + U(X, Z)` with dynamics `ẋ = v/x`, terminal `A(X)x⁴ + B(X)`.
#[derive(Clone)]
pub struct QuarticCoefficients {
    pub a: Coefficient<f64>,
    pub b: Coefficient<f64>,
    pub u: Option<JointLawMap>,
}

impl QuarticCoefficients {
    pub fn constant(a: f64, b: f64) -> Self {
        Self { a: Coefficient::Constant(a), b: Coefficient::Constant(b), u: None }
    }

    pub fn running_cost(&self, pop: &Ensemble, vel: &Ensemble) -> f64 {
        self.u.as_ref().map_or(0.0, |u| u(pop, vel))
    }
}

impl fmt::Debug for QuarticCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuarticCoefficients")
            .field("a", &self.a)
            .field("b", &self.b)
            .field("u", &self.u.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

/// User-supplied Hamiltonian. The velocity equation `Z = −D_pH(x, p, X, Z)` is
/// solved by fixed-point iteration, which requires the declared contraction
/// constant to be below one.
#[derive(Clone)]
pub struct CustomHamiltonian {
    pub hamiltonian: PhaseMap,
    pub lagrangian: PhaseMap,
    pub dp_hamiltonian: PhaseVectorMap,
    pub dx_hamiltonian: Option<PhaseVectorMap>,
    pub contraction: f64,
}

impl fmt::Debug for CustomHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomHamiltonian").field("contraction", &self.contraction).finish()
    }
}

#[derive(Clone, Debug)]
pub enum Family {
    /// `H = |βEZ + p|²/2 + V(x, X)`, `L = |v|²/2 + βv·EZ − V(x, X)`.
    QuadraticCoupled,
    /// Quadratic-coupled with quadratic `V` and `ψ`.
    Lq(LqCoefficients),
    Quartic(QuarticCoefficients),
    Custom(CustomHamiltonian),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyTag {
    QuadraticCoupled,
    Lq,
    Quartic,
    Custom,
}

/// How a control moves the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// `ẋ = v`.
    Direct,
    /// `ẋ = v / x` (one-dimensional, away from the origin).
    StateScaled,
}

#[derive(Clone, Debug)]
pub struct HamiltonianFamily {
    pub family: Family,
    pub beta: f64,
    pub potential: LawFunction,
    pub terminal: LawFunction,
}

impl HamiltonianFamily {
    pub fn quadratic_coupled(beta: f64, potential: LawFunction, terminal: LawFunction) -> Self {
        Self { family: Family::QuadraticCoupled, beta, potential, terminal }
    }

    pub fn lq(beta: f64, coeffs: LqCoefficients) -> Self {
        Self {
            potential: LawFunction::Quadratic(coeffs.running.clone()),
            terminal: LawFunction::Quadratic(coeffs.terminal.clone()),
            family: Family::Lq(coeffs),
            beta,
        }
    }

    pub fn quartic(coeffs: QuarticCoefficients) -> Self {
        Self {
            potential: LawFunction::Zero,
            terminal: LawFunction::Quartic { a: coeffs.a.clone(), b: coeffs.b.clone() },
            family: Family::Quartic(coeffs),
            beta: 0.0,
        }
    }

    pub fn custom(hamiltonian: CustomHamiltonian, terminal: LawFunction) -> Self {
        Self { family: Family::Custom(hamiltonian), beta: 0.0, potential: LawFunction::Zero, terminal }
    }

    /// The trivial game: `β = 0`, `V ≡ 0`, `ψ ≡ 0`.
    pub fn zero() -> Self {
        Self::quadratic_coupled(0.0, LawFunction::Zero, LawFunction::Zero)
    }

    pub fn tag(&self) -> FamilyTag {
        match self.family {
            Family::QuadraticCoupled => FamilyTag::QuadraticCoupled,
            Family::Lq(_) => FamilyTag::Lq,
            Family::Quartic(_) => FamilyTag::Quartic,
            Family::Custom(_) => FamilyTag::Custom,
        }
    }

    /// True when the Hamiltonian has the `|p + βEZ|²/2 + V` structure.
    pub fn is_quadratic_coupled(&self) -> bool {
        matches!(self.family, Family::QuadraticCoupled | Family::Lq(_))
    }

    pub fn dynamics(&self) -> Dynamics {
        match self.family {
            Family::Quartic(_) => Dynamics::StateScaled,
            _ => Dynamics::Direct,
        }
    }

    pub fn terminal_value(&self, x: &[f64], pop: &Ensemble) -> f64 {
        self.terminal.value(x, pop)
    }

    pub fn potential_value(&self, x: &[f64], pop: &Ensemble) -> f64 {
        self.potential.value(x, pop)
    }

    pub fn hamiltonian(&self, x: &[f64], p: &[f64], pop: &Ensemble, vel: &Ensemble) -> f64 {
        match &self.family {
            Family::QuadraticCoupled | Family::Lq(_) => {
                let ez = vel.mean();
                let shifted: Vec<f64> = p.iter().zip(&ez).map(|(pi, zi)| pi + self.beta * zi).collect();
                0.5 * dot(&shifted, &shifted) + self.potential.value(x, pop)
            }
            Family::Quartic(c) => 0.5 * p[0] * p[0] / (x[0] * x[0]) - x[0].powi(4) - c.running_cost(pop, vel),
            Family::Custom(c) => (c.hamiltonian)(x, p, pop, vel),
        }
    }

    pub fn lagrangian(&self, x: &[f64], v: &[f64], pop: &Ensemble, vel: &Ensemble) -> f64 {
        match &self.family {
            Family::QuadraticCoupled | Family::Lq(_) => {
                let ez = vel.mean();
                0.5 * dot(v, v) + self.beta * dot(v, &ez) - self.potential.value(x, pop)
            }
            Family::Quartic(c) => 0.5 * v[0] * v[0] + x[0].powi(4) + c.running_cost(pop, vel),
            Family::Custom(c) => (c.lagrangian)(x, v, pop, vel),
        }
    }

    pub fn dp_hamiltonian(&self, x: &[f64], p: &[f64], pop: &Ensemble, vel: &Ensemble) -> Vec<f64> {
        match &self.family {
            Family::QuadraticCoupled | Family::Lq(_) => {
                let ez = vel.mean();
                p.iter().zip(&ez).map(|(pi, zi)| pi + self.beta * zi).collect()
            }
            Family::Quartic(_) => vec![p[0] / (x[0] * x[0])],
            Family::Custom(c) => (c.dp_hamiltonian)(x, p, pop, vel),
        }
    }

    pub fn dx_hamiltonian(&self, x: &[f64], p: &[f64], pop: &Ensemble, vel: &Ensemble) -> Vec<f64> {
        match &self.family {
            Family::QuadraticCoupled | Family::Lq(_) => self.potential.gradient(x, pop),
            Family::Quartic(_) => {
                let xi = x[0];
                vec![-p[0] * p[0] / xi.powi(3) - 4.0 * xi.powi(3)]
            }
            Family::Custom(c) => match &c.dx_hamiltonian {
                Some(g) => g(x, p, pop, vel),
                None => central_difference(|y| (c.hamiltonian)(y, p, pop, vel), x),
            },
        }
    }

    /// `D_xH` for every sample at once; law-dependent parts are evaluated once.
    pub fn dx_hamiltonian_batch(
        &self,
        states: &Ensemble,
        costates: &Ensemble,
        pop: &Ensemble,
        vel: &Ensemble,
    ) -> Result<Ensemble> {
        let d = states.dim();
        match &self.family {
            Family::QuadraticCoupled | Family::Lq(_) => {
                let frozen = self.potential.freeze(pop);
                states.map_samples(d, |_, x| frozen.gradient(x))
            }
            _ => states.map_samples(d, |i, x| self.dx_hamiltonian(x, costates.sample(i), pop, vel)),
        }
    }

    /// Running cost restricted to one time slice of a 1-d grid, with every
    /// law-dependent term evaluated once.
    pub fn slice_lagrangian<'a>(&'a self, nodes: &[f64], pop: &'a Ensemble, vel: &'a Ensemble) -> SliceLagrangian<'a> {
        match &self.family {
            Family::QuadraticCoupled | Family::Lq(_) => {
                let frozen = self.potential.freeze(pop);
                SliceLagrangian::Separable {
                    linear: self.beta * vel.mean()[0],
                    node_terms: nodes.iter().map(|&x| -frozen.value(&[x])).collect(),
                }
            }
            Family::Quartic(c) => {
                let u = c.running_cost(pop, vel);
                SliceLagrangian::Separable { linear: 0.0, node_terms: nodes.iter().map(|&x| x.powi(4) + u).collect() }
            }
            Family::Custom(c) => SliceLagrangian::General { lagrangian: &c.lagrangian, pop, vel },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() {
            return Err(MfgError::InvalidConfig("beta must be finite".into()));
        }
        if let Family::Custom(c) = &self.family {
            if !(c.contraction >= 0.0 && c.contraction < 1.0) {
                return Err(MfgError::InvalidConfig(format!(
                    "custom family must declare a contraction constant in [0, 1), got {}",
                    c.contraction
                )));
            }
        }
        Ok(())
    }
}

/// Per-slice running cost used by the backward sweep.
pub enum SliceLagrangian<'a> {
    /// `v²/2 + linear·v + node_terms[i]`.
    Separable {
        linear: f64,
        node_terms: Vec<f64>,
    },
    General {
        lagrangian: &'a PhaseMap,
        pop: &'a Ensemble,
        vel: &'a Ensemble,
    },
}

impl SliceLagrangian<'_> {
    #[inline]
    pub fn cost(&self, node: usize, x: f64, v: f64) -> f64 {
        match self {
            SliceLagrangian::Separable { linear, node_terms } => 0.5 * v * v + linear * v + node_terms[node],
            SliceLagrangian::General { lagrangian, pop, vel } => lagrangian(&[x], &[v], pop, vel),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: Vec<f64>) -> Ensemble {
        Ensemble::from_scalars(v).unwrap()
    }

    fn attracting(beta: f64) -> HamiltonianFamily {
        HamiltonianFamily::quadratic_coupled(
            beta,
            LawFunction::MeanSquareDistance { weight: 0.7 },
            LawFunction::MeanSquareDistance { weight: -0.2 },
        )
    }

    #[test]
    fn quadratic_coupled_formulas() {
        let fam = attracting(0.5);
        let pop = scalar(vec![0.0, 2.0]);
        let vel = scalar(vec![1.0, 3.0]);
        // EZ = 2, V(1, X) = 0.7·E|1 − X|² = 0.7.
        assert_abs_diff_eq!(fam.hamiltonian(&[1.0], &[0.5], &pop, &vel), 0.5 * 1.5f64.powi(2) + 0.7);
        assert_abs_diff_eq!(fam.lagrangian(&[1.0], &[2.0], &pop, &vel), 2.0 + 0.5 * 2.0 * 2.0 - 0.7);
        assert_eq!(fam.dp_hamiltonian(&[1.0], &[0.5], &pop, &vel), vec![1.5]);
        assert_abs_diff_eq!(fam.dx_hamiltonian(&[1.5], &[0.0], &pop, &vel)[0], 0.7 * 2.0 * 0.5);
    }

    #[test]
    fn legendre_duality_on_a_control_grid() {
        let fam = attracting(0.8);
        let pop = scalar(vec![-0.4, 0.1, 1.3]);
        let vel = scalar(vec![0.2, -0.9, 0.5]);
        let dv = 1e-3;
        for &(x, p) in &[(0.0, 0.0), (0.3, 1.2), (-1.1, -2.0), (2.0, 0.7)] {
            let sup = (-8000..=8000)
                .map(|k| {
                    let v = k as f64 * dv;
                    -v * p - fam.lagrangian(&[x], &[v], &pop, &vel)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let h = fam.hamiltonian(&[x], &[p], &pop, &vel);
            // Quadratic sup on a grid misses by at most dv²/8.
            assert!(h - sup >= -1e-12 && h - sup <= dv * dv / 8.0 + 1e-12, "x={x} p={p}");
        }
    }

    #[test]
    fn quartic_legendre_pair_with_scaled_dynamics() {
        let fam = HamiltonianFamily::quartic(QuarticCoefficients::constant(1.0, 0.0));
        let pop = scalar(vec![1.0]);
        let (x, p) = (0.8f64, 0.3f64);
        let sup = (-40000..=40000)
            .map(|k| {
                let v = k as f64 * 1e-4;
                -(v / x) * p - fam.lagrangian(&[x], &[v], &pop, &pop)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(sup, fam.hamiltonian(&[x], &[p], &pop, &pop), epsilon = 1e-8);
    }

    #[test]
    fn terminal_lipschitz_estimate_is_bounded_by_the_analytic_constant() {
        let law = scalar(vec![-0.5, 0.5, 1.0]);
        let psi = LawFunction::MeanSquareDistance { weight: 0.5 };
        // |∂x ψ| = |x − EX| ≤ max(|lo − EX|, |hi − EX|) on [lo, hi].
        let est = psi.lipschitz_estimate_1d(&law, -2.0, 2.0, 401);
        let ex = law.mean()[0];
        assert!(est <= (2.0 + ex.abs()) + 1e-12);
        assert!(est >= (2.0 + ex.abs()) - 0.02);
    }

    #[test]
    fn custom_gradient_falls_back_to_finite_differences() {
        let f = LawFunction::Custom {
            value: Arc::new(|x: &[f64], law: &Ensemble| x[0].sin() * law.mean()[0]),
            gradient: None,
        };
        let law = scalar(vec![2.0]);
        assert_abs_diff_eq!(f.gradient(&[0.4], &law)[0], 2.0 * 0.4f64.cos(), epsilon = 1e-8);
    }

    #[test]
    fn quadratic_law_gradient_symmetrises_the_hessian() {
        let q = QuadraticLaw::constant(
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 4.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            3.0,
        );
        let f = LawFunction::Quadratic(q);
        let law = Ensemble::constant(&[0.0, 0.0], 1, 2.0).unwrap();
        let x = [0.5, -1.0];
        let fd = central_difference(|y| f.value(y, &law), &x);
        for (a, b) in f.gradient(&x, &law).iter().zip(&fd) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn evaluations_are_invariant_under_sample_permutation(seed in 0u64..500, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pop = scalar((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let vel = scalar((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let (pop2, vel2) = (pop.permuted(&perm), vel.permuted(&perm));
            let fam = attracting(rng.gen_range(-0.5..3.0));
            let x = [rng.gen_range(-2.0..2.0)];
            let p = [rng.gen_range(-2.0..2.0)];
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
            prop_assert!(close(fam.hamiltonian(&x, &p, &pop, &vel), fam.hamiltonian(&x, &p, &pop2, &vel2)));
            prop_assert!(close(fam.lagrangian(&x, &p, &pop, &vel), fam.lagrangian(&x, &p, &pop2, &vel2)));
            prop_assert!(close(fam.terminal_value(&x, &pop), fam.terminal_value(&x, &pop2)));
            prop_assert!(close(fam.potential_value(&x, &pop), fam.potential_value(&x, &pop2)));
        }
    }
}
