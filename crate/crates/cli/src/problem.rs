//! JSON problem documents.
//!
//! ```json
//! {
//!   "family": "lq",
//!   "beta": 0.0,
//!   "T": 1.0,
//!   "q": 2.0,
//!   "potential": { "kind": "zero" },
//!   "terminal": { "kind": "quadratic", "params": { "a": 1.0, "b": 0.0, "c": 0.0 } },
//!   "initial": { "kind": "uniform", "params": { "lo": -1.0, "hi": 1.0 }, "N": 64 },
//!   "solver": { "nodes": 201, "steps": 200, "controls": 201, "v_max": 4.0 }
//! }
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, Normal};

use emfg_core::analytic::lq_coefficients;
use emfg_core::family::{Coefficient, HamiltonianFamily, LawFunction, QuadraticLaw, QuarticCoefficients};
use emfg_core::mfg::SolverConfig;
use emfg_core::{Ensemble, MfgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// `H = |p + βEZ|²/2 + V(x, X)` with any supported potential.
    Quadratic,
    /// Same Hamiltonian, restricted to quadratic potentials so the Riccati reference applies.
    Lq,
    /// `L = v²/2 + x⁴ + U`, `ẋ = v/x`, terminal `A·x⁴ + B`.
    Quartic,
}

/// Law-dependent scalar functions of `(x, X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostKind {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `slope·x`.
    Linear {
        slope: f64,
    },
    /// `weight·E|x − X|²`.
    MomentQuadratic {
        weight: f64,
    },
    /// `½a·x² + b·x + c`.
    Quadratic {
        a: f64,
        b: f64,
        c: f64,
    },
    /// `a·x⁴ + b`.
    Quartic {
        a: f64,
        b: f64,
    },
}

impl CostKind {
    pub fn to_law_function(&self) -> LawFunction {
        match *self {
            CostKind::Zero => LawFunction::Zero,
            CostKind::Constant { value } => LawFunction::Constant(value),
            CostKind::Linear { slope } => LawFunction::Linear(vec![slope]),
            CostKind::MomentQuadratic { weight } => LawFunction::MeanSquareDistance { weight },
            CostKind::Quadratic { a, b, c } => LawFunction::Quadratic(QuadraticLaw::scalar(a, b, c)),
            CostKind::Quartic { a, b } => {
                LawFunction::Quartic { a: Coefficient::Constant(a), b: Coefficient::Constant(b) }
            }
        }
    }

    fn values(&self) -> Vec<f64> {
        match *self {
            CostKind::Zero => vec![],
            CostKind::Constant { value } => vec![value],
            CostKind::Linear { slope } => vec![slope],
            CostKind::MomentQuadratic { weight } => vec![weight],
            CostKind::Quadratic { a, b, c } => vec![a, b, c],
            CostKind::Quartic { a, b } => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialRecipe {
    /// Inline samples, or a one-column CSV (header `x0`) relative to the problem file.
    Samples {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    /// Quantile midpoints of the uniform law on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Quantile midpoints of a normal law.
    GaussianLike { mean: f64, std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialDoc {
    kind: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    params: Value,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InitialDoc", into = "InitialDoc")]
pub struct Initial {
    pub recipe: InitialRecipe,
    pub n: Option<usize>,
}

impl TryFrom<InitialDoc> for Initial {
    type Error = String;

    fn try_from(doc: InitialDoc) -> std::result::Result<Self, String> {
        let tagged = serde_json::json!({ "kind": doc.kind, "params": doc.params });
        let recipe = serde_json::from_value(tagged).map_err(|e| format!("initial: {e}"))?;
        Ok(Self { recipe, n: doc.n })
    }
}

impl From<Initial> for InitialDoc {
    fn from(initial: Initial) -> Self {
        let tagged = serde_json::to_value(&initial.recipe).expect("recipe serializes");
        InitialDoc {
            kind: tagged["kind"].as_str().expect("tagged").to_string(),
            params: tagged.get("params").cloned().unwrap_or(Value::Null),
            n: initial.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterSection {
    pub probes: usize,
}

impl Default for MasterSection {
    fn default() -> Self {
        Self { probes: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub runs: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { runs: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    pub trials: usize,
    /// Random directions for the second-derivative form.
    pub directions: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self { trials: 10_000, directions: 32 }
    }
}

fn default_q() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub family: FamilyKind,
    #[serde(default)]
    pub beta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub potential: CostKind,
    #[serde(default)]
    pub terminal: CostKind,
    pub initial: Initial,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master: Option<MasterSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckSection>,
}

/// A problem ready to run.
pub struct Built {
    pub family: HamiltonianFamily,
    pub initial: Ensemble,
    pub config: SolverConfig,
}

fn schema(msg: impl Into<String>) -> MfgError {
    MfgError::Schema(msg.into())
}

/// Sets `a.b.c = value` in a JSON document; the value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| schema(format!("override `{assignment}` is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| schema(format!("override path `{key}` crosses a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn parse_problem_str(text: &str, overrides: &[String]) -> Result<Problem> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let problem: Problem = serde_json::from_value(doc).map_err(|e| schema(e.to_string()))?;
    problem.validate()?;
    Ok(problem)
}

pub fn parse_problem(path: &Path, overrides: &[String]) -> Result<Problem> {
    let text = fs::read_to_string(path)?;
    parse_problem_str(&text, overrides)
}

/// Canonical serialization: fixed key order, defaults made explicit.
pub fn emit(problem: &Problem) -> String {
    serde_json::to_string_pretty(problem).expect("problem serializes")
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(schema(format!("{name} must be a finite number")))
            }
        };
        finite("beta", self.beta)?;
        finite("T", self.horizon)?;
        finite("q", self.q)?;
        for v in self.potential.values().into_iter().chain(self.terminal.values()) {
            finite("potential/terminal params", v)?;
        }
        if !(self.horizon > 0.0) {
            return Err(schema("T: expected a positive horizon"));
        }
        if !(self.q >= 1.0) {
            return Err(schema("q: expected q >= 1"));
        }
        match self.family {
            FamilyKind::Quadratic | FamilyKind::Lq => {
                if self.beta == -1.0 {
                    return Err(MfgError::SingularCoupling);
                }
                if matches!(self.potential, CostKind::Quartic { .. }) {
                    return Err(schema("potential: quartic kind is only valid as a terminal cost"));
                }
                if self.family == FamilyKind::Lq && matches!(self.terminal, CostKind::Quartic { .. }) {
                    return Err(schema("terminal: lq family needs a quadratic terminal cost"));
                }
            }
            FamilyKind::Quartic => {
                if self.beta != 0.0 {
                    return Err(schema("beta: quartic family has no velocity coupling; expected 0"));
                }
                if !matches!(self.potential, CostKind::Zero | CostKind::Constant { .. }) {
                    return Err(schema("potential: quartic family accepts zero or constant running cost"));
                }
                if !matches!(self.terminal, CostKind::Quartic { .. } | CostKind::Zero) {
                    return Err(schema("terminal: quartic family expects kind quartic"));
                }
            }
        }
        match &self.initial.recipe {
            InitialRecipe::Samples { values, path } => {
                if values.is_some() == path.is_some() {
                    return Err(schema("initial.params: give exactly one of values or path"));
                }
                if let (Some(v), Some(n)) = (values, self.initial.n) {
                    if v.len() != n {
                        return Err(schema(format!("initial.N = {n} but {} values given", v.len())));
                    }
                }
            }
            InitialRecipe::Uniform { lo, hi } => {
                if !(hi > lo) {
                    return Err(schema("initial.params: expected lo < hi"));
                }
            }
            InitialRecipe::GaussianLike { std, .. } => {
                if !(*std > 0.0) {
                    return Err(schema("initial.params.std: expected a positive value"));
                }
            }
        }
        Ok(())
    }

    pub fn particles(&self) -> usize {
        match (&self.initial.recipe, self.initial.n) {
            (InitialRecipe::Samples { values: Some(v), .. }, _) => v.len(),
            (_, Some(n)) => n,
            _ => SolverConfig::default().particles,
        }
    }

    pub fn family(&self) -> Result<HamiltonianFamily> {
        let v = self.potential.to_law_function();
        let psi = self.terminal.to_law_function();
        Ok(match self.family {
            FamilyKind::Quadratic => HamiltonianFamily::quadratic_coupled(self.beta, v, psi),
            FamilyKind::Lq => {
                let qc = HamiltonianFamily::quadratic_coupled(self.beta, v, psi);
                let coeffs = lq_coefficients(&qc, 1).ok_or_else(|| schema("lq family needs quadratic potentials"))?;
                HamiltonianFamily::lq(self.beta, coeffs)
            }
            FamilyKind::Quartic => {
                let (a, b) = match self.terminal {
                    CostKind::Quartic { a, b } => (a, b),
                    _ => (0.0, 0.0),
                };
                let mut coeffs = QuarticCoefficients::constant(a, b);
                if let CostKind::Constant { value } = self.potential {
                    coeffs.u = Some(std::sync::Arc::new(move |_: &Ensemble, _: &Ensemble| value));
                }
                HamiltonianFamily::quartic(coeffs)
            }
        })
    }

    pub fn initial_ensemble(&self, base: &Path) -> Result<Ensemble> {
        let n = self.particles();
        let mid = |i: usize| (i as f64 + 0.5) / n as f64;
        let samples = match &self.initial.recipe {
            InitialRecipe::Samples { values: Some(v), .. } => v.clone(),
            InitialRecipe::Samples { path: Some(p), .. } => {
                let file = fs::File::open(resolve(base, p))?;
                let e = Ensemble::read_csv(file, self.q)?;
                if self.initial.n.is_some_and(|n| n != e.len()) {
                    return Err(schema(format!("initial.N = {n} but the CSV holds {} samples", e.len())));
                }
                return Ok(e);
            }
            InitialRecipe::Samples { .. } => unreachable!("validated"),
            InitialRecipe::Uniform { lo, hi } => (0..n).map(|i| lo + (hi - lo) * mid(i)).collect(),
            InitialRecipe::GaussianLike { mean, std } => {
                let normal = Normal::new(*mean, *std).map_err(|e| schema(format!("initial.params: {e}")))?;
                (0..n).map(|i| normal.inverse_cdf(mid(i))).collect()
            }
        };
        Ok(Ensemble::from_scalars(samples)?.with_q(self.q))
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig { horizon: self.horizon, particles: self.particles(), ..self.solver.clone() }
    }

    /// Family, initial ensemble and solver configuration; relative paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<Built> {
        let config = self.solver_config();
        config.validate()?;
        Ok(Built { family: self.family()?, initial: self.initial_ensemble(base)?, config })
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LQ: &str = r#"{
        "family": "lq", "beta": 0.0, "T": 1.0,
        "terminal": {"kind": "quadratic", "params": {"a": 1.0, "b": 0.0, "c": 0.0}},
        "initial": {"kind": "uniform", "params": {"lo": -1.0, "hi": 1.0}, "N": 64}
    }"#;

    #[test]
    fn minimal_zero_problem() {
        let p = parse_problem_str(
            r#"{"family": "quadratic", "T": 1.0, "initial": {"kind": "samples", "params": {"values": [0.0, 1.0]}}}"#,
            &[],
        )
        .unwrap();
        let built = p.build(Path::new(".")).unwrap();
        assert_eq!(built.initial.as_slice(), &[0.0, 1.0]);
        assert_eq!(built.family.terminal_value(&[3.0], &built.initial), 0.0);
        assert_eq!(built.config.particles, 2);
    }

    #[test]
    fn lq_problem_builds_the_riccati_case() {
        let p = parse_problem_str(LQ, &[]).unwrap();
        let built = p.build(Path::new(".")).unwrap();
        assert_eq!(built.initial.len(), 64);
        assert!((built.initial.scalar(0) + 1.0 - 1.0 / 64.0).abs() < 1e-15);
        assert_eq!(built.family.terminal_value(&[2.0], &built.initial), 2.0);
        assert_eq!(built.config.horizon, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = LQ.replace(r#""beta": 0.0"#, r#""beta": 0.0, "sigma": 0.1"#);
        let err = parse_problem_str(&text, &[]).unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
        let text = LQ.replace(r#""a": 1.0"#, r#""a": 1.0, "d": 2.0"#);
        assert!(parse_problem_str(&text, &[]).is_err());
        let text = LQ.replace(r#""N": 64"#, r#""N": 64, "seed": 3"#);
        assert!(parse_problem_str(&text, &[]).is_err());
        assert!(parse_problem_str(LQ, &["solver.horizon=2".into()]).is_err());
    }

    #[test]
    fn singular_coupling_is_rejected() {
        let err = parse_problem_str(LQ, &["beta=-1".into()]).unwrap_err();
        assert_eq!(err.code(), "singular-coupling");
    }

    #[test]
    fn overrides_and_round_trip() {
        let p = parse_problem_str(LQ, &["solver.nodes=101".into(), "initial.N=8".into(), "T=2".into()]).unwrap();
        assert_eq!(p.solver.nodes, 101);
        assert_eq!(p.particles(), 8);
        assert_eq!(p.horizon, 2.0);
        let once = emit(&p);
        let again = parse_problem_str(&once, &[]).unwrap();
        assert_eq!(again, p);
        assert_eq!(emit(&again), once);
    }

    #[test]
    fn gaussian_like_is_symmetric() {
        let text = r#"{"family": "quadratic", "T": 1.0,
            "initial": {"kind": "gaussian_like", "params": {"mean": 0.5, "std": 2.0}, "N": 9}}"#;
        let e = parse_problem_str(text, &[]).unwrap().initial_ensemble(Path::new(".")).unwrap();
        for i in 0..9 {
            assert!((e.scalar(i) - 0.5 + (e.scalar(8 - i) - 0.5)).abs() < 1e-12);
        }
        assert!((e.scalar(4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_samples_resolve_relative_to_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x0.csv"), "x0\n0.5\n1.5\n").unwrap();
        let text = r#"{"family": "quartic", "T": 0.5,
            "terminal": {"kind": "quartic", "params": {"a": 0.35, "b": 0.0}},
            "initial": {"kind": "samples", "params": {"path": "x0.csv"}}}"#;
        let e = parse_problem_str(text, &[]).unwrap().initial_ensemble(dir.path()).unwrap();
        assert_eq!(e.as_slice(), &[0.5, 1.5]);
    }

    #[test]
    fn family_constraints() {
        let bad = r#"{"family": "quartic", "T": 1.0, "beta": 0.5,
            "terminal": {"kind": "quartic", "params": {"a": 1.0, "b": 0.0}},
            "initial": {"kind": "uniform", "params": {"lo": 0.5, "hi": 1.5}}}"#;
        assert!(parse_problem_str(bad, &[]).is_err());
        let bad = LQ.replace(
            r#""kind": "uniform", "params": {"lo": -1.0, "hi": 1.0}"#,
            r#""kind": "uniform", "params": {"lo": 1.0, "hi": -1.0}"#,
        );
        assert!(parse_problem_str(&bad, &[]).is_err());
    }
}
