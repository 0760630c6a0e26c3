use thiserror::Error;

pub type Result<T, E = MfgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MfgError {
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("unsupported dimension {dim} for {context}")]
    UnsupportedDimension { dim: usize, context: &'static str },

    #[error("singular coupling: beta = -1 leaves the velocity equation without a solution")]
    SingularCoupling,

    #[error("velocity contraction failed after {iterations} iterations (last residual {residual:e})")]
    ContractionFailure { iterations: usize, residual: f64 },

    #[error("control saturation on {fraction:.3} of population nodes at v_max = {v_max}; increase v_max")]
    ControlSaturation { fraction: f64, v_max: f64 },

    #[error("{fraction:.3} of gradient queries fell outside the grid; enlarge the domain")]
    DomainTooSmall { fraction: f64 },

    #[error("trajectory blew up (non-finite state) at step {step}")]
    BlowUp { step: usize },

    #[error("Riccati solution escapes to infinity near t = {time}")]
    FiniteEscape { time: f64 },

    #[error("closed-form denominator vanishes at t = {time}")]
    SingularDenominator { time: f64 },

    #[error("root solve failed: {0}")]
    RootSolve(String),

    #[error("finite differences disagree at probe (h-estimate {coarse:e}, h/2-estimate {fine:e})")]
    NonSmoothProbe { coarse: f64, fine: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("problem schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MfgError {
    /// Short machine-readable identifier, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            MfgError::InvalidEnsemble(_) => "invalid-ensemble",
            MfgError::UnsupportedDimension { .. } => "unsupported-dimension",
            MfgError::SingularCoupling => "singular-coupling",
            MfgError::ContractionFailure { .. } => "contraction-failure",
            MfgError::ControlSaturation { .. } => "control-saturation",
            MfgError::DomainTooSmall { .. } => "domain-too-small",
            MfgError::BlowUp { .. } => "blow-up",
            MfgError::FiniteEscape { .. } => "finite-escape",
            MfgError::SingularDenominator { .. } => "singular-denominator",
            MfgError::RootSolve(_) => "root-solve",
            MfgError::NonSmoothProbe { .. } => "non-smooth-probe",
            MfgError::InvalidConfig(_) => "invalid-config",
            MfgError::Schema(_) => "schema",
            MfgError::Io(_) => "io",
            MfgError::Csv(_) => "csv",
            MfgError::Json(_) => "json",
        }
    }
}
