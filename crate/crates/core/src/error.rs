use thiserror::Error;

use crate::audit::ConstraintAudit;
use crate::channel::ChannelError;
use crate::conic::ConicError;
use crate::scenario::ScenarioError;

#[derive(Debug, Error, Clone)]
pub enum SolveError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("{stage}: dimension mismatch: {detail}")]
    Dimension { stage: &'static str, detail: String },
    #[error("{stage}: subproblem infeasible ({detail})")]
    Infeasible { stage: &'static str, detail: String },
    #[error("{stage}: numerical failure: {diagnostics}")]
    NumericalFailure {
        stage: &'static str,
        diagnostics: String,
    },
    #[error("mission timing infeasible: {0}")]
    TimingInfeasible(String),
    #[error("sensing infeasible: {0}")]
    SensingInfeasible(String),
    #[error("trust region collapsed to {radius:e} with the audit still failing")]
    TrustRegionCollapse { radius: f64 },
    #[error("zero-forcing infeasible: {0}")]
    ZeroForcing(String),
    #[error("audit failed: {summary}")]
    AuditFailed {
        audit: Box<ConstraintAudit>,
        summary: String,
    },
}
