//! Per-session evaluation: predictions at every cutoff and the Δ-curves
//! built from them.

use gate_core::domain::{DomainId, DomainSpec};
use gate_core::lm::Gateway;
use gate_core::metrics::{self, Axis, DeltaCurve, MetricsError};
use gate_core::predictor::{self, Cutoff, PredictionRecord, PredictorError};
use gate_core::session::{PolicyKind, PolicySpec, Session, SessionState, StopRule};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("session is {0:?}, results need a completed session")]
    NotComplete(SessionState),
    #[error("session has no judgments")]
    NoJudgments,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResults {
    pub session_id: String,
    pub domain: DomainId,
    pub method: PolicyKind,
    pub horizon: f64,
    pub records: Vec<PredictionRecord>,
    pub curve: DeltaCurve,
    pub auc: f64,
    /// Absent when the user's labels were all one class.
    #[serde(default)]
    pub auroc_curve: Option<DeltaCurve>,
    #[serde(default)]
    pub auroc_auc: Option<f64>,
}

/// Cutoffs and curve horizon for a policy: whole minutes up to the time
/// budget, or every turn up to the turn budget.
pub fn evaluation_cutoffs(policy: &PolicySpec) -> (Vec<Cutoff>, f64) {
    match policy.stop_rule() {
        StopRule::Turns(n) => (predictor::turn_cutoffs(n), f64::from(n)),
        StopRule::Time(budget) => {
            let minutes = budget.as_secs().div_ceil(60).max(1) as u32;
            (predictor::minute_cutoffs(minutes), f64::from(minutes))
        }
    }
}

pub fn compute_results(
    session: &Session,
    domain: &DomainSpec,
    predictor_gw: &Gateway,
) -> Result<SessionResults, ResultsError> {
    if session.state() != SessionState::Complete {
        return Err(ResultsError::NotComplete(session.state()));
    }
    if session.judgments().is_empty() {
        return Err(ResultsError::NoJudgments);
    }
    let (cutoffs, horizon) = evaluation_cutoffs(session.policy());
    let axis = cutoffs.first().map_or(Axis::Turns, |c| c.axis());
    let records = predictor::predict_test_set(predictor_gw, domain, session, &cutoffs)?;
    let points: Vec<_> = records.iter().map(PredictionRecord::as_cutoff_prediction).collect();
    let curve = metrics::delta_curve(axis, &points, session.judgments())?;
    let auc = metrics::auc(&curve, horizon)?;
    let auroc_curve = metrics::delta_auroc_curve(axis, &points, session.judgments()).ok();
    let auroc_auc = match &auroc_curve {
        Some(c) => Some(metrics::auc(c, horizon)?),
        None => None,
    };
    Ok(SessionResults {
        session_id: session.id().to_string(),
        domain: session.domain().clone(),
        method: session.policy().kind,
        horizon,
        records,
        curve,
        auc,
        auroc_curve,
        auroc_auc,
    })
}
