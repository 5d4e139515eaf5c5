//! Simulated users and the offline simulation loop.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainRegistry, DomainSpec};
use crate::elicitation::{self, ElicitationError, PoolIndex, PoolState};
use crate::lm::{parse_yes_no, ChatRequest, Gateway, GatewayError};
use crate::metrics::{self, DeltaCurve, MetricsError};
use crate::pool::PoolError;
use crate::predictor::{self, PredictionRecord, PredictorError};
use crate::session::{new_session, Answer, Judgment, PolicySpec, Session, SessionError};

/// Marker that precedes the candidate in membership queries.
pub const CANDIDATE_MARKER: &str = "accepted?";

/// Table key matching any otherwise unmatched candidate.
pub const TABLE_FALLBACK_KEY: &str = "*";

/// Simulated user time per answer.
pub const SIMULATED_ANSWER_TIME: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("invalid persona: {0}")]
    Invalid(String),
    #[error("rule persona cannot answer {0:?}")]
    Unanswerable(String),
    #[error("persona reply has no yes/no: {0:?}")]
    NotYesNo(String),
    #[error("{persona:?} persona cannot drive policy {policy}")]
    Incompatible { persona: PersonaKind, policy: &'static str },
    #[error("turn budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Elicitation(#[from] ElicitationError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaKind {
    LmPersona,
    RuleRegex,
    RuleTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PersonaRule {
    Pattern(String),
    Table(BTreeMap<String, Answer>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub kind: PersonaKind,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<PersonaRule>,
}

impl Persona {
    pub fn lm(text: impl Into<String>) -> Self {
        Self {
            kind: PersonaKind::LmPersona,
            text: text.into(),
            rule: None,
        }
    }

    pub fn regex(pattern: impl Into<String>) -> Self {
        Self {
            kind: PersonaKind::RuleRegex,
            text: String::new(),
            rule: Some(PersonaRule::Pattern(pattern.into())),
        }
    }

    pub fn table(entries: impl IntoIterator<Item = (String, Answer)>) -> Self {
        Self {
            kind: PersonaKind::RuleTable,
            text: String::new(),
            rule: Some(PersonaRule::Table(entries.into_iter().collect())),
        }
    }

    pub fn validate(&self) -> Result<(), PersonaError> {
        match (self.kind, &self.rule) {
            (PersonaKind::LmPersona, _) if self.text.trim().is_empty() => {
                Err(PersonaError::Invalid("lm_persona needs text".into()))
            }
            (PersonaKind::LmPersona, _) => Ok(()),
            (PersonaKind::RuleRegex, Some(PersonaRule::Pattern(p))) => anchored(p).map(|_| ()),
            (PersonaKind::RuleTable, Some(PersonaRule::Table(t))) if !t.is_empty() => Ok(()),
            (kind, _) => Err(PersonaError::Invalid(format!("{kind:?} needs a matching rule"))),
        }
    }

    pub fn is_rule(&self) -> bool {
        self.kind != PersonaKind::LmPersona
    }

    /// Compiled answerer; validates once so repeated answers stay cheap.
    pub fn compile(&self) -> Result<CompiledPersona, PersonaError> {
        self.validate()?;
        Ok(match (&self.kind, &self.rule) {
            (PersonaKind::RuleRegex, Some(PersonaRule::Pattern(p))) => CompiledPersona::Regex(anchored(p)?),
            (PersonaKind::RuleTable, Some(PersonaRule::Table(t))) => CompiledPersona::Table(t.clone()),
            _ => CompiledPersona::Lm(self.text.clone()),
        })
    }
}

fn anchored(pattern: &str) -> Result<Regex, PersonaError> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|e| PersonaError::Invalid(e.to_string()))
}

#[derive(Debug, Clone)]
pub enum CompiledPersona {
    Lm(String),
    Regex(Regex),
    Table(BTreeMap<String, Answer>),
}

/// Text after the last membership marker, trimmed.
pub fn extract_candidate(question: &str) -> Option<&str> {
    question
        .rfind(CANDIDATE_MARKER)
        .map(|i| question[i + CANDIDATE_MARKER.len()..].trim())
}

pub fn persona_prompt(persona_text: &str, question: &str) -> String {
    format!("{persona_text} Answer the question in the shortest way with minimal additional explanation.\n{question}")
}

impl CompiledPersona {
    pub fn answer(&self, gateway: &Gateway, question: &str) -> Result<String, PersonaError> {
        match self {
            CompiledPersona::Lm(text) => {
                let reply = gateway.complete(&ChatRequest::prompt(persona_prompt(text, question)))?;
                Ok(reply.content)
            }
            CompiledPersona::Regex(re) => {
                let candidate =
                    extract_candidate(question).ok_or_else(|| PersonaError::Unanswerable(question.to_string()))?;
                Ok(yes_no(re.is_match(candidate)))
            }
            CompiledPersona::Table(table) => {
                let candidate =
                    extract_candidate(question).ok_or_else(|| PersonaError::Unanswerable(question.to_string()))?;
                let answer = table
                    .get(candidate)
                    .or_else(|| table.get(TABLE_FALLBACK_KEY))
                    .ok_or_else(|| PersonaError::Unanswerable(question.to_string()))?;
                Ok(yes_no(answer.is_yes()))
            }
        }
    }
}

fn yes_no(yes: bool) -> String {
    if yes { "yes" } else { "no" }.to_string()
}

pub fn persona_answer(gateway: &Gateway, persona: &Persona, question: &str) -> Result<String, PersonaError> {
    persona.compile()?.answer(gateway, question)
}

pub struct SimulationConfig<'a> {
    pub policy: PolicySpec,
    pub persona: &'a Persona,
    /// Must carry the test set.
    pub domain: &'a DomainSpec,
    pub elicitor: &'a Gateway,
    pub predictor: &'a Gateway,
    /// Only consulted by LM personas.
    pub persona_gateway: &'a Gateway,
    pub seed: u64,
    pub pool: Option<Arc<PoolIndex>>,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutcome {
    pub session: Session,
    pub records: Vec<PredictionRecord>,
    pub curve: DeltaCurve,
}

/// Elicits with the persona for the turn budget, has the persona label the
/// test set, and predicts at every turn cutoff. Time is synthetic: each
/// query is issued once the LM returns and answered a second later.
pub fn run_simulation(config: SimulationConfig<'_>) -> Result<SimulationOutcome, PersonaError> {
    let SimulationConfig {
        policy,
        persona,
        domain,
        elicitor,
        predictor: predictor_gw,
        persona_gateway,
        seed,
        pool,
        started_at,
    } = config;
    let budget = policy.turn_budget.ok_or(PersonaError::ZeroBudget)?;
    if budget == 0 {
        return Err(PersonaError::ZeroBudget);
    }
    if persona.is_rule() && !policy.kind.asks_membership() {
        return Err(PersonaError::Incompatible {
            persona: persona.kind,
            policy: policy.kind.as_str(),
        });
    }
    if domain.test_set.is_empty() {
        return Err(PredictorError::NoTestSet.into());
    }
    let answerer = persona.compile()?;

    let mut registry = DomainRegistry::empty();
    registry.register(domain.clone())?;
    let mut session = new_session(&registry, &domain.id, policy, seed, 0, started_at)?;
    let mut pool_state = pool.map(PoolState::new);

    let mut clock = started_at;
    while !elicitation::should_stop(&session, clock) {
        let issued = match elicitation::next_query(&session, domain, elicitor, pool_state.as_mut()) {
            Err(ElicitationError::Pool(PoolError::Exhausted)) => break,
            other => other?,
        };
        clock += TimeDelta::from_std(issued.lm_latency).unwrap_or(TimeDelta::MAX);
        session = session.issue_query(
            &issued.query.text,
            issued.query.source_item_id,
            clock,
            issued.lm_latency,
        )?;
        let reply = answerer.answer(persona_gateway, &issued.query.text)?;
        clock += TimeDelta::from_std(SIMULATED_ANSWER_TIME).expect("small");
        let index = session.transcript().len() - 1;
        session = if policy_is_static(&session) {
            session.submit_free_text(&issued.query.text, &reply, clock)?
        } else {
            session.append_answer(index, &reply, clock)?
        };
    }
    if session.state() == crate::session::SessionState::Eliciting {
        session = session.finish_elicitation()?;
    }

    let mut judgments = Vec::with_capacity(domain.test_set.len());
    for item in &domain.test_set {
        let reply = answerer.answer(persona_gateway, &domain.edge_case_query(&item.body))?;
        let answer = match parse_yes_no(&reply) {
            Some(true) => Answer::Yes,
            Some(false) => Answer::No,
            None => return Err(PersonaError::NotYesNo(reply)),
        };
        judgments.push(Judgment::new(item.id.clone(), answer));
    }
    session = session.record_judgments(&judgments, &domain.test_set)?;

    let cutoffs = predictor::turn_cutoffs(budget);
    let records = predictor::predict_test_set(predictor_gw, domain, &session, &cutoffs)?;
    let points: Vec<_> = records.iter().map(PredictionRecord::as_cutoff_prediction).collect();
    let curve = metrics::delta_curve(metrics::Axis::Turns, &points, session.judgments())?;
    session = session.record_survey(&[], true)?;
    Ok(SimulationOutcome {
        session,
        records,
        curve,
    })
}

fn policy_is_static(session: &Session) -> bool {
    session.policy().kind == crate::session::PolicyKind::StaticPrompt
}

/// Headline numbers for one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub auc: f64,
    pub final_delta: f64,
}

impl MethodResult {
    pub fn from_curve(curve: &DeltaCurve, horizon: f64) -> Result<Self, MetricsError> {
        Ok(Self {
            auc: metrics::auc(curve, horizon)?,
            final_delta: curve.value_at(horizon),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub method: String,
    pub simulated: MethodResult,
    pub human: MethodResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub auc_correlation: f64,
    pub final_delta_correlation: f64,
    pub pairs: Vec<PairedResult>,
}

pub fn compare_to_human(
    simulated: &BTreeMap<String, MethodResult>,
    human: &BTreeMap<String, MethodResult>,
) -> Result<CorrelationReport, MetricsError> {
    let project = |m: &BTreeMap<String, MethodResult>, f: fn(&MethodResult) -> f64| -> BTreeMap<String, f64> {
        m.iter().map(|(k, v)| (k.clone(), f(v))).collect()
    };
    let auc_correlation = metrics::method_correlation(&project(simulated, |r| r.auc), &project(human, |r| r.auc))?;
    let final_delta_correlation = metrics::method_correlation(
        &project(simulated, |r| r.final_delta),
        &project(human, |r| r.final_delta),
    )?;
    let pairs = simulated
        .iter()
        .filter_map(|(method, s)| {
            human.get(method).map(|h| PairedResult {
                method: method.clone(),
                simulated: *s,
                human: *h,
            })
        })
        .collect();
    Ok(CorrelationReport {
        auc_correlation,
        final_delta_correlation,
        pairs,
    })
}
