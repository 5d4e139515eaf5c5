//! The conditioned predictor: decision prompts, probability parsing, and
//! test-set sweeps over transcript prefixes.

use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainSpec, TestItem};
use crate::lm::{ChatRequest, Gateway, GatewayError};
use crate::metrics::{Axis, CutoffPrediction};
use crate::session::{Session, TranscriptTurn};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("no probability in response {0:?}")]
    NoNumeral(String),
    #[error("unparseable response twice: {0:?}")]
    Unparseable(String),
    #[error("domain has no test set")]
    NoTestSet,
    #[error("cutoffs must be ascending")]
    UnsortedCutoffs,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Fills the decision template: preamble, specification, question, item.
pub fn build_decision_prompt(domain: &DomainSpec, specification: &str, item_body: &str) -> String {
    format!(
        "{}\n{}\n\n{}\n{}",
        domain.decision_preamble_text, specification, domain.decision_question_text, item_body
    )
}

static NUMERAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+(?:\.[0-9]+)?|\.[0-9]+").unwrap());

/// First decimal numeral in `raw`, clamped to [0, 1].
pub fn parse_probability(raw: &str) -> Result<f64, PredictorError> {
    let m = NUMERAL
        .find(raw)
        .ok_or_else(|| PredictorError::NoNumeral(raw.to_string()))?;
    let value: f64 = m
        .as_str()
        .parse()
        .map_err(|_| PredictorError::NoNumeral(raw.to_string()))?;
    if !(0.0..=1.0).contains(&value) {
        tracing::warn!(value, raw, "clamping out-of-range probability");
    }
    Ok(value.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    UserTime(Duration),
    Turns(u32),
}

impl Cutoff {
    pub fn axis(self) -> Axis {
        match self {
            Cutoff::UserTime(_) => Axis::Minutes,
            Cutoff::Turns(_) => Axis::Turns,
        }
    }

    /// Position on the curve axis: minutes or turns.
    pub fn coordinate(self) -> f64 {
        match self {
            Cutoff::UserTime(d) => d.as_secs_f64() / 60.0,
            Cutoff::Turns(n) => f64::from(n),
        }
    }

    pub fn prefix(self, session: &Session) -> &[TranscriptTurn] {
        match self {
            Cutoff::UserTime(d) => session.transcript_at(d),
            Cutoff::Turns(n) => session.transcript_at_turns(n as usize),
        }
    }
}

/// Whole minutes 0..=`minutes`.
pub fn minute_cutoffs(minutes: u32) -> Vec<Cutoff> {
    (0..=minutes)
        .map(|m| Cutoff::UserTime(Duration::from_secs(u64::from(m) * 60)))
        .collect()
}

pub fn turn_cutoffs(turns: u32) -> Vec<Cutoff> {
    (0..=turns).map(Cutoff::Turns).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: String,
    pub item_id: String,
    pub transcript_cutoff: Cutoff,
    pub prob_yes: f64,
    pub raw_response: String,
}

impl PredictionRecord {
    pub fn as_cutoff_prediction(&self) -> CutoffPrediction {
        CutoffPrediction {
            item_id: self.item_id.clone(),
            coordinate: self.transcript_cutoff.coordinate(),
            prob_yes: self.prob_yes,
        }
    }
}

/// p(yes) and the raw text it was parsed from.
pub fn predict(
    gateway: &Gateway,
    domain: &DomainSpec,
    specification: &str,
    item: &TestItem,
) -> Result<(f64, String), PredictorError> {
    let request = ChatRequest::prompt(build_decision_prompt(domain, specification, &item.body));
    let first = gateway.complete(&request)?;
    if let Ok(p) = parse_probability(&first.content) {
        return Ok((p, first.content));
    }
    tracing::debug!(item = %item.id, raw = %first.content, "re-asking for a probability");
    let second = gateway.complete(&request)?;
    match parse_probability(&second.content) {
        Ok(p) => Ok((p, second.content)),
        Err(_) => Err(PredictorError::Unparseable(second.content)),
    }
}

/// Predicts every test item at every cutoff, cutoff-major.
pub fn predict_test_set(
    gateway: &Gateway,
    domain: &DomainSpec,
    session: &Session,
    cutoffs: &[Cutoff],
) -> Result<Vec<PredictionRecord>, PredictorError> {
    if domain.test_set.is_empty() {
        return Err(PredictorError::NoTestSet);
    }
    if cutoffs.windows(2).any(|w| w[1].coordinate() < w[0].coordinate()) {
        return Err(PredictorError::UnsortedCutoffs);
    }
    let mut records = Vec::with_capacity(cutoffs.len() * domain.test_set.len());
    for &cutoff in cutoffs {
        let specification = session.specification_text(cutoff.prefix(session));
        for item in &domain.test_set {
            let (prob_yes, raw_response) = predict(gateway, domain, &specification, item)?;
            records.push(PredictionRecord {
                session_id: session.id().to_string(),
                item_id: item.id.clone(),
                transcript_cutoff: cutoff,
                prob_yes,
                raw_response,
            });
        }
    }
    Ok(records)
}
