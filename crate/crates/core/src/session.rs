//! Sessions: one elicitation episode, its transcript, timing ledger and the
//! forward-only state machine shared by the simulator and the HTTP service.

use std::collections::HashSet;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{DomainError, DomainId, DomainRegistry, TestItem};

pub const SESSION_SCHEMA_VERSION: u32 = 1;

/// Default elicitation time limit.
pub const DEFAULT_TIME_BUDGET: Duration = Duration::from_secs(5 * 60);

/// Default turn limit for simulated users.
pub const DEFAULT_TURN_BUDGET: u32 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("policy {kind:?} requires a pool reference")]
    MissingPool { kind: PolicyKind },
    #[error("policy {kind:?} does not take a pool reference")]
    UnexpectedPool { kind: PolicyKind },
    #[error("turn budget must be at least 1")]
    ZeroTurnBudget,
    #[error("operation requires state {expected:?}, session is {actual:?}")]
    WrongState {
        expected: SessionState,
        actual: SessionState,
    },
    #[error("turn {0} does not exist")]
    NoSuchTurn(usize),
    #[error("turn {0} is already answered")]
    AlreadyAnswered(usize),
    #[error("turn {0} is still awaiting an answer")]
    PendingAnswer(usize),
    #[error("timestamp precedes an earlier event in the session")]
    TimeTravel,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("free-text specifications are only accepted by static_prompt sessions")]
    NotStaticPrompt,
    #[error("unknown test item `{0}`")]
    UnknownItem(String),
    #[error("item `{0}` judged more than once")]
    DuplicateJudgment(String),
    #[error("survey rating for `{0}` must be within 1..=7")]
    RatingOutOfRange(String),
    #[error("invalid session document: {0}")]
    Invalid(String),
    #[error("session document has schema_version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed session document: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    GateActiveLearning,
    GateYesno,
    GateOpen,
    PoolRandom,
    PoolDiversity,
    PoolUncertainty,
    SupervisedRandom,
    StaticPrompt,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 8] = [
        PolicyKind::GateActiveLearning,
        PolicyKind::GateYesno,
        PolicyKind::GateOpen,
        PolicyKind::PoolRandom,
        PolicyKind::PoolDiversity,
        PolicyKind::PoolUncertainty,
        PolicyKind::SupervisedRandom,
        PolicyKind::StaticPrompt,
    ];

    pub fn is_generative(self) -> bool {
        matches!(
            self,
            PolicyKind::GateActiveLearning | PolicyKind::GateYesno | PolicyKind::GateOpen
        )
    }

    pub fn uses_pool(self) -> bool {
        matches!(
            self,
            PolicyKind::PoolRandom
                | PolicyKind::PoolDiversity
                | PolicyKind::PoolUncertainty
                | PolicyKind::SupervisedRandom
        )
    }

    /// Policies whose queries are concrete cases to accept or reject.
    pub fn asks_membership(self) -> bool {
        self == PolicyKind::GateActiveLearning || self.uses_pool()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::GateActiveLearning => "gate_active_learning",
            PolicyKind::GateYesno => "gate_yesno",
            PolicyKind::GateOpen => "gate_open",
            PolicyKind::PoolRandom => "pool_random",
            PolicyKind::PoolDiversity => "pool_diversity",
            PolicyKind::PoolUncertainty => "pool_uncertainty",
            PolicyKind::SupervisedRandom => "supervised_random",
            PolicyKind::StaticPrompt => "static_prompt",
        }
    }
}

/// The active stopping rule of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    Time(Duration),
    Turns(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    #[serde(default = "default_time_budget")]
    pub time_budget: Duration,
    /// When set, the session stops on answered turns instead of user time.
    #[serde(default)]
    pub turn_budget: Option<u32>,
    #[serde(default)]
    pub pool_ref: Option<String>,
}

fn default_time_budget() -> Duration {
    DEFAULT_TIME_BUDGET
}

impl PolicySpec {
    pub fn timed(kind: PolicyKind) -> Self {
        Self {
            kind,
            time_budget: DEFAULT_TIME_BUDGET,
            turn_budget: None,
            pool_ref: None,
        }
    }

    pub fn turns(kind: PolicyKind, budget: u32) -> Self {
        Self {
            turn_budget: Some(budget),
            ..Self::timed(kind)
        }
    }

    pub fn with_pool(mut self, pool_ref: impl Into<String>) -> Self {
        self.pool_ref = Some(pool_ref.into());
        self
    }

    pub fn stop_rule(&self) -> StopRule {
        match self.turn_budget {
            Some(turns) => StopRule::Turns(turns),
            None => StopRule::Time(self.time_budget),
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        match (self.kind.uses_pool(), &self.pool_ref) {
            (true, None) => return Err(SessionError::MissingPool { kind: self.kind }),
            (false, Some(_)) => return Err(SessionError::UnexpectedPool { kind: self.kind }),
            _ => {}
        }
        if self.turn_budget == Some(0) {
            return Err(SessionError::ZeroTurnBudget);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Eliciting,
    Judging,
    Surveying,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub item_id: String,
    pub answer: Answer,
}

impl Judgment {
    pub fn new(item_id: impl Into<String>, answer: Answer) -> Self {
        Self {
            item_id: item_id.into(),
            answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SurveyValue {
    Rating(u8),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyAnswer {
    pub question_id: String,
    pub value: SurveyValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub index: usize,
    pub query_text: String,
    #[serde(default)]
    pub answer_text: String,
    /// Pool item behind the query, for pool-based policies.
    #[serde(default)]
    pub source_item_id: Option<String>,
    pub query_issued_at: DateTime<Utc>,
    #[serde(default)]
    pub answer_received_at: Option<DateTime<Utc>>,
    /// Time spent waiting on the LM to produce `query_text`.
    pub lm_latency: Duration,
}

impl TranscriptTurn {
    pub fn is_answered(&self) -> bool {
        self.answer_received_at.is_some()
    }
}

/// One elicitation episode. All transitions return a new value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    id: String,
    domain: DomainId,
    policy: PolicySpec,
    seed: u64,
    transcript: Vec<TranscriptTurn>,
    free_text_spec: Option<String>,
    judgments: Vec<Judgment>,
    survey: Vec<SurveyAnswer>,
    state: SessionState,
    created_at: DateTime<Utc>,
}

/// Deterministic session id from seed and creation ordinal.
pub fn session_id(seed: u64, ordinal: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(ordinal.to_le_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates a session in state `eliciting`.
pub fn new_session(
    domains: &DomainRegistry,
    domain: &DomainId,
    policy: PolicySpec,
    seed: u64,
    ordinal: u64,
    created_at: DateTime<Utc>,
) -> Result<Session, SessionError> {
    domains.get(domain)?;
    policy.validate()?;
    Ok(Session {
        id: session_id(seed, ordinal),
        domain: domain.clone(),
        policy,
        seed,
        transcript: Vec::new(),
        free_text_spec: None,
        judgments: Vec::new(),
        survey: Vec::new(),
        state: SessionState::Eliciting,
        created_at,
    })
}

fn to_std(delta: chrono::TimeDelta) -> Duration {
    delta.to_std().unwrap_or(Duration::ZERO)
}

/// `(now - session_start) - Σ lm_latency`, clamped at zero.
pub fn elapsed_user_time(transcript: &[TranscriptTurn], now: DateTime<Utc>, session_start: DateTime<Utc>) -> Duration {
    let wall = to_std(now - session_start);
    let latency: Duration = transcript
        .iter()
        .filter(|turn| turn.query_issued_at <= now)
        .map(|turn| turn.lm_latency)
        .sum();
    wall.saturating_sub(latency)
}

/// Latency-subtracted time at which each answered turn came in.
pub fn answer_user_times(transcript: &[TranscriptTurn], session_start: DateTime<Utc>) -> Vec<Option<Duration>> {
    let mut latency = Duration::ZERO;
    transcript
        .iter()
        .map(|turn| {
            latency += turn.lm_latency;
            turn.answer_received_at
                .map(|at| to_std(at - session_start).saturating_sub(latency))
        })
        .collect()
}

/// Renders turns as `Q: ...\nA: ...\n` lines.
pub fn render_transcript(prefix: &[TranscriptTurn]) -> String {
    prefix
        .iter()
        .map(|turn| format!("Q: {}\nA: {}\n", turn.query_text, turn.answer_text))
        .collect()
}

impl Session {
    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn domain(&self) -> &DomainId {
        &self.domain
    }
    pub fn policy(&self) -> &PolicySpec {
        &self.policy
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn transcript(&self) -> &[TranscriptTurn] {
        &self.transcript
    }
    pub fn free_text_spec(&self) -> Option<&str> {
        self.free_text_spec.as_deref()
    }
    pub fn judgments(&self) -> &[Judgment] {
        &self.judgments
    }
    pub fn survey(&self) -> &[SurveyAnswer] {
        &self.survey
    }
    pub fn state(&self) -> SessionState {
        self.state
    }
    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn answered_turns(&self) -> usize {
        self.transcript.iter().filter(|t| t.is_answered()).count()
    }

    /// The issued query still waiting for an answer, if any.
    pub fn pending_turn(&self) -> Option<&TranscriptTurn> {
        self.transcript.last().filter(|t| !t.is_answered())
    }

    pub fn used_pool_items(&self) -> HashSet<&str> {
        self.transcript
            .iter()
            .filter_map(|t| t.source_item_id.as_deref())
            .collect()
    }

    pub fn elapsed_user_time(&self, now: DateTime<Utc>) -> Duration {
        elapsed_user_time(&self.transcript, now, self.created_at)
    }

    fn latest_event(&self) -> DateTime<Utc> {
        self.transcript
            .last()
            .map(|t| t.answer_received_at.unwrap_or(t.query_issued_at))
            .unwrap_or(self.created_at)
    }

    fn require(&self, expected: SessionState) -> Result<(), SessionError> {
        if self.state != expected {
            return Err(SessionError::WrongState {
                expected,
                actual: self.state,
            });
        }
        Ok(())
    }

    /// Appends a new query turn. The previous turn must be answered.
    pub fn issue_query(
        &self,
        query_text: &str,
        source_item_id: Option<String>,
        issued_at: DateTime<Utc>,
        lm_latency: Duration,
    ) -> Result<Session, SessionError> {
        self.require(SessionState::Eliciting)?;
        if let Some(pending) = self.pending_turn() {
            return Err(SessionError::PendingAnswer(pending.index));
        }
        if query_text.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        if issued_at < self.latest_event() {
            return Err(SessionError::TimeTravel);
        }
        let mut next = self.clone();
        next.transcript.push(TranscriptTurn {
            index: self.transcript.len(),
            query_text: query_text.to_string(),
            answer_text: String::new(),
            source_item_id,
            query_issued_at: issued_at,
            answer_received_at: None,
            lm_latency,
        });
        Ok(next)
    }

    pub fn append_answer(
        &self,
        turn_index: usize,
        answer_text: &str,
        at: DateTime<Utc>,
    ) -> Result<Session, SessionError> {
        self.require(SessionState::Eliciting)?;
        let turn = self
            .transcript
            .get(turn_index)
            .ok_or(SessionError::NoSuchTurn(turn_index))?;
        if turn.is_answered() {
            return Err(SessionError::AlreadyAnswered(turn_index));
        }
        if at < turn.query_issued_at {
            return Err(SessionError::TimeTravel);
        }
        let mut next = self.clone();
        let turn = &mut next.transcript[turn_index];
        turn.answer_text = answer_text.to_string();
        turn.answer_received_at = Some(at);
        Ok(next)
    }

    /// Stores a user-written specification and moves to judging.
    pub fn submit_free_text(&self, request_text: &str, text: &str, at: DateTime<Utc>) -> Result<Session, SessionError> {
        self.require(SessionState::Eliciting)?;
        if self.policy.kind != PolicyKind::StaticPrompt {
            return Err(SessionError::NotStaticPrompt);
        }
        let mut next = match self.transcript.first() {
            None => self.issue_query(request_text, None, at, Duration::ZERO)?,
            Some(turn) if turn.is_answered() => return Err(SessionError::AlreadyAnswered(0)),
            Some(_) => self.clone(),
        };
        next = next.append_answer(0, text, at)?;
        next.free_text_spec = Some(text.to_string());
        next.state = SessionState::Judging;
        Ok(next)
    }

    /// Ends elicitation. Fails while an issued query is unanswered.
    pub fn finish_elicitation(&self) -> Result<Session, SessionError> {
        self.require(SessionState::Eliciting)?;
        if let Some(pending) = self.pending_turn() {
            return Err(SessionError::PendingAnswer(pending.index));
        }
        let mut next = self.clone();
        next.state = SessionState::Judging;
        Ok(next)
    }

    /// Stores all judgments or none, then moves to surveying.
    pub fn record_judgments(&self, judgments: &[Judgment], test_set: &[TestItem]) -> Result<Session, SessionError> {
        self.require(SessionState::Judging)?;
        let known: HashSet<&str> = test_set.iter().map(|i| i.id.as_str()).collect();
        let mut seen = HashSet::new();
        for judgment in judgments {
            if !known.contains(judgment.item_id.as_str()) {
                return Err(SessionError::UnknownItem(judgment.item_id.clone()));
            }
            if !seen.insert(judgment.item_id.as_str()) {
                return Err(SessionError::DuplicateJudgment(judgment.item_id.clone()));
            }
        }
        let mut next = self.clone();
        next.judgments = judgments.to_vec();
        next.state = SessionState::Surveying;
        Ok(next)
    }

    /// Adds survey answers; `complete` moves a surveying session to complete.
    pub fn record_survey(&self, answers: &[SurveyAnswer], complete: bool) -> Result<Session, SessionError> {
        if !matches!(self.state, SessionState::Judging | SessionState::Surveying) {
            return Err(SessionError::WrongState {
                expected: SessionState::Surveying,
                actual: self.state,
            });
        }
        if complete {
            self.require(SessionState::Surveying)?;
        }
        for answer in answers {
            if let SurveyValue::Rating(r) = answer.value {
                if !(1..=7).contains(&r) {
                    return Err(SessionError::RatingOutOfRange(answer.question_id.clone()));
                }
            }
        }
        let mut next = self.clone();
        for answer in answers {
            next.survey.retain(|a| a.question_id != answer.question_id);
            next.survey.push(answer.clone());
        }
        if complete {
            next.state = SessionState::Complete;
        }
        Ok(next)
    }

    /// Maximal prefix of answered turns whose latency-subtracted answer time
    /// is within `cutoff`.
    pub fn transcript_at(&self, cutoff: Duration) -> &[TranscriptTurn] {
        let times = answer_user_times(&self.transcript, self.created_at);
        let len = times
            .iter()
            .take_while(|t| matches!(t, Some(t) if *t <= cutoff))
            .count();
        &self.transcript[..len]
    }

    /// First `turns` answered turns.
    pub fn transcript_at_turns(&self, turns: usize) -> &[TranscriptTurn] {
        let answered = self.transcript.iter().take_while(|t| t.is_answered()).count();
        &self.transcript[..answered.min(turns)]
    }

    /// Text that conditions the predictor for a given transcript prefix: the
    /// user's own paragraph for static_prompt, the Q/A transcript otherwise.
    pub fn specification_text(&self, prefix: &[TranscriptTurn]) -> String {
        if self.policy.kind == PolicyKind::StaticPrompt {
            return prefix.first().map(|turn| turn.answer_text.clone()).unwrap_or_default();
        }
        render_transcript(prefix)
    }

    /// Checks every structural invariant; used after decoding and in tests.
    pub fn check_invariants(&self) -> Result<(), SessionError> {
        let invalid = |msg: &str| Err(SessionError::Invalid(msg.to_string()));
        if let Err(e) = self.policy.validate() {
            return Err(SessionError::Invalid(e.to_string()));
        }
        let mut last = self.created_at;
        for (i, turn) in self.transcript.iter().enumerate() {
            if turn.index != i {
                return invalid("transcript indices are not contiguous");
            }
            if turn.query_issued_at < last {
                return invalid("query issued before an earlier event");
            }
            match turn.answer_received_at {
                Some(at) if at < turn.query_issued_at => return invalid("answer precedes its query"),
                Some(at) => last = at,
                None if i + 1 != self.transcript.len() => return invalid("unanswered turn before the last"),
                None => last = turn.query_issued_at,
            }
        }
        if self.free_text_spec.is_some() && self.policy.kind != PolicyKind::StaticPrompt {
            return invalid("free_text_spec on a non-static_prompt session");
        }
        if !self.judgments.is_empty() && !matches!(self.state, SessionState::Surveying | SessionState::Complete) {
            return invalid("judgments recorded before judging finished");
        }
        let mut seen = HashSet::new();
        if !self.judgments.iter().all(|j| seen.insert(j.item_id.as_str())) {
            return invalid("duplicate judgment");
        }
        if self.state != SessionState::Eliciting && self.pending_turn().is_some() {
            return invalid("unanswered query after elicitation ended");
        }
        if !self.survey.is_empty() && self.state == SessionState::Eliciting {
            return invalid("survey answers during elicitation");
        }
        Ok(())
    }

    pub fn encode(&self) -> String {
        let mut value = serde_json::to_value(self).expect("session serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("schema_version".into(), serde_json::Value::from(SESSION_SCHEMA_VERSION));
        }
        serde_json::to_string_pretty(&value).expect("session serializes")
    }

    pub fn decode(text: &str) -> Result<Session, SessionError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SessionError::Decode(e.to_string()))?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| SessionError::Decode("expected a JSON object".into()))?;
        let version = map
            .remove("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| SessionError::Decode("missing schema_version".into()))?;
        if version != u64::from(SESSION_SCHEMA_VERSION) {
            return Err(SessionError::SchemaVersion {
                found: version as u32,
                expected: SESSION_SCHEMA_VERSION,
            });
        }
        let session: Session = serde_json::from_value(value).map_err(|e| SessionError::Decode(e.to_string()))?;
        session.check_invariants()?;
        Ok(session)
    }
}
