//! HTTP API over the session state machine.
//!
//! Every mutation goes through the core `Session` transitions and is
//! persisted before the response is sent. Requests for one session are
//! serialized by a per-session async mutex.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gate_core::domain::{DomainId, DomainRegistry, DomainSpec, InstructionFlow};
use gate_core::elicitation::{self, ElicitationError, PoolIndex, PoolState, QueryKind};
use gate_core::lm::Gateway;
use gate_core::pool::PoolError;
use gate_core::session::{
    new_session, Judgment, PolicyKind, PolicySpec, Session, SessionError, SessionState, SurveyAnswer, TranscriptTurn,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex as AsyncMutex;
use tower_http::services::ServeDir;

use crate::clock::Clock;
use crate::results::{compute_results, ResultsError, SessionResults};
use crate::store::{FileStore, RecordKind, StoreError};
use crate::survey::{SurveyError, SurveyInstrument, SurveyPhase};

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    Upstream(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Upstream(m) => (StatusCode::BAD_GATEWAY, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        if status.is_server_error() {
            tracing::error!(%status, %message, "request failed");
        }
        (status, Json(json!({ "error": message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        ApiError::Unprocessable(rejection.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::InvalidId(id) => ApiError::NotFound(format!("no session `{id}`")),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::UnknownItem(_) | SessionError::DuplicateJudgment(_) | SessionError::RatingOutOfRange(_) => {
                ApiError::Unprocessable(e.to_string())
            }
            SessionError::EmptyQuery => ApiError::Unprocessable(e.to_string()),
            SessionError::Domain(_)
            | SessionError::MissingPool { .. }
            | SessionError::UnexpectedPool { .. }
            | SessionError::ZeroTurnBudget => ApiError::BadRequest(e.to_string()),
            SessionError::Invalid(_) | SessionError::SchemaVersion { .. } | SessionError::Decode(_) => {
                ApiError::Internal(e.to_string())
            }
            _ => ApiError::Conflict(e.to_string()),
        }
    }
}

impl From<SurveyError> for ApiError {
    fn from(e: SurveyError) -> Self {
        match e {
            SurveyError::WrongState { .. } => ApiError::Conflict(e.to_string()),
            other => ApiError::Unprocessable(other.to_string()),
        }
    }
}

impl From<ResultsError> for ApiError {
    fn from(e: ResultsError) -> Self {
        match e {
            ResultsError::NotComplete(_) | ResultsError::NoJudgments => ApiError::Conflict(e.to_string()),
            ResultsError::Predictor(gate_core::predictor::PredictorError::NoTestSet) => {
                ApiError::Conflict(e.to_string())
            }
            ResultsError::Predictor(_) => ApiError::Upstream(e.to_string()),
            ResultsError::Metrics(_) => ApiError::Internal(e.to_string()),
        }
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::Internal(format!("worker failed: {e}"))
}

/// JSON body whose rejections all map to 422.
#[derive(FromRequest)]
#[from_request(via(Json), rejection(ApiError))]
pub struct ApiJson<T>(pub T);

type ApiResult<T> = Result<T, ApiError>;

struct Slot {
    session: Session,
    pool: Option<PoolState>,
}

type SlotHandle = Arc<AsyncMutex<Option<Slot>>>;

#[derive(Clone)]
pub struct AppState {
    registry: Arc<DomainRegistry>,
    pools: Arc<BTreeMap<String, Arc<PoolIndex>>>,
    elicitor: Arc<Gateway>,
    predictor: Arc<Gateway>,
    store: FileStore,
    clock: Arc<dyn Clock>,
    slots: Arc<Mutex<HashMap<String, SlotHandle>>>,
    ordinal: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(
        registry: DomainRegistry,
        pools: BTreeMap<String, Arc<PoolIndex>>,
        elicitor: Gateway,
        predictor: Gateway,
        store: FileStore,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StoreError> {
        let existing = store.list(RecordKind::Session)?.len() as u64;
        Ok(Self {
            registry: Arc::new(registry),
            pools: Arc::new(pools),
            elicitor: Arc::new(elicitor),
            predictor: Arc::new(predictor),
            store,
            clock,
            slots: Arc::new(Mutex::new(HashMap::new())),
            ordinal: Arc::new(AtomicU64::new(existing)),
        })
    }

    pub fn store(&self) -> &FileStore {
        &self.store
    }

    fn handle(&self, id: &str) -> SlotHandle {
        self.slots
            .lock()
            .expect("slot map lock")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    fn domain(&self, id: &DomainId) -> ApiResult<&DomainSpec> {
        self.registry.get(id).map_err(|e| ApiError::NotFound(e.to_string()))
    }

    fn pool_for(&self, policy: &PolicySpec) -> ApiResult<Option<Arc<PoolIndex>>> {
        match &policy.pool_ref {
            Some(name) if policy.kind.uses_pool() => self
                .pools
                .get(name)
                .cloned()
                .map(Some)
                .ok_or_else(|| ApiError::BadRequest(format!("unknown pool `{name}`"))),
            _ => Ok(None),
        }
    }

    /// Fills an empty slot from the store.
    fn load_into(&self, id: &str, slot: &mut Option<Slot>) -> ApiResult<()> {
        if slot.is_some() {
            return Ok(());
        }
        let record = self
            .store
            .get::<Session>(RecordKind::Session, id)?
            .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))?;
        let session = record.payload;
        session
            .check_invariants()
            .map_err(|e| ApiError::Internal(format!("stored session {id} is invalid: {e}")))?;
        let pool = match self.pool_for(session.policy())? {
            Some(index) => Some(
                PoolState::resume(index, &session)
                    .map_err(|e| ApiError::Internal(format!("resuming pool for {id}: {e}")))?,
            ),
            None => None,
        };
        *slot = Some(Slot { session, pool });
        Ok(())
    }

    fn persist(&self, session: &Session) -> ApiResult<()> {
        self.store.put(RecordKind::Session, session.id(), session)?;
        Ok(())
    }
}

/// Locks the session and loads it from the store if needed.
async fn lock_slot(state: &AppState, id: &str) -> ApiResult<tokio::sync::OwnedMutexGuard<Option<Slot>>> {
    let mut guard = state.handle(id).lock_owned().await;
    state.load_into(id, &mut guard)?;
    Ok(guard)
}

fn slot(guard: &mut Option<Slot>) -> &mut Slot {
    guard.as_mut().expect("slot loaded")
}

pub fn instruction_flow(kind: PolicyKind) -> InstructionFlow {
    if kind == PolicyKind::StaticPrompt {
        InstructionFlow::Prompting
    } else if kind.uses_pool() {
        InstructionFlow::Pool
    } else {
        InstructionFlow::Generative
    }
}

pub fn query_kind(kind: PolicyKind) -> QueryKind {
    match kind {
        PolicyKind::GateActiveLearning => QueryKind::EdgeCase,
        PolicyKind::GateYesno => QueryKind::YesnoQuestion,
        PolicyKind::GateOpen => QueryKind::OpenQuestion,
        PolicyKind::StaticPrompt => QueryKind::FreeTextRequest,
        _ => QueryKind::PoolItem,
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub domain: DomainId,
    pub policy: PolicySpec,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub domain: DomainId,
    pub policy: PolicySpec,
    pub state: SessionState,
    pub transcript: Vec<TranscriptTurn>,
    pub answered_turns: usize,
    pub pending_turn: Option<usize>,
    pub elapsed_user_secs: f64,
    /// Remaining user time for time-budgeted policies.
    pub remaining_secs: Option<f64>,
    pub instructions: String,
}

fn view(state: &AppState, session: &Session) -> ApiResult<SessionView> {
    let domain = state.domain(session.domain())?;
    let elapsed = session.elapsed_user_time(state.clock.now());
    let remaining_secs = match session.policy().stop_rule() {
        gate_core::session::StopRule::Time(budget) => Some(budget.saturating_sub(elapsed).as_secs_f64()),
        gate_core::session::StopRule::Turns(_) => None,
    };
    Ok(SessionView {
        session_id: session.id().to_string(),
        domain: session.domain().clone(),
        policy: session.policy().clone(),
        state: session.state(),
        transcript: session.transcript().to_vec(),
        answered_turns: session.answered_turns(),
        pending_turn: session.pending_turn().map(|t| t.index),
        elapsed_user_secs: elapsed.as_secs_f64(),
        remaining_secs,
        instructions: domain.elicitation_instructions(instruction_flow(session.policy().kind)),
    })
}

async fn create_session(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    req.policy.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
    state.domain(&req.domain)?;
    let pool = state.pool_for(&req.policy)?;
    let now = state.clock.now();
    loop {
        let ordinal = state.ordinal.fetch_add(1, Ordering::SeqCst);
        let seed = req.seed.unwrap_or(ordinal);
        let session = new_session(&state.registry, &req.domain, req.policy.clone(), seed, ordinal, now)?;
        let mut guard = state.handle(session.id()).lock_owned().await;
        if guard.is_some()
            || state
                .store
                .get::<serde_json::Value>(RecordKind::Session, session.id())?
                .is_some()
        {
            continue;
        }
        state.persist(&session)?;
        let body = view(&state, &session)?;
        *guard = Some(Slot {
            pool: pool.clone().map(PoolState::new),
            session,
        });
        return Ok((StatusCode::CREATED, Json(body)));
    }
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let mut guard = lock_slot(&state, &id).await?;
    Ok(Json(view(&state, &slot(&mut guard).session)?))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryView {
    pub turn_index: usize,
    pub text: String,
    pub kind: QueryKind,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct NextResponse {
    pub done: bool,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QueryView>,
    /// An issued query the user may still answer after the budget ran out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_turn: Option<usize>,
}

fn pending_view(session: &Session) -> Option<QueryView> {
    session.pending_turn().map(|t| QueryView {
        turn_index: t.index,
        text: t.query_text.clone(),
        kind: query_kind(session.policy().kind),
    })
}

fn done(session: &Session) -> NextResponse {
    NextResponse {
        done: true,
        state: session.state(),
        query: None,
        pending_turn: session.pending_turn().map(|t| t.index),
    }
}

async fn next_query(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<NextResponse>> {
    let mut guard = lock_slot(&state, &id).await?;
    let slot = slot(&mut guard);
    let session = &slot.session;
    if session.state() != SessionState::Eliciting {
        return Ok(Json(done(session)));
    }
    if elicitation::should_stop(session, state.clock.now()) {
        if session.pending_turn().is_some() {
            return Ok(Json(done(session)));
        }
        let finished = session.finish_elicitation()?;
        state.persist(&finished)?;
        slot.session = finished;
        return Ok(Json(done(&slot.session)));
    }
    if let Some(query) = pending_view(session) {
        return Ok(Json(NextResponse {
            done: false,
            state: session.state(),
            query: Some(query),
            pending_turn: None,
        }));
    }

    let domain = state.domain(session.domain())?.clone();
    let gateway = state.elicitor.clone();
    let worker_session = session.clone();
    let mut pool = slot.pool.take();
    let (outcome, pool) = tokio::task::spawn_blocking(move || {
        let outcome = elicitation::next_query(&worker_session, &domain, &gateway, pool.as_mut());
        (outcome, pool)
    })
    .await
    .map_err(join_error)?;
    slot.pool = pool;

    let issued = match outcome {
        Ok(issued) => issued,
        Err(ElicitationError::Pool(PoolError::Exhausted)) => {
            let finished = slot.session.finish_elicitation()?;
            state.persist(&finished)?;
            slot.session = finished;
            return Ok(Json(done(&slot.session)));
        }
        Err(ElicitationError::Gateway(e)) => return Err(ApiError::Upstream(e.to_string())),
        Err(e @ ElicitationError::OffFormat(_)) => return Err(ApiError::Upstream(e.to_string())),
        Err(e) => return Err(ApiError::Conflict(e.to_string())),
    };
    // Issue time is taken after the model returns; its latency is then
    // excluded from user time.
    let now = state.clock.now().max(latest_event(&slot.session));
    let next = slot
        .session
        .issue_query(&issued.query.text, issued.query.source_item_id, now, issued.lm_latency)?;
    state.persist(&next)?;
    slot.session = next;
    Ok(Json(NextResponse {
        done: false,
        state: slot.session.state(),
        query: pending_view(&slot.session),
        pending_turn: None,
    }))
}

fn latest_event(session: &Session) -> chrono::DateTime<chrono::Utc> {
    session
        .transcript()
        .iter()
        .flat_map(|t| [Some(t.query_issued_at), t.answer_received_at])
        .flatten()
        .fold(session.created_at(), std::cmp::max)
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub turn_index: usize,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub turn_index: usize,
    /// Whether the budget has run out; the next GET next will report done.
    pub budget_exhausted: bool,
}

async fn post_answer(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    ApiJson(req): ApiJson<AnswerRequest>,
) -> ApiResult<Json<AnswerResponse>> {
    if req.text.trim().is_empty() {
        return Err(ApiError::Unprocessable("answer text is empty".into()));
    }
    let mut guard = lock_slot(&state, &id).await?;
    let slot = slot(&mut guard);
    if slot.session.policy().kind == PolicyKind::StaticPrompt {
        return Err(ApiError::Conflict("static_prompt sessions submit through /spec".into()));
    }
    let now = state.clock.now();
    let next = slot.session.append_answer(req.turn_index, &req.text, now)?;
    state.persist(&next)?;
    slot.session = next;
    Ok(Json(AnswerResponse {
        turn_index: req.turn_index,
        budget_exhausted: elicitation::should_stop(&slot.session, now),
    }))
}

#[derive(Debug, Deserialize)]
pub struct SpecRequest {
    pub text: String,
}

async fn post_spec(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    ApiJson(req): ApiJson<SpecRequest>,
) -> ApiResult<Json<SessionView>> {
    if req.text.trim().is_empty() {
        return Err(ApiError::Unprocessable("specification text is empty".into()));
    }
    let mut guard = lock_slot(&state, &id).await?;
    let slot = slot(&mut guard);
    let domain = state.domain(slot.session.domain())?;
    let request_text = domain.elicitation_instructions(InstructionFlow::Prompting);
    let now = state.clock.now();
    let next = slot.session.submit_free_text(&request_text, &req.text, now)?;
    state.persist(&next)?;
    slot.session = next;
    Ok(Json(view(&state, &slot.session)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TestSetItem {
    pub item_id: String,
    pub body: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TestSetResponse {
    pub instructions: String,
    pub items: Vec<TestSetItem>,
}

/// Test items in an order fixed by the session seed.
pub fn presentation_order(session: &Session, domain: &DomainSpec) -> Vec<TestSetItem> {
    let mut items: Vec<TestSetItem> = domain
        .test_set
        .iter()
        .map(|i| TestSetItem {
            item_id: i.id.clone(),
            body: i.body.clone(),
        })
        .collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(session.seed()));
    items
}

async fn get_testset(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<TestSetResponse>> {
    let mut guard = lock_slot(&state, &id).await?;
    let session = &slot(&mut guard).session;
    if session.state() == SessionState::Eliciting {
        return Err(ApiError::Conflict("test set is shown after elicitation".into()));
    }
    let domain = state.domain(session.domain())?;
    Ok(Json(TestSetResponse {
        instructions: domain.labeling_instructions.clone(),
        items: presentation_order(session, domain),
    }))
}

async fn post_judgments(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    ApiJson(judgments): ApiJson<Vec<Judgment>>,
) -> ApiResult<Json<SessionView>> {
    let mut guard = lock_slot(&state, &id).await?;
    let slot = slot(&mut guard);
    let domain = state.domain(slot.session.domain())?;
    let next = slot.session.record_judgments(&judgments, &domain.test_set)?;
    if let Some(missing) = domain
        .test_set
        .iter()
        .find(|item| !judgments.iter().any(|j| j.item_id == item.id))
    {
        return Err(ApiError::Unprocessable(format!(
            "no judgment for item `{}`",
            missing.id
        )));
    }
    state.persist(&next)?;
    slot.session = next;
    Ok(Json(view(&state, &slot.session)?))
}

async fn get_survey(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SurveyInstrument>> {
    let mut guard = lock_slot(&state, &id).await?;
    Ok(Json(SurveyInstrument::for_policy(
        slot(&mut guard).session.policy().kind,
    )))
}

async fn post_survey(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    ApiJson(answers): ApiJson<Vec<SurveyAnswer>>,
) -> ApiResult<Json<SessionView>> {
    let mut guard = lock_slot(&state, &id).await?;
    let slot = slot(&mut guard);
    let instrument = SurveyInstrument::for_policy(slot.session.policy().kind);
    let phase = instrument.validate(&answers, slot.session.state())?;
    let next = slot
        .session
        .record_survey(&answers, phase == SurveyPhase::PostJudgment)?;
    state.persist(&next)?;
    slot.session = next;
    Ok(Json(view(&state, &slot.session)?))
}

async fn get_results(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionResults>> {
    let mut guard = lock_slot(&state, &id).await?;
    let session = slot(&mut guard).session.clone();
    if session.state() != SessionState::Complete {
        return Err(ResultsError::NotComplete(session.state()).into());
    }
    if let Some(record) = state.store.get::<SessionResults>(RecordKind::Predictions, &id)? {
        return Ok(Json(record.payload));
    }
    let domain = state.domain(session.domain())?.clone();
    let predictor = state.predictor.clone();
    let results = tokio::task::spawn_blocking(move || compute_results(&session, &domain, &predictor))
        .await
        .map_err(join_error)??;
    state.store.put(RecordKind::Predictions, &id, &results)?;
    Ok(Json(results))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DomainSummary {
    pub id: DomainId,
    pub test_set_size: usize,
}

async fn list_domains(State(state): State<AppState>) -> Json<Vec<DomainSummary>> {
    Json(
        state
            .registry
            .ids()
            .map(|id| DomainSummary {
                id: id.clone(),
                test_set_size: state.registry.get(id).map_or(0, |d| d.test_set.len()),
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstructionTexts {
    pub pool: String,
    pub generative: String,
    pub prompting: String,
    pub labeling: String,
}

async fn domain_instructions(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<InstructionTexts>> {
    let id: DomainId = id
        .parse()
        .map_err(|_| ApiError::NotFound(format!("no domain `{id}`")))?;
    let domain = state.domain(&id)?;
    Ok(Json(InstructionTexts {
        pool: domain.elicitation_instructions(InstructionFlow::Pool),
        generative: domain.elicitation_instructions(InstructionFlow::Generative),
        prompting: domain.elicitation_instructions(InstructionFlow::Prompting),
        labeling: domain.labeling_instructions.clone(),
    }))
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let mut app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_query))
        .route("/sessions/{id}/answer", post(post_answer))
        .route("/sessions/{id}/spec", post(post_spec))
        .route("/sessions/{id}/testset", get(get_testset))
        .route("/sessions/{id}/judgments", post(post_judgments))
        .route("/sessions/{id}/survey", get(get_survey).post(post_survey))
        .route("/sessions/{id}/results", get(get_results))
        .route("/domains", get(list_domains))
        .route("/domains/{id}/instructions", get(domain_instructions));
    if let Some(dir) = static_dir {
        app = app.nest_service("/app", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app.with_state(state)
}
