//! Elicitation policies: the three generative prompt policies, pool-based
//! sampling baselines, and the single-turn user-written prompt.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainSpec, InstructionFlow};
use crate::lm::{ChatRequest, Gateway, GatewayError};
use crate::metrics::question_entropy;
use crate::pool::{self, ClusterModel, EmbeddingVector, PoolError, PoolItem, RoundRobinState};
use crate::session::{render_transcript, PolicyKind, Session, SessionState, StopRule};

/// Slot for the transcript inside the elicitation templates.
pub const TRANSCRIPT_SLOT: &str = "[ Elicitation transcript ]";

#[derive(Debug, Error)]
pub enum ElicitationError {
    #[error("no elicitation template for {0:?}")]
    NoTemplate(PolicyKind),
    #[error("session is not eliciting ({0:?})")]
    NotEliciting(SessionState),
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error("a query is still waiting for an answer")]
    PendingAnswer,
    #[error("static prompt already requested")]
    AlreadyAsked,
    #[error("policy {0:?} needs a pool")]
    MissingPool(PolicyKind),
    #[error("language model returned no usable question: {0:?}")]
    OffFormat(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    EdgeCase,
    YesnoQuestion,
    OpenQuestion,
    PoolItem,
    FreeTextRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub kind: QueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_item_id: Option<String>,
}

/// A query plus the LM time spent producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct IssuedQuery {
    pub query: Query,
    pub lm_latency: Duration,
}

const ACTIVE_LEARNING_TEMPLATE: &str = "Your task is to [ goal ].

Come up with a potential edge case to learn as much information as you can about what their desired \
behavior should be under different circumstances.
Make sure the edge case addresses different aspects of the system than the edge cases that have already \
been considered.

An example edge case is: [ example ]

Current cases:
[ Elicitation transcript ]

Generate the most informative edge case that, when answered, will reveal the most about the desired \
behavior beyond what has already been queried for above. Generate the edge case in the following format, \
and nothing else: \"[ format ]\"";

const QUESTION_TEMPLATE: &str = "Your task is to [ goal ].

Previous questions:
[ Elicitation transcript ]

Generate the most informative [ question type ] that, when answered, will reveal the most about the \
desired behavior beyond what has already been queried for above. Make sure your question addresses \
different aspects of the implementation than the questions that have already been asked. At the same time \
however, the question should be bite-sized, and not ask for too much at once. Phrase your question in a way \
that is understandable to non-expert humans; do not use any jargon without explanation. Generate the \
[ question type ] and nothing else:";

/// Fills the generative elicitation template for `method` in `domain`.
pub fn build_elicitation_prompt(
    method: PolicyKind,
    domain: &DomainSpec,
    transcript_text: &str,
) -> Result<String, ElicitationError> {
    let filled = match method {
        PolicyKind::GateActiveLearning => ACTIVE_LEARNING_TEMPLATE
            .replace("[ goal ]", &domain.elicitation_goal_text)
            .replace("[ example ]", &domain.example_edge_case)
            .replace("[ format ]", &domain.edge_case_format),
        PolicyKind::GateYesno | PolicyKind::GateOpen => {
            let question = if method == PolicyKind::GateYesno {
                "yes/no question"
            } else {
                "open-ended question"
            };
            QUESTION_TEMPLATE
                .replace("[ goal ]", &domain.elicitation_goal_text)
                .replace("[ question type ]", question)
        }
        other => return Err(ElicitationError::NoTemplate(other)),
    };
    // Substituted last so transcript text is never re-scanned for slots.
    Ok(filled.replacen(TRANSCRIPT_SLOT, transcript_text, 1))
}

/// Strips whitespace and one pair of surrounding quotes.
fn clean_generated(text: &str) -> String {
    let trimmed = text.trim();
    let pairs = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')];
    for (open, close) in pairs {
        if let Some(inner) = trimmed.strip_prefix(open).and_then(|rest| rest.strip_suffix(close)) {
            return inner.trim().to_string();
        }
    }
    trimmed.to_string()
}

/// Pool plus the immutable artifacts built from it.
#[derive(Debug, Clone)]
pub struct PoolIndex {
    pub items: Vec<PoolItem>,
    pub vectors: Vec<EmbeddingVector>,
    pub clusters: ClusterModel,
}

impl PoolIndex {
    pub fn build(items: Vec<PoolItem>, embedder: &dyn pool::Embedder, k: usize, seed: u64) -> Result<Self, PoolError> {
        pool::check_unique(&items)?;
        let vectors = pool::embed_pool(&items, embedder)?;
        let clusters = pool::cluster(&vectors, k, seed, pool::DEFAULT_MAX_ITERS);
        Ok(Self {
            items,
            vectors,
            clusters,
        })
    }

    pub fn item(&self, id: &str) -> Option<&PoolItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

/// Per-session pool cursor. Not shared between sessions.
#[derive(Debug, Clone)]
pub struct PoolState {
    index: Arc<PoolIndex>,
    round_robin: RoundRobinState,
}

impl PoolState {
    pub fn new(index: Arc<PoolIndex>) -> Self {
        let round_robin = RoundRobinState::new(&index.clusters);
        Self { index, round_robin }
    }

    /// Rebuilds the cursor for a session restored from storage by replaying
    /// its pool turns.
    pub fn resume(index: Arc<PoolIndex>, session: &Session) -> Result<Self, PoolError> {
        let mut state = Self::new(index);
        if session.policy().kind == PolicyKind::PoolDiversity {
            for turn in session.transcript() {
                if turn.source_item_id.is_some() {
                    let (_, next) =
                        pool::next_diverse(&state.round_robin, &state.index.clusters, &state.index.vectors)?;
                    state.round_robin = next;
                }
            }
        }
        state.round_robin.mark_used(session.used_pool_items());
        Ok(state)
    }

    pub fn index(&self) -> &PoolIndex {
        &self.index
    }
}

/// Produces the next query for `session` under its policy.
pub fn next_query(
    session: &Session,
    domain: &DomainSpec,
    gateway: &Gateway,
    pool_state: Option<&mut PoolState>,
) -> Result<IssuedQuery, ElicitationError> {
    if session.state() != SessionState::Eliciting {
        return Err(ElicitationError::NotEliciting(session.state()));
    }
    if session.pending_turn().is_some() {
        return Err(ElicitationError::PendingAnswer);
    }
    let kind = session.policy().kind;
    let answered = render_transcript(session.transcript());
    match kind {
        PolicyKind::GateActiveLearning | PolicyKind::GateYesno | PolicyKind::GateOpen => {
            let prompt = build_elicitation_prompt(kind, domain, &answered)?;
            let request = ChatRequest::prompt(prompt);
            let mut latency = Duration::ZERO;
            let mut last = String::new();
            // One re-ask when the model returns nothing usable.
            for _ in 0..2 {
                let response = gateway.complete(&request)?;
                latency += response.latency;
                let text = clean_generated(&response.content);
                if !text.is_empty() {
                    let query_kind = match kind {
                        PolicyKind::GateActiveLearning => QueryKind::EdgeCase,
                        PolicyKind::GateYesno => QueryKind::YesnoQuestion,
                        _ => QueryKind::OpenQuestion,
                    };
                    return Ok(IssuedQuery {
                        query: Query {
                            text,
                            kind: query_kind,
                            source_item_id: None,
                        },
                        lm_latency: latency,
                    });
                }
                last = response.content;
            }
            Err(ElicitationError::OffFormat(last))
        }
        PolicyKind::StaticPrompt => {
            if !session.transcript().is_empty() {
                return Err(ElicitationError::AlreadyAsked);
            }
            Ok(IssuedQuery {
                query: Query {
                    text: domain.elicitation_instructions(InstructionFlow::Prompting),
                    kind: QueryKind::FreeTextRequest,
                    source_item_id: None,
                },
                lm_latency: Duration::ZERO,
            })
        }
        PolicyKind::PoolRandom
        | PolicyKind::SupervisedRandom
        | PolicyKind::PoolDiversity
        | PolicyKind::PoolUncertainty => {
            let state = pool_state.ok_or(ElicitationError::MissingPool(kind))?;
            let (item_id, lm_latency) = pick_pool_item(kind, session, domain, gateway, state, &answered)?;
            let item = state.index.item(&item_id).expect("picked from pool");
            Ok(IssuedQuery {
                query: Query {
                    text: domain.edge_case_query(&item.body),
                    kind: QueryKind::PoolItem,
                    source_item_id: Some(item_id),
                },
                lm_latency,
            })
        }
    }
}

fn pick_pool_item(
    kind: PolicyKind,
    session: &Session,
    domain: &DomainSpec,
    gateway: &Gateway,
    state: &mut PoolState,
    context: &str,
) -> Result<(String, Duration), ElicitationError> {
    state.round_robin.mark_used(session.used_pool_items());
    if kind == PolicyKind::PoolDiversity {
        let (id, next) = pool::next_diverse(&state.round_robin, &state.index.clusters, &state.index.vectors)?;
        state.round_robin = next;
        return Ok((id, Duration::ZERO));
    }

    let mut unused: Vec<&PoolItem> = state
        .index
        .items
        .iter()
        .filter(|i| !state.round_robin.used.contains(&i.id))
        .collect();
    if unused.is_empty() {
        return Err(PoolError::Exhausted.into());
    }
    unused.sort_by(|a, b| a.id.cmp(&b.id));

    let (id, latency) = if kind == PolicyKind::PoolUncertainty {
        let mut latency = Duration::ZERO;
        let mut best: Option<(f64, &str)> = None;
        for item in &unused {
            let estimate = gateway.estimate_yes(&domain.edge_case_query(&item.body), context)?;
            latency += estimate.latency;
            let h = question_entropy(estimate.probability);
            // Sorted by id, so strict improvement keeps the lowest id on ties.
            if best.is_none_or(|(bh, _)| h > bh) {
                best = Some((h, item.id.as_str()));
            }
        }
        (best.expect("non-empty").1.to_string(), latency)
    } else {
        let turn = session.transcript().len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(session.seed() ^ turn.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let pick = rng.random_range(0..unused.len());
        (unused[pick].id.clone(), Duration::ZERO)
    };
    state.round_robin.used.insert(id.clone());
    Ok((id, latency))
}

/// Whether elicitation should stop issuing new queries at `now`. An already
/// issued query may still be answered after this turns true.
pub fn should_stop(session: &Session, now: DateTime<Utc>) -> bool {
    if session.policy().kind == PolicyKind::StaticPrompt {
        return session.answered_turns() >= 1;
    }
    match session.policy().stop_rule() {
        StopRule::Time(budget) => session.elapsed_user_time(now) >= budget,
        StopRule::Turns(turns) => session.answered_turns() >= turns as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DomainId, DomainRegistry};
    use crate::lm::{Backend, LmProfile};
    use crate::session::{new_session, PolicySpec};
    use chrono::TimeZone;
    use std::collections::BTreeMap;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    fn domain(id: DomainId) -> DomainSpec {
        DomainSpec::builtin(&id).unwrap()
    }

    fn session_for(policy: PolicySpec) -> Session {
        let registry = DomainRegistry::with_builtins();
        new_session(&registry, &DomainId::EmailValidation, policy, 11, 0, t0()).unwrap()
    }

    #[test]
    fn active_learning_prompt_carries_the_domain_example() {
        let prompt =
            build_elicitation_prompt(PolicyKind::GateActiveLearning, &domain(DomainId::EmailValidation), "").unwrap();
        assert!(prompt.contains("Should the following email be accepted? username@example.com"));
        assert!(prompt.ends_with("and nothing else: \"Should the following be accepted? [edge case]\""));
    }

    #[test]
    fn yes_no_prompt_names_the_question_type_twice() {
        let prompt =
            build_elicitation_prompt(PolicyKind::GateYesno, &domain(DomainId::ContentRecommendation), "").unwrap();
        assert!(prompt.contains("Generate the most informative yes/no question"));
        assert!(prompt.ends_with("Generate the yes/no question and nothing else:"));
        assert!(!prompt.contains('['));
    }

    #[test]
    fn open_prompt_embeds_transcript_verbatim() {
        let transcript = "Q: Is hunger enough?\nA: Only sometimes [really]\n";
        let prompt =
            build_elicitation_prompt(PolicyKind::GateOpen, &domain(DomainId::MoralReasoning), transcript).unwrap();
        assert!(prompt.contains(&format!("Previous questions:\n{transcript}\n")));
        assert!(prompt.contains("open-ended question and nothing else:"));
    }

    #[test]
    fn non_generative_methods_have_no_template() {
        assert!(matches!(
            build_elicitation_prompt(PolicyKind::PoolRandom, &domain(DomainId::EmailValidation), ""),
            Err(ElicitationError::NoTemplate(PolicyKind::PoolRandom))
        ));
    }

    #[test]
    fn generated_question_passes_through_cleaned() {
        let gw = Gateway::from_profile(LmProfile::scripted(["  \"Do you enjoy health articles?\"\n"])).unwrap();
        let s = session_for(PolicySpec::timed(PolicyKind::GateYesno));
        let issued = next_query(&s, &domain(DomainId::ContentRecommendation), &gw, None).unwrap();
        assert_eq!(issued.query.text, "Do you enjoy health articles?");
        assert_eq!(issued.query.kind, QueryKind::YesnoQuestion);
    }

    #[test]
    fn empty_generation_is_reasked_once_then_fails() {
        let gw = Gateway::from_profile(LmProfile::scripted(["\"\"", "Is a plus sign allowed?"])).unwrap();
        let s = session_for(PolicySpec::timed(PolicyKind::GateOpen));
        let issued = next_query(&s, &domain(DomainId::EmailValidation), &gw, None).unwrap();
        assert_eq!(issued.query.text, "Is a plus sign allowed?");

        let gw = Gateway::from_profile(LmProfile::scripted(["''", "\"\""])).unwrap();
        assert!(matches!(
            next_query(&s, &domain(DomainId::EmailValidation), &gw, None),
            Err(ElicitationError::OffFormat(_))
        ));
    }

    #[test]
    fn static_prompt_is_asked_once() {
        let gw = Gateway::from_profile(LmProfile::seeded(0)).unwrap();
        let s = session_for(PolicySpec::timed(PolicyKind::StaticPrompt));
        let d = domain(DomainId::EmailValidation);
        let issued = next_query(&s, &d, &gw, None).unwrap();
        assert_eq!(issued.query.kind, QueryKind::FreeTextRequest);
        let s = s.issue_query(&issued.query.text, None, t0(), Duration::ZERO).unwrap();
        let s = s.append_answer(0, "anything with an @", t0()).unwrap();
        assert!(matches!(
            next_query(&s, &d, &gw, None),
            Err(ElicitationError::AlreadyAsked)
        ));
    }

    fn index(items: &[(&str, &str)]) -> Arc<PoolIndex> {
        let items = items.iter().map(|(id, body)| PoolItem::new(*id, *body)).collect();
        Arc::new(PoolIndex::build(items, &pool::HashEmbedder::default(), 15, 0).unwrap())
    }

    #[test]
    fn uncertainty_picks_the_max_entropy_item() {
        let d = domain(DomainId::EmailValidation);
        let idx = index(&[("x1", "a@b.com"), ("x2", "a b@c.com"), ("x3", "abc")]);
        let yes: BTreeMap<String, f64> = [("a@b.com", 0.9), ("a b@c.com", 0.5), ("abc", 0.1)]
            .into_iter()
            .map(|(body, p)| (d.edge_case_query(body), p))
            .collect();
        let gw = Gateway::from_profile(LmProfile::new(Backend::MockScripted {
            script: vec![],
            yes_probabilities: yes,
            default_yes_probability: None,
        }))
        .unwrap();
        let s = session_for(PolicySpec::timed(PolicyKind::PoolUncertainty).with_pool("p"));
        let mut state = PoolState::new(idx);
        let issued = next_query(&s, &d, &gw, Some(&mut state)).unwrap();
        assert_eq!(issued.query.source_item_id.as_deref(), Some("x2"));
        assert_eq!(issued.query.text, "Should the following be accepted? a b@c.com");
    }

    #[test]
    fn uncertainty_ties_go_to_lowest_id() {
        let d = domain(DomainId::EmailValidation);
        let idx = index(&[("b", "1"), ("a", "2"), ("c", "3")]);
        let gw = Gateway::from_profile(LmProfile::new(Backend::MockScripted {
            script: vec![],
            yes_probabilities: BTreeMap::new(),
            default_yes_probability: Some(0.3),
        }))
        .unwrap();
        let s = session_for(PolicySpec::timed(PolicyKind::PoolUncertainty).with_pool("p"));
        let issued = next_query(&s, &d, &gw, Some(&mut PoolState::new(idx))).unwrap();
        assert_eq!(issued.query.source_item_id.as_deref(), Some("a"));
    }

    #[test]
    fn random_pool_never_repeats_and_exhausts() {
        let d = domain(DomainId::EmailValidation);
        let idx = index(&[("a", "1"), ("b", "2"), ("c", "3"), ("d", "4")]);
        let gw = Gateway::from_profile(LmProfile::seeded(0)).unwrap();
        let mut s = session_for(PolicySpec::timed(PolicyKind::PoolRandom).with_pool("p"));
        let mut state = PoolState::new(idx);
        let mut seen = std::collections::HashSet::new();
        for i in 0..4 {
            let issued = next_query(&s, &d, &gw, Some(&mut state)).unwrap();
            assert!(seen.insert(issued.query.source_item_id.clone().unwrap()));
            s = s
                .issue_query(&issued.query.text, issued.query.source_item_id, t0(), Duration::ZERO)
                .unwrap()
                .append_answer(i, "no", t0())
                .unwrap();
        }
        assert!(matches!(
            next_query(&s, &d, &gw, Some(&mut state)),
            Err(ElicitationError::Pool(PoolError::Exhausted))
        ));
    }

    #[test]
    fn pool_policy_without_state_errors() {
        let gw = Gateway::from_profile(LmProfile::seeded(0)).unwrap();
        let s = session_for(PolicySpec::timed(PolicyKind::PoolDiversity).with_pool("p"));
        assert!(matches!(
            next_query(&s, &domain(DomainId::EmailValidation), &gw, None),
            Err(ElicitationError::MissingPool(_))
        ));
    }

    #[test]
    fn time_budget_trips_at_five_minutes() {
        let s = session_for(PolicySpec::timed(PolicyKind::GateYesno));
        assert!(!should_stop(&s, t0() + chrono::TimeDelta::seconds(299)));
        assert!(should_stop(&s, t0() + chrono::TimeDelta::seconds(300)));
    }

    #[test]
    fn turn_budget_counts_answered_turns() {
        let mut s = session_for(PolicySpec::turns(PolicyKind::GateYesno, 5));
        for i in 0..5 {
            assert!(!should_stop(&s, t0()));
            s = s
                .issue_query("q", None, t0(), Duration::ZERO)
                .unwrap()
                .append_answer(i, "a", t0())
                .unwrap();
        }
        assert!(should_stop(&s, t0()));
    }
}
