//! Usability questionnaire administered after elicitation and after
//! labeling.

use std::collections::BTreeSet;

use gate_core::session::{PolicyKind, SessionState, SurveyAnswer, SurveyValue};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Likert1To7,
    FreeText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyPhase {
    PostElicitation,
    PostJudgment,
}

impl SurveyPhase {
    /// Session state in which this phase's answers are accepted.
    pub fn accepted_in(self) -> SessionState {
        match self {
            SurveyPhase::PostElicitation => SessionState::Judging,
            SurveyPhase::PostJudgment => SessionState::Surveying,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyQuestion {
    pub question_id: String,
    pub text: String,
    pub scale: Scale,
    pub phase: SurveyPhase,
}

#[derive(Debug, Error, PartialEq)]
pub enum SurveyError {
    #[error("no answers submitted")]
    Empty,
    #[error("unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("answers span more than one survey phase")]
    MixedPhases,
    #[error("question `{0}` answered twice")]
    Duplicate(String),
    #[error("question `{0}` needs a rating from 1 to 7")]
    BadRating(String),
    #[error("question `{0}` needs free text")]
    NotText(String),
    #[error("question `{0}` is required")]
    Missing(String),
    #[error("{phase:?} answers are accepted only while {expected:?}, session is {actual:?}")]
    WrongState {
        phase: SurveyPhase,
        expected: SessionState,
        actual: SessionState,
    },
}

/// Wording of q1 for sessions where the user wrote their own answer.
pub const Q1_WRITTEN: &str = "How mentally demanding was writing your answer?";

const QUESTIONS: [(&str, &str, Scale, SurveyPhase); 7] = [
    (
        "q1",
        "How mentally demanding was interacting with the chatbot?",
        Scale::Likert1To7,
        SurveyPhase::PostElicitation,
    ),
    (
        "q2",
        "To what extent did the chatbot raise issues or aspects about your preferences that you hadn't \
         previously considered?",
        Scale::Likert1To7,
        SurveyPhase::PostElicitation,
    ),
    (
        "q3",
        "How comprehensively do you feel the chatbot's questions characterized your preferences about the task?",
        Scale::Likert1To7,
        SurveyPhase::PostElicitation,
    ),
    (
        "q4",
        "After seeing the examples in the second part of the task, how well do you feel the answer you wrote \
         (in the first part of the task) covered the important issues or aspects of these examples?",
        Scale::Likert1To7,
        SurveyPhase::PostJudgment,
    ),
    (
        "q5",
        "When performing the second part of the task, to what extent did you refer back to your conversation \
         history from the first part of the task?",
        Scale::Likert1To7,
        SurveyPhase::PostJudgment,
    ),
    (
        "q6",
        "How much experience have you had (if any) with interacting with language models (e.g. ChatGPT, GPT4, \
         etc.)?",
        Scale::Likert1To7,
        SurveyPhase::PostJudgment,
    ),
    (
        "q7",
        "Do you have any other feedback about the task?",
        Scale::FreeText,
        SurveyPhase::PostJudgment,
    ),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyInstrument {
    pub questions: Vec<SurveyQuestion>,
}

impl SurveyInstrument {
    pub fn builtin() -> Self {
        Self {
            questions: QUESTIONS
                .iter()
                .map(|(id, text, scale, phase)| SurveyQuestion {
                    question_id: id.to_string(),
                    text: text.to_string(),
                    scale: *scale,
                    phase: *phase,
                })
                .collect(),
        }
    }

    /// Instrument as shown for a given policy; ids never change.
    pub fn for_policy(kind: PolicyKind) -> Self {
        let mut instrument = Self::builtin();
        if kind == PolicyKind::StaticPrompt {
            instrument.questions[0].text = Q1_WRITTEN.to_string();
        }
        instrument
    }

    pub fn question(&self, id: &str) -> Option<&SurveyQuestion> {
        self.questions.iter().find(|q| q.question_id == id)
    }

    pub fn phase(&self, phase: SurveyPhase) -> impl Iterator<Item = &SurveyQuestion> {
        self.questions.iter().filter(move |q| q.phase == phase)
    }

    /// Checks one phase's submission and returns that phase. Every Likert
    /// question of the phase is required; free text is optional.
    pub fn validate(&self, answers: &[SurveyAnswer], state: SessionState) -> Result<SurveyPhase, SurveyError> {
        let first = answers.first().ok_or(SurveyError::Empty)?;
        let phase = self
            .question(&first.question_id)
            .ok_or_else(|| SurveyError::UnknownQuestion(first.question_id.clone()))?
            .phase;
        let mut seen = BTreeSet::new();
        for answer in answers {
            let q = self
                .question(&answer.question_id)
                .ok_or_else(|| SurveyError::UnknownQuestion(answer.question_id.clone()))?;
            if q.phase != phase {
                return Err(SurveyError::MixedPhases);
            }
            if !seen.insert(q.question_id.as_str()) {
                return Err(SurveyError::Duplicate(q.question_id.clone()));
            }
            match (q.scale, &answer.value) {
                (Scale::Likert1To7, SurveyValue::Rating(r)) if (1..=7).contains(r) => {}
                (Scale::Likert1To7, _) => return Err(SurveyError::BadRating(q.question_id.clone())),
                (Scale::FreeText, SurveyValue::Text(_)) => {}
                (Scale::FreeText, _) => return Err(SurveyError::NotText(q.question_id.clone())),
            }
        }
        if let Some(missing) = self
            .phase(phase)
            .find(|q| q.scale == Scale::Likert1To7 && !seen.contains(q.question_id.as_str()))
        {
            return Err(SurveyError::Missing(missing.question_id.clone()));
        }
        if state != phase.accepted_in() {
            return Err(SurveyError::WrongState {
                phase,
                expected: phase.accepted_in(),
                actual: state,
            });
        }
        Ok(phase)
    }
}
