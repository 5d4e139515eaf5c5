//! Task domains: the per-domain text that fills the elicitation, decision and
//! instruction templates, plus the held-out test set.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder inside [`DomainSpec::edge_case_format`] replaced by the case body.
pub const EDGE_CASE_SLOT: &str = "[edge case]";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("domain `{domain}` has an empty `{field}` text")]
    EmptyText { domain: String, field: &'static str },
    #[error("duplicate test item id `{0}`")]
    DuplicateItem(String),
    #[error("invalid domain id `{0}`")]
    InvalidId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DomainId {
    ContentRecommendation,
    MoralReasoning,
    EmailValidation,
    Custom(String),
}

impl DomainId {
    pub const BUILT_IN: [DomainId; 3] = [
        DomainId::ContentRecommendation,
        DomainId::MoralReasoning,
        DomainId::EmailValidation,
    ];
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::ContentRecommendation => f.write_str("content_recommendation"),
            DomainId::MoralReasoning => f.write_str("moral_reasoning"),
            DomainId::EmailValidation => f.write_str("email_validation"),
            DomainId::Custom(name) => write!(f, "custom:{name}"),
        }
    }
}

impl FromStr for DomainId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "content_recommendation" => Ok(DomainId::ContentRecommendation),
            "moral_reasoning" => Ok(DomainId::MoralReasoning),
            "email_validation" => Ok(DomainId::EmailValidation),
            other => match other.strip_prefix("custom:") {
                Some(name) if !name.is_empty() => Ok(DomainId::Custom(name.to_string())),
                _ => Err(DomainError::InvalidId(other.to_string())),
            },
        }
    }
}

impl TryFrom<String> for DomainId {
    type Error = DomainError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<DomainId> for String {
    fn from(value: DomainId) -> Self {
        value.to_string()
    }
}

/// A held-out case the user and the predictor both label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: String,
    pub body: String,
}

impl TestItem {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: body.into(),
        }
    }
}

/// Which instruction screen a participant sees during elicitation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionFlow {
    /// Supervised learning and pool-based active learning.
    Pool,
    /// User-written prompt.
    Prompting,
    /// The three generative elicitation methods.
    Generative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: DomainId,
    /// Fills "Your task is to [...]." in the elicitation prompts.
    pub elicitation_goal_text: String,
    /// Fills "An example edge case is: [...]".
    pub example_edge_case: String,
    /// Requested output format for generated edge cases, containing [`EDGE_CASE_SLOT`].
    pub edge_case_format: String,
    /// Decision prompt text placed before the transcript.
    pub decision_preamble_text: String,
    /// Decision prompt text placed between the transcript and the test case.
    pub decision_question_text: String,
    /// Top-level domain instructions shown before elicitation.
    pub ui_instructions: String,
    /// "... explain all details about [...]" / "... a series of questions about [...]".
    pub preference_topic: String,
    /// "... feedback on a test set of [...]".
    pub test_set_noun: String,
    /// "... has learned [...]".
    pub learned_noun: String,
    /// Instruction shown above the labeling radio buttons.
    pub labeling_instructions: String,
    #[serde(default)]
    pub test_set: Vec<TestItem>,
}

impl DomainSpec {
    pub fn builtin(id: &DomainId) -> Option<DomainSpec> {
        let texts = match id {
            DomainId::ContentRecommendation => &CONTENT,
            DomainId::MoralReasoning => &MORAL,
            DomainId::EmailValidation => &EMAIL,
            DomainId::Custom(_) => return None,
        };
        Some(DomainSpec {
            id: id.clone(),
            elicitation_goal_text: texts.goal.to_string(),
            example_edge_case: texts.example.to_string(),
            edge_case_format: texts.edge_case_format.to_string(),
            decision_preamble_text: texts.decision_preamble.to_string(),
            decision_question_text: texts.decision_question.to_string(),
            ui_instructions: texts.ui_instructions.to_string(),
            preference_topic: texts.preference_topic.to_string(),
            test_set_noun: texts.test_set_noun.to_string(),
            learned_noun: texts.learned_noun.to_string(),
            labeling_instructions: texts.labeling.to_string(),
            test_set: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let fields: [(&'static str, &str); 10] = [
            ("elicitation_goal_text", &self.elicitation_goal_text),
            ("example_edge_case", &self.example_edge_case),
            ("edge_case_format", &self.edge_case_format),
            ("decision_preamble_text", &self.decision_preamble_text),
            ("decision_question_text", &self.decision_question_text),
            ("ui_instructions", &self.ui_instructions),
            ("preference_topic", &self.preference_topic),
            ("test_set_noun", &self.test_set_noun),
            ("learned_noun", &self.learned_noun),
            ("labeling_instructions", &self.labeling_instructions),
        ];
        for (field, text) in fields {
            if text.trim().is_empty() {
                return Err(DomainError::EmptyText {
                    domain: self.id.to_string(),
                    field,
                });
            }
        }
        check_unique_ids(&self.test_set)
    }

    pub fn with_test_set(mut self, items: Vec<TestItem>) -> Result<Self, DomainError> {
        check_unique_ids(&items)?;
        self.test_set = items;
        Ok(self)
    }

    /// Phrases `body` as an edge-case query in this domain's format.
    pub fn edge_case_query(&self, body: &str) -> String {
        self.edge_case_format.replacen(EDGE_CASE_SLOT, body, 1)
    }

    pub fn test_item(&self, id: &str) -> Option<&TestItem> {
        self.test_set.iter().find(|item| item.id == id)
    }

    /// Full instruction text for the elicitation phase.
    pub fn elicitation_instructions(&self, flow: InstructionFlow) -> String {
        let closing = format!(
            "In the final part of the study, you will give feedback on a test set of {}, which will \
             enable us to see how well a chatbot reading your responses has learned {}.",
            self.test_set_noun, self.learned_noun
        );
        match flow {
            InstructionFlow::Pool => format!(
                "{}\n\n{} {}\n\n{}\n\n{}",
                self.ui_instructions, ANSWER_GUIDANCE, CHAT_GUIDANCE, CHAT_TIME_NOTE, closing
            ),
            InstructionFlow::Generative => format!(
                "{}\n\nThis chatbot will ask you a series of questions about {}. {} {}\n\n{}\n\n{}",
                self.ui_instructions, self.preference_topic, ANSWER_GUIDANCE, CHAT_GUIDANCE, CHAT_TIME_NOTE, closing
            ),
            InstructionFlow::Prompting => format!(
                "{}\n\nTo the best of your ability, please explain all details about {}, such that \
                 someone reading your responses can understand and make judgments as close to your \
                 own as possible. {}\n\n{}\n\n{}",
                self.ui_instructions, self.preference_topic, PROMPT_GUIDANCE, PROMPT_TIME_NOTE, closing
            ),
        }
    }
}

fn check_unique_ids(items: &[TestItem]) -> Result<(), DomainError> {
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(DomainError::DuplicateItem(item.id.clone()));
        }
    }
    Ok(())
}

/// Registered domains, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct DomainRegistry {
    domains: BTreeMap<DomainId, DomainSpec>,
}

impl DomainRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The three built-in domains with empty test sets.
    pub fn with_builtins() -> Self {
        let mut registry = Self::default();
        for id in DomainId::BUILT_IN {
            let spec = DomainSpec::builtin(&id).expect("built-in domain");
            registry.domains.insert(id, spec);
        }
        registry
    }

    pub fn register(&mut self, spec: DomainSpec) -> Result<(), DomainError> {
        spec.validate()?;
        self.domains.insert(spec.id.clone(), spec);
        Ok(())
    }

    pub fn set_test_set(&mut self, id: &DomainId, items: Vec<TestItem>) -> Result<(), DomainError> {
        check_unique_ids(&items)?;
        let spec = self
            .domains
            .get_mut(id)
            .ok_or_else(|| DomainError::UnknownDomain(id.to_string()))?;
        spec.test_set = items;
        Ok(())
    }

    pub fn get(&self, id: &DomainId) -> Result<&DomainSpec, DomainError> {
        self.domains
            .get(id)
            .ok_or_else(|| DomainError::UnknownDomain(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &DomainId> {
        self.domains.keys()
    }
}

struct BuiltinTexts {
    goal: &'static str,
    example: &'static str,
    edge_case_format: &'static str,
    decision_preamble: &'static str,
    decision_question: &'static str,
    ui_instructions: &'static str,
    preference_topic: &'static str,
    test_set_noun: &'static str,
    learned_noun: &'static str,
    labeling: &'static str,
}

const CONTENT: BuiltinTexts = BuiltinTexts {
    goal: "learn what topics a user is interested in reading online article about. People's interests \
are broad, so you should seek to understand their interests across many topics; in other words, go for \
breadth rather than depth. Do not assume a user has given a complete answer to any question, so make sure \
to keep probing different types of interests",
    example: "Are you interested in the following article? Website Name: TechTalkDaily\n\
Title: 10 Must-Have Gadgets for 2023: A Comprehensive Guide\n\
Description: Discover the top 10 gadgets that will revolutionize your daily life in 2023. From smart home \
devices to the latest wearables, we've got you covered with our comprehensive guide.",
    edge_case_format: "Are you interested in the following article? [edge case]",
    decision_preamble: "A user has a particular set of preferences over what articles they would like to \
read. They have specified their preferences below:",
    decision_question: "Based on these preferences, would the user be interested in reading the following \
article? Answer with a probability between 0 and 1, where 0 means \"definitely not interested\" and 1 means \
\"definitely interested\". Only output the probability and nothing else. If uncertain, make your best guess.",
    ui_instructions: "We are testing a system for understanding people's interest in reading different \
kinds of online articles.\n\nFor example, you might be interested in articles about some topics, but not \
about others.",
    preference_topic: "your preferences of what kinds of online articles you would like to read",
    test_set_noun: "article headline and descriptions",
    learned_noun: "what you like and dislike",
    labeling: "Please indicate whether you would like to read the following articles: \"yes\" if you \
would, \"no\" if you would not.",
};

const MORAL: BuiltinTexts = BuiltinTexts {
    goal: "learn under what conditions the user would believe it is or is not ethical to steal a loaf of \
bread",
    example: "Situation: Is it ethical to steal a loaf of bread if you are starving to death and the bread \
would otherwise go to waste?",
    edge_case_format: "Situation: [edge case]",
    decision_preamble: "A user has a particular ethical code they follow. The following response(s) \
represent when this user would believe it is ethical to steal a loaf of bread.",
    decision_question: "\"Based on these response(s), would the user believe it is ethical to steal a loaf \
of bread in the following situation? Answer with a probability between 0 and 1, where 0 means \"definitely \
not\" and 1 means \"definitely yes\". Only output the probability and nothing else. If uncertain, make your \
best guess.",
    ui_instructions: "We are testing a system for understanding people's fuzzy intuitions and \
preferences.\n\nIn this experiment, we'll be capturing your moral intuitions about the act of stealing a \
loaf of bread, and whether there are certain cases where stealing may be morally permissible.",
    preference_topic: "your belief of when it is moral to steal a loaf of bread",
    test_set_noun: "moral situations",
    learned_noun: "your moral preferences",
    labeling: "Please indicate whether you think the following situations are morally permissible or \
not: \"yes\" if they are, \"no\" if they aren't.",
};

const EMAIL: BuiltinTexts = BuiltinTexts {
    goal: "learn what rules a user believes a valid email address format must adhere to (e.g. for \
developing a regex format checker)",
    example: "Should the following email be accepted? username@example.com",
    edge_case_format: "Should the following be accepted? [edge case]",
    decision_preamble: "A user has a particular format of emails that they believe to be valid. The \
following answer(s) represent this user's preferences of whether these emails adhere to their desired \
format.",
    decision_question: "Based on the user's preferences, does the following email adhere to the user's \
desired format? Answer with a probability between 0 and 1, where 0 means \"definitely not\" and 1 means \
\"definitely yes\". Only output the probability and nothing else. If uncertain, make your best guess.",
    ui_instructions: "We are testing a system for understanding people's fuzzy intuitions and \
preferences.\n\nIn this activity, we're going to be looking at different strings of text and you'll be \
deciding if they look like they could be an email address or not. For example, most people would agree \
that \"username@domain.com\" looks like an email address, while \"n12z5lFEN4\" does not. However, the \
rules for what can be an email address can be very unusual, so what we're really interested in is your \
intuition on what an email address could look like.\n\nImportant: We are not asking you to determine the \
rules for a *good* email address, or a *real (non-spam)* email address. We are simply asking about your \
intuition as to why certain strings look like email addresses and certain strings do not.\n\nTip: in an \
email such as username@cs.stanford.edu, \"username\" is called the local-part of the email, while \
\"cs.stanford.edu\" is the domain. Furthermore, \"cs\" is a subdomain, and \"edu\" is a top-level domain.",
    preference_topic: "your intuition of what makes email addresses look like email addresses",
    test_set_noun: "email addresses",
    learned_noun: "your email preferences",
    labeling: "Please indicate whether you think the following strings look like reasonably \
well-formatted email addresses or not: \"yes\" if they do, \"no\" if they don't.",
};

const ANSWER_GUIDANCE: &str = "Try to answer in a way that accurately and comprehensively conveys your \
preferences, such that someone reading your responses can understand and make judgments as close to your \
own as possible.";

const CHAT_GUIDANCE: &str = "Feel free to respond naturally (you can use commas, short phrases, etc), and \
press [enter] to send your response. Note that the chatbot technology is imperfect, and you are free to \
avoid answering any questions that are overly broad or uncomfortable. When interacting with the chatbot, \
please avoid asking follow-up questions or engaging in open-ended dialogue as the chatbot is unable to \
respond to you.";

const CHAT_TIME_NOTE: &str = "Note: The chatbot will stop asking questions after 5 minutes, after which \
you can send your last response and you will be taken to the final part of the study.";

const PROMPT_GUIDANCE: &str = "Try to be as detailed as possible. For example, if you were writing a \
regex that accepts only email-address-like strings, what might that regex look like? What are permissible \
/ non-permissible symbols and characters, and in what positions?";

const PROMPT_TIME_NOTE: &str = "Note: You will have up to 5 minutes to articulate your preferences. Please \
try to submit your response within that time. After you submit, you will be taken to the final part of the \
study.";
