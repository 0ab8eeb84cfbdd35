//! JSON bodies of the v1 API.

use std::collections::BTreeMap;

use iscr_core::corpus::{Corpus, DocIdx, TopicIdx};
use iscr_core::dialogue::{PromptPayload, SystemAction, SystemPrompt};
use iscr_core::episode::{EpisodeTrace, TurnRecord};
use iscr_core::eval::ActionDistribution;
use serde::{Deserialize, Serialize};

pub const API_VERSION: &str = "v1";

/// Number of summary terms shown per document.
const SUMMARY_TERMS: usize = 8;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Success,
    Failure,
    Abandoned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocView {
    pub rank: usize,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub summary: String,
}

impl DocView {
    pub fn new(corpus: &Corpus, doc: DocIdx, rank: usize, score: Option<f64>) -> Self {
        let d = corpus.doc(doc);
        let mut counts: Vec<_> = d.retrieval_counts().to_vec();
        counts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let summary: Vec<&str> = counts.iter().take(SUMMARY_TERMS).map(|(t, _)| corpus.term(*t)).collect();
        Self {
            rank,
            doc_id: d.id.clone(),
            score,
            summary: summary.join(" "),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicView {
    pub topic_id: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadView {
    Documents { documents: Vec<DocView> },
    KeyTerm { term: String },
    Request,
    Topics { topics: Vec<TopicView> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub action: SystemAction,
    /// Response kind the prompt accepts besides `terminate`.
    pub expects: String,
    pub utterance: String,
    pub payload: PayloadView,
}

impl PromptView {
    pub fn new(prompt: &SystemPrompt, corpus: &Corpus) -> Self {
        let payload = match &prompt.payload {
            PromptPayload::Documents { docs } => PayloadView::Documents {
                documents: docs.iter().enumerate().map(|(i, &d)| DocView::new(corpus, d, i + 1, None)).collect(),
            },
            PromptPayload::KeyTerm { term } => PayloadView::KeyTerm {
                term: corpus.term(*term).to_owned(),
            },
            PromptPayload::Request => PayloadView::Request,
            PromptPayload::Topics { topics } => PayloadView::Topics {
                topics: topics.iter().map(|&t| topic_view(corpus, t)).collect(),
            },
        };
        Self {
            action: prompt.action,
            expects: iscr_core::simulator::UserResponse::expected_kind(prompt.action).to_owned(),
            utterance: prompt.utterance.clone(),
            payload,
        }
    }
}

pub fn topic_view(corpus: &Corpus, t: TopicIdx) -> TopicView {
    let topic = corpus.topic(t);
    TopicView {
        topic_id: topic.id.clone(),
        label: topic.label.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub outcome: Status,
    pub turns: usize,
    /// MAP before the first turn and after every turn.
    pub map_trajectory: Vec<f64>,
    #[serde(rename = "return")]
    pub ret: f64,
    /// False for free-text queries, whose MAP is reported as 0.
    pub judged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub api_version: String,
    pub session_id: String,
    pub status: Status,
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub query_terms: Vec<String>,
    pub ranking: Vec<DocView>,
    pub prompt: Option<PromptView>,
    pub summary: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub query_id: String,
    pub query_terms: Vec<String>,
    pub candidates: Vec<DocView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextTask {
    pub subject: String,
    pub task: Option<TaskView>,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceBody {
    pub subject: String,
    pub task_id: String,
    pub choice: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceAck {
    pub subject: String,
    pub task_id: String,
    pub answered: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionView {
    pub samples: u64,
    pub distribution: Option<ActionDistribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerInfo {
    pub variant: String,
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub train_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsView {
    pub api_version: String,
    pub manager: ManagerInfo,
    pub feature_mode: serde_json::Value,
    pub max_turns: usize,
    pub map_threshold: f64,
    pub documents: usize,
    pub queries: Vec<String>,
    pub humaneval_tasks: usize,
    pub utterances: BTreeMap<String, String>,
}

/// One line of the append-only session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Create {
        session: String,
        time_ms: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query_id: Option<String>,
        query_terms: BTreeMap<String, f64>,
        map_initial: f64,
    },
    Prompt {
        session: String,
        time_ms: u64,
        prompt: SystemPrompt,
    },
    Turn {
        session: String,
        time_ms: u64,
        turn: Box<TurnRecord>,
    },
    End {
        session: String,
        time_ms: u64,
        status: Status,
        trace: Box<EpisodeTrace>,
    },
}

/// One line of the human-choice log read by the behavior comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub subject: String,
    pub task_id: String,
    pub query_id: String,
    pub choice: usize,
    pub doc_id: String,
    pub time_ms: u64,
}
