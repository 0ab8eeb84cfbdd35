//! The retrieval system's side of the dialogue: its four actions, how each is
//! realized as a prompt, and the per-turn reward.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocIdx, TermId, TopicIdx};
use crate::dqn::QLearner;
use crate::error::{Error, Result};
use crate::retrieval::{QueryModel, RankedList};

pub const UTTERANCE_DOCUMENTS: &str = "Please view the list and select one item relevant to your need.";
pub const UTTERANCE_REQUEST: &str = "Please provide more information.";
pub const UTTERANCE_TOPIC: &str = "Which topic is related?";

pub fn key_term_utterance(term: &str) -> String {
    format!("Is it related to {term}?")
}

/// Encoded 0–3 in this order on the manager's Q-head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemAction {
    ReturnDocuments,
    ReturnKeyTerm,
    ReturnRequest,
    ReturnTopic,
}

impl SystemAction {
    pub const ALL: [SystemAction; 4] = [
        SystemAction::ReturnDocuments,
        SystemAction::ReturnKeyTerm,
        SystemAction::ReturnRequest,
        SystemAction::ReturnTopic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionCosts {
    pub return_documents: f64,
    pub return_key_term: f64,
    pub return_request: f64,
    pub return_topic: f64,
}

impl Default for ActionCosts {
    fn default() -> Self {
        Self {
            return_documents: -1.0,
            return_key_term: -1.0,
            return_request: -1.0,
            return_topic: -1.0,
        }
    }
}

impl ActionCosts {
    pub fn cost(&self, action: SystemAction) -> f64 {
        match action {
            SystemAction::ReturnDocuments => self.return_documents,
            SystemAction::ReturnKeyTerm => self.return_key_term,
            SystemAction::ReturnRequest => self.return_request,
            SystemAction::ReturnTopic => self.return_topic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DialogueParams {
    /// Weight λ of MAP improvement in the manager's reward.
    pub lambda: f64,
    pub costs: ActionCosts,
    /// Documents shown with a ReturnDocuments prompt.
    pub document_page: usize,
    /// Top-ranked documents whose term counts drive key-term choice.
    pub key_term_pool: usize,
}

impl Default for DialogueParams {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            costs: ActionCosts::default(),
            document_page: 49,
            key_term_pool: 10,
        }
    }
}

impl DialogueParams {
    pub fn validate(&self) -> Result<()> {
        for a in SystemAction::ALL {
            let c = self.costs.cost(a);
            if !(c <= 0.0) {
                return Err(Error::Config(format!("cost of {a:?} is {c}; action costs must be <= 0")));
            }
        }
        if self.document_page == 0 || self.key_term_pool == 0 {
            return Err(Error::Config("document_page and key_term_pool must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptPayload {
    Documents { docs: Vec<DocIdx> },
    KeyTerm { term: TermId },
    Request,
    Topics { topics: Vec<TopicIdx> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemPrompt {
    pub action: SystemAction,
    pub payload: PromptPayload,
    pub utterance: String,
}

/// What the system knows when it phrases its next prompt.
pub struct PromptContext<'a> {
    pub corpus: &'a Corpus,
    pub list: &'a RankedList,
    pub query: &'a QueryModel,
    pub asked_terms: &'a BTreeSet<TermId>,
    /// Annotated topic ranking of the query, empty for free-text queries.
    pub topic_ranking: &'a [TopicIdx],
}

pub fn select_action(state: &[f64], learner: &QLearner, epsilon: f64, rng: &mut impl Rng) -> SystemAction {
    SystemAction::from_index(learner.act(state, epsilon, rng)).expect("manager head has four outputs")
}

/// Turn an action into a concrete prompt. A key-term action with every key
/// term used up, or a topic action with no topics to show, is realized as
/// a request instead.
pub fn realize_action(action: SystemAction, ctx: &PromptContext<'_>, params: &DialogueParams) -> SystemPrompt {
    match action {
        SystemAction::ReturnDocuments => SystemPrompt {
            action,
            payload: PromptPayload::Documents {
                docs: ctx.list.docs().take(params.document_page).collect(),
            },
            utterance: UTTERANCE_DOCUMENTS.into(),
        },
        SystemAction::ReturnKeyTerm => match choose_key_term(ctx, params.key_term_pool) {
            Some(term) => SystemPrompt {
                action,
                payload: PromptPayload::KeyTerm { term },
                utterance: key_term_utterance(ctx.corpus.term(term)),
            },
            None => request_prompt(),
        },
        SystemAction::ReturnRequest => request_prompt(),
        SystemAction::ReturnTopic => {
            let topics = topic_shortlist(ctx);
            if topics.is_empty() {
                request_prompt()
            } else {
                SystemPrompt {
                    action,
                    payload: PromptPayload::Topics { topics },
                    utterance: UTTERANCE_TOPIC.into(),
                }
            }
        }
    }
}

fn request_prompt() -> SystemPrompt {
    SystemPrompt {
        action: SystemAction::ReturnRequest,
        payload: PromptPayload::Request,
        utterance: UTTERANCE_REQUEST.into(),
    }
}

/// Unasked key term with the highest tf·idf over the top retrieved
/// documents. Terms of the original query are never asked about.
pub fn choose_key_term(ctx: &PromptContext<'_>, pool: usize) -> Option<TermId> {
    let top = ctx.list.top(pool);
    ctx.corpus
        .key_terms()
        .iter()
        .copied()
        .filter(|t| !ctx.asked_terms.contains(t) && !ctx.query.origin().contains_key(t))
        .map(|t| {
            let tf: f64 = top.iter().map(|e| ctx.corpus.doc(e.doc).retrieval_count(t)).sum();
            (t, tf * ctx.corpus.idf(t))
        })
        .fold(None, |best: Option<(TermId, f64)>, (t, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((t, s)),
        })
        .map(|(t, _)| t)
}

/// Head of the query's topic ranking; for free-text queries, the catalog
/// ranked by expected query-term probability under each topic.
pub fn topic_shortlist(ctx: &PromptContext<'_>) -> Vec<TopicIdx> {
    if !ctx.topic_ranking.is_empty() {
        return ctx.topic_ranking.iter().take(4).copied().collect();
    }
    let mut scored: Vec<(TopicIdx, f64)> = ctx
        .corpus
        .topics()
        .iter()
        .enumerate()
        .map(|(i, topic)| {
            let s: f64 = topic.distribution.iter().map(|&(t, p)| p * ctx.query.weight(t)).sum();
            (TopicIdx(i as u32), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(4).map(|(t, _)| t).collect()
}

/// `c_a + λ·(MAP_after − MAP_before)`.
pub fn turn_reward(action: SystemAction, map_before: f64, map_after: f64, costs: &ActionCosts, lambda: f64) -> f64 {
    costs.cost(action) + lambda * (map_after - map_before)
}

/// Running episode return, kept as action-cost total plus the MAP endpoints
/// so that the λ-weighted improvements telescope without rounding drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnAccumulator {
    pub lambda: f64,
    pub cost_sum: f64,
    pub map_initial: f64,
    pub map_latest: f64,
}

impl ReturnAccumulator {
    pub fn new(lambda: f64, map_initial: f64) -> Self {
        Self {
            lambda,
            cost_sum: 0.0,
            map_initial,
            map_latest: map_initial,
        }
    }

    pub fn record(&mut self, cost: f64, map_after: f64) {
        self.cost_sum += cost;
        self.map_latest = map_after;
    }

    pub fn total(&self) -> f64 {
        self.cost_sum + self.lambda * (self.map_latest - self.map_initial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::{doc, toy};
    use crate::retrieval::retrieve;

    #[test]
    fn action_encoding_is_stable() {
        for (i, a) in SystemAction::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(SystemAction::from_index(i), Some(*a));
        }
        assert_eq!(SystemAction::from_index(2), Some(SystemAction::ReturnRequest));
        assert_eq!(SystemAction::from_index(4), None);
    }

    #[test]
    fn reward_arithmetic() {
        let costs = ActionCosts::default();
        assert_eq!(turn_reward(SystemAction::ReturnTopic, 0.3, 0.3, &costs, 100.0), -1.0);
        assert!((turn_reward(SystemAction::ReturnKeyTerm, 0.2, 0.3, &costs, 100.0) - 9.0).abs() < 1e-9);
    }

    #[test]
    fn request_prompt_text() {
        let c = toy(vec![doc("a", &[("x", 1)])]);
        let q = QueryModel::new([(c.term_id("x").unwrap(), 1.0)].into_iter().collect()).unwrap();
        let list = retrieve(&q, &c, 10, 0.5);
        let asked = BTreeSet::new();
        let ctx = PromptContext {
            corpus: &c,
            list: &list,
            query: &q,
            asked_terms: &asked,
            topic_ranking: &[],
        };
        let p = realize_action(SystemAction::ReturnRequest, &ctx, &DialogueParams::default());
        assert_eq!(p.utterance, "Please provide more information.");
        assert_eq!(p.payload, PromptPayload::Request);
        // No key terms besides the query term and no topics: both fall back.
        let k = realize_action(SystemAction::ReturnKeyTerm, &ctx, &DialogueParams::default());
        assert_eq!(k.action, SystemAction::ReturnRequest);
        let t = realize_action(SystemAction::ReturnTopic, &ctx, &DialogueParams::default());
        assert_eq!(t.action, SystemAction::ReturnRequest);
    }

    #[test]
    fn key_terms_are_not_repeated() {
        let c = toy(vec![
            doc("a", &[("x", 3), ("y", 2), ("z", 1)]),
            doc("b", &[("y", 1), ("w", 4)]),
            doc("c", &[("z", 2), ("v", 1)]),
        ]);
        let q = QueryModel::new([(c.term_id("x").unwrap(), 1.0)].into_iter().collect()).unwrap();
        let list = retrieve(&q, &c, 10, 0.5);
        let mut asked = BTreeSet::new();
        let mut seen = Vec::new();
        for _ in 0..2 {
            let ctx = PromptContext {
                corpus: &c,
                list: &list,
                query: &q,
                asked_terms: &asked,
                topic_ranking: &[],
            };
            let p = realize_action(SystemAction::ReturnKeyTerm, &ctx, &DialogueParams::default());
            let PromptPayload::KeyTerm { term } = p.payload else {
                panic!("expected key term")
            };
            assert_eq!(p.utterance, format!("Is it related to {}?", c.term(term)));
            assert_ne!(term, c.term_id("x").unwrap());
            asked.insert(term);
            seen.push(term);
        }
        assert_ne!(seen[0], seen[1]);
    }

    #[test]
    fn accumulator_telescopes() {
        let costs = ActionCosts::default();
        let maps = [0.1, 0.25, 0.2, 0.65];
        let actions = [SystemAction::ReturnDocuments, SystemAction::ReturnRequest, SystemAction::ReturnTopic];
        let mut acc = ReturnAccumulator::new(100.0, maps[0]);
        let mut per_turn = 0.0;
        for (k, a) in actions.iter().enumerate() {
            acc.record(costs.cost(*a), maps[k + 1]);
            per_turn += turn_reward(*a, maps[k], maps[k + 1], &costs, 100.0);
        }
        assert_eq!(acc.total(), -3.0 + 100.0 * (0.65 - 0.1));
        assert!((acc.total() - per_turn).abs() < 1e-9);
    }
}
