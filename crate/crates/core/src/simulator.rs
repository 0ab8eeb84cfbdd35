//! The simulated user: four decision makers (one per system action) reading
//! the binary relevance of the top-K results, the deterministic rule-based
//! baseline, and the termination rule with its terminal rewards.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocIdx, QueryRecord, TermId, TopicIdx};
use crate::dialogue::{PromptPayload, SystemAction, SystemPrompt};
use crate::dqn::{DqnParams, QLearner};
use crate::error::{Error, Result};
use crate::features::SimulatorState;
use crate::retrieval::FeedbackEvidence;

/// Answer reliabilities a key-term decision maker can choose from.
pub const KEY_TERM_RELIABILITY: [f64; 4] = [1.0, 0.95, 0.90, 0.85];

/// Outputs of every decision maker.
pub const DECISIONS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserResponse {
    PickDocument { doc: String },
    YesNo { yes: bool },
    ProvideTerm { term: String },
    PickTopic { topic: String },
    Terminate { success: bool },
}

impl UserResponse {
    /// Name of the response kind a prompt for `action` expects.
    pub fn expected_kind(action: SystemAction) -> &'static str {
        match action {
            SystemAction::ReturnDocuments => "pick_document",
            SystemAction::ReturnKeyTerm => "yes_no",
            SystemAction::ReturnRequest => "provide_term",
            SystemAction::ReturnTopic => "pick_topic",
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            UserResponse::PickDocument { .. } => "pick_document",
            UserResponse::YesNo { .. } => "yes_no",
            UserResponse::ProvideTerm { .. } => "provide_term",
            UserResponse::PickTopic { .. } => "pick_topic",
            UserResponse::Terminate { .. } => "terminate",
        }
    }

    pub fn answers(&self, action: SystemAction) -> bool {
        self.kind() == Self::expected_kind(action)
    }

    /// What the retrieval engine can learn from this response. `None` when
    /// the response names nothing the corpus knows.
    pub fn evidence(&self, prompt: &SystemPrompt, corpus: &Corpus) -> Option<FeedbackEvidence> {
        match self {
            UserResponse::PickDocument { doc } => corpus.doc_idx(doc).map(|doc| FeedbackEvidence::RelevantDoc { doc }),
            UserResponse::YesNo { yes } => match prompt.payload {
                PromptPayload::KeyTerm { term } => Some(FeedbackEvidence::KeyTermAnswer { term, yes: *yes }),
                _ => None,
            },
            UserResponse::ProvideTerm { term } => {
                let token = term.split_whitespace().next()?.to_lowercase();
                corpus.term_id(&token).map(|term| FeedbackEvidence::RequestTerm { term })
            }
            UserResponse::PickTopic { topic } => corpus.topic_idx(topic).map(|topic| FeedbackEvidence::TopicChoice { topic }),
            UserResponse::Terminate { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminationPolicy {
    pub map_threshold: f64,
    pub max_turns: usize,
    pub success_reward: f64,
    pub failure_reward: f64,
}

impl Default for TerminationPolicy {
    fn default() -> Self {
        Self {
            map_threshold: 0.6,
            max_turns: 4,
            success_reward: 30.0,
            failure_reward: -30.0,
        }
    }
}

impl TerminationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.map_threshold > 0.0 && self.map_threshold <= 1.0) {
            return Err(Error::Config("map_threshold must lie in (0,1]".into()));
        }
        if self.max_turns == 0 {
            return Err(Error::Config("max_turns must be at least 1".into()));
        }
        if !(self.success_reward > 0.0) || !(self.failure_reward < 0.0) {
            return Err(Error::Config("success_reward must be positive and failure_reward negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Continue,
    Success,
    Failure,
}

/// `turn` is the index of the turn that would come next, so after the
/// k-th completed turn the caller passes k + 1. Success wins when both
/// conditions hold.
pub fn check_termination(current_map: f64, turn: usize, policy: &TerminationPolicy) -> Outcome {
    if current_map >= policy.map_threshold {
        Outcome::Success
    } else if turn > policy.max_turns {
        Outcome::Failure
    } else {
        Outcome::Continue
    }
}

/// Terminal-only credit: the simulator pays nothing per action.
pub fn simulator_reward(outcome: Outcome, policy: &TerminationPolicy) -> f64 {
    match outcome {
        Outcome::Continue => 0.0,
        Outcome::Success => policy.success_reward,
        Outcome::Failure => policy.failure_reward,
    }
}

/// `S(t) = Σ_{d∈R} N(t,d)·ln(1 + idf(t))` over manual transcriptions.
pub fn term_score(term: TermId, relevant: &BTreeSet<DocIdx>, corpus: &Corpus) -> f64 {
    let count: u64 = relevant.iter().map(|&d| u64::from(corpus.doc(d).manual_count(term))).sum();
    count as f64 * (1.0 + corpus.idf(term)).ln()
}

/// Every term with a positive S(t), best first, ties by term id.
pub fn term_ranking(relevant: &BTreeSet<DocIdx>, corpus: &Corpus) -> Vec<(TermId, f64)> {
    let mut counts: std::collections::BTreeMap<TermId, u64> = std::collections::BTreeMap::new();
    for &d in relevant {
        for &(t, c) in corpus.doc(d).manual_counts() {
            *counts.entry(t).or_insert(0) += u64::from(c);
        }
    }
    let mut ranked: Vec<(TermId, f64)> = counts
        .into_iter()
        .map(|(t, c)| (t, c as f64 * (1.0 + corpus.idf(t)).ln()))
        .filter(|&(_, s)| s > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// What the simulated user privately knows about its information need.
#[derive(Clone, Debug)]
pub struct UserGoal {
    pub relevant: BTreeSet<DocIdx>,
    pub term_ranking: Vec<(TermId, f64)>,
    pub topic_ranking: Vec<TopicIdx>,
}

impl UserGoal {
    pub fn new(query: &QueryRecord, corpus: &Corpus) -> Self {
        Self {
            term_ranking: term_ranking(&query.relevant, corpus),
            relevant: query.relevant.clone(),
            topic_ranking: query.topic_ranking.clone(),
        }
    }

    /// Key term occurs in more than half of the relevant manual transcriptions.
    pub fn key_term_truth(&self, term: TermId, corpus: &Corpus) -> bool {
        let hits = self.relevant.iter().filter(|&&d| corpus.doc(d).manual_count(term) > 0).count();
        2 * hits > self.relevant.len()
    }
}

pub struct ResponseContext<'a> {
    pub corpus: &'a Corpus,
    pub goal: &'a UserGoal,
    /// Terms this user already supplied in the episode.
    pub given_terms: &'a BTreeSet<TermId>,
}

/// Carry out decision `choice` (0-based rank, or reliability index for key
/// terms). `truthful(p)` decides whether a key-term answer tells the truth
/// when the chosen reliability is `p`.
pub fn respond_with_choice(
    prompt: &SystemPrompt,
    choice: usize,
    ctx: &ResponseContext<'_>,
    truthful: impl FnOnce(f64) -> bool,
) -> UserResponse {
    match &prompt.payload {
        PromptPayload::Documents { docs } => {
            let relevant: Vec<DocIdx> = docs.iter().copied().filter(|d| ctx.goal.relevant.contains(d)).take(DECISIONS).collect();
            match relevant.get(choice).or(relevant.first()) {
                Some(&d) => UserResponse::PickDocument {
                    doc: ctx.corpus.doc(d).id.clone(),
                },
                None => provide_term(choice, ctx),
            }
        }
        PromptPayload::KeyTerm { term } => {
            let truth = ctx.goal.key_term_truth(*term, ctx.corpus);
            let p = KEY_TERM_RELIABILITY[choice.min(DECISIONS - 1)];
            UserResponse::YesNo {
                yes: if truthful(p) { truth } else { !truth },
            }
        }
        PromptPayload::Request => provide_term(choice, ctx),
        PromptPayload::Topics { topics } => {
            let rank_of = |t: &TopicIdx| ctx.goal.topic_ranking.iter().position(|x| x == t).unwrap_or(usize::MAX);
            let mut ordered = topics.clone();
            ordered.sort_by_key(|t| (rank_of(t), *t));
            ordered.truncate(DECISIONS);
            match ordered.get(choice).or(ordered.first()) {
                Some(&t) => UserResponse::PickTopic {
                    topic: ctx.corpus.topic(t).id.clone(),
                },
                None => provide_term(choice, ctx),
            }
        }
    }
}

fn provide_term(choice: usize, ctx: &ResponseContext<'_>) -> UserResponse {
    let fresh: Vec<TermId> = ctx
        .goal
        .term_ranking
        .iter()
        .map(|&(t, _)| t)
        .filter(|t| !ctx.given_terms.contains(t))
        .take(DECISIONS)
        .collect();
    let term = fresh
        .get(choice)
        .or(fresh.first())
        .copied()
        .or_else(|| ctx.goal.term_ranking.first().map(|&(t, _)| t));
    UserResponse::ProvideTerm {
        term: term.map(|t| ctx.corpus.term(t).to_owned()).unwrap_or_default(),
    }
}

/// The deterministic baseline: always the first-ranked choice, and always
/// a truthful key-term answer.
pub fn rule_based_respond(prompt: &SystemPrompt, ctx: &ResponseContext<'_>) -> UserResponse {
    respond_with_choice(prompt, 0, ctx, |_| true)
}

/// One Q-learner per system action, each with a four-way head over the
/// K-bit relevance state.
#[derive(Clone, Debug)]
pub struct DecisionMakerBank {
    learners: Vec<QLearner>,
}

impl DecisionMakerBank {
    pub fn new(params: &DqnParams, state_width: usize, rng: &mut impl Rng) -> Self {
        Self {
            learners: SystemAction::ALL.iter().map(|_| QLearner::new(params, state_width, DECISIONS, rng)).collect(),
        }
    }

    pub fn from_learners(learners: Vec<QLearner>) -> Result<Self> {
        if learners.len() != 4 || learners.iter().any(|l| l.n_actions() != DECISIONS) {
            return Err(Error::Contract("a decision-maker bank needs four learners with four outputs".into()));
        }
        Ok(Self { learners })
    }

    pub fn learner(&self, action: SystemAction) -> &QLearner {
        &self.learners[action.index()]
    }

    pub fn learner_mut(&mut self, action: SystemAction) -> &mut QLearner {
        &mut self.learners[action.index()]
    }

    pub fn learners(&self) -> &[QLearner] {
        &self.learners
    }

    pub fn decide(&self, action: SystemAction, state: &SimulatorState, epsilon: f64, rng: &mut impl Rng) -> usize {
        self.learner(action).act(&state.to_vector(), epsilon, rng)
    }
}

/// Learned response: the decision maker for the prompt's action picks an
/// index, which is returned with the response.
pub fn respond(
    prompt: &SystemPrompt,
    state: &SimulatorState,
    bank: &DecisionMakerBank,
    ctx: &ResponseContext<'_>,
    epsilon: f64,
    rng: &mut impl Rng,
) -> (UserResponse, usize) {
    let choice = bank.decide(prompt.action, state, epsilon, rng);
    let response = respond_with_choice(prompt, choice, ctx, |p| p >= 1.0 || rng.gen::<f64>() < p);
    (response, choice)
}

#[derive(Clone, Debug)]
pub enum UserSimulator {
    RuleBased,
    Learned(DecisionMakerBank),
}

impl UserSimulator {
    /// Response plus the decision index behind it (always 0 for the rule-based user).
    pub fn respond(
        &self,
        prompt: &SystemPrompt,
        state: &SimulatorState,
        ctx: &ResponseContext<'_>,
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> (UserResponse, usize) {
        match self {
            UserSimulator::RuleBased => (rule_based_respond(prompt, ctx), 0),
            UserSimulator::Learned(bank) => respond(prompt, state, bank, ctx, epsilon, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::tests::{doc, toy};
    use crate::dialogue::UTTERANCE_DOCUMENTS;

    fn prompt(payload: PromptPayload, action: SystemAction) -> SystemPrompt {
        SystemPrompt {
            action,
            payload,
            utterance: String::new(),
        }
    }

    #[test]
    fn termination_table() {
        let p = TerminationPolicy::default();
        assert_eq!(check_termination(0.61, 1, &p), Outcome::Success);
        assert_eq!(check_termination(0.2, 5, &p), Outcome::Failure);
        assert_eq!(check_termination(0.7, 5, &p), Outcome::Success);
        assert_eq!(check_termination(0.59, 4, &p), Outcome::Continue);
        assert_eq!(check_termination(0.6, 2, &p), Outcome::Success);
    }

    #[test]
    fn terminal_rewards_only() {
        let p = TerminationPolicy::default();
        assert_eq!(simulator_reward(Outcome::Continue, &p), 0.0);
        assert_eq!(simulator_reward(Outcome::Success, &p), 30.0);
        assert_eq!(simulator_reward(Outcome::Failure, &p), -30.0);
    }

    #[test]
    fn term_score_direct_evaluation() {
        // 100 docs, "rare" only in one of them three times: idf = ln 100.
        let mut docs: Vec<_> = (0..100).map(|i| doc(&format!("d{i:03}"), &[("filler", 1)])).collect();
        docs[0] = doc("d000", &[("filler", 1), ("rare", 3)]);
        let c = toy(docs);
        let rel: BTreeSet<_> = [DocIdx(0)].into_iter().collect();
        let s = term_score(c.term_id("rare").unwrap(), &rel, &c);
        assert!((s - 3.0 * (1.0 + 100f64.ln()).ln()).abs() < 1e-12);
        assert!((s - 5.171).abs() < 1e-3);
        let absent: BTreeSet<_> = [DocIdx(1)].into_iter().collect();
        assert_eq!(term_score(c.term_id("rare").unwrap(), &absent, &c), 0.0);
    }

    fn goal_corpus() -> (Corpus, QueryRecord) {
        let c = toy(vec![
            doc("a", &[("x", 2), ("k", 1)]),
            doc("b", &[("y", 1), ("k", 1)]),
            doc("c", &[("z", 1)]),
            doc("d", &[("x", 1), ("w", 1)]),
        ]);
        let q = QueryRecord {
            id: "q".into(),
            terms: [("x".to_owned(), 1.0)].into_iter().collect(),
            relevant: [DocIdx(0), DocIdx(1), DocIdx(3)].into_iter().collect(),
            topic_ranking: vec![],
        };
        (c, q)
    }

    #[test]
    fn key_term_majority_is_strict() {
        let c = toy(vec![doc("a", &[("k", 1)]), doc("b", &[("x", 1)])]);
        let q = QueryRecord {
            id: "q".into(),
            terms: Default::default(),
            relevant: [DocIdx(0), DocIdx(1)].into_iter().collect(),
            topic_ranking: vec![],
        };
        let goal = UserGoal::new(&q, &c);
        let given = BTreeSet::new();
        let ctx = ResponseContext {
            corpus: &c,
            goal: &goal,
            given_terms: &given,
        };
        let p = prompt(
            PromptPayload::KeyTerm {
                term: c.term_id("k").unwrap(),
            },
            SystemAction::ReturnKeyTerm,
        );
        assert_eq!(rule_based_respond(&p, &ctx), UserResponse::YesNo { yes: false });
    }

    #[test]
    fn certain_user_always_says_yes_to_universal_term() {
        let (c, mut q) = goal_corpus();
        q.relevant = [DocIdx(0), DocIdx(1)].into_iter().collect();
        let goal = UserGoal::new(&q, &c);
        let given = BTreeSet::new();
        let ctx = ResponseContext {
            corpus: &c,
            goal: &goal,
            given_terms: &given,
        };
        let p = prompt(
            PromptPayload::KeyTerm {
                term: c.term_id("k").unwrap(),
            },
            SystemAction::ReturnKeyTerm,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let r = respond_with_choice(&p, 0, &ctx, |p| p >= 1.0 || rng.gen::<f64>() < p);
            assert_eq!(r, UserResponse::YesNo { yes: true });
        }
    }

    #[test]
    fn document_choice_is_relevant_rank() {
        let (c, q) = goal_corpus();
        let goal = UserGoal::new(&q, &c);
        let given = BTreeSet::new();
        let ctx = ResponseContext {
            corpus: &c,
            goal: &goal,
            given_terms: &given,
        };
        // Displayed order c, d, a, b: relevant ranks are d, a, b.
        let p = SystemPrompt {
            action: SystemAction::ReturnDocuments,
            payload: PromptPayload::Documents {
                docs: vec![DocIdx(2), DocIdx(3), DocIdx(0), DocIdx(1)],
            },
            utterance: UTTERANCE_DOCUMENTS.into(),
        };
        let pick = |choice| respond_with_choice(&p, choice, &ctx, |_| true);
        assert_eq!(pick(0), UserResponse::PickDocument { doc: "d".into() });
        assert_eq!(pick(1), UserResponse::PickDocument { doc: "a".into() });
        assert_eq!(pick(2), UserResponse::PickDocument { doc: "b".into() });
        // Only three relevant documents: the fourth rank falls back to the first.
        assert_eq!(pick(3), UserResponse::PickDocument { doc: "d".into() });
    }

    #[test]
    fn no_relevant_documents_falls_back_to_term() {
        let (c, q) = goal_corpus();
        let goal = UserGoal::new(&q, &c);
        let given = BTreeSet::new();
        let ctx = ResponseContext {
            corpus: &c,
            goal: &goal,
            given_terms: &given,
        };
        let p = prompt(PromptPayload::Documents { docs: vec![DocIdx(2)] }, SystemAction::ReturnDocuments);
        assert!(matches!(rule_based_respond(&p, &ctx), UserResponse::ProvideTerm { .. }));
    }

    #[test]
    fn request_skips_given_terms() {
        let (c, q) = goal_corpus();
        let goal = UserGoal::new(&q, &c);
        let top = goal.term_ranking[0].0;
        let mut given = BTreeSet::new();
        let ctx = ResponseContext {
            corpus: &c,
            goal: &goal,
            given_terms: &given,
        };
        let p = prompt(PromptPayload::Request, SystemAction::ReturnRequest);
        assert_eq!(
            rule_based_respond(&p, &ctx),
            UserResponse::ProvideTerm {
                term: c.term(top).to_owned()
            }
        );
        given.insert(top);
        let ctx = ResponseContext {
            corpus: &c,
            goal: &goal,
            given_terms: &given,
        };
        assert_eq!(
            rule_based_respond(&p, &ctx),
            UserResponse::ProvideTerm {
                term: c.term(goal.term_ranking[1].0).to_owned()
            }
        );
    }

    #[test]
    fn response_kinds_match_actions() {
        assert!(UserResponse::YesNo { yes: true }.answers(SystemAction::ReturnKeyTerm));
        assert!(!UserResponse::YesNo { yes: true }.answers(SystemAction::ReturnRequest));
        let json = serde_json::to_string(&UserResponse::PickTopic { topic: "t1".into() }).unwrap();
        assert_eq!(json, r#"{"kind":"pick_topic","topic":"t1"}"#);
    }
}
