//! One retrieval dialogue from first-pass retrieval to termination, as a
//! step-wise state machine shared by simulated episodes and live sessions.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocIdx, QueryRecord, TermId, TopicIdx};
use crate::dialogue::{realize_action, UTTERANCE_DOCUMENTS, select_action, turn_reward, DialogueParams, PromptContext, PromptPayload, ReturnAccumulator, SystemAction, SystemPrompt};
use crate::dqn::{Experience, QLearner};
use crate::error::{Error, Result};
use crate::eval::{list_average_precision, DocumentScenario};
use crate::features::{manager_state, simulator_state, FeatureParams, SimulatorState};
use crate::retrieval::{apply_feedback, retrieve, FeedbackEvidence, QueryModel, RankedList, RetrievalParams};
use crate::simulator::{check_termination, simulator_reward, Outcome, ResponseContext, TerminationPolicy, UserGoal, UserResponse, UserSimulator, DECISIONS};

/// Everything the environment side of a dialogue is parameterized by.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineParams {
    pub retrieval: RetrievalParams,
    pub features: FeatureParams,
    pub dialogue: DialogueParams,
    pub termination: TerminationPolicy,
}

impl EngineParams {
    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        self.dialogue.validate()?;
        self.termination.validate()?;
        if self.features.raw_width == 0 || self.features.simulator_width == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        Ok(())
    }

    pub fn manager_dim(&self) -> usize {
        self.features.manager_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub manager_state: Vec<f64>,
    /// Action the manager chose; the prompt may realize a fallback.
    pub action: SystemAction,
    pub prompt: SystemPrompt,
    pub simulator_state: SimulatorState,
    /// Decision-maker output index behind the response, if one was used.
    pub decision: Option<usize>,
    pub response: UserResponse,
    pub evidence: Option<FeedbackEvidence>,
    pub map_before: f64,
    pub map_after: f64,
    pub manager_reward: f64,
    pub simulator_reward: f64,
    pub next_manager_state: Vec<f64>,
    pub next_simulator_state: SimulatorState,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub query: String,
    pub lambda: f64,
    pub map_initial: f64,
    pub turns: Vec<TurnRecord>,
    pub outcome: Outcome,
    pub manager_return: f64,
    pub simulator_return: f64,
}

impl EpisodeTrace {
    pub fn map_final(&self) -> f64 {
        self.turns.last().map_or(self.map_initial, |t| t.map_after)
    }

    /// `Σ c_k + λ·(MAP_final − MAP_initial)` from the stored turns.
    pub fn recomputed_return(&self, dialogue: &DialogueParams) -> f64 {
        let costs: f64 = self.turns.iter().map(|t| dialogue.costs.cost(t.action)).sum();
        costs + self.lambda * (self.map_final() - self.map_initial)
    }

    pub fn map_sequence(&self) -> Vec<f64> {
        std::iter::once(self.map_initial).chain(self.turns.iter().map(|t| t.map_after)).collect()
    }

    pub fn manager_experiences(&self) -> Vec<Experience> {
        self.turns
            .iter()
            .map(|t| Experience {
                state: t.manager_state.clone(),
                action: t.action.index(),
                reward: t.manager_reward,
                next_state: t.next_manager_state.clone(),
                done: t.outcome != Outcome::Continue,
            })
            .collect()
    }

    /// Transitions for the decision maker that answered each prompt.
    pub fn simulator_experiences(&self) -> Vec<(SystemAction, Experience)> {
        self.turns
            .iter()
            .filter_map(|t| {
                t.decision.map(|d| {
                    (
                        t.prompt.action,
                        Experience {
                            state: t.simulator_state.to_vector(),
                            action: d,
                            reward: t.simulator_reward,
                            next_state: t.next_simulator_state.to_vector(),
                            done: t.outcome != Outcome::Continue,
                        },
                    )
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Pending {
    manager_state: Vec<f64>,
    action: SystemAction,
    prompt: SystemPrompt,
    simulator_state: SimulatorState,
}

/// What a completed turn led to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TurnOutcome {
    pub outcome: Outcome,
    pub map: f64,
    pub manager_reward: f64,
}

#[derive(Clone, Debug)]
pub struct Dialogue {
    query_id: String,
    query: QueryModel,
    /// `None` for free-text queries without judgments.
    goal: Option<UserGoal>,
    topic_ranking: Vec<TopicIdx>,
    list: RankedList,
    map: f64,
    map_initial: f64,
    asked_terms: BTreeSet<TermId>,
    given_terms: BTreeSet<TermId>,
    pending: Option<Pending>,
    turns: Vec<TurnRecord>,
    returns: ReturnAccumulator,
    simulator_return: f64,
    outcome: Outcome,
}

impl Dialogue {
    /// Benchmark query with relevance judgments.
    pub fn for_query(query: &QueryRecord, corpus: &Corpus, params: &EngineParams) -> Result<Self> {
        let model = QueryModel::from_terms(corpus, &query.terms)?;
        Ok(Self::start(
            query.id.clone(),
            model,
            Some(UserGoal::new(query, corpus)),
            query.topic_ranking.clone(),
            corpus,
            params,
        ))
    }

    pub fn start(
        query_id: String,
        query: QueryModel,
        goal: Option<UserGoal>,
        topic_ranking: Vec<TopicIdx>,
        corpus: &Corpus,
        params: &EngineParams,
    ) -> Self {
        let list = retrieve(&query, corpus, params.retrieval.depth, params.retrieval.jm_lambda);
        let map = judged_ap(&list, goal.as_ref());
        Self {
            query_id,
            query,
            goal,
            topic_ranking,
            list,
            map,
            map_initial: map,
            asked_terms: BTreeSet::new(),
            given_terms: BTreeSet::new(),
            pending: None,
            turns: Vec::new(),
            returns: ReturnAccumulator::new(params.dialogue.lambda, map),
            simulator_return: 0.0,
            outcome: Outcome::Continue,
        }
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn query(&self) -> &QueryModel {
        &self.query
    }

    pub fn goal(&self) -> Option<&UserGoal> {
        self.goal.as_ref()
    }

    pub fn list(&self) -> &RankedList {
        &self.list
    }

    pub fn map(&self) -> f64 {
        self.map
    }

    pub fn map_initial(&self) -> f64 {
        self.map_initial
    }

    pub fn turns(&self) -> &[TurnRecord] {
        &self.turns
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn is_finished(&self) -> bool {
        self.outcome != Outcome::Continue
    }

    pub fn pending_prompt(&self) -> Option<&SystemPrompt> {
        self.pending.as_ref().map(|p| &p.prompt)
    }

    pub fn manager_return(&self) -> f64 {
        self.returns.total()
    }

    pub fn manager_state(&self, corpus: &Corpus, params: &EngineParams) -> Vec<f64> {
        manager_state(
            &self.query,
            &self.list,
            corpus,
            &params.features,
            params.retrieval.jm_lambda,
            self.turns.len(),
        )
        .to_vector(params.termination.max_turns)
    }

    pub fn simulator_state(&self, params: &EngineParams) -> SimulatorState {
        let empty = BTreeSet::new();
        let relevant = self.goal.as_ref().map_or(&empty, |g| &g.relevant);
        simulator_state(&self.list, relevant, params.features.simulator_width)
    }

    /// Let the manager pick and phrase the next prompt.
    pub fn propose(
        &mut self,
        learner: &QLearner,
        epsilon: f64,
        corpus: &Corpus,
        params: &EngineParams,
        rng: &mut impl Rng,
    ) -> Result<&SystemPrompt> {
        let state = self.manager_state(corpus, params);
        if state.len() != learner.input_dim() || learner.n_actions() != SystemAction::ALL.len() {
            return Err(Error::Contract(format!(
                "manager network expects {} inputs and {} actions, dialogue state has {} features",
                learner.input_dim(),
                learner.n_actions(),
                state.len()
            )));
        }
        let action = select_action(&state, learner, epsilon, rng);
        self.propose_action(action, state, corpus, params)
    }

    /// Phrase a prompt for an externally chosen action.
    pub fn propose_action(
        &mut self,
        action: SystemAction,
        manager_state: Vec<f64>,
        corpus: &Corpus,
        params: &EngineParams,
    ) -> Result<&SystemPrompt> {
        if self.is_finished() {
            return Err(Error::Contract("the dialogue has already ended".into()));
        }
        if self.pending.is_some() {
            return Err(Error::Contract("a prompt is already awaiting a response".into()));
        }
        let ctx = PromptContext {
            corpus,
            list: &self.list,
            query: &self.query,
            asked_terms: &self.asked_terms,
            topic_ranking: &self.topic_ranking,
        };
        let prompt = realize_action(action, &ctx, &params.dialogue);
        if let PromptPayload::KeyTerm { term } = prompt.payload {
            self.asked_terms.insert(term);
        }
        let simulator_state = self.simulator_state(params);
        Ok(&self
            .pending
            .insert(Pending {
                manager_state,
                action,
                prompt,
                simulator_state,
            })
            .prompt)
    }

    /// Context a simulated user needs to answer the pending prompt.
    pub fn response_context<'a>(&'a self, corpus: &'a Corpus) -> Option<ResponseContext<'a>> {
        Some(ResponseContext {
            corpus,
            goal: self.goal.as_ref()?,
            given_terms: &self.given_terms,
        })
    }

    /// Consume a response to the pending prompt: feedback, re-retrieval,
    /// rewards and the termination check.
    pub fn respond(
        &mut self,
        response: UserResponse,
        decision: Option<usize>,
        corpus: &Corpus,
        params: &EngineParams,
    ) -> Result<TurnOutcome> {
        let pending = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Contract("no prompt is awaiting a response".into()))?;
        let quitting = matches!(response, UserResponse::Terminate { .. });
        if !quitting && !response.answers(pending.prompt.action) {
            return Err(Error::Validation(format!(
                "expected a {} response to the {:?} prompt, got {}",
                UserResponse::expected_kind(pending.prompt.action),
                pending.prompt.action,
                response.kind()
            )));
        }
        let pending = self.pending.take().expect("checked above");

        let evidence = response.evidence(&pending.prompt, corpus);
        if let Some(FeedbackEvidence::RequestTerm { term }) = evidence {
            self.given_terms.insert(term);
        }
        if let Some(ev) = &evidence {
            self.query = apply_feedback(&self.query, ev, corpus, &params.retrieval);
            self.list = retrieve(&self.query, corpus, params.retrieval.depth, params.retrieval.jm_lambda);
        }
        let map_before = self.map;
        self.map = judged_ap(&self.list, self.goal.as_ref());

        let cost = params.dialogue.costs.cost(pending.action);
        let manager_reward = turn_reward(pending.action, map_before, self.map, &params.dialogue.costs, params.dialogue.lambda);
        self.returns.record(cost, self.map);

        let completed = self.turns.len() + 1;
        let outcome = match response {
            UserResponse::Terminate { success: true } => Outcome::Success,
            UserResponse::Terminate { success: false } => Outcome::Failure,
            _ if self.goal.is_some() => check_termination(self.map, completed + 1, &params.termination),
            _ => check_termination(0.0, completed + 1, &params.termination),
        };
        let sim_reward = simulator_reward(outcome, &params.termination);
        self.simulator_return += sim_reward;
        self.outcome = outcome;

        let next_manager_state = {
            let s = manager_state(&self.query, &self.list, corpus, &params.features, params.retrieval.jm_lambda, completed);
            s.to_vector(params.termination.max_turns)
        };
        let next_simulator_state = self.simulator_state(params);
        self.turns.push(TurnRecord {
            manager_state: pending.manager_state,
            action: pending.action,
            prompt: pending.prompt,
            simulator_state: pending.simulator_state,
            decision,
            response,
            evidence,
            map_before,
            map_after: self.map,
            manager_reward,
            simulator_reward: sim_reward,
            next_manager_state,
            next_simulator_state,
            outcome,
        });
        Ok(TurnOutcome {
            outcome,
            map: self.map,
            manager_reward,
        })
    }

    /// Close the dialogue without further turns, e.g. after a long idle spell.
    pub fn abandon(&mut self) {
        self.pending = None;
        if self.outcome == Outcome::Continue {
            self.outcome = Outcome::Failure;
        }
    }

    pub fn trace(&self) -> EpisodeTrace {
        EpisodeTrace {
            query: self.query_id.clone(),
            lambda: self.returns.lambda,
            map_initial: self.map_initial,
            turns: self.turns.clone(),
            outcome: self.outcome,
            manager_return: self.returns.total(),
            simulator_return: self.simulator_return,
        }
    }
}

fn judged_ap(list: &RankedList, goal: Option<&UserGoal>) -> f64 {
    match goal {
        Some(g) if !g.relevant.is_empty() => list_average_precision(list, &g.relevant).expect("non-empty relevant set"),
        _ => 0.0,
    }
}

/// An episode that stopped on a contract violation, with the turns played so far.
#[derive(Debug)]
pub struct EpisodeAbort {
    pub error: Error,
    pub partial: EpisodeTrace,
}

impl std::fmt::Display for EpisodeAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "episode for query {} aborted after {} turns: {}",
            self.partial.query,
            self.partial.turns.len(),
            self.error
        )
    }
}

impl std::error::Error for EpisodeAbort {}

impl From<EpisodeAbort> for Error {
    fn from(a: EpisodeAbort) -> Self {
        match a.error {
            Error::NonFinite(_) | Error::Contract(_) => Error::Contract(a.to_string()),
            other => other,
        }
    }
}

/// Exploration rates for one rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Exploration {
    pub manager: f64,
    pub simulator: f64,
}

pub fn run_episode(
    query: &QueryRecord,
    manager: &QLearner,
    simulator: &UserSimulator,
    corpus: &Corpus,
    params: &EngineParams,
    exploration: Exploration,
    rng: &mut impl Rng,
) -> std::result::Result<EpisodeTrace, EpisodeAbort> {
    let mut dialogue = match Dialogue::for_query(query, corpus, params) {
        Ok(d) => d,
        Err(error) => {
            return Err(EpisodeAbort {
                error,
                partial: EpisodeTrace {
                    query: query.id.clone(),
                    lambda: params.dialogue.lambda,
                    map_initial: 0.0,
                    turns: vec![],
                    outcome: Outcome::Failure,
                    manager_return: 0.0,
                    simulator_return: 0.0,
                },
            })
        }
    };
    while !dialogue.is_finished() {
        if let Err(error) = play_turn(&mut dialogue, manager, simulator, corpus, params, exploration, rng) {
            return Err(EpisodeAbort {
                error,
                partial: dialogue.trace(),
            });
        }
    }
    Ok(dialogue.trace())
}

fn play_turn(
    dialogue: &mut Dialogue,
    manager: &QLearner,
    simulator: &UserSimulator,
    corpus: &Corpus,
    params: &EngineParams,
    exploration: Exploration,
    rng: &mut impl Rng,
) -> Result<()> {
    let prompt = dialogue.propose(manager, exploration.manager, corpus, params, rng)?.clone();
    let state = dialogue.pending.as_ref().expect("just proposed").simulator_state.clone();
    let (response, decision) = {
        let ctx = dialogue
            .response_context(corpus)
            .ok_or_else(|| Error::Contract("simulated users need judged queries".into()))?;
        simulator.respond(&prompt, &state, &ctx, exploration.simulator, rng)
    };
    let decision = matches!(simulator, UserSimulator::Learned(_)).then_some(decision);
    dialogue.respond(response, decision, corpus, params)?;
    Ok(())
}

/// Re-run retrieval along a trace's feedback and return the MAP after
/// first-pass retrieval and after every turn. Unjudged queries score 0.
pub fn replay_maps(trace: &EpisodeTrace, query: &QueryRecord, corpus: &Corpus, params: &RetrievalParams) -> Result<Vec<f64>> {
    let mut q = QueryModel::from_terms(corpus, &query.terms)?;
    let ap = |q: &QueryModel| -> Result<f64> {
        if query.relevant.is_empty() {
            return Ok(0.0);
        }
        list_average_precision(&retrieve(q, corpus, params.depth, params.jm_lambda), &query.relevant)
    };
    let mut maps = vec![ap(&q)?];
    for t in &trace.turns {
        if let Some(ev) = &t.evidence {
            q = apply_feedback(&q, ev, corpus, params);
        }
        maps.push(ap(&q)?);
    }
    Ok(maps)
}

/// Situations from logged traces where a ReturnDocuments prompt showed at
/// least four relevant documents.
pub fn document_scenarios(traces: &[EpisodeTrace], queries: &[QueryRecord]) -> Vec<DocumentScenario> {
    let mut out = Vec::new();
    for trace in traces {
        let Some(q) = queries.iter().find(|q| q.id == trace.query) else {
            continue;
        };
        for t in &trace.turns {
            if let PromptPayload::Documents { docs } = &t.prompt.payload {
                let relevant: Vec<DocIdx> = docs.iter().copied().filter(|d| q.relevant.contains(d)).collect();
                if relevant.len() >= 4 {
                    out.push(DocumentScenario {
                        query: trace.query.clone(),
                        docs: docs.clone(),
                        state: t.simulator_state.clone(),
                    });
                }
            }
        }
    }
    out
}

/// One scenario per query whose first-pass page shows at least four
/// relevant documents.
pub fn first_pass_scenarios(queries: &[QueryRecord], corpus: &Corpus, params: &EngineParams) -> Result<Vec<DocumentScenario>> {
    let mut out = Vec::new();
    for q in queries {
        let d = Dialogue::for_query(q, corpus, params)?;
        let docs: Vec<DocIdx> = d.list().docs().take(params.dialogue.document_page).collect();
        if docs.iter().filter(|x| q.relevant.contains(x)).count() >= DECISIONS {
            out.push(DocumentScenario {
                query: q.id.clone(),
                docs,
                state: d.simulator_state(params),
            });
        }
    }
    Ok(out)
}

/// Position, among the first four relevant documents on the scenario's
/// list, of the document a greedy simulated user picks.
pub fn scenario_choice(
    scenario: &DocumentScenario,
    query: &QueryRecord,
    corpus: &Corpus,
    simulator: &UserSimulator,
    rng: &mut impl Rng,
) -> Result<usize> {
    let candidates: Vec<DocIdx> = scenario.docs.iter().copied().filter(|d| query.relevant.contains(d)).take(DECISIONS).collect();
    if candidates.len() < DECISIONS {
        return Err(Error::Validation(format!(
            "scenario for {} shows {} relevant documents, four are needed",
            query.id,
            candidates.len()
        )));
    }
    let goal = UserGoal::new(query, corpus);
    let given = BTreeSet::new();
    let ctx = ResponseContext { corpus, goal: &goal, given_terms: &given };
    let prompt = SystemPrompt {
        action: SystemAction::ReturnDocuments,
        payload: PromptPayload::Documents { docs: scenario.docs.clone() },
        utterance: UTTERANCE_DOCUMENTS.into(),
    };
    match simulator.respond(&prompt, &scenario.state, &ctx, 0.0, rng).0 {
        UserResponse::PickDocument { doc } => corpus
            .doc_idx(&doc)
            .and_then(|d| candidates.iter().position(|&c| c == d))
            .ok_or_else(|| Error::Contract(format!("picked document {doc} is not a candidate"))),
        other => Err(Error::Contract(format!("expected a document pick, got {}", other.kind()))),
    }
}
