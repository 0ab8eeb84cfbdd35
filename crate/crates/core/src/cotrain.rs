//! Alternating joint training of the dialogue manager and the simulated
//! user, greedy evaluation, and the k-fold cross-validation harness.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryRecord};
use crate::dialogue::SystemAction;
use crate::dqn::{Checkpoint, DqnParams, QLearner, ReplayBuffer};
use crate::episode::{run_episode, EngineParams, EpisodeTrace, Exploration};
use crate::error::{Error, Result};
use crate::eval::mean;
use crate::simulator::{DecisionMakerBank, UserSimulator, DECISIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Rule,
    Dqn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Gradient updates applied to one agent before switching to the other.
    #[serde(rename = "c")]
    pub updates_per_phase: usize,
    pub epochs: usize,
    /// Episodes collected between consecutive train steps.
    pub episodes_per_update: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of an agent's planned updates over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            updates_per_phase: 500,
            epochs: 20,
            episodes_per_update: 1,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.2,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.updates_per_phase == 0 || self.epochs == 0 || self.episodes_per_update == 0 {
            return Err(Error::Config("c, epochs and episodes_per_update must be at least 1".into()));
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.epsilon_start) || !in_unit(self.epsilon_end) || !(self.epsilon_decay_fraction > 0.0 && self.epsilon_decay_fraction <= 1.0) {
            return Err(Error::Config("epsilon values must lie in [0,1] and the decay fraction in (0,1]".into()));
        }
        Ok(())
    }

    /// Exploration rate after `updates` of the agent's planned total.
    pub fn epsilon(&self, updates: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * (self.epochs * self.updates_per_phase) as f64;
        let frac = (updates as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_return: f64,
    pub valid_return: f64,
    pub train_map: f64,
    pub valid_map: f64,
}

/// Learning-curve table with the columns epoch, train_return, valid_return,
/// train_map, valid_map.
pub fn format_learning_curve(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch\ttrain_return\tvalid_return\ttrain_map\tvalid_map\n");
    for e in log {
        out.push_str(&format!(
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\n",
            e.epoch, e.train_return, e.valid_return, e.train_map, e.valid_map
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Agents {
    pub manager: QLearner,
    pub simulator: UserSimulator,
}

/// Greedy rollouts over `queries`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub traces: Vec<EpisodeTrace>,
    pub mean_return: f64,
    pub map: f64,
}

/// Roll out every query once with both agents greedy. Key-term answers of a
/// learned user still draw from `rng`.
pub fn evaluate(queries: &[QueryRecord], agents: &Agents, corpus: &Corpus, params: &EngineParams, rng: &mut impl Rng) -> Result<Evaluation> {
    let traces = queries
        .iter()
        .map(|q| run_episode(q, &agents.manager, &agents.simulator, corpus, params, Exploration::default(), rng))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let returns: Vec<f64> = traces.iter().map(|t| t.manager_return).collect();
    let maps: Vec<f64> = traces.iter().map(EpisodeTrace::map_final).collect();
    Ok(Evaluation {
        mean_return: mean(&returns)?,
        map: mean(&maps)?,
        traces,
    })
}

/// Mutable training state of one run.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    train: &'a [QueryRecord],
    params: &'a EngineParams,
    schedule: TrainSchedule,
    manager_batch: usize,
    simulator_batch: usize,
    pub agents: Agents,
    manager_replay: ReplayBuffer,
    simulator_replay: Vec<ReplayBuffer>,
    manager_updates: usize,
    simulator_updates: usize,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    /// Fresh networks, all initialized from `seed`. `simulator` of `None`
    /// trains against the rule-based user.
    pub fn new(
        corpus: &'a Corpus,
        train: &'a [QueryRecord],
        params: &'a EngineParams,
        schedule: &TrainSchedule,
        manager: &DqnParams,
        simulator: Option<&DqnParams>,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        schedule.validate()?;
        manager.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training needs at least one query".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let manager_learner = QLearner::new(manager, params.manager_dim(), SystemAction::ALL.len(), &mut rng);
        let (sim, simulator_batch, capacity) = match simulator {
            Some(p) => {
                p.validate()?;
                let bank = DecisionMakerBank::new(p, params.features.simulator_width, &mut rng);
                (UserSimulator::Learned(bank), p.batch_size, p.replay_capacity)
            }
            None => (UserSimulator::RuleBased, 1, 1),
        };
        Ok(Self {
            corpus,
            train,
            params,
            schedule: schedule.clone(),
            manager_batch: manager.batch_size,
            simulator_batch,
            agents: Agents {
                manager: manager_learner,
                simulator: sim,
            },
            manager_replay: ReplayBuffer::new(manager.replay_capacity),
            simulator_replay: (0..4).map(|_| ReplayBuffer::new(capacity)).collect(),
            manager_updates: 0,
            simulator_updates: 0,
            rng,
        })
    }

    pub fn manager_updates(&self) -> usize {
        self.manager_updates
    }

    pub fn simulator_updates(&self) -> usize {
        self.simulator_updates
    }

    fn sample_query(&mut self) -> &'a QueryRecord {
        let train = self.train;
        &train[self.rng.gen_range(0..train.len())]
    }

    /// Exactly C updates of the manager against the frozen, greedy user.
    /// Returns the number of updates applied.
    pub fn manager_phase(&mut self) -> Result<usize> {
        let mut done = 0;
        while done < self.schedule.updates_per_phase {
            for _ in 0..self.schedule.episodes_per_update {
                let q = self.sample_query();
                let exploration = Exploration {
                    manager: self.schedule.epsilon(self.manager_updates),
                    simulator: 0.0,
                };
                let trace = run_episode(q, &self.agents.manager, &self.agents.simulator, self.corpus, self.params, exploration, &mut self.rng)?;
                for e in trace.manager_experiences() {
                    self.manager_replay.push(e);
                }
            }
            if let Some(batch) = self.manager_replay.sample(self.manager_batch, &mut self.rng) {
                self.agents.manager.train_step(&batch)?;
                self.manager_updates += 1;
                done += 1;
            }
        }
        Ok(done)
    }

    /// Exactly C updates spread over the decision makers against the frozen,
    /// greedy manager. Each decision maker learns only from turns answering
    /// its own action. A rule-based user has nothing to train.
    pub fn simulator_phase(&mut self) -> Result<usize> {
        if matches!(self.agents.simulator, UserSimulator::RuleBased) {
            return Ok(0);
        }
        let mut done = 0;
        while done < self.schedule.updates_per_phase {
            let mut involved = [false; 4];
            for _ in 0..self.schedule.episodes_per_update {
                let q = self.sample_query();
                let exploration = Exploration {
                    manager: 0.0,
                    simulator: self.schedule.epsilon(self.simulator_updates),
                };
                let trace = run_episode(q, &self.agents.manager, &self.agents.simulator, self.corpus, self.params, exploration, &mut self.rng)?;
                for (action, e) in trace.simulator_experiences() {
                    involved[action.index()] = true;
                    self.simulator_replay[action.index()].push(e);
                }
            }
            for action in SystemAction::ALL {
                if done == self.schedule.updates_per_phase {
                    break;
                }
                if !involved[action.index()] {
                    continue;
                }
                if let Some(batch) = self.simulator_replay[action.index()].sample(self.simulator_batch, &mut self.rng) {
                    let UserSimulator::Learned(bank) = &mut self.agents.simulator else {
                        unreachable!("checked above");
                    };
                    bank.learner_mut(action).train_step(&batch)?;
                    self.simulator_updates += 1;
                    done += 1;
                }
            }
        }
        Ok(done)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best: Agents,
    pub last: Agents,
    /// Evaluation rollouts of the final epoch, training queries first.
    pub traces: Vec<EpisodeTrace>,
}

/// Seed of the evaluation stream for one epoch, independent of training.
fn eval_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0xA5A5_A5A5)
}

#[allow(clippy::too_many_arguments)]
pub fn alternate_train(
    corpus: &Corpus,
    train: &[QueryRecord],
    valid: &[QueryRecord],
    params: &EngineParams,
    schedule: &TrainSchedule,
    manager: &DqnParams,
    simulator: Option<&DqnParams>,
    seed: u64,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(corpus, train, params, schedule, manager, simulator, seed)?;
    let mut log = Vec::with_capacity(schedule.epochs);
    let mut best: Option<(f64, usize, Agents)> = None;
    let mut traces = Vec::new();
    for epoch in 1..=schedule.epochs {
        trainer.manager_phase()?;
        trainer.simulator_phase()?;

        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed, epoch));
        let t = evaluate(train, &trainer.agents, corpus, params, &mut rng)?;
        let v = if valid.is_empty() {
            None
        } else {
            Some(evaluate(valid, &trainer.agents, corpus, params, &mut rng)?)
        };
        let entry = EpochLog {
            epoch,
            train_return: t.mean_return,
            valid_return: v.as_ref().map_or(f64::NAN, |v| v.mean_return),
            train_map: t.map,
            valid_map: v.as_ref().map_or(f64::NAN, |v| v.map),
        };
        let score = v.as_ref().map_or(t.mean_return, |v| v.mean_return);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, trainer.agents.clone()));
        }
        log.push(entry);
        if epoch == schedule.epochs {
            traces = t.traces;
            if let Some(v) = v {
                traces.extend(v.traces);
            }
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainReport {
        log,
        best_epoch,
        best,
        last: trainer.agents,
        traces,
    })
}

/// Seeded partition of `n` items into `k` folds whose sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 3 {
        return Err(Error::Config("cross-validation needs at least 3 folds".into()));
    }
    if k > n {
        return Err(Error::Config(format!("{k} folds requested over only {n} queries")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, q) in order.into_iter().enumerate() {
        folds[i % k].push(q);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Trial `i`: fold i tests, fold i+1 validates, the rest train.
pub fn trial_split(folds: &[Vec<usize>], trial: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let k = folds.len();
    let test = folds[trial % k].clone();
    let valid = folds[(trial + 1) % k].clone();
    let mut train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != trial % k && j != (trial + 1) % k)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    train.sort_unstable();
    (train, valid, test)
}

pub fn select(queries: &[QueryRecord], idx: &[usize]) -> Vec<QueryRecord> {
    idx.iter().map(|&i| queries[i].clone()).collect()
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub trial: usize,
    pub test_map: f64,
    pub test_return: f64,
    pub test_traces: Vec<EpisodeTrace>,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct CrossvalReport {
    pub folds: Vec<FoldResult>,
    pub map: f64,
    pub ret: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn crossval(
    corpus: &Corpus,
    queries: &[QueryRecord],
    k: usize,
    params: &EngineParams,
    schedule: &TrainSchedule,
    manager: &DqnParams,
    simulator: Option<&DqnParams>,
    seed: u64,
) -> Result<CrossvalReport> {
    let folds = fold_assignment(queries.len(), k, seed)?;
    let mut results = Vec::with_capacity(k);
    for trial in 0..k {
        let (tr, va, te) = trial_split(&folds, trial);
        let (train, valid, test) = (select(queries, &tr), select(queries, &va), select(queries, &te));
        let trial_seed = seed.wrapping_add(trial as u64 + 1);
        let report = alternate_train(corpus, &train, &valid, params, schedule, manager, simulator, trial_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(trial_seed, 0));
        let e = evaluate(&test, &report.best, corpus, params, &mut rng)?;
        results.push(FoldResult {
            trial,
            test_map: e.map,
            test_return: e.mean_return,
            test_traces: e.traces,
            log: report.log,
        });
    }
    let maps: Vec<f64> = results.iter().map(|f| f.test_map).collect();
    let rets: Vec<f64> = results.iter().map(|f| f.test_return).collect();
    Ok(CrossvalReport {
        map: mean(&maps)?,
        ret: mean(&rets)?,
        folds: results,
    })
}

pub const MANAGER_CHECKPOINT: &str = "manager.json";

impl SystemAction {
    pub fn slug(self) -> &'static str {
        match self {
            SystemAction::ReturnDocuments => "return_documents",
            SystemAction::ReturnKeyTerm => "return_key_term",
            SystemAction::ReturnRequest => "return_request",
            SystemAction::ReturnTopic => "return_topic",
        }
    }
}

pub fn simulator_checkpoint(action: SystemAction) -> String {
    format!("simulator_{}.json", action.slug())
}

/// Write `manager.json` and, for a learned user, one file per decision maker.
pub fn save_agents(agents: &Agents, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = vec![dir.join(MANAGER_CHECKPOINT)];
    agents.manager.to_checkpoint().save(&written[0])?;
    if let UserSimulator::Learned(bank) = &agents.simulator {
        for a in SystemAction::ALL {
            let path = dir.join(simulator_checkpoint(a));
            bank.learner(a).to_checkpoint().save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Inverse of [`save_agents`]; `simulator` is `None` for the rule-based user.
pub fn load_agents(dir: &Path, params: &EngineParams, manager: &DqnParams, simulator: Option<&DqnParams>) -> Result<Agents> {
    let ck = Checkpoint::load(&dir.join(MANAGER_CHECKPOINT))?;
    let manager = QLearner::from_checkpoint(&ck, manager, params.manager_dim(), SystemAction::ALL.len())?;
    let simulator = match simulator {
        None => UserSimulator::RuleBased,
        Some(p) => {
            let learners = SystemAction::ALL
                .iter()
                .map(|&a| {
                    let ck = Checkpoint::load(&dir.join(simulator_checkpoint(a)))?;
                    QLearner::from_checkpoint(&ck, p, params.features.simulator_width, DECISIONS)
                })
                .collect::<Result<Vec<_>>>()?;
            UserSimulator::Learned(DecisionMakerBank::from_learners(learners)?)
        }
    };
    Ok(Agents { manager, simulator })
}
