use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::{argmax, Architecture, Head, Mlp};
use super::replay::Experience;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "iscr-qnet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Double,
    Dueling,
}

impl Variant {
    pub fn head(self) -> Head {
        match self {
            Variant::Dueling => Head::Dueling,
            Variant::Vanilla | Variant::Double => Head::Linear,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Vanilla => "DQN",
            Variant::Double => "Double DQN",
            Variant::Dueling => "Dueling DQN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnParams {
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Train steps between target-network copies.
    pub sync_period: u64,
}

impl Default for DqnParams {
    fn default() -> Self {
        Self {
            variant: Variant::Vanilla,
            hidden: vec![1024, 1024],
            learning_rate: 8e-4,
            gamma: 0.99,
            batch_size: 256,
            replay_capacity: 10_000,
            sync_period: 100,
        }
    }
}

impl DqnParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0,1], got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(Error::Config("need 0 < batch_size <= replay_capacity".into()));
        }
        if self.sync_period == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("sync_period and hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, n_actions: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            n_actions,
            head: self.variant.head(),
        }
    }
}

/// Online and target Q-networks with their optimizer.
#[derive(Clone, Debug)]
pub struct QLearner {
    variant: Variant,
    online: Mlp,
    target: Mlp,
    optimizer: Adam,
    gamma: f64,
    sync_period: u64,
    train_steps: u64,
}

impl QLearner {
    pub fn new(params: &DqnParams, input_dim: usize, n_actions: usize, rng: &mut impl Rng) -> Self {
        let online = Mlp::new(params.architecture(input_dim, n_actions), rng);
        Self::from_network(params, online)
    }

    /// Wrap an existing network; the target starts as a copy of it.
    pub fn from_network(params: &DqnParams, online: Mlp) -> Self {
        assert_eq!(online.architecture().head, params.variant.head(), "contract violation: head does not match variant");
        Self {
            variant: params.variant,
            target: online.clone(),
            optimizer: Adam::new(online.num_params(), params.learning_rate),
            online,
            gamma: params.gamma,
            sync_period: params.sync_period,
            train_steps: 0,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn online(&self) -> &Mlp {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut Mlp {
        &mut self.online
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn input_dim(&self) -> usize {
        self.online.architecture().input_dim
    }

    pub fn n_actions(&self) -> usize {
        self.online.architecture().n_actions
    }

    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        self.online.q_values(state)
    }

    /// ε-greedy action over the online network; argmax ties go to the
    /// lowest index. No random draw is consumed when ε is zero.
    pub fn act(&self, state: &[f64], epsilon: f64, rng: &mut impl Rng) -> usize {
        epsilon_greedy(&self.online.q_values(state), epsilon, rng)
    }

    pub fn sync_target(&mut self) {
        self.target.set_params(self.online.params());
    }

    pub fn td_target(&self, e: &Experience) -> f64 {
        self.td_targets(std::slice::from_ref(e))[0]
    }

    /// Bootstrapped regression targets. Vanilla and dueling learners take the
    /// target network's max; the double learner picks the action with the
    /// online network and evaluates it with the target network.
    pub fn td_targets(&self, batch: &[Experience]) -> Vec<f64> {
        let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].done).collect();
        let mut targets: Vec<f64> = batch.iter().map(|e| e.reward).collect();
        if live.is_empty() {
            return targets;
        }
        let n = self.n_actions();
        let next: Vec<f64> = live.iter().flat_map(|&i| batch[i].next_state.iter().copied()).collect();
        let q_target = self.target.forward_batch(&next, live.len()).q;
        let q_online = match self.variant {
            Variant::Double => Some(self.online.forward_batch(&next, live.len()).q),
            _ => None,
        };
        for (row, &i) in live.iter().enumerate() {
            let tq = &q_target[row * n..(row + 1) * n];
            let bootstrap = match &q_online {
                Some(oq) => tq[argmax(&oq[row * n..(row + 1) * n])],
                None => tq.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            targets[i] += self.gamma * bootstrap;
        }
        targets
    }

    /// One gradient step on the online network's mean squared TD error.
    /// Copies online into target every `sync_period` steps.
    pub fn train_step(&mut self, batch: &[Experience]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("train_step needs a non-empty batch".into()));
        }
        let targets = self.td_targets(batch);
        let states: Vec<f64> = batch.iter().flat_map(|e| e.state.iter().copied()).collect();
        let actions: Vec<usize> = batch.iter().map(|e| e.action).collect();
        let (loss, grad) = self.online.loss_and_gradient(&states, &actions, &targets);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(batch_dump(loss, batch, &targets)));
        }
        self.optimizer.update(self.online.params_mut(), &grad);
        if self.online.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(batch_dump(loss, batch, &targets)));
        }
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.sync_period) {
            self.sync_target();
        }
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            variant: self.variant,
            architecture: self.online.architecture().clone(),
            train_steps: self.train_steps,
            params: self.online.params().to_vec(),
        }
    }

    /// Restore a learner whose architecture must equal `params`' for the
    /// given input width and action count.
    pub fn from_checkpoint(ck: &Checkpoint, params: &DqnParams, input_dim: usize, n_actions: usize) -> Result<Self> {
        let expected = params.architecture(input_dim, n_actions);
        let net = ck.network(&expected)?;
        if ck.variant != params.variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {:?} learner, configuration asks for {:?}",
                ck.variant, params.variant
            )));
        }
        let mut learner = Self::from_network(params, net);
        learner.train_steps = ck.train_steps;
        Ok(learner)
    }
}

pub fn epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut impl Rng) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

fn batch_dump(loss: f64, batch: &[Experience], targets: &[f64]) -> String {
    let rows: Vec<String> = batch
        .iter()
        .zip(targets)
        .map(|(e, y)| {
            format!(
                "a={} r={} done={} target={} state={:?} next={:?}",
                e.action, e.reward, e.done, y, e.state, e.next_state
            )
        })
        .collect();
    format!("loss={loss}; batch:\n{}", rows.join("\n"))
}

/// Serialized network: architecture descriptor, parameters and step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub architecture: Architecture,
    pub train_steps: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Rebuild the network, rejecting a descriptor that differs from `expected`.
    pub fn network(&self, expected: &Architecture) -> Result<Mlp> {
        if &self.architecture != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                self.architecture, expected
            )));
        }
        let mut net = Mlp::zeros(expected.clone());
        if self.params.len() != net.num_params() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} parameters, architecture needs {}",
                self.params.len(),
                net.num_params()
            )));
        }
        net.set_params(&self.params);
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small(variant: Variant) -> DqnParams {
        DqnParams {
            variant,
            hidden: vec![8, 8],
            gamma: 0.9,
            batch_size: 4,
            replay_capacity: 100,
            ..Default::default()
        }
    }

    fn random_experience(rng: &mut ChaCha8Rng, dim: usize) -> Experience {
        Experience {
            state: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            action: rng.gen_range(0..4),
            reward: rng.gen_range(-5.0..5.0),
            next_state: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            done: false,
        }
    }

    #[test]
    fn epsilon_greedy_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(epsilon_greedy(&[1.0, 3.0, 2.0, 0.0], 0.0, &mut rng), 1);
        assert_eq!(epsilon_greedy(&[5.0, 5.0, 0.0, 0.0], 0.0, &mut rng), 0);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[epsilon_greedy(&[0.0, 9.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn terminal_target_is_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let learner = QLearner::new(&small(Variant::Vanilla), 3, 4, &mut rng);
        let mut e = random_experience(&mut rng, 3);
        e.done = true;
        e.reward = 30.0;
        assert_eq!(learner.td_target(&e), 30.0);
    }

    #[test]
    fn double_equals_vanilla_when_networks_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let double = QLearner::new(&small(Variant::Double), 3, 4, &mut rng);
        let mut vanilla = double.clone();
        vanilla.variant = Variant::Vanilla;
        for _ in 0..100 {
            let e = random_experience(&mut rng, 3);
            assert_eq!(double.td_target(&e), vanilla.td_target(&e));
        }
    }

    #[test]
    fn td_target_hand_computed() {
        // Zero trunk, so the head sees zeros and Q equals the head biases.
        let params = DqnParams {
            hidden: vec![2],
            gamma: 0.9,
            ..small(Variant::Double)
        };
        let mut online = Mlp::zeros(params.architecture(1, 4));
        let n = online.num_params();
        online.params_mut()[n - 4..].copy_from_slice(&[1.0, 4.0, 2.0, 3.0]);
        let mut learner = QLearner::from_network(&params, online);
        // Target biases differ: selection by online picks index 1.
        let mut target = learner.online().clone();
        target.params_mut()[n - 4..].copy_from_slice(&[10.0, 0.5, 7.0, 2.0]);
        learner.target = target;
        let e = Experience {
            state: vec![0.0],
            action: 0,
            reward: 2.0,
            next_state: vec![0.3],
            done: false,
        };
        assert!((learner.td_target(&e) - (2.0 + 0.9 * 0.5)).abs() < 1e-12);
        learner.variant = Variant::Vanilla;
        assert!((learner.td_target(&e) - (2.0 + 0.9 * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn train_step_leaves_target_alone_until_sync() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = DqnParams {
            sync_period: 3,
            ..small(Variant::Dueling)
        };
        let mut learner = QLearner::new(&params, 3, 4, &mut rng);
        let snapshot = learner.target().params().to_vec();
        let batch: Vec<_> = (0..4).map(|_| random_experience(&mut rng, 3)).collect();
        learner.train_step(&batch).unwrap();
        learner.train_step(&batch).unwrap();
        assert_eq!(learner.target().params(), &snapshot[..]);
        assert_ne!(learner.online().params(), &snapshot[..]);
        learner.train_step(&batch).unwrap();
        assert_eq!(learner.target().params(), learner.online().params());
    }

    #[test]
    fn sync_makes_networks_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut learner = QLearner::new(&small(Variant::Double), 3, 4, &mut rng);
        let batch: Vec<_> = (0..4).map(|_| random_experience(&mut rng, 3)).collect();
        learner.train_step(&batch).unwrap();
        learner.sync_target();
        let s = [0.2, -0.4, 0.9];
        assert_eq!(learner.online().q_values(&s), learner.target().q_values(&s));
        let mut vanilla = learner.clone();
        vanilla.variant = Variant::Vanilla;
        let e = random_experience(&mut rng, 3);
        assert_eq!(learner.td_target(&e), vanilla.td_target(&e));
    }

    #[test]
    fn zero_error_batch_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut learner = QLearner::new(&small(Variant::Vanilla), 3, 4, &mut rng);
        let mut e = random_experience(&mut rng, 3);
        e.done = true;
        e.reward = learner.q_values(&e.state)[e.action];
        let before = learner.online().params().to_vec();
        let loss = learner.train_step(&[e]).unwrap();
        assert_eq!(loss, 0.0);
        for (a, b) in before.iter().zip(learner.online().params()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn regression_converges_to_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = DqnParams {
            gamma: 0.0,
            learning_rate: 1e-3,
            ..small(Variant::Vanilla)
        };
        let mut learner = QLearner::new(&params, 3, 4, &mut rng);
        let mut e = random_experience(&mut rng, 3);
        e.reward = 7.5;
        for _ in 0..5000 {
            learner.train_step(std::slice::from_ref(&e)).unwrap();
        }
        assert!((learner.q_values(&e.state)[e.action] - 7.5).abs() < 1e-3);
    }

    #[test]
    fn non_finite_reward_aborts_with_dump() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut learner = QLearner::new(&small(Variant::Vanilla), 3, 4, &mut rng);
        let mut e = random_experience(&mut rng, 3);
        e.reward = f64::NAN;
        let err = learner.train_step(&[e]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("batch")));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = small(Variant::Dueling);
        let learner = QLearner::new(&params, 5, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        learner.to_checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let restored = QLearner::from_checkpoint(&ck, &params, 5, 4).unwrap();
        assert_eq!(restored.online().params(), learner.online().params());
        assert!(matches!(QLearner::from_checkpoint(&ck, &params, 6, 4), Err(Error::Checkpoint(_))));
        let linear = small(Variant::Double);
        assert!(QLearner::from_checkpoint(&ck, &linear, 5, 4).is_err());
    }
}
