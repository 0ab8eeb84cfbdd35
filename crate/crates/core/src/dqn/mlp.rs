//! Fully connected Q-network with rectified-linear hidden layers and either a
//! plain linear head or a dueling value/advantage head.
//!
//! Parameters live in one flat vector so the optimizer, target sync,
//! checkpoints and gradient checks all work on the same buffer. Each dense
//! layer stores its weights row-major as `out × in`, followed by `out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// `Q = V + A − mean(A)`.
    Dueling,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_actions: usize,
    pub head: Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    offset: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Dense {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    fn size(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

#[derive(Clone, Debug, PartialEq)]
enum HeadLayers {
    Linear(Dense),
    Dueling { value: Dense, advantage: Dense },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
    trunk: Vec<Dense>,
    head: HeadLayers,
}

/// Activations kept from a batched forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub batch: usize,
    /// `batch × n_actions`.
    pub q: Vec<f64>,
    /// Dueling head only: `batch` state values.
    pub value: Option<Vec<f64>>,
    /// Dueling head only: `batch × n_actions` raw advantages.
    pub advantage: Option<Vec<f64>>,
    /// Input followed by every hidden layer's rectified output.
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(arch: Architecture) -> Self {
        assert!(arch.input_dim > 0 && arch.n_actions > 0, "network needs inputs and actions");
        let mut offset = 0;
        let mut fan_in = arch.input_dim;
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        for &width in &arch.hidden {
            let layer = Dense {
                offset,
                fan_in,
                fan_out: width,
            };
            offset += layer.size();
            trunk.push(layer);
            fan_in = width;
        }
        let head = match arch.head {
            Head::Linear => HeadLayers::Linear(Dense {
                offset,
                fan_in,
                fan_out: arch.n_actions,
            }),
            Head::Dueling => {
                let value = Dense {
                    offset,
                    fan_in,
                    fan_out: 1,
                };
                let advantage = Dense {
                    offset: offset + value.size(),
                    fan_in,
                    fan_out: arch.n_actions,
                };
                HeadLayers::Dueling { value, advantage }
            }
        };
        let total = match &head {
            HeadLayers::Linear(l) => l.offset + l.size(),
            HeadLayers::Dueling { advantage, .. } => advantage.offset + advantage.size(),
        };
        Self {
            arch,
            params: vec![0.0; total],
            trunk,
            head,
        }
    }

    /// He-style uniform initialization: weights in ±√(6 / fan_in), zero biases.
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(arch);
        for layer in net.layers() {
            let bound = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut net.params[layer.weights()] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        net
    }

    fn layers(&self) -> Vec<Dense> {
        let mut all = self.trunk.clone();
        match self.head {
            HeadLayers::Linear(l) => all.push(l),
            HeadLayers::Dueling { value, advantage } => {
                all.push(value);
                all.push(advantage);
            }
        }
        all
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Replace all parameters; the length must match.
    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len(), "contract violation: parameter count mismatch");
        self.params.copy_from_slice(params);
    }

    /// On/off state of every hidden unit for each state in the batch.
    pub fn activation_pattern(&self, states: &[f64], batch: usize) -> Vec<bool> {
        let fwd = self.forward_batch(states, batch);
        fwd.activations[1..].iter().flatten().map(|&a| a > 0.0).collect()
    }

    /// Q-values for one state.
    ///
    /// Panics on a state of the wrong width.
    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        self.forward_batch(state, 1).q
    }

    /// Batched forward pass over `batch` row-major states.
    pub fn forward_batch(&self, states: &[f64], batch: usize) -> ForwardPass {
        assert_eq!(
            states.len(),
            batch * self.arch.input_dim,
            "contract violation: expected {batch} states of width {}",
            self.arch.input_dim
        );
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(states.to_vec());
        for layer in &self.trunk {
            let mut z = self.affine(*layer, activations.last().unwrap(), batch);
            for v in &mut z {
                *v = v.max(0.0);
            }
            activations.push(z);
        }
        let features = activations.last().unwrap();
        let n = self.arch.n_actions;
        match self.head {
            HeadLayers::Linear(l) => ForwardPass {
                batch,
                q: self.affine(l, features, batch),
                value: None,
                advantage: None,
                activations,
            },
            HeadLayers::Dueling { value, advantage } => {
                let v = self.affine(value, features, batch);
                let a = self.affine(advantage, features, batch);
                let mut q = vec![0.0; batch * n];
                for b in 0..batch {
                    let row = &a[b * n..(b + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    for j in 0..n {
                        q[b * n + j] = v[b] + row[j] - mean;
                    }
                }
                ForwardPass {
                    batch,
                    q,
                    value: Some(v),
                    advantage: Some(a),
                    activations,
                }
            }
        }
    }

    /// `y = x·Wᵀ + b` for a batch of rows.
    fn affine(&self, layer: Dense, x: &[f64], batch: usize) -> Vec<f64> {
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        let w = &self.params[layer.weights()];
        let bias = &self.params[layer.biases()];
        let mut y = Vec::with_capacity(batch * fo);
        for _ in 0..batch {
            y.extend_from_slice(bias);
        }
        // SAFETY: slice lengths match the dimensions and strides passed.
        unsafe {
            matrixmultiply::dgemm(
                batch,
                fi,
                fo,
                1.0,
                x.as_ptr(),
                fi as isize,
                1,
                w.as_ptr(),
                1,
                fi as isize,
                1.0,
                y.as_mut_ptr(),
                fo as isize,
                1,
            );
        }
        y
    }

    /// Accumulates the layer's weight and bias gradients into `grad` and
    /// returns dL/dx when `want_input_grad` is set.
    fn affine_backward(
        &self,
        layer: Dense,
        x: &[f64],
        dy: &[f64],
        batch: usize,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        // SAFETY: as in `affine`; dW (fo × fi) = dyᵀ (fo × batch) · x (batch × fi).
        unsafe {
            matrixmultiply::dgemm(
                fo,
                batch,
                fi,
                1.0,
                dy.as_ptr(),
                1,
                fo as isize,
                x.as_ptr(),
                fi as isize,
                1,
                1.0,
                grad[layer.weights()].as_mut_ptr(),
                fi as isize,
                1,
            );
        }
        let gb = &mut grad[layer.biases()];
        for row in dy.chunks_exact(fo) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !want_input_grad {
            return None;
        }
        let w = &self.params[layer.weights()];
        let mut dx = vec![0.0; batch * fi];
        // SAFETY: dx (batch × fi) = dy (batch × fo) · W (fo × fi).
        unsafe {
            matrixmultiply::dgemm(
                batch,
                fo,
                fi,
                1.0,
                dy.as_ptr(),
                fo as isize,
                1,
                w.as_ptr(),
                fi as isize,
                1,
                0.0,
                dx.as_mut_ptr(),
                fi as isize,
                1,
            );
        }
        Some(dx)
    }

    /// Gradient of a scalar loss with respect to all parameters, given
    /// dL/dQ (`batch × n_actions`).
    pub fn backward(&self, fwd: &ForwardPass, dq: &[f64]) -> Vec<f64> {
        let batch = fwd.batch;
        let n = self.arch.n_actions;
        let mut grad = vec![0.0; self.params.len()];
        let features = fwd.activations.last().unwrap();
        let has_trunk = !self.trunk.is_empty();
        let mut delta = match self.head {
            HeadLayers::Linear(l) => self.affine_backward(l, features, dq, batch, &mut grad, has_trunk),
            HeadLayers::Dueling { value, advantage } => {
                let mut dv = vec![0.0; batch];
                let mut da = vec![0.0; batch * n];
                for b in 0..batch {
                    let row = &dq[b * n..(b + 1) * n];
                    let sum: f64 = row.iter().sum();
                    dv[b] = sum;
                    for j in 0..n {
                        da[b * n + j] = row[j] - sum / n as f64;
                    }
                }
                let from_v = self.affine_backward(value, features, &dv, batch, &mut grad, has_trunk);
                let from_a = self.affine_backward(advantage, features, &da, batch, &mut grad, has_trunk);
                match (from_v, from_a) {
                    (Some(mut x), Some(y)) => {
                        for (a, b) in x.iter_mut().zip(y) {
                            *a += b;
                        }
                        Some(x)
                    }
                    _ => None,
                }
            }
        };
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            let mut d = delta.take().expect("trunk layers propagate gradients");
            let out = &fwd.activations[i + 1];
            for (g, &a) in d.iter_mut().zip(out) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            delta = self.affine_backward(*layer, &fwd.activations[i], &d, batch, &mut grad, i > 0);
        }
        grad
    }

    /// Mean squared TD error over the batch, treating `targets` as constants.
    pub fn loss(&self, states: &[f64], actions: &[usize], targets: &[f64]) -> f64 {
        let fwd = self.forward_batch(states, actions.len());
        squared_error(&fwd.q, self.arch.n_actions, actions, targets)
    }

    pub fn loss_and_gradient(&self, states: &[f64], actions: &[usize], targets: &[f64]) -> (f64, Vec<f64>) {
        let batch = actions.len();
        assert_eq!(targets.len(), batch, "contract violation: one target per action");
        let n = self.arch.n_actions;
        let fwd = self.forward_batch(states, batch);
        let mut dq = vec![0.0; batch * n];
        for (b, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            assert!(a < n, "contract violation: action {a} outside head of width {n}");
            dq[b * n + a] = 2.0 * (fwd.q[b * n + a] - y) / batch as f64;
        }
        let loss = squared_error(&fwd.q, n, actions, targets);
        (loss, self.backward(&fwd, &dq))
    }
}

fn squared_error(q: &[f64], n: usize, actions: &[usize], targets: &[f64]) -> f64 {
    let sum: f64 = actions
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(b, (&a, &y))| {
            let d = q[b * n + a] - y;
            d * d
        })
        .sum();
    sum / actions.len() as f64
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn arch(head: Head) -> Architecture {
        Architecture {
            input_dim: 3,
            hidden: vec![5, 4],
            n_actions: 4,
            head,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        for head in [Head::Linear, Head::Dueling] {
            let net = Mlp::zeros(arch(head));
            assert_eq!(net.q_values(&[0.3, -1.0, 2.0]), vec![0.0; 4]);
        }
    }

    #[test]
    fn parameter_count() {
        // 3→5: 20, 5→4: 24, head 4→4: 20.
        assert_eq!(Mlp::zeros(arch(Head::Linear)).num_params(), 64);
        // dueling head: 4→1 (5) + 4→4 (20).
        assert_eq!(Mlp::zeros(arch(Head::Dueling)).num_params(), 69);
    }

    #[test]
    fn forward_matches_hand_matrix_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Architecture {
            input_dim: 3,
            hidden: vec![4, 4],
            n_actions: 2,
            head: Head::Linear,
        };
        let net = Mlp::new(a, &mut rng);
        let p = net.params();
        let x = [0.5, -0.25, 1.5];
        // Walk the flat layout by hand.
        let mut off = 0;
        let mut layer = |input: &[f64], fo: usize, relu: bool| -> Vec<f64> {
            let fi = input.len();
            let w = &p[off..off + fi * fo];
            let b = &p[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            (0..fo)
                .map(|o| {
                    let mut s = b[o];
                    for i in 0..fi {
                        s += w[o * fi + i] * input[i];
                    }
                    if relu { s.max(0.0) } else { s }
                })
                .collect()
        };
        let h1 = layer(&x, 4, true);
        let h2 = layer(&h1, 4, true);
        let q = layer(&h2, 2, false);
        let got = net.q_values(&x);
        for (g, e) in got.iter().zip(&q) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dueling_head_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(arch(Head::Dueling), &mut rng);
        let fwd = net.forward_batch(&[0.1, 0.2, -0.7, 1.0, 0.0, 0.3], 2);
        let v = fwd.value.unwrap();
        for b in 0..2 {
            let mean: f64 = fwd.q[b * 4..b * 4 + 4].iter().map(|q| q - v[b]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0, 0.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0, 0.0, 0.0]), 0);
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn wrong_width_panics() {
        Mlp::zeros(arch(Head::Linear)).q_values(&[1.0, 2.0]);
    }

    #[test]
    fn network_without_hidden_layers_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Architecture {
            input_dim: 2,
            hidden: vec![],
            n_actions: 3,
            head: Head::Dueling,
        };
        let net = Mlp::new(a, &mut rng);
        let (_, g) = net.loss_and_gradient(&[1.0, 2.0], &[1], &[0.5]);
        assert_eq!(g.len(), net.num_params());
    }
}
