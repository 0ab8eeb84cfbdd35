use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Experience>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.items[i]
    }

    /// Uniform indices with replacement; `None` until `batch` items are stored.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some((0..batch).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Option<Vec<Experience>> {
        self.sample_indices(batch, rng)
            .map(|idx| idx.into_iter().map(|i| self.items[i].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn exp(r: f64) -> Experience {
        Experience {
            state: vec![r],
            action: 0,
            reward: r,
            next_state: vec![r],
            done: true,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(exp(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| buf.get(i).reward).collect();
        assert_eq!(rewards, [3.0, 4.0, 2.0]);
    }

    #[test]
    fn no_sampling_below_batch_size() {
        let mut buf = ReplayBuffer::new(10);
        buf.push(exp(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(2, &mut rng).is_none());
        assert_eq!(buf.sample(1, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn uniform_sampler_hits_every_slot() {
        let mut buf = ReplayBuffer::new(20);
        for i in 0..20 {
            buf.push(exp(i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 100_000;
        let mut hits = [0usize; 20];
        for _ in 0..draws / 20 {
            for i in buf.sample_indices(20, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        let p: f64 = 1.0 / 20.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - draws as f64 * p).abs() < 3.0 * sigma + 1.0, "{hits:?}");
        }
    }
}
