//! Prioritized experience replay: sum-tree storage, stratified proportional
//! sampling, importance-sampling weights with beta annealing, and priority
//! updates keyed by TD error.

use serde::{Deserialize, Serialize};

use crate::observe::Observation;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Degree of prioritization `alpha` in `p = (|delta| + eps)^alpha`.
    pub alpha: f64,
    /// Floor constant keeping priorities nonzero.
    pub eps: f64,
    /// Initial importance-sampling exponent.
    pub beta0: f64,
    /// Steps over which beta anneals linearly to 1.0.
    pub beta_horizon: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 2_000_000,
            alpha: 0.6,
            eps: 1e-5,
            beta0: 0.4,
            beta_horizon: 5_000_000,
        }
    }
}

/// Linear anneal from `beta0` to 1.0 over the configured horizon.
pub fn anneal_beta(global_step: u64, cfg: &ReplayConfig) -> f64 {
    if cfg.beta_horizon == 0 {
        return 1.0;
    }
    let frac = (global_step as f64 / cfg.beta_horizon as f64).min(1.0);
    cfg.beta0 + (1.0 - cfg.beta0) * frac
}

/// One stored experience record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: u8,
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
}

/// Binary sum tree over slot priorities; leaves start at `capacity - 1`.
#[derive(Debug, Clone)]
struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity - 1],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[0]
    }

    fn set(&mut self, slot: usize, priority: f64) {
        let mut i = slot + self.capacity - 1;
        let delta = priority - self.nodes[i];
        self.nodes[i] = priority;
        while i > 0 {
            i = (i - 1) / 2;
            self.nodes[i] += delta;
        }
    }

    fn get(&self, slot: usize) -> f64 {
        self.nodes[slot + self.capacity - 1]
    }

    /// Descend to the leaf owning prefix mass `s`.
    fn retrieve(&self, mut s: f64) -> usize {
        let mut i = 0usize;
        while 2 * i + 1 < self.nodes.len() {
            let left = 2 * i + 1;
            if s <= self.nodes[left] || self.nodes[left + 1] == 0.0 {
                i = left;
            } else {
                s -= self.nodes[left];
                i = left + 1;
            }
        }
        i - (self.capacity - 1)
    }
}

/// Handle to a sampled slot; survives slot reuse checks via a generation tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef {
    pub slot: usize,
    pub generation: u64,
}

#[derive(Debug)]
pub struct PerBuffer {
    cfg: ReplayConfig,
    tree: SumTree,
    data: Vec<Option<Transition>>,
    generation: Vec<u64>,
    write: usize,
    count: usize,
    max_priority: f64,
    /// Priority updates that arrived after their slot was overwritten.
    pub stale_updates: u64,
}

impl PerBuffer {
    pub fn new(cfg: ReplayConfig) -> Self {
        let capacity = cfg.capacity.max(1);
        Self {
            tree: SumTree::new(capacity),
            data: (0..capacity).map(|_| None).collect(),
            generation: vec![0; capacity],
            write: 0,
            count: 0,
            max_priority: 1.0,
            stale_updates: 0,
            cfg,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.cfg
    }

    /// Insert at the running max priority (1.0 when empty), overwriting the
    /// oldest slot when full.
    pub fn push(&mut self, t: Transition) {
        let slot = self.write;
        self.data[slot] = Some(t);
        self.generation[slot] += 1;
        self.tree.set(slot, self.max_priority);
        self.write = (self.write + 1) % self.capacity();
        self.count = (self.count + 1).min(self.capacity());
    }

    /// Drop all stored experience (curriculum stage graduation).
    pub fn clear(&mut self) {
        let capacity = self.capacity();
        self.tree = SumTree::new(capacity);
        for (d, g) in self.data.iter_mut().zip(self.generation.iter_mut()) {
            *d = None;
            *g += 1;
        }
        self.write = 0;
        self.count = 0;
        self.max_priority = 1.0;
    }

    pub fn priority(&self, slot: usize) -> f64 {
        self.tree.get(slot)
    }

    /// Stratified proportional sample of `m` transitions with normalized
    /// importance-sampling weights.
    pub fn sample<R: rand::Rng>(
        &self,
        m: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<(Vec<&Transition>, Vec<f64>, Vec<SlotRef>), ReplayError> {
        if self.count < m {
            return Err(ReplayError::NotEnough {
                have: self.count,
                need: m,
            });
        }
        let total = self.tree.total();
        let seg = total / m as f64;
        let mut batch = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        let mut refs = Vec::with_capacity(m);
        for k in 0..m {
            let s = (k as f64 + rng.gen::<f64>()) * seg;
            let slot = self.tree.retrieve(s.min(total * (1.0 - 1e-12)));
            let t = self.data[slot]
                .as_ref()
                .expect("sampled slot holds a transition");
            let p = self.tree.get(slot) / total;
            weights.push((1.0 / (self.count as f64 * p)).powf(beta));
            batch.push(t);
            refs.push(SlotRef {
                slot,
                generation: self.generation[slot],
            });
        }
        let w_max = weights.iter().cloned().fold(f64::MIN, f64::max);
        for w in weights.iter_mut() {
            *w /= w_max;
        }
        Ok((batch, weights, refs))
    }

    /// Set `p = (|delta| + eps)^alpha` at each sampled slot; updates aimed
    /// at since-overwritten slots are skipped and counted.
    pub fn update_priorities(&mut self, refs: &[SlotRef], td_errors: &[f64]) {
        for (r, &delta) in refs.iter().zip(td_errors) {
            if self.generation[r.slot] != r.generation {
                self.stale_updates += 1;
                continue;
            }
            let p = (delta.abs() + self.cfg.eps).powf(self.cfg.alpha);
            self.tree.set(r.slot, p);
            if p > self.max_priority {
                self.max_priority = p;
            }
        }
    }

    /// Current total priority mass (test hook).
    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    /// Verify every internal node equals the sum of its children.
    pub fn check_tree_consistency(&self, rel_tol: f64) -> bool {
        let nodes = &self.tree.nodes;
        for i in 0..self.capacity() - 1 {
            let sum = nodes[2 * i + 1] + nodes[2 * i + 2];
            let denom = nodes[i].abs().max(1.0);
            if ((nodes[i] - sum) / denom).abs() > rel_tol {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("buffer holds {have} transitions, need {need}")]
    NotEnough { have: usize, need: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dummy(v: f32) -> Transition {
        Transition {
            obs: Observation {
                spatial: vec![v],
                vector: vec![v],
                fov_side: 1,
            },
            action: 0,
            reward: v,
            next_obs: Observation {
                spatial: vec![v],
                vector: vec![v],
                fov_side: 1,
            },
            done: false,
        }
    }

    fn small(capacity: usize) -> PerBuffer {
        PerBuffer::new(ReplayConfig {
            capacity,
            ..ReplayConfig::default()
        })
    }

    #[test]
    fn first_push_gets_priority_one() {
        let mut b = small(8);
        b.push(dummy(0.0));
        assert_eq!(b.len(), 1);
        assert_eq!(b.priority(0), 1.0);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = small(4);
        for i in 0..6 {
            b.push(dummy(i as f32));
        }
        assert_eq!(b.len(), 4);
        // slots 0 and 1 were overwritten by 4 and 5
        assert_eq!(b.data[0].as_ref().unwrap().reward, 4.0);
        assert_eq!(b.data[1].as_ref().unwrap().reward, 5.0);
    }

    #[test]
    fn push_adopts_running_max_priority() {
        let mut b = small(8);
        b.push(dummy(0.0));
        let (_, _, refs) = b.sample(1, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // force a known priority: (|delta| + eps)^alpha = 5.0
        let delta = 5f64.powf(1.0 / b.cfg.alpha) - b.cfg.eps;
        b.update_priorities(&refs, &[delta]);
        assert!((b.priority(0) - 5.0).abs() < 1e-9);
        b.push(dummy(1.0));
        assert!((b.priority(1) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_td_error_keeps_nonzero_floor() {
        let mut b = small(8);
        b.push(dummy(0.0));
        b.update_priorities(
            &[SlotRef {
                slot: 0,
                generation: 1,
            }],
            &[0.0],
        );
        let expect = (1e-5f64).powf(0.6);
        assert!(b.priority(0) > 0.0);
        assert!((b.priority(0) - expect).abs() < 1e-12);
    }

    #[test]
    fn unit_td_error_closed_form() {
        let mut b = small(8);
        b.push(dummy(0.0));
        b.update_priorities(
            &[SlotRef {
                slot: 0,
                generation: 1,
            }],
            &[1.0],
        );
        assert!((b.priority(0) - (1.0 + 1e-5f64).powf(0.6)).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_is_linear() {
        let mut b = PerBuffer::new(ReplayConfig {
            capacity: 8,
            alpha: 1.0,
            ..ReplayConfig::default()
        });
        b.push(dummy(0.0));
        b.push(dummy(1.0));
        let refs = [
            SlotRef { slot: 0, generation: 1 },
            SlotRef { slot: 1, generation: 1 },
        ];
        b.update_priorities(&refs, &[1.0, 2.0]);
        assert!((b.priority(1) / b.priority(0) - 2.0).abs() < 1e-4);
    }

    #[test]
    fn stale_updates_are_skipped() {
        let mut b = small(2);
        b.push(dummy(0.0));
        let stale = SlotRef { slot: 0, generation: 1 };
        b.push(dummy(1.0));
        b.push(dummy(2.0)); // overwrites slot 0
        b.update_priorities(&[stale], &[9.0]);
        assert_eq!(b.stale_updates, 1);
        assert_eq!(b.priority(0), 1.0);
    }

    #[test]
    fn uniform_priorities_give_unit_weights() {
        let mut b = small(64);
        for i in 0..64 {
            b.push(dummy(i as f32));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, w, _) = b.sample(16, 0.7, &mut rng).unwrap();
        for wi in w {
            assert_eq!(wi, 1.0);
        }
    }

    #[test]
    fn beta_zero_gives_unit_weights_regardless() {
        let mut b = small(8);
        for i in 0..4 {
            b.push(dummy(i as f32));
        }
        b.update_priorities(
            &[
                SlotRef { slot: 0, generation: 1 },
                SlotRef { slot: 1, generation: 1 },
            ],
            &[10.0, 0.1],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, w, _) = b.sample(4, 0.0, &mut rng).unwrap();
        for wi in w {
            assert_eq!(wi, 1.0);
        }
    }

    #[test]
    fn sample_needs_enough_transitions() {
        let mut b = small(8);
        b.push(dummy(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(b.sample(2, 0.4, &mut rng).is_err());
    }

    #[test]
    fn sampling_frequencies_match_priorities() {
        let mut b = PerBuffer::new(ReplayConfig {
            capacity: 2,
            alpha: 1.0,
            eps: 0.0,
            ..ReplayConfig::default()
        });
        b.push(dummy(0.0));
        b.push(dummy(1.0));
        b.update_priorities(
            &[
                SlotRef { slot: 0, generation: 1 },
                SlotRef { slot: 1, generation: 1 },
            ],
            &[1.0, 3.0],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0u64; 2];
        let draws = 100_000usize;
        for _ in 0..draws / 2 {
            let (_, _, refs) = b.sample(2, 0.4, &mut rng).unwrap();
            for r in refs {
                counts[r.slot] += 1;
            }
        }
        let f0 = counts[0] as f64 / draws as f64;
        let f1 = counts[1] as f64 / draws as f64;
        assert!((f0 - 0.25).abs() < 0.01, "f0 = {f0}");
        assert!((f1 - 0.75).abs() < 0.01, "f1 = {f1}");
    }

    #[test]
    fn beta_schedule() {
        let cfg = ReplayConfig::default();
        assert_eq!(anneal_beta(0, &cfg), 0.4);
        assert_eq!(anneal_beta(5_000_000, &cfg), 1.0);
        assert_eq!(anneal_beta(99_000_000, &cfg), 1.0);
        assert!((anneal_beta(2_500_000, &cfg) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn weights_in_unit_interval() {
        let mut b = small(128);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..128 {
            b.push(dummy(i as f32));
        }
        for round in 0..50 {
            let (_, w, refs) = b.sample(32, 0.6, &mut rng).unwrap();
            for wi in &w {
                assert!(*wi > 0.0 && *wi <= 1.0);
            }
            let deltas: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() * (round + 1) as f64).collect();
            let _ = i32::from(refs.len() == deltas.len());
            b.update_priorities(&refs, &deltas);
        }
    }

    /// Fuzz push/update interleaving against a flat-array reference.
    #[test]
    fn sum_tree_consistency_fuzz() {
        let mut b = small(512);
        let mut flat = vec![0.0f64; 512];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut max_p = 1.0f64;
        for op in 0..200_000u64 {
            if b.is_empty() || rng.gen_bool(0.4) {
                let slot = b.write;
                b.push(dummy(op as f32));
                flat[slot] = max_p;
            } else {
                let slot = rng.gen_range(0..b.len());
                let delta: f64 = rng.gen::<f64>() * 10.0;
                let gen = b.generation[slot];
                b.update_priorities(&[SlotRef { slot, generation: gen }], &[delta]);
                let p = (delta + b.cfg.eps).powf(b.cfg.alpha);
                flat[slot] = p;
                max_p = max_p.max(p);
            }
        }
        let flat_total: f64 = flat.iter().sum();
        assert!(
            ((b.total_priority() - flat_total) / flat_total).abs() < 1e-6,
            "tree {} vs flat {flat_total}",
            b.total_priority()
        );
        assert!(b.check_tree_consistency(1e-6));
        for slot in 0..b.len() {
            assert!((b.priority(slot) - flat[slot]).abs() < 1e-9);
        }
    }
}
