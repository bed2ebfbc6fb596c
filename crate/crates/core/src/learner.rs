//! Double-DQN learner: epsilon schedule, target computation, and the full
//! sample -> gradients -> optimizer -> target-sync -> priority-refresh step.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{
    adamw_step, backward, clip_gradients, encode_batch, forward, forward_q, huber_loss_and_grad,
    NetError, NetworkParams, OptimizerState, Scalar,
};
use crate::replay::{anneal_beta, PerBuffer, ReplayError, Transition};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub discount: f64,
    pub tau: f64,
    pub eps_start: f64,
    pub eps_final: f64,
    /// Env steps over which epsilon anneals linearly.
    pub eps_horizon: u64,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub huber_delta: f64,
    /// Transitions required in the buffer before learning begins.
    pub learning_starts: usize,
    /// Learner steps between weight publications to actors.
    pub publish_every: u64,
    /// Exploration level the schedule restarts from after a curriculum stage
    /// advance (capped at `eps_start`). Full restarts refill the buffer with
    /// near-random data and can wipe out the skill being transferred; a
    /// moderate restart keeps behaviour close to the incoming policy.
    pub eps_restart: f64,
    /// Multiplier applied to the optimizer learning rate at each stage
    /// advance; later stages fine-tune instead of relearning.
    pub lr_stage_mult: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            tau: 0.005,
            eps_start: 1.0,
            eps_final: 0.1,
            eps_horizon: 5_000_000,
            batch_size: 64,
            max_grad_norm: 1.0,
            huber_delta: 1.0,
            learning_starts: 5000,
            publish_every: 100,
            eps_restart: 1.0,
            lr_stage_mult: 1.0,
        }
    }
}

/// Schedule offset such that `epsilon(cfg, offset)` equals `eps_restart`.
pub fn epsilon_restart_offset(cfg: &LearnerConfig) -> u64 {
    let span = cfg.eps_start - cfg.eps_final;
    if span <= 0.0 || cfg.eps_restart >= cfg.eps_start {
        return 0;
    }
    if cfg.eps_restart <= cfg.eps_final {
        return cfg.eps_horizon;
    }
    (cfg.eps_horizon as f64 * (cfg.eps_start - cfg.eps_restart) / span) as u64
}

/// Linearly annealed exploration rate at a given env step.
pub fn epsilon(cfg: &LearnerConfig, env_step: u64) -> f64 {
    if env_step >= cfg.eps_horizon {
        return cfg.eps_final;
    }
    let frac = env_step as f64 / cfg.eps_horizon as f64;
    cfg.eps_start + (cfg.eps_final - cfg.eps_start) * frac
}

/// Epsilon-greedy pick over one row of Q-values; greedy ties break on the
/// lowest action index.
pub fn select_action<F: Scalar, R: Rng>(q_row: &[F], eps: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < eps {
        return rng.gen_range(0..q_row.len());
    }
    greedy_action(q_row)
}

pub fn greedy_action<F: Scalar>(q_row: &[F]) -> usize {
    let mut best = 0;
    for (i, &q) in q_row.iter().enumerate().skip(1) {
        if q > q_row[best] {
            best = i;
        }
    }
    best
}

/// Double-DQN targets: `y = r + gamma * Q_target(o', argmax_a Q_online(o', a))`,
/// and exactly `y = r` on terminal transitions.
pub fn ddqn_targets<F: Scalar>(
    online: &NetworkParams<F>,
    target: &NetworkParams<F>,
    batch: &[&Transition],
    discount: f64,
) -> Result<Vec<F>, NetError> {
    let next_obs: Vec<_> = batch.iter().map(|t| &t.next_obs).collect();
    let (s, v) = encode_batch::<F>(&next_obs, &online.cfg)?;
    let q_online = forward_q(online, &s, &v)?;
    let q_target = forward_q(target, &s, &v)?;
    let gamma = F::from_f64(discount);
    let mut out = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        let r = F::from_f64(t.reward as f64);
        if t.done {
            out.push(r);
        } else {
            let a = greedy_action(q_online.row(i).as_slice().expect("row-major"));
            out.push(r + gamma * q_target[[i, a]]);
        }
    }
    Ok(out)
}

/// Diagnostics from one learner step.
#[derive(Debug, Clone, Copy)]
pub struct LearnStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_abs_td: f64,
    pub beta: f64,
}

/// One full DDQN update against the prioritized buffer. `global_step` is the
/// learner's own step counter (used for beta annealing); the caller
/// increments it on success.
#[allow(clippy::too_many_arguments)]
pub fn learn_step<F: Scalar, R: Rng>(
    online: &mut NetworkParams<F>,
    target: &mut NetworkParams<F>,
    opt: &mut OptimizerState<F>,
    buffer: &mut PerBuffer,
    cfg: &LearnerConfig,
    global_step: u64,
    rng: &mut R,
) -> Result<LearnStats, LearnError> {
    let beta = anneal_beta(global_step, buffer.config());
    let (batch, weights, refs) = buffer.sample(cfg.batch_size, beta, rng)?;

    let targets = ddqn_targets(online, target, &batch, cfg.discount)?;

    let obs: Vec<_> = batch.iter().map(|t| &t.obs).collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.action as usize).collect();
    let (s, v) = encode_batch::<F>(&obs, &online.cfg)?;
    let (q, cache) = forward(online, &s, &v)?;

    let q_taken: Vec<F> = actions.iter().enumerate().map(|(i, &a)| q[[i, a]]).collect();
    let w: Vec<F> = weights.iter().map(|&x| F::from_f64(x)).collect();
    let (loss, grad_q) =
        huber_loss_and_grad(&q_taken, &targets, &w, F::from_f64(cfg.huber_delta));

    let mut d_q = Array2::zeros(q.raw_dim());
    for (i, &a) in actions.iter().enumerate() {
        d_q[[i, a]] = grad_q[i];
    }
    let mut grads = backward(online, &cache, &d_q);
    let grad_norm = clip_gradients(&mut grads, F::from_f64(cfg.max_grad_norm));
    adamw_step(online, &grads, opt);
    polyak(target, online, cfg.tau);

    let td: Vec<f64> = q_taken
        .iter()
        .zip(&targets)
        .map(|(&p, &y)| (p - y).to_f64_())
        .collect();
    buffer.update_priorities(&refs, &td);

    let mean_abs_td = td.iter().map(|d| d.abs()).sum::<f64>() / td.len() as f64;
    Ok(LearnStats {
        loss: loss.to_f64_(),
        grad_norm: grad_norm.to_f64_(),
        mean_abs_td,
        beta,
    })
}

fn polyak<F: Scalar>(target: &mut NetworkParams<F>, online: &NetworkParams<F>, tau: f64) {
    crate::neural::polyak_update(target, online, F::from_f64(tau));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{init_network, AdamWConfig, NetConfig};
    use crate::observe::Observation;
    use crate::replay::ReplayConfig;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            conv_filters: vec![4],
            vector_hidden: 4,
            merge_hidden: 8,
            input_channels: 2,
            fov_side: 5,
            vector_len: 3,
            n_actions: 5,
            goal_scale: 1.0,
            waypoint_scale: 1.0,
        }
    }

    fn random_obs(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Observation {
        Observation {
            spatial: (0..cfg.spatial_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
            vector: (0..cfg.vector_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            fov_side: cfg.fov_side,
        }
    }

    fn random_transition(cfg: &NetConfig, done: bool, rng: &mut ChaCha8Rng) -> Transition {
        Transition {
            obs: random_obs(cfg, rng),
            action: rng.gen_range(0..cfg.n_actions) as u8,
            reward: rng.gen_range(-1.0..1.0),
            next_obs: random_obs(cfg, rng),
            done,
        }
    }

    #[test]
    fn epsilon_schedule_endpoints_and_midpoint() {
        let cfg = LearnerConfig::default();
        assert_eq!(epsilon(&cfg, 0), 1.0);
        assert_relative_eq!(epsilon(&cfg, 2_500_000), 0.55);
        assert_eq!(epsilon(&cfg, 5_000_000), 0.1);
        assert_eq!(epsilon(&cfg, 50_000_000), 0.1);
    }

    #[test]
    fn greedy_breaks_ties_toward_lower_index() {
        assert_eq!(greedy_action(&[1.0f64, 1.0, 0.5]), 0);
        assert_eq!(greedy_action(&[0.0f64, 2.0, 2.0]), 1);
    }

    #[test]
    fn select_action_is_greedy_at_zero_eps_and_uniformish_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [0.1f64, 0.9, 0.2, 0.0, 0.3];
        for _ in 0..50 {
            assert_eq!(select_action(&q, 0.0, &mut rng), 1);
        }
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[select_action(&q, 1.0, &mut rng)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 600.0, "{counts:?}");
        }
    }

    #[test]
    fn terminal_target_is_reward_bitwise() {
        let cfg = tiny_cfg();
        let online = init_network::<f32>(&cfg, 1);
        let target = init_network::<f32>(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transition(&cfg, true, &mut rng);
        let ys = ddqn_targets(&online, &target, &[&t], 0.99).unwrap();
        assert_eq!(ys[0].to_bits(), t.reward.to_bits());
    }

    #[test]
    fn nonterminal_target_matches_manual_double_dqn() {
        let cfg = tiny_cfg();
        let online = init_network::<f64>(&cfg, 1);
        let target = init_network::<f64>(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_transition(&cfg, false, &mut rng);
        let gamma = 0.97;
        let ys = ddqn_targets(&online, &target, &[&t], gamma).unwrap();

        let (s, v) = encode_batch::<f64>(&[&t.next_obs], &cfg).unwrap();
        let qo = forward_q(&online, &s, &v).unwrap();
        let qt = forward_q(&target, &s, &v).unwrap();
        let a = greedy_action(qo.row(0).as_slice().unwrap());
        assert_relative_eq!(ys[0], t.reward as f64 + gamma * qt[[0, a]], epsilon = 1e-12);
    }

    #[test]
    fn zero_discount_targets_equal_rewards() {
        let cfg = tiny_cfg();
        let online = init_network::<f64>(&cfg, 1);
        let target = init_network::<f64>(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<_> = (0..8).map(|i| random_transition(&cfg, i % 2 == 0, &mut rng)).collect();
        let refs: Vec<_> = batch.iter().collect();
        let ys = ddqn_targets(&online, &target, &refs, 0.0).unwrap();
        for (y, t) in ys.iter().zip(&batch) {
            assert_relative_eq!(*y, t.reward as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn learn_step_reduces_loss_on_fixed_batch() {
        // with a tiny buffer of identical targets, repeated steps must drive
        // the weighted Huber loss down
        let cfg = tiny_cfg();
        let mut online = init_network::<f64>(&cfg, 10);
        let mut target = online.clone();
        let mut opt = OptimizerState::new(
            &online,
            AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        let mut buffer = PerBuffer::new(ReplayConfig {
            capacity: 64,
            ..ReplayConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..32 {
            buffer.push(random_transition(&cfg, true, &mut rng));
        }
        let lcfg = LearnerConfig {
            batch_size: 32,
            tau: 0.0,
            ..LearnerConfig::default()
        };
        let first = learn_step(&mut online, &mut target, &mut opt, &mut buffer, &lcfg, 0, &mut rng)
            .unwrap();
        let mut last = first;
        for step in 1..200 {
            last = learn_step(&mut online, &mut target, &mut opt, &mut buffer, &lcfg, step, &mut rng)
                .unwrap();
        }
        assert!(
            last.loss < first.loss * 0.5,
            "loss did not drop: {} -> {}",
            first.loss,
            last.loss
        );
    }

    #[test]
    fn learn_step_moves_target_toward_online() {
        let cfg = tiny_cfg();
        let mut online = init_network::<f64>(&cfg, 20);
        let mut target = init_network::<f64>(&cfg, 21);
        let mut opt = OptimizerState::new(&online, AdamWConfig::default());
        let mut buffer = PerBuffer::new(ReplayConfig {
            capacity: 16,
            ..ReplayConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..8 {
            buffer.push(random_transition(&cfg, false, &mut rng));
        }
        let lcfg = LearnerConfig {
            batch_size: 8,
            ..LearnerConfig::default()
        };
        let dist = |a: &NetworkParams<f64>, b: &NetworkParams<f64>| {
            a.layers
                .iter()
                .zip(&b.layers)
                .map(|(x, y)| {
                    x.w.iter().zip(y.w.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };
        let before = dist(&target, &online);
        learn_step(&mut online, &mut target, &mut opt, &mut buffer, &lcfg, 0, &mut rng).unwrap();
        let after = dist(&target, &online);
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn learn_step_requires_enough_transitions() {
        let cfg = tiny_cfg();
        let mut online = init_network::<f64>(&cfg, 1);
        let mut target = online.clone();
        let mut opt = OptimizerState::new(&online, AdamWConfig::default());
        let mut buffer = PerBuffer::new(ReplayConfig {
            capacity: 16,
            ..ReplayConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lcfg = LearnerConfig {
            batch_size: 8,
            ..LearnerConfig::default()
        };
        let e = learn_step(&mut online, &mut target, &mut opt, &mut buffer, &lcfg, 0, &mut rng);
        assert!(matches!(e, Err(LearnError::Replay(ReplayError::NotEnough { .. }))));
    }

    #[test]
    fn learn_step_refreshes_priorities() {
        let cfg = tiny_cfg();
        let mut online = init_network::<f64>(&cfg, 30);
        let mut target = init_network::<f64>(&cfg, 31);
        let mut opt = OptimizerState::new(&online, AdamWConfig::default());
        let mut buffer = PerBuffer::new(ReplayConfig {
            capacity: 8,
            ..ReplayConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..8 {
            buffer.push(random_transition(&cfg, false, &mut rng));
        }
        let total_before = buffer.total_priority();
        let lcfg = LearnerConfig {
            batch_size: 8,
            ..LearnerConfig::default()
        };
        learn_step(&mut online, &mut target, &mut opt, &mut buffer, &lcfg, 0, &mut rng).unwrap();
        // all slots were pushed at max priority 1.0; real TD errors are small
        assert!(buffer.total_priority() < total_before);
        assert!(buffer.check_tree_consistency(1e-9));
    }
}
