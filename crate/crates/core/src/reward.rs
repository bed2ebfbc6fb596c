//! Per-agent reward assembly: sparse goal reward, time and collision
//! penalties, potential-based shaping on the A* distance, the path-conflict
//! penalty, and the signal-quality penalty.

use crate::pathfind::UNREACHABLE;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub goal: f64,
    pub time_step: f64,
    pub collision: f64,
    /// Scale of the shaping potential `phi(s) = -pbrs_factor * d_astar(s)`.
    pub pbrs_factor: f64,
    pub path_conflict: f64,
    /// Negative factor on `(1 - sinr_norm)`.
    pub network_factor: f64,
    pub discount: f64,
    /// Penalize both parties of a resolved conflict instead of only the
    /// demoted agent.
    pub penalize_both: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            goal: 2.0,
            time_step: -0.01,
            collision: -1.0,
            pbrs_factor: 0.23,
            path_conflict: -1.0,
            network_factor: -0.4,
            discount: 0.99,
            penalize_both: false,
        }
    }
}

/// Everything one agent's reward depends on for a single transition.
#[derive(Debug, Clone, Copy)]
pub struct RewardContext {
    /// Agent moved from off-goal onto its goal this step.
    pub reached_goal: bool,
    /// Agent was demoted in conflict resolution (or bumped a wall).
    pub collided: bool,
    /// New position lies on a higher-priority agent's communicated path.
    pub path_conflict: bool,
    /// A* distance to goal before the step.
    pub dist_before: u32,
    /// A* distance to goal after the step.
    pub dist_after: u32,
    /// Normalized SINR at the new position.
    pub sinr_norm: f64,
}

fn potential(dist: u32, factor: f64) -> Option<f64> {
    if dist == UNREACHABLE {
        None
    } else {
        Some(-factor * dist as f64)
    }
}

/// Sum the reward components for one transition.
pub fn compute_reward(ctx: &RewardContext, cfg: &RewardConfig) -> f64 {
    let mut r = cfg.time_step;
    if ctx.reached_goal {
        r += cfg.goal;
    }
    if ctx.collided {
        r += cfg.collision;
    }
    if ctx.path_conflict {
        r += cfg.path_conflict;
    }
    match (
        potential(ctx.dist_before, cfg.pbrs_factor),
        potential(ctx.dist_after, cfg.pbrs_factor),
    ) {
        (Some(before), Some(after)) => r += cfg.discount * after - before,
        _ => log::warn!("infinite A* distance, shaping term skipped"),
    }
    r += (1.0 - ctx.sinr_norm) * cfg.network_factor;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> RewardContext {
        RewardContext {
            reached_goal: false,
            collided: false,
            path_conflict: false,
            dist_before: 0,
            dist_after: 0,
            sinr_norm: 1.0,
        }
    }

    #[test]
    fn goal_step_from_distance_one() {
        let r = compute_reward(
            &RewardContext {
                reached_goal: true,
                dist_before: 1,
                dist_after: 0,
                ..ctx()
            },
            &RewardConfig::default(),
        );
        // 2.0 - 0.01 + (0.99 * 0 - (-0.23)) = 2.22
        assert!((r - 2.22).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn stay_in_place_shaping() {
        for d in [0u32, 3, 10] {
            let r = compute_reward(
                &RewardContext {
                    dist_before: d,
                    dist_after: d,
                    ..ctx()
                },
                &RewardConfig::default(),
            );
            let expect = -0.01 + 0.0023 * d as f64;
            assert!((r - expect).abs() < 1e-12, "d={d}: {r} vs {expect}");
        }
    }

    #[test]
    fn blackout_adds_full_network_penalty() {
        let r = compute_reward(
            &RewardContext {
                dist_before: 4,
                dist_after: 4,
                sinr_norm: 0.0,
                ..ctx()
            },
            &RewardConfig::default(),
        );
        let expect = -0.01 + 0.0023 * 4.0 - 0.4;
        assert!((r - expect).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn network_penalty_is_bounded() {
        let cfg = RewardConfig::default();
        for sinr_norm in [0.0, 0.25, 0.5, 1.0] {
            let term = (1.0 - sinr_norm) * cfg.network_factor;
            assert!(term >= cfg.network_factor && term <= 0.0);
        }
    }

    #[test]
    fn infinite_distance_skips_shaping() {
        let r = compute_reward(
            &RewardContext {
                dist_before: UNREACHABLE,
                dist_after: UNREACHABLE,
                ..ctx()
            },
            &RewardConfig::default(),
        );
        assert!((r - -0.01).abs() < 1e-12);
    }

    #[test]
    fn shaping_telescopes_over_random_trajectories() {
        use rand::Rng;
        use rand::SeedableRng;
        let cfg = RewardConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            // random walk over distances, ending at the goal
            let mut dists = vec![rng.gen_range(1..20u32)];
            while *dists.last().unwrap() != 0 {
                let d = *dists.last().unwrap() as i64 + rng.gen_range(-1..=1i64);
                dists.push(d.clamp(0, 30) as u32);
            }
            let mut discounted_sum = 0.0;
            let mut g = 1.0;
            for w in dists.windows(2) {
                let phi_before = -cfg.pbrs_factor * w[0] as f64;
                let phi_after = -cfg.pbrs_factor * w[1] as f64;
                discounted_sum += g * (cfg.discount * phi_after - phi_before);
                g *= cfg.discount;
            }
            let phi0 = -cfg.pbrs_factor * dists[0] as f64;
            let phi_t = -cfg.pbrs_factor * *dists.last().unwrap() as f64;
            let expect = g * phi_t - phi0;
            assert!(
                (discounted_sum - expect).abs() < 1e-9,
                "telescoping violated: {discounted_sum} vs {expect}"
            );
        }
    }
}
