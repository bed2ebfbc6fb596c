//! Dynamic priorities and the asymmetric 4-channel spatial observation.
//!
//! An agent sees the positions of every neighbor in its field of view but
//! only the communicated path intentions of *higher-priority* agents. The
//! asymmetry breaks mirrored observations between agents running the same
//! policy.

use crate::gridworld::{Cell, EpisodeState};
use crate::pathfind::{self, Path};
use crate::radio::RadioMap;

/// Priority of one agent: lower A* distance ranks higher, agents at their
/// goal are demoted below all active agents, ties break by agent id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Priority {
    /// Current shortest-path distance to goal ([`UNREACHABLE`] if none).
    pub value: u32,
    /// Agent sits on its goal and yields to everyone.
    pub demoted: bool,
    /// Strict total order index; 0 is the highest priority.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsConfig {
    /// Field-of-view radius; the window is `(2r+1) x (2r+1)`.
    pub fov_r: usize,
    /// Communication range as a multiple of `fov_r`.
    pub comm_range_mult: f64,
    /// Future path cells a higher-priority agent communicates.
    pub comm_steps: usize,
    /// A* waypoints in the strategic feature vector.
    pub waypoints_k: usize,
    /// Suppress intention sharing from agents currently in blackout.
    pub blackout_blocks_comm: bool,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            fov_r: 7,
            comm_range_mult: 2.0,
            comm_steps: 5,
            waypoints_k: 5,
            blackout_blocks_comm: false,
        }
    }
}

impl ObsConfig {
    pub fn fov_side(&self) -> usize {
        2 * self.fov_r + 1
    }

    /// Communication range in cells (Chebyshev distance).
    pub fn comm_range(&self) -> f64 {
        self.comm_range_mult * self.fov_r as f64
    }

    /// Length of the strategic feature vector.
    pub fn vector_len(&self) -> usize {
        3 + 2 * self.waypoints_k
    }
}

/// A local observation: 4 stacked `V x V` channels (static obstacles, other
/// agents, communicated intentions, normalized SINR) plus the strategic
/// feature vector `(goal offset, at-goal flag, k waypoint offsets)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observation {
    /// Channel-major `4 * V * V` values.
    pub spatial: Vec<f32>,
    pub vector: Vec<f32>,
    pub fov_side: usize,
}

impl Observation {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.fov_side * self.fov_side;
        &self.spatial[c * n..(c + 1) * n]
    }
}

/// Strict total priority order over agents.
pub fn compute_priorities(distances: &[u32], at_goal: &[bool]) -> Vec<Priority> {
    let n = distances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (at_goal[i], distances[i], i));
    let mut out = vec![
        Priority {
            value: 0,
            demoted: false,
            rank: 0
        };
        n
    ];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = Priority {
            value: distances[i],
            demoted: at_goal[i],
            rank,
        };
    }
    out
}

/// The next `k` cells of a path after its current head; what the owning
/// agent shares with lower-priority neighbors.
pub fn communicated_cells(path: &Path, k: usize) -> Vec<Cell> {
    path.cells.iter().skip(1).take(k).copied().collect()
}

/// Construct agent `agent_id`'s observation from the current snapshot.
pub fn build_observation(
    state: &EpisodeState,
    agent_id: usize,
    radio: &RadioMap,
    paths: &[Path],
    priorities: &[Priority],
    cfg: &ObsConfig,
) -> Observation {
    let v = cfg.fov_side();
    let r = cfg.fov_r as i32;
    let area = v * v;
    let mut spatial = vec![0f32; 4 * area];
    let me = &state.agents[agent_id];
    let (cx, cy) = me.pos;

    let local_idx = |cell: Cell| -> Option<usize> {
        let dx = cell.0 - cx + r;
        let dy = cell.1 - cy + r;
        if dx < 0 || dy < 0 || dx >= v as i32 || dy >= v as i32 {
            None
        } else {
            Some(dy as usize * v + dx as usize)
        }
    };

    // channel 0: static obstacles (out-of-map counts as blocked)
    // channel 3: normalized SINR on traversable cells
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx + dx, cy + dy);
            let li = (dy + r) as usize * v + (dx + r) as usize;
            if state.map.is_passable(x, y) {
                spatial[3 * area + li] = radio.sinr_norm_at((x, y)) as f32;
            } else {
                spatial[li] = 1.0;
            }
        }
    }

    let my_rank = priorities[agent_id].rank;
    let comm_range = cfg.comm_range();
    for other in &state.agents {
        if other.id == agent_id {
            continue;
        }
        // channel 1: every other agent inside the FoV
        if let Some(li) = local_idx(other.pos) {
            spatial[area + li] = 1.0;
        }
        // channel 2: intentions of strictly higher-priority agents in range
        if priorities[other.id].rank < my_rank {
            let cheb = (other.pos.0 - cx).abs().max((other.pos.1 - cy).abs());
            if (cheb as f64) <= comm_range
                && !(cfg.blackout_blocks_comm && radio.is_blackout_at(other.pos))
            {
                for cell in communicated_cells(&paths[other.id], cfg.comm_steps) {
                    if let Some(li) = local_idx(cell) {
                        spatial[2 * area + li] = 1.0;
                    }
                }
            }
        }
    }

    let mut vector = Vec::with_capacity(cfg.vector_len());
    vector.push((me.goal.0 - cx) as f32);
    vector.push((me.goal.1 - cy) as f32);
    vector.push(if me.at_goal { 1.0 } else { 0.0 });
    let waypoints = pathfind::next_waypoints(&paths[agent_id], me.pos, cfg.waypoints_k)
        .expect("agent paths are never empty");
    for (dx, dy) in waypoints {
        vector.push(dx as f32);
        vector.push(dy as f32);
    }

    Observation {
        spatial,
        vector,
        fov_side: v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{AgentState, EnvConfig, GridMap, Sim};
    use crate::pathfind::UNREACHABLE;
    use crate::reward::RewardConfig;
    use std::sync::Arc;

    fn state_with(map: Arc<GridMap>, agents: Vec<(Cell, Cell)>) -> EpisodeState {
        let agents = agents
            .into_iter()
            .enumerate()
            .map(|(id, (pos, goal))| AgentState {
                id,
                pos,
                start: pos,
                goal,
                at_goal: pos == goal,
            })
            .collect();
        EpisodeState {
            map,
            agents,
            timestep: 0,
            max_steps: 100,
            rng_seed: 0,
            terminal: false,
            success: false,
        }
    }

    fn open_map(w: usize, h: usize) -> Arc<GridMap> {
        Arc::new(GridMap::new(w, h, vec![0; w * h], 1.0).unwrap())
    }

    fn make_sim(map: Arc<GridMap>, agents: Vec<(Cell, Cell)>) -> Sim {
        let radio = Arc::new(RadioMap::uniform(&map, 25.0));
        Sim::new(
            state_with(map, agents),
            radio,
            EnvConfig::default(),
            ObsConfig::default(),
            RewardConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn priority_orders_by_distance() {
        let p = compute_priorities(&[3, 7], &[false, false]);
        assert!(p[0].rank < p[1].rank);
    }

    #[test]
    fn at_goal_demotes_below_any_distance() {
        let p = compute_priorities(&[0, 50], &[true, false]);
        assert!(p[1].rank < p[0].rank);
        assert!(p[0].demoted);
    }

    #[test]
    fn ties_break_by_agent_id() {
        let p = compute_priorities(&[4, 9, 4], &[false; 3]);
        assert!(p[0].rank < p[2].rank);
        assert_eq!(p[1].rank, 2);
    }

    #[test]
    fn unreachable_ranks_last_among_active() {
        let p = compute_priorities(&[UNREACHABLE, 2], &[false, false]);
        assert!(p[1].rank < p[0].rank);
    }

    #[test]
    fn single_agent_channels_2_and_3_zero() {
        let sim = make_sim(open_map(20, 20), vec![((10, 10), (15, 10))]);
        let obs = &sim.observations()[0];
        assert!(obs.channel(1).iter().all(|&x| x == 0.0));
        assert!(obs.channel(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn intentions_are_asymmetric() {
        // agent 0 closer to its goal -> higher priority; its path crosses
        // agent 1's FoV
        let sim = make_sim(
            open_map(20, 20),
            vec![((8, 10), (11, 10)), ((9, 12), (9, 3))],
        );
        let obs = sim.observations();
        assert!(sim.priorities[0].rank < sim.priorities[1].rank);
        let seen_by_1: f32 = obs[1].channel(2).iter().sum();
        let seen_by_0: f32 = obs[0].channel(2).iter().sum();
        assert!(seen_by_1 > 0.0, "lower-rank agent must see the path");
        assert_eq!(seen_by_0, 0.0, "higher-rank agent must not");
    }

    #[test]
    fn out_of_map_fov_cells_are_obstacles() {
        let sim = make_sim(open_map(20, 20), vec![((0, 0), (5, 5))]);
        let obs = &sim.observations()[0];
        let v = obs.fov_side;
        // top-left corner of the FoV lies outside the map
        assert_eq!(obs.channel(0)[0], 1.0);
        assert_eq!(obs.channel(3)[0], 0.0);
        // the agent's own cell is passable
        let center = (v / 2) * v + v / 2;
        assert_eq!(obs.channel(0)[center], 0.0);
    }

    #[test]
    fn agent_on_goal_vector() {
        let sim = make_sim(open_map(20, 20), vec![((4, 4), (4, 4))]);
        let obs = &sim.observations()[0];
        assert_eq!(&obs.vector[..3], &[0.0, 0.0, 1.0]);
        assert!(obs.vector[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channel4_matches_radio_map() {
        let map = open_map(20, 20);
        let radio = Arc::new(RadioMap::uniform(&map, 5.0));
        let expect = radio.sinr_norm_at((10, 10)) as f32;
        let sim = Sim::new(
            state_with(map, vec![((10, 10), (2, 2))]),
            radio,
            EnvConfig::default(),
            ObsConfig::default(),
            RewardConfig::default(),
        )
        .unwrap();
        let obs = &sim.observations()[0];
        let v = obs.fov_side;
        let center = (v / 2) * v + v / 2;
        assert_eq!(obs.channel(3)[center], expect);
    }

    #[test]
    fn fov_locality_of_nonzero_entries() {
        // another agent far outside the FoV must not appear anywhere
        let sim = make_sim(
            open_map(40, 40),
            vec![((5, 5), (6, 5)), ((30, 30), (31, 30))],
        );
        let obs = &sim.observations()[0];
        assert!(obs.channel(1).iter().all(|&x| x == 0.0));
        assert!(obs.channel(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mirror_corridor_observations_differ_in_channel3() {
        // two agents facing each other with swapped goals: positions are
        // mirror-symmetric, so only the intention channel can differ
        let sim = make_sim(
            open_map(21, 5),
            vec![((8, 2), (12, 2)), ((12, 2), (8, 2))],
        );
        let obs = sim.observations();
        assert_ne!(obs[0].channel(2), obs[1].channel(2));
    }
}
