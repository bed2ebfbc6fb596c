//! Evaluation harness: a classical prioritized space-time A* baseline, a
//! brute-force joint-state BFS oracle for small instances, Monte-Carlo
//! benchmark runs of the learned policy, and the paired network-awareness
//! comparison.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::gridworld::{
    reset_episode, Action, AgentState, Cell, EnvError, EpisodeState, GridMap, JointAction, Sim,
    ALL_ACTIONS,
};
use crate::io::{IoError, RunConfig, Scenario};
use crate::learner::greedy_action;
use crate::neural::{forward_q, NetError, NetworkParams, Scalar};
use crate::orchestrator::{StageConfig, WorldFactory};
use crate::pathfind::{bfs_distance_field, PathError};
use crate::radio::RadioMap;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("benchmark setup: {0}")]
    Setup(String),
}

// --- prioritized space-time A* baseline -------------------------------------

/// Plan agents sequentially in `order`; earlier agents' space-time cells are
/// dynamic obstacles (vertex and edge). Each returned path lists the agent's
/// cell at every timestep from 0 until it parks on its goal; `None` marks an
/// agent that could not reach its goal within `horizon` steps.
pub fn prioritized_baseline(
    map: &GridMap,
    starts: &[Cell],
    goals: &[Cell],
    order: &[usize],
    horizon: u32,
) -> Result<Vec<Option<Vec<Cell>>>, BenchError> {
    let n = starts.len();
    if goals.len() != n || order.len() != n {
        return Err(BenchError::Setup("starts/goals/order lengths differ".into()));
    }
    let mut vertex: HashSet<(Cell, u32)> = HashSet::new();
    let mut edge: HashSet<(Cell, Cell, u32)> = HashSet::new();
    // cell -> time from which it is permanently occupied by a parked agent
    let mut parked: HashMap<Cell, u32> = HashMap::new();
    let mut out: Vec<Option<Vec<Cell>>> = vec![None; n];

    for &i in order {
        let path = space_time_astar(map, starts[i], goals[i], horizon, &vertex, &edge, &parked)?;
        if let Some(cells) = &path {
            for (t, &c) in cells.iter().enumerate() {
                vertex.insert((c, t as u32));
                if t + 1 < cells.len() {
                    edge.insert((c, cells[t + 1], t as u32));
                }
            }
            parked.insert(goals[i], (cells.len() - 1) as u32);
        }
        out[i] = path;
    }
    Ok(out)
}

fn blocked_at(
    c: Cell,
    t: u32,
    vertex: &HashSet<(Cell, u32)>,
    parked: &HashMap<Cell, u32>,
) -> bool {
    vertex.contains(&(c, t)) || parked.get(&c).is_some_and(|&from| t >= from)
}

fn space_time_astar(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    horizon: u32,
    vertex: &HashSet<(Cell, u32)>,
    edge: &HashSet<(Cell, Cell, u32)>,
    parked: &HashMap<Cell, u32>,
) -> Result<Option<Vec<Cell>>, BenchError> {
    let dist = bfs_distance_field(map, goal)?;
    if dist.get(start) == crate::pathfind::UNREACHABLE {
        return Ok(None);
    }
    if blocked_at(start, 0, vertex, parked) {
        return Ok(None);
    }
    // parking at the goal at time t requires the goal free forever after
    let goal_free_from = |t: u32| -> bool {
        if parked.contains_key(&goal) {
            return false;
        }
        (t..=horizon).all(|tt| !vertex.contains(&(goal, tt)))
    };

    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut open: BinaryHeap<Reverse<(u32, u32, i32, i32)>> = BinaryHeap::new();
    let mut came: HashMap<(Cell, u32), (Cell, u32)> = HashMap::new();
    let mut seen: HashSet<(Cell, u32)> = HashSet::new();
    open.push(Reverse((dist.get(start), 0, start.1, start.0)));
    seen.insert((start, 0));
    let mut g_of: HashMap<(Cell, u32), u32> = HashMap::new();
    g_of.insert((start, 0), 0);

    while let Some(Reverse((_f, t, y, x))) = open.pop() {
        let c = (x, y);
        if c == goal && goal_free_from(t) {
            let mut cells = vec![c];
            let mut cur = (c, t);
            while let Some(&prev) = came.get(&cur) {
                cells.push(prev.0);
                cur = prev;
            }
            cells.reverse();
            return Ok(Some(cells));
        }
        if t >= horizon {
            continue;
        }
        for a in ALL_ACTIONS {
            let nc = a.apply(c);
            if !map.is_passable(nc.0, nc.1) {
                continue;
            }
            let nt = t + 1;
            if blocked_at(nc, nt, vertex, parked) || edge.contains(&(nc, c, t)) {
                continue;
            }
            if !seen.insert((nc, nt)) {
                continue;
            }
            came.insert((nc, nt), (c, t));
            g_of.insert((nc, nt), nt);
            let h = dist.get(nc);
            if h == crate::pathfind::UNREACHABLE {
                continue;
            }
            open.push(Reverse((nt + h, nt, nc.1, nc.0)));
        }
    }
    Ok(None)
}

// --- joint-state BFS oracle --------------------------------------------------

/// Optimal makespan by breadth-first search over the joint configuration
/// space (vertex and swap conflicts forbidden). Exponential; intended only
/// for <= 3 agents on tiny maps.
pub fn joint_bfs_makespan(
    map: &GridMap,
    starts: &[Cell],
    goals: &[Cell],
    max_depth: u32,
) -> Option<u32> {
    let n = starts.len();
    if starts == goals {
        return Some(0);
    }
    let mut visited: HashSet<Vec<Cell>> = HashSet::new();
    let mut frontier: VecDeque<(Vec<Cell>, u32)> = VecDeque::new();
    visited.insert(starts.to_vec());
    frontier.push_back((starts.to_vec(), 0));

    while let Some((state, depth)) = frontier.pop_front() {
        if depth >= max_depth {
            continue;
        }
        let mut choice = vec![0usize; n];
        'enumerate: loop {
            let mut next: Vec<Cell> = Vec::with_capacity(n);
            let mut ok = true;
            for i in 0..n {
                let c = ALL_ACTIONS[choice[i]].apply(state[i]);
                if !map.is_passable(c.0, c.1) {
                    ok = false;
                    break;
                }
                next.push(c);
            }
            if ok {
                // vertex conflicts
                for i in 0..n {
                    for j in i + 1..n {
                        if next[i] == next[j]
                            || (next[i] == state[j] && next[j] == state[i] && state[i] != state[j])
                        {
                            ok = false;
                        }
                    }
                }
            }
            if ok && !visited.contains(&next) {
                if next == goals {
                    return Some(depth + 1);
                }
                visited.insert(next.clone());
                frontier.push_back((next, depth + 1));
            }
            // odometer over the n-fold action product
            for i in 0..=n {
                if i == n {
                    break 'enumerate;
                }
                choice[i] += 1;
                if choice[i] < ALL_ACTIONS.len() {
                    break;
                }
                choice[i] = 0;
            }
        }
    }
    None
}

/// Independent trajectory validator: passability, vertex conflicts, and edge
/// swaps, on raw position sequences (shorter paths padded with their last
/// cell).
pub fn validate_trajectories(map: &GridMap, paths: &[Vec<Cell>]) -> bool {
    let n = paths.len();
    if paths.iter().any(|p| p.is_empty()) {
        return false;
    }
    let horizon = paths.iter().map(|p| p.len()).max().unwrap_or(0);
    let at = |i: usize, t: usize| -> Cell { *paths[i].get(t).unwrap_or_else(|| paths[i].last().unwrap()) };
    for t in 0..horizon {
        for i in 0..n {
            let c = at(i, t);
            if !map.is_passable(c.0, c.1) {
                return false;
            }
            for j in i + 1..n {
                if c == at(j, t) {
                    return false;
                }
                if t + 1 < horizon
                    && at(i, t + 1) == at(j, t)
                    && at(j, t + 1) == c
                    && c != at(j, t)
                {
                    return false;
                }
            }
        }
    }
    true
}

// --- learned-policy benchmark ------------------------------------------------

/// One policy episode with recorded positions; channel 4 (normalized SINR)
/// can be zeroed to run a network-blind variant.
pub struct PolicyRun {
    pub success: bool,
    pub makespan: u32,
    pub sum_of_costs: u32,
    pub mean_sinr_db: f64,
    pub blackout_steps: u64,
    pub positions: Vec<Vec<Cell>>,
    pub reward_sum: f64,
}

pub fn run_policy_episode<F: Scalar>(
    sim: &mut Sim,
    params: &NetworkParams<F>,
    zero_sinr_channel: bool,
) -> Result<PolicyRun, BenchError> {
    let n = sim.state.n_agents();
    let mut positions: Vec<Vec<Cell>> = (0..n).map(|i| vec![sim.state.agents[i].pos]).collect();
    let mut last_off_goal: Vec<Option<u32>> = vec![None; n];
    let mut sinr_sum = 0.0;
    let mut sinr_count = 0u64;
    let mut blackout_steps = 0u64;
    let mut reward_sum = 0.0;
    let cfg = &params.cfg;
    let area = cfg.area();

    let mut obs = sim.observations();
    while !sim.state.terminal {
        let mut spatial = Array2::zeros((n, cfg.spatial_len()));
        let mut vector = Array2::zeros((n, cfg.vector_len));
        for (i, o) in obs.iter().enumerate() {
            for (j, &v) in o.spatial.iter().enumerate() {
                let v = if zero_sinr_channel && j >= 3 * area { 0.0 } else { v };
                spatial[[i, j]] = F::from_f64(v as f64);
            }
            for (j, &v) in o.vector.iter().enumerate() {
                let scale = if j < 2 {
                    cfg.goal_scale
                } else if j == 2 {
                    1.0
                } else {
                    cfg.waypoint_scale
                };
                vector[[i, j]] = F::from_f64(v as f64 / scale);
            }
        }
        let q = forward_q(params, &spatial, &vector)?;
        let actions: Vec<Action> = (0..n)
            .map(|i| Action::from_index(greedy_action(q.row(i).as_slice().expect("row-major"))))
            .collect();
        let (_, next_obs, rewards) = sim.step(&JointAction { actions })?;
        for i in 0..n {
            let pos = sim.state.agents[i].pos;
            positions[i].push(pos);
            reward_sum += rewards[i];
            if !sim.state.agents[i].at_goal {
                last_off_goal[i] = Some(sim.state.timestep);
            }
            let db = sim.radio.sinr_db_at(pos);
            if db.is_finite() {
                sinr_sum += db;
                sinr_count += 1;
            }
            if sim.radio.is_blackout_at(pos) {
                blackout_steps += 1;
            }
        }
        obs = next_obs;
    }
    Ok(PolicyRun {
        success: sim.state.success,
        makespan: sim.state.timestep,
        // cost per agent = arrival time at its goal (episode length on timeout)
        sum_of_costs: last_off_goal
            .iter()
            .zip(&sim.state.agents)
            .map(|(&t, a)| match (a.at_goal, t) {
                (true, Some(t)) => t + 1,
                (true, None) => 0,
                (false, _) => sim.state.timestep,
            })
            .sum(),
        mean_sinr_db: if sinr_count > 0 { sinr_sum / sinr_count as f64 } else { f64::NEG_INFINITY },
        blackout_steps,
        positions,
        reward_sum,
    })
}

/// One benchmark row: a single (scenario window, variant) episode.
#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub run: usize,
    pub n_agents: usize,
    pub variant: String,
    pub success: bool,
    pub makespan: u32,
    pub sum_of_costs: u32,
    pub mean_sinr_db: f64,
    pub blackout_steps: u64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub variant: String,
    pub n_agents: usize,
    pub n_runs: usize,
    pub success_rate: f64,
    pub mean_makespan: f64,
    pub ci95_makespan: f64,
    pub mean_sum_of_costs: f64,
    pub mean_sinr_db: f64,
    pub mean_blackout_steps: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct BenchReport {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
}

fn mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

fn ci95(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    1.96 * (var / xs.len() as f64).sqrt()
}

/// Recompute aggregates per (variant, agent count) group from raw rows.
pub fn aggregate_rows(rows: &[RunRow]) -> Vec<Aggregate> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let key = (r.variant.clone(), r.n_agents);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    groups
        .into_iter()
        .map(|(variant, n_agents)| {
            let g: Vec<&RunRow> =
                rows.iter().filter(|r| r.variant == variant && r.n_agents == n_agents).collect();
            let makespans: Vec<f64> = g.iter().map(|r| r.makespan as f64).collect();
            Aggregate {
                success_rate: mean(g.iter().map(|r| f64::from(u8::from(r.success)))),
                mean_makespan: mean(makespans.iter().copied()),
                ci95_makespan: ci95(&makespans),
                mean_sum_of_costs: mean(g.iter().map(|r| r.sum_of_costs as f64)),
                mean_sinr_db: mean(g.iter().map(|r| r.mean_sinr_db).filter(|v| v.is_finite())),
                mean_blackout_steps: mean(g.iter().map(|r| r.blackout_steps as f64)),
                n_runs: g.len(),
                variant,
                n_agents,
            }
        })
        .collect()
}

fn episode_from_rows(
    map: &Arc<GridMap>,
    rows: &[&Scenario],
    max_steps: u32,
) -> Result<EpisodeState, BenchError> {
    let mut starts: Vec<Cell> = Vec::with_capacity(rows.len());
    for s in rows {
        if starts.contains(&s.start) {
            return Err(BenchError::Setup(format!(
                "duplicate start {:?} in scenario window",
                s.start
            )));
        }
        starts.push(s.start);
    }
    let agents = rows
        .iter()
        .enumerate()
        .map(|(id, s)| AgentState {
            id,
            pos: s.start,
            start: s.start,
            goal: s.goal,
            at_goal: s.start == s.goal,
        })
        .collect();
    Ok(EpisodeState {
        map: map.clone(),
        agents,
        timestep: 0,
        max_steps,
        rng_seed: 0,
        terminal: false,
        success: false,
    })
}

/// Run the greedy learned policy over sliding scenario windows.
///
/// Run `r` with `n` agents uses scenario rows `r..r+n`; the scen file must
/// therefore provide at least `n_runs + n - 1` rows per requested count.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    cfg: &RunConfig,
    map: Arc<GridMap>,
    radio: Arc<RadioMap>,
    scen: &[Scenario],
    agent_counts: &[usize],
    params: &NetworkParams<f32>,
    n_runs: usize,
    max_steps: u32,
) -> Result<BenchReport, BenchError> {
    let mut rows = Vec::new();
    for &n_agents in agent_counts {
        if scen.len() < n_runs + n_agents - 1 {
            return Err(BenchError::Setup(format!(
                "scen has {} rows, need {} for {} runs of {} agents",
                scen.len(),
                n_runs + n_agents - 1,
                n_runs,
                n_agents
            )));
        }
        for run in 0..n_runs {
            let window: Vec<&Scenario> = scen[run..run + n_agents].iter().collect();
            let state = episode_from_rows(&map, &window, max_steps)?;
            let mut sim = Sim::new(
                state,
                radio.clone(),
                cfg.env.clone(),
                cfg.obs.clone(),
                cfg.reward.clone(),
            )?;
            let t0 = Instant::now();
            let res = run_policy_episode(&mut sim, params, false)?;
            if res.success && !validate_trajectories(&map, &res.positions) {
                return Err(BenchError::Setup(format!(
                    "run {run}: successful trajectory failed collision validation"
                )));
            }
            rows.push(RunRow {
                run,
                n_agents,
                variant: "learned".into(),
                success: res.success,
                makespan: res.makespan,
                sum_of_costs: res.sum_of_costs,
                mean_sinr_db: res.mean_sinr_db,
                blackout_steps: res.blackout_steps,
                wall_clock_s: t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(BenchReport {
        aggregates: aggregate_rows(&rows),
        rows,
    })
}

pub fn write_report_csv(report: &BenchReport, path: &std::path::Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(IoError::from)?;
    for r in &report.rows {
        w.serialize(r).map_err(IoError::from)?;
    }
    w.flush().map_err(|e| IoError::from(csv::Error::from(e)))?;
    Ok(())
}

pub fn write_report_json(report: &BenchReport, path: &std::path::Path) -> Result<(), BenchError> {
    let json = serde_json::to_string_pretty(&report.aggregates)
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    std::fs::write(path, json).map_err(IoError::from)?;
    Ok(())
}

// --- network-awareness comparison ---------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub aware: Aggregate,
    pub unaware: Aggregate,
    pub delta_makespan: f64,
    pub delta_mean_sinr_db: f64,
    pub delta_blackout_steps: f64,
}

/// Paired-seed comparison: both policies face identical start/goal draws on
/// identical worlds. The unaware policy runs with its SINR channel zeroed.
#[allow(clippy::too_many_arguments)]
pub fn compare_network_awareness(
    cfg: &RunConfig,
    stage: &StageConfig,
    factory: &WorldFactory,
    aware: &NetworkParams<f32>,
    unaware: &NetworkParams<f32>,
    zero_channel_for_aware: bool,
    n_episodes: usize,
    seed: u64,
) -> Result<CompareReport, BenchError> {
    let mut rows = Vec::new();
    for e in 0..n_episodes {
        let ep_seed = seed.wrapping_add(e as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for (variant, params, zero) in [
            ("aware", aware, zero_channel_for_aware),
            ("unaware", unaware, true),
        ] {
            let mut sim = build_paired_sim(cfg, stage, ep_seed, factory)?;
            let t0 = Instant::now();
            let res = run_policy_episode(&mut sim, params, zero)?;
            rows.push(RunRow {
                run: e,
                n_agents: stage.n_agents,
                variant: variant.into(),
                success: res.success,
                makespan: res.makespan,
                sum_of_costs: res.sum_of_costs,
                mean_sinr_db: res.mean_sinr_db,
                blackout_steps: res.blackout_steps,
                wall_clock_s: t0.elapsed().as_secs_f64(),
            });
        }
    }
    let aggregates = aggregate_rows(&rows);
    let pick = |v: &str| {
        aggregates
            .iter()
            .find(|a| a.variant == v)
            .cloned()
            .expect("both variants aggregated")
    };
    let (a, u) = (pick("aware"), pick("unaware"));
    Ok(CompareReport {
        delta_makespan: a.mean_makespan - u.mean_makespan,
        delta_mean_sinr_db: a.mean_sinr_db - u.mean_sinr_db,
        delta_blackout_steps: a.mean_blackout_steps - u.mean_blackout_steps,
        aware: a,
        unaware: u,
    })
}

fn build_paired_sim(
    cfg: &RunConfig,
    stage: &StageConfig,
    seed: u64,
    factory: &WorldFactory,
) -> Result<Sim, BenchError> {
    let mut last: Option<EnvError> = None;
    for attempt in 0..8u64 {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9));
        let (map, radio) = factory(stage, s)?;
        match reset_episode(map, stage.n_agents, s, cfg.env.swap_fraction, stage.max_steps) {
            Ok(state) => {
                return Ok(Sim::new(
                    state,
                    radio,
                    cfg.env.clone(),
                    cfg.obs.clone(),
                    cfg.reward.clone(),
                )?)
            }
            Err(e) => last = Some(e),
        }
    }
    Err(BenchError::Env(last.unwrap_or(EnvError::Placement {
        retries: 8,
        constraint: "paired episode setup failed".into(),
    })))
}

// --- coverage-hole scenario -----------------------------------------------

/// Open 24x24 map whose middle rows form a deep coverage hole spanning all
/// but the outermost two columns: crossing vertically through the middle is
/// shortest but radio-dark; the edge columns stay covered.
pub fn coverage_hole_world(hole_db: f64, good_db: f64) -> (Arc<GridMap>, Arc<RadioMap>) {
    let side = 24usize;
    let map = Arc::new(GridMap::new(side, side, vec![0; side * side], 1.0).expect("open grid"));
    let mut grid = vec![good_db; side * side];
    for y in 10..=13 {
        for x in 2..=21 {
            grid[y * side + x] = hole_db;
        }
    }
    let noise = crate::radio::Deployment::default().noise_floor_dbm();
    let radio = Arc::new(RadioMap::from_sinr_grid(&map, &grid, noise));
    (map, radio)
}

/// World factory that always returns the coverage-hole world.
pub fn coverage_hole_factory(hole_db: f64, good_db: f64) -> WorldFactory {
    let (map, radio) = coverage_hole_world(hole_db, good_db);
    Arc::new(move |_stage, _seed| Ok((map.clone(), radio.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::resolve_conflicts;
    use crate::neural::{init_network, NetConfig};
    use crate::pathfind::astar;
    use rand::{Rng, SeedableRng};

    fn map_from(rows: &[&str]) -> GridMap {
        let h = rows.len();
        let w = rows[0].len();
        let cells = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| u8::from(c == '@')))
            .collect();
        GridMap::new(w, h, cells, 1.0).unwrap()
    }

    #[test]
    fn single_agent_baseline_is_plain_astar() {
        let map = map_from(&["....", ".@@.", "....", "...."]);
        let start = (0, 0);
        let goal = (3, 3);
        let plan = prioritized_baseline(&map, &[start], &[goal], &[0], 64).unwrap();
        let p = plan[0].as_ref().unwrap();
        let a = astar(&map, start, goal).unwrap().unwrap();
        assert_eq!(p.len(), a.cells.len());
        assert_eq!(p.first(), Some(&start));
        assert_eq!(p.last(), Some(&goal));
    }

    #[test]
    fn corridor_swap_uses_the_alcove() {
        // 1x5 corridor with one alcove below x=3; swapped goals force the
        // lower-priority agent to duck in while the other passes. The alcove
        // sits close enough to agent 1's start that it can reach cover
        // before agent 0's straight-line sweep arrives.
        let map = map_from(&[".....", "@@@.@"]);
        let starts = [(0, 0), (4, 0)];
        let goals = [(4, 0), (0, 0)];
        let plan = prioritized_baseline(&map, &starts, &goals, &[0, 1], 32).unwrap();
        let paths: Vec<Vec<Cell>> = plan.into_iter().map(|p| p.unwrap()).collect();
        assert!(validate_trajectories(&map, &paths));
        let makespan = paths.iter().map(|p| p.len() as u32 - 1).max().unwrap();
        let oracle = joint_bfs_makespan(&map, &starts, &goals, 32).unwrap();
        assert!(makespan >= oracle, "{makespan} < oracle {oracle}");
        // someone must visit the alcove
        assert!(paths.iter().any(|p| p.contains(&(3, 1))));
    }

    #[test]
    fn baseline_solutions_replay_without_demotions() {
        // replaying a baseline plan through the gridworld conflict resolver
        // must not demote a single move
        let map = map_from(&["......", ".@@@..", "......", "..@@..", "......", "......"]);
        let starts = [(0, 0), (5, 0), (0, 5)];
        let goals = [(5, 5), (0, 4), (5, 0)];
        let plan = prioritized_baseline(&map, &starts, &goals, &[0, 1, 2], 64).unwrap();
        let paths: Vec<Vec<Cell>> = plan.into_iter().map(|p| p.unwrap()).collect();
        let horizon = paths.iter().map(|p| p.len()).max().unwrap();
        let at = |i: usize, t: usize| *paths[i].get(t).unwrap_or_else(|| paths[i].last().unwrap());
        let mut state = EpisodeState {
            map: Arc::new(map),
            agents: starts
                .iter()
                .zip(&goals)
                .enumerate()
                .map(|(id, (&s, &g))| AgentState {
                    id,
                    pos: s,
                    start: s,
                    goal: g,
                    at_goal: s == g,
                })
                .collect(),
            timestep: 0,
            max_steps: 100,
            rng_seed: 0,
            terminal: false,
            success: false,
        };
        let ranks: Vec<usize> = (0..3).collect();
        for t in 0..horizon - 1 {
            let actions: Vec<Action> = (0..3)
                .map(|i| {
                    let (dx, dy) = (at(i, t + 1).0 - at(i, t).0, at(i, t + 1).1 - at(i, t).1);
                    ALL_ACTIONS.into_iter().find(|a| a.delta() == (dx, dy)).unwrap()
                })
                .collect();
            let joint = JointAction { actions: actions.clone() };
            let resolved = resolve_conflicts(&state, &joint, &ranks, true);
            assert_eq!(resolved.actions, actions, "demotion at t={t}");
            for i in 0..3 {
                state.agents[i].pos = at(i, t + 1);
            }
        }
    }

    #[test]
    fn joint_bfs_simple_cases() {
        let map = map_from(&["...", "...", "..."]);
        // one agent straight line
        assert_eq!(joint_bfs_makespan(&map, &[(0, 0)], &[(2, 0)], 10), Some(2));
        // already at goal
        assert_eq!(joint_bfs_makespan(&map, &[(1, 1)], &[(1, 1)], 10), Some(0));
        // swap on an open 3x3: one agent goes straight (2 moves), the other
        // loops through the second row (4 moves)
        let m = joint_bfs_makespan(&map, &[(0, 0), (2, 0)], &[(2, 0), (0, 0)], 10).unwrap();
        assert_eq!(m, 4);
    }

    #[test]
    fn joint_bfs_infeasible_returns_none() {
        // pure 1x3 corridor swap has no solution
        let map = map_from(&["...", "@@@"]);
        assert_eq!(joint_bfs_makespan(&map, &[(0, 0), (2, 0)], &[(2, 0), (0, 0)], 20), None);
    }

    #[test]
    fn exhaustive_small_instances_match_oracle() {
        // random small instances: wherever the baseline succeeds, its
        // solution validates and is no better than the optimum
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..60 {
            let w = rng.gen_range(3..=5);
            let h = rng.gen_range(3..=5);
            let cells: Vec<u8> = (0..w * h).map(|_| u8::from(rng.gen::<f64>() < 0.15)).collect();
            let Ok(map) = GridMap::new(w, h, cells, 1.0) else { continue };
            let open: Vec<Cell> = map.passable_cells().collect();
            if open.len() < 4 {
                continue;
            }
            let n = rng.gen_range(1..=2usize.min(open.len() / 2));
            let mut picks: Vec<Cell> = Vec::new();
            while picks.len() < 2 * n {
                let c = open[rng.gen_range(0..open.len())];
                if !picks.contains(&c) {
                    picks.push(c);
                }
            }
            let starts = picks[..n].to_vec();
            let goals = picks[n..].to_vec();
            let order: Vec<usize> = (0..n).collect();
            let plan = prioritized_baseline(&map, &starts, &goals, &order, 40).unwrap();
            if plan.iter().any(|p| p.is_none()) {
                continue;
            }
            let paths: Vec<Vec<Cell>> = plan.into_iter().map(|p| p.unwrap()).collect();
            assert!(validate_trajectories(&map, &paths));
            let makespan = paths.iter().map(|p| p.len() as u32 - 1).max().unwrap();
            let oracle = joint_bfs_makespan(&map, &starts, &goals, 40)
                .expect("baseline success implies feasibility");
            assert!(makespan >= oracle);
            checked += 1;
        }
        assert!(checked > 20, "only {checked} instances exercised");
    }

    #[test]
    fn validator_catches_conflicts() {
        let map = map_from(&["...", "...", "..."]);
        // vertex conflict at t=1
        assert!(!validate_trajectories(
            &map,
            &[vec![(0, 0), (1, 0)], vec![(2, 0), (1, 0)]]
        ));
        // swap
        assert!(!validate_trajectories(
            &map,
            &[vec![(0, 0), (1, 0)], vec![(1, 0), (0, 0)]]
        ));
        // fine
        assert!(validate_trajectories(
            &map,
            &[vec![(0, 0), (1, 0)], vec![(2, 2), (2, 1)]]
        ));
    }

    fn tiny_net() -> NetworkParams<f32> {
        init_network(
            &NetConfig {
                conv_filters: vec![4],
                vector_hidden: 8,
                merge_hidden: 8,
                goal_scale: 34.0,
                ..NetConfig::default()
            },
            0,
        )
    }

    #[test]
    fn null_comparison_is_identical() {
        // same weights, SINR channel zeroed for both variants, paired seeds:
        // the two reports must agree exactly
        let mut cfg = RunConfig::default();
        cfg.net = tiny_net().cfg.clone();
        let stage = StageConfig {
            name: "hole".into(),
            width: 24,
            height: 24,
            n_agents: 2,
            max_steps: 60,
            ..StageConfig::default()
        };
        let factory = coverage_hole_factory(-20.0, 30.0);
        let params = tiny_net();
        let rep =
            compare_network_awareness(&cfg, &stage, &factory, &params, &params, true, 6, 9).unwrap();
        assert_eq!(rep.delta_makespan, 0.0);
        assert_eq!(rep.delta_mean_sinr_db, 0.0);
        assert_eq!(rep.delta_blackout_steps, 0.0);
    }

    #[test]
    fn coverage_hole_geometry() {
        let (map, radio) = coverage_hole_world(-20.0, 30.0);
        assert_eq!(map.width(), 24);
        assert_eq!(map.height(), 24);
        // hole cells are blacked out; edges and outer rows are not
        assert!(radio.is_blackout_at((12, 11)));
        assert_eq!(radio.sinr_norm_at((12, 11)), 0.0);
        assert!(!radio.is_blackout_at((0, 11)));
        assert_eq!(radio.sinr_norm_at((0, 11)), 1.0);
        assert!(!radio.is_blackout_at((12, 0)));
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows = vec![
            RunRow {
                run: 0,
                n_agents: 2,
                variant: "learned".into(),
                success: true,
                makespan: 10,
                sum_of_costs: 14,
                mean_sinr_db: 20.0,
                blackout_steps: 0,
                wall_clock_s: 0.1,
            },
            RunRow {
                run: 1,
                n_agents: 2,
                variant: "learned".into(),
                success: false,
                makespan: 30,
                sum_of_costs: 60,
                mean_sinr_db: 10.0,
                blackout_steps: 4,
                wall_clock_s: 0.1,
            },
        ];
        let agg = aggregate_rows(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].n_runs, 2);
        assert!((agg[0].success_rate - 0.5).abs() < 1e-12);
        assert!((agg[0].mean_makespan - 20.0).abs() < 1e-12);
        assert!((agg[0].mean_sinr_db - 15.0).abs() < 1e-12);
    }

    #[test]
    fn benchmark_rejects_short_scen() {
        let cfg = RunConfig::default();
        let (map, radio) = coverage_hole_world(-20.0, 30.0);
        let scen = vec![Scenario {
            bucket: 0,
            map_name: "x".into(),
            map_width: 24,
            map_height: 24,
            start: (0, 0),
            goal: (5, 5),
            optimal_length: 10.0,
        }];
        let params = tiny_net();
        let mut cfg = cfg;
        cfg.net = params.cfg.clone();
        let e = run_benchmark(&cfg, map, radio, &scen, &[2], &params, 50, 60);
        assert!(matches!(e, Err(BenchError::Setup(_))));
    }
}
