//! The Dec-POMDP grid environment: map generation, episode lifecycle with
//! deadlock-inducing swapped resets, and joint-action transitions with
//! priority-based conflict resolution.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::observe::{self, ObsConfig, Observation, Priority};
use crate::pathfind::{self, DistanceField, Path, UNREACHABLE};
use crate::radio::RadioMap;
use crate::reward::{self, RewardConfig, RewardContext};

/// Grid coordinate `(x, y)`; `y` grows downward (row-major).
pub type Cell = (i32, i32);

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("map generation failed after {retries} retries: {reason}")]
    MapGen { retries: usize, reason: String },
    #[error("agent placement failed after {retries} retries: {constraint}")]
    Placement { retries: usize, constraint: String },
    #[error("step called on terminal episode")]
    Terminal,
    #[error(transparent)]
    Path(#[from] pathfind::PathError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

/// Static binary occupancy grid. `1` marks impassable cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    cells: Vec<u8>,
    cell_size_m: f64,
}

impl GridMap {
    pub fn new(
        width: usize,
        height: usize,
        cells: Vec<u8>,
        cell_size_m: f64,
    ) -> Result<Self, EnvError> {
        if cells.len() != width * height {
            return Err(EnvError::InvalidGrid(format!(
                "cells length {} != {}x{}",
                cells.len(),
                width,
                height
            )));
        }
        if let Some(v) = cells.iter().find(|&&v| v > 1) {
            return Err(EnvError::InvalidGrid(format!("cell value {v} not in {{0,1}}")));
        }
        Ok(Self {
            width,
            height,
            cells,
            cell_size_m,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn in_bounds(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// False for out-of-bounds coordinates.
    pub fn is_passable(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y) && self.cells[y as usize * self.width + x as usize] == 0
    }

    pub fn is_blocked(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y) && self.cells[y as usize * self.width + x as usize] == 1
    }

    pub fn raw_cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn passable_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |y| {
            (0..self.width).filter_map(move |x| {
                if self.cells[y * self.width + x] == 0 {
                    Some((x as i32, y as i32))
                } else {
                    None
                }
            })
        })
    }

    pub fn count_blocked(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    /// Cells of the largest 4-connected passable component, in (y, x) order.
    pub fn largest_component(&self) -> Vec<Cell> {
        let mut seen = vec![false; self.cells.len()];
        let mut best: Vec<Cell> = Vec::new();
        for start in self.passable_cells() {
            let si = start.1 as usize * self.width + start.0 as usize;
            if seen[si] {
                continue;
            }
            let mut comp = vec![start];
            seen[si] = true;
            let mut head = 0;
            while head < comp.len() {
                let (x, y) = comp[head];
                head += 1;
                for (dx, dy) in [(0, -1), (0, 1), (-1, 0), (1, 0)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if self.is_passable(nx, ny) {
                        let ni = ny as usize * self.width + nx as usize;
                        if !seen[ni] {
                            seen[ni] = true;
                            comp.push((nx, ny));
                        }
                    }
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
        best.sort_by_key(|&(x, y)| (y, x));
        best
    }
}

/// The five discrete moves available to every agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

pub const N_ACTIONS: usize = 5;
pub const ALL_ACTIONS: [Action; 5] = [
    Action::Up,
    Action::Down,
    Action::Left,
    Action::Right,
    Action::Stay,
];

impl Action {
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
            Action::Stay => 4,
        }
    }

    pub fn from_index(i: usize) -> Action {
        ALL_ACTIONS[i]
    }

    pub fn apply(self, pos: Cell) -> Cell {
        let (dx, dy) = self.delta();
        (pos.0 + dx, pos.1 + dy)
    }
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: usize,
    pub pos: Cell,
    pub start: Cell,
    pub goal: Cell,
    pub at_goal: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub map: Arc<GridMap>,
    pub agents: Vec<AgentState>,
    pub timestep: u32,
    pub max_steps: u32,
    pub rng_seed: u64,
    pub terminal: bool,
    pub success: bool,
}

impl EpisodeState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAction {
    pub actions: Vec<Action>,
}

/// Per-agent and episode-level outcome of one transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub executed: Vec<Action>,
    pub collided: Vec<bool>,
    pub reached_goal: Vec<bool>,
    pub path_conflict: Vec<bool>,
    pub terminal: bool,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Random,
    Room,
    Warehouse,
}

const MAP_RETRIES: usize = 32;

/// Deterministic map generation for curriculum stages.
///
/// `random` blocks each cell i.i.d. with probability `density`, retrying at
/// seed+1 while the largest passable component covers less than half the
/// grid. `room` recursively partitions the grid into rectangular rooms
/// joined by one-cell doorways (connected by construction). `warehouse`
/// loads the bundled MovingAI-format warehouse layout and ignores the
/// requested dimensions.
pub fn generate_map(
    kind: MapKind,
    width: usize,
    height: usize,
    seed: u64,
    density: f64,
) -> Result<GridMap, EnvError> {
    if kind != MapKind::Warehouse && (width < 4 || height < 4) {
        return Err(EnvError::InvalidGrid(format!(
            "map dimensions {width}x{height} below minimum 4x4"
        )));
    }
    if !(0.0..1.0).contains(&density) {
        return Err(EnvError::InvalidGrid(format!("density {density} not in [0, 1)")));
    }
    match kind {
        MapKind::Random => {
            for attempt in 0..MAP_RETRIES {
                let s = seed.wrapping_add(attempt as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let cells: Vec<u8> = (0..width * height)
                    .map(|_| u8::from(rng.gen::<f64>() < density))
                    .collect();
                let map = GridMap::new(width, height, cells, 1.0)?;
                if map.largest_component().len() >= (width * height).max(16) / 2 {
                    return Ok(map);
                }
            }
            Err(EnvError::MapGen {
                retries: MAP_RETRIES,
                reason: "largest passable component below half the grid".into(),
            })
        }
        MapKind::Room => Ok(generate_room_map(width, height, seed)),
        MapKind::Warehouse => {
            let text = include_str!("../assets/warehouse-161x63.map");
            Ok(crate::io::parse_map(text)?)
        }
    }
}

/// Recursive rectangular partition with one-cell doorways.
fn generate_room_map(width: usize, height: usize, seed: u64) -> GridMap {
    let mut cells = vec![0u8; width * height];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    divide(&mut cells, width, &mut rng, 0, 0, width, height);
    reconnect(&mut cells, width, height);
    GridMap::new(width, height, cells, 1.0).expect("room generator produces a valid grid")
}

/// A wall placed by a later `divide` call can land flush against an earlier
/// doorway and seal a room off. Knock single wall cells between distinct
/// components until one component remains.
fn reconnect(cells: &mut [u8], width: usize, height: usize) {
    loop {
        let mut label = vec![0usize; cells.len()];
        let mut next = 0usize;
        for start in 0..cells.len() {
            if cells[start] != 0 || label[start] != 0 {
                continue;
            }
            next += 1;
            let mut stack = vec![start];
            label[start] = next;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % width, i / width);
                let mut visit = |j: usize| {
                    if cells[j] == 0 && label[j] == 0 {
                        label[j] = next;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < width {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - width);
                }
                if y + 1 < height {
                    visit(i + width);
                }
            }
        }
        if next <= 1 {
            return;
        }
        let mut opened = false;
        'scan: for i in 0..cells.len() {
            if cells[i] != 1 {
                continue;
            }
            let (x, y) = (i % width, i / width);
            let mut seen = [0usize; 4];
            let mut k = 0;
            let mut note = |j: usize| {
                if label[j] != 0 && !seen[..k].contains(&label[j]) {
                    seen[k] = label[j];
                    k += 1;
                }
            };
            if x > 0 {
                note(i - 1);
            }
            if x + 1 < width {
                note(i + 1);
            }
            if y > 0 {
                note(i - width);
            }
            if y + 1 < height {
                note(i + width);
            }
            if k >= 2 {
                cells[i] = 0;
                opened = true;
                break 'scan;
            }
        }
        if !opened {
            // no single-cell bridge exists; walls are one cell thick, so
            // this cannot happen for maps produced by `divide`
            return;
        }
    }
}

const MIN_ROOM: usize = 4;

fn divide(cells: &mut [u8], stride: usize, rng: &mut ChaCha8Rng, x0: usize, y0: usize, w: usize, h: usize) {
    if w < 2 * MIN_ROOM + 1 && h < 2 * MIN_ROOM + 1 {
        return;
    }
    let vertical = if w >= 2 * MIN_ROOM + 1 && h >= 2 * MIN_ROOM + 1 {
        w >= h
    } else {
        w >= 2 * MIN_ROOM + 1
    };
    if vertical {
        // wall column with one doorway
        let wx = x0 + MIN_ROOM + rng.gen_range(0..w - 2 * MIN_ROOM);
        let door = y0 + rng.gen_range(0..h);
        for y in y0..y0 + h {
            if y != door {
                cells[y * stride + wx] = 1;
            }
        }
        divide(cells, stride, rng, x0, y0, wx - x0, h);
        divide(cells, stride, rng, wx + 1, y0, x0 + w - wx - 1, h);
    } else {
        let wy = y0 + MIN_ROOM + rng.gen_range(0..h - 2 * MIN_ROOM);
        let door = x0 + rng.gen_range(0..w);
        for x in x0..x0 + w {
            if x != door {
                cells[wy * stride + x] = 1;
            }
        }
        divide(cells, stride, rng, x0, y0, w, wy - y0);
        divide(cells, stride, rng, x0, wy + 1, w, y0 + h - wy - 1);
    }
}

const PLACE_RETRIES: usize = 64;

/// Sample starts and goals on the largest passable component.
///
/// A `swap_fraction` share of agents is paired so that one agent's start is
/// the other's goal and vice versa, deliberately seeding head-on deadlocks.
pub fn reset_episode(
    map: Arc<GridMap>,
    n_agents: usize,
    seed: u64,
    swap_fraction: f64,
    max_steps: u32,
) -> Result<EpisodeState, EnvError> {
    if swap_fraction >= 1.0 && n_agents % 2 != 0 {
        return Err(EnvError::Placement {
            retries: 0,
            constraint: "swap_fraction = 1.0 requires an even agent count".into(),
        });
    }
    let component = map.largest_component();
    if component.len() < 2 * n_agents {
        return Err(EnvError::Placement {
            retries: 0,
            constraint: format!(
                "largest passable component has {} cells, need {}",
                component.len(),
                2 * n_agents
            ),
        });
    }
    let n_paired = {
        let mut n = (swap_fraction * n_agents as f64).round() as usize;
        n -= n % 2;
        n.min(n_agents)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..PLACE_RETRIES {
        let mut starts: Vec<Cell> = Vec::with_capacity(n_agents);
        let mut goals: Vec<Cell> = Vec::with_capacity(n_agents);
        let draw = |taken: &[Cell], rng: &mut ChaCha8Rng| -> Option<Cell> {
            for _ in 0..PLACE_RETRIES {
                let c = component[rng.gen_range(0..component.len())];
                if !taken.contains(&c) {
                    return Some(c);
                }
            }
            None
        };
        // swapped pairs: A.start = B.goal and B.start = A.goal
        for _ in 0..n_paired / 2 {
            let Some(a) = draw(&starts, &mut rng) else { continue 'attempt };
            let mut both = starts.clone();
            both.push(a);
            let Some(b) = draw(&both, &mut rng) else { continue 'attempt };
            starts.push(a);
            starts.push(b);
            goals.push(b);
            goals.push(a);
        }
        for _ in n_paired..n_agents {
            let Some(s) = draw(&starts, &mut rng) else { continue 'attempt };
            starts.push(s);
            let mut banned = goals.clone();
            banned.push(s);
            let Some(g) = draw(&banned, &mut rng) else { continue 'attempt };
            goals.push(g);
        }
        let agents = starts
            .iter()
            .zip(&goals)
            .enumerate()
            .map(|(id, (&start, &goal))| AgentState {
                id,
                pos: start,
                start,
                goal,
                at_goal: start == goal,
            })
            .collect();
        return Ok(EpisodeState {
            map,
            agents,
            timestep: 0,
            max_steps,
            rng_seed: seed,
            terminal: false,
            success: false,
        });
    }
    Err(EnvError::Placement {
        retries: PLACE_RETRIES,
        constraint: "could not draw distinct starts and goals".into(),
    })
}

/// Demote conflicting moves to `stay` until the joint action is legal.
///
/// `ranks[i]` is agent `i`'s priority rank (0 = highest). Rules, iterated
/// to a fixed point: no move into walls or out of bounds, no two agents on
/// one cell, no cell swap (when `forbid_swaps`), and a blocked cell is won
/// by the better-ranked mover.
pub fn resolve_conflicts(
    state: &EpisodeState,
    proposed: &JointAction,
    ranks: &[usize],
    forbid_swaps: bool,
) -> JointAction {
    let n = state.agents.len();
    let mut actions = proposed.actions.clone();
    let positions: Vec<Cell> = state.agents.iter().map(|a| a.pos).collect();
    // walls and bounds first
    for i in 0..n {
        let target = actions[i].apply(positions[i]);
        if !state.map.is_passable(target.0, target.1) {
            actions[i] = Action::Stay;
        }
    }
    loop {
        let targets: Vec<Cell> = (0..n).map(|i| actions[i].apply(positions[i])).collect();
        let mut demote: Option<usize> = None;
        'scan: for i in 0..n {
            if actions[i] == Action::Stay {
                continue;
            }
            for j in 0..n {
                if i == j {
                    continue;
                }
                if targets[i] == targets[j] {
                    // stationary occupant always wins; otherwise rank decides
                    let i_loses = if actions[j] == Action::Stay {
                        true
                    } else {
                        ranks[i] > ranks[j]
                    };
                    if i_loses {
                        demote = Some(i);
                        break 'scan;
                    }
                }
                if forbid_swaps
                    && actions[j] != Action::Stay
                    && targets[i] == positions[j]
                    && targets[j] == positions[i]
                    && ranks[i] > ranks[j]
                {
                    demote = Some(i);
                    break 'scan;
                }
            }
        }
        match demote {
            Some(i) => actions[i] = Action::Stay,
            None => break,
        }
    }
    JointAction { actions }
}

/// Environment tunables that are not per-module hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Forbid edge (swap) conflicts in addition to vertex conflicts.
    pub forbid_swaps: bool,
    /// Share of agents placed as swapped start/goal pairs at reset.
    pub swap_fraction: f64,
    /// Obstacle density for randomly generated maps.
    pub density: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            forbid_swaps: true,
            swap_fraction: 1.0,
            density: 0.2,
        }
    }
}

/// A running episode with its pathfinding caches: the unit owned by one
/// actor worker.
pub struct Sim {
    pub state: EpisodeState,
    pub paths: Vec<Path>,
    pub priorities: Vec<Priority>,
    /// Goal bonus already paid out; re-entering the goal is not re-rewarded,
    /// otherwise leaving and returning would be a profitable cycle.
    goal_rewarded: Vec<bool>,
    dist_fields: HashMap<Cell, Arc<DistanceField>>,
    pub radio: Arc<RadioMap>,
    pub env_cfg: EnvConfig,
    pub obs_cfg: ObsConfig,
    pub reward_cfg: RewardConfig,
}

impl Sim {
    pub fn new(
        state: EpisodeState,
        radio: Arc<RadioMap>,
        env_cfg: EnvConfig,
        obs_cfg: ObsConfig,
        reward_cfg: RewardConfig,
    ) -> Result<Self, EnvError> {
        let mut sim = Sim {
            paths: Vec::new(),
            priorities: Vec::new(),
            goal_rewarded: state.agents.iter().map(|a| a.at_goal).collect(),
            dist_fields: HashMap::new(),
            state,
            radio,
            env_cfg,
            obs_cfg,
            reward_cfg,
        };
        for i in 0..sim.state.n_agents() {
            let path = sim.plan(i)?;
            sim.paths.push(path);
        }
        sim.refresh_priorities();
        Ok(sim)
    }

    fn field(&mut self, goal: Cell) -> Result<Arc<DistanceField>, EnvError> {
        if let Some(f) = self.dist_fields.get(&goal) {
            return Ok(f.clone());
        }
        let f = Arc::new(pathfind::bfs_distance_field(&self.state.map, goal)?);
        self.dist_fields.insert(goal, f.clone());
        Ok(self.dist_fields[&goal].clone())
    }

    fn plan(&mut self, agent: usize) -> Result<Path, EnvError> {
        let (pos, goal) = {
            let a = &self.state.agents[agent];
            (a.pos, a.goal)
        };
        match pathfind::astar(&self.state.map, pos, goal)? {
            Some(p) => Ok(p),
            // unreachable goal: degenerate single-cell path, distance stays infinite
            None => Ok(Path { cells: vec![pos] }),
        }
    }

    /// Current shortest-path distance of agent `i` to its goal.
    pub fn distance(&mut self, agent: usize) -> u32 {
        let (pos, goal) = {
            let a = &self.state.agents[agent];
            (a.pos, a.goal)
        };
        match self.field(goal) {
            Ok(f) => f.get(pos),
            Err(_) => UNREACHABLE,
        }
    }

    fn refresh_priorities(&mut self) {
        let dists: Vec<u32> = (0..self.state.n_agents()).map(|i| self.distance(i)).collect();
        let at_goal: Vec<bool> = self.state.agents.iter().map(|a| a.at_goal).collect();
        self.priorities = observe::compute_priorities(&dists, &at_goal);
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.priorities.iter().map(|p| p.rank).collect()
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.state.n_agents())
            .map(|i| {
                observe::build_observation(
                    &self.state,
                    i,
                    &self.radio,
                    &self.paths,
                    &self.priorities,
                    &self.obs_cfg,
                )
            })
            .collect()
    }

    /// One joint transition: conflict resolution, movement, re-planning,
    /// priority refresh, rewards, and next observations.
    pub fn step(
        &mut self,
        joint: &JointAction,
    ) -> Result<(StepOutcome, Vec<Observation>, Vec<f64>), EnvError> {
        if self.state.terminal {
            return Err(EnvError::Terminal);
        }
        let n = self.state.n_agents();
        let ranks = self.ranks();
        let resolved = resolve_conflicts(&self.state, joint, &ranks, self.env_cfg.forbid_swaps);
        let collided: Vec<bool> = (0..n)
            .map(|i| resolved.actions[i] != joint.actions[i])
            .collect();
        let dist_before: Vec<u32> = (0..n).map(|i| self.distance(i)).collect();
        let was_at_goal: Vec<bool> = self.state.agents.iter().map(|a| a.at_goal).collect();

        for i in 0..n {
            let next = resolved.actions[i].apply(self.state.agents[i].pos);
            self.state.agents[i].pos = next;
            self.state.agents[i].at_goal = next == self.state.agents[i].goal;
        }
        self.state.timestep += 1;

        // advance or re-plan each agent's reference path
        for i in 0..n {
            let pos = self.state.agents[i].pos;
            let path = &mut self.paths[i];
            if path.cells.len() > 1 && path.cells[1] == pos {
                path.cells.remove(0);
            } else if path.cells[0] != pos {
                self.paths[i] = self.plan(i)?;
            }
        }
        self.refresh_priorities();

        let reached_goal: Vec<bool> = (0..n)
            .map(|i| self.state.agents[i].at_goal && !was_at_goal[i])
            .collect();
        let all_at_goal = self.state.agents.iter().all(|a| a.at_goal);
        let timeout = self.state.timestep >= self.state.max_steps;
        self.state.terminal = all_at_goal || timeout;
        self.state.success = all_at_goal;

        // path-conflict flags: new position on a higher-ranked agent's
        // communicated cells, both agents within comm range
        let comm_range = self.obs_cfg.comm_range();
        let mut path_conflict = vec![false; n];
        for i in 0..n {
            let pos_i = self.state.agents[i].pos;
            for j in 0..n {
                if i == j || self.priorities[j].rank >= self.priorities[i].rank {
                    continue;
                }
                let pos_j = self.state.agents[j].pos;
                let cheb = (pos_i.0 - pos_j.0).abs().max((pos_i.1 - pos_j.1).abs());
                if cheb as f64 > comm_range {
                    continue;
                }
                let comm = observe::communicated_cells(&self.paths[j], self.obs_cfg.comm_steps);
                if comm.contains(&pos_i) {
                    path_conflict[i] = true;
                    break;
                }
            }
        }

        let mut rewards = Vec::with_capacity(n);
        for i in 0..n {
            let pos = self.state.agents[i].pos;
            let first_arrival = reached_goal[i] && !self.goal_rewarded[i];
            if first_arrival {
                self.goal_rewarded[i] = true;
            }
            let ctx = RewardContext {
                reached_goal: first_arrival,
                collided: collided[i],
                path_conflict: path_conflict[i],
                dist_before: dist_before[i],
                dist_after: self.distance(i),
                sinr_norm: self.radio.sinr_norm_at(pos),
            };
            rewards.push(reward::compute_reward(&ctx, &self.reward_cfg));
        }

        let outcome = StepOutcome {
            executed: resolved.actions,
            collided,
            reached_goal,
            path_conflict,
            terminal: self.state.terminal,
            success: self.state.success,
        };
        let observations = self.observations();
        Ok((outcome, observations, rewards))
    }
}
