//! Grid shortest-path services: A*, BFS distance fields, waypoint extraction.
//!
//! All functions are pure over an immutable [`GridMap`] and safe to call
//! concurrently.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::collections::VecDeque;

use thiserror::Error;

use crate::gridworld::{Cell, GridMap};

/// Sentinel for unreachable cells in a [`DistanceField`].
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("cell ({0}, {1}) is out of bounds or impassable")]
    BadEndpoint(i32, i32),
    #[error("path is empty")]
    EmptyPath,
}

/// An ordered 4-connected path from start to goal, both inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub cells: Vec<Cell>,
}

impl Path {
    /// Number of steps, i.e. `|cells| - 1`.
    pub fn length(&self) -> usize {
        self.cells.len().saturating_sub(1)
    }

    pub fn goal(&self) -> Cell {
        *self.cells.last().expect("path never empty")
    }
}

/// Exact shortest-path distance from every cell to a fixed goal.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub goal: Cell,
    width: usize,
    dist: Vec<u32>,
}

impl DistanceField {
    /// Distance in steps from `cell` to the goal; [`UNREACHABLE`] if none.
    pub fn get(&self, cell: Cell) -> u32 {
        let (x, y) = cell;
        if x < 0 || y < 0 {
            return UNREACHABLE;
        }
        let idx = y as usize * self.width + x as usize;
        self.dist.get(idx).copied().unwrap_or(UNREACHABLE)
    }
}

const NEIGHBORS: [(i32, i32); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Exact BFS distance field toward `goal`. Used as the A* test oracle and
/// for potential lookups.
pub fn bfs_distance_field(map: &GridMap, goal: Cell) -> Result<DistanceField, PathError> {
    if !map.is_passable(goal.0, goal.1) {
        return Err(PathError::BadEndpoint(goal.0, goal.1));
    }
    let mut dist = vec![UNREACHABLE; map.width() * map.height()];
    let idx = |c: Cell| c.1 as usize * map.width() + c.0 as usize;
    dist[idx(goal)] = 0;
    let mut queue = VecDeque::new();
    queue.push_back(goal);
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)];
        for (dx, dy) in NEIGHBORS {
            let n = (c.0 + dx, c.1 + dy);
            if map.is_passable(n.0, n.1) && dist[idx(n)] == UNREACHABLE {
                dist[idx(n)] = d + 1;
                queue.push_back(n);
            }
        }
    }
    Ok(DistanceField {
        goal,
        width: map.width(),
        dist,
    })
}

fn manhattan(a: Cell, b: Cell) -> u32 {
    (a.0 - b.0).unsigned_abs() + (a.1 - b.1).unsigned_abs()
}

/// Shortest 4-connected path, or `None` when the goal is unreachable.
///
/// Ties break on lower f, then higher g, then (y, x) cell order, so paths
/// are reproducible across runs.
pub fn astar(map: &GridMap, start: Cell, goal: Cell) -> Result<Option<Path>, PathError> {
    for c in [start, goal] {
        if !map.is_passable(c.0, c.1) {
            return Err(PathError::BadEndpoint(c.0, c.1));
        }
    }
    let width = map.width();
    let idx = |c: Cell| c.1 as usize * width + c.0 as usize;
    let mut g_score = vec![u32::MAX; width * map.height()];
    let mut parent: Vec<u32> = vec![u32::MAX; width * map.height()];
    // key: (f, Reverse(g), y, x) so pops are deterministic
    let mut open: BinaryHeap<Reverse<(u32, Reverse<u32>, i32, i32)>> = BinaryHeap::new();
    g_score[idx(start)] = 0;
    open.push(Reverse((manhattan(start, goal), Reverse(0), start.1, start.0)));
    while let Some(Reverse((_, Reverse(g), y, x))) = open.pop() {
        let c = (x, y);
        if g > g_score[idx(c)] {
            continue; // stale entry
        }
        if c == goal {
            let mut cells = vec![c];
            let mut cur = c;
            while cur != start {
                let p = parent[idx(cur)];
                cur = ((p as usize % width) as i32, (p as usize / width) as i32);
                cells.push(cur);
            }
            cells.reverse();
            return Ok(Some(Path { cells }));
        }
        for (dx, dy) in NEIGHBORS {
            let n = (x + dx, y + dy);
            if !map.is_passable(n.0, n.1) {
                continue;
            }
            let ng = g + 1;
            if ng < g_score[idx(n)] {
                g_score[idx(n)] = ng;
                parent[idx(n)] = idx(c) as u32;
                open.push(Reverse((ng + manhattan(n, goal), Reverse(ng), n.1, n.0)));
            }
        }
    }
    Ok(None)
}

/// Relative coordinates of the next `k` path cells after `pos`.
///
/// When fewer than `k` cells remain the goal cell's offset is repeated, so
/// an agent sitting on its goal sees `k` copies of `(0, 0)`.
pub fn next_waypoints(path: &Path, pos: Cell, k: usize) -> Result<Vec<(i32, i32)>, PathError> {
    if path.cells.is_empty() {
        return Err(PathError::EmptyPath);
    }
    let at = path.cells.iter().position(|&c| c == pos).unwrap_or(0);
    let mut out = Vec::with_capacity(k);
    for step in 1..=k {
        let cell = path
            .cells
            .get(at + step)
            .copied()
            .unwrap_or_else(|| path.goal());
        out.push((cell.0 - pos.0, cell.1 - pos.1));
    }
    Ok(out)
}
