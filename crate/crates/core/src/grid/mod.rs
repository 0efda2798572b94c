//! Procedural navigation grids: generation, shortest paths, poses and actions.

mod episode;
mod sensors;
mod signature;

pub use episode::{
    EnvSpec, EpisodeState, EpisodeSummary, RewardConfig, SavedEpisode, SourceState, StepOutcome,
};
pub use sensors::{render_depth, synthesize_binaural, Observation};
pub use signature::{SignatureBank, SoundSignature, SIGNATURE_COUNT};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_from_seed;

pub type CellId = usize;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dimensions must be at least 3x3, got {0}x{1}")]
    InvalidDimensions(usize, usize),
    #[error("obstacle density must lie in [0, 0.4], got {0}")]
    InvalidDensity(f64),
    #[error("cell {0} is not traversable")]
    NotTraversable(CellId),
    #[error("need at least 2 traversable cells, graph has {0}")]
    TooFewCells(usize),
    #[error("no path between cells {0} and {1}")]
    Unreachable(CellId, CellId),
    #[error("episode is already done")]
    EpisodeDone,
}

/// Compass heading; also the fixed neighbor expansion order (N, E, S, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

pub const HEADINGS: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

impl Heading {
    /// Grid delta (dx, dy); y grows southward (row 0 is the top).
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn left(self) -> Heading {
        match self {
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::East => Heading::North,
        }
    }

    pub fn right(self) -> Heading {
        match self {
            Heading::North => Heading::East,
            Heading::East => Heading::South,
            Heading::South => Heading::West,
            Heading::West => Heading::North,
        }
    }

    /// Math-convention angle (radians, counterclockwise, y flipped so that
    /// North is +pi/2).
    pub fn angle(self) -> f64 {
        match self {
            Heading::East => 0.0,
            Heading::North => std::f64::consts::FRAC_PI_2,
            Heading::West => std::f64::consts::PI,
            Heading::South => -std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Heading::North => 0,
            Heading::East => 1,
            Heading::South => 2,
            Heading::West => 3,
        }
    }
}

/// Robot position plus facing direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pose {
    pub cell: CellId,
    pub heading: Heading,
}

/// The discrete action space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

pub const ACTIONS: [Action; 4] = [
    Action::MoveForward,
    Action::TurnLeft,
    Action::TurnRight,
    Action::Stop,
];

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::MoveForward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        ACTIONS.get(i).copied()
    }
}

/// Grid-cell navigability graph with implicit 4-neighborhood adjacency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavGraph {
    width: usize,
    height: usize,
    traversable: Vec<bool>,
    resolution_m: f64,
}

impl NavGraph {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution_m(&self) -> f64 {
        self.resolution_m
    }

    pub fn cell_count(&self) -> usize {
        self.traversable.len()
    }

    pub fn xy(&self, cell: CellId) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn cell_at(&self, x: usize, y: usize) -> CellId {
        y * self.width + x
    }

    pub fn is_traversable(&self, cell: CellId) -> bool {
        cell < self.traversable.len() && self.traversable[cell]
    }

    /// The traversable cell one step along `heading`, if any.
    pub fn neighbor(&self, cell: CellId, heading: Heading) -> Option<CellId> {
        let (x, y) = self.xy(cell);
        let (dx, dy) = heading.delta();
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            return None;
        }
        let id = self.cell_at(nx as usize, ny as usize);
        self.traversable[id].then_some(id)
    }

    /// Neighbors in the fixed N, E, S, W order.
    pub fn neighbors(&self, cell: CellId) -> impl Iterator<Item = CellId> + '_ {
        HEADINGS.iter().filter_map(move |&h| self.neighbor(cell, h))
    }

    /// Ascending ids of all traversable cells.
    pub fn traversable_cells(&self) -> Vec<CellId> {
        (0..self.cell_count()).filter(|&c| self.traversable[c]).collect()
    }

    pub fn traversable_count(&self) -> usize {
        self.traversable.iter().filter(|&&t| t).count()
    }

    pub fn manhattan(&self, a: CellId, b: CellId) -> usize {
        let (ax, ay) = self.xy(a);
        let (bx, by) = self.xy(b);
        ax.abs_diff(bx) + ay.abs_diff(by)
    }

    /// Geodesic hop distances from `start` to every cell (None if unreachable
    /// or untraversable).
    pub fn bfs_distances_from(&self, start: CellId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cell_count()];
        if !self.is_traversable(start) {
            return dist;
        }
        dist[start] = Some(0);
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            let d = dist[c].unwrap();
            for n in self.neighbors(c) {
                if dist[n].is_none() {
                    dist[n] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn bfs_distance(&self, a: CellId, b: CellId) -> Option<usize> {
        self.bfs_distances_from(a)[b]
    }

    /// True when the traversable cells form a single connected component.
    pub fn is_connected(&self) -> bool {
        let cells = self.traversable_cells();
        match cells.first() {
            None => true,
            Some(&first) => {
                let dist = self.bfs_distances_from(first);
                cells.iter().all(|&c| dist[c].is_some())
            }
        }
    }

    /// ASCII map: '#' wall, '.' free, 'R' robot, 'S' source.
    pub fn to_ascii(&self, robot: Option<CellId>, source: Option<CellId>) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let id = self.cell_at(x, y);
                let ch = if robot == Some(id) {
                    'R'
                } else if source == Some(id) {
                    'S'
                } else if self.traversable[id] {
                    '.'
                } else {
                    '#'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    /// Builds a graph from an ASCII map ('#' wall, anything else free).
    pub fn from_ascii(map: &str) -> NavGraph {
        let rows: Vec<&str> = map.lines().filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.iter().map(|r| r.chars().count()).max().unwrap_or(0);
        let mut traversable = vec![false; width * height];
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                traversable[y * width + x] = ch != '#';
            }
        }
        NavGraph {
            width,
            height,
            traversable,
            resolution_m: 0.5,
        }
    }
}

/// Generates a connected navigation grid.
///
/// Cells are first knocked out independently with probability
/// `obstacle_density`; traversable pockets disconnected from the largest
/// component are then filled in, so the result is always one connected
/// component. Deterministic in `seed`.
pub fn generate_grid(
    seed: u64,
    width: usize,
    height: usize,
    obstacle_density: f64,
) -> Result<NavGraph, GridError> {
    if width < 3 || height < 3 {
        return Err(GridError::InvalidDimensions(width, height));
    }
    if !(0.0..=0.4).contains(&obstacle_density) {
        return Err(GridError::InvalidDensity(obstacle_density));
    }

    let mut rng = stream_from_seed(seed);
    let mut traversable: Vec<bool> = (0..width * height)
        .map(|_| rng.gen::<f64>() >= obstacle_density)
        .collect();

    if !traversable.iter().any(|&t| t) {
        // Everything got knocked out; keep the center cell so the graph is
        // non-empty.
        traversable[(height / 2) * width + width / 2] = true;
    }

    let mut graph = NavGraph {
        width,
        height,
        traversable,
        resolution_m: 0.5,
    };

    // Keep only the largest component (first one wins ties by scan order).
    let mut best: Vec<CellId> = Vec::new();
    let mut seen = vec![false; graph.cell_count()];
    for start in 0..graph.cell_count() {
        if !graph.traversable[start] || seen[start] {
            continue;
        }
        let mut component = vec![start];
        seen[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            for n in graph.neighbors(c) {
                if !seen[n] {
                    seen[n] = true;
                    component.push(n);
                    queue.push_back(n);
                }
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }
    let keep: std::collections::HashSet<CellId> = best.into_iter().collect();
    for c in 0..graph.cell_count() {
        graph.traversable[c] = keep.contains(&c);
    }
    Ok(graph)
}

/// Minimum-hop path `a -> b` inclusive, or None if unreachable. Ties are
/// broken by the fixed N, E, S, W neighbor order.
pub fn bfs_shortest_path(
    graph: &NavGraph,
    a: CellId,
    b: CellId,
) -> Result<Option<Vec<CellId>>, GridError> {
    if !graph.is_traversable(a) {
        return Err(GridError::NotTraversable(a));
    }
    if !graph.is_traversable(b) {
        return Err(GridError::NotTraversable(b));
    }
    if a == b {
        return Ok(Some(vec![a]));
    }
    let mut parent: Vec<Option<CellId>> = vec![None; graph.cell_count()];
    let mut visited = vec![false; graph.cell_count()];
    visited[a] = true;
    let mut queue = std::collections::VecDeque::from([a]);
    while let Some(c) = queue.pop_front() {
        for n in graph.neighbors(c) {
            if !visited[n] {
                visited[n] = true;
                parent[n] = Some(c);
                if n == b {
                    let mut path = vec![b];
                    let mut cur = b;
                    while let Some(p) = parent[cur] {
                        path.push(p);
                        cur = p;
                    }
                    path.reverse();
                    return Ok(Some(path));
                }
                queue.push_back(n);
            }
        }
    }
    Ok(None)
}

/// Minimum number of actions (moves plus rotations) to bring `start` onto
/// `goal`, via BFS over (cell, heading) states. None if unreachable.
pub fn min_action_count(graph: &NavGraph, start: Pose, goal: CellId) -> Option<usize> {
    if !graph.is_traversable(start.cell) || !graph.is_traversable(goal) {
        return None;
    }
    if start.cell == goal {
        return Some(0);
    }
    let idx = |cell: CellId, h: Heading| cell * 4 + h.index();
    let mut dist = vec![None; graph.cell_count() * 4];
    dist[idx(start.cell, start.heading)] = Some(0usize);
    let mut queue = std::collections::VecDeque::from([(start.cell, start.heading)]);
    while let Some((cell, heading)) = queue.pop_front() {
        let d = dist[idx(cell, heading)].unwrap();
        let push = |cell: CellId, h: Heading, dist_v: &mut Vec<Option<usize>>, q: &mut std::collections::VecDeque<(CellId, Heading)>| {
            if dist_v[idx(cell, h)].is_none() {
                dist_v[idx(cell, h)] = Some(d + 1);
                q.push_back((cell, h));
            }
        };
        if let Some(n) = graph.neighbor(cell, heading) {
            if n == goal {
                return Some(d + 1);
            }
            push(n, heading, &mut dist, &mut queue);
        }
        push(cell, heading.left(), &mut dist, &mut queue);
        push(cell, heading.right(), &mut dist, &mut queue);
    }
    None
}
