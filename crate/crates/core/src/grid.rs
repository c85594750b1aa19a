//! Deterministic 2-D grid environment.
//!
//! A [`GridSpec`] fixes the layout (obstacles, treasures, start cell). The
//! transition function [`step`] is total and deterministic: moves into walls,
//! obstacles or off the grid leave the agent in place. Every step costs
//! `STEP_COST`; entering a treasure cell for the first time pays
//! `TREASURE_REWARD`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STEP_COST: f64 = 0.01;
pub const TREASURE_REWARD: f64 = 1.0;

/// Regeneration attempts before `generate` gives up on reachability.
const MAX_LAYOUT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("capacity: {obstacles} obstacles + {treasures} treasures + start exceed {cells} cells")]
    Capacity {
        obstacles: usize,
        treasures: usize,
        cells: usize,
    },
    #[error("no layout with reachable treasures after {0} attempts")]
    Unreachable(usize),
    #[error("grid text line {line}: {msg}")]
    Text { line: usize, msg: String },
    #[error("grid json: {0}")]
    Json(String),
}

/// A cell coordinate `(row, col)`, serialized as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord(pub usize, pub usize);

impl Coord {
    pub fn row(self) -> usize {
        self.0
    }

    pub fn col(self) -> usize {
        self.1
    }

    pub fn manhattan(self, other: Coord) -> usize {
        self.0.abs_diff(other.0) + self.1.abs_diff(other.1)
    }

    pub fn is_adjacent(self, other: Coord) -> bool {
        self.manhattan(other) == 1
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Empty,
    Obstacle,
    Treasure,
}

/// One of the four movement directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "U")]
    Up,
    #[serde(rename = "D")]
    Down,
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl Action {
    /// Tie-break order used everywhere a choice between directions is made.
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn token(self) -> char {
        match self {
            Action::Up => 'U',
            Action::Down => 'D',
            Action::Left => 'L',
            Action::Right => 'R',
        }
    }

    pub fn from_token(token: &str) -> Option<Action> {
        match token.to_ascii_uppercase().as_str() {
            "U" => Some(Action::Up),
            "D" => Some(Action::Down),
            "L" => Some(Action::Left),
            "R" => Some(Action::Right),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    /// The direction that moves `from` onto the adjacent cell `to`.
    pub fn between(from: Coord, to: Coord) -> Option<Action> {
        Action::ALL
            .into_iter()
            .find(|a| a.offset(from, usize::MAX, usize::MAX) == Some(to))
    }

    /// Target cell of this move, or `None` when it would leave a
    /// `height`×`width` grid.
    pub fn offset(self, from: Coord, height: usize, width: usize) -> Option<Coord> {
        let Coord(r, c) = from;
        match self {
            Action::Up => r.checked_sub(1).map(|r| Coord(r, c)),
            Action::Down => (r + 1 < height).then_some(Coord(r + 1, c)),
            Action::Left => c.checked_sub(1).map(|c| Coord(r, c)),
            Action::Right => (c + 1 < width).then_some(Coord(r, c + 1)),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.token())
    }
}

/// Agent position plus the set of treasures collected so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentState {
    pub position: Coord,
    pub collected: BTreeSet<Coord>,
}

impl AgentState {
    pub fn at(position: Coord) -> Self {
        Self {
            position,
            collected: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: AgentState,
    pub reward: f64,
    pub done: bool,
}

/// State/action pairs of one episode plus the state reached after the last
/// action.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub pairs: Vec<(AgentState, Action)>,
    pub last: AgentState,
}

impl Trajectory {
    pub fn starting_at(state: AgentState) -> Self {
        Self {
            pairs: Vec::new(),
            last: state,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every occupied position in order, including the final one.
    pub fn positions(&self) -> impl Iterator<Item = Coord> + '_ {
        self.pairs
            .iter()
            .map(|(s, _)| s.position)
            .chain(std::iter::once(self.last.position))
    }

    pub fn visits(&self, cell: Coord) -> bool {
        self.positions().any(|p| p == cell)
    }

    /// Checks that consecutive pairs follow from [`step`].
    pub fn validate(&self, spec: &GridSpec) -> Result<(), GridError> {
        for (i, (state, action)) in self.pairs.iter().enumerate() {
            let next = step(spec, state, *action)?.next_state;
            let expected = self.pairs.get(i + 1).map(|(s, _)| s).unwrap_or(&self.last);
            if &next != expected {
                return Err(GridError::Invariant(format!(
                    "trajectory pair {i} does not lead to the next state"
                )));
            }
        }
        Ok(())
    }
}

/// Immutable grid layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    width: usize,
    height: usize,
    cells: Vec<CellKind>,
    start: Coord,
    env_id: String,
}

impl GridSpec {
    /// Builds and validates a layout. `cells` is row-major with
    /// `height * width` entries.
    pub fn new(
        env_id: impl Into<String>,
        width: usize,
        height: usize,
        cells: Vec<CellKind>,
        start: Coord,
    ) -> Result<Self, GridError> {
        let spec = Self {
            width,
            height,
            cells,
            start,
            env_id: env_id.into(),
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), GridError> {
        if self.width == 0 || self.height == 0 {
            return Err(GridError::Invariant("grid dimensions must be positive".into()));
        }
        if self.cells.len() != self.width * self.height {
            return Err(GridError::Invariant(format!(
                "cells has {} entries, expected {}",
                self.cells.len(),
                self.width * self.height
            )));
        }
        if !self.in_bounds(self.start) {
            return Err(GridError::Invariant(format!("start {} out of bounds", self.start)));
        }
        match self.cell(self.start) {
            CellKind::Obstacle => {
                return Err(GridError::Invariant("start is an obstacle".into()));
            }
            CellKind::Treasure => {
                return Err(GridError::Invariant("start holds a treasure".into()));
            }
            CellKind::Empty => {}
        }
        let reachable = self.reachable_from(self.start);
        if !self.treasures().any(|t| reachable.contains(&t)) {
            return Err(GridError::Invariant("no treasure reachable from start".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Coord {
        self.start
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn in_bounds(&self, c: Coord) -> bool {
        c.0 < self.height && c.1 < self.width
    }

    pub fn index(&self, c: Coord) -> usize {
        c.0 * self.width + c.1
    }

    pub fn coord(&self, index: usize) -> Coord {
        Coord(index / self.width, index % self.width)
    }

    /// Kind of an in-bounds cell.
    pub fn cell(&self, c: Coord) -> CellKind {
        self.cells[self.index(c)]
    }

    pub fn is_free(&self, c: Coord) -> bool {
        self.in_bounds(c) && self.cell(c) != CellKind::Obstacle
    }

    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.area()).map(|i| self.coord(i))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Coord> + '_ {
        self.coords().filter(|&c| self.is_free(c))
    }

    pub fn obstacles(&self) -> impl Iterator<Item = Coord> + '_ {
        self.coords().filter(|&c| self.cell(c) == CellKind::Obstacle)
    }

    /// Treasure cells in row-major order.
    pub fn treasures(&self) -> impl Iterator<Item = Coord> + '_ {
        self.coords().filter(|&c| self.cell(c) == CellKind::Treasure)
    }

    pub fn treasure_count(&self) -> usize {
        self.treasures().count()
    }

    /// Free in-bounds neighbours in action order.
    pub fn neighbors(&self, c: Coord) -> impl Iterator<Item = (Action, Coord)> + '_ {
        Action::ALL.into_iter().filter_map(move |a| {
            a.offset(c, self.height, self.width)
                .filter(|&n| self.cell(n) != CellKind::Obstacle)
                .map(|n| (a, n))
        })
    }

    /// Cells 4-connected to `from` through free cells.
    pub fn reachable_from(&self, from: Coord) -> BTreeSet<Coord> {
        let mut seen = vec![false; self.area()];
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::from([from]);
        seen[self.index(from)] = true;
        while let Some(c) = queue.pop_front() {
            out.insert(c);
            for (_, n) in self.neighbors(c) {
                let i = self.index(n);
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(n);
                }
            }
        }
        out
    }

    /// Same obstacles, different start and treasure set.
    pub fn with_task(&self, start: Coord, treasures: &[Coord]) -> Result<GridSpec, GridError> {
        let mut cells: Vec<CellKind> = self
            .cells
            .iter()
            .map(|k| match k {
                CellKind::Treasure => CellKind::Empty,
                other => *other,
            })
            .collect();
        for &t in treasures {
            if !self.is_free(t) {
                return Err(GridError::Invariant(format!("treasure {t} on a blocked cell")));
            }
            cells[self.index(t)] = CellKind::Treasure;
        }
        GridSpec::new(self.env_id.clone(), self.width, self.height, cells, start)
    }

    pub fn check_state(&self, state: &AgentState) -> Result<(), GridError> {
        if !self.is_free(state.position) {
            return Err(GridError::Invariant(format!(
                "position {} is out of bounds or blocked",
                state.position
            )));
        }
        if let Some(c) = state
            .collected
            .iter()
            .find(|&&c| !self.in_bounds(c) || self.cell(c) != CellKind::Treasure)
        {
            return Err(GridError::Invariant(format!("collected cell {c} is not a treasure")));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> AgentState {
        AgentState::at(self.start)
    }

    /// One character per cell: `#` obstacle, `T` treasure, `.` empty,
    /// `S` start. Each row ends with a newline.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.area() + self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let coord = Coord(r, c);
                out.push(if coord == self.start {
                    'S'
                } else {
                    match self.cell(coord) {
                        CellKind::Empty => '.',
                        CellKind::Obstacle => '#',
                        CellKind::Treasure => 'T',
                    }
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(env_id: impl Into<String>, text: &str) -> Result<GridSpec, GridError> {
        let rows: Vec<&str> = text.lines().collect();
        let height = rows.len();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        let mut cells = Vec::with_capacity(width * height);
        let mut start = None;
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(GridError::Text {
                    line: r + 1,
                    msg: format!("expected {width} cells"),
                });
            }
            for (c, ch) in row.chars().enumerate() {
                cells.push(match ch {
                    '#' => CellKind::Obstacle,
                    'T' => CellKind::Treasure,
                    '.' => CellKind::Empty,
                    'S' => {
                        if start.replace(Coord(r, c)).is_some() {
                            return Err(GridError::Text {
                                line: r + 1,
                                msg: "second start cell".into(),
                            });
                        }
                        CellKind::Empty
                    }
                    other => {
                        return Err(GridError::Text {
                            line: r + 1,
                            msg: format!("unknown cell character {other:?}"),
                        })
                    }
                });
            }
        }
        let start = start.ok_or(GridError::Text {
            line: 0,
            msg: "no start cell".into(),
        })?;
        GridSpec::new(env_id, width, height, cells, start)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GridJson::from(self)).expect("grid json serializes")
    }

    pub fn from_json(text: &str) -> Result<GridSpec, GridError> {
        let doc: GridJson = serde_json::from_str(text).map_err(|e| GridError::Json(e.to_string()))?;
        doc.try_into()
    }
}

/// Wire form of a [`GridSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridJson {
    pub width: usize,
    pub height: usize,
    pub start: Coord,
    pub obstacles: Vec<Coord>,
    pub treasures: Vec<Coord>,
    pub env_id: String,
}

impl From<&GridSpec> for GridJson {
    fn from(spec: &GridSpec) -> Self {
        Self {
            width: spec.width,
            height: spec.height,
            start: spec.start,
            obstacles: spec.obstacles().collect(),
            treasures: spec.treasures().collect(),
            env_id: spec.env_id.clone(),
        }
    }
}

impl TryFrom<GridJson> for GridSpec {
    type Error = GridError;

    fn try_from(doc: GridJson) -> Result<Self, Self::Error> {
        let mut cells = vec![CellKind::Empty; doc.width * doc.height];
        let place = |cells: &mut Vec<CellKind>, c: Coord, kind: CellKind| {
            if c.0 >= doc.height || c.1 >= doc.width {
                return Err(GridError::Json(format!("cell {c} out of bounds")));
            }
            let slot = &mut cells[c.0 * doc.width + c.1];
            if *slot != CellKind::Empty {
                return Err(GridError::Json(format!("cell {c} listed twice")));
            }
            *slot = kind;
            Ok(())
        };
        for &c in &doc.obstacles {
            place(&mut cells, c, CellKind::Obstacle)?;
        }
        for &c in &doc.treasures {
            place(&mut cells, c, CellKind::Treasure)?;
        }
        GridSpec::new(doc.env_id, doc.width, doc.height, cells, doc.start)
    }
}

/// Deterministic transition and reward.
pub fn step(spec: &GridSpec, state: &AgentState, action: Action) -> Result<StepOutcome, GridError> {
    spec.check_state(state)?;
    let position = action
        .offset(state.position, spec.height, spec.width)
        .filter(|&c| spec.cell(c) != CellKind::Obstacle)
        .unwrap_or(state.position);
    let mut next = AgentState {
        position,
        collected: state.collected.clone(),
    };
    let mut reward = -STEP_COST;
    if spec.cell(position) == CellKind::Treasure && next.collected.insert(position) {
        reward += TREASURE_REWARD;
    }
    let done = next.collected.len() == spec.treasure_count();
    Ok(StepOutcome {
        next_state: next,
        reward,
        done,
    })
}

/// Seeded layout generator. Placements are redrawn from the same stream until
/// every treasure is reachable from the start.
pub fn generate(
    seed: u64,
    width: usize,
    height: usize,
    n_obstacles: usize,
    n_treasures: usize,
) -> Result<GridSpec, GridError> {
    let cells = width * height;
    if n_obstacles + n_treasures + 1 > cells {
        return Err(GridError::Capacity {
            obstacles: n_obstacles,
            treasures: n_treasures,
            cells,
        });
    }
    if n_treasures == 0 {
        return Err(GridError::Invariant("at least one treasure is required".into()));
    }
    let env_id = format!("grid-{width}x{height}-s{seed}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cells).collect();
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        order.shuffle(&mut rng);
        let start = Coord(order[0] / width, order[0] % width);
        let mut kinds = vec![CellKind::Empty; cells];
        for &i in &order[1..1 + n_obstacles] {
            kinds[i] = CellKind::Obstacle;
        }
        for &i in &order[1 + n_obstacles..1 + n_obstacles + n_treasures] {
            kinds[i] = CellKind::Treasure;
        }
        let Ok(spec) = GridSpec::new(env_id.clone(), width, height, kinds, start) else {
            continue;
        };
        let reachable = spec.reachable_from(start);
        if spec.treasures().all(|t| reachable.contains(&t)) {
            return Ok(spec);
        }
    }
    Err(GridError::Unreachable(MAX_LAYOUT_ATTEMPTS))
}

/// Shortest 4-connected path from `from` to `to` that avoids obstacles and
/// `forbidden` cells (`from` itself may be forbidden). Among shortest paths
/// the one whose move sequence is smallest in Up<Down<Left<Right order is
/// returned.
pub fn bfs_oracle(
    spec: &GridSpec,
    from: Coord,
    to: Coord,
    forbidden: &BTreeSet<Coord>,
) -> Result<Option<Vec<Coord>>, GridError> {
    for c in [from, to] {
        if !spec.is_free(c) {
            return Err(GridError::Invariant(format!("endpoint {c} out of bounds or blocked")));
        }
    }
    if from == to {
        return Ok(Some(vec![from]));
    }
    if forbidden.contains(&to) {
        return Ok(None);
    }
    let dist = distances_to(spec, to, |c| !forbidden.contains(&c));
    let Some(mut remaining) = dist[spec.index(from)] else {
        return Ok(None);
    };
    let mut path = vec![from];
    let mut at = from;
    while remaining > 0 {
        let next = spec
            .neighbors(at)
            .map(|(_, n)| n)
            .find(|&n| dist[spec.index(n)] == Some(remaining - 1))
            .expect("a neighbour one step closer exists on a finite distance");
        path.push(next);
        at = next;
        remaining -= 1;
    }
    Ok(Some(path))
}

/// Breadth-first distances to `target` over free cells accepted by
/// `passable`. The target itself is always included.
pub fn distances_to(
    spec: &GridSpec,
    target: Coord,
    passable: impl Fn(Coord) -> bool,
) -> Vec<Option<usize>> {
    let mut dist = vec![None; spec.area()];
    dist[spec.index(target)] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some(c) = queue.pop_front() {
        let d = dist[spec.index(c)].unwrap_or(0);
        for (_, n) in spec.neighbors(c) {
            let i = spec.index(n);
            if dist[i].is_none() && passable(n) {
                dist[i] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}
