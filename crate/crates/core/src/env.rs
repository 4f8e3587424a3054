//! Deterministic goal-reaching mazes.
//!
//! Two variants share one layout: a grid world with five discrete moves and a
//! point maze with bounded planar velocity commands. Coordinates are `(x, y)`
//! with `x` the column and `y` the row of the layout text (row 0 on top); cell
//! centres sit on integer coordinates.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle;

/// Integer grid cell `[x, y]`.
pub type Cell = [usize; 2];

/// A point in the maze, in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State(pub [f64; 2]);

impl State {
    pub fn from_cell(c: Cell) -> Self {
        State([c[0] as f64, c[1] as f64])
    }

    pub fn coords(&self) -> &[f64; 2] {
        &self.0
    }

    /// Nearest cell centre, or `None` outside the non-negative quadrant.
    pub fn cell(&self) -> Option<Cell> {
        let x = self.0[0].round();
        let y = self.0[1].round();
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
            return None;
        }
        Some([x as usize, y as usize])
    }

    pub fn distance(&self, other: &State) -> f64 {
        ((self.0[0] - other.0[0]).powi(2) + (self.0[1] - other.0[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridAction {
    North,
    South,
    East,
    West,
    Stay,
}

impl GridAction {
    pub const ALL: [GridAction; 5] =
        [GridAction::North, GridAction::South, GridAction::East, GridAction::West, GridAction::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            GridAction::North => (0, -1),
            GridAction::South => (0, 1),
            GridAction::East => (1, 0),
            GridAction::West => (-1, 0),
            GridAction::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Grid(GridAction),
    Point([f64; 2]),
}

/// How actions look to networks and files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    /// Five moves, encoded one-hot.
    Discrete,
    /// Two reals in [-1, 1].
    Continuous,
}

impl ActionSpace {
    /// Width of the network encoding.
    pub fn encoding_dim(self) -> usize {
        match self {
            ActionSpace::Discrete => GridAction::ALL.len(),
            ActionSpace::Continuous => 2,
        }
    }

    /// Number of scalar columns in dataset files.
    pub fn file_dim(self) -> usize {
        match self {
            ActionSpace::Discrete => 1,
            ActionSpace::Continuous => 2,
        }
    }

    pub fn encode_into(self, a: &Action, out: &mut [f64]) -> Result<()> {
        match (self, a) {
            (ActionSpace::Discrete, Action::Grid(g)) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[g.index()] = 1.0;
                Ok(())
            }
            (ActionSpace::Continuous, Action::Point(v)) => {
                out[..2].copy_from_slice(v);
                Ok(())
            }
            _ => Err(Error::InvalidAction(format!("{a:?} in {self:?} space"))),
        }
    }

    pub fn encode(self, a: &Action) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.encoding_dim()];
        self.encode_into(a, &mut out)?;
        Ok(out)
    }

    pub fn to_file_values(self, a: &Action) -> Vec<f64> {
        match a {
            Action::Grid(g) => vec![g.index() as f64],
            Action::Point(v) => v.to_vec(),
        }
    }

    pub fn from_file_values(self, vals: &[f64]) -> Result<Action> {
        match self {
            ActionSpace::Discrete => {
                let i = vals.first().copied().unwrap_or(f64::NAN);
                if i.fract() != 0.0 || i < 0.0 {
                    return Err(Error::Parse(format!("bad discrete action {i}")));
                }
                GridAction::from_index(i as usize)
                    .map(Action::Grid)
                    .ok_or_else(|| Error::Parse(format!("bad discrete action {i}")))
            }
            ActionSpace::Continuous => {
                if vals.len() < 2 {
                    return Err(Error::Parse("continuous action needs two values".into()));
                }
                Ok(Action::Point([vals[0], vals[1]]))
            }
        }
    }

    pub fn random<R: Rng + ?Sized>(self, rng: &mut R) -> Action {
        match self {
            ActionSpace::Discrete => Action::Grid(*GridAction::ALL.choose(rng).unwrap()),
            ActionSpace::Continuous => Action::Point([rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]),
        }
    }
}

/// Parsed maze text: walls plus start and goal candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MazeLayout {
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    pub starts: Vec<Cell>,
    pub goals: Vec<Cell>,
}

impl MazeLayout {
    /// Parses `#` (wall), `.` (free), `S` (start candidate), `G` (goal candidate).
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::InvalidMaze("empty layout".into()));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut walls = Vec::with_capacity(width * height);
        let mut starts = Vec::new();
        let mut goals = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::InvalidMaze(format!("row {y} has {} cells, expected {width}", row.chars().count())));
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        walls.push(false);
                        starts.push([x, y]);
                    }
                    'G' => {
                        walls.push(false);
                        goals.push([x, y]);
                    }
                    other => return Err(Error::InvalidMaze(format!("unexpected character {other:?} at ({x}, {y})"))),
                }
            }
        }
        let layout = Self { width, height, walls, starts, goals };
        if layout.free_cells().is_empty() {
            return Err(Error::InvalidMaze("no free cells".into()));
        }
        Ok(layout)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidMaze(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Open rectangle without walls.
    pub fn open(width: usize, height: usize) -> Self {
        Self { width, height, walls: vec![false; width * height], starts: vec![], goals: vec![] }
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        c[0] >= self.width || c[1] >= self.height || self.walls[c[1] * self.width + c[0]]
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c[0] < self.width && c[1] < self.height
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.walls[y * self.width + x] {
                    out.push([x, y]);
                }
            }
        }
        out
    }

    /// Free 4-neighbours of `c`.
    pub fn neighbours(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        GridAction::ALL[..4].iter().filter_map(move |a| self.shift(c, *a))
    }

    fn shift(&self, c: Cell, a: GridAction) -> Option<Cell> {
        let (dx, dy) = a.delta();
        let nx = c[0] as i64 + dx;
        let ny = c[1] as i64 + dy;
        if nx < 0 || ny < 0 {
            return None;
        }
        let n = [nx as usize, ny as usize];
        (!self.is_wall(n)).then_some(n)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = [x, y];
                let ch = if self.is_wall(c) {
                    '#'
                } else if self.goals.contains(&c) {
                    'G'
                } else if self.starts.contains(&c) {
                    'S'
                } else {
                    '.'
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

impl fmt::Display for MazeLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Dynamics variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvKind {
    Grid,
    Point { step_size: f64, goal_radius: f64 },
}

impl EnvKind {
    pub const DEFAULT_POINT: EnvKind = EnvKind::Point { step_size: 0.2, goal_radius: 0.5 };
}

/// A maze plus its dynamics. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeEnv {
    layout: MazeLayout,
    kind: EnvKind,
    /// Start cells with sampling weights.
    start_distribution: Vec<(Cell, f64)>,
}

impl MazeEnv {
    /// Builds an env; every goal candidate must be reachable from every start.
    pub fn new(layout: MazeLayout, kind: EnvKind) -> Result<Self> {
        let starts = if layout.starts.is_empty() { layout.free_cells() } else { layout.starts.clone() };
        for &g in &layout.goals {
            let dist = oracle::bfs_from(&layout, g)?;
            for &s in &starts {
                if dist[s[1] * layout.width + s[0]].is_none() {
                    return Err(Error::Unreachable { from: s, to: g });
                }
            }
        }
        let w = 1.0 / starts.len() as f64;
        let start_distribution = starts.into_iter().map(|c| (c, w)).collect();
        Ok(Self { layout, kind, start_distribution })
    }

    pub fn grid(layout: MazeLayout) -> Result<Self> {
        Self::new(layout, EnvKind::Grid)
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.kind {
            EnvKind::Grid => ActionSpace::Discrete,
            EnvKind::Point { .. } => ActionSpace::Continuous,
        }
    }

    pub fn start_distribution(&self) -> &[(Cell, f64)] {
        &self.start_distribution
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(c, w) in &self.start_distribution {
            acc += w;
            if u < acc {
                return State::from_cell(c);
            }
        }
        State::from_cell(self.start_distribution.last().unwrap().0)
    }

    /// Largest side of the bounding box, used to normalise network inputs.
    pub fn scale(&self) -> f64 {
        self.layout.width.max(self.layout.height) as f64
    }

    /// Whether `s` is a legal state.
    pub fn is_valid(&self, s: &State) -> bool {
        match self.kind {
            EnvKind::Grid => {
                s.0.iter().all(|v| v.fract() == 0.0) && s.cell().is_some_and(|c| !self.layout.is_wall(c))
            }
            EnvKind::Point { .. } => {
                let [x, y] = s.0;
                x >= -0.5
                    && y >= -0.5
                    && x < self.layout.width as f64 - 0.5
                    && y < self.layout.height as f64 - 0.5
                    && s.cell().is_some_and(|c| !self.layout.is_wall(c))
            }
        }
    }

    /// Whether `s` lies in a wall or outside the maze. Used on decoded states.
    pub fn in_wall(&self, s: &State) -> bool {
        match s.cell() {
            Some(c) => self.layout.is_wall(c),
            None => true,
        }
    }

    /// Deterministic transition. Blocked moves leave the state unchanged.
    pub fn step(&self, s: &State, a: &Action) -> Result<State> {
        if !self.is_valid(s) {
            return Err(Error::InvalidState(s.0));
        }
        match (self.kind, a) {
            (EnvKind::Grid, Action::Grid(g)) => {
                let c = s.cell().unwrap();
                Ok(self.layout.shift(c, *g).map(State::from_cell).unwrap_or(*s))
            }
            (EnvKind::Point { step_size, .. }, Action::Point(v)) => {
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::InvalidAction(format!("{v:?}")));
                }
                let ax = v[0].clamp(-1.0, 1.0);
                let ay = v[1].clamp(-1.0, 1.0);
                let next = State([s.0[0] + step_size * ax, s.0[1] + step_size * ay]);
                Ok(if self.is_valid(&next) { next } else { *s })
            }
            _ => Err(Error::InvalidAction(format!("{a:?} in {:?} env", self.kind))),
        }
    }

    /// Indicator goal reward. Exact cell match on the grid (decoded states are
    /// rounded to their cell), within `goal_radius` in the point maze.
    pub fn goal_reward(&self, s: &State, g: &State) -> f64 {
        let hit = match self.kind {
            EnvKind::Grid => s.cell().is_some() && s.cell() == g.cell(),
            EnvKind::Point { goal_radius, .. } => s.distance(g) <= goal_radius,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    pub fn reached(&self, s: &State, g: &State) -> bool {
        self.goal_reward(s, g) == 1.0
    }
}

/// One behaviour episode: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Per-episode scratch state of a behaviour policy.
#[derive(Debug, Clone, Default)]
pub struct EpisodeMemory {
    pub waypoint: Option<Cell>,
    /// BFS distances to the current waypoint, indexed by `y * width + x`.
    waypoint_dist: Vec<Option<usize>>,
}

/// Data-collection policy used to build offline datasets.
pub trait BehaviorPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    fn reset(&self, _env: &MazeEnv, _s0: &State, _rng: &mut ChaCha8Rng) -> Result<EpisodeMemory> {
        Ok(EpisodeMemory::default())
    }

    fn act(&self, env: &MazeEnv, s: &State, memory: &mut EpisodeMemory, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// Uniform over the action space.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRandom;

impl BehaviorPolicy for UniformRandom {
    fn name(&self) -> &'static str {
        "uniform-random"
    }

    fn act(&self, env: &MazeEnv, _s: &State, _m: &mut EpisodeMemory, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(env.action_space().random(rng))
    }
}

/// Epsilon-greedy shortest-path walker toward random waypoints ("play" data).
#[derive(Debug, Clone, Copy)]
pub struct WaypointPlanner {
    pub epsilon: f64,
}

impl WaypointPlanner {
    fn pick_waypoint(env: &MazeEnv, here: Cell, memory: &mut EpisodeMemory, rng: &mut ChaCha8Rng) -> Result<()> {
        let free = env.layout().free_cells();
        let candidates: Vec<Cell> = free.into_iter().filter(|c| *c != here).collect();
        let Some(&w) = candidates.choose(rng) else {
            memory.waypoint = Some(here);
            memory.waypoint_dist = oracle::bfs_from(env.layout(), here)?;
            return Ok(());
        };
        let dist = oracle::bfs_from(env.layout(), w)?;
        if dist[here[1] * env.layout().width + here[0]].is_none() {
            return Err(Error::Unreachable { from: here, to: w });
        }
        memory.waypoint = Some(w);
        memory.waypoint_dist = dist;
        Ok(())
    }
}

impl BehaviorPolicy for WaypointPlanner {
    fn name(&self) -> &'static str {
        "planner"
    }

    fn act(&self, env: &MazeEnv, s: &State, memory: &mut EpisodeMemory, rng: &mut ChaCha8Rng) -> Result<Action> {
        let here = s.cell().ok_or(Error::InvalidState(s.0))?;
        if memory.waypoint.is_none_or(|w| w == here) {
            Self::pick_waypoint(env, here, memory, rng)?;
        }
        if rng.gen::<f64>() < self.epsilon {
            return Ok(env.action_space().random(rng));
        }
        let layout = env.layout();
        let idx = |c: Cell| c[1] * layout.width + c[0];
        let d_here = memory.waypoint_dist[idx(here)].ok_or(Error::Unreachable { from: here, to: memory.waypoint.unwrap() })?;
        let downhill: Vec<GridAction> = GridAction::ALL[..4]
            .iter()
            .copied()
            .filter(|a| layout.shift(here, *a).is_some_and(|n| memory.waypoint_dist[idx(n)] == Some(d_here.wrapping_sub(1))))
            .collect();
        let mv = *downhill.choose(rng).unwrap_or(&GridAction::Stay);
        Ok(match env.action_space() {
            ActionSpace::Discrete => Action::Grid(mv),
            ActionSpace::Continuous => {
                // Head for the centre of the next cell.
                let target = layout.shift(here, mv).unwrap_or(here);
                let dx = target[0] as f64 - s.0[0];
                let dy = target[1] as f64 - s.0[1];
                let n = (dx * dx + dy * dy).sqrt().max(1e-9);
                Action::Point([dx / n, dy / n])
            }
        })
    }
}

fn trajectory_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step so neighbouring trajectories get unrelated streams
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rolls `n_traj` behaviour episodes of exactly `horizon` states each. Every
/// trajectory uses its own stream derived from `seed`.
pub fn generate_dataset(
    env: &MazeEnv,
    policy: &dyn BehaviorPolicy,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_traj == 0 {
        return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
    }
    if horizon < 2 {
        return Err(Error::InvalidConfig("horizon must be at least 2".into()));
    }
    (0..n_traj)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(seed, i));
            let mut s = env.sample_start(&mut rng);
            let mut memory = policy.reset(env, &s, &mut rng)?;
            let mut states = Vec::with_capacity(horizon);
            let mut actions = Vec::with_capacity(horizon - 1);
            states.push(s);
            for _ in 1..horizon {
                let a = policy.act(env, &s, &mut memory, &mut rng)?;
                s = env.step(&s, &a)?;
                actions.push(a);
                states.push(s);
            }
            Ok(Trajectory { states, actions })
        })
        .collect()
}

/// Derives an independent seed for sub-task `index` of a seeded job.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    trajectory_seed(seed, index)
}

/// Mazes used by tests, examples and default configs.
pub mod layouts {
    /// 7x7 maze with a U-bend and a dead end.
    pub const MAZE_7X7: &str = "\
S.....G
.#####.
.#...#.
.#.#.#.
...#...
##.#.##
G..#..G
";

    /// 11x11 maze with rooms and corridors.
    pub const MAZE_11X11: &str = "\
G....#....G
.###.#.###.
.#.......#.
.#.##.##.#.
......#....
###.#S#.###
....#.#....
.#.##.##.#.
.#.......#.
.###.#.###.
G....#....G
";

    /// Two vertical corridors separated by a wall, joined at the bottom.
    pub const U_MAZE: &str = "\
.#.
.#.
.#.
...
";
}
