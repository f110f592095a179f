//! Procedurally generated, fully observable gridworlds.
//!
//! Two families are provided: Multiroom (reach a goal through a chain of rooms
//! joined by doors) and Boxoban (move four boxes onto four targets, with both
//! pushing and pulling allowed). Levels are pure functions of
//! `(kind, seed, config)`.

pub mod boxoban;
pub mod multiroom;
pub mod vec_env;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use boxoban::{BoxobanAction, BoxobanLevel};
pub use multiroom::{MultiroomAction, MultiroomLevel, Room};
pub use vec_env::{LevelSet, SeedRange, StepOutput, VecEnv};

/// Grid coordinate, `x` to the right and `y` downwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Pos { x, y }
    }

    /// Neighbour in `dir`, or `None` when it would leave the non-negative quadrant.
    pub fn step(self, dir: Dir) -> Option<Pos> {
        let (dx, dy) = dir.delta();
        let x = self.x.checked_add_signed(dx)?;
        let y = self.y.checked_add_signed(dy)?;
        Some(Pos { x, y })
    }
}

/// Facing / movement direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dir {
    Right = 0,
    Down = 1,
    Left = 2,
    Up = 3,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::Right, Dir::Down, Dir::Left, Dir::Up];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Dir::Right => (1, 0),
            Dir::Down => (0, 1),
            Dir::Left => (-1, 0),
            Dir::Up => (0, -1),
        }
    }

    pub fn from_index(i: usize) -> Dir {
        Dir::ALL[i % 4]
    }

    pub fn turn_left(self) -> Dir {
        Dir::from_index(self as usize + 3)
    }

    pub fn turn_right(self) -> Dir {
        Dir::from_index(self as usize + 1)
    }

    pub fn opposite(self) -> Dir {
        Dir::from_index(self as usize + 2)
    }
}

/// Static cell contents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Empty,
    Wall,
    Door { open: bool },
    Goal,
    Target,
}

/// Object type ids written to observation channel 0.
pub mod object {
    pub const EMPTY: u8 = 0;
    pub const WALL: u8 = 1;
    pub const DOOR: u8 = 2;
    pub const GOAL: u8 = 3;
    pub const AGENT: u8 = 4;
    pub const BOX: u8 = 5;
    pub const TARGET: u8 = 6;
    pub const BOX_ON_TARGET: u8 = 7;
    pub const AGENT_ON_TARGET: u8 = 8;
    pub const COUNT: u8 = 9;
}

/// Number of observation channels.
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Multiroom,
    Boxoban,
}

impl EnvKind {
    pub fn n_actions(self) -> usize {
        match self {
            EnvKind::Multiroom => MultiroomAction::COUNT,
            EnvKind::Boxoban => BoxobanAction::COUNT,
        }
    }
}

/// Environment geometry and episode length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Side length of the square grid.
    pub grid_size: usize,
    /// Inclusive range of Multiroom room counts.
    pub room_count: (usize, usize),
    /// Inclusive range of Multiroom room side lengths, walls included.
    pub room_size: (usize, usize),
    /// Episode step limit; defaults to `4 * H * W` (Multiroom) or 120 (Boxoban).
    pub max_steps: Option<usize>,
    /// Boxoban reverse-play length used during generation.
    pub reverse_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::multiroom()
    }
}

impl EnvConfig {
    pub fn multiroom() -> Self {
        EnvConfig {
            kind: EnvKind::Multiroom,
            grid_size: 15,
            room_count: (1, 4),
            room_size: (5, 7),
            max_steps: None,
            reverse_steps: 150,
        }
    }

    pub fn boxoban() -> Self {
        EnvConfig { kind: EnvKind::Boxoban, grid_size: 10, ..Self::multiroom() }
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or(match self.kind {
            EnvKind::Multiroom => 4 * self.grid_size * self.grid_size,
            EnvKind::Boxoban => 120,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.kind.n_actions()
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        [CHANNELS, self.grid_size, self.grid_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be positive"));
        }
        match self.kind {
            EnvKind::Multiroom => multiroom::validate(self),
            EnvKind::Boxoban => boxoban::validate(self),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Level> {
        Ok(match self.kind {
            EnvKind::Multiroom => Level::Multiroom(MultiroomLevel::generate(seed, self)?),
            EnvKind::Boxoban => Level::Boxoban(BoxobanLevel::generate(seed, self)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Level {
    Multiroom(MultiroomLevel),
    Boxoban(BoxobanLevel),
}

impl Level {
    pub fn size(&self) -> (usize, usize) {
        match self {
            Level::Multiroom(l) => (l.width, l.height),
            Level::Boxoban(l) => (l.width, l.height),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Level::Multiroom(l) => l.seed,
            Level::Boxoban(l) => l.seed,
        }
    }

    pub fn to_ascii(&self) -> String {
        match self {
            Level::Multiroom(l) => l.to_ascii(),
            Level::Boxoban(l) => l.to_ascii(),
        }
    }
}

/// Outcome of a single environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Mutable state of one episode on a fixed level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    kind: EnvKind,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    agent: Pos,
    dir: Dir,
    boxes: Vec<Pos>,
    goal: Option<Pos>,
    t: usize,
    max_steps: usize,
    done: bool,
    success: bool,
    level_seed: u64,
}

impl Episode {
    pub fn new(level: &Level, max_steps: usize) -> Self {
        match level {
            Level::Multiroom(l) => Episode {
                kind: EnvKind::Multiroom,
                width: l.width,
                height: l.height,
                cells: l.cells.clone(),
                agent: l.agent_start,
                dir: l.agent_dir,
                boxes: Vec::new(),
                goal: Some(l.goal),
                t: 0,
                max_steps,
                done: false,
                success: false,
                level_seed: l.seed,
            },
            Level::Boxoban(l) => Episode {
                kind: EnvKind::Boxoban,
                width: l.width,
                height: l.height,
                cells: l.cells.clone(),
                agent: l.agent_start,
                dir: Dir::Up,
                boxes: l.boxes.clone(),
                goal: None,
                t: 0,
                max_steps,
                done: false,
                success: false,
                level_seed: l.seed,
            },
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn dir(&self) -> Dir {
        self.dir
    }

    pub fn boxes(&self) -> &[Pos] {
        &self.boxes
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    pub fn level_seed(&self) -> u64 {
        self.level_seed
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.cells[p.y * self.width + p.x]
    }

    fn cell_mut(&mut self, p: Pos) -> &mut Cell {
        &mut self.cells[p.y * self.width + p.x]
    }

    fn in_bounds(&self, p: Pos) -> bool {
        p.x < self.width && p.y < self.height
    }

    fn neighbour(&self, p: Pos, d: Dir) -> Option<Pos> {
        p.step(d).filter(|q| self.in_bounds(*q))
    }

    /// Applies `action` (an index into the environment's action set).
    pub fn step(&mut self, action: usize) -> Result<Transition> {
        if self.done {
            return Err(Error::usage("step called on a finished episode"));
        }
        if action >= self.kind.n_actions() {
            return Err(Error::usage(format!(
                "action {action} out of range for {:?} ({} actions)",
                self.kind,
                self.kind.n_actions()
            )));
        }
        self.t += 1;
        let mut tr = match self.kind {
            EnvKind::Multiroom => self.step_multiroom(MultiroomAction::from_index(action)),
            EnvKind::Boxoban => self.step_boxoban(BoxobanAction::from_index(action)),
        };
        if !tr.done && self.t >= self.max_steps {
            tr.done = true;
        }
        self.done = tr.done;
        self.success = tr.success;
        Ok(tr)
    }

    fn step_multiroom(&mut self, action: MultiroomAction) -> Transition {
        let mut tr = Transition { reward: 0.0, done: false, success: false };
        match action {
            MultiroomAction::TurnLeft => self.dir = self.dir.turn_left(),
            MultiroomAction::TurnRight => self.dir = self.dir.turn_right(),
            MultiroomAction::Forward => {
                if let Some(front) = self.neighbour(self.agent, self.dir) {
                    match self.cell(front) {
                        Cell::Empty | Cell::Door { open: true } | Cell::Target => self.agent = front,
                        Cell::Goal => {
                            self.agent = front;
                            tr.reward = 1.0 - 0.9 * (self.t as f64 / self.max_steps as f64);
                            tr.done = true;
                            tr.success = true;
                        }
                        Cell::Wall | Cell::Door { open: false } => {}
                    }
                }
            }
            MultiroomAction::Toggle => {
                if let Some(front) = self.neighbour(self.agent, self.dir) {
                    if let Cell::Door { open } = self.cell(front) {
                        *self.cell_mut(front) = Cell::Door { open: !open };
                    }
                }
            }
        }
        tr
    }

    fn is_floor(&self, p: Pos) -> bool {
        matches!(self.cell(p), Cell::Empty | Cell::Target | Cell::Goal | Cell::Door { open: true })
    }

    fn box_at(&self, p: Pos) -> Option<usize> {
        self.boxes.iter().position(|b| *b == p)
    }

    fn free(&self, p: Pos) -> bool {
        self.is_floor(p) && self.box_at(p).is_none()
    }

    fn boxes_on_target(&self) -> usize {
        self.boxes.iter().filter(|b| self.cell(**b) == Cell::Target).count()
    }

    fn step_boxoban(&mut self, action: BoxobanAction) -> Transition {
        let before = self.boxes_on_target();
        match action {
            BoxobanAction::Noop => {}
            BoxobanAction::Move(d) => {
                if let Some(front) = self.neighbour(self.agent, d) {
                    if self.free(front) {
                        self.agent = front;
                    }
                }
            }
            BoxobanAction::Push(d) => {
                if let Some(front) = self.neighbour(self.agent, d) {
                    if let Some(bi) = self.box_at(front) {
                        if let Some(beyond) = self.neighbour(front, d) {
                            if self.free(beyond) {
                                self.boxes[bi] = beyond;
                                self.agent = front;
                            }
                        }
                    } else if self.is_floor(front) {
                        self.agent = front;
                    }
                }
            }
            BoxobanAction::Pull(d) => {
                if let Some(front) = self.neighbour(self.agent, d) {
                    if self.free(front) {
                        let behind = self.neighbour(self.agent, d.opposite());
                        let old = self.agent;
                        self.agent = front;
                        if let Some(bi) = behind.and_then(|b| self.box_at(b)) {
                            self.boxes[bi] = old;
                        }
                    }
                }
            }
        }
        let after = self.boxes_on_target();
        let mut reward = boxoban::REWARD_STEP + (after as f64 - before as f64) * boxoban::REWARD_BOX;
        let solved = after == self.boxes.len();
        if solved {
            reward += boxoban::REWARD_SOLVED;
        }
        Transition { reward, done: solved, success: solved }
    }

    /// Encodes the state as a `[3, H, W]` observation, row-major per channel.
    ///
    /// Channel 0 holds the object type id divided by [`object::COUNT`];
    /// channel 1 holds status (door open = 1, agent facing `(dir + 1) / 4`);
    /// channel 2 is reserved and always zero.
    pub fn encode_into(&self, out: &mut [f64]) {
        let plane = self.width * self.height;
        assert_eq!(out.len(), CHANNELS * plane);
        out.iter_mut().for_each(|v| *v = 0.0);
        let scale = object::COUNT as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                let i = y * self.width + x;
                let (ty, status) = match self.cell(p) {
                    Cell::Empty => (object::EMPTY, 0.0),
                    Cell::Wall => (object::WALL, 0.0),
                    Cell::Door { open } => (object::DOOR, if open { 1.0 } else { 0.0 }),
                    Cell::Goal => (object::GOAL, 0.0),
                    Cell::Target => (object::TARGET, 0.0),
                };
                out[i] = ty as f64 / scale;
                out[plane + i] = status;
            }
        }
        for b in &self.boxes {
            let i = b.y * self.width + b.x;
            let ty = if self.cell(*b) == Cell::Target { object::BOX_ON_TARGET } else { object::BOX };
            out[i] = ty as f64 / scale;
        }
        let i = self.agent.y * self.width + self.agent.x;
        let ty = if self.cell(self.agent) == Cell::Target { object::AGENT_ON_TARGET } else { object::AGENT };
        out[i] = ty as f64 / scale;
        out[plane + i] = match self.kind {
            EnvKind::Multiroom => (self.dir as usize + 1) as f64 / 4.0,
            EnvKind::Boxoban => 0.0,
        };
    }

    pub fn encode(&self) -> Vec<f64> {
        let mut out = vec![0.0; CHANNELS * self.width * self.height];
        self.encode_into(&mut out);
        out
    }

    /// Plain-text rendering of the current state, one character per cell.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                let on_target = self.cell(p) == Cell::Target;
                let c = if p == self.agent {
                    match self.kind {
                        EnvKind::Multiroom => ['>', 'v', '<', '^'][self.dir as usize],
                        EnvKind::Boxoban if on_target => '+',
                        EnvKind::Boxoban => '@',
                    }
                } else if self.box_at(p).is_some() {
                    if on_target { '*' } else { 'B' }
                } else {
                    cell_char(self.cell(p))
                };
                s.push(c);
            }
            s.push('\n');
        }
        s
    }
}

pub(crate) fn cell_char(c: Cell) -> char {
    match c {
        Cell::Empty => ' ',
        Cell::Wall => '#',
        Cell::Door { open: false } => 'D',
        Cell::Door { open: true } => 'd',
        Cell::Goal => 'G',
        Cell::Target => 'T',
    }
}

/// Reachability from `start` to `goal` over cells accepted by `passable`.
pub(crate) fn bfs_reachable(
    width: usize,
    height: usize,
    start: Pos,
    goal: Pos,
    passable: impl Fn(Pos) -> bool,
) -> bool {
    let mut seen = vec![false; width * height];
    let mut queue = std::collections::VecDeque::from([start]);
    seen[start.y * width + start.x] = true;
    while let Some(p) = queue.pop_front() {
        if p == goal {
            return true;
        }
        for d in Dir::ALL {
            if let Some(q) = p.step(d) {
                if q.x < width && q.y < height && !seen[q.y * width + q.x] && passable(q) {
                    seen[q.y * width + q.x] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    false
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
