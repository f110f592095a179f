//! Boxoban: four boxes, four targets, push-and-pull dynamics.
//!
//! Levels come from reverse play. Starting from a solved configuration the
//! generator walks the agent backwards, pulling boxes off their targets. Every
//! reverse move has a forward inverse, so the recorded walk replayed forwards
//! is a solution.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cell_char, mix_seed, Cell, Dir, EnvConfig, Pos};
use crate::error::{Error, Result};

pub const N_BOXES: usize = 4;
pub const REWARD_BOX: f64 = 1.0;
pub const REWARD_SOLVED: f64 = 10.0;
pub const REWARD_STEP: f64 = -0.1;

const MAX_ATTEMPTS: u64 = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxobanAction {
    Noop,
    Push(Dir),
    Move(Dir),
    Pull(Dir),
}

const DIR_ORDER: [Dir; 4] = [Dir::Up, Dir::Down, Dir::Left, Dir::Right];

impl BoxobanAction {
    pub const COUNT: usize = 13;

    /// 0 = no-op, 1..=4 push, 5..=8 move, 9..=12 pull (each up, down, left, right).
    pub fn from_index(i: usize) -> Self {
        match i {
            0 => BoxobanAction::Noop,
            1..=4 => BoxobanAction::Push(DIR_ORDER[i - 1]),
            5..=8 => BoxobanAction::Move(DIR_ORDER[i - 5]),
            9..=12 => BoxobanAction::Pull(DIR_ORDER[i - 9]),
            _ => panic!("boxoban action {i} out of range"),
        }
    }

    pub fn index(self) -> usize {
        let d = |d: Dir| DIR_ORDER.iter().position(|x| *x == d).expect("direction");
        match self {
            BoxobanAction::Noop => 0,
            BoxobanAction::Push(x) => 1 + d(x),
            BoxobanAction::Move(x) => 5 + d(x),
            BoxobanAction::Pull(x) => 9 + d(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxobanLevel {
    pub width: usize,
    pub height: usize,
    /// Static cells over {empty, wall, target}.
    pub cells: Vec<Cell>,
    pub boxes: Vec<Pos>,
    pub agent_start: Pos,
    pub seed: u64,
    /// Forward action sequence that solves the level, recovered from reverse play.
    pub solution: Vec<BoxobanAction>,
}

pub(super) fn validate(config: &EnvConfig) -> Result<()> {
    // Interior must hold 4 boxes, 4 targets, the agent and room to manoeuvre.
    if config.grid_size < 6 {
        return Err(Error::config(format!(
            "boxoban grid_size must be at least 6, got {}",
            config.grid_size
        )));
    }
    Ok(())
}

impl BoxobanLevel {
    pub fn generate(seed: u64, config: &EnvConfig) -> Result<Self> {
        validate(config)?;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0xb0b0_b0b0, attempt));
            if let Some(level) = try_generate(&mut rng, seed, config) {
                return Ok(level);
            }
        }
        Err(Error::config(format!("could not generate a boxoban level of size {}", config.grid_size)))
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.cells[p.y * self.width + p.x]
    }

    pub fn targets(&self) -> Vec<Pos> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Pos::new(x, y)))
            .filter(|p| self.cell(*p) == Cell::Target)
            .collect()
    }

    /// Parses `#` wall, ` `/`.` floor, `T` target, `B` box, `*` box on target,
    /// `@` agent and `+` agent on target.
    pub fn from_ascii(art: &str) -> Result<Self> {
        let rows: Vec<&str> = art.lines().filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.iter().map(|r| r.chars().count()).max().unwrap_or(0);
        let mut cells = vec![Cell::Wall; width * height];
        let mut boxes = Vec::new();
        let mut agent = None;
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                let p = Pos::new(x, y);
                cells[y * width + x] = match ch {
                    '#' => Cell::Wall,
                    ' ' | '.' => Cell::Empty,
                    'T' => Cell::Target,
                    'B' => {
                        boxes.push(p);
                        Cell::Empty
                    }
                    '*' => {
                        boxes.push(p);
                        Cell::Target
                    }
                    '@' => {
                        agent = Some(p);
                        Cell::Empty
                    }
                    '+' => {
                        agent = Some(p);
                        Cell::Target
                    }
                    other => return Err(Error::Format(format!("unknown boxoban cell {other:?}"))),
                };
            }
        }
        let agent_start = agent.ok_or_else(|| Error::Format("boxoban art has no agent".into()))?;
        let n_targets = cells.iter().filter(|c| **c == Cell::Target).count();
        if n_targets != boxes.len() {
            return Err(Error::Format(format!("{} boxes but {n_targets} targets", boxes.len())));
        }
        Ok(BoxobanLevel { width, height, cells, boxes, agent_start, seed: 0, solution: Vec::new() })
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                let target = self.cell(p) == Cell::Target;
                s.push(if p == self.agent_start {
                    if target { '+' } else { '@' }
                } else if self.boxes.contains(&p) {
                    if target { '*' } else { 'B' }
                } else {
                    cell_char(self.cell(p))
                });
            }
            s.push('\n');
        }
        s
    }
}

fn neighbour(p: Pos, d: Dir, n: usize) -> Option<Pos> {
    p.step(d).filter(|q| q.x < n && q.y < n)
}

fn try_generate(rng: &mut ChaCha8Rng, seed: u64, config: &EnvConfig) -> Option<BoxobanLevel> {
    let n = config.grid_size;
    let interior = (n - 2) * (n - 2);
    let mut floor = vec![false; n * n];

    // Carve the room with a random walk that sometimes opens 2x2 blocks.
    let target_floor = (interior as f64 * rng.random_range(0.45..0.65)) as usize;
    let mut p = Pos::new(rng.random_range(1..n - 1), rng.random_range(1..n - 1));
    let mut carved = 0;
    let mut guard = 0;
    while carved < target_floor && guard < 10_000 {
        guard += 1;
        let blob = rng.random_bool(0.3);
        let cells: &[(usize, usize)] = if blob { &[(0, 0), (1, 0), (0, 1), (1, 1)] } else { &[(0, 0)] };
        for (dx, dy) in cells {
            let (x, y) = (p.x + dx, p.y + dy);
            if x >= 1 && x < n - 1 && y >= 1 && y < n - 1 && !floor[y * n + x] {
                floor[y * n + x] = true;
                carved += 1;
            }
        }
        let d = Dir::from_index(rng.random_range(0..4));
        if let Some(q) = neighbour(p, d, n) {
            if q.x >= 1 && q.x < n - 1 && q.y >= 1 && q.y < n - 1 {
                p = q;
            }
        }
    }

    let mut open: Vec<Pos> = (0..n * n).filter(|&i| floor[i]).map(|i| Pos::new(i % n, i / n)).collect();
    if open.len() < 2 * N_BOXES + 2 {
        return None;
    }
    open.shuffle(rng);
    let targets: Vec<Pos> = open[..N_BOXES].to_vec();
    let mut boxes = targets.clone();
    let mut agent = open[N_BOXES];
    let is_floor = |q: Pos| floor[q.y * n + q.x];

    // Reverse play: moves and pulls, recorded as their forward inverses.
    let mut reverse: Vec<BoxobanAction> = Vec::new();
    for _ in 0..config.reverse_steps {
        let d = Dir::from_index(rng.random_range(0..4));
        let Some(front) = neighbour(agent, d, n) else { continue };
        if !is_floor(front) || boxes.contains(&front) {
            continue;
        }
        let behind = neighbour(agent, d.opposite(), n);
        let pull = behind.and_then(|b| boxes.iter().position(|x| *x == b));
        match pull {
            Some(bi) if rng.random_bool(0.8) => {
                boxes[bi] = agent;
                agent = front;
                reverse.push(BoxobanAction::Push(d.opposite()));
            }
            _ => {
                agent = front;
                reverse.push(BoxobanAction::Move(d.opposite()));
            }
        }
    }
    if boxes.iter().any(|b| targets.contains(b)) {
        return None;
    }

    let mut cells: Vec<Cell> = floor.iter().map(|&f| if f { Cell::Empty } else { Cell::Wall }).collect();
    for t in &targets {
        cells[t.y * n + t.x] = Cell::Target;
    }
    reverse.reverse();
    Some(BoxobanLevel { width: n, height: n, cells, boxes, agent_start: agent, seed, solution: reverse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Episode, Level};

    #[test]
    fn action_indices_round_trip() {
        for i in 0..BoxobanAction::COUNT {
            assert_eq!(BoxobanAction::from_index(i).index(), i);
        }
    }

    #[test]
    fn same_seed_same_level() {
        let c = EnvConfig::boxoban();
        for seed in 0..20 {
            assert_eq!(BoxobanLevel::generate(seed, &c).unwrap(), BoxobanLevel::generate(seed, &c).unwrap());
        }
    }

    #[test]
    fn boxes_start_off_targets_on_floor() {
        let c = EnvConfig::boxoban();
        for seed in 0..100 {
            let l = BoxobanLevel::generate(seed, &c).unwrap();
            assert_eq!(l.boxes.len(), N_BOXES);
            assert_eq!(l.targets().len(), N_BOXES);
            for b in &l.boxes {
                assert_eq!(l.cell(*b), Cell::Empty);
                assert_ne!(*b, l.agent_start);
            }
        }
    }

    #[test]
    fn push_into_wall_changes_nothing() {
        let l = BoxobanLevel::from_ascii("#####\n#@B##\n# T #\n#####\n").unwrap();
        let mut ep = Episode::new(&Level::Boxoban(l), 120);
        let before = ep.to_ascii();
        let tr = ep.step(BoxobanAction::Push(Dir::Right).index()).unwrap();
        assert_eq!(ep.to_ascii(), before);
        assert!((tr.reward - REWARD_STEP).abs() < 1e-12);
        assert!(!tr.done);
    }

    #[test]
    fn pull_drags_the_box_behind() {
        let l = BoxobanLevel::from_ascii("######\n#TB@ #\n######\n").unwrap();
        let mut ep = Episode::new(&Level::Boxoban(l), 120);
        ep.step(BoxobanAction::Pull(Dir::Right).index()).unwrap();
        assert_eq!(ep.agent(), Pos::new(4, 1));
        assert_eq!(ep.boxes(), &[Pos::new(3, 1)]);
    }

    #[test]
    fn moving_box_off_target_costs_reward() {
        let l = BoxobanLevel::from_ascii("#######\n#@* T #\n#  B  #\n#######\n").unwrap();
        let mut ep = Episode::new(&Level::Boxoban(l), 120);
        let tr = ep.step(BoxobanAction::Push(Dir::Right).index()).unwrap();
        assert!((tr.reward - (REWARD_STEP - REWARD_BOX)).abs() < 1e-12);
    }
}
