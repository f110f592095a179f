//! Multiroom: a chain of rectangular rooms joined by closed doors.
//!
//! The agent starts in the first room of the chain and the goal sits in the
//! last, so the start room is always the one furthest from the goal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bfs_reachable, cell_char, mix_seed, Cell, Dir, EnvConfig, Pos};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: u64 = 10_000;
const PLACEMENT_TRIES: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MultiroomAction {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
    Toggle = 3,
}

impl MultiroomAction {
    pub const COUNT: usize = 4;

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => MultiroomAction::TurnLeft,
            1 => MultiroomAction::TurnRight,
            2 => MultiroomAction::Forward,
            3 => MultiroomAction::Toggle,
            _ => panic!("multiroom action {i} out of range"),
        }
    }
}

/// Room rectangle including its walls; corners inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Room {
    pub fn contains(&self, p: Pos) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn interior_contains(&self, p: Pos) -> bool {
        p.x > self.x0 && p.x < self.x1 && p.y > self.y0 && p.y < self.y1
    }

    fn overlaps(&self, other: &Room) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    fn interior(&self) -> Option<Room> {
        (self.x1 >= self.x0 + 2 && self.y1 >= self.y0 + 2).then(|| Room {
            x0: self.x0 + 1,
            y0: self.y0 + 1,
            x1: self.x1 - 1,
            y1: self.y1 - 1,
        })
    }

    fn interior_cells(&self) -> impl Iterator<Item = Pos> + '_ {
        (self.y0 + 1..self.y1).flat_map(move |y| (self.x0 + 1..self.x1).map(move |x| Pos::new(x, y)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiroomLevel {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub rooms: Vec<Room>,
    /// `doors[i]` joins `rooms[i]` and `rooms[i + 1]`.
    pub doors: Vec<Pos>,
    pub agent_start: Pos,
    pub agent_dir: Dir,
    pub goal: Pos,
    pub seed: u64,
}

pub(super) fn validate(config: &EnvConfig) -> Result<()> {
    let (cmin, cmax) = config.room_count;
    let (smin, smax) = config.room_size;
    if cmin == 0 || cmin > cmax || cmax > 4 {
        return Err(Error::config(format!("room_count must satisfy 1 <= min <= max <= 4, got {cmin}..={cmax}")));
    }
    if smin < 5 || smin > smax {
        return Err(Error::config(format!(
            "room_size must satisfy 5 <= min <= max (3x3 interiors), got {smin}..={smax}"
        )));
    }
    // Rooms share walls, so a 2x2 block of minimal rooms needs 2*smin - 1 cells a side.
    let needed = if cmin >= 2 { 2 * smin - 1 } else { smin };
    if config.grid_size < needed {
        return Err(Error::config(format!(
            "grid_size {} cannot fit {cmin} rooms of side {smin} (needs at least {needed})",
            config.grid_size
        )));
    }
    Ok(())
}

impl MultiroomLevel {
    /// Generates a level; infeasible layouts are retried with a derived seed.
    pub fn generate(seed: u64, config: &EnvConfig) -> Result<Self> {
        validate(config)?;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, attempt));
            if let Some(level) = try_generate(&mut rng, seed, config) {
                return Ok(level);
            }
        }
        Err(Error::config(format!(
            "could not place {:?} rooms of size {:?} in a {} grid",
            config.room_count, config.room_size, config.grid_size
        )))
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.cells[p.y * self.width + p.x]
    }

    /// Index of the room whose interior (or door) holds `p`.
    pub fn room_of(&self, p: Pos) -> Option<usize> {
        self.rooms.iter().position(|r| r.interior_contains(p))
    }

    /// True when the goal is reachable treating doors as passable.
    pub fn is_connected(&self) -> bool {
        bfs_reachable(self.width, self.height, self.agent_start, self.goal, |p| {
            !matches!(self.cell(p), Cell::Wall)
        })
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                s.push(if p == self.agent_start {
                    ['>', 'v', '<', '^'][self.agent_dir as usize]
                } else {
                    cell_char(self.cell(p))
                });
            }
            s.push('\n');
        }
        s
    }
}

fn try_generate(rng: &mut ChaCha8Rng, seed: u64, config: &EnvConfig) -> Option<MultiroomLevel> {
    let n = config.grid_size;
    let (smin, smax) = config.room_size;
    let count = rng.random_range(config.room_count.0..=config.room_count.1);

    let w = rng.random_range(smin..=smax.min(n));
    let h = rng.random_range(smin..=smax.min(n));
    let x0 = rng.random_range(0..=n - w);
    let y0 = rng.random_range(0..=n - h);
    let mut rooms = vec![Room { x0, y0, x1: x0 + w - 1, y1: y0 + h - 1 }];
    let mut doors = Vec::new();

    while rooms.len() < count {
        let prev = *rooms.last().expect("non-empty");
        let placed = (0..PLACEMENT_TRIES).find_map(|_| place_next(rng, &prev, &rooms, n, smin, smax));
        let (room, door) = placed?;
        rooms.push(room);
        doors.push(door);
    }

    let mut cells = vec![Cell::Wall; n * n];
    for room in &rooms {
        for p in room.interior_cells() {
            cells[p.y * n + p.x] = Cell::Empty;
        }
    }
    for d in &doors {
        cells[d.y * n + d.x] = Cell::Door { open: false };
    }

    let first: Vec<Pos> = rooms[0].interior_cells().collect();
    let agent_start = first[rng.random_range(0..first.len())];
    let agent_dir = Dir::from_index(rng.random_range(0..4));
    let last: Vec<Pos> = rooms[rooms.len() - 1]
        .interior_cells()
        .filter(|p| *p != agent_start)
        .collect();
    let goal = last[rng.random_range(0..last.len())];
    cells[goal.y * n + goal.x] = Cell::Goal;

    Some(MultiroomLevel { width: n, height: n, cells, rooms, doors, agent_start, agent_dir, goal, seed })
}

/// Tries to attach a room to a random wall of `prev`, sharing that wall and a door.
fn place_next(
    rng: &mut ChaCha8Rng,
    prev: &Room,
    rooms: &[Room],
    n: usize,
    smin: usize,
    smax: usize,
) -> Option<(Room, Pos)> {
    let w = rng.random_range(smin..=smax);
    let h = rng.random_range(smin..=smax);
    let side = Dir::from_index(rng.random_range(0..4));
    let (room, door) = match side {
        Dir::Right | Dir::Left => {
            let dy = rng.random_range(prev.y0 + 1..prev.y1);
            let dx = if side == Dir::Right { prev.x1 } else { prev.x0 };
            // Door row must be strictly inside the new room's vertical extent.
            let lo = dy.checked_sub(h - 2)?;
            let y0 = rng.random_range(lo..=dy - 1);
            let x0 = if side == Dir::Right { dx } else { dx.checked_sub(w - 1)? };
            (Room { x0, y0, x1: x0 + w - 1, y1: y0 + h - 1 }, Pos::new(dx, dy))
        }
        Dir::Down | Dir::Up => {
            let dx = rng.random_range(prev.x0 + 1..prev.x1);
            let dy = if side == Dir::Down { prev.y1 } else { prev.y0 };
            let lo = dx.checked_sub(w - 2)?;
            let x0 = rng.random_range(lo..=dx - 1);
            let y0 = if side == Dir::Down { dy } else { dy.checked_sub(h - 1)? };
            (Room { x0, y0, x1: x0 + w - 1, y1: y0 + h - 1 }, Pos::new(dx, dy))
        }
    };
    if room.x1 >= n || room.y1 >= n {
        return None;
    }
    let inner = room.interior()?;
    for other in rooms {
        let other_inner = other.interior()?;
        if room.overlaps(&other_inner) || inner.overlaps(other) {
            return None;
        }
    }
    Some((room, door))
}
