use rand::Rng;
use serde::Serialize;

use super::{Cell, GridError, OBS_DIM};

/// Layout family and its generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Layout {
    Empty { random_start: bool, random_goal: bool },
    GoToDoor,
    FourRooms,
    Crossing { crossings: usize },
    LavaGap,
    DynamicObstacles { balls: usize, random_start: bool },
    DoorKey { random_goal: bool },
}

/// Static description of a task; every episode of a task shares it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub max_steps: u32,
    pub obs_dim: usize,
    pub layout: Layout,
}

pub const PRETRAIN_TASKS: [&str; 7] =
    ["Empty-Random-8x8", "GoToDoor8x8", "FourRooms", "CrossingS9N3", "LavaGapS6", "Dynamic-Obstacles-5x5", "DoorKey-Random-6x6"];

pub const EVAL_TASKS: [&str; 6] = ["DoorKey8x8", "CrossingsS11N5", "DynObs6x6-Random", "LavaGapS7", "Empty16x16", "DynObs16x16"];

pub const SOURCE_TASKS: [&str; 3] = ["DoorKey6x6", "Empty8x8", "DynObs8x8"];

pub fn all_task_names() -> impl Iterator<Item = &'static str> {
    PRETRAIN_TASKS.into_iter().chain(EVAL_TASKS).chain(SOURCE_TASKS)
}

pub fn make_task(name: &str) -> Result<TaskSpec, GridError> {
    use Layout::*;
    let (size, layout) = match name {
        "Empty-Random-8x8" => (8, Empty { random_start: true, random_goal: true }),
        "Empty8x8" => (8, Empty { random_start: false, random_goal: false }),
        "Empty16x16" => (16, Empty { random_start: false, random_goal: false }),
        "GoToDoor8x8" => (8, GoToDoor),
        "FourRooms" => (19, FourRooms),
        "CrossingS9N3" => (9, Crossing { crossings: 3 }),
        "CrossingsS11N5" => (11, Crossing { crossings: 5 }),
        "LavaGapS6" => (6, LavaGap),
        "LavaGapS7" => (7, LavaGap),
        "Dynamic-Obstacles-5x5" => (5, DynamicObstacles { balls: 2, random_start: false }),
        "DynObs6x6-Random" => (6, DynamicObstacles { balls: 4, random_start: true }),
        "DynObs8x8" => (8, DynamicObstacles { balls: 4, random_start: false }),
        "DynObs16x16" => (16, DynamicObstacles { balls: 4, random_start: false }),
        "DoorKey-Random-6x6" => (6, DoorKey { random_goal: true }),
        "DoorKey6x6" => (6, DoorKey { random_goal: false }),
        "DoorKey8x8" => (8, DoorKey { random_goal: false }),
        _ => return Err(GridError::UnknownTask(name.to_owned())),
    };
    let area = (size * size) as u32;
    let max_steps = if matches!(layout, DoorKey { .. }) { 10 * area } else { 4 * area };
    Ok(TaskSpec { name: name.to_owned(), width: size, height: size, max_steps, obs_dim: OBS_DIM, layout })
}

/// A freshly generated episode layout.
#[derive(Debug, Clone)]
pub(crate) struct Generated {
    pub cells: Vec<Cell>,
    pub agent: (i32, i32),
    pub dir: u8,
    pub balls: Vec<(i32, i32)>,
}

struct Builder {
    w: i32,
    h: i32,
    cells: Vec<Cell>,
    agent: Option<(i32, i32)>,
    balls: Vec<(i32, i32)>,
}

impl Builder {
    fn new(w: usize, h: usize) -> Self {
        let (w, h) = (w as i32, h as i32);
        let mut b = Self { w, h, cells: vec![Cell::Empty; (w * h) as usize], agent: None, balls: Vec::new() };
        for x in 0..w {
            b.set(x, 0, Cell::Wall);
            b.set(x, h - 1, Cell::Wall);
        }
        for y in 0..h {
            b.set(0, y, Cell::Wall);
            b.set(w - 1, y, Cell::Wall);
        }
        b
    }

    fn set(&mut self, x: i32, y: i32, c: Cell) {
        self.cells[(y * self.w + x) as usize] = c;
    }

    fn get(&self, x: i32, y: i32) -> Cell {
        self.cells[(y * self.w + x) as usize]
    }

    fn free(&self, p: (i32, i32)) -> bool {
        self.get(p.0, p.1) == Cell::Empty && self.agent != Some(p) && !self.balls.contains(&p)
    }

    /// Uniform free cell in the rectangle `[x0, x0+w) x [y0, y0+h)`.
    fn sample_free<R: Rng>(&self, rng: &mut R, x0: i32, y0: i32, w: i32, h: i32) -> Result<(i32, i32), GridError> {
        for _ in 0..1000 {
            let p = (rng.random_range(x0..x0 + w), rng.random_range(y0..y0 + h));
            if p.0 >= 0 && p.1 >= 0 && p.0 < self.w && p.1 < self.h && self.free(p) {
                return Ok(p);
            }
        }
        Err(GridError::PlacementFailed)
    }

    fn place_agent<R: Rng>(&mut self, rng: &mut R, x0: i32, y0: i32, w: i32, h: i32) -> Result<u8, GridError> {
        self.agent = Some(self.sample_free(rng, x0, y0, w, h)?);
        Ok(rng.random_range(0..4))
    }

    fn place<R: Rng>(&mut self, rng: &mut R, c: Cell, x0: i32, y0: i32, w: i32, h: i32) -> Result<(i32, i32), GridError> {
        let p = self.sample_free(rng, x0, y0, w, h)?;
        self.set(p.0, p.1, c);
        Ok(p)
    }

    fn finish(self, dir: u8) -> Generated {
        Generated { cells: self.cells, agent: self.agent.expect("agent placed"), dir, balls: self.balls }
    }
}

pub(crate) fn generate<R: Rng>(task: &TaskSpec, rng: &mut R) -> Result<Generated, GridError> {
    let (w, h) = (task.width as i32, task.height as i32);
    let mut b = Builder::new(task.width, task.height);
    let dir = match task.layout {
        Layout::Empty { random_start, random_goal } => {
            if random_goal {
                b.place(rng, Cell::Goal, 1, 1, w - 2, h - 2)?;
            } else {
                b.set(w - 2, h - 2, Cell::Goal);
            }
            if random_start {
                b.place_agent(rng, 1, 1, w - 2, h - 2)?
            } else {
                b.agent = Some((1, 1));
                0
            }
        }
        Layout::GoToDoor => {
            // One closed door somewhere on the outer wall, away from the corners.
            let side = rng.random_range(0..4);
            let along = |rng: &mut R, n: i32| rng.random_range(1..n - 1);
            let pos = match side {
                0 => (along(rng, w), 0),
                1 => (w - 1, along(rng, h)),
                2 => (along(rng, w), h - 1),
                _ => (0, along(rng, h)),
            };
            b.set(pos.0, pos.1, Cell::Door { locked: false, open: false });
            b.place_agent(rng, 1, 1, w - 2, h - 2)?
        }
        Layout::FourRooms => {
            let (rw, rh) = (w / 2, h / 2);
            for j in 0..2 {
                for i in 0..2 {
                    let (xl, yt) = (i * rw, j * rh);
                    let (xr, yb) = (xl + rw, yt + rh);
                    if i + 1 < 2 {
                        for y in yt..yt + rh {
                            b.set(xr, y, Cell::Wall);
                        }
                        let gap = rng.random_range(yt + 1..yb);
                        b.set(xr, gap, Cell::Empty);
                    }
                    if j + 1 < 2 {
                        for x in xl..xl + rw {
                            b.set(x, yb, Cell::Wall);
                        }
                        let gap = rng.random_range(xl + 1..xr);
                        b.set(gap, yb, Cell::Empty);
                    }
                }
            }
            let dir = b.place_agent(rng, 0, 0, w, h)?;
            b.place(rng, Cell::Goal, 0, 0, w, h)?;
            dir
        }
        Layout::Crossing { crossings } => {
            b.agent = Some((1, 1));
            b.set(w - 2, h - 2, Cell::Goal);
            // (vertical?, position) candidate walls.
            let mut rivers: Vec<(bool, i32)> = (2..h - 2).step_by(2).map(|i| (true, i)).chain((2..w - 2).step_by(2).map(|j| (false, j))).collect();
            shuffle(rng, &mut rivers);
            rivers.truncate(crossings);
            let mut rv: Vec<i32> = rivers.iter().filter(|r| r.0).map(|r| r.1).collect();
            let mut rh: Vec<i32> = rivers.iter().filter(|r| !r.0).map(|r| r.1).collect();
            rv.sort_unstable();
            rh.sort_unstable();
            for &j in &rh {
                for i in 1..w - 1 {
                    b.set(i, j, Cell::Wall);
                }
            }
            for &i in &rv {
                for j in 1..h - 1 {
                    b.set(i, j, Cell::Wall);
                }
            }
            let mut path: Vec<bool> = std::iter::repeat_n(false, rv.len()).chain(std::iter::repeat_n(true, rh.len())).collect();
            shuffle(rng, &mut path);
            let limits_v: Vec<i32> = std::iter::once(0).chain(rv.iter().copied()).chain(std::iter::once(h - 1)).collect();
            let limits_h: Vec<i32> = std::iter::once(0).chain(rh.iter().copied()).chain(std::iter::once(w - 1)).collect();
            let (mut ri, mut rj) = (0usize, 0usize);
            for down in path {
                let (i, j) = if !down {
                    let i = limits_v[ri + 1];
                    let j = rng.random_range(limits_h[rj] + 1..limits_h[rj + 1]);
                    ri += 1;
                    (i, j)
                } else {
                    let i = rng.random_range(limits_v[ri] + 1..limits_v[ri + 1]);
                    let j = limits_h[rj + 1];
                    rj += 1;
                    (i, j)
                };
                b.set(i, j, Cell::Empty);
            }
            0
        }
        Layout::LavaGap => {
            b.agent = Some((1, 1));
            b.set(w - 2, h - 2, Cell::Goal);
            let gx = rng.random_range(2..w - 2);
            let gy = rng.random_range(1..h - 1);
            for y in 1..h - 1 {
                if y != gy {
                    b.set(gx, y, Cell::Lava);
                }
            }
            0
        }
        Layout::DynamicObstacles { balls, random_start } => {
            b.set(w - 2, h - 2, Cell::Goal);
            let dir = if random_start {
                b.place_agent(rng, 1, 1, w - 2, h - 2)?
            } else {
                b.agent = Some((1, 1));
                0
            };
            for _ in 0..balls {
                let p = b.sample_free(rng, 1, 1, w - 2, h - 2)?;
                b.balls.push(p);
            }
            dir
        }
        Layout::DoorKey { random_goal } => {
            let split = rng.random_range(2..w - 2);
            for y in 0..h {
                b.set(split, y, Cell::Wall);
            }
            if random_goal {
                b.place(rng, Cell::Goal, split + 1, 1, w - 2 - split, h - 2)?;
            } else {
                b.set(w - 2, h - 2, Cell::Goal);
            }
            let dir = b.place_agent(rng, 0, 0, split, h)?;
            let door_y = rng.random_range(1..w - 2);
            b.set(split, door_y, Cell::Door { locked: true, open: false });
            b.place(rng, Cell::Key, 0, 0, split, h)?;
            dir
        }
    };
    Ok(b.finish(dir))
}

fn shuffle<R: Rng, T>(rng: &mut R, xs: &mut [T]) {
    use rand::seq::SliceRandom;
    xs.shuffle(rng);
}
