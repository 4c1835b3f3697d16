//! Partially observable grid-world tasks with an egocentric one-hot view.
//!
//! Each [`GridState`] owns its random stream, so stepping one environment
//! never depends on any other.

mod tasks;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use tasks::{all_task_names, make_task, Layout, TaskSpec, EVAL_TASKS, PRETRAIN_TASKS, SOURCE_TASKS};

pub const VIEW: usize = 7;
pub const NUM_CLASSES: usize = 9;
pub const OBS_DIM: usize = VIEW * VIEW * NUM_CLASSES + 1;
pub const NUM_ACTIONS: usize = 7;
const RESET_ATTEMPTS: usize = 100;

pub type Observation = Vec<f32>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("step called on a finished episode")]
    StepAfterTerminal,
    #[error("invalid action {0}")]
    InvalidAction(usize),
    #[error("no solvable layout for {task} after {attempts} attempts")]
    Unsolvable { task: String, attempts: usize },
    #[error("could not place an object on the grid")]
    PlacementFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
    Pickup = 3,
    Drop = 4,
    Toggle = 5,
    Done = 6,
}

impl TryFrom<usize> for Action {
    type Error = GridError;
    fn try_from(a: usize) -> Result<Self, GridError> {
        Ok(match a {
            0 => Action::Left,
            1 => Action::Right,
            2 => Action::Forward,
            3 => Action::Pickup,
            4 => Action::Drop,
            5 => Action::Toggle,
            6 => Action::Done,
            _ => return Err(GridError::InvalidAction(a)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Empty,
    Wall,
    Goal,
    Lava,
    Key,
    Door { locked: bool, open: bool },
}

/// Entity classes of the one-hot view encoding.
pub mod class {
    pub const EMPTY: usize = 0;
    pub const WALL: usize = 1;
    pub const OUTSIDE: usize = 2;
    pub const GOAL: usize = 3;
    pub const LAVA: usize = 4;
    pub const KEY: usize = 5;
    pub const BALL: usize = 6;
    pub const DOOR_CLOSED: usize = 7;
    pub const DOOR_OPEN: usize = 8;
}

// East, south, west, north; y grows downward.
const DIRS: [(i32, i32); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Observation after the action, before any automatic reset.
    pub obs: Observation,
    pub reward: f32,
    /// Episode ended for any reason, including the step cap.
    pub done: bool,
    /// Episode ended only because the step cap was reached.
    pub truncated: bool,
}

/// Full state of one environment instance.
#[derive(Debug, Clone)]
pub struct GridState {
    task: Arc<TaskSpec>,
    cells: Vec<Cell>,
    agent: (i32, i32),
    dir: u8,
    carrying: bool,
    balls: Vec<(i32, i32)>,
    step_count: u32,
    finished: bool,
    rng: ChaCha8Rng,
}

impl PartialEq for GridState {
    fn eq(&self, o: &Self) -> bool {
        self.task == o.task
            && self.cells == o.cells
            && self.agent == o.agent
            && self.dir == o.dir
            && self.carrying == o.carrying
            && self.balls == o.balls
            && self.step_count == o.step_count
            && self.finished == o.finished
            && self.rng.get_word_pos() == o.rng.get_word_pos()
            && self.rng.get_seed() == o.rng.get_seed()
            && self.rng.get_stream() == o.rng.get_stream()
    }
}

/// Starts a new episode of `task` whose randomness comes from `seed`.
pub fn reset(task: Arc<TaskSpec>, seed: u64) -> Result<(GridState, Observation), GridError> {
    GridState::new(task, ChaCha8Rng::seed_from_u64(seed))
}

impl GridState {
    pub fn new(task: Arc<TaskSpec>, rng: ChaCha8Rng) -> Result<(Self, Observation), GridError> {
        let mut s = Self {
            task,
            cells: Vec::new(),
            agent: (0, 0),
            dir: 0,
            carrying: false,
            balls: Vec::new(),
            step_count: 0,
            finished: false,
            rng,
        };
        s.regenerate()?;
        let obs = s.observe();
        Ok((s, obs))
    }

    /// Starts a fresh episode on the same random stream.
    pub fn reset(&mut self) -> Result<Observation, GridError> {
        self.regenerate()?;
        Ok(self.observe())
    }

    /// Switches to another task and starts a fresh episode of it.
    pub fn reset_to(&mut self, task: Arc<TaskSpec>) -> Result<Observation, GridError> {
        self.task = task;
        self.reset()
    }

    fn regenerate(&mut self) -> Result<(), GridError> {
        for _ in 0..RESET_ATTEMPTS {
            let g = match tasks::generate(&self.task, &mut self.rng) {
                Ok(g) => g,
                Err(GridError::PlacementFailed) => continue,
                Err(e) => return Err(e),
            };
            self.cells = g.cells;
            self.agent = g.agent;
            self.dir = g.dir;
            self.balls = g.balls;
            self.carrying = false;
            self.step_count = 0;
            self.finished = false;
            if self.is_solvable() {
                return Ok(());
            }
        }
        Err(GridError::Unsolvable { task: self.task.name.clone(), attempts: RESET_ATTEMPTS })
    }

    pub fn task(&self) -> &Arc<TaskSpec> {
        &self.task
    }

    pub fn agent(&self) -> ((i32, i32), u8) {
        (self.agent, self.dir)
    }

    pub fn carrying(&self) -> bool {
        self.carrying
    }

    pub fn balls(&self) -> &[(i32, i32)] {
        &self.balls
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn rng_state(&self) -> crate::tensor::RngState {
        crate::tensor::RngState { seed: 0, stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    fn in_bounds(&self, (x, y): (i32, i32)) -> bool {
        x >= 0 && y >= 0 && x < self.task.width as i32 && y < self.task.height as i32
    }

    /// Cell at `p`, or `None` outside the grid.
    pub fn cell(&self, p: (i32, i32)) -> Option<Cell> {
        self.in_bounds(p).then(|| self.cells[(p.1 * self.task.width as i32 + p.0) as usize])
    }

    /// Overwrites a cell; intended for building test scenarios.
    pub fn set_cell(&mut self, p: (i32, i32), c: Cell) {
        if self.in_bounds(p) {
            self.cells[(p.1 * self.task.width as i32 + p.0) as usize] = c;
        }
    }

    /// Moves the agent; intended for building test scenarios.
    pub fn set_agent(&mut self, p: (i32, i32), dir: u8) {
        self.agent = p;
        self.dir = dir % 4;
    }

    pub fn set_balls(&mut self, balls: Vec<(i32, i32)>) {
        self.balls = balls;
    }

    pub fn set_step_count(&mut self, n: u32) {
        self.step_count = n;
    }

    fn front(&self) -> (i32, i32) {
        let d = DIRS[self.dir as usize];
        (self.agent.0 + d.0, self.agent.1 + d.1)
    }

    pub fn observe(&self) -> Observation {
        let mut obs = vec![0.0; OBS_DIM];
        self.observe_into(&mut obs);
        obs
    }

    /// Writes the egocentric view into `out` (length [`OBS_DIM`]). The agent
    /// sits at the bottom-centre of the 7x7 window looking up.
    pub fn observe_into(&self, out: &mut [f32]) {
        out.fill(0.0);
        let fwd = DIRS[self.dir as usize];
        let right = DIRS[(self.dir as usize + 1) % 4];
        let half = (VIEW / 2) as i32;
        for vy in 0..VIEW as i32 {
            for vx in 0..VIEW as i32 {
                let f = VIEW as i32 - 1 - vy;
                let l = vx - half;
                let p = (self.agent.0 + f * fwd.0 + l * right.0, self.agent.1 + f * fwd.1 + l * right.1);
                let c = match self.cell(p) {
                    None => class::OUTSIDE,
                    Some(_) if self.balls.contains(&p) => class::BALL,
                    Some(Cell::Empty) => class::EMPTY,
                    Some(Cell::Wall) => class::WALL,
                    Some(Cell::Goal) => class::GOAL,
                    Some(Cell::Lava) => class::LAVA,
                    Some(Cell::Key) => class::KEY,
                    Some(Cell::Door { open: true, .. }) => class::DOOR_OPEN,
                    Some(Cell::Door { open: false, .. }) => class::DOOR_CLOSED,
                };
                out[(vy as usize * VIEW + vx as usize) * NUM_CLASSES + c] = 1.0;
            }
        }
        out[OBS_DIM - 1] = if self.carrying { 1.0 } else { 0.0 };
    }

    fn move_balls(&mut self) {
        for i in 0..self.balls.len() {
            let b = self.balls[i];
            let options: Vec<(i32, i32)> = DIRS
                .iter()
                .map(|d| (b.0 + d.0, b.1 + d.1))
                .filter(|&p| p != self.agent && !self.balls.contains(&p) && matches!(self.cell(p), Some(Cell::Empty)))
                .collect();
            if let Some(&p) = options.choose(&mut self.rng) {
                self.balls[i] = p;
            }
        }
    }

    /// Applies one action.
    pub fn step(&mut self, action: usize) -> Result<StepOutcome, GridError> {
        if self.finished {
            return Err(GridError::StepAfterTerminal);
        }
        let action = Action::try_from(action)?;
        self.step_count += 1;
        self.move_balls();

        let mut reward = 0.0f32;
        let mut terminated = false;
        let success = |s: &Self| 1.0 - 0.9 * (s.step_count as f32 / s.task.max_steps as f32);
        let front = self.front();
        let front_cell = self.cell(front);
        match action {
            Action::Left => self.dir = (self.dir + 3) % 4,
            Action::Right => self.dir = (self.dir + 1) % 4,
            Action::Forward => {
                if self.balls.contains(&front) {
                    reward = -1.0;
                    terminated = true;
                } else {
                    match front_cell {
                        Some(Cell::Empty) | Some(Cell::Door { open: true, .. }) => self.agent = front,
                        Some(Cell::Goal) => {
                            self.agent = front;
                            reward = success(self);
                            terminated = true;
                        }
                        Some(Cell::Lava) => {
                            self.agent = front;
                            terminated = true;
                        }
                        _ => {}
                    }
                }
            }
            Action::Pickup => {
                if !self.carrying && front_cell == Some(Cell::Key) {
                    self.carrying = true;
                    self.set_cell(front, Cell::Empty);
                }
            }
            Action::Drop => {
                if self.carrying && front_cell == Some(Cell::Empty) && !self.balls.contains(&front) {
                    self.carrying = false;
                    self.set_cell(front, Cell::Key);
                }
            }
            Action::Toggle => {
                if let Some(Cell::Door { locked, open }) = front_cell {
                    let next = if locked {
                        self.carrying.then_some(Cell::Door { locked: false, open: true })
                    } else {
                        Some(Cell::Door { locked: false, open: !open })
                    };
                    if let Some(c) = next {
                        self.set_cell(front, c);
                    }
                }
            }
            Action::Done => {
                if matches!(self.task.layout, Layout::GoToDoor) && matches!(front_cell, Some(Cell::Door { .. })) {
                    reward = success(self);
                    terminated = true;
                }
            }
        }

        let truncated = !terminated && self.step_count >= self.task.max_steps;
        let done = terminated || truncated;
        self.finished = done;
        Ok(StepOutcome { obs: self.observe(), reward, done, truncated })
    }

    /// Whether the objective is reachable from the current state. Balls are
    /// treated as passable (they move), lava as blocking, and a locked door
    /// as passable only once the key is reachable.
    pub fn is_solvable(&self) -> bool {
        let key_reachable = self.carrying || self.flood(false).iter().enumerate().any(|(i, &r)| r && self.cells[i] == Cell::Key);
        let seen = self.flood(key_reachable);
        let w = self.task.width as i32;
        match self.task.layout {
            Layout::GoToDoor => (0..self.cells.len()).any(|i| {
                let p = (i as i32 % w, i as i32 / w);
                matches!(self.cells[i], Cell::Door { .. }) && DIRS.iter().any(|d| {
                    let q = (p.0 + d.0, p.1 + d.1);
                    self.in_bounds(q) && seen[(q.1 * w + q.0) as usize]
                })
            }),
            _ => seen.iter().enumerate().any(|(i, &r)| r && self.cells[i] == Cell::Goal),
        }
    }

    fn flood(&self, unlock: bool) -> Vec<bool> {
        let w = self.task.width as i32;
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([self.agent]);
        seen[(self.agent.1 * w + self.agent.0) as usize] = true;
        while let Some(p) = queue.pop_front() {
            for d in DIRS {
                let q = (p.0 + d.0, p.1 + d.1);
                let Some(c) = self.cell(q) else { continue };
                let idx = (q.1 * w + q.0) as usize;
                let passable = match c {
                    Cell::Wall | Cell::Lava => false,
                    Cell::Door { locked: true, .. } => unlock,
                    _ => true,
                };
                if passable && !seen[idx] {
                    seen[idx] = true;
                    queue.push_back(q);
                }
            }
        }
        seen
    }
}

/// Result of stepping one environment inside [`batch_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStep {
    pub outcome: StepOutcome,
    /// First observation of the new episode when the old one ended.
    pub reset_obs: Option<Observation>,
}

impl BatchStep {
    /// Observation the agent acts on next.
    pub fn next_obs(&self) -> &Observation {
        self.reset_obs.as_ref().unwrap_or(&self.outcome.obs)
    }
}

/// Steps every environment and resets the ones whose episode ended.
pub fn batch_step(states: &mut [GridState], actions: &[usize]) -> Result<Vec<BatchStep>, GridError> {
    assert_eq!(states.len(), actions.len(), "one action per environment");
    states
        .iter_mut()
        .zip(actions)
        .map(|(s, &a)| {
            let outcome = s.step(a)?;
            let reset_obs = if outcome.done { Some(s.reset()?) } else { None };
            Ok(BatchStep { outcome, reset_obs })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: &'static str,
    pub width: usize,
    pub height: usize,
    pub obs_dim: usize,
    pub max_steps: u32,
}

/// Machine-readable registry of every known task.
pub fn manifest() -> Vec<ManifestEntry> {
    let groups = [("pretrain", &PRETRAIN_TASKS[..]), ("eval", &EVAL_TASKS[..]), ("source", &SOURCE_TASKS[..])];
    groups
        .iter()
        .flat_map(|(group, names)| {
            names.iter().map(move |n| {
                let t = make_task(n).expect("registered task");
                ManifestEntry { name: t.name, group, width: t.width, height: t.height, obs_dim: t.obs_dim, max_steps: t.max_steps }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(name: &str, seed: u64) -> GridState {
        reset(Arc::new(make_task(name).unwrap()), seed).unwrap().0
    }

    #[test]
    fn unknown_task_is_rejected() {
        assert_eq!(make_task("NoSuchEnv"), Err(GridError::UnknownTask("NoSuchEnv".into())));
    }

    #[test]
    fn doorkey_layout_has_one_of_each() {
        for seed in 0..50 {
            let s = state("DoorKey-Random-6x6", seed);
            let count = |f: fn(&Cell) -> bool| s.cells.iter().filter(|c| f(c)).count();
            assert_eq!(count(|c| *c == Cell::Key), 1);
            assert_eq!(count(|c| *c == Cell::Door { locked: true, open: false }), 1);
            assert_eq!(count(|c| *c == Cell::Goal), 1);
        }
    }

    #[test]
    fn lava_gap_has_single_opening() {
        for seed in 0..50 {
            let s = state("LavaGapS6", seed);
            let cols: Vec<i32> = (0..6).filter(|&x| (0..6).any(|y| s.cell((x, y)) == Some(Cell::Lava))).collect();
            assert_eq!(cols.len(), 1);
            let lava = (1..5).filter(|&y| s.cell((cols[0], y)) == Some(Cell::Lava)).count();
            assert_eq!(lava, 3);
        }
    }

    #[test]
    fn goal_reward_formula() {
        let mut s = state("Empty8x8", 0);
        // Agent at (1,1) facing east; place goal directly ahead.
        s.set_cell((2, 1), Cell::Goal);
        s.set_step_count(9);
        let task = Arc::new(TaskSpec { max_steps: 100, ..(**s.task()).clone() });
        s.task = task;
        let out = s.step(Action::Forward as usize).unwrap();
        assert!(out.done && !out.truncated);
        assert_eq!(out.reward, 1.0 - 0.9 * (10.0 / 100.0));
        assert_eq!(out.reward, 0.91);
    }

    #[test]
    fn wall_blocks_forward() {
        let mut s = state("Empty8x8", 0);
        s.set_agent((1, 1), 3);
        let out = s.step(Action::Forward as usize).unwrap();
        assert_eq!(s.agent(), ((1, 1), 3));
        assert_eq!(out.reward, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn locked_door_needs_key() {
        let mut s = state("DoorKey6x6", 3);
        let door = (0..36).map(|i| (i % 6, i / 6)).find(|&p| matches!(s.cell(p), Some(Cell::Door { .. }))).unwrap();
        s.set_agent((door.0 - 1, door.1), 0);
        s.step(Action::Toggle as usize).unwrap();
        assert_eq!(s.cell(door), Some(Cell::Door { locked: true, open: false }));
        s.carrying = true;
        s.step(Action::Toggle as usize).unwrap();
        assert_eq!(s.cell(door), Some(Cell::Door { locked: false, open: true }));
        s.step(Action::Forward as usize).unwrap();
        assert_eq!(s.agent().0, door);
    }

    #[test]
    fn step_after_terminal_errors() {
        let mut s = state("LavaGapS6", 1);
        s.set_cell((2, 1), Cell::Lava);
        s.set_agent((1, 1), 0);
        let out = s.step(Action::Forward as usize).unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 0.0);
        assert_eq!(s.step(0), Err(GridError::StepAfterTerminal));
    }

    #[test]
    fn truncation_at_cap() {
        let mut s = state("Empty8x8", 0);
        let cap = s.task().max_steps;
        for i in 1..=cap {
            let out = s.step(Action::Left as usize).unwrap();
            assert_eq!(out.done, i == cap);
            assert_eq!(out.truncated, i == cap);
        }
    }

    #[test]
    fn view_encodes_front_cell() {
        let mut s = state("Empty8x8", 0);
        s.set_agent((3, 3), 0);
        s.set_cell((4, 3), Cell::Key);
        let obs = s.observe();
        // Cell directly ahead is view (3, 5).
        assert_eq!(obs[(5 * VIEW + 3) * NUM_CLASSES + class::KEY], 1.0);
        assert_eq!(obs.iter().filter(|&&v| v == 1.0).count(), VIEW * VIEW);
    }

    #[test]
    fn manifest_lists_every_task() {
        let m = manifest();
        assert_eq!(m.len(), 16);
        assert!(m.iter().all(|e| e.obs_dim == 442));
    }
}
