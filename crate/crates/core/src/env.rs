//! Partially observable predator-prey grid world.
//!
//! Predators are the controlled team and share one reward. Preys follow a
//! fixed policy. Each tick every living agent moves at once (moves off the
//! grid have no effect), then each living prey counts the predators
//! cardinally adjacent to it. The step reward is `-0.01` plus, per caught
//! prey, `+5` when two or more predators catch it (the prey dies) or `-0.5`
//! when exactly one does (the prey survives). Episodes end when every prey is
//! dead or after `max_steps` steps.
//!
//! Observation layout for predator `i`, all `f64`:
//!
//! | slot | length | content |
//! |------|--------|---------|
//! | own position | 2 | `row / (x-1)`, `col / (x-1)` |
//! | agent index | `n_predators` | one-hot |
//! | prey `k` | 2 each | `(drow / l, dcol / l)` when the prey is alive, inside the `l x l` window centred on the predator, and not masked; `(-1, -1)` otherwise |
//!
//! Window offsets lie in `[-(l-1)/2, (l-1)/2]`, so visible coordinates stay
//! inside `(-0.5, 0.5)` and never collide with the sentinel.

use std::io::Write;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::ActionDistribution;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NUM_ACTIONS: usize = 5;
pub const STEP_COST: f64 = -0.01;
pub const TEAM_CATCH_REWARD: f64 = 5.0;
pub const SOLO_CATCH_PENALTY: f64 = -0.5;
pub const HIDDEN: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub grid_size: usize,
    pub n_predators: usize,
    pub n_preys: usize,
    pub view_size: usize,
    pub max_steps: usize,
    pub mask_opponent_obs: bool,
}

impl GridConfig {
    /// 5x5 grid, two predators, one prey.
    pub fn pp2v1() -> Self {
        GridConfig { grid_size: 5, n_predators: 2, n_preys: 1, view_size: 5, max_steps: 100, mask_opponent_obs: false }
    }

    /// 7x7 grid, four predators, two preys.
    pub fn pp4v2() -> Self {
        GridConfig { grid_size: 7, n_predators: 4, n_preys: 2, view_size: 5, max_steps: 100, mask_opponent_obs: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::config("grid_size must be at least 2"));
        }
        if self.n_predators == 0 || self.n_preys == 0 {
            return Err(Error::config("need at least one predator and one prey"));
        }
        if self.view_size == 0 || self.view_size % 2 == 0 {
            return Err(Error::config("view_size must be an odd positive integer"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        if self.n_predators + self.n_preys > self.grid_size * self.grid_size {
            return Err(Error::config(format!(
                "a {0}x{0} grid cannot hold {1} agents on distinct cells",
                self.grid_size,
                self.n_predators + self.n_preys
            )));
        }
        Ok(())
    }

    pub fn obs_len(&self) -> usize {
        2 + self.n_predators + 2 * self.n_preys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    fn manhattan(self, other: Pos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    fn moved(self, action: Action, size: usize) -> Pos {
        let Pos { row, col } = self;
        match action {
            Action::Up if row > 0 => Pos::new(row - 1, col),
            Action::Down if row + 1 < size => Pos::new(row + 1, col),
            Action::Left if col > 0 => Pos::new(row, col - 1),
            Action::Right if col + 1 < size => Pos::new(row, col + 1),
            _ => self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Noop = 4,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Noop];

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL.get(i).copied().ok_or_else(|| Error::Env(format!("invalid action index {i}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub predators: Vec<Pos>,
    pub preys: Vec<Pos>,
    pub prey_alive: Vec<bool>,
    pub step_count: usize,
}

impl GridState {
    pub fn all_preys_dead(&self) -> bool {
        self.prey_alive.iter().all(|a| !a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatchEvent {
    pub prey: usize,
    pub catchers: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    pub catches: Vec<CatchEvent>,
    /// Realised prey actions, `None` for dead preys. Metric use only.
    pub prey_actions: Vec<Option<Action>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Behaviour of the uncontrolled preys.
pub trait PreyPolicy: Send + Sync + std::fmt::Debug {
    fn distribution(&self, state: &GridState, prey_index: usize) -> Result<ActionDistribution>;
}

/// Every action with probability 1/5 at every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPrey;

impl PreyPolicy for UniformPrey {
    fn distribution(&self, state: &GridState, prey_index: usize) -> Result<ActionDistribution> {
        prey_policy(state, prey_index)
    }
}

/// Ground-truth prey policy: uniform over the five actions.
pub fn prey_policy(state: &GridState, prey_index: usize) -> Result<ActionDistribution> {
    match state.prey_alive.get(prey_index) {
        None => Err(Error::Env(format!("no prey {prey_index}"))),
        Some(false) => Err(Error::Env(format!("prey {prey_index} is dead"))),
        Some(true) => Ok(ActionDistribution::uniform(NUM_ACTIONS)),
    }
}

/// Places all agents on distinct cells drawn uniformly with a generator seeded by `seed`.
pub fn reset(config: &GridConfig, seed: u64) -> Result<(GridState, Vec<Observation>)> {
    let mut rng = Rng::seed_from_u64(seed);
    let state = initial_state(config, &mut rng)?;
    let obs = observe_all(&state, config);
    Ok((state, obs))
}

fn initial_state(config: &GridConfig, rng: &mut Rng) -> Result<GridState> {
    config.validate()?;
    let cells = config.grid_size * config.grid_size;
    let picks = sample(rng, cells, config.n_predators + config.n_preys);
    let pos: Vec<Pos> = picks.iter().map(|c| Pos::new(c / config.grid_size, c % config.grid_size)).collect();
    Ok(GridState {
        predators: pos[..config.n_predators].to_vec(),
        preys: pos[config.n_predators..].to_vec(),
        prey_alive: vec![true; config.n_preys],
        step_count: 0,
    })
}

pub fn observe(state: &GridState, predator_index: usize, config: &GridConfig) -> Observation {
    let mut v = Vec::with_capacity(config.obs_len());
    let me = state.predators[predator_index];
    let scale = (config.grid_size - 1) as f64;
    v.push(me.row as f64 / scale);
    v.push(me.col as f64 / scale);
    for i in 0..config.n_predators {
        v.push(if i == predator_index { 1.0 } else { 0.0 });
    }
    let half = (config.view_size / 2) as i64;
    let l = config.view_size as f64;
    for (prey, &alive) in state.preys.iter().zip(&state.prey_alive) {
        let dr = prey.row as i64 - me.row as i64;
        let dc = prey.col as i64 - me.col as i64;
        if alive && !config.mask_opponent_obs && dr.abs() <= half && dc.abs() <= half {
            v.push(dr as f64 / l);
            v.push(dc as f64 / l);
        } else {
            v.push(HIDDEN);
            v.push(HIDDEN);
        }
    }
    Observation(v)
}

pub fn observe_all(state: &GridState, config: &GridConfig) -> Vec<Observation> {
    (0..config.n_predators).map(|i| observe(state, i, config)).collect()
}

/// Outcome of one deterministic transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: GridState,
    pub reward: f64,
    pub done: bool,
    pub catches: Vec<CatchEvent>,
}

/// Applies predator and prey moves simultaneously and scores catches.
/// `prey_actions[k]` is ignored for dead preys.
pub fn transition(
    config: &GridConfig,
    state: &GridState,
    predator_actions: &[Action],
    prey_actions: &[Option<Action>],
) -> Result<Transition> {
    if predator_actions.len() != config.n_predators {
        return Err(Error::Env(format!(
            "expected {} predator actions, got {}",
            config.n_predators,
            predator_actions.len()
        )));
    }
    if prey_actions.len() != config.n_preys {
        return Err(Error::Env("prey action count mismatch".into()));
    }
    if state.step_count >= config.max_steps || state.all_preys_dead() {
        return Err(Error::Env("episode is already over".into()));
    }
    let size = config.grid_size;
    let mut next = state.clone();
    for (p, &a) in next.predators.iter_mut().zip(predator_actions) {
        *p = p.moved(a, size);
    }
    for ((p, &alive), a) in next.preys.iter_mut().zip(&state.prey_alive).zip(prey_actions) {
        if alive {
            *p = p.moved(a.unwrap_or(Action::Noop), size);
        }
    }
    let mut reward = STEP_COST;
    let mut catches = Vec::new();
    for k in 0..config.n_preys {
        if !next.prey_alive[k] {
            continue;
        }
        let catchers = next.predators.iter().filter(|p| p.manhattan(next.preys[k]) == 1).count();
        match catchers {
            0 => {}
            1 => reward += SOLO_CATCH_PENALTY,
            _ => {
                reward += TEAM_CATCH_REWARD;
                next.prey_alive[k] = false;
            }
        }
        if catchers > 0 {
            catches.push(CatchEvent { prey: k, catchers });
        }
    }
    next.step_count += 1;
    let done = next.all_preys_dead() || next.step_count >= config.max_steps;
    Ok(Transition { state: next, reward, done, catches })
}

/// A stateful environment instance with its own random stream.
#[derive(Debug, Clone)]
pub struct PredatorPrey {
    config: GridConfig,
    state: GridState,
    rng: Rng,
    done: bool,
    prey: Arc<dyn PreyPolicy>,
}

impl PredatorPrey {
    pub fn new(config: GridConfig) -> Result<Self> {
        Self::with_prey_policy(config, Arc::new(UniformPrey))
    }

    pub fn with_prey_policy(config: GridConfig, prey: Arc<dyn PreyPolicy>) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(0);
        let state = initial_state(&config, &mut rng)?;
        Ok(PredatorPrey { config, state, rng, done: false, prey })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Restores a saved mid-episode position.
    pub fn restore(&mut self, state: GridState, rng: Rng, done: bool) {
        self.state = state;
        self.rng = rng;
        self.done = done;
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Observation> {
        self.rng = Rng::seed_from_u64(seed);
        self.state = initial_state(&self.config, &mut self.rng).expect("config validated on construction");
        self.done = false;
        self.observations()
    }

    pub fn observations(&self) -> Vec<Observation> {
        observe_all(&self.state, &self.config)
    }

    /// Ground-truth distribution of prey `k`. Only the upper-bound variant
    /// and metric code may call this.
    pub fn prey_distribution(&self, prey_index: usize) -> Result<ActionDistribution> {
        self.prey.distribution(&self.state, prey_index)
    }

    pub fn step(&mut self, predator_actions: &[Action]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        if predator_actions.len() != self.config.n_predators {
            return Err(Error::Env(format!(
                "expected {} predator actions, got {}",
                self.config.n_predators,
                predator_actions.len()
            )));
        }
        let mut prey_actions = Vec::with_capacity(self.config.n_preys);
        for k in 0..self.config.n_preys {
            if self.state.prey_alive[k] {
                let dist = self.prey.distribution(&self.state, k)?;
                prey_actions.push(Some(Action::from_index(dist.sample(&mut self.rng))?));
            } else {
                prey_actions.push(None);
            }
        }
        let t = transition(&self.config, &self.state, predator_actions, &prey_actions)?;
        self.state = t.state;
        self.done = t.done;
        Ok(StepResult {
            observations: self.observations(),
            reward: t.reward,
            done: t.done,
            info: StepInfo { catches: t.catches, prey_actions },
        })
    }
}

/// One line of a trajectory dump. Fields are written in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: usize,
    pub step: usize,
    pub predators: Vec<Pos>,
    pub preys: Vec<Pos>,
    pub prey_alive: Vec<bool>,
    pub actions: Vec<Action>,
    pub prey_actions: Vec<Option<Action>>,
    pub reward: f64,
    pub done: bool,
}

/// Writes records as JSON lines.
pub fn write_trajectory<W: Write>(mut out: W, records: &[TrajectoryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
