//! The Robotaxi gridworld.
//!
//! An 8x8 grid with an agent that either keeps its heading or turns left or
//! right each tick, then advances one cell. Three object types carry the
//! rewards; an object is removed when the agent drives onto it and a new one
//! of the same type appears two ticks later on a random free cell.
//!
//! All randomness (layout, respawn locations, forced-turn ties) comes from the
//! ChaCha stream stored inside [`EnvState`], so a state value fully determines
//! its successors.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_SIZE: u8 = 8;
pub const EPISODE_LEN: u32 = 200;
pub const RESPAWN_DELAY: u32 = 2;
pub const OBJECTS_PER_TYPE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectType {
    Passenger,
    Roadblock,
    ParkedCar,
}

impl ObjectType {
    pub const ALL: [ObjectType; 3] = [ObjectType::Passenger, ObjectType::Roadblock, ObjectType::ParkedCar];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One of the three non-zero reward categories.
///
/// The index order `[-5, -1, +6]` is the label order used by the reaction
/// model's class head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RewardClass {
    #[serde(rename = "-5")]
    Minus5,
    #[serde(rename = "-1")]
    Minus1,
    #[serde(rename = "+6")]
    Plus6,
}

impl RewardClass {
    pub const ALL: [RewardClass; 3] = [RewardClass::Minus5, RewardClass::Minus1, RewardClass::Plus6];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn value(self) -> i32 {
        match self {
            RewardClass::Minus5 => -5,
            RewardClass::Minus1 => -1,
            RewardClass::Plus6 => 6,
        }
    }

    pub fn from_value(v: i32) -> Option<Self> {
        match v {
            -5 => Some(RewardClass::Minus5),
            -1 => Some(RewardClass::Minus1),
            6 => Some(RewardClass::Plus6),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == RewardClass::Plus6
    }
}

/// Reward per object type. Always an assignment of `{+6, -1, -5}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i32; 3]", into = "[i32; 3]")]
pub struct RewardSpec {
    classes: [RewardClass; 3],
}

impl RewardSpec {
    pub fn from_classes(classes: [RewardClass; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for c in classes {
            if seen[c.index()] {
                return Err(Error::InvalidArgument(format!(
                    "reward spec {classes:?} is not a permutation of {{+6, -1, -5}}"
                )));
            }
            seen[c.index()] = true;
        }
        Ok(Self { classes })
    }

    /// Values ordered as `[Passenger, Roadblock, ParkedCar]`.
    pub fn new(values: [i32; 3]) -> Result<Self> {
        let mut classes = [RewardClass::Minus5; 3];
        for (slot, v) in classes.iter_mut().zip(values) {
            *slot = RewardClass::from_value(v)
                .ok_or_else(|| Error::InvalidArgument(format!("{v} is not one of +6, -1, -5")))?;
        }
        Self::from_classes(classes)
    }

    pub fn ground_truth() -> Self {
        Self {
            classes: [RewardClass::Plus6, RewardClass::Minus1, RewardClass::Minus5],
        }
    }

    /// The three mappings the data-collection agent switches between: each one
    /// targets a different object type.
    pub fn behavior_mappings() -> [RewardSpec; 3] {
        use RewardClass::*;
        [
            Self { classes: [Plus6, Minus1, Minus5] },
            Self { classes: [Minus1, Plus6, Minus5] },
            Self { classes: [Minus1, Minus5, Plus6] },
        ]
    }

    pub fn class(&self, obj: ObjectType) -> RewardClass {
        self.classes[obj.index()]
    }

    pub fn reward(&self, obj: ObjectType) -> i32 {
        self.class(obj).value()
    }

    pub fn classes(&self) -> [RewardClass; 3] {
        self.classes
    }

    pub fn values(&self) -> [i32; 3] {
        self.classes.map(RewardClass::value)
    }

    pub fn values_f64(&self) -> [f64; 3] {
        self.classes.map(|c| c.value() as f64)
    }

    /// Object type holding the `+6` reward.
    pub fn best_object(&self) -> ObjectType {
        ObjectType::ALL
            .into_iter()
            .find(|o| self.class(*o) == RewardClass::Plus6)
            .expect("spec is a permutation")
    }
}

impl TryFrom<[i32; 3]> for RewardSpec {
    type Error = Error;
    fn try_from(v: [i32; 3]) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RewardSpec> for [i32; 3] {
    fn from(s: RewardSpec) -> Self {
        s.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn left(self) -> Self {
        Self::ALL[(self.index() + 3) % 4]
    }

    pub fn right(self) -> Self {
        Self::ALL[(self.index() + 1) % 4]
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (-1, 0),
            Heading::E => (0, 1),
            Heading::S => (1, 0),
            Heading::W => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Maintain,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Maintain, Action::TurnLeft, Action::TurnRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn apply(self, h: Heading) -> Heading {
        match self {
            Action::Maintain => h,
            Action::TurnLeft => h.left(),
            Action::TurnRight => h.right(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        Self { row, col }
    }

    pub fn index(self) -> usize {
        self.row as usize * GRID_SIZE as usize + self.col as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::new((i / GRID_SIZE as usize) as u8, (i % GRID_SIZE as usize) as u8)
    }

    fn offset(self, h: Heading, size: u8) -> Option<Cell> {
        let (dr, dc) = h.delta();
        let r = self.row as i32 + dr;
        let c = self.col as i32 + dc;
        let n = size as i32;
        ((0..n).contains(&r) && (0..n).contains(&c)).then(|| Cell::new(r as u8, c as u8))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

impl AgentPose {
    pub fn new(row: u8, col: u8, heading: Heading) -> Self {
        Self { cell: Cell::new(row, col), heading }
    }

    pub fn forward(&self, size: u8) -> Option<Cell> {
        self.cell.offset(self.heading, size)
    }

    /// Number of in-grid cells strictly to the side `side` of the agent.
    fn free_cells(&self, side: Heading, size: u8) -> u8 {
        let (r, c) = (self.cell.row, self.cell.col);
        match side {
            Heading::N => r,
            Heading::S => size - 1 - r,
            Heading::W => c,
            Heading::E => size - 1 - c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForcedTurn {
    Left,
    Right,
    Tie,
}

/// Direction of the farther boundary, measured as the number of cells between
/// the agent and the edge on each lateral side.
pub fn forced_turn(pose: &AgentPose, size: u8) -> ForcedTurn {
    let left = pose.free_cells(pose.heading.left(), size);
    let right = pose.free_cells(pose.heading.right(), size);
    match left.cmp(&right) {
        std::cmp::Ordering::Greater => ForcedTurn::Left,
        std::cmp::Ordering::Less => ForcedTurn::Right,
        std::cmp::Ordering::Equal => ForcedTurn::Tie,
    }
}

/// Applies `action`, then the forced boundary turn if the resulting heading
/// points off the grid. `tie_left` is consulted only on an exact tie, which
/// cannot happen on an even-sized grid.
pub fn kinematic_step(pose: AgentPose, action: Action, size: u8, tie_left: impl FnOnce() -> bool) -> AgentPose {
    let mut next = AgentPose { cell: pose.cell, heading: action.apply(pose.heading) };
    if next.forward(size).is_none() {
        let turn = match forced_turn(&next, size) {
            ForcedTurn::Left => Action::TurnLeft,
            ForcedTurn::Right => Action::TurnRight,
            ForcedTurn::Tie => {
                if tie_left() {
                    Action::TurnLeft
                } else {
                    Action::TurnRight
                }
            }
        };
        next.heading = turn.apply(next.heading);
    }
    next.cell = next.forward(size).expect("forced turn keeps the agent on the grid");
    next
}

/// Outcome of a single environment transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub reward: i32,
    pub event: Option<ObjectType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub tick: u32,
    pub agent: AgentPose,
    /// Sorted by cell.
    objects: Vec<(Cell, ObjectType)>,
    spawn_queue: Vec<(ObjectType, u32)>,
    pub score: i64,
    pub spec: RewardSpec,
    pub episode_len: u32,
    /// When false, picked objects never come back (used for exact rollouts).
    pub respawn: bool,
    rng: ChaCha8Rng,
}

impl EnvState {
    /// A fresh episode: two objects of each type on distinct random cells and
    /// the agent on a random free cell with a random heading.
    pub fn new_episode(seed: u64, spec: RewardSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_cells = GRID_SIZE as usize * GRID_SIZE as usize;
        let picks = rand::seq::index::sample(&mut rng, n_cells, 3 * OBJECTS_PER_TYPE + 1);
        let mut picks = picks.into_iter();
        let mut objects = Vec::with_capacity(6);
        for ty in ObjectType::ALL {
            for _ in 0..OBJECTS_PER_TYPE {
                objects.push((Cell::from_index(picks.next().unwrap()), ty));
            }
        }
        objects.sort();
        let agent_cell = Cell::from_index(picks.next().unwrap());
        let heading = Heading::ALL[rng.random_range(0..4)];
        Self {
            tick: 0,
            agent: AgentPose { cell: agent_cell, heading },
            objects,
            spawn_queue: Vec::new(),
            score: 0,
            spec,
            episode_len: EPISODE_LEN,
            respawn: true,
            rng,
        }
    }

    /// Builds a state with a hand-placed layout, mainly for tests and planning
    /// fixtures.
    pub fn from_layout(
        agent: AgentPose,
        objects: impl IntoIterator<Item = (Cell, ObjectType)>,
        spec: RewardSpec,
        seed: u64,
    ) -> Result<Self> {
        let mut objects: Vec<_> = objects.into_iter().collect();
        objects.sort();
        for w in objects.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidArgument(format!("two objects share cell {:?}", w[0].0)));
            }
        }
        for ty in ObjectType::ALL {
            if objects.iter().filter(|(_, t)| *t == ty).count() > OBJECTS_PER_TYPE {
                return Err(Error::InvalidArgument(format!("more than {OBJECTS_PER_TYPE} {ty} objects")));
            }
        }
        if objects.iter().any(|(c, _)| *c == agent.cell) {
            return Err(Error::InvalidArgument("agent placed on an object".into()));
        }
        Ok(Self {
            tick: 0,
            agent,
            objects,
            spawn_queue: Vec::new(),
            score: 0,
            spec,
            episode_len: EPISODE_LEN,
            respawn: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn objects(&self) -> &[(Cell, ObjectType)] {
        &self.objects
    }

    pub fn spawn_queue(&self) -> &[(ObjectType, u32)] {
        &self.spawn_queue
    }

    pub fn object_at(&self, cell: Cell) -> Option<ObjectType> {
        self.objects.iter().find(|(c, _)| *c == cell).map(|(_, t)| *t)
    }

    pub fn count(&self, ty: ObjectType) -> usize {
        self.objects.iter().filter(|(_, t)| *t == ty).count()
    }

    pub fn pending(&self, ty: ObjectType) -> usize {
        self.spawn_queue.iter().filter(|(t, _)| *t == ty).count()
    }

    pub fn is_finished(&self) -> bool {
        self.tick >= self.episode_len
    }

    /// Reseeds the internal stream, e.g. to decorrelate Monte Carlo rollouts
    /// started from a shared state.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// The forced turn for a `Maintain` into the boundary. Other actions, and
    /// `Maintain` with an in-grid forward cell, pass through unchanged.
    pub fn boundary_resolve(&mut self, action: Action) -> Action {
        if action != Action::Maintain || self.agent.forward(GRID_SIZE).is_some() {
            return action;
        }
        match forced_turn(&self.agent, GRID_SIZE) {
            ForcedTurn::Left => Action::TurnLeft,
            ForcedTurn::Right => Action::TurnRight,
            ForcedTurn::Tie => {
                if self.rng.random_bool(0.5) {
                    Action::TurnLeft
                } else {
                    Action::TurnRight
                }
            }
        }
    }

    pub fn static_snapshot(&self) -> StaticMap {
        StaticMap { objects: self.objects.clone() }
    }

    /// Advances one tick in place.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.is_finished() {
            return Err(Error::EpisodeFinished { tick: self.tick });
        }
        let rng = &mut self.rng;
        self.agent = kinematic_step(self.agent, action, GRID_SIZE, || rng.random_bool(0.5));

        let mut outcome = StepOutcome { reward: 0, event: None };
        if let Some(pos) = self.objects.iter().position(|(c, _)| *c == self.agent.cell) {
            let (_, ty) = self.objects.remove(pos);
            outcome = StepOutcome { reward: self.spec.reward(ty), event: Some(ty) };
            if self.respawn {
                self.spawn_queue.push((ty, self.tick + RESPAWN_DELAY));
            }
        }
        self.tick += 1;
        self.score += outcome.reward as i64;
        self.materialize_respawns();
        Ok(outcome)
    }

    /// Functional form of [`EnvState::step`].
    pub fn stepped(&self, action: Action) -> Result<(EnvState, StepOutcome)> {
        let mut next = self.clone();
        let out = next.step(action)?;
        Ok((next, out))
    }

    fn materialize_respawns(&mut self) {
        let tick = self.tick;
        let mut due: Vec<(ObjectType, u32)> = self.spawn_queue.iter().copied().filter(|(_, d)| *d <= tick).collect();
        if due.is_empty() {
            return;
        }
        self.spawn_queue.retain(|(_, d)| *d > tick);
        due.sort_by_key(|(ty, d)| (*d, *ty));
        for (ty, _) in due {
            let free: Vec<Cell> = (0..GRID_SIZE as usize * GRID_SIZE as usize)
                .map(Cell::from_index)
                .filter(|c| *c != self.agent.cell && self.object_at(*c).is_none())
                .collect();
            let cell = free[self.rng.random_range(0..free.len())];
            self.objects.push((cell, ty));
            self.objects.sort();
        }
    }
}

/// Frozen object layout used as the planning substrate: objects neither
/// disappear nor respawn.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StaticMap {
    objects: Vec<(Cell, ObjectType)>,
}

impl StaticMap {
    pub fn new(objects: impl IntoIterator<Item = (Cell, ObjectType)>) -> Self {
        let mut objects: Vec<_> = objects.into_iter().collect();
        objects.sort();
        Self { objects }
    }

    pub fn empty() -> Self {
        Self { objects: Vec::new() }
    }

    pub fn objects(&self) -> &[(Cell, ObjectType)] {
        &self.objects
    }

    pub fn object_at(&self, cell: Cell) -> Option<ObjectType> {
        self.objects.iter().find(|(c, _)| *c == cell).map(|(_, t)| *t)
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// One logged transition: the pre-step snapshot, the chosen action, and what it
/// produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "StepRecordJson", into = "StepRecordJson")]
pub struct StepRecord {
    pub tick: u32,
    pub agent: AgentPose,
    pub objects: Vec<(Cell, ObjectType)>,
    pub action: Action,
    pub reward: i32,
    pub event: Option<ObjectType>,
}

#[derive(Serialize, Deserialize)]
struct StepRecordJson {
    tick: u32,
    agent: (u8, u8, Heading),
    objects: Vec<(u8, u8, ObjectType)>,
    action: Action,
    reward: i32,
    event: Option<ObjectType>,
}

impl From<StepRecord> for StepRecordJson {
    fn from(r: StepRecord) -> Self {
        Self {
            tick: r.tick,
            agent: (r.agent.cell.row, r.agent.cell.col, r.agent.heading),
            objects: r.objects.iter().map(|(c, t)| (c.row, c.col, *t)).collect(),
            action: r.action,
            reward: r.reward,
            event: r.event,
        }
    }
}

impl From<StepRecordJson> for StepRecord {
    fn from(r: StepRecordJson) -> Self {
        Self {
            tick: r.tick,
            agent: AgentPose::new(r.agent.0, r.agent.1, r.agent.2),
            objects: r.objects.into_iter().map(|(row, col, t)| (Cell::new(row, col), t)).collect(),
            action: r.action,
            reward: r.reward,
            event: r.event,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn push(&mut self, before: &EnvState, action: Action, outcome: StepOutcome) {
        self.records.push(StepRecord {
            tick: before.tick,
            agent: before.agent,
            objects: before.objects.clone(),
            action,
            reward: outcome.reward,
            event: outcome.event,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_reward(&self) -> i64 {
        self.records.iter().map(|r| r.reward as i64).sum()
    }

    /// `(tick, object)` for every pickup, in order.
    pub fn pickups(&self) -> impl Iterator<Item = (u32, ObjectType)> + '_ {
        self.records.iter().filter_map(|r| r.event.map(|e| (r.tick, e)))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }
}
