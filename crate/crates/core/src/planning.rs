//! Planning on frozen maps, the plan-switching data-collection policy, and
//! task statistics estimated with Monte Carlo rollouts.
//!
//! The planning state is `(cell, heading)`: 8 x 8 x 4 = 256 states with the
//! three actions of the environment. Entering an object cell pays that
//! object's reward and ends the plan, i.e. the object counts as consumed. A
//! plan is recomputed whenever the live map changes, so a consumed object is
//! never counted twice.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{kinematic_step, Action, AgentPose, Cell, EnvState, EpisodeLog, Heading, RewardSpec, StaticMap, GRID_SIZE};

pub const GAMMA: f64 = 0.95;
pub const VI_TOLERANCE: f64 = 1e-6;
pub const VI_MAX_SWEEPS: usize = 10_000;
pub const SWITCH_PROB: f64 = 0.1;
pub const N_STATES: usize = GRID_SIZE as usize * GRID_SIZE as usize * 4;

pub fn state_index(pose: AgentPose) -> usize {
    pose.cell.index() * 4 + pose.heading.index()
}

pub fn pose_of(index: usize) -> AgentPose {
    AgentPose { cell: Cell::from_index(index / 4), heading: Heading::ALL[index % 4] }
}

/// Successor state of every `(state, action)` pair under the deterministic
/// planning kinematics.
fn successors() -> &'static [[usize; 3]] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<[usize; 3]>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..N_STATES)
            .map(|s| {
                let pose = pose_of(s);
                Action::ALL.map(|a| state_index(kinematic_step(pose, a, GRID_SIZE, || true)))
            })
            .collect()
    })
}

/// Converged state values and action values for one map and reward mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    values: Vec<f64>,
    q: Vec<[f64; 3]>,
    pub sweeps: usize,
    pub residual: f64,
    pub gamma: f64,
}

impl ValueFunction {
    pub fn value(&self, pose: AgentPose) -> f64 {
        self.values[state_index(pose)]
    }

    pub fn q(&self, pose: AgentPose) -> [f64; 3] {
        self.q[state_index(pose)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Greedy action; exact ties go to the earliest of Maintain, TurnLeft,
    /// TurnRight.
    pub fn greedy(&self, pose: AgentPose) -> Action {
        argmax_action(&self.q(pose))
    }

    pub fn policy(&self, rewards: [f64; 3]) -> PolicyTable {
        PolicyTable {
            actions: (0..N_STATES).map(|s| argmax_action(&self.q[s])).collect(),
            rewards,
        }
    }

    /// Largest `|T V - V|` over all states.
    pub fn bellman_residual(&self, map: &StaticMap, rewards: [f64; 3]) -> f64 {
        let backed = bellman_backup(&self.values, &map_rewards(map, rewards), &map_terminal(map), self.gamma);
        backed
            .iter()
            .zip(&self.values)
            .map(|(q, v)| (q.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v).abs())
            .fold(0.0, f64::max)
    }
}

pub fn argmax_action(q: &[f64; 3]) -> Action {
    let mut best = 0;
    for a in 1..3 {
        if q[a] > q[best] {
            best = a;
        }
    }
    Action::ALL[best]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    actions: Vec<Action>,
    /// Rewards `[Passenger, Roadblock, ParkedCar]` the table was planned for.
    pub rewards: [f64; 3],
}

impl PolicyTable {
    pub fn action(&self, pose: AgentPose) -> Action {
        self.actions[state_index(pose)]
    }
}

/// Reward paid on entering each cell.
fn map_rewards(map: &StaticMap, rewards: [f64; 3]) -> Vec<f64> {
    let mut r = vec![0.0; GRID_SIZE as usize * GRID_SIZE as usize];
    for (cell, ty) in map.objects() {
        r[cell.index()] = rewards[ty.index()];
    }
    r
}

fn map_terminal(map: &StaticMap) -> Vec<bool> {
    let mut t = vec![false; GRID_SIZE as usize * GRID_SIZE as usize];
    for (cell, _) in map.objects() {
        t[cell.index()] = true;
    }
    t
}

fn bellman_backup(values: &[f64], cell_reward: &[f64], terminal: &[bool], gamma: f64) -> Vec<[f64; 3]> {
    let succ = successors();
    (0..N_STATES)
        .map(|s| {
            succ[s].map(|n| {
                let cell = n / 4;
                if terminal[cell] {
                    cell_reward[cell]
                } else {
                    gamma * values[n]
                }
            })
        })
        .collect()
}

pub fn value_iterate(map: &StaticMap, spec: &RewardSpec) -> Result<ValueFunction> {
    value_iterate_rewards(map, spec.values_f64())
}

/// Value iteration with arbitrary real rewards per object type, ordered
/// `[Passenger, Roadblock, ParkedCar]`.
pub fn value_iterate_rewards(map: &StaticMap, rewards: [f64; 3]) -> Result<ValueFunction> {
    let cell_reward = map_rewards(map, rewards);
    let terminal = map_terminal(map);
    let succ = successors();
    let mut values = vec![0.0; N_STATES];
    let mut next = vec![0.0; N_STATES];
    for sweep in 1..=VI_MAX_SWEEPS {
        let mut residual: f64 = 0.0;
        for s in 0..N_STATES {
            let mut best = f64::NEG_INFINITY;
            for &n in &succ[s] {
                let cell = n / 4;
                let q = if terminal[cell] { cell_reward[cell] } else { GAMMA * values[n] };
                best = best.max(q);
            }
            residual = residual.max((best - values[s]).abs());
            next[s] = best;
        }
        std::mem::swap(&mut values, &mut next);
        if residual < VI_TOLERANCE {
            let q = bellman_backup(&values, &cell_reward, &terminal, GAMMA);
            let residual = q
                .iter()
                .zip(&values)
                .map(|(q, v)| (q.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v).abs())
                .fold(0.0, f64::max);
            return Ok(ValueFunction { values, q, sweeps: sweep, residual, gamma: GAMMA });
        }
        if sweep == VI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps: sweep, residual });
        }
    }
    unreachable!()
}

/// Memoizes value functions per `(map, rewards)`; the live map only changes
/// on pickups and respawns, so most ticks hit the cache.
#[derive(Debug, Default, Clone)]
pub struct Planner {
    cache: HashMap<(StaticMap, [u64; 3]), Rc<ValueFunction>>,
}

impl Planner {
    const CAPACITY: usize = 256;

    pub fn plan(&mut self, map: &StaticMap, rewards: [f64; 3]) -> Rc<ValueFunction> {
        let key = (map.clone(), rewards.map(f64::to_bits));
        if let Some(v) = self.cache.get(&key) {
            return Rc::clone(v);
        }
        if self.cache.len() >= Self::CAPACITY {
            self.cache.clear();
        }
        let vf = Rc::new(value_iterate_rewards(map, rewards).expect("value iteration converges for gamma < 1"));
        self.cache.insert(key, Rc::clone(&vf));
        vf
    }

    pub fn greedy(&mut self, state: &EnvState, rewards: [f64; 3]) -> Action {
        self.plan(&state.static_snapshot(), rewards).greedy(state.agent)
    }
}

/// Anything that picks an action from the live state. `just_picked_up` tells
/// the policy whether the previous transition was a pickup.
pub trait Policy {
    fn act(&mut self, state: &EnvState, just_picked_up: bool) -> Action;

    /// Replaces internal randomness; deterministic policies ignore it.
    fn reseed(&mut self, _seed: u64) {}
}

/// Replanning greedy policy for a fixed reward mapping.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub rewards: [f64; 3],
    planner: Planner,
}

impl GreedyPolicy {
    pub fn new(spec: &RewardSpec) -> Self {
        Self::with_rewards(spec.values_f64())
    }

    pub fn with_rewards(rewards: [f64; 3]) -> Self {
        Self { rewards, planner: Planner::default() }
    }
}

impl Policy for GreedyPolicy {
    fn act(&mut self, state: &EnvState, _just_picked_up: bool) -> Action {
        self.planner.greedy(state, self.rewards)
    }
}

/// Uniformly random actions.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _state: &EnvState, _just_picked_up: bool) -> Action {
        Action::ALL[self.rng.random_range(0..3)]
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

/// The data-collection agent: follows the greedy plan of one of the three
/// behavior mappings and redraws the mapping after every pickup, or with
/// probability `switch_prob` on any tick.
#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    current: usize,
    pub switch_prob: f64,
    rng: ChaCha8Rng,
    planner: Planner,
    pub switches: usize,
}

impl BehaviorPolicy {
    pub fn new(seed: u64) -> Self {
        Self::with_switch_prob(seed, SWITCH_PROB)
    }

    pub fn with_switch_prob(seed: u64, switch_prob: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = rng.random_range(0..3);
        Self { current, switch_prob, rng, planner: Planner::default(), switches: 0 }
    }

    pub fn current_spec(&self) -> RewardSpec {
        RewardSpec::behavior_mappings()[self.current]
    }

    pub fn current_index(&self) -> usize {
        self.current
    }

    /// One decision: possibly reselect the mapping, then act greedily.
    pub fn behavior_step(&mut self, state: &EnvState, just_picked_up: bool) -> Action {
        let redraw = just_picked_up || self.rng.random_bool(self.switch_prob);
        if redraw {
            self.current = self.rng.random_range(0..3);
            self.switches += 1;
        }
        let rewards = self.current_spec().values_f64();
        self.planner.greedy(state, rewards)
    }
}

impl Policy for BehaviorPolicy {
    fn act(&mut self, state: &EnvState, just_picked_up: bool) -> Action {
        self.behavior_step(state, just_picked_up)
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

/// Runs `policy` from `state` until the episode ends and logs every step.
pub fn run_episode<P: Policy + ?Sized>(mut state: EnvState, policy: &mut P) -> Result<(EpisodeLog, EnvState)> {
    let mut log = EpisodeLog::default();
    let mut picked = false;
    while !state.is_finished() {
        let action = policy.act(&state, picked);
        let before = state.clone();
        let out = state.step(action)?;
        log.push(&before, action, out);
        picked = out.event.is_some();
    }
    Ok((log, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub q_hat: f64,
    pub q_se: f64,
    pub v_hat: f64,
    pub v_se: f64,
    pub n_rollouts: usize,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Discounted return of one rollout: the first action (forced or from the
/// policy) followed by `horizon` policy steps, in the regenerating
/// environment with the episode length lifted.
fn rollout<P: Policy + Clone>(state: &EnvState, first: Option<Action>, policy: &P, horizon: usize, seed: u64) -> f64 {
    let mut env = state.clone();
    env.episode_len = u32::MAX;
    env.reseed(seed);
    let mut pol = policy.clone();
    pol.reseed(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut picked = false;
    for t in 0..=horizon {
        let action = match (t, first) {
            (0, Some(a)) => a,
            _ => pol.act(&env, picked),
        };
        let out = env.step(action).expect("episode length lifted");
        ret += discount * out.reward as f64;
        discount *= GAMMA;
        picked = out.event.is_some();
    }
    ret
}

/// Sample-mean discounted returns for `Q(state, action)` and `V(state)`
/// under `policy`, with standard errors.
pub fn mc_estimate<P: Policy + Clone>(
    state: &EnvState,
    action: Action,
    policy: &P,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_rollouts == 0 {
        return Err(Error::InvalidArgument("n_rollouts must be at least 1".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut qs = Vec::with_capacity(n_rollouts);
    let mut vs = Vec::with_capacity(n_rollouts);
    for _ in 0..n_rollouts {
        let s: u64 = seeds.random();
        qs.push(rollout(state, Some(action), policy, horizon, s));
        vs.push(rollout(state, None, policy, horizon, s.wrapping_add(1)));
    }
    let (q_hat, q_se) = mean_se(&qs);
    let (v_hat, v_se) = mean_se(&vs);
    Ok(McEstimate { q_hat, q_se, v_hat, v_se, n_rollouts })
}

/// How the behavior-policy action value is formed. The published formula
/// reads `R(s,a) + V*(s')`; the default uses the behavior policy's own value
/// of the successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BehaviorQReading {
    #[default]
    BehaviorValue,
    StarredValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStatConfig {
    pub n_rollouts: usize,
    pub horizon: usize,
    pub seed: u64,
    pub reading: BehaviorQReading,
}

impl Default for TaskStatConfig {
    fn default() -> Self {
        Self { n_rollouts: 200, horizon: 100, seed: 0, reading: BehaviorQReading::BehaviorValue }
    }
}

/// Per `(state, action)` task statistics. Starred quantities are exact on
/// the frozen map; behavior quantities come from rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStatistics {
    pub q_star: f64,
    pub v_star: f64,
    pub optimality: u8,
    pub q_behavior: f64,
    pub v_behavior: f64,
    pub advantage_star: f64,
    pub advantage_behavior: f64,
    pub surprise: f64,
    pub q_behavior_se: f64,
}

pub fn task_statistics<P: Policy + Clone>(
    state: &EnvState,
    action: Action,
    behavior: &P,
    spec: &RewardSpec,
    cfg: &TaskStatConfig,
) -> Result<TaskStatistics> {
    let vf = value_iterate(&state.static_snapshot(), spec)?;
    let q = vf.q(state.agent);
    let q_star = q[action.index()];
    let v_star = vf.value(state.agent);
    let optimality = u8::from(q_star >= q.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 1e-9);
    let mc = mc_estimate(state, action, behavior, cfg.n_rollouts, cfg.horizon, cfg.seed)?;
    let (q_behavior, q_behavior_se) = match cfg.reading {
        BehaviorQReading::BehaviorValue => (mc.q_hat, mc.q_se),
        BehaviorQReading::StarredValue => (q_star, 0.0),
    };
    Ok(TaskStatistics {
        q_star,
        v_star,
        optimality,
        q_behavior,
        v_behavior: mc.v_hat,
        advantage_star: q_star - v_star,
        advantage_behavior: q_behavior - mc.v_hat,
        surprise: q_behavior - q_star,
        q_behavior_se,
    })
}
