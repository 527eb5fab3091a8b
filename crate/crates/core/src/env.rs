//! Deterministic toy environments and scripted data collectors.
//!
//! [`ToyMdp`] is the single-state, two-action bandit-like MDP used to contrast
//! frequency-matching generative policies with Q-learning. [`PointMassEnv`] is
//! a kinematic point mass in an axis-aligned box with optional wall segments.
//! Its state is `[x, y, dx, dy]` where `(dx, dy)` is the last displacement.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("non-finite action component")]
    NonFiniteAction,
    #[error("episode already finished")]
    EpisodeDone,
    #[error("no admissible goal: exclusion radius {0} covers the whole maze")]
    NoAdmissibleGoal(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyAction {
    B1,
    B2,
}

impl ToyAction {
    /// Scalar encoding used when the MDP feeds continuous learners.
    pub fn encode(self) -> f64 {
        match self {
            ToyAction::B1 => -0.5,
            ToyAction::B2 => 0.5,
        }
    }

    pub fn decode(a: f64) -> Self {
        if a < 0.0 {
            ToyAction::B1
        } else {
            ToyAction::B2
        }
    }
}

/// One state `c`, two self-looping actions with `R(c, b2) > R(c, b1) > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyMdp {
    reward_b1: f64,
    reward_b2: f64,
    gamma: f64,
}

impl Default for ToyMdp {
    fn default() -> Self {
        Self {
            reward_b1: 0.5,
            reward_b2: 1.0,
            gamma: 0.9,
        }
    }
}

impl ToyMdp {
    /// The lone state, as a feature vector.
    pub const STATE: [f64; 1] = [0.0];

    pub fn new(reward_b1: f64, reward_b2: f64, gamma: f64) -> Result<Self> {
        if !(reward_b2 > reward_b1 && reward_b1 > 0.0) {
            return Err(EnvError::Invalid(format!(
                "need reward_b2 > reward_b1 > 0, got {reward_b1}, {reward_b2}"
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(EnvError::Invalid(format!("gamma {gamma} not in [0, 1)")));
        }
        Ok(Self {
            reward_b1,
            reward_b2,
            gamma,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, action: ToyAction) -> f64 {
        match action {
            ToyAction::B1 => self.reward_b1,
            ToyAction::B2 => self.reward_b2,
        }
    }

    pub fn step(&self, action: ToyAction) -> StepResult {
        StepResult {
            next_state: Self::STATE.to_vec(),
            reward: self.reward(action),
            done: false,
        }
    }

    /// `n1` transitions taking b1 followed by `n2` taking b2, as one
    /// time-limited trajectory of 1-D states and encoded actions.
    pub fn dataset(&self, n1: usize, n2: usize) -> Trajectory {
        let actions: Vec<ToyAction> = std::iter::repeat_n(ToyAction::B1, n1)
            .chain(std::iter::repeat_n(ToyAction::B2, n2))
            .collect();
        let len = actions.len() + 1;
        let states = vec![Self::STATE.to_vec(); len];
        let mut acts: Vec<Vec<f64>> = actions.iter().map(|a| vec![a.encode()]).collect();
        let mut rewards: Vec<f64> = actions.iter().map(|&a| self.reward(a)).collect();
        acts.push(vec![0.0]);
        rewards.push(0.0);
        Trajectory::from_rows(&states, &acts, &rewards, false).expect("consistent rows")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `exp(-|pos' - goal|^2)` every step.
    DenseExpDist,
    /// 1 inside the goal radius (and the episode ends), else 0.
    SparseGoal,
}

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn contains(&self, p: Vec2) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        [
            self.min,
            [self.max[0], self.min[1]],
            self.max,
            [self.min[0], self.max[1]],
        ]
    }
}

/// A wall segment from `a` to `b`. Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Wall {
    pub a: Vec2,
    pub b: Vec2,
}

impl From<[f64; 4]> for Wall {
    fn from(v: [f64; 4]) -> Self {
        Wall {
            a: [v[0], v[1]],
            b: [v[2], v[3]],
        }
    }
}

impl From<Wall> for [f64; 4] {
    fn from(w: Wall) -> Self {
        [w.a[0], w.a[1], w.b[0], w.b[1]]
    }
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn distance(a: Vec2, b: Vec2) -> f64 {
    let d = sub(a, b);
    dot(d, d).sqrt()
}

/// Parameter `t` in `[0, 1]` at which segment `p -> p + d` first meets the
/// wall, if it does.
fn segment_hit(p: Vec2, d: Vec2, wall: &Wall) -> Option<f64> {
    let e = sub(wall.b, wall.a);
    let denom = cross(d, e);
    let ap = sub(wall.a, p);
    if denom.abs() < 1e-14 {
        // Parallel. Collinear overlap counts as a hit at the nearest point.
        if cross(ap, d).abs() > 1e-12 {
            return None;
        }
        let dd = dot(d, d);
        if dd == 0.0 {
            return None;
        }
        let t0 = dot(ap, d) / dd;
        let t1 = dot(sub(wall.b, p), d) / dd;
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if hi < 0.0 || lo > 1.0 {
            return None;
        }
        return Some(lo.max(0.0));
    }
    let t = cross(ap, e) / denom;
    let u = cross(ap, d) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let e = sub(b, a);
    let ee = dot(e, e);
    let t = if ee == 0.0 { 0.0 } else { (dot(sub(p, a), e) / ee).clamp(0.0, 1.0) };
    distance(p, [a[0] + t * e[0], a[1] + t * e[1]])
}

/// Smallest distance between segments `p -> q` and the wall.
pub fn segment_wall_distance(p: Vec2, q: Vec2, wall: &Wall) -> f64 {
    if segment_hit(p, sub(q, p), wall).is_some() {
        return 0.0;
    }
    point_segment_distance(p, wall.a, wall.b)
        .min(point_segment_distance(q, wall.a, wall.b))
        .min(point_segment_distance(wall.a, p, q))
        .min(point_segment_distance(wall.b, p, q))
}

/// Distance kept between the agent and a wall it runs into.
pub const WALL_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StartDistribution {
    Uniform,
    Fixed { position: Vec2, jitter: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    pub bounds: Bounds,
    pub walls: Vec<Wall>,
    pub goal: Vec2,
    pub goal_radius: f64,
    pub max_speed: f64,
    pub episode_len: usize,
    pub reward_mode: RewardMode,
    pub start: StartDistribution,
}

impl PointMassEnv {
    pub const STATE_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;
    /// Indices of the position inside the state vector.
    pub const POSITION_DIMS: [usize; 2] = [0, 1];

    /// 8x8 open square, dense reward, goal in the centre.
    pub fn open_maze() -> Self {
        Self {
            bounds: Bounds {
                min: [0.0, 0.0],
                max: [8.0, 8.0],
            },
            walls: Vec::new(),
            goal: [4.0, 4.0],
            goal_radius: 0.5,
            max_speed: 0.25,
            episode_len: 100,
            reward_mode: RewardMode::DenseExpDist,
            start: StartDistribution::Uniform,
        }
    }

    /// 8x8 box with a U-shaped wall opening upwards around the goal; the
    /// agent starts below the cup and must go around it. Sparse reward.
    pub fn u_maze() -> Self {
        Self {
            bounds: Bounds {
                min: [0.0, 0.0],
                max: [8.0, 8.0],
            },
            walls: vec![
                Wall::from([2.0, 2.0, 2.0, 6.0]),
                Wall::from([2.0, 2.0, 6.0, 2.0]),
                Wall::from([6.0, 2.0, 6.0, 6.0]),
            ],
            goal: [4.0, 3.5],
            goal_radius: 0.5,
            max_speed: 0.5,
            episode_len: 300,
            reward_mode: RewardMode::SparseGoal,
            start: StartDistribution::Fixed {
                position: [4.0, 1.0],
                jitter: 0.2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if !(b.max[0] > b.min[0] && b.max[1] > b.min[1]) {
            return Err(EnvError::Invalid("empty bounds".into()));
        }
        if !b.contains(self.goal) {
            return Err(EnvError::Invalid("goal outside bounds".into()));
        }
        if self
            .walls
            .iter()
            .any(|w| point_segment_distance(self.goal, w.a, w.b) < 1e-9)
        {
            return Err(EnvError::Invalid("goal lies on a wall".into()));
        }
        if !(self.max_speed > 0.0 && self.goal_radius > 0.0) {
            return Err(EnvError::Invalid("max_speed and goal_radius must be positive".into()));
        }
        if self.episode_len == 0 {
            return Err(EnvError::Invalid("episode_len must be positive".into()));
        }
        Ok(())
    }

    pub fn position(state: &[f64]) -> Vec2 {
        [state[0], state[1]]
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let pos = match self.start {
            StartDistribution::Uniform => [
                rng.random_range(self.bounds.min[0]..=self.bounds.max[0]),
                rng.random_range(self.bounds.min[1]..=self.bounds.max[1]),
            ],
            StartDistribution::Fixed { position, jitter } => {
                let p = [
                    position[0] + rng.random_range(-jitter..=jitter),
                    position[1] + rng.random_range(-jitter..=jitter),
                ];
                self.bounds.clamp(p)
            }
        };
        vec![pos[0], pos[1], 0.0, 0.0]
    }

    /// Moves from `from` towards `to`, stopping short of the first wall hit.
    pub fn clamp_motion(&self, from: Vec2, to: Vec2) -> Vec2 {
        let to = self.bounds.clamp(to);
        let mut d = sub(to, from);
        let len = dot(d, d).sqrt();
        if len == 0.0 {
            return from;
        }
        let mut scale: f64 = 1.0;
        for w in &self.walls {
            if let Some(t) = segment_hit(from, d, w) {
                scale = scale.min((t - WALL_CLEARANCE / len).max(0.0));
            }
        }
        d = [d[0] * scale, d[1] * scale];
        [from[0] + d[0], from[1] + d[1]]
    }

    pub fn reward_at(&self, pos: Vec2) -> (f64, bool) {
        let d = distance(pos, self.goal);
        match self.reward_mode {
            RewardMode::DenseExpDist => ((-d * d).exp(), false),
            RewardMode::SparseGoal => {
                if d < self.goal_radius {
                    (1.0, true)
                } else {
                    (0.0, false)
                }
            }
        }
    }

    pub fn succeeded(&self, state: &[f64]) -> bool {
        distance(Self::position(state), self.goal) < self.goal_radius
    }

    /// Pure transition. Actions are clipped to `[-1, 1]` per component and
    /// scaled by `max_speed`. `done` reports termination (sparse success), not
    /// the time limit.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<StepResult> {
        if action.len() != Self::ACTION_DIM {
            return Err(EnvError::InvalidArgument(format!("action has {} components", action.len())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let pos = Self::position(state);
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let target = [pos[0] + a[0] * self.max_speed, pos[1] + a[1] * self.max_speed];
        let next = self.clamp_motion(pos, target);
        let (reward, done) = self.reward_at(next);
        Ok(StepResult {
            next_state: vec![next[0], next[1], next[0] - pos[0], next[1] - pos[1]],
            reward,
            done,
        })
    }

    /// Returns true when the straight segment keeps at least `clearance`
    /// from every wall.
    pub fn line_of_sight(&self, a: Vec2, b: Vec2, clearance: f64) -> bool {
        self.walls.iter().all(|w| segment_wall_distance(a, b, w) >= clearance)
    }
}

/// Stateful episode over a [`PointMassEnv`]; refuses steps once finished.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    env: &'a PointMassEnv,
    state: Vec<f64>,
    t: usize,
    done: bool,
}

impl<'a> Episode<'a> {
    pub fn new(env: &'a PointMassEnv, state: Vec<f64>) -> Self {
        Self {
            env,
            state,
            t: 0,
            done: false,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Steps the episode; `done` also becomes true at the time limit.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let mut r = self.env.step(&self.state, action)?;
        self.t += 1;
        self.state = r.next_state.clone();
        if r.done || self.t >= self.env.episode_len {
            self.done = true;
            r.done = true;
        }
        Ok(r)
    }
}

/// Shortest paths on a grid of cell centres, used to route scripted
/// controllers around walls.
#[derive(Debug, Clone)]
pub struct Router {
    cell: f64,
    nx: usize,
    ny: usize,
    origin: Vec2,
    dist: Vec<f64>,
    target: Vec2,
}

const ROUTER_CELL: f64 = 0.5;
const ROUTER_CLEARANCE: f64 = 0.3;

impl Router {
    pub fn new(env: &PointMassEnv, target: Vec2) -> Self {
        let b = env.bounds;
        let nx = ((b.max[0] - b.min[0]) / ROUTER_CELL).ceil().max(1.0) as usize;
        let ny = ((b.max[1] - b.min[1]) / ROUTER_CELL).ceil().max(1.0) as usize;
        let mut router = Self {
            cell: ROUTER_CELL,
            nx,
            ny,
            origin: b.min,
            dist: vec![f64::INFINITY; nx * ny],
            target,
        };
        if env.walls.is_empty() {
            return router;
        }
        // Dijkstra from every cell with line of sight to the target.
        let mut heap = std::collections::BinaryHeap::new();
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> std::cmp::Ordering {
                o.0.total_cmp(&self.0)
            }
        }
        for i in 0..nx * ny {
            let c = router.center(i);
            if env.line_of_sight(c, target, ROUTER_CLEARANCE * 0.5) {
                router.dist[i] = distance(c, target);
                heap.push(Item(router.dist[i], i));
            }
        }
        while let Some(Item(d, i)) = heap.pop() {
            if d > router.dist[i] {
                continue;
            }
            let (ix, iy) = (i % nx, i / nx);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                    if (dx == 0 && dy == 0) || jx < 0 || jy < 0 || jx >= nx as i64 || jy >= ny as i64 {
                        continue;
                    }
                    let j = jy as usize * nx + jx as usize;
                    let (ci, cj) = (router.center(i), router.center(j));
                    if !env.line_of_sight(ci, cj, ROUTER_CLEARANCE) {
                        continue;
                    }
                    let nd = d + distance(ci, cj);
                    if nd < router.dist[j] {
                        router.dist[j] = nd;
                        heap.push(Item(nd, j));
                    }
                }
            }
        }
        router
    }

    fn center(&self, i: usize) -> Vec2 {
        let (ix, iy) = (i % self.nx, i / self.nx);
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell,
            self.origin[1] + (iy as f64 + 0.5) * self.cell,
        ]
    }

    /// Next point to head for from `pos`: the target when visible, otherwise
    /// the nearby visible cell centre with the shortest remaining path.
    pub fn waypoint(&self, env: &PointMassEnv, pos: Vec2) -> Vec2 {
        if env.walls.is_empty() || env.line_of_sight(pos, self.target, ROUTER_CLEARANCE * 0.5) {
            return self.target;
        }
        let mut best = (f64::INFINITY, self.target);
        for i in 0..self.nx * self.ny {
            if !self.dist[i].is_finite() {
                continue;
            }
            let c = self.center(i);
            let d = distance(pos, c);
            if d > 3.0 * self.cell {
                continue;
            }
            if !env.line_of_sight(pos, c, ROUTER_CLEARANCE * 0.5) {
                continue;
            }
            if self.dist[i] < best.0 {
                best = (self.dist[i], c);
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ScriptedPolicy {
    /// Visits random goals, rejecting any within `exclusion_radius` of the
    /// true goal.
    RandomGoalAvoider { exclusion_radius: f64 },
    /// Routes straight (or around walls) to the true goal.
    WaypointExpert,
    UniformRandom,
}

/// Gaussian action noise of the random-goal controller.
pub const AVOIDER_ACTION_NOISE: f64 = 0.2;
/// Distance at which the random-goal controller picks its next goal.
pub const AVOIDER_GOAL_REACHED: f64 = 0.25;
const MAX_GOAL_DRAWS: usize = 10_000;

fn proportional_action(env: &PointMassEnv, pos: Vec2, waypoint: Vec2) -> [f64; 2] {
    let d = sub(waypoint, pos);
    [
        (d[0] / env.max_speed).clamp(-1.0, 1.0),
        (d[1] / env.max_speed).clamp(-1.0, 1.0),
    ]
}

/// Samples a goal uniformly in bounds at least `exclusion_radius` from the
/// true goal and not on a wall.
pub fn sample_avoider_goal<R: Rng + ?Sized>(env: &PointMassEnv, exclusion_radius: f64, rng: &mut R) -> Result<Vec2> {
    if env.bounds.corners().iter().all(|&c| distance(c, env.goal) < exclusion_radius) {
        return Err(EnvError::NoAdmissibleGoal(exclusion_radius));
    }
    for _ in 0..MAX_GOAL_DRAWS {
        let g = [
            rng.random_range(env.bounds.min[0]..=env.bounds.max[0]),
            rng.random_range(env.bounds.min[1]..=env.bounds.max[1]),
        ];
        if distance(g, env.goal) < exclusion_radius {
            continue;
        }
        if env.walls.iter().any(|w| point_segment_distance(g, w.a, w.b) < ROUTER_CLEARANCE) {
            continue;
        }
        return Ok(g);
    }
    Err(EnvError::NoAdmissibleGoal(exclusion_radius))
}

/// A scripted controller for one episode.
pub struct ScriptedController {
    policy: ScriptedPolicy,
    goal: Vec2,
    router: Option<Router>,
    /// Every intermediate goal this controller has pursued.
    pub visited_goals: Vec<Vec2>,
}

impl ScriptedController {
    pub fn new<R: Rng + ?Sized>(env: &PointMassEnv, policy: ScriptedPolicy, rng: &mut R) -> Result<Self> {
        let goal = match policy {
            ScriptedPolicy::RandomGoalAvoider { exclusion_radius } => sample_avoider_goal(env, exclusion_radius, rng)?,
            _ => env.goal,
        };
        let router = (!env.walls.is_empty() && policy != ScriptedPolicy::UniformRandom).then(|| Router::new(env, goal));
        Ok(Self {
            policy,
            goal,
            router,
            visited_goals: vec![goal],
        })
    }

    pub fn act<R: Rng + ?Sized>(&mut self, env: &PointMassEnv, state: &[f64], rng: &mut R) -> Result<[f64; 2]> {
        let pos = PointMassEnv::position(state);
        match self.policy {
            ScriptedPolicy::UniformRandom => Ok([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]),
            ScriptedPolicy::WaypointExpert => {
                let wp = self.router.as_ref().map_or(self.goal, |r| r.waypoint(env, pos));
                Ok(proportional_action(env, pos, wp))
            }
            ScriptedPolicy::RandomGoalAvoider { exclusion_radius } => {
                if distance(pos, self.goal) < AVOIDER_GOAL_REACHED {
                    self.goal = sample_avoider_goal(env, exclusion_radius, rng)?;
                    self.visited_goals.push(self.goal);
                    if !env.walls.is_empty() {
                        self.router = Some(Router::new(env, self.goal));
                    }
                }
                let wp = self.router.as_ref().map_or(self.goal, |r| r.waypoint(env, pos));
                let a = proportional_action(env, pos, wp);
                let noise = Normal::new(0.0, AVOIDER_ACTION_NOISE).expect("valid sigma");
                Ok([
                    (a[0] + noise.sample(rng)).clamp(-1.0, 1.0),
                    (a[1] + noise.sample(rng)).clamp(-1.0, 1.0),
                ])
            }
        }
    }
}

/// Output of [`scripted_collect`], with the controller goals kept for audit.
#[derive(Debug, Clone)]
pub struct Collection {
    pub trajectories: Vec<Trajectory>,
    pub controller_goals: Vec<Vec<Vec2>>,
}

/// Rolls out `episodes` episodes of a scripted controller. Episodes end on
/// success (sparse mode) or at the time limit.
pub fn scripted_collect(env: &PointMassEnv, policy: ScriptedPolicy, episodes: usize, seed: u64) -> Result<Collection> {
    use rand::SeedableRng;
    if episodes == 0 {
        return Err(EnvError::InvalidArgument("episodes must be at least 1".into()));
    }
    env.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(episodes);
    let mut controller_goals = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut controller = ScriptedController::new(env, policy, &mut rng)?;
        let mut ep = Episode::new(env, env.reset(&mut rng));
        let mut states = vec![ep.state().to_vec()];
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut terminal = false;
        while !ep.is_done() {
            let a = controller.act(env, ep.state(), &mut rng)?;
            let r = ep.step(&a)?;
            actions.push(a.to_vec());
            rewards.push(r.reward);
            states.push(r.next_state);
            terminal = env.reward_mode == RewardMode::SparseGoal && env.succeeded(ep.state());
        }
        // The final row is the last observation: zero action and reward.
        actions.push(vec![0.0; PointMassEnv::ACTION_DIM]);
        rewards.push(0.0);
        trajectories.push(
            Trajectory::from_rows(&states, &actions, &rewards, terminal)
                .map_err(|e| EnvError::Invalid(e.to_string()))?,
        );
        controller_goals.push(controller.visited_goals);
    }
    Ok(Collection {
        trajectories,
        controller_goals,
    })
}

/// Discounted value of heading straight for the goal at full speed from
/// `pos` under the dense reward, summed to convergence.
pub fn direct_controller_value(env: &PointMassEnv, pos: Vec2, gamma: f64) -> f64 {
    let d0 = distance(pos, env.goal);
    let mut value = 0.0;
    let mut discount = 1.0;
    let mut t = 0usize;
    loop {
        let d = (d0 - (t + 1) as f64 * env.max_speed).max(0.0);
        value += discount * (-d * d).exp();
        discount *= gamma;
        t += 1;
        if d == 0.0 {
            return value + discount / (1.0 - gamma);
        }
        if t > 100_000 {
            return value;
        }
    }
}
