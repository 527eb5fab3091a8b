//! Offline datasets: storage, normalization, planning arrays and sub-goal
//! sampling.
//!
//! A [`Trajectory`] keeps `T` rows of `(state, action, reward)`. Row `t` for
//! `t < T - 1` is a transition into row `t + 1`. When `terminal` is set the
//! final row is the absorbing observation reached by the last transition and
//! carries a zero action and zero reward. Either way a trajectory of length
//! `T` holds `T - 1` usable transitions.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("inconsistent trajectory: {0}")]
    Inconsistent(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated or malformed dataset: {0}")]
    Malformed(String),
    #[error("window out of range: start {start} + length {needed} exceeds trajectory length {len}")]
    OutOfRange { start: usize, needed: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    terminal: bool,
}

impl Trajectory {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Vec<f32>,
        terminal: bool,
    ) -> Result<Self> {
        let len = rewards.len();
        if states.len() != len * state_dim || actions.len() != len * action_dim {
            return Err(DataError::Inconsistent(format!(
                "{} rewards but {} state and {} action values (d_s={state_dim}, d_a={action_dim})",
                len,
                states.len(),
                actions.len()
            )));
        }
        if !states.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("states"));
        }
        if !actions.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("actions"));
        }
        if !rewards.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("rewards"));
        }
        Ok(Self {
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            terminal,
        })
    }

    /// Builds a trajectory from `f64` rows; values are stored at `f32` precision.
    pub fn from_rows(states: &[Vec<f64>], actions: &[Vec<f64>], rewards: &[f64], terminal: bool) -> Result<Self> {
        let state_dim = states.first().map(Vec::len).unwrap_or(0);
        let action_dim = actions.first().map(Vec::len).unwrap_or(0);
        if states.iter().any(|s| s.len() != state_dim) || actions.iter().any(|a| a.len() != action_dim) {
            return Err(DataError::Inconsistent("ragged rows".into()));
        }
        Self::new(
            state_dim,
            action_dim,
            states.iter().flatten().map(|&v| v as f32).collect(),
            actions.iter().flatten().map(|&v| v as f32).collect(),
            rewards.iter().map(|&v| v as f32).collect(),
            terminal,
        )
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn terminal(&self) -> bool {
        self.terminal
    }

    pub fn state(&self, t: usize) -> Vec<f64> {
        self.states[t * self.state_dim..(t + 1) * self.state_dim]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn action(&self, t: usize) -> Vec<f64> {
        self.actions[t * self.action_dim..(t + 1) * self.action_dim]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn reward(&self, t: usize) -> f64 {
        self.rewards[t] as f64
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rewards.iter().map(|&r| r as f64).collect()
    }

    pub fn raw_states(&self) -> &[f32] {
        &self.states
    }

    pub fn raw_actions(&self) -> &[f32] {
        &self.actions
    }

    pub fn transition_count(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// Whether transition `t` (into row `t + 1`) ends the episode.
    pub fn is_done(&self, t: usize) -> bool {
        self.terminal && t + 2 == self.len()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    /// Extends to `len` rows by repeating the final state with zero actions
    /// and zero rewards.
    pub fn padded(&self, len: usize) -> Trajectory {
        if len <= self.len() || self.is_empty() {
            return self.clone();
        }
        let mut out = self.clone();
        let last = self.states[(self.len() - 1) * self.state_dim..].to_vec();
        for _ in self.len()..len {
            out.states.extend_from_slice(&last);
            out.actions.extend(std::iter::repeat_n(0.0, self.action_dim));
            out.rewards.push(0.0);
        }
        out
    }
}

/// Discounted sum `sum_t gamma^t r_t`.
pub fn compute_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    d_s: usize,
    d_a: usize,
    episodes: usize,
    lengths: Vec<usize>,
    terminals: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        for t in &trajectories {
            if t.state_dim != state_dim || t.action_dim != action_dim {
                return Err(DataError::Inconsistent(format!(
                    "trajectory dims ({}, {}) differ from dataset ({state_dim}, {action_dim})",
                    t.state_dim, t.action_dim
                )));
            }
        }
        Ok(Self {
            state_dim,
            action_dim,
            trajectories,
        })
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::transition_count).sum()
    }

    /// One JSON header line followed by little-endian `f32` blocks: for each
    /// episode its states, then actions, then rewards.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = DatasetHeader {
            version: DATASET_VERSION,
            d_s: self.state_dim,
            d_a: self.action_dim,
            episodes: self.trajectories.len(),
            lengths: self.trajectories.iter().map(Trajectory::len).collect(),
            terminals: self.trajectories.iter().map(Trajectory::terminal).collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for t in &self.trajectories {
            for block in [&t.states, &t.actions, &t.rewards] {
                for v in block.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DataError::Malformed("missing header line".into()))?;
        let header: DatasetHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| DataError::Malformed(e.to_string()))?;
        if header.version != DATASET_VERSION {
            return Err(DataError::Version {
                found: header.version,
                expected: DATASET_VERSION,
            });
        }
        if header.lengths.len() != header.episodes || header.terminals.len() != header.episodes {
            return Err(DataError::Malformed("episode count disagrees with length table".into()));
        }
        let payload = &bytes[newline + 1..];
        let expected: usize = header
            .lengths
            .iter()
            .map(|&t| t * (header.d_s + header.d_a + 1))
            .sum::<usize>()
            * 4;
        if payload.len() != expected {
            return Err(DataError::Malformed(format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut trajectories = Vec::with_capacity(header.episodes);
        for (&len, &terminal) in header.lengths.iter().zip(&header.terminals) {
            let states: Vec<f32> = values.by_ref().take(len * header.d_s).collect();
            let actions: Vec<f32> = values.by_ref().take(len * header.d_a).collect();
            let rewards: Vec<f32> = values.by_ref().take(len).collect();
            trajectories.push(Trajectory::new(header.d_s, header.d_a, states, actions, rewards, terminal)?);
        }
        Self::new(header.d_s, header.d_a, trajectories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_dataset(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let (d_s, d_a) = trajectories
        .first()
        .map(|t| (t.state_dim, t.action_dim))
        .unwrap_or((0, 0));
    Dataset::new(d_s, d_a, trajectories.to_vec())?.save(path)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    Ok(Dataset::load(path)?.trajectories)
}

/// Per-dimension min-max scaling onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Width given to dimensions that are constant over the dataset.
pub const CONSTANT_DIM_WIDTH: f64 = 1e-6;

impl Normalizer {
    pub fn from_bounds(min: Vec<f64>, max: Vec<f64>) -> Self {
        let max = min
            .iter()
            .zip(max)
            .map(|(&lo, hi)| if hi - lo < CONSTANT_DIM_WIDTH { lo + CONSTANT_DIM_WIDTH } else { hi })
            .collect();
        Self { min, max }
    }

    pub fn fit<'a, I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for (i, &v) in row.iter().enumerate() {
                min[i] = min[i].min(v as f64);
                max[i] = max[i].max(v as f64);
            }
        }
        for i in 0..dim {
            if !min[i].is_finite() {
                min[i] = 0.0;
                max[i] = 0.0;
            }
        }
        Self::from_bounds(min, max)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize_value(&self, i: usize, v: f64) -> f64 {
        2.0 * (v - self.min[i]) / (self.max[i] - self.min[i]) - 1.0
    }

    pub fn denormalize_value(&self, i: usize, v: f64) -> f64 {
        (v + 1.0) * 0.5 * (self.max[i] - self.min[i]) + self.min[i]
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| self.normalize_value(i, v)).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| self.denormalize_value(i, v)).collect()
    }

    /// Row-wise normalization of a batch.
    pub fn normalize_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = self.normalize_value(i, *v);
            }
        }
        out
    }

    pub fn denormalize_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = self.denormalize_value(i, *v);
            }
        }
        out
    }
}

/// State and action normalizers fitted once over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetNormalizers {
    pub states: Normalizer,
    pub actions: Normalizer,
}

impl DatasetNormalizers {
    pub fn fit(dataset: &Dataset) -> Self {
        let states = Normalizer::fit(
            dataset.state_dim,
            dataset
                .trajectories
                .iter()
                .flat_map(|t| t.states.chunks_exact(dataset.state_dim.max(1))),
        );
        let actions = Normalizer::fit(
            dataset.action_dim,
            dataset
                .trajectories
                .iter()
                .flat_map(|t| t.actions.chunks_exact(dataset.action_dim.max(1))),
        );
        Self { states, actions }
    }
}

/// A 2-D planning array stored column by column: column `j` occupies
/// `data[j * rows..(j + 1) * rows]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanArray {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PlanArray {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn flat_index(&self, row: usize, col: usize) -> usize {
        col * self.rows + row
    }
}

/// Layout of a sub-goal array: `horizon + 1` columns spaced `interval` env
/// steps apart. Each column holds a state and, in the action-augmented form,
/// the `interval` actions taken from that state onwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubGoalLayout {
    pub state_dim: usize,
    pub action_dim: usize,
    pub interval: usize,
    pub horizon: usize,
    pub augmented: bool,
}

impl SubGoalLayout {
    pub fn rows(&self) -> usize {
        if self.augmented {
            self.state_dim + self.interval * self.action_dim
        } else {
            self.state_dim
        }
    }

    pub fn cols(&self) -> usize {
        self.horizon + 1
    }

    pub fn flat_len(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Trajectory rows a window starting at `start` must cover.
    pub fn window_len(&self) -> usize {
        self.horizon * self.interval + if self.augmented { self.interval } else { 1 }
    }

    /// Rewards summed into the window's return: one per action in the window.
    pub fn reward_len(&self) -> usize {
        self.horizon * self.interval + if self.augmented { self.interval } else { 0 }
    }

    /// Flat indices of the state rows of column `col`.
    pub fn state_indices(&self, col: usize) -> std::ops::Range<usize> {
        let base = col * self.rows();
        base..base + self.state_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubGoalArray {
    pub layout: SubGoalLayout,
    pub array: PlanArray,
}

impl SubGoalArray {
    pub fn state(&self, col: usize) -> &[f64] {
        &self.array.column(col)[..self.layout.state_dim]
    }
}

/// Cuts a normalized sub-goal array out of `traj` beginning at `start`.
pub fn make_subgoal_array(
    traj: &Trajectory,
    start: usize,
    layout: SubGoalLayout,
    norm: &DatasetNormalizers,
) -> Result<SubGoalArray> {
    if layout.interval == 0 || layout.horizon == 0 {
        return Err(DataError::InvalidArgument("interval and horizon must be at least 1".into()));
    }
    if layout.state_dim != traj.state_dim || (layout.augmented && layout.action_dim != traj.action_dim) {
        return Err(DataError::Inconsistent("layout dims differ from trajectory".into()));
    }
    let needed = layout.window_len();
    if start + needed > traj.len() {
        return Err(DataError::OutOfRange {
            start,
            needed,
            len: traj.len(),
        });
    }
    let mut array = PlanArray::zeros(layout.rows(), layout.cols());
    for h in 0..layout.cols() {
        let t = start + h * layout.interval;
        let col = array.column_mut(h);
        let s = traj.state(t);
        for (i, v) in s.iter().enumerate() {
            col[i] = norm.states.normalize_value(i, *v);
        }
        if layout.augmented {
            for j in 0..layout.interval {
                let a = traj.action(t + j);
                for (i, v) in a.iter().enumerate() {
                    col[layout.state_dim + j * layout.action_dim + i] = norm.actions.normalize_value(i, *v);
                }
            }
        }
    }
    Ok(SubGoalArray { layout, array })
}

/// Draws `Δ ~ Geometric(p)` on `{1, 2, ...}` and returns an index uniform on
/// `{t, ..., min(t + Δ·K, T - 1)}`.
pub fn sample_subgoal_index<R: Rng + ?Sized>(t: usize, interval: usize, p: f64, episode_len: usize, rng: &mut R) -> usize {
    assert!(p > 0.0 && p <= 1.0, "geometric parameter must be in (0, 1]");
    assert!(t < episode_len, "t must lie inside the episode");
    let delta = sample_geometric(p, rng);
    let hi = t.saturating_add(delta.saturating_mul(interval)).min(episode_len - 1);
    rng.random_range(t..=hi)
}

/// Number of Bernoulli(p) trials up to and including the first success.
pub fn sample_geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> usize {
    if p >= 1.0 {
        return 1;
    }
    let failures = Geometric::new(p).expect("valid p").sample(rng);
    (failures as usize).saturating_add(1)
}

/// Raw (unnormalized) transitions with a hindsight sub-goal per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
    pub goals: Array2<f64>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Uniform sampler over every transition of a dataset.
#[derive(Debug, Clone)]
pub struct TransitionSampler {
    index: Vec<(u32, u32)>,
}

impl TransitionSampler {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let index: Vec<(u32, u32)> = dataset
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, tr)| (0..tr.transition_count()).map(move |t| (i as u32, t as u32)))
            .collect();
        if index.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self { index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Position of a sampled transition within the flattened transition list.
    pub fn sample_positions<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch).map(|_| rng.random_range(0..self.index.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        dataset: &Dataset,
        batch: usize,
        interval: usize,
        p: f64,
        rng: &mut R,
    ) -> TransitionBatch {
        let (ds, da) = (dataset.state_dim, dataset.action_dim);
        let mut out = TransitionBatch {
            states: Array2::zeros((batch, ds)),
            actions: Array2::zeros((batch, da)),
            rewards: Array1::zeros(batch),
            next_states: Array2::zeros((batch, ds)),
            dones: Array1::zeros(batch),
            goals: Array2::zeros((batch, ds)),
        };
        for row in 0..batch {
            let (ti, t) = self.index[rng.random_range(0..self.index.len())];
            let (ti, t) = (ti as usize, t as usize);
            let tr = &dataset.trajectories[ti];
            let g = sample_subgoal_index(t, interval, p, tr.len(), rng);
            for (i, v) in tr.state(t).into_iter().enumerate() {
                out.states[[row, i]] = v;
            }
            for (i, v) in tr.action(t).into_iter().enumerate() {
                out.actions[[row, i]] = v;
            }
            for (i, v) in tr.state(t + 1).into_iter().enumerate() {
                out.next_states[[row, i]] = v;
            }
            for (i, v) in tr.state(g).into_iter().enumerate() {
                out.goals[[row, i]] = v;
            }
            out.rewards[row] = tr.reward(t);
            out.dones[row] = if tr.is_done(t) { 1.0 } else { 0.0 };
        }
        out
    }
}

/// Seeded convenience wrapper around [`TransitionSampler::sample`].
pub fn sample_transition_batch(dataset: &Dataset, batch: usize, interval: usize, p: f64, seed: u64) -> Result<TransitionBatch> {
    use rand::SeedableRng;
    let sampler = TransitionSampler::new(dataset)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(dataset, batch, interval, p, &mut rng))
}

/// Every admissible window start for a layout, with the normalized array and
/// the discounted return of the rewards it spans.
///
/// Terminal trajectories are padded with their absorbing state so windows may
/// start anywhere; time-limited ones only yield windows that fit.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub layout: SubGoalLayout,
    pub arrays: Array2<f64>,
    pub returns: Array1<f64>,
}

impl WindowSet {
    pub fn build(dataset: &Dataset, layout: SubGoalLayout, norm: &DatasetNormalizers, gamma: f64) -> Result<Self> {
        let needed = layout.window_len();
        let mut flat = Vec::new();
        let mut returns = Vec::new();
        for tr in &dataset.trajectories {
            let (source, last_start) = if tr.terminal() {
                (tr.padded(tr.len() + needed), tr.len().saturating_sub(1))
            } else if tr.len() >= needed {
                (tr.clone(), tr.len() - needed)
            } else {
                continue;
            };
            if tr.is_empty() {
                continue;
            }
            let rewards = source.rewards();
            for start in 0..=last_start {
                let arr = make_subgoal_array(&source, start, layout, norm)?;
                flat.extend_from_slice(&arr.array.data);
                returns.push(compute_return(&rewards[start..start + layout.reward_len()], gamma));
            }
        }
        if returns.is_empty() {
            return Err(DataError::Empty);
        }
        let n = returns.len();
        Ok(Self {
            layout,
            arrays: Array2::from_shape_vec((n, layout.flat_len()), flat).expect("window shape"),
            returns: Array1::from_vec(returns),
        })
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> (Array2<f64>, Array1<f64>) {
        let mut x = Array2::zeros((batch, self.arrays.ncols()));
        let mut r = Array1::zeros(batch);
        for row in 0..batch {
            let i = rng.random_range(0..self.len());
            x.row_mut(row).assign(&self.arrays.row(i));
            r[row] = self.returns[i];
        }
        (x, r)
    }
}
