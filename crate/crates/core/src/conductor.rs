//! High-level sub-goal generators.
//!
//! [`DConductor`] diffuses whole sub-goal arrays, steered by a return
//! regressor through classifier guidance, and pins the first column to the
//! current state. [`QConductor`] proposes a single state `K` steps ahead
//! with a diffusion policy trained against a one-step TD critic.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, DatasetNormalizers, SubGoalLayout, WindowSet};
use crate::diffusion::{
    self, cosine_lr, standard_normal, timestep_embedding, Denoiser, DiffusionError, DiffusionSchedule, Guidance, Guide,
    Inpaint, SamplerOptions, ScheduleKind, TIME_EMBED_DIM,
};
use crate::nn::{Adam, Checkpoint, Gradients, MlpNet, NnError};
use crate::performer::{ActorCriticConfig, CriticBatch, DiffusionActorCritic, PerformerError, StepLosses};

#[derive(Debug, thiserror::Error)]
pub enum ConductorError {
    #[error("training diverged at step {step}: non-finite {what}")]
    Divergence { step: usize, what: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Performer(#[from] PerformerError),
}

pub type Result<T> = std::result::Result<T, ConductorError>;

pub const DCONDUCTOR_KIND: &str = "conductor_diffusion";
pub const QCONDUCTOR_KIND: &str = "conductor_q";

/// Return regressor `J(x_m, m)` over flattened noisy arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceNet {
    pub net: MlpNet,
    data_dim: usize,
}

impl GuidanceNet {
    pub fn new<R: Rng + ?Sized>(data_dim: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let mut widths = vec![data_dim + TIME_EMBED_DIM];
        widths.extend(std::iter::repeat_n(hidden, depth));
        widths.push(1);
        Self {
            net: MlpNet::new(&widths, rng),
            data_dim,
        }
    }

    pub fn from_net(net: MlpNet, data_dim: usize) -> Result<Self> {
        if net.input_dim() != data_dim + TIME_EMBED_DIM || net.output_dim() != 1 {
            return Err(ConductorError::Checkpoint("guidance network widths".into()));
        }
        Ok(Self { net, data_dim })
    }

    fn input(&self, x: ArrayView2<f64>, m: &[usize]) -> Array2<f64> {
        let mut input = Array2::zeros((x.nrows(), self.data_dim + TIME_EMBED_DIM));
        input.slice_mut(s![.., ..self.data_dim]).assign(&x);
        for (row, &mi) in m.iter().enumerate() {
            input
                .slice_mut(s![row, self.data_dim..])
                .assign(&ndarray::aview1(&timestep_embedding(mi)));
        }
        input
    }

    pub fn predict(&self, x: ArrayView2<f64>, m: &[usize]) -> Result<Array1<f64>> {
        Ok(self.net.forward(self.input(x, m).view())?.column(0).to_owned())
    }
}

impl Guide for GuidanceNet {
    fn value_and_grad(&self, x: ArrayView2<f64>, m: &[usize]) -> diffusion::Result<(Array1<f64>, Array2<f64>)> {
        let input = self.input(x, m);
        let ones = Array2::ones((x.nrows(), 1));
        let (out, dx) = self.net.input_gradient(input.view(), ones.view())?;
        Ok((out.column(0).to_owned(), dx.slice(s![.., ..self.data_dim]).to_owned()))
    }
}

/// `mean((R - J(q_sample(x0, m, eps), m))^2)` with parameter gradients.
pub fn guidance_loss_with(
    guide: &GuidanceNet,
    x0: ArrayView2<f64>,
    returns: &Array1<f64>,
    m: &[usize],
    eps: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<(f64, Gradients)> {
    let xm = schedule.q_sample(x0, m, eps)?;
    let input = guide.input(xm.view(), m);
    let (out, cache) = guide.net.forward_cached(input.view())?;
    let diff = &out.column(0) - returns;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.mapv(|d| 2.0 * d / n).insert_axis(Axis(1));
    let (g, _) = guide.net.backward(&cache, grad.view())?;
    Ok((loss, g))
}

pub fn guidance_loss<R: Rng + ?Sized>(
    guide: &GuidanceNet,
    x0: ArrayView2<f64>,
    returns: &Array1<f64>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let m: Vec<usize> = (0..x0.nrows()).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = standard_normal(x0.nrows(), x0.ncols(), rng);
    guidance_loss_with(guide, x0, returns, &m, eps.view(), schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DConductorConfig {
    /// Sub-goal interval K.
    pub interval: usize,
    /// Planning horizon H in sub-goals.
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub omega: f64,
    pub augmented: bool,
    pub gamma: f64,
    pub hidden: usize,
    pub depth: usize,
    pub guide_hidden: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch: usize,
    /// Candidate plans per call; the one with the highest predicted return
    /// is kept.
    pub plan_samples: usize,
    /// Pin the goal components of the last column when a goal is given.
    pub inpaint_goal: bool,
    /// Feed the current state to the denoiser as conditioning.
    pub condition: bool,
    /// Also condition on the inpainted goal cells. Off by default: with a
    /// small MLP denoiser it pulls plans straight through walls.
    pub condition_goal: bool,
    pub goal_dims: Vec<usize>,
}

impl Default for DConductorConfig {
    fn default() -> Self {
        Self {
            interval: 4,
            horizon: 8,
            diffusion_steps: 20,
            schedule: ScheduleKind::Cosine,
            omega: 0.01,
            augmented: true,
            gamma: 0.99,
            hidden: 128,
            depth: 3,
            guide_hidden: 64,
            lr: 1e-3,
            lr_floor: 1.0,
            batch: 64,
            plan_samples: 1,
            inpaint_goal: false,
            condition: true,
            condition_goal: false,
            goal_dims: vec![0, 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConductorLosses {
    pub denoise: f64,
    pub guidance: f64,
}

/// One sampled plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Normalized flat array, column by column.
    pub array: Array1<f64>,
    /// Raw states of every column, the pinned current state first.
    pub states: Vec<Vec<f64>>,
    /// Raw first action of column 0 when the layout is action-augmented.
    pub first_action: Option<Vec<f64>>,
    pub predicted_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DConductor {
    pub denoiser: Denoiser,
    pub guidance: GuidanceNet,
    pub schedule: DiffusionSchedule,
    pub layout: SubGoalLayout,
    pub norm: DatasetNormalizers,
    pub config: DConductorConfig,
    pub trained_steps: usize,
}

impl DConductor {
    pub fn new<R: Rng + ?Sized>(dataset: &Dataset, config: DConductorConfig, rng: &mut R) -> Result<Self> {
        Self::with_normalizers(DatasetNormalizers::fit(dataset), config, rng)
    }

    pub fn with_normalizers<R: Rng + ?Sized>(norm: DatasetNormalizers, config: DConductorConfig, rng: &mut R) -> Result<Self> {
        if config.interval == 0 || config.horizon == 0 {
            return Err(ConductorError::Config("interval and horizon must be at least 1".into()));
        }
        if config.batch == 0 || config.hidden == 0 || config.depth == 0 || config.plan_samples == 0 {
            return Err(ConductorError::Config("batch, widths and plan_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.gamma) || !config.omega.is_finite() || config.omega < 0.0 {
            return Err(ConductorError::Config("gamma must lie in [0, 1] and omega be non-negative".into()));
        }
        if config.goal_dims.iter().any(|&d| d >= norm.states.dim()) {
            return Err(ConductorError::Config("goal dimension outside the state".into()));
        }
        let layout = SubGoalLayout {
            state_dim: norm.states.dim(),
            action_dim: norm.actions.dim(),
            interval: config.interval,
            horizon: config.horizon,
            augmented: config.augmented,
        };
        Ok(Self {
            denoiser: Denoiser::new(layout.flat_len(), cond_dim(&config, &layout), config.hidden, config.depth, rng),
            guidance: GuidanceNet::new(layout.flat_len(), config.guide_hidden, config.depth, rng),
            schedule: DiffusionSchedule::new(config.diffusion_steps, config.schedule)?,
            layout,
            norm,
            config,
            trained_steps: 0,
        })
    }

    pub fn windows(&self, dataset: &Dataset) -> Result<WindowSet> {
        Ok(WindowSet::build(dataset, self.layout, &self.norm, self.config.gamma)?)
    }

    /// Alternating denoiser and return-regressor updates on dataset windows.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        dataset: &Dataset,
        steps: usize,
        rng: &mut R,
        on_step: &mut dyn FnMut(usize, ConductorLosses),
    ) -> Result<()> {
        let windows = self.windows(dataset)?;
        self.train_on(&windows, steps, rng, on_step)
    }

    pub fn train_on<R: Rng + ?Sized>(
        &mut self,
        windows: &WindowSet,
        steps: usize,
        rng: &mut R,
        on_step: &mut dyn FnMut(usize, ConductorLosses),
    ) -> Result<()> {
        let mut den_opt = Adam::new(&self.denoiser.net, self.config.lr);
        let mut guide_opt = Adam::new(&self.guidance.net, self.config.lr);
        let cond_indices = if self.config.condition { self.pinned_indices(self.goal_conditioned()) } else { Vec::new() };
        for i in 0..steps {
            let step = self.trained_steps;
            let div = |what| ConductorError::Divergence { step, what };
            let lr = cosine_lr(self.config.lr, self.config.lr_floor, i, steps);
            let (x0, returns) = windows.sample(self.config.batch, rng);
            let cond = x0.select(Axis(1), &cond_indices);
            let (denoise, g) = diffusion::denoise_loss(&self.denoiser, x0.view(), cond.view(), &self.schedule, rng)
                .map_err(|_| div("denoise loss"))?;
            den_opt.lr = lr;
            den_opt.step(&mut self.denoiser.net, &g).map_err(|_| div("denoise gradient"))?;
            let (guidance, g) = guidance_loss(&self.guidance, x0.view(), &returns, &self.schedule, rng)?;
            if !guidance.is_finite() {
                return Err(div("guidance loss"));
            }
            guide_opt.lr = lr;
            guide_opt.step(&mut self.guidance.net, &g).map_err(|_| div("guidance gradient"))?;
            self.trained_steps += 1;
            on_step(step, ConductorLosses { denoise, guidance });
        }
        Ok(())
    }

    fn goal_conditioned(&self) -> bool {
        self.config.condition && self.config.condition_goal && self.config.inpaint_goal
    }

    /// Column-0 state cells, then (if `with_goal`) the goal cells of the
    /// last column.
    fn pinned_indices(&self, with_goal: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = self.layout.state_indices(0).collect();
        if with_goal {
            let last = self.layout.state_indices(self.layout.horizon).start;
            idx.extend(self.config.goal_dims.iter().map(|&d| last + d));
        }
        idx
    }

    fn pinned_values(&self, s: &[f64], goal: Option<&[f64]>) -> Vec<f64> {
        let mut vals = self.norm.states.normalize(s);
        if let (true, Some(goal)) = (self.config.inpaint_goal, goal) {
            for (j, &d) in self.config.goal_dims.iter().enumerate() {
                vals.push(self.norm.states.normalize_value(d, goal[j]));
            }
        }
        vals
    }

    fn inpaint(&self, s: &[f64], goal: Option<&[f64]>, rows: usize) -> Inpaint {
        let with_goal = self.config.inpaint_goal && goal.is_some();
        Inpaint::broadcast(self.pinned_indices(with_goal), &self.pinned_values(s, goal), rows)
    }

    /// Samples `plan_samples` arrays with column 0 pinned to raw state `s`
    /// (and, if configured, the goal components of the last column pinned to
    /// `goal`), guided by `omega`, and keeps the highest-value one.
    pub fn plan<R: Rng + ?Sized>(&self, s: &[f64], goal: Option<&[f64]>, rng: &mut R) -> Result<Plan> {
        self.plan_with_omega(s, goal, self.config.omega, rng)
    }

    pub fn plan_with_omega<R: Rng + ?Sized>(&self, s: &[f64], goal: Option<&[f64]>, omega: f64, rng: &mut R) -> Result<Plan> {
        let n = self.config.plan_samples;
        if self.goal_conditioned() && goal.is_none() {
            return Err(ConductorError::Config("this conductor is goal-conditioned and needs a goal".into()));
        }
        let pin = self.inpaint(s, goal, n);
        let cond = self.condition_rows(s, goal, n);
        let guidance = (omega != 0.0).then_some(Guidance {
            guide: &self.guidance,
            omega,
        });
        let x = diffusion::sample(
            &self.denoiser,
            n,
            cond.view(),
            &self.schedule,
            guidance,
            Some(&pin),
            SamplerOptions::default(),
            rng,
        )?;
        let values = self.guidance.predict(x.view(), &vec![1; n])?;
        let best = (0..n).fold(0, |b, i| if values[i] > values[b] { i } else { b });
        Ok(self.decode(x.row(best).to_owned(), values[best]))
    }

    /// Denoiser conditioning for `rows` plans from raw state `s` to `goal`.
    pub fn condition_rows(&self, s: &[f64], goal: Option<&[f64]>, rows: usize) -> Array2<f64> {
        let v = match (self.config.condition, self.goal_conditioned()) {
            (false, _) => Vec::new(),
            (true, true) => self.pinned_values(s, goal),
            (true, false) => self.norm.states.normalize(s),
        };
        Array2::from_shape_fn((rows, v.len()), |(_, j)| v[j])
    }

    fn decode(&self, array: Array1<f64>, predicted_return: f64) -> Plan {
        let rows = self.layout.rows();
        let ds = self.layout.state_dim;
        let states = (0..self.layout.cols())
            .map(|c| self.norm.states.denormalize(&array.as_slice().unwrap()[c * rows..c * rows + ds]))
            .collect();
        let first_action = self
            .layout
            .augmented
            .then(|| self.norm.actions.denormalize(&array.as_slice().unwrap()[ds..ds + self.layout.action_dim]));
        Plan {
            array,
            states,
            first_action,
            predicted_return,
        }
    }

    /// Raw sub-goal states of columns `1..=H`.
    pub fn plan_subgoals<R: Rng + ?Sized>(&self, s: &[f64], goal: Option<&[f64]>, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let mut plan = self.plan(s, goal, rng)?;
        plan.states.remove(0);
        Ok(plan.states)
    }

    /// `J` at `m = 1` for normalized flat arrays.
    pub fn value(&self, arrays: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.guidance.predict(arrays, &vec![1; arrays.nrows()])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "normalizers": self.norm,
            "trained_steps": self.trained_steps,
        });
        Checkpoint::new(DCONDUCTOR_KIND, meta)
            .with_net("denoiser", &self.denoiser.net)
            .with_net("guidance", &self.guidance.net)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, DCONDUCTOR_KIND)?;
        let config: DConductorConfig = meta_field(ckpt, "config")?;
        let norm: DatasetNormalizers = meta_field(ckpt, "normalizers")?;
        let trained_steps = meta_field(ckpt, "trained_steps")?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = Self::with_normalizers(norm, config, &mut rng)?;
        let len = out.layout.flat_len();
        let cond = cond_dim(&out.config, &out.layout);
        out.denoiser = Denoiser::from_net(ckpt.net("denoiser")?.clone(), len, cond)?;
        out.guidance = GuidanceNet::from_net(ckpt.net("guidance")?.clone(), len)?;
        out.trained_steps = trained_steps;
        Ok(out)
    }
}

fn cond_dim(config: &DConductorConfig, layout: &SubGoalLayout) -> usize {
    match (config.condition, config.condition_goal && config.inpaint_goal) {
        (false, _) => 0,
        (true, false) => layout.state_dim,
        (true, true) => layout.state_dim + config.goal_dims.len(),
    }
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(ConductorError::Checkpoint(format!("expected `{kind}`, found `{}`", ckpt.kind)));
    }
    Ok(())
}

fn meta_field<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt
        .meta
        .get(key)
        .ok_or_else(|| ConductorError::Checkpoint(format!("metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| ConductorError::Checkpoint(format!("`{key}`: {e}")))
}

/// `(s_t, s_{t+K}, R^K, done)` tuples with states normalized. `R^K` is the
/// undiscounted sum of the K rewards in between; `done` marks segments that
/// contain the terminal transition.
#[derive(Debug, Clone)]
pub struct KStepSet {
    pub states: Array2<f64>,
    pub ahead: Array2<f64>,
    pub returns: Array1<f64>,
    pub dones: Array1<f64>,
}

impl KStepSet {
    pub fn build(dataset: &Dataset, interval: usize, norm: &DatasetNormalizers) -> Result<Self> {
        if interval == 0 {
            return Err(ConductorError::Config("interval must be at least 1".into()));
        }
        let ds = dataset.state_dim;
        let (mut s, mut a, mut r, mut d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for tr in &dataset.trajectories {
            if tr.is_empty() {
                continue;
            }
            let (source, last) = if tr.terminal() {
                (tr.padded(tr.len() + interval), tr.len() - 1)
            } else if tr.len() > interval {
                (tr.clone(), tr.len() - 1 - interval)
            } else {
                continue;
            };
            for t in 0..=last {
                s.extend(norm.states.normalize(&source.state(t)));
                a.extend(norm.states.normalize(&source.state(t + interval)));
                r.push((t..t + interval).map(|i| source.reward(i)).sum::<f64>());
                d.push(if tr.terminal() && t + interval >= tr.len() - 1 { 1.0 } else { 0.0 });
            }
        }
        if r.is_empty() {
            return Err(ConductorError::Data(DataError::Empty));
        }
        let n = r.len();
        Ok(Self {
            states: Array2::from_shape_vec((n, ds), s).expect("shape"),
            ahead: Array2::from_shape_vec((n, ds), a).expect("shape"),
            returns: Array1::from_vec(r),
            dones: Array1::from_vec(d),
        })
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// Critic batch: condition `s_t`, "action" `s_{t+K}`, next condition
    /// `s_{t+K}`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> CriticBatch {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        let ahead = self.ahead.select(Axis(0), &idx);
        CriticBatch {
            cond: self.states.select(Axis(0), &idx),
            next_cond: ahead.clone(),
            actions: ahead,
            rewards: self.returns.select(Axis(0), &idx),
            dones: self.dones.select(Axis(0), &idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QConductorConfig {
    pub ac: ActorCriticConfig,
    pub interval: usize,
    pub batch: usize,
}

impl Default for QConductorConfig {
    fn default() -> Self {
        Self {
            ac: ActorCriticConfig {
                critics: 1,
                ..ActorCriticConfig::default()
            },
            interval: 4,
            batch: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QConductor {
    pub engine: DiffusionActorCritic,
    pub norm: DatasetNormalizers,
    pub config: QConductorConfig,
    pub trained_steps: usize,
}

impl QConductor {
    pub fn new<R: Rng + ?Sized>(dataset: &Dataset, config: QConductorConfig, rng: &mut R) -> Result<Self> {
        Self::with_normalizers(DatasetNormalizers::fit(dataset), config, rng)
    }

    pub fn with_normalizers<R: Rng + ?Sized>(norm: DatasetNormalizers, config: QConductorConfig, rng: &mut R) -> Result<Self> {
        if config.interval == 0 || config.batch == 0 {
            return Err(ConductorError::Config("interval and batch must be positive".into()));
        }
        let d = norm.states.dim();
        Ok(Self {
            engine: DiffusionActorCritic::new(d, d, config.ac, rng)?,
            norm,
            config,
            trained_steps: 0,
        })
    }

    /// `mean((R^K + gamma Q'(s_{t+K}, s') - Q(s_t, s_{t+K}))^2)` with `s'`
    /// proposed at `s_{t+K}`.
    pub fn td_loss<R: Rng + ?Sized>(&self, batch: &CriticBatch, rng: &mut R) -> Result<(f64, Vec<Gradients>)> {
        Ok(self.engine.td_loss(batch, rng)?)
    }

    pub fn train<R: Rng + ?Sized>(
        &mut self,
        dataset: &Dataset,
        steps: usize,
        rng: &mut R,
        on_step: &mut dyn FnMut(usize, StepLosses),
    ) -> Result<()> {
        let set = KStepSet::build(dataset, self.config.interval, &self.norm)?;
        self.train_on(&set, steps, rng, on_step)
    }

    pub fn train_on<R: Rng + ?Sized>(
        &mut self,
        set: &KStepSet,
        steps: usize,
        rng: &mut R,
        on_step: &mut dyn FnMut(usize, StepLosses),
    ) -> Result<()> {
        let mut optim = self.engine.optimizers();
        for i in 0..steps {
            let batch = set.sample(self.config.batch, rng);
            let scale = self.engine.lr_scale(i, steps);
            let step = self.trained_steps;
            let losses = self.engine.update(&batch, &mut optim, scale, step, rng)?;
            self.trained_steps += 1;
            on_step(step, losses);
        }
        Ok(())
    }

    /// Raw proposed sub-goal state for raw state `s`.
    pub fn propose<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let cond = Array2::from_shape_vec((1, s.len()), self.norm.states.normalize(s))
            .map_err(|e| ConductorError::Config(e.to_string()))?;
        let x = self.engine.sample_actions(cond.view(), rng)?;
        Ok(self.norm.states.denormalize(&x.row(0).to_vec()))
    }

    /// Critic value at raw `(s, s_ahead)`.
    pub fn q_value(&self, s: &[f64], ahead: &[f64]) -> Result<f64> {
        let c = Array2::from_shape_vec((1, s.len()), self.norm.states.normalize(s)).expect("one row");
        let a = Array2::from_shape_vec((1, ahead.len()), self.norm.states.normalize(ahead)).expect("one row");
        Ok(self.engine.q_values(c.view(), a.view())?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "normalizers": self.norm,
            "trained_steps": self.trained_steps,
        });
        self.engine.write_nets(Checkpoint::new(QCONDUCTOR_KIND, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, QCONDUCTOR_KIND)?;
        let config: QConductorConfig = meta_field(ckpt, "config")?;
        let norm: DatasetNormalizers = meta_field(ckpt, "normalizers")?;
        let trained_steps = meta_field(ckpt, "trained_steps")?;
        let d = norm.states.dim();
        Ok(Self {
            engine: DiffusionActorCritic::read_nets(ckpt, d, d, config.ac)?,
            norm,
            config,
            trained_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use crate::env::{scripted_collect, PointMassEnv, ScriptedPolicy};
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config() -> DConductorConfig {
        DConductorConfig {
            interval: 2,
            horizon: 3,
            diffusion_steps: 10,
            hidden: 32,
            guide_hidden: 32,
            depth: 2,
            batch: 16,
            ..DConductorConfig::default()
        }
    }

    fn line_dataset(n: usize) -> Dataset {
        let trajs = (0..n)
            .map(|k| {
                let off = k as f64 * 0.1;
                let states: Vec<Vec<f64>> = (0..20).map(|t| vec![t as f64 * 0.1 + off, 1.0 - t as f64 * 0.05]).collect();
                let actions: Vec<Vec<f64>> = (0..20).map(|t| vec![if t % 2 == 0 { 0.5 } else { -0.5 }]).collect();
                let rewards: Vec<f64> = (0..20).map(|t| (t as f64 * 0.1 + off).min(1.0)).collect();
                Trajectory::from_rows(&states, &actions, &rewards, false).unwrap()
            })
            .collect();
        Dataset::new(2, 1, trajs).unwrap()
    }

    #[test]
    fn guidance_loss_trivial_values() {
        let mut r = rng(1);
        let mut g = GuidanceNet::new(4, 8, 2, &mut r);
        let n = g.net.param_count();
        g.net.set_flat_params(&vec![0.0; n]).unwrap();
        let s = DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let x0 = Array2::from_shape_simple_fn((3, 4), || r.random_range(-1.0..1.0));
        let (loss, _) = guidance_loss(&g, x0.view(), &Array1::from_elem(3, 2.0), &s, &mut r).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
        g.net.layers_mut().last_mut().unwrap().bias[0] = 2.0;
        let (loss, _) = guidance_loss(&g, x0.view(), &Array1::from_elem(3, 2.0), &s, &mut r).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn guidance_loss_gradients() {
        for seed in 0..10 {
            let mut r = rng(20 + seed);
            let g = GuidanceNet::new(6, 10, 2, &mut r);
            let s = DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap();
            let x0 = Array2::from_shape_simple_fn((5, 6), || r.random_range(-1.0..1.0));
            let ret = Array1::from_shape_simple_fn(5, || r.random_range(0.0..3.0));
            let m: Vec<usize> = (0..5).map(|_| r.random_range(1..=10)).collect();
            let eps = standard_normal(5, 6, &mut r);
            let (_, grads) = guidance_loss_with(&g, x0.view(), &ret, &m, eps.view(), &s).unwrap();
            let mut probe = g.clone();
            let rep = grad_check(
                &g.net.flat_params(),
                &grads.flatten(),
                |p| {
                    probe.net.set_flat_params(p).unwrap();
                    guidance_loss_with(&probe, x0.view(), &ret, &m, eps.view(), &s).unwrap().0
                },
                1e-5,
            );
            assert!(rep.passes(1e-4), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn guide_gradient_matches_differences() {
        let mut r = rng(2);
        let g = GuidanceNet::new(3, 8, 2, &mut r);
        let x = Array2::from_shape_simple_fn((1, 3), || r.random_range(-1.0..1.0));
        let (_, dx) = g.value_and_grad(x.view(), &[4]).unwrap();
        for j in 0..3 {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[[0, j]] += 1e-6;
            lo[[0, j]] -= 1e-6;
            let fd = (g.predict(hi.view(), &[4]).unwrap()[0] - g.predict(lo.view(), &[4]).unwrap()[0]) / 2e-6;
            assert!((fd - dx[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn plan_pins_current_state_and_zero_omega_matches_unguided() {
        let ds = line_dataset(3);
        let mut r = rng(3);
        let mut c = DConductor::new(&ds, tiny_config(), &mut r).unwrap();
        c.train(&ds, 20, &mut r, &mut |_, l| assert!(l.denoise.is_finite())).unwrap();
        let s = [0.45, 0.8];
        let plan = c.plan(&s, None, &mut rng(4)).unwrap();
        let n = c.norm.states.normalize(&s);
        assert_eq!(plan.array[0], n[0]);
        assert_eq!(plan.array[1], n[1]);
        assert_eq!(plan.states.len(), 4);
        assert_eq!(c.plan_subgoals(&s, None, &mut rng(4)).unwrap().len(), 3);
        let a = c.plan_with_omega(&s, None, 0.0, &mut rng(5)).unwrap();
        let pin = c.inpaint(&s, None, 1);
        let cond = c.condition_rows(&s, None, 1);
        let b = diffusion::sample(&c.denoiser, 1, cond.view(), &c.schedule, None, Some(&pin), SamplerOptions::default(), &mut rng(5))
            .unwrap();
        assert_eq!(a.array, b.row(0).to_owned());
    }

    #[test]
    fn goal_inpainting_pins_last_column() {
        let ds = line_dataset(2);
        let cfg = DConductorConfig {
            inpaint_goal: true,
            ..tiny_config()
        };
        let c = DConductor::new(&ds, cfg, &mut rng(6)).unwrap();
        let plan = c.plan(&[0.1, 0.9], Some(&[1.5, 0.2]), &mut rng(7)).unwrap();
        let last = c.layout.state_indices(3).start;
        assert_eq!(plan.array[last], c.norm.states.normalize_value(0, 1.5));
        assert_eq!(plan.array[last + 1], c.norm.states.normalize_value(1, 0.2));
    }

    #[test]
    fn memorizes_single_trajectory() {
        // Exactly one window: 3 sub-goals 2 steps apart.
        let states: Vec<Vec<f64>> = (0..7).map(|t| vec![t as f64 * 0.1, 1.0 - t as f64 * 0.05]).collect();
        let tr = Trajectory::from_rows(&states, &vec![vec![0.0]; 7], &[0.5; 7], false).unwrap();
        let ds = Dataset::new(2, 1, vec![tr]).unwrap();
        let cfg = DConductorConfig {
            omega: 0.0,
            augmented: false,
            hidden: 64,
            lr: 2e-3,
            lr_floor: 0.05,
            ..tiny_config()
        };
        let mut r = rng(8);
        let mut c = DConductor::new(&ds, cfg, &mut r).unwrap();
        let windows = c.windows(&ds).unwrap();
        let mut first = None;
        let mut last = 0.0;
        c.train_on(&windows, 3000, &mut r, &mut |_, l| {
            first.get_or_insert(l.denoise);
            last = l.denoise;
        })
        .unwrap();
        assert!(last < first.unwrap());
        // Start from the trajectory's first state: columns must follow it.
        let tr = &ds.trajectories[0];
        let plan = c.plan(&tr.state(0), None, &mut r).unwrap();
        for col in 1..=3 {
            let want = c.norm.states.normalize(&tr.state(col * 2));
            let got = c.norm.states.normalize(&plan.states[col]);
            for (w, g) in want.iter().zip(&got) {
                assert!((w - g).abs() < 0.1, "col {col}: {want:?} vs {got:?}");
            }
        }
    }

    #[test]
    fn guidance_regresses_constant_return() {
        let trajs = (0..4)
            .map(|k| {
                let states: Vec<Vec<f64>> = (0..12).map(|t| vec![(t + k) as f64 * 0.1, 0.0]).collect();
                let actions = vec![vec![0.0]; 12];
                let mut rewards = vec![0.0; 12];
                rewards[0] = 3.0;
                Trajectory::from_rows(&states, &actions, &rewards, false).unwrap()
            })
            .collect();
        let ds = Dataset::new(2, 1, trajs).unwrap();
        // gamma = 0 and a single-step window: every return is the first reward.
        let cfg = DConductorConfig {
            gamma: 0.0,
            ..tiny_config()
        };
        let mut r = rng(9);
        let mut c = DConductor::new(&ds, cfg, &mut r).unwrap();
        let w = c.windows(&ds).unwrap();
        let mut w0 = w.clone();
        w0.returns.fill(3.0);
        c.train_on(&w0, 600, &mut r, &mut |_, _| {}).unwrap();
        let v = c.value(w0.arrays.view()).unwrap();
        let mean = v.mean().unwrap();
        assert!((mean - 3.0).abs() < 0.15, "{mean}");
    }

    #[test]
    fn guidance_raises_predicted_return() {
        // Return is linear in the first state coordinate of every column.
        let ds = line_dataset(6);
        let cfg = DConductorConfig {
            plan_samples: 100,
            ..tiny_config()
        };
        let mut r = rng(10);
        let mut c = DConductor::new(&ds, cfg, &mut r).unwrap();
        let mut w = c.windows(&ds).unwrap();
        let rows = c.layout.rows();
        for i in 0..w.len() {
            w.returns[i] = (0..c.layout.cols()).map(|col| w.arrays[[i, col * rows]]).sum();
        }
        c.train_on(&w, 800, &mut r, &mut |_, _| {}).unwrap();
        let mean_value = |omega: f64| {
            let pin = c.inpaint(&[0.5, 0.7], None, 100);
            let cond = c.condition_rows(&[0.5, 0.7], None, 100);
            let guidance = (omega != 0.0).then_some(Guidance { guide: &c.guidance, omega });
            let x = diffusion::sample(&c.denoiser, 100, cond.view(), &c.schedule, guidance, Some(&pin), SamplerOptions::default(), &mut rng(11))
                .unwrap();
            c.value(x.view()).unwrap().mean().unwrap()
        };
        let (lo, hi) = (mean_value(0.0), mean_value(5.0));
        assert!(hi > lo, "{lo} vs {hi}");
    }

    #[test]
    fn openmaze_guided_subgoals_approach_goal() {
        let env = PointMassEnv::open_maze();
        let col = scripted_collect(&env, ScriptedPolicy::RandomGoalAvoider { exclusion_radius: 2.0 }, 60, 12).unwrap();
        let ds = Dataset::new(4, 2, col.trajectories).unwrap();
        let cfg = DConductorConfig {
            interval: 4,
            horizon: 4,
            diffusion_steps: 10,
            hidden: 128,
            guide_hidden: 64,
            depth: 2,
            batch: 64,
            omega: 0.1,
            plan_samples: 16,
            ..DConductorConfig::default()
        };
        let mut r = rng(13);
        let mut c = DConductor::new(&ds, cfg, &mut r).unwrap();
        c.train(&ds, 1500, &mut r, &mut |_, _| {}).unwrap();
        let (mut d_s, mut d_g) = (0.0, 0.0);
        for i in 0..50 {
            let s = env.reset(&mut rng(1000 + i));
            let sub = c.plan_subgoals(&s, None, &mut r).unwrap();
            d_s += crate::env::distance(PointMassEnv::position(&s), env.goal);
            d_g += crate::env::distance(PointMassEnv::position(&sub[0]), env.goal);
        }
        assert!(d_g < d_s, "subgoal {d_g} vs state {d_s}");
    }

    #[test]
    fn dconductor_checkpoint_round_trip() {
        let ds = line_dataset(2);
        let mut r = rng(14);
        let mut c = DConductor::new(&ds, tiny_config(), &mut r).unwrap();
        c.train(&ds, 3, &mut r, &mut |_, _| {}).unwrap();
        let back = DConductor::from_checkpoint(&Checkpoint::from_bytes(&c.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.trained_steps, 3);
        assert!(QConductor::from_checkpoint(&c.to_checkpoint()).is_err());
    }

    #[test]
    fn kstep_returns_sum_k_rewards() {
        let states: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        let tr = Trajectory::from_rows(&states, &vec![vec![0.0]; 10], &[1.0; 10], false).unwrap();
        let ds = Dataset::new(1, 1, vec![tr]).unwrap();
        let norm = DatasetNormalizers::fit(&ds);
        let set = KStepSet::build(&ds, 4, &norm).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.returns.iter().all(|&r| r == 4.0));
        assert!(set.dones.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn qconductor_td_zero_when_critic_is_return() {
        let states: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        let tr = Trajectory::from_rows(&states, &vec![vec![0.0]; 10], &[1.0; 10], false).unwrap();
        let ds = Dataset::new(1, 1, vec![tr]).unwrap();
        let cfg = QConductorConfig {
            ac: ActorCriticConfig {
                gamma: 0.0,
                critics: 1,
                hidden: 8,
                depth: 2,
                ..ActorCriticConfig::default()
            },
            interval: 4,
            batch: 8,
        };
        let mut r = rng(15);
        let mut qc = QConductor::new(&ds, cfg, &mut r).unwrap();
        for c in &mut qc.engine.critics {
            let n = c.param_count();
            c.set_flat_params(&vec![0.0; n]).unwrap();
            c.layers_mut().last_mut().unwrap().bias[0] = 4.0;
        }
        let set = KStepSet::build(&ds, 4, &qc.norm).unwrap();
        let (loss, _) = qc.td_loss(&set.sample(8, &mut r), &mut r).unwrap();
        assert_eq!(loss, 0.0);
    }

    /// Two states that alternate every step; rewards 1 (leaving A) and 0.
    fn two_state_chain() -> Dataset {
        let states: Vec<Vec<f64>> = (0..41).map(|t| vec![if t % 2 == 0 { -0.5 } else { 0.5 }]).collect();
        let rewards: Vec<f64> = (0..41).map(|t| if t % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let actions = vec![vec![0.0]; 41];
        Dataset::new(1, 1, vec![Trajectory::from_rows(&states, &actions, &rewards, false).unwrap()]).unwrap()
    }

    #[test]
    fn qconductor_two_state_chain_fixed_point() {
        let ds = two_state_chain();
        let gamma = 0.8;
        let cfg = QConductorConfig {
            ac: ActorCriticConfig {
                gamma,
                critics: 1,
                alpha: 0.0,
                hidden: 32,
                depth: 2,
                eta: 0.1,
                critic_lr: 3e-3,
                actor_lr: 3e-3,
                lr_floor: 0.001,
                ..ActorCriticConfig::default()
            },
            interval: 1,
            batch: 32,
        };
        let mut r = rng(16);
        // Keep both states inside the normalized range rather than on its edge.
        let norm = DatasetNormalizers {
            states: crate::data::Normalizer::from_bounds(vec![-1.0], vec![1.0]),
            actions: crate::data::Normalizer::from_bounds(vec![-1.0], vec![1.0]),
        };
        let mut qc = QConductor::with_normalizers(norm, cfg, &mut r).unwrap();
        qc.train(&ds, 6000, &mut r, &mut |_, l| assert!(l.td.is_finite())).unwrap();
        // Value iteration on the deterministic chain A -> B -> A.
        let (mut qa, mut qb) = (0.0, 0.0);
        for _ in 0..10_000 {
            (qa, qb) = (1.0 + gamma * qb, gamma * qa);
        }
        let got_a = qc.q_value(&[-0.5], &[0.5]).unwrap();
        let got_b = qc.q_value(&[0.5], &[-0.5]).unwrap();
        assert!((got_a - qa).abs() < 1e-3, "{got_a} vs {qa}");
        assert!((got_b - qb).abs() < 1e-3, "{got_b} vs {qb}");
    }

    #[test]
    fn qconductor_proposals() {
        // s_{t+K} = s_t always: proposals stay on the current state.
        let trajs = (0..8)
            .map(|k| {
                let v = -0.8 + 0.2 * k as f64;
                Trajectory::from_rows(&vec![vec![v, -v]; 10], &vec![vec![0.0]; 10], &[0.0; 10], false).unwrap()
            })
            .collect();
        let ds = Dataset::new(2, 1, trajs).unwrap();
        let cfg = QConductorConfig {
            ac: ActorCriticConfig {
                alpha: 0.0,
                hidden: 64,
                depth: 2,
                lr_floor: 0.1,
                critics: 1,
                ..ActorCriticConfig::default()
            },
            interval: 2,
            batch: 64,
        };
        let mut r = rng(17);
        let mut qc = QConductor::new(&ds, cfg, &mut r).unwrap();
        qc.train(&ds, 2000, &mut r, &mut |_, _| {}).unwrap();
        let s = [0.2, -0.2];
        let p = qc.propose(&s, &mut rng(18)).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p, qc.propose(&s, &mut rng(18)).unwrap());
        let d: f64 = qc
            .norm
            .states
            .normalize(&p)
            .iter()
            .zip(qc.norm.states.normalize(&s))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d < 0.1, "{d}");
        let back = QConductor::from_checkpoint(&qc.to_checkpoint()).unwrap();
        assert_eq!(back, qc);
    }
}
