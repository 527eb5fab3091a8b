//! Low-level actors.
//!
//! [`DiffusionActorCritic`] is a conditional diffusion policy trained with a
//! noise-prediction loss plus a Q-maximization term, next to one or more
//! critics fitted by one-step TD with Polyak targets. [`QPerformer`] wraps it
//! with goal conditioning; the Q-Conductor reuses it over states.
//! [`DPerformer`] is a short-horizon trajectory diffuser that inpaints both
//! endpoints and executes the first action.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, DatasetNormalizers, SubGoalLayout, TransitionBatch, TransitionSampler, WindowSet};
use crate::diffusion::{
    self, cosine_lr, standard_normal, Denoiser, DenoiserCache, DiffusionError, DiffusionSchedule, Inpaint,
    SamplerOptions, ScheduleKind,
};
use crate::nn::{Adam, Checkpoint, Gradients, MlpNet, NnError};

#[derive(Debug, thiserror::Error)]
pub enum PerformerError {
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
}

pub type Result<T> = std::result::Result<T, PerformerError>;

/// `exp(-|a - b|^2)`.
pub fn intrinsic_reward(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "intrinsic reward operands differ in length");
    (-a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp()
}

/// Which reward terms feed the low-level critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    #[default]
    Both,
    IntrOnly,
    ExtOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalReward {
    pub r_ext: f64,
    pub r_intr: f64,
}

impl GoalReward {
    pub fn new(r_ext: f64, next_goal_part: &[f64], goal: &[f64]) -> Self {
        Self {
            r_ext,
            r_intr: intrinsic_reward(next_goal_part, goal),
        }
    }

    pub fn total(&self, scheme: RewardScheme) -> f64 {
        match scheme {
            RewardScheme::Both => self.r_ext + self.r_intr,
            RewardScheme::IntrOnly => self.r_intr,
            RewardScheme::ExtOnly => self.r_ext,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorCriticConfig {
    pub hidden: usize,
    pub depth: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub critics: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Final learning rate as a fraction of the initial one; 1 keeps it flat.
    pub lr_floor: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for ActorCriticConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 3,
            diffusion_steps: 5,
            schedule: ScheduleKind::Cosine,
            critics: 2,
            alpha: 1.0,
            gamma: 0.99,
            eta: 0.005,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            lr_floor: 1.0,
            max_grad_norm: 0.0,
        }
    }
}

impl ActorCriticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PerformerError::Config(m.into()));
        if self.hidden == 0 || self.depth == 0 {
            return bad("hidden and depth must be positive");
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive");
        }
        if self.critics == 0 {
            return bad("at least one critic is required");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if self.alpha < 0.0 || !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("alpha must be non-negative and learning rates positive");
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return bad("lr_floor must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Normalized transitions for critic and policy updates. The policy is
/// conditioned on `cond`; critics see `[cond, action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBatch {
    pub cond: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub dones: Array1<f64>,
    pub next_cond: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub td: f64,
    pub bc: f64,
    pub improve: f64,
}

/// Recorded forward pass through the differentiable sampling chain.
struct ChainTape {
    steps: Vec<(usize, DenoiserCache, Array2<f64>)>,
    final_mask: Array2<f64>,
}

/// Runs the reverse chain from `x_m` with the given per-step noise, keeping
/// what backpropagation needs. Matches [`diffusion::sample`] exactly when
/// fed the same draws.
fn chain_forward(
    actor: &Denoiser,
    schedule: &DiffusionSchedule,
    cond: ArrayView2<f64>,
    x_top: &Array2<f64>,
    noise: &[Array2<f64>],
) -> Result<(Array2<f64>, ChainTape)> {
    let steps = schedule.steps();
    if noise.len() + 1 != steps {
        return Err(PerformerError::Config(format!("{} noise draws for {steps} steps", noise.len())));
    }
    let mut x = x_top.clone();
    let mut tape = Vec::with_capacity(steps);
    for m in (1..=steps).rev() {
        let ms = vec![m; x.nrows()];
        let (eps, cache) = actor.forward_cached(x.view(), &ms, cond)?;
        let ab = schedule.alpha_bar(m);
        let raw = (&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt();
        let mask = raw.mapv(|v| if (-1.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
        let x0 = raw.mapv(|v| v.clamp(-1.0, 1.0));
        let (c0, cm) = schedule.posterior_coefficients(m);
        let mut next = x0 * c0 + &x * cm;
        if m > 1 {
            next.scaled_add(schedule.posterior_variance(m).sqrt(), &noise[steps - m]);
        }
        tape.push((m, cache, mask));
        x = next;
    }
    let final_mask = x.mapv(|v| if (-1.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok((
        x,
        ChainTape {
            steps: tape,
            final_mask,
        },
    ))
}

fn chain_backward(actor: &Denoiser, schedule: &DiffusionSchedule, tape: &ChainTape, grad_out: &Array2<f64>) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(&actor.net);
    let mut g = grad_out * &tape.final_mask;
    for (m, cache, mask) in tape.steps.iter().rev() {
        let ab = schedule.alpha_bar(*m);
        let (c0, cm) = schedule.posterior_coefficients(*m);
        let g_x0 = &g * mask * c0;
        let g_eps = &g_x0 * (-(1.0 - ab).sqrt() / ab.sqrt());
        let (pg, dx) = actor.backward(cache, g_eps.view())?;
        grads.add_assign(&pg);
        g = &g * cm + &g_x0 / ab.sqrt() + dx;
    }
    Ok(grads)
}

/// Draws the starting sample and per-step noise in the same order as
/// [`diffusion::sample`].
pub fn chain_noise<R: Rng + ?Sized>(rows: usize, cols: usize, steps: usize, rng: &mut R) -> (Array2<f64>, Vec<Array2<f64>>) {
    let top = standard_normal(rows, cols, rng);
    let noise = (1..steps).map(|_| standard_normal(rows, cols, rng)).collect();
    (top, noise)
}

/// `-alpha_hat * mean(Q(a0))` for actions sampled through the chain, where
/// `alpha_hat = alpha / mean|Q|` is held constant. `critic` returns Q and
/// dQ/da per row. Returns the loss and policy parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn chain_improve_loss<F>(
    actor: &Denoiser,
    schedule: &DiffusionSchedule,
    cond: ArrayView2<f64>,
    x_top: &Array2<f64>,
    noise: &[Array2<f64>],
    alpha: f64,
    critic: F,
) -> Result<(f64, Gradients)>
where
    F: Fn(&Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)>,
{
    if alpha == 0.0 {
        return Ok((0.0, Gradients::zeros_like(&actor.net)));
    }
    let (a0, tape) = chain_forward(actor, schedule, cond, x_top, noise)?;
    let (q, dq) = critic(&a0)?;
    let n = q.len() as f64;
    let scale = q.mapv(f64::abs).mean().unwrap_or(0.0).max(1e-8);
    let alpha_hat = alpha / scale;
    let loss = -alpha_hat * q.sum() / n;
    let grad_a = dq * (-alpha_hat / n);
    let grads = chain_backward(actor, schedule, &tape, &grad_a)?;
    Ok((loss, grads))
}

/// Minimum over `nets` of Q at `[cond, a]` and its action gradient.
pub fn min_q_and_grad(nets: &[MlpNet], cond: ArrayView2<f64>, a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let input = concatenate![Axis(1), cond, a.view()];
    let outs = nets
        .iter()
        .map(|n| n.forward(input.view()).map(|o| o.column(0).to_owned()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rows = a.nrows();
    let mut pick = vec![0usize; rows];
    let mut qmin = outs[0].clone();
    for (i, o) in outs.iter().enumerate().skip(1) {
        for r in 0..rows {
            if o[r] < qmin[r] {
                qmin[r] = o[r];
                pick[r] = i;
            }
        }
    }
    let mut grad = Array2::zeros(a.raw_dim());
    let c = cond.ncols();
    for (i, net) in nets.iter().enumerate() {
        let sel = Array2::from_shape_fn((rows, 1), |(r, _)| if pick[r] == i { 1.0 } else { 0.0 });
        if sel.sum() == 0.0 {
            continue;
        }
        let (_, dx) = net.input_gradient(input.view(), sel.view())?;
        grad += &dx.slice(s![.., c..]);
    }
    Ok((qmin, grad))
}

fn min_q(nets: &[MlpNet], input: ArrayView2<f64>) -> Result<Array1<f64>> {
    let mut out: Option<Array1<f64>> = None;
    for n in nets {
        let q = n.forward(input)?.column(0).to_owned();
        out = Some(match out {
            None => q,
            Some(prev) => ndarray::Zip::from(&prev).and(&q).map_collect(|a, b| a.min(*b)),
        });
    }
    Ok(out.expect("at least one critic"))
}

/// Adam states for one [`DiffusionActorCritic`].
pub struct ActorCriticOptim {
    pub actor: Adam,
    pub critics: Vec<Adam>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionActorCritic {
    pub actor: Denoiser,
    pub critics: Vec<MlpNet>,
    pub targets: Vec<MlpNet>,
    pub schedule: DiffusionSchedule,
    pub config: ActorCriticConfig,
    cond_dim: usize,
    action_dim: usize,
}

impl DiffusionActorCritic {
    pub fn new<R: Rng + ?Sized>(cond_dim: usize, action_dim: usize, config: ActorCriticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let actor = Denoiser::new(action_dim, cond_dim, config.hidden, config.depth, rng);
        let mut widths = vec![cond_dim + action_dim];
        widths.extend(std::iter::repeat_n(config.hidden, config.depth));
        widths.push(1);
        let critics: Vec<MlpNet> = (0..config.critics).map(|_| MlpNet::new(&widths, rng)).collect();
        Ok(Self {
            actor,
            targets: critics.clone(),
            critics,
            schedule: DiffusionSchedule::new(config.diffusion_steps, config.schedule)?,
            config,
            cond_dim,
            action_dim,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn optimizers(&self) -> ActorCriticOptim {
        ActorCriticOptim {
            actor: Adam::new(&self.actor.net, self.config.actor_lr),
            critics: self.critics.iter().map(|c| Adam::new(c, self.config.critic_lr)).collect(),
        }
    }

    /// Normalized actions in `[-1, 1]`, one per row of `cond`.
    pub fn sample_actions<R: Rng + ?Sized>(&self, cond: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        Ok(diffusion::sample(
            &self.actor,
            cond.nrows(),
            cond,
            &self.schedule,
            None,
            None,
            SamplerOptions::default(),
            rng,
        )?)
    }

    pub fn q_values(&self, cond: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let input = concatenate![Axis(1), cond, actions];
        min_q(&self.critics, input.view())
    }

    pub fn bc_loss_with(&self, cond: ArrayView2<f64>, actions: ArrayView2<f64>, m: &[usize], eps: ArrayView2<f64>) -> Result<(f64, Gradients)> {
        Ok(diffusion::denoise_loss_with(&self.actor, actions, cond, &self.schedule, m, eps)?)
    }

    pub fn bc_loss<R: Rng + ?Sized>(&self, cond: ArrayView2<f64>, actions: ArrayView2<f64>, rng: &mut R) -> Result<(f64, Gradients)> {
        Ok(diffusion::denoise_loss(&self.actor, actions, cond, &self.schedule, rng)?)
    }

    /// `r + gamma (1 - done) min_i Q'_i(next_cond, next_actions)`.
    pub fn td_target(&self, batch: &CriticBatch, next_actions: &Array2<f64>) -> Result<Array1<f64>> {
        let input = concatenate![Axis(1), batch.next_cond.view(), next_actions.view()];
        let q_next = min_q(&self.targets, input.view())?;
        Ok(&batch.rewards + &((1.0 - &batch.dones) * &q_next * self.config.gamma))
    }

    /// Mean over critics of the mean squared TD error, with one gradient per
    /// critic. The target carries no gradient.
    pub fn td_loss_with(&self, batch: &CriticBatch, next_actions: &Array2<f64>) -> Result<(f64, Vec<Gradients>)> {
        let y = self.td_target(batch, next_actions)?;
        let input = concatenate![Axis(1), batch.cond.view(), batch.actions.view()];
        let n = y.len() as f64;
        let k = self.critics.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.critics.len());
        for critic in &self.critics {
            let (q, cache) = critic.forward_cached(input.view())?;
            let diff = &q.column(0) - &y;
            loss += diff.iter().map(|d| d * d).sum::<f64>() / n / k;
            let dq = diff.mapv(|d| 2.0 * d / n / k).insert_axis(Axis(1));
            grads.push(critic.backward(&cache, dq.view())?.0);
        }
        Ok((loss, grads))
    }

    /// TD loss with `a'` sampled from the current policy at `next_cond`.
    pub fn td_loss<R: Rng + ?Sized>(&self, batch: &CriticBatch, rng: &mut R) -> Result<(f64, Vec<Gradients>)> {
        let next = self.sample_actions(batch.next_cond.view(), rng)?;
        self.td_loss_with(batch, &next)
    }

    pub fn policy_improve_loss_with(&self, cond: ArrayView2<f64>, x_top: &Array2<f64>, noise: &[Array2<f64>]) -> Result<(f64, Gradients)> {
        chain_improve_loss(&self.actor, &self.schedule, cond, x_top, noise, self.config.alpha, |a| {
            min_q_and_grad(&self.critics, cond, a)
        })
    }

    /// Actions from the reverse chain driven by explicit draws, as produced by
    /// [`chain_noise`].
    pub fn chain_actions(&self, cond: ArrayView2<f64>, x_top: &Array2<f64>, noise: &[Array2<f64>]) -> Result<Array2<f64>> {
        Ok(chain_forward(&self.actor, &self.schedule, cond, x_top, noise)?.0)
    }

    pub fn policy_improve_loss<R: Rng + ?Sized>(&self, cond: ArrayView2<f64>, rng: &mut R) -> Result<(f64, Gradients)> {
        let (top, noise) = chain_noise(cond.nrows(), self.action_dim, self.schedule.steps(), rng);
        self.policy_improve_loss_with(cond, &top, &noise)
    }

    /// One training step: critics by TD, policy by BC plus improvement, then
    /// Polyak-averaged targets. `lr_scale` multiplies both learning rates.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &CriticBatch,
        optim: &mut ActorCriticOptim,
        lr_scale: f64,
        step: usize,
        rng: &mut R,
    ) -> Result<StepLosses> {
        let div = |what| PerformerError::Divergence { step, what };
        let (td, mut critic_grads) = self.td_loss(batch, rng)?;
        if !td.is_finite() {
            return Err(div("td loss"));
        }
        for ((critic, adam), g) in self.critics.iter_mut().zip(&mut optim.critics).zip(&mut critic_grads) {
            if self.config.max_grad_norm > 0.0 {
                g.clip_norm(self.config.max_grad_norm);
            }
            adam.lr = self.config.critic_lr * lr_scale;
            adam.step(critic, g).map_err(|_| div("critic gradient"))?;
        }
        let (bc, mut g) = self.bc_loss(batch.cond.view(), batch.actions.view(), rng)?;
        let (improve, gi) = self.policy_improve_loss(batch.cond.view(), rng)?;
        if !(bc.is_finite() && improve.is_finite()) {
            return Err(div("policy loss"));
        }
        g.add_assign(&gi);
        if self.config.max_grad_norm > 0.0 {
            g.clip_norm(self.config.max_grad_norm);
        }
        optim.actor.lr = self.config.actor_lr * lr_scale;
        optim.actor.step(&mut self.actor.net, &g).map_err(|_| div("policy gradient"))?;
        for (t, c) in self.targets.iter_mut().zip(&self.critics) {
            t.polyak_update(c, self.config.eta);
        }
        Ok(StepLosses { td, bc, improve })
    }

    pub fn lr_scale(&self, step: usize, total: usize) -> f64 {
        cosine_lr(1.0, self.config.lr_floor, step, total)
    }

    pub fn write_nets(&self, mut ckpt: Checkpoint) -> Checkpoint {
        ckpt = ckpt.with_net("actor", &self.actor.net);
        for (i, (c, t)) in self.critics.iter().zip(&self.targets).enumerate() {
            ckpt = ckpt.with_net(format!("critic{i}"), c).with_net(format!("target{i}"), t);
        }
        ckpt
    }

    pub fn read_nets(ckpt: &Checkpoint, cond_dim: usize, action_dim: usize, config: ActorCriticConfig) -> Result<Self> {
        config.validate()?;
        let actor = Denoiser::from_net(ckpt.net("actor")?.clone(), action_dim, cond_dim)?;
        let mut critics = Vec::new();
        let mut targets = Vec::new();
        for i in 0..config.critics {
            critics.push(ckpt.net(&format!("critic{i}"))?.clone());
            targets.push(ckpt.net(&format!("target{i}"))?.clone());
        }
        Ok(Self {
            actor,
            critics,
            targets,
            schedule: DiffusionSchedule::new(config.diffusion_steps, config.schedule)?,
            config,
            cond_dim,
            action_dim,
        })
    }
}

fn select_columns(x: ArrayView2<f64>, cols: &[usize]) -> Array2<f64> {
    x.select(Axis(1), cols)
}

fn normalize_columns(norm: &crate::data::Normalizer, x: &Array2<f64>, dims: &[usize]) -> Array2<f64> {
    let mut out = x.clone();
    for (j, &d) in dims.iter().enumerate() {
        out.column_mut(j).mapv_inplace(|v| norm.normalize_value(d, v));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QPerformerConfig {
    pub ac: ActorCriticConfig,
    pub reward: RewardScheme,
    /// Hindsight sub-goal interval and geometric parameter.
    pub interval: usize,
    pub goal_p: f64,
    pub batch: usize,
    /// State components that make up a goal.
    pub goal_dims: Vec<usize>,
    /// Policy samples drawn per `act`; the one with the highest min-critic
    /// value is executed. 1 returns the plain policy sample.
    pub act_candidates: usize,
}

impl Default for QPerformerConfig {
    fn default() -> Self {
        Self {
            ac: ActorCriticConfig::default(),
            reward: RewardScheme::Both,
            interval: 4,
            goal_p: 0.2,
            batch: 128,
            goal_dims: vec![0, 1],
            act_candidates: 16,
        }
    }
}

/// Goal-conditioned diffusion policy with double critics.
///
/// Conditioning is `[s, g]` with `g` the goal components of the sub-goal
/// state, both normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct QPerformer {
    pub engine: DiffusionActorCritic,
    pub norm: DatasetNormalizers,
    pub config: QPerformerConfig,
    pub trained_steps: usize,
}

pub const QPERFORMER_KIND: &str = "performer_q";
pub const DPERFORMER_KIND: &str = "performer_diffusion";

impl QPerformer {
    pub fn new<R: Rng + ?Sized>(dataset: &Dataset, config: QPerformerConfig, rng: &mut R) -> Result<Self> {
        let norm = DatasetNormalizers::fit(dataset);
        Self::with_normalizers(norm, config, rng)
    }

    pub fn with_normalizers<R: Rng + ?Sized>(norm: DatasetNormalizers, config: QPerformerConfig, rng: &mut R) -> Result<Self> {
        let ds = norm.states.dim();
        if config.goal_dims.iter().any(|&d| d >= ds) {
            return Err(PerformerError::Config("goal dimension outside the state".into()));
        }
        if config.interval == 0 || !(config.goal_p > 0.0 && config.goal_p <= 1.0) || config.batch == 0 || config.act_candidates == 0 {
            return Err(PerformerError::Config("interval, goal_p, batch and act_candidates must be positive".into()));
        }
        let engine = DiffusionActorCritic::new(ds + config.goal_dims.len(), norm.actions.dim(), config.ac, rng)?;
        Ok(Self {
            engine,
            norm,
            config,
            trained_steps: 0,
        })
    }

    pub fn goal_of(&self, state: &[f64]) -> Vec<f64> {
        self.config.goal_dims.iter().map(|&d| state[d]).collect()
    }

    /// Normalized `[s, g]` rows from raw states and raw goal components.
    pub fn condition(&self, states: &Array2<f64>, goals: &Array2<f64>) -> Array2<f64> {
        let s = self.norm.states.normalize_rows(states);
        let all: Vec<usize> = self.config.goal_dims.clone();
        let g = normalize_columns(&self.norm.states, goals, &all);
        concatenate![Axis(1), s, g]
    }

    /// Turns raw hindsight transitions into normalized critic inputs, with
    /// the reward scheme applied.
    pub fn critic_batch(&self, batch: &TransitionBatch) -> CriticBatch {
        let goal_dims = &self.config.goal_dims;
        let goals = select_columns(batch.goals.view(), goal_dims);
        let next_parts = select_columns(batch.next_states.view(), goal_dims);
        let rewards = Array1::from_shape_fn(batch.len(), |i| {
            let g = goals.row(i).to_vec();
            let n = next_parts.row(i).to_vec();
            GoalReward::new(batch.rewards[i], &n, &g).total(self.config.reward)
        });
        CriticBatch {
            cond: self.condition(&batch.states, &goals),
            actions: self.norm.actions.normalize_rows(&batch.actions),
            rewards,
            dones: batch.dones.clone(),
            next_cond: self.condition(&batch.next_states, &goals),
        }
    }

    pub fn bc_loss<R: Rng + ?Sized>(&self, batch: &CriticBatch, rng: &mut R) -> Result<(f64, Gradients)> {
        self.engine.bc_loss(batch.cond.view(), batch.actions.view(), rng)
    }

    pub fn td_loss<R: Rng + ?Sized>(&self, batch: &CriticBatch, rng: &mut R) -> Result<(f64, Vec<Gradients>)> {
        self.engine.td_loss(batch, rng)
    }

    pub fn policy_improve_loss<R: Rng + ?Sized>(&self, batch: &CriticBatch, rng: &mut R) -> Result<(f64, Gradients)> {
        self.engine.policy_improve_loss(batch.cond.view(), rng)
    }

    /// Runs `steps` updates on hindsight batches; `on_step` sees each step's
    /// global index and losses.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        dataset: &Dataset,
        steps: usize,
        rng: &mut R,
        on_step: &mut dyn FnMut(usize, StepLosses),
    ) -> Result<()> {
        let sampler = TransitionSampler::new(dataset)?;
        let mut optim = self.engine.optimizers();
        for i in 0..steps {
            let raw = sampler.sample(dataset, self.config.batch, self.config.interval, self.config.goal_p, rng);
            let batch = self.critic_batch(&raw);
            let scale = self.engine.lr_scale(i, steps);
            let step = self.trained_steps;
            let losses = self.engine.update(&batch, &mut optim, scale, step, rng)?;
            self.trained_steps += 1;
            on_step(step, losses);
        }
        Ok(())
    }

    /// One raw policy sample for raw state `s` and raw goal components `goal`.
    pub fn policy_sample<R: Rng + ?Sized>(&self, s: &[f64], goal: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let cond = self.condition_one(s, goal, 1)?;
        let a = self.engine.sample_actions(cond.view(), rng)?;
        Ok(self.norm.actions.denormalize(&a.row(0).to_vec()))
    }

    /// Executed action: the best of `act_candidates` policy samples under
    /// the min critic.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], goal: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let n = self.config.act_candidates;
        if n <= 1 {
            return self.policy_sample(s, goal, rng);
        }
        let cond = self.condition_one(s, goal, n)?;
        let a = self.engine.sample_actions(cond.view(), rng)?;
        let q = self.engine.q_values(cond.view(), a.view())?;
        let best = (0..n).fold(0, |b, i| if q[i] > q[b] { i } else { b });
        Ok(self.norm.actions.denormalize(&a.row(best).to_vec()))
    }

    fn condition_one(&self, s: &[f64], goal: &[f64], rows: usize) -> Result<Array2<f64>> {
        let bad = |e: ndarray::ShapeError| PerformerError::Config(e.to_string());
        let states = Array2::from_shape_vec((1, s.len()), s.to_vec()).map_err(bad)?;
        let goals = Array2::from_shape_vec((1, goal.len()), goal.to_vec()).map_err(bad)?;
        let one = self.condition(&states, &goals);
        Ok(one.broadcast((rows, one.ncols())).expect("single row broadcasts").to_owned())
    }

    /// Min-critic value at raw inputs.
    pub fn q_value(&self, s: &[f64], a: &[f64], goal: &[f64]) -> Result<f64> {
        let states = Array2::from_shape_vec((1, s.len()), s.to_vec()).map_err(|e| PerformerError::Config(e.to_string()))?;
        let goals =
            Array2::from_shape_vec((1, goal.len()), goal.to_vec()).map_err(|e| PerformerError::Config(e.to_string()))?;
        let cond = self.condition(&states, &goals);
        let an = Array2::from_shape_vec((1, a.len()), self.norm.actions.normalize(a)).expect("one row");
        Ok(self.engine.q_values(cond.view(), an.view())?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "normalizers": self.norm,
            "trained_steps": self.trained_steps,
        });
        self.engine.write_nets(Checkpoint::new(QPERFORMER_KIND, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, QPERFORMER_KIND)?;
        let config: QPerformerConfig = meta_field(ckpt, "config")?;
        let norm: DatasetNormalizers = meta_field(ckpt, "normalizers")?;
        let trained_steps: usize = meta_field(ckpt, "trained_steps")?;
        let engine = DiffusionActorCritic::read_nets(ckpt, norm.states.dim() + config.goal_dims.len(), norm.actions.dim(), config.ac)?;
        Ok(Self {
            engine,
            norm,
            config,
            trained_steps,
        })
    }
}

fn dperformer_cond_dim(config: &DPerformerConfig, layout: &SubGoalLayout) -> usize {
    if config.condition {
        layout.state_dim + config.goal_dims.len()
    } else {
        0
    }
}

pub(crate) fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(PerformerError::Checkpoint(format!("expected `{kind}`, found `{}`", ckpt.kind)));
    }
    Ok(())
}

pub(crate) fn meta_field<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt
        .meta
        .get(key)
        .ok_or_else(|| PerformerError::Checkpoint(format!("metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| PerformerError::Checkpoint(format!("`{key}`: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DPerformerConfig {
    /// Segment length in env steps; the segment has `interval + 1` columns.
    pub interval: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub hidden: usize,
    pub depth: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch: usize,
    pub goal_dims: Vec<usize>,
    /// Also feed the normalized start state and goal to the denoiser as
    /// conditioning, on top of inpainting them.
    pub condition: bool,
}

impl Default for DPerformerConfig {
    fn default() -> Self {
        Self {
            interval: 4,
            diffusion_steps: 20,
            schedule: ScheduleKind::Cosine,
            hidden: 128,
            depth: 3,
            lr: 1e-3,
            lr_floor: 1.0,
            batch: 64,
            goal_dims: vec![0, 1],
            condition: true,
        }
    }
}

/// Short-horizon trajectory diffuser: first state pinned to `s`, goal
/// components of the last state pinned to `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct DPerformer {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub layout: SubGoalLayout,
    pub norm: DatasetNormalizers,
    pub config: DPerformerConfig,
    pub trained_steps: usize,
}

impl DPerformer {
    pub fn new<R: Rng + ?Sized>(dataset: &Dataset, config: DPerformerConfig, rng: &mut R) -> Result<Self> {
        Self::with_normalizers(DatasetNormalizers::fit(dataset), config, rng)
    }

    pub fn with_normalizers<R: Rng + ?Sized>(norm: DatasetNormalizers, config: DPerformerConfig, rng: &mut R) -> Result<Self> {
        if config.interval == 0 || config.batch == 0 || config.hidden == 0 || config.depth == 0 {
            return Err(PerformerError::Config("interval, batch, hidden and depth must be positive".into()));
        }
        if config.goal_dims.iter().any(|&d| d >= norm.states.dim()) {
            return Err(PerformerError::Config("goal dimension outside the state".into()));
        }
        let layout = SubGoalLayout {
            state_dim: norm.states.dim(),
            action_dim: norm.actions.dim(),
            interval: 1,
            horizon: config.interval,
            augmented: true,
        };
        Ok(Self {
            denoiser: Denoiser::new(layout.flat_len(), dperformer_cond_dim(&config, &layout), config.hidden, config.depth, rng),
            schedule: DiffusionSchedule::new(config.diffusion_steps, config.schedule)?,
            layout,
            norm,
            config,
            trained_steps: 0,
        })
    }

    /// Indices of the pinned cells: the first state, then the goal
    /// components of the last state.
    fn pinned_indices(&self) -> Vec<usize> {
        let last = self.layout.state_indices(self.layout.horizon).start;
        self.layout
            .state_indices(0)
            .chain(self.config.goal_dims.iter().map(|&d| last + d))
            .collect()
    }

    fn pinned_values(&self, s: &[f64], goal: &[f64]) -> Vec<f64> {
        let mut vals = self.norm.states.normalize(s);
        for (j, &d) in self.config.goal_dims.iter().enumerate() {
            vals.push(self.norm.states.normalize_value(d, goal[j]));
        }
        vals
    }

    pub fn train<R: Rng + ?Sized>(&mut self, dataset: &Dataset, steps: usize, rng: &mut R, on_step: &mut dyn FnMut(usize, f64)) -> Result<()> {
        let windows = WindowSet::build(dataset, self.layout, &self.norm, 1.0)?;
        let mut adam = Adam::new(&self.denoiser.net, self.config.lr);
        let pinned = if self.config.condition { self.pinned_indices() } else { Vec::new() };
        for i in 0..steps {
            let (x0, _) = windows.sample(self.config.batch, rng);
            let cond = x0.select(Axis(1), &pinned);
            let step = self.trained_steps;
            let (loss, g) = diffusion::denoise_loss(&self.denoiser, x0.view(), cond.view(), &self.schedule, rng)
                .map_err(|_| PerformerError::Divergence { step, what: "denoise loss" })?;
            adam.lr = cosine_lr(self.config.lr, self.config.lr_floor, i, steps);
            adam.step(&mut self.denoiser.net, &g)
                .map_err(|_| PerformerError::Divergence { step, what: "denoise gradient" })?;
            self.trained_steps += 1;
            on_step(step, loss);
        }
        Ok(())
    }

    fn inpaint(&self, s: &[f64], goal: &[f64]) -> Inpaint {
        Inpaint::broadcast(self.pinned_indices(), &self.pinned_values(s, goal), 1)
    }

    /// Denoiser conditioning for one segment.
    pub fn condition(&self, s: &[f64], goal: &[f64]) -> Array2<f64> {
        let vals = if self.config.condition { self.pinned_values(s, goal) } else { Vec::new() };
        Array2::from_shape_vec((1, vals.len()), vals).expect("one row")
    }

    /// A normalized segment, flattened column by column.
    pub fn segment<R: Rng + ?Sized>(&self, s: &[f64], goal: &[f64], rng: &mut R) -> Result<Array1<f64>> {
        let pin = self.inpaint(s, goal);
        let cond = self.condition(s, goal);
        let x = diffusion::sample(
            &self.denoiser,
            1,
            cond.view(),
            &self.schedule,
            None,
            Some(&pin),
            SamplerOptions::default(),
            rng,
        )?;
        Ok(x.row(0).to_owned())
    }

    /// Raw first action of a sampled segment.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], goal: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let seg = self.segment(s, goal, rng)?;
        let ds = self.layout.state_dim;
        let a: Vec<f64> = seg.slice(s![ds..ds + self.layout.action_dim]).to_vec();
        Ok(self.norm.actions.denormalize(&a))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "normalizers": self.norm,
            "trained_steps": self.trained_steps,
        });
        Checkpoint::new(DPERFORMER_KIND, meta).with_net("denoiser", &self.denoiser.net)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, DPERFORMER_KIND)?;
        let config: DPerformerConfig = meta_field(ckpt, "config")?;
        let norm: DatasetNormalizers = meta_field(ckpt, "normalizers")?;
        let trained_steps: usize = meta_field(ckpt, "trained_steps")?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = Self::with_normalizers(norm, config, &mut rng)?;
        let cond = dperformer_cond_dim(&out.config, &out.layout);
        out.denoiser = Denoiser::from_net(ckpt.net("denoiser")?.clone(), out.layout.flat_len(), cond)?;
        out.trained_steps = trained_steps;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_config() -> ActorCriticConfig {
        ActorCriticConfig {
            hidden: 10,
            depth: 2,
            diffusion_steps: 4,
            ..ActorCriticConfig::default()
        }
    }

    fn random_batch<R: Rng>(rows: usize, cond: usize, act: usize, r: &mut R) -> CriticBatch {
        CriticBatch {
            cond: Array2::from_shape_simple_fn((rows, cond), || r.random_range(-1.0..1.0)),
            actions: Array2::from_shape_simple_fn((rows, act), || r.random_range(-1.0..1.0)),
            rewards: Array1::from_shape_simple_fn(rows, || r.random_range(0.0..2.0)),
            dones: Array1::from_shape_simple_fn(rows, || if r.random_bool(0.2) { 1.0 } else { 0.0 }),
            next_cond: Array2::from_shape_simple_fn((rows, cond), || r.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn intrinsic_reward_values() {
        assert_eq!(intrinsic_reward(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert!((intrinsic_reward(&[0.0, 0.0], &[1.0, 0.0]) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(intrinsic_reward(&[0.3, -0.2], &[1.1, 0.4]), intrinsic_reward(&[1.1, 0.4], &[0.3, -0.2]));
        let g = GoalReward::new(0.25, &[0.0], &[0.0]);
        assert_eq!(g.total(RewardScheme::Both), 1.25);
        assert_eq!(g.total(RewardScheme::ExtOnly), 0.25);
        assert_eq!(g.total(RewardScheme::IntrOnly), 1.0);
    }

    #[test]
    fn chain_matches_sampler() {
        let ac = DiffusionActorCritic::new(3, 2, small_config(), &mut rng(1)).unwrap();
        let cond = Array2::from_shape_simple_fn((6, 3), {
            let mut r = rng(2);
            move || r.random_range(-1.0..1.0)
        });
        let sampled = ac.sample_actions(cond.view(), &mut rng(3)).unwrap();
        let (top, noise) = chain_noise(6, 2, 4, &mut rng(3));
        let (chained, _) = chain_forward(&ac.actor, &ac.schedule, cond.view(), &top, &noise).unwrap();
        assert_eq!(sampled, chained);
    }

    #[test]
    fn bc_loss_gradients() {
        for seed in 0..10 {
            let mut r = rng(10 + seed);
            let ac = DiffusionActorCritic::new(3, 2, small_config(), &mut r).unwrap();
            let b = random_batch(5, 3, 2, &mut r);
            let m: Vec<usize> = (0..5).map(|_| r.random_range(1..=4)).collect();
            let eps = standard_normal(5, 2, &mut r);
            let (_, g) = ac.bc_loss_with(b.cond.view(), b.actions.view(), &m, eps.view()).unwrap();
            let mut probe = ac.clone();
            let rep = grad_check(
                &ac.actor.net.flat_params(),
                &g.flatten(),
                |p| {
                    probe.actor.net.set_flat_params(p).unwrap();
                    probe.bc_loss_with(b.cond.view(), b.actions.view(), &m, eps.view()).unwrap().0
                },
                1e-5,
            );
            assert!(rep.passes(1e-4), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn td_loss_gradients() {
        for seed in 0..10 {
            let mut r = rng(30 + seed);
            let mut ac = DiffusionActorCritic::new(3, 2, small_config(), &mut r).unwrap();
            // Distinct targets so the min is exercised.
            ac.targets[1] = MlpNet::new(&[5, 10, 10, 1], &mut r);
            let b = random_batch(6, 3, 2, &mut r);
            let next = Array2::from_shape_simple_fn((6, 2), || r.random_range(-1.0..1.0));
            let (_, grads) = ac.td_loss_with(&b, &next).unwrap();
            for (i, g) in grads.iter().enumerate() {
                let mut probe = ac.clone();
                let rep = grad_check(
                    &ac.critics[i].flat_params(),
                    &g.flatten(),
                    |p| {
                        probe.critics[i].set_flat_params(p).unwrap();
                        probe.td_loss_with(&b, &next).unwrap().0
                    },
                    1e-5,
                );
                assert!(rep.passes(1e-4), "seed {seed} critic {i}: {rep:?}");
            }
        }
    }

    #[test]
    fn policy_improve_gradients() {
        for seed in 0..10 {
            let mut r = rng(50 + seed);
            let ac = DiffusionActorCritic::new(3, 2, small_config(), &mut r).unwrap();
            let cond = Array2::from_shape_simple_fn((5, 3), || r.random_range(-1.0..1.0));
            let (top, noise) = chain_noise(5, 2, 4, &mut r);
            let (_, g) = ac.policy_improve_loss_with(cond.view(), &top, &noise).unwrap();
            // alpha_hat is a constant of the loss; freeze it at the base point.
            let (a0, _) = chain_forward(&ac.actor, &ac.schedule, cond.view(), &top, &noise).unwrap();
            let (q0, _) = min_q_and_grad(&ac.critics, cond.view(), &a0).unwrap();
            let alpha_hat = ac.config.alpha / q0.mapv(f64::abs).mean().unwrap();
            let mut probe = ac.clone();
            let rep = grad_check(
                &ac.actor.net.flat_params(),
                &g.flatten(),
                |p| {
                    probe.actor.net.set_flat_params(p).unwrap();
                    let (a, _) = chain_forward(&probe.actor, &probe.schedule, cond.view(), &top, &noise).unwrap();
                    let (q, _) = min_q_and_grad(&probe.critics, cond.view(), &a).unwrap();
                    -alpha_hat * q.mean().unwrap()
                },
                1e-5,
            );
            assert!(rep.passes(1e-4), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn zero_alpha_is_pure_cloning() {
        let cfg = ActorCriticConfig {
            alpha: 0.0,
            ..small_config()
        };
        let ac = DiffusionActorCritic::new(3, 2, cfg, &mut rng(4)).unwrap();
        let cond = Array2::zeros((4, 3));
        let (loss, g) = ac.policy_improve_loss(cond.view(), &mut rng(5)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_critic_gives_no_improvement_gradient() {
        let mut ac = DiffusionActorCritic::new(3, 2, small_config(), &mut rng(6)).unwrap();
        for c in &mut ac.critics {
            let n = c.param_count();
            c.set_flat_params(&vec![0.0; n]).unwrap();
            c.layers_mut().last_mut().unwrap().bias[0] = 3.0;
        }
        let cond = Array2::zeros((4, 3));
        let (loss, g) = ac.policy_improve_loss(cond.view(), &mut rng(7)).unwrap();
        assert!((loss + 1.0).abs() < 1e-12);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn td_target_edge_cases() {
        let mut ac = DiffusionActorCritic::new(2, 1, ActorCriticConfig { gamma: 0.0, ..small_config() }, &mut rng(8)).unwrap();
        let mut b = random_batch(5, 2, 1, &mut rng(9));
        for c in ac.critics.iter_mut().chain(ac.targets.iter_mut()) {
            let n = c.param_count();
            c.set_flat_params(&vec![0.0; n]).unwrap();
        }
        // Critics equal to the reward: zero loss when gamma = 0.
        b.rewards.fill(0.75);
        for c in &mut ac.critics {
            c.layers_mut().last_mut().unwrap().bias[0] = 0.75;
        }
        let next = Array2::zeros((5, 1));
        assert_eq!(ac.td_loss_with(&b, &next).unwrap().0, 0.0);
        // Terminal rows bootstrap nothing even with gamma > 0.
        ac.config.gamma = 0.9;
        for t in &mut ac.targets {
            t.layers_mut().last_mut().unwrap().bias[0] = 100.0;
        }
        b.dones.fill(1.0);
        assert_eq!(ac.td_target(&b, &next).unwrap(), b.rewards);
    }

    #[test]
    fn swapping_critics_is_symmetric() {
        let mut r = rng(11);
        let ac = DiffusionActorCritic::new(3, 2, small_config(), &mut r).unwrap();
        let mut swapped = ac.clone();
        swapped.critics.swap(0, 1);
        swapped.targets.swap(0, 1);
        let b = random_batch(8, 3, 2, &mut r);
        let next = Array2::from_shape_simple_fn((8, 2), || r.random_range(-1.0..1.0));
        let (l1, _) = ac.td_loss_with(&b, &next).unwrap();
        let (l2, _) = swapped.td_loss_with(&b, &next).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let (top, noise) = chain_noise(8, 2, 4, &mut r);
        let (p1, _) = ac.policy_improve_loss_with(b.cond.view(), &top, &noise).unwrap();
        let (p2, _) = swapped.policy_improve_loss_with(b.cond.view(), &top, &noise).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn targets_follow_polyak_rule() {
        let mut r = rng(12);
        let mut ac = DiffusionActorCritic::new(3, 2, small_config(), &mut r).unwrap();
        let mut optim = ac.optimizers();
        let b = random_batch(8, 3, 2, &mut r);
        for step in 0..3 {
            let prev: Vec<Vec<f64>> = ac.targets.iter().map(|t| t.flat_params()).collect();
            ac.update(&b, &mut optim, 1.0, step, &mut r).unwrap();
            let eta = ac.config.eta;
            for (i, t) in ac.targets.iter().enumerate() {
                let online = ac.critics[i].flat_params();
                for ((tv, pv), ov) in t.flat_params().iter().zip(&prev[i]).zip(&online) {
                    assert!((tv - ((1.0 - eta) * pv + eta * ov)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn improvement_step_does_not_lower_q() {
        for seed in 0..5 {
            let mut r = rng(70 + seed);
            let ac = DiffusionActorCritic::new(3, 2, small_config(), &mut r).unwrap();
            let cond = Array2::from_shape_simple_fn((16, 3), || r.random_range(-1.0..1.0));
            let (top, noise) = chain_noise(16, 2, 4, &mut r);
            let mean_q = |a: &DiffusionActorCritic| {
                let (x, _) = chain_forward(&a.actor, &a.schedule, cond.view(), &top, &noise).unwrap();
                min_q_and_grad(&a.critics, cond.view(), &x).unwrap().0.mean().unwrap()
            };
            let (_, g) = ac.policy_improve_loss_with(cond.view(), &top, &noise).unwrap();
            let mut stepped = ac.clone();
            let p: Vec<f64> = ac.actor.net.flat_params().iter().zip(g.flatten()).map(|(p, g)| p - 1e-6 * g).collect();
            stepped.actor.net.set_flat_params(&p).unwrap();
            assert!(mean_q(&stepped) >= mean_q(&ac) - 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn bandit_policy_moves_to_argmax() {
        // Q(a) = -(a - 0.7)^2 over a behaviour spread uniformly on [-1, 1].
        let cfg = ActorCriticConfig {
            hidden: 32,
            depth: 2,
            alpha: 5.0,
            ..ActorCriticConfig::default()
        };
        let mut r = rng(13);
        let mut ac = DiffusionActorCritic::new(1, 1, cfg, &mut r).unwrap();
        let mut adam = Adam::new(&ac.actor.net, 3e-3);
        let cond = Array2::zeros((128, 1));
        let critic = |a: &Array2<f64>| -> Result<(Array1<f64>, Array2<f64>)> {
            Ok((a.column(0).mapv(|v| -(v - 0.7).powi(2)), a.mapv(|v| -2.0 * (v - 0.7))))
        };
        for _ in 0..1500 {
            let acts = Array2::from_shape_simple_fn((128, 1), || r.random_range(-1.0..1.0));
            let (_, mut g) = ac.bc_loss(cond.view(), acts.view(), &mut r).unwrap();
            let (top, noise) = chain_noise(128, 1, ac.schedule.steps(), &mut r);
            let (_, gi) = chain_improve_loss(&ac.actor, &ac.schedule, cond.view(), &top, &noise, 5.0, critic).unwrap();
            g.add_assign(&gi);
            adam.step(&mut ac.actor.net, &g).unwrap();
        }
        let probe = Array2::zeros((2000, 1));
        let mean = ac.sample_actions(probe.view(), &mut r).unwrap().mean().unwrap();
        assert!((mean - 0.7).abs() < 0.05, "{mean}");
    }

    fn constant_action_dataset() -> Dataset {
        let mut trajs = Vec::new();
        let mut r = rng(14);
        for _ in 0..10 {
            let states: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
            let actions: Vec<Vec<f64>> = (0..20).map(|_| vec![0.3]).collect();
            let rewards = vec![0.0; 20];
            trajs.push(Trajectory::from_rows(&states, &actions, &rewards, false).unwrap());
        }
        // One wider action so the normalizer has a nondegenerate range.
        let states = vec![vec![0.0, 0.0]; 2];
        trajs.push(Trajectory::from_rows(&states, &[vec![-1.0], vec![1.0]], &[0.0, 0.0], false).unwrap());
        Dataset::new(2, 1, trajs).unwrap()
    }

    #[test]
    fn cloning_constant_action() {
        let ds = constant_action_dataset();
        let cfg = QPerformerConfig {
            ac: ActorCriticConfig {
                alpha: 0.0,
                hidden: 32,
                ..ActorCriticConfig::default()
            },
            goal_dims: vec![0, 1],
            batch: 64,
            ..QPerformerConfig::default()
        };
        let mut r = rng(15);
        let mut p = QPerformer::new(&ds, cfg, &mut r).unwrap();
        p.train(&ds, 800, &mut r, &mut |_, l| assert!(l.td.is_finite() && l.bc.is_finite())).unwrap();
        let mut total = 0.0;
        for i in 0..200 {
            let a = p.policy_sample(&[0.1, -0.2], &[0.5, 0.5], &mut rng(100 + i)).unwrap();
            assert!((-1.0..=1.0).contains(&a[0]));
            total += a[0];
        }
        assert!((total / 200.0 - 0.3).abs() < 0.05, "{}", total / 200.0);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let ds = constant_action_dataset();
        let cfg = QPerformerConfig {
            ac: small_config(),
            batch: 16,
            ..QPerformerConfig::default()
        };
        let run = || {
            let mut r = rng(16);
            let mut p = QPerformer::new(&ds, cfg.clone(), &mut r).unwrap();
            p.train(&ds, 20, &mut r, &mut |_, _| {}).unwrap();
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.trained_steps, 20);
        let back = QPerformer::from_checkpoint(&Checkpoint::from_bytes(&a.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.norm, a.norm);
        assert_eq!(back.config, a.config);
        assert_eq!(back.engine.actor, a.engine.actor);
        assert_eq!(back.engine.critics, a.engine.critics);
        assert_eq!(back, a);
        assert!(DPerformer::from_checkpoint(&a.to_checkpoint()).is_err());
    }

    #[test]
    fn dperformer_pins_endpoints() {
        let ds = constant_action_dataset();
        let cfg = DPerformerConfig {
            interval: 3,
            diffusion_steps: 5,
            hidden: 16,
            batch: 8,
            goal_dims: vec![0, 1],
            ..DPerformerConfig::default()
        };
        let mut r = rng(17);
        let mut dp = DPerformer::new(&ds, cfg, &mut r).unwrap();
        dp.train(&ds, 5, &mut r, &mut |_, l| assert!(l.is_finite())).unwrap();
        let s = [0.2, -0.4];
        let g = [0.6, 0.1];
        let seg = dp.segment(&s, &g, &mut r).unwrap();
        let n = dp.norm.states.normalize(&s);
        let last = dp.layout.state_indices(3).start;
        assert_eq!(seg[0], n[0]);
        assert_eq!(seg[1], n[1]);
        assert_eq!(seg[last], dp.norm.states.normalize_value(0, 0.6));
        assert_eq!(seg[last + 1], dp.norm.states.normalize_value(1, 0.1));
        let a = dp.act(&s, &g, &mut r).unwrap();
        assert!(a[0] >= -1.0 - 1e-12 && a[0] <= 1.0 + 1e-12);
        let back = DPerformer::from_checkpoint(&dp.to_checkpoint()).unwrap();
        assert_eq!(back, dp);
    }
}
