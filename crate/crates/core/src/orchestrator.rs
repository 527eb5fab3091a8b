//! Wiring conductors and performers into agents, and evaluating agents.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::{ConductorError, DConductor, QConductor, DCONDUCTOR_KIND, QCONDUCTOR_KIND};
use crate::env::{EnvError, Episode, PointMassEnv, ScriptedController, ScriptedPolicy};
use crate::nn::Checkpoint;
use crate::performer::{DPerformer, PerformerError, QPerformer, DPERFORMER_KIND, QPERFORMER_KIND};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("variant {variant} needs a {expected} but got a {found}")]
    KindMismatch {
        variant: Variant,
        expected: &'static str,
        found: &'static str,
    },
    #[error("no `{0}` checkpoint supplied")]
    MissingCheckpoint(&'static str),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate reference scores: expert {expert} <= random {random}")]
    DegenerateReferences { random: f64, expert: f64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Conductor(#[from] ConductorError),
    #[error(transparent)]
    Performer(#[from] PerformerError),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

/// Hierarchical variants; the first letter names the conductor, the second
/// the performer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    PlanDQ,
    PlanDD,
    PlanQD,
    PlanQQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConductorKind {
    Diffusion,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformerKind {
    Q,
    Diffusion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::PlanDQ, Variant::PlanDD, Variant::PlanQD, Variant::PlanQQ];

    pub fn from_kinds(c: ConductorKind, p: PerformerKind) -> Self {
        match (c, p) {
            (ConductorKind::Diffusion, PerformerKind::Q) => Variant::PlanDQ,
            (ConductorKind::Diffusion, PerformerKind::Diffusion) => Variant::PlanDD,
            (ConductorKind::Q, PerformerKind::Diffusion) => Variant::PlanQD,
            (ConductorKind::Q, PerformerKind::Q) => Variant::PlanQQ,
        }
    }

    pub fn conductor_kind(self) -> ConductorKind {
        match self {
            Variant::PlanDQ | Variant::PlanDD => ConductorKind::Diffusion,
            Variant::PlanQD | Variant::PlanQQ => ConductorKind::Q,
        }
    }

    pub fn performer_kind(self) -> PerformerKind {
        match self {
            Variant::PlanDQ | Variant::PlanQQ => PerformerKind::Q,
            Variant::PlanDD | Variant::PlanQD => PerformerKind::Diffusion,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::PlanDQ => "PlanDQ",
            Variant::PlanDD => "PlanDD",
            Variant::PlanQD => "PlanQD",
            Variant::PlanQQ => "PlanQQ",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| OrchestratorError::UnknownVariant(s.to_string()))
    }
}

impl ConductorKind {
    pub fn checkpoint_kind(self) -> &'static str {
        match self {
            ConductorKind::Diffusion => DCONDUCTOR_KIND,
            ConductorKind::Q => QCONDUCTOR_KIND,
        }
    }
}

impl PerformerKind {
    pub fn checkpoint_kind(self) -> &'static str {
        match self {
            PerformerKind::Q => QPERFORMER_KIND,
            PerformerKind::Diffusion => DPERFORMER_KIND,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConductorModel {
    Diffusion(DConductor),
    Q(QConductor),
}

impl ConductorModel {
    pub fn kind(&self) -> ConductorKind {
        match self {
            ConductorModel::Diffusion(_) => ConductorKind::Diffusion,
            ConductorModel::Q(_) => ConductorKind::Q,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.kind.as_str() {
            DCONDUCTOR_KIND => Ok(Self::Diffusion(DConductor::from_checkpoint(ckpt)?)),
            QCONDUCTOR_KIND => Ok(Self::Q(QConductor::from_checkpoint(ckpt)?)),
            other => Err(OrchestratorError::InvalidArgument(format!("`{other}` is not a conductor checkpoint"))),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            ConductorModel::Diffusion(c) => c.to_checkpoint(),
            ConductorModel::Q(c) => c.to_checkpoint(),
        }
    }

    /// Raw next sub-goal state for raw state `s`.
    pub fn next_subgoal<R: Rng + ?Sized>(&self, s: &[f64], goal: Option<&[f64]>, rng: &mut R) -> Result<Vec<f64>> {
        Ok(match self {
            ConductorModel::Diffusion(c) => c.plan_subgoals(s, goal, rng)?.swap_remove(0),
            ConductorModel::Q(c) => c.propose(s, rng)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PerformerModel {
    Q(QPerformer),
    Diffusion(DPerformer),
}

impl PerformerModel {
    pub fn kind(&self) -> PerformerKind {
        match self {
            PerformerModel::Q(_) => PerformerKind::Q,
            PerformerModel::Diffusion(_) => PerformerKind::Diffusion,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.kind.as_str() {
            QPERFORMER_KIND => Ok(Self::Q(QPerformer::from_checkpoint(ckpt)?)),
            DPERFORMER_KIND => Ok(Self::Diffusion(DPerformer::from_checkpoint(ckpt)?)),
            other => Err(OrchestratorError::InvalidArgument(format!("`{other}` is not a performer checkpoint"))),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            PerformerModel::Q(p) => p.to_checkpoint(),
            PerformerModel::Diffusion(p) => p.to_checkpoint(),
        }
    }

    pub fn goal_dims(&self) -> &[usize] {
        match self {
            PerformerModel::Q(p) => &p.config.goal_dims,
            PerformerModel::Diffusion(p) => &p.config.goal_dims,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], goal: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(match self {
            PerformerModel::Q(p) => p.act(s, goal, rng)?,
            PerformerModel::Diffusion(p) => p.act(s, goal, rng)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub variant: Variant,
    pub conductor: ConductorModel,
    pub performer: PerformerModel,
    pub replan_every: usize,
    /// Final target handed to the conductor (used for goal inpainting).
    pub target: Option<Vec<f64>>,
}

/// Checks the variant's pairing table and wires the bundle.
pub fn build_agent(
    variant: Variant,
    conductor: ConductorModel,
    performer: PerformerModel,
    replan_every: usize,
) -> Result<AgentBundle> {
    if replan_every == 0 {
        return Err(OrchestratorError::InvalidArgument("replan_every must be at least 1".into()));
    }
    if conductor.kind() != variant.conductor_kind() {
        return Err(OrchestratorError::KindMismatch {
            variant,
            expected: variant.conductor_kind().checkpoint_kind(),
            found: conductor.kind().checkpoint_kind(),
        });
    }
    if performer.kind() != variant.performer_kind() {
        return Err(OrchestratorError::KindMismatch {
            variant,
            expected: variant.performer_kind().checkpoint_kind(),
            found: performer.kind().checkpoint_kind(),
        });
    }
    Ok(AgentBundle {
        variant,
        conductor,
        performer,
        replan_every,
        target: None,
    })
}

/// Picks the conductor and performer the variant needs out of `checkpoints`.
pub fn build_agent_from_checkpoints(variant: Variant, checkpoints: &[Checkpoint], replan_every: usize) -> Result<AgentBundle> {
    let find = |kind: &'static str| {
        checkpoints
            .iter()
            .find(|c| c.kind == kind)
            .ok_or(OrchestratorError::MissingCheckpoint(kind))
    };
    let c = ConductorModel::from_checkpoint(find(variant.conductor_kind().checkpoint_kind())?)?;
    let p = PerformerModel::from_checkpoint(find(variant.performer_kind().checkpoint_kind())?)?;
    build_agent(variant, c, p, replan_every)
}

/// A policy that can be rolled out in a [`PointMassEnv`].
pub trait Agent {
    /// Called at the start of every episode.
    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    /// Raw action for raw state `s` at episode step `t`.
    fn act(&mut self, s: &[f64], t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// Receding-horizon hierarchical agent: refreshes its sub-goal every
/// `replan_every` steps and conditions the performer on it.
pub struct HierarchicalAgent {
    pub bundle: AgentBundle,
    cached_goal: Option<Vec<f64>>,
    pub conductor_calls: usize,
}

impl HierarchicalAgent {
    pub fn new(bundle: AgentBundle) -> Self {
        Self {
            bundle,
            cached_goal: None,
            conductor_calls: 0,
        }
    }

    /// Goal components the performer is currently conditioned on.
    pub fn cached_goal(&self) -> Option<&[f64]> {
        self.cached_goal.as_deref()
    }
}

impl Agent for HierarchicalAgent {
    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<()> {
        self.cached_goal = None;
        self.conductor_calls = 0;
        Ok(())
    }

    fn act(&mut self, s: &[f64], t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if t % self.bundle.replan_every == 0 || self.cached_goal.is_none() {
            let sub = self.bundle.conductor.next_subgoal(s, self.bundle.target.as_deref(), rng)?;
            let goal = self.bundle.performer.goal_dims().iter().map(|&d| sub[d]).collect();
            self.cached_goal = Some(goal);
            self.conductor_calls += 1;
        }
        let goal = self.cached_goal.as_ref().expect("goal cached above");
        self.bundle.performer.act(s, goal, rng)
    }
}

/// Q-Performer without a conductor, always conditioned on a fixed goal.
pub struct FlatQAgent {
    pub performer: QPerformer,
    pub goal: Vec<f64>,
}

impl Agent for FlatQAgent {
    fn act(&mut self, s: &[f64], _t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.performer.act(s, &self.goal, rng)?)
    }
}

/// Value-guided trajectory diffuser that replans every step and executes the
/// first planned action. The conductor must be action-augmented.
pub struct FlatDiffuserAgent {
    pub planner: DConductor,
    pub omega: f64,
}

impl FlatDiffuserAgent {
    pub fn new(planner: DConductor) -> Result<Self> {
        if !planner.layout.augmented {
            return Err(OrchestratorError::InvalidArgument("flat diffuser needs action-augmented plans".into()));
        }
        let omega = planner.config.omega;
        Ok(Self { planner, omega })
    }
}

impl Agent for FlatDiffuserAgent {
    fn act(&mut self, s: &[f64], _t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let plan = self.planner.plan_with_omega(s, None, self.omega, rng)?;
        Ok(plan.first_action.expect("augmented layout"))
    }
}

/// Scripted controller wrapped as an agent.
pub struct ScriptedAgent {
    pub env: PointMassEnv,
    pub policy: ScriptedPolicy,
    controller: Option<ScriptedController>,
}

impl ScriptedAgent {
    pub fn new(env: PointMassEnv, policy: ScriptedPolicy) -> Self {
        Self {
            env,
            policy,
            controller: None,
        }
    }
}

impl Agent for ScriptedAgent {
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        self.controller = Some(ScriptedController::new(&self.env, self.policy, rng)?);
        Ok(())
    }

    fn act(&mut self, s: &[f64], _t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if self.controller.is_none() {
            self.reset(rng)?;
        }
        let c = self.controller.as_mut().expect("controller set");
        Ok(c.act(&self.env, s, rng)?.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub random: f64,
    pub expert: f64,
}

impl ReferenceScores {
    pub fn normalize(&self, score: f64) -> f64 {
        100.0 * (score - self.random) / (self.expert - self.random)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub references: ReferenceScores,
    pub mean_return: f64,
    pub normalized_mean: f64,
    pub normalized_stderr: f64,
    pub success_rate: f64,
    pub wall_clock_secs: f64,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

impl EvalReport {
    pub fn from_episodes(seed: u64, episodes: Vec<EpisodeRecord>, references: ReferenceScores, wall_clock_secs: f64) -> Self {
        let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
        let normalized: Vec<f64> = returns.iter().map(|&r| references.normalize(r)).collect();
        let (mean_return, _) = mean_and_stderr(&returns);
        let (normalized_mean, normalized_stderr) = mean_and_stderr(&normalized);
        let success_rate = episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64;
        Self {
            seed,
            episodes,
            references,
            mean_return,
            normalized_mean,
            normalized_stderr,
            success_rate,
            wall_clock_secs,
        }
    }

    /// One row per episode: `seed,return,success,steps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,return,success,steps\n");
        for e in &self.episodes {
            out.push_str(&format!("{},{},{},{}\n", e.seed, e.ret, u8::from(e.success), e.steps));
        }
        out
    }

    /// Summary without the per-episode rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "episodes": self.episodes.len(),
            "references": self.references,
            "mean_return": self.mean_return,
            "normalized_mean": self.normalized_mean,
            "normalized_stderr": self.normalized_stderr,
            "success_rate": self.success_rate,
            "wall_clock_secs": self.wall_clock_secs,
        })
    }
}

/// Per-episode seeds derived from one evaluation seed.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| rng.random()).collect()
}

/// Rolls out one episode; success means the goal radius was reached at
/// some step.
pub fn rollout(agent: &mut dyn Agent, env: &PointMassEnv, seed: u64) -> Result<(EpisodeRecord, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = env.reset(&mut rng);
    agent.reset(&mut rng)?;
    let mut ep = Episode::new(env, start);
    let mut trace = vec![ep.state().to_vec()];
    let mut ret = 0.0;
    let mut success = false;
    while !ep.is_done() {
        let a = agent.act(ep.state(), ep.t(), &mut rng)?;
        let r = ep.step(&a)?;
        ret += r.reward;
        success |= env.succeeded(&r.next_state);
        trace.push(r.next_state);
    }
    Ok((
        EpisodeRecord {
            seed,
            ret,
            success,
            steps: ep.t(),
        },
        trace,
    ))
}

pub fn evaluate(agent: &mut dyn Agent, env: &PointMassEnv, episodes: usize, seed: u64, references: ReferenceScores) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(OrchestratorError::InvalidArgument("episodes must be at least 1".into()));
    }
    let started = Instant::now();
    let mut records = Vec::with_capacity(episodes);
    for s in episode_seeds(seed, episodes) {
        records.push(rollout(agent, env, s)?.0);
    }
    Ok(EvalReport::from_episodes(seed, records, references, started.elapsed().as_secs_f64()))
}

pub const REFERENCE_EPISODES: usize = 100;

fn mean_return(env: &PointMassEnv, policy: ScriptedPolicy, seed: u64) -> Result<f64> {
    let mut agent = ScriptedAgent::new(env.clone(), policy);
    let mut total = 0.0;
    for s in episode_seeds(seed, REFERENCE_EPISODES) {
        total += rollout(&mut agent, env, s)?.0.ret;
    }
    Ok(total / REFERENCE_EPISODES as f64)
}

/// Mean returns of the uniform-random and waypoint-expert controllers.
pub fn compute_reference_scores(env: &PointMassEnv, seed: u64) -> Result<ReferenceScores> {
    env.validate()?;
    let random = mean_return(env, ScriptedPolicy::UniformRandom, seed)?;
    let expert = mean_return(env, ScriptedPolicy::WaypointExpert, seed)?;
    if expert <= random {
        return Err(OrchestratorError::DegenerateReferences { random, expert });
    }
    Ok(ReferenceScores { random, expert })
}
