//! Config-driven pipeline: dataset generation, component training with loss
//! logs, evaluation fan-out over seeds, and the ablation sweeps. Shared by the
//! command-line tool and the experiment test suites.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{critic_value_grid, grid_spearman, guidance_value_grid, oracle_value_grid, GridEntry, ReportTable};
use crate::conductor::{DConductor, DConductorConfig, QConductor, QConductorConfig};
use crate::data::Dataset;
use crate::env::{scripted_collect, PointMassEnv, RewardMode, ScriptedPolicy};
use crate::orchestrator::{
    build_agent, compute_reference_scores, evaluate, Agent, ConductorKind, ConductorModel, EvalReport, FlatDiffuserAgent,
    FlatQAgent, HierarchicalAgent, PerformerKind, PerformerModel, ReferenceScores, Variant,
};
use crate::performer::{DPerformer, DPerformerConfig, QPerformer, QPerformerConfig, RewardScheme};
use crate::{Error, Result};

/// Seed of the reference-score rollouts, fixed so scores are comparable
/// across runs.
pub const REFERENCE_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    OpenMaze,
    UMaze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_mode: Option<RewardMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_len: Option<usize>,
}

impl EnvConfig {
    pub fn named(name: EnvName) -> Self {
        Self {
            name,
            reward_mode: None,
            episode_len: None,
        }
    }

    pub fn build(&self) -> Result<PointMassEnv> {
        let mut env = match self.name {
            EnvName::OpenMaze => PointMassEnv::open_maze(),
            EnvName::UMaze => PointMassEnv::u_maze(),
        };
        if let Some(m) = self.reward_mode {
            env.reward_mode = m;
        }
        if let Some(n) = self.episode_len {
            env.episode_len = n;
        }
        env.validate()?;
        Ok(env)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub behavior: ScriptedPolicy,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            behavior: ScriptedPolicy::RandomGoalAvoider { exclusion_radius: 2.0 },
            episodes: 100,
            seed: 0,
        }
    }
}

pub fn generate_dataset(env: &PointMassEnv, cfg: &DataConfig) -> Result<Dataset> {
    if cfg.episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let col = scripted_collect(env, cfg.behavior, cfg.episodes, cfg.seed)?;
    Ok(Dataset::new(PointMassEnv::STATE_DIM, PointMassEnv::ACTION_DIM, col.trajectories)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConductorTable {
    pub kind: ConductorKind,
    pub steps: usize,
    pub diffusion: DConductorConfig,
    pub q: QConductorConfig,
}

impl Default for ConductorTable {
    fn default() -> Self {
        Self {
            kind: ConductorKind::Diffusion,
            steps: 4000,
            diffusion: DConductorConfig::default(),
            q: QConductorConfig::default(),
        }
    }
}

impl ConductorTable {
    pub fn interval(&self) -> usize {
        match self.kind {
            ConductorKind::Diffusion => self.diffusion.interval,
            ConductorKind::Q => self.q.interval,
        }
    }

    pub fn set_interval(&mut self, k: usize) {
        self.diffusion.interval = k;
        self.q.interval = k;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerformerTable {
    pub kind: PerformerKind,
    pub steps: usize,
    pub q: QPerformerConfig,
    pub diffusion: DPerformerConfig,
}

impl Default for PerformerTable {
    fn default() -> Self {
        Self {
            kind: PerformerKind::Q,
            steps: 3000,
            q: QPerformerConfig::default(),
            diffusion: DPerformerConfig::default(),
        }
    }
}

impl PerformerTable {
    pub fn interval(&self) -> usize {
        match self.kind {
            PerformerKind::Q => self.q.interval,
            PerformerKind::Diffusion => self.diffusion.interval,
        }
    }

    pub fn set_interval(&mut self, k: usize) {
        self.q.interval = k;
        self.diffusion.interval = k;
    }
}

/// Per-step training losses, sampled every `every` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    pub columns: Vec<&'static str>,
    pub every: usize,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossLog {
    pub fn new(columns: Vec<&'static str>, every: usize) -> Self {
        Self {
            columns,
            every: every.max(1),
            rows: Vec::new(),
        }
    }

    fn record(&mut self, step: usize, values: Vec<f64>) {
        if step % self.every == 0 {
            self.rows.push((step, values));
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("step,{}\n", self.columns.join(","));
        for (step, v) in &self.rows {
            let cells: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!("{step},{}\n", cells.join(",")));
        }
        out
    }
}

/// Seed for a training leg. A resumed run reseeds from its step counter, so
/// it is deterministic but not bit-identical to an uninterrupted run.
fn training_rng(seed: u64, trained_steps: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trained_steps as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains a conductor up to `table.steps` total steps, continuing `resume`
/// when given.
pub fn train_conductor(
    table: &ConductorTable,
    ds: &Dataset,
    seed: u64,
    resume: Option<ConductorModel>,
    log_every: usize,
) -> Result<(ConductorModel, LossLog)> {
    let mut init = training_rng(seed, 0);
    let mut model = match resume {
        Some(m) if m.kind() != table.kind => {
            return Err(Error::Config(format!("resume checkpoint is a {:?} conductor, config asks for {:?}", m.kind(), table.kind)))
        }
        Some(m) => m,
        None => match table.kind {
            ConductorKind::Diffusion => ConductorModel::Diffusion(DConductor::new(ds, table.diffusion.clone(), &mut init)?),
            ConductorKind::Q => ConductorModel::Q(QConductor::new(ds, table.q.clone(), &mut init)?),
        },
    };
    let log = match &mut model {
        ConductorModel::Diffusion(c) => {
            let mut log = LossLog::new(vec!["denoise", "guidance"], log_every);
            let mut rng = training_rng(seed, c.trained_steps);
            let remaining = table.steps.saturating_sub(c.trained_steps);
            c.train(ds, remaining, &mut rng, &mut |i, l| log.record(i, vec![l.denoise, l.guidance]))?;
            log
        }
        ConductorModel::Q(c) => {
            let mut log = LossLog::new(vec!["td", "bc", "improve"], log_every);
            let mut rng = training_rng(seed, c.trained_steps);
            let remaining = table.steps.saturating_sub(c.trained_steps);
            c.train(ds, remaining, &mut rng, &mut |i, l| log.record(i, vec![l.td, l.bc, l.improve]))?;
            log
        }
    };
    Ok((model, log))
}

/// Trains a performer up to `table.steps` total steps, continuing `resume`
/// when given.
pub fn train_performer(
    table: &PerformerTable,
    ds: &Dataset,
    seed: u64,
    resume: Option<PerformerModel>,
    log_every: usize,
) -> Result<(PerformerModel, LossLog)> {
    let mut init = training_rng(seed, 0);
    let mut model = match resume {
        Some(m) if m.kind() != table.kind => {
            return Err(Error::Config(format!("resume checkpoint is a {:?} performer, config asks for {:?}", m.kind(), table.kind)))
        }
        Some(m) => m,
        None => match table.kind {
            PerformerKind::Q => PerformerModel::Q(QPerformer::new(ds, table.q.clone(), &mut init)?),
            PerformerKind::Diffusion => PerformerModel::Diffusion(DPerformer::new(ds, table.diffusion.clone(), &mut init)?),
        },
    };
    let log = match &mut model {
        PerformerModel::Q(p) => {
            let mut log = LossLog::new(vec!["td", "bc", "improve"], log_every);
            let mut rng = training_rng(seed, p.trained_steps);
            let remaining = table.steps.saturating_sub(p.trained_steps);
            p.train(ds, remaining, &mut rng, &mut |i, l| log.record(i, vec![l.td, l.bc, l.improve]))?;
            log
        }
        PerformerModel::Diffusion(p) => {
            let mut log = LossLog::new(vec!["denoise"], log_every);
            let mut rng = training_rng(seed, p.trained_steps);
            let remaining = table.steps.saturating_sub(p.trained_steps);
            p.train(ds, remaining, &mut rng, &mut |i, l| log.record(i, vec![l]))?;
            log
        }
    };
    Ok((model, log))
}

/// What gets evaluated: a hierarchical variant or one of the flat baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Policy {
    Hierarchical(Variant),
    /// Q-Performer alone, conditioned on the final target.
    FlatQ,
    /// Action-augmented planner executing its first planned action.
    FlatDiffuser,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Hierarchical(v) => write!(f, "{v}"),
            Policy::FlatQ => f.write_str("FlatQ"),
            Policy::FlatDiffuser => f.write_str("FlatDiffuser"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("flatq") || s.eq_ignore_ascii_case("flat-q") {
            return Ok(Policy::FlatQ);
        }
        if s.eq_ignore_ascii_case("flatdiffuser") || s.eq_ignore_ascii_case("flat-diffuser") {
            return Ok(Policy::FlatDiffuser);
        }
        Ok(Policy::Hierarchical(s.parse()?))
    }
}

impl TryFrom<String> for Policy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> String {
        p.to_string()
    }
}

/// Wires trained components into an agent. `omega` overrides the planner's
/// guidance scale; hierarchical agents replan every `replan_every` steps
/// (the sub-goal interval when `None`).
pub fn make_agent(
    policy: Policy,
    conductor: Option<&ConductorModel>,
    performer: Option<&PerformerModel>,
    env: &PointMassEnv,
    replan_every: Option<usize>,
    omega: Option<f64>,
) -> Result<Box<dyn Agent>> {
    let missing = |what: &str| Error::Config(format!("{policy} needs a {what}"));
    let with_omega = |c: &ConductorModel| {
        let mut c = c.clone();
        if let (ConductorModel::Diffusion(d), Some(w)) = (&mut c, omega) {
            d.config.omega = w;
        }
        c
    };
    match policy {
        Policy::FlatQ => match performer {
            Some(PerformerModel::Q(p)) => Ok(Box::new(FlatQAgent {
                performer: p.clone(),
                goal: env.goal.to_vec(),
            })),
            _ => Err(missing("Q-Performer")),
        },
        Policy::FlatDiffuser => match conductor.map(with_omega) {
            Some(ConductorModel::Diffusion(d)) => Ok(Box::new(FlatDiffuserAgent::new(d)?)),
            _ => Err(missing("diffusion planner")),
        },
        Policy::Hierarchical(v) => {
            let c = conductor.ok_or_else(|| missing("conductor"))?;
            let p = performer.ok_or_else(|| missing("performer"))?;
            let interval = match c {
                ConductorModel::Diffusion(d) => d.config.interval,
                ConductorModel::Q(q) => q.config.interval,
            };
            let goal_inpainting = matches!(c, ConductorModel::Diffusion(d) if d.config.inpaint_goal);
            let mut bundle = build_agent(v, with_omega(c), p.clone(), replan_every.unwrap_or(interval))?;
            if goal_inpainting {
                bundle.target = Some(env.goal.to_vec());
            }
            Ok(Box::new(HierarchicalAgent::new(bundle)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_return: f64,
    pub normalized_mean: f64,
    pub normalized_stderr: f64,
    pub success_rate: f64,
}

/// Cross-seed summary; the means are means of the per-seed means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub policy: String,
    pub episodes: usize,
    pub references: ReferenceScores,
    pub per_seed: Vec<SeedSummary>,
    pub normalized_mean: f64,
    pub success_rate: f64,
}

impl Aggregate {
    pub fn from_reports(policy: Policy, episodes: usize, references: ReferenceScores, reports: &[EvalReport]) -> Self {
        let per_seed: Vec<SeedSummary> = reports
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                mean_return: r.mean_return,
                normalized_mean: r.normalized_mean,
                normalized_stderr: r.normalized_stderr,
                success_rate: r.success_rate,
            })
            .collect();
        let n = per_seed.len().max(1) as f64;
        Self {
            policy: policy.to_string(),
            episodes,
            references,
            normalized_mean: per_seed.iter().map(|s| s.normalized_mean).sum::<f64>() / n,
            success_rate: per_seed.iter().map(|s| s.success_rate).sum::<f64>() / n,
            per_seed,
        }
    }
}

pub fn reference_scores(env: &PointMassEnv) -> Result<ReferenceScores> {
    Ok(compute_reference_scores(env, REFERENCE_SEED)?)
}

/// Runs `episodes` episodes per evaluation seed with a fresh agent each.
pub fn evaluate_seeds(
    make: &mut dyn FnMut() -> Result<Box<dyn Agent>>,
    env: &PointMassEnv,
    episodes: usize,
    seeds: &[u64],
    references: ReferenceScores,
) -> Result<Vec<EvalReport>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one evaluation seed is required".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let mut agent = make()?;
            Ok(evaluate(agent.as_mut(), env, episodes, seed, references)?)
        })
        .collect()
}

/// Inputs shared by the ablation sweeps.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub env: PointMassEnv,
    pub dataset: Dataset,
    pub conductor: ConductorTable,
    pub performer: PerformerTable,
    pub train_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub episodes: usize,
    pub replan_every: Option<usize>,
}

const ABLATION_HEADER: [&str; 5] = ["eval_seed", "normalized_mean", "normalized_stderr", "success_rate", "mean_return"];

fn ablation_rows(label: &str, reports: &[EvalReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                label.to_string(),
                r.seed.to_string(),
                r.normalized_mean.to_string(),
                r.normalized_stderr.to_string(),
                r.success_rate.to_string(),
                r.mean_return.to_string(),
            ]
        })
        .collect()
}

fn ablation_table(experiment: &str, variant: &str, seed: u64, label: &str, rows: Vec<Vec<String>>) -> ReportTable {
    let mut header = vec![label.to_string()];
    header.extend(ABLATION_HEADER.iter().map(|s| s.to_string()));
    ReportTable {
        experiment: experiment.into(),
        variant: variant.into(),
        seed,
        header,
        rows,
    }
}

impl AblationSetup {
    fn eval(&self, policy: Policy, c: Option<&ConductorModel>, p: Option<&PerformerModel>, refs: ReferenceScores) -> Result<Vec<EvalReport>> {
        evaluate_seeds(
            &mut || make_agent(policy, c, p, &self.env, self.replan_every, None),
            &self.env,
            self.episodes,
            &self.eval_seeds,
            refs,
        )
    }

    fn variant(&self) -> Variant {
        Variant::from_kinds(self.conductor.kind, self.performer.kind)
    }

    /// Retrains both levels for every sub-goal interval in `ks`.
    pub fn ablate_k(&self, ks: &[usize]) -> Result<ReportTable> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config("ablate-k needs positive intervals".into()));
        }
        let refs = reference_scores(&self.env)?;
        let mut rows = Vec::new();
        for &k in ks {
            let (mut ct, mut pt) = (self.conductor.clone(), self.performer.clone());
            ct.set_interval(k);
            pt.set_interval(k);
            let (c, _) = train_conductor(&ct, &self.dataset, self.train_seed, None, usize::MAX)?;
            let (p, _) = train_performer(&pt, &self.dataset, self.train_seed, None, usize::MAX)?;
            let reports = self.eval(Policy::Hierarchical(self.variant()), Some(&c), Some(&p), refs)?;
            rows.extend(ablation_rows(&format!("K{k}"), &reports));
        }
        Ok(ablation_table("ablate-k", self.variant().name(), self.train_seed, "interval", rows))
    }

    /// Retrains the Q-Performer under each low-level reward scheme.
    pub fn ablate_rewards(&self) -> Result<ReportTable> {
        if self.performer.kind != PerformerKind::Q {
            return Err(Error::Config("ablate-rewards needs a Q-Performer".into()));
        }
        let refs = reference_scores(&self.env)?;
        let (c, _) = train_conductor(&self.conductor, &self.dataset, self.train_seed, None, usize::MAX)?;
        let mut rows = Vec::new();
        for (label, scheme) in [("both", RewardScheme::Both), ("intr_only", RewardScheme::IntrOnly), ("ext_only", RewardScheme::ExtOnly)] {
            let mut pt = self.performer.clone();
            pt.q.reward = scheme;
            let (p, _) = train_performer(&pt, &self.dataset, self.train_seed, None, usize::MAX)?;
            let reports = self.eval(Policy::Hierarchical(self.variant()), Some(&c), Some(&p), refs)?;
            rows.extend(ablation_rows(label, &reports));
        }
        Ok(ablation_table("ablate-rewards", self.variant().name(), self.train_seed, "reward", rows))
    }

    /// Trains both conductor kinds and both performer kinds and evaluates
    /// every pairing.
    pub fn ablate_variants(&self) -> Result<ReportTable> {
        let refs = reference_scores(&self.env)?;
        let mut conductors = Vec::new();
        for kind in [ConductorKind::Diffusion, ConductorKind::Q] {
            let t = ConductorTable { kind, ..self.conductor.clone() };
            conductors.push(train_conductor(&t, &self.dataset, self.train_seed, None, usize::MAX)?.0);
        }
        let mut performers = Vec::new();
        for kind in [PerformerKind::Q, PerformerKind::Diffusion] {
            let t = PerformerTable { kind, ..self.performer.clone() };
            performers.push(train_performer(&t, &self.dataset, self.train_seed, None, usize::MAX)?.0);
        }
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let c = conductors.iter().find(|c| c.kind() == v.conductor_kind());
            let p = performers.iter().find(|p| p.kind() == v.performer_kind());
            let reports = self.eval(Policy::Hierarchical(v), c, p, refs)?;
            rows.extend(ablation_rows(v.name(), &reports));
        }
        Ok(ablation_table("ablate-variants", "all", self.train_seed, "variant", rows))
    }
}

/// Guidance, critic and oracle value grids plus their rank correlations
/// with the oracle.
pub fn value_map(
    env: &PointMassEnv,
    planner: &DConductor,
    performer: &QPerformer,
    resolution: usize,
    seed: u64,
) -> Result<(ReportTable, Vec<GridEntry>)> {
    let oracle = oracle_value_grid(env, resolution, performer.config.ac.gamma)?;
    let guidance = guidance_value_grid(planner, env, resolution)?;
    let critic = critic_value_grid(performer, env, resolution)?;
    let table = ReportTable {
        experiment: "valuemap".into(),
        variant: "spearman".into(),
        seed,
        header: vec!["source".into(), "spearman_vs_oracle".into()],
        rows: vec![
            vec!["diffuser_guidance".into(), grid_spearman(&guidance, &oracle)?.to_string()],
            vec!["q_critic".into(), grid_spearman(&critic, &oracle)?.to_string()],
        ],
    };
    let grids = [oracle, guidance, critic]
        .into_iter()
        .map(|grid| GridEntry {
            experiment: "valuemap".into(),
            variant: "grid".into(),
            seed,
            grid,
        })
        .collect();
    Ok((table, grids))
}
