//! `hiplan`: dataset generation, training, evaluation and analysis.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 missing
//! artifact, 1 anything else (I/O failures).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hiplan::analysis::{emit_report, example1_table, Manifest};
use hiplan::data::Dataset;
use hiplan::env::{ScriptedPolicy, ToyMdp};
use hiplan::experiment::{
    evaluate_seeds, generate_dataset, make_agent, reference_scores, train_conductor, train_performer, value_map, AblationSetup,
    Aggregate, LossLog, Policy,
};
use hiplan::nn::Checkpoint;
use hiplan::orchestrator::{ConductorKind, ConductorModel, PerformerKind, PerformerModel};
use serde::Serialize;

use config::{RunConfig, DATASET_FILE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<hiplan::Error> for CliError {
    fn from(e: hiplan::Error) -> Self {
        if e.is_divergence() {
            CliError::Divergence(e.to_string())
        } else if e.is_missing_artifact() {
            CliError::Missing(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn core<E: Into<hiplan::Error>>(e: E) -> CliError {
    CliError::from(e.into())
}

#[derive(Parser)]
#[command(name = "hiplan", version, about = "Hierarchical diffusion planning on point-mass mazes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted behavior policy and write a dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the conductor, the performer, or both.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Component::Both)]
        component: Component,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a variant or flat baseline over one or more seeds.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory holding conductor.ckpt / performer.ckpt (default: --out).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Closed-form example, value maps and ablation sweeps.
    Analyze {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Component {
    Conductor,
    Performer,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Example1,
    Valuemap,
    AblateRewards,
    AblateK,
    AblateVariants,
}

const CONDUCTOR_CKPT: &str = "conductor.ckpt";
const PERFORMER_CKPT: &str = "performer.ckpt";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hiplan: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, episodes, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = episodes {
                cfg.data.episodes = n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let out = prepare(&mut cfg, out, "gen-data")?;
            gen_data(&cfg, &out)
        }
        Command::Train {
            config,
            out,
            component,
            dataset,
            resume,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            if let Some(s) = seed {
                cfg.train_seed = s;
            }
            let out = prepare(&mut cfg, out, "train")?;
            train(&cfg, &out, component, resume)
        }
        Command::Eval {
            config,
            out,
            variant,
            episodes,
            seeds,
            checkpoints,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(v) = variant {
                cfg.orchestrator.variant = v.parse().map_err(|e: hiplan::Error| CliError::Config(e.to_string()))?;
            }
            if let Some(n) = episodes {
                cfg.orchestrator.episodes = n;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let out = prepare(&mut cfg, out, "eval")?;
            let ckpt_dir = checkpoints.unwrap_or_else(|| out.clone());
            eval(&cfg, &out, &ckpt_dir)
        }
        Command::Analyze {
            mode,
            config,
            out,
            checkpoints,
            dataset,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None if mode == Mode::Example1 => RunConfig::empty(),
                None => return Err(CliError::Config("--config is required for this mode".into())),
            };
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            let out = prepare(&mut cfg, out, "analyze")?;
            let ckpt_dir = checkpoints.unwrap_or_else(|| out.clone());
            analyze(&cfg, &out, &ckpt_dir, mode)
        }
    }
}

/// Resolves the output directory, validates, creates the directory and
/// echoes the resolved config into it.
fn prepare(cfg: &mut RunConfig, out: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    if out.is_some() {
        cfg.out = out;
    }
    let out = cfg.out.clone().ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
    cfg.validate()?;
    create_dir(&out)?;
    write(&out.join(format!("resolved_{command}.toml")), cfg.to_toml())?;
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct DatasetSidecar<'a> {
    env: &'a hiplan::experiment::EnvConfig,
    behavior: ScriptedPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    exclusion_radius: Option<f64>,
    episodes: usize,
    seed: u64,
    transitions: usize,
    successes: usize,
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let env = cfg.env.build().map_err(CliError::from)?;
    let ds = generate_dataset(&env, &cfg.data).map_err(CliError::from)?;
    let path = out.join(DATASET_FILE);
    ds.save(&path).map_err(core)?;
    let exclusion_radius = match cfg.data.behavior {
        ScriptedPolicy::RandomGoalAvoider { exclusion_radius } => Some(exclusion_radius),
        _ => None,
    };
    let sidecar = DatasetSidecar {
        env: &cfg.env,
        behavior: cfg.data.behavior,
        exclusion_radius,
        episodes: cfg.data.episodes,
        seed: cfg.data.seed,
        transitions: ds.transition_count(),
        successes: ds.trajectories.iter().filter(|t| t.terminal()).count(),
    };
    write(&out.join("dataset.json"), to_json(&sidecar))?;
    println!("wrote {} ({} transitions)", path.display(), sidecar.transitions);
    Ok(())
}

fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let path = cfg.dataset_path(out);
    if !path.exists() {
        return Err(CliError::Missing(format!("dataset {}", path.display())));
    }
    Dataset::load(&path).map_err(core)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Missing(format!("checkpoint {}", path.display())));
    }
    Checkpoint::load(path).map_err(core)
}

/// Writes the loss log, appending when a resumed run already has one.
fn write_losses(path: &Path, log: &LossLog, append: bool) -> Result<()> {
    let csv = log.to_csv();
    let body = match (append, fs::read_to_string(path)) {
        (true, Ok(mut old)) => {
            old.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
            old
        }
        _ => csv,
    };
    write(path, body)
}

/// Runs one training leg; a divergence leaves a marker file next to where
/// the checkpoint would have gone.
fn leg<T>(out: &Path, name: &str, f: impl FnOnce() -> hiplan::Result<T>) -> Result<T> {
    let marker = out.join(format!("{name}.diverged"));
    match f() {
        Ok(v) => {
            if marker.exists() {
                fs::remove_file(&marker).map_err(|source| CliError::Io { path: marker, source })?;
            }
            Ok(v)
        }
        Err(e) => {
            let err = CliError::from(e);
            if let CliError::Divergence(msg) = &err {
                write(&marker, format!("{msg}\n"))?;
            }
            Err(err)
        }
    }
}

fn train(cfg: &RunConfig, out: &Path, component: Component, resume: bool) -> Result<()> {
    let ds = load_dataset(cfg, out)?;
    if matches!(component, Component::Conductor | Component::Both) {
        let path = out.join(CONDUCTOR_CKPT);
        let prev = if resume { Some(ConductorModel::from_checkpoint(&load_checkpoint(&path)?).map_err(core)?) } else { None };
        let (model, log) = leg(out, "conductor", || train_conductor(&cfg.conductor, &ds, cfg.train_seed, prev, cfg.log_every))?;
        model.to_checkpoint().save(&path).map_err(core)?;
        write_losses(&out.join("conductor_loss.csv"), &log, resume)?;
        println!("wrote {}", path.display());
    }
    if matches!(component, Component::Performer | Component::Both) {
        let path = out.join(PERFORMER_CKPT);
        let prev = if resume { Some(PerformerModel::from_checkpoint(&load_checkpoint(&path)?).map_err(core)?) } else { None };
        let (model, log) = leg(out, "performer", || train_performer(&cfg.performer, &ds, cfg.train_seed, prev, cfg.log_every))?;
        model.to_checkpoint().save(&path).map_err(core)?;
        write_losses(&out.join("performer_loss.csv"), &log, resume)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Loads the components `policy` needs, checking their kinds.
fn load_components(policy: Policy, dir: &Path) -> Result<(Option<ConductorModel>, Option<PerformerModel>)> {
    let (ck, pk) = match policy {
        Policy::Hierarchical(v) => (Some(v.conductor_kind()), Some(v.performer_kind())),
        Policy::FlatQ => (None, Some(PerformerKind::Q)),
        Policy::FlatDiffuser => (Some(ConductorKind::Diffusion), None),
    };
    let conductor = match ck {
        Some(kind) => {
            let m = ConductorModel::from_checkpoint(&load_checkpoint(&dir.join(CONDUCTOR_CKPT))?).map_err(core)?;
            if m.kind() != kind {
                return Err(CliError::Missing(format!("{policy} needs a {kind:?} conductor, found {:?}", m.kind())));
            }
            Some(m)
        }
        None => None,
    };
    let performer = match pk {
        Some(kind) => {
            let m = PerformerModel::from_checkpoint(&load_checkpoint(&dir.join(PERFORMER_CKPT))?).map_err(core)?;
            if m.kind() != kind {
                return Err(CliError::Missing(format!("{policy} needs a {kind:?} performer, found {:?}", m.kind())));
            }
            Some(m)
        }
        None => None,
    };
    Ok((conductor, performer))
}

fn eval(cfg: &RunConfig, out: &Path, ckpt_dir: &Path) -> Result<()> {
    let env = cfg.env.build().map_err(CliError::from)?;
    let policy = cfg.orchestrator.variant;
    let (c, p) = load_components(policy, ckpt_dir)?;
    let refs = reference_scores(&env).map_err(CliError::from)?;
    let o = &cfg.orchestrator;
    let reports = evaluate_seeds(
        &mut || make_agent(policy, c.as_ref(), p.as_ref(), &env, o.replan_every, o.omega),
        &env,
        o.episodes,
        &cfg.seeds,
        refs,
    )
    .map_err(CliError::from)?;
    for r in &reports {
        write(&out.join(format!("eval_{policy}_{}.csv", r.seed)), r.to_csv())?;
    }
    let agg = Aggregate::from_reports(policy, o.episodes, refs, &reports);
    write(&out.join(format!("eval_{policy}_aggregate.json")), to_json(&agg))?;
    println!(
        "{policy}: normalized {:.1} success {:.2} over seeds {:?}",
        agg.normalized_mean, agg.success_rate, cfg.seeds
    );
    Ok(())
}

fn analyze(cfg: &RunConfig, out: &Path, ckpt_dir: &Path, mode: Mode) -> Result<()> {
    let manifest: Manifest = match mode {
        Mode::Example1 => emit_report(&[example1_table(&ToyMdp::default()).map_err(core)?], &[], out).map_err(core)?,
        Mode::Valuemap => {
            let env = cfg.env.build().map_err(CliError::from)?;
            let (c, _) = load_components(Policy::FlatDiffuser, ckpt_dir)?;
            let (_, p) = load_components(Policy::FlatQ, ckpt_dir)?;
            let (Some(ConductorModel::Diffusion(d)), Some(PerformerModel::Q(q))) = (c, p) else {
                unreachable!("kinds checked on load")
            };
            let (table, grids) = value_map(&env, &d, &q, cfg.analysis.resolution, cfg.train_seed).map_err(CliError::from)?;
            emit_report(&[table], &grids, out).map_err(core)?
        }
        Mode::AblateRewards | Mode::AblateK | Mode::AblateVariants => {
            let setup = AblationSetup {
                env: cfg.env.build().map_err(CliError::from)?,
                dataset: load_dataset(cfg, out)?,
                conductor: cfg.conductor.clone(),
                performer: cfg.performer.clone(),
                train_seed: cfg.train_seed,
                eval_seeds: cfg.seeds.clone(),
                episodes: cfg.orchestrator.episodes,
                replan_every: cfg.orchestrator.replan_every,
            };
            let table = match mode {
                Mode::AblateRewards => setup.ablate_rewards(),
                Mode::AblateK => setup.ablate_k(&cfg.analysis.ks),
                _ => setup.ablate_variants(),
            }
            .map_err(CliError::from)?;
            emit_report(&[table], &[], out).map_err(core)?
        }
    };
    println!("wrote {} report files to {}", manifest.entries.len(), out.display());
    Ok(())
}
