//! Closed-form two-action example, value maps and report files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::{ConductorError, DConductor};
use crate::diffusion::{self, DiffusionError, DiffusionSchedule, Guidance, Guide, NoisePredictor, SamplerOptions};
use crate::env::{direct_controller_value, EnvError, PointMassEnv, ToyAction, ToyMdp};
use crate::performer::{PerformerError, QPerformer};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("Q-policy undefined: action {0:?} never observed")]
    Coverage(ToyAction),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Conductor(#[from] ConductorError),
    #[error(transparent)]
    Performer(#[from] PerformerError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Observation counts and guidance factors of the two actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example1Instance {
    pub n1: u64,
    pub n2: u64,
    pub g1: f64,
    pub g2: f64,
}

impl Example1Instance {
    pub fn new(n1: u64, n2: u64, g1: f64, g2: f64) -> Result<Self> {
        let inst = Self { n1, n2, g1, g2 };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 + self.n2 == 0 {
            return Err(AnalysisError::Invalid("need at least one observation".into()));
        }
        for g in [self.g1, self.g2] {
            if !(g.is_finite() && g > 0.0) {
                return Err(AnalysisError::Invalid(format!("guidance factor {g} must be finite and positive")));
            }
        }
        Ok(())
    }
}

/// Guidance-weighted behavior frequencies, normalized to sum to one.
pub fn example1_diffuser_policy(inst: &Example1Instance) -> (f64, f64) {
    let n = (inst.n1 + inst.n2) as f64;
    let w1 = inst.n1 as f64 / n * inst.g1;
    let w2 = inst.n2 as f64 / n * inst.g2;
    (w1 / (w1 + w2), w2 / (w1 + w2))
}

/// Greedy action of the diffuser policy; ties go to b2.
pub fn example1_diffuser_argmax(inst: &Example1Instance) -> ToyAction {
    let (p1, p2) = example1_diffuser_policy(inst);
    if p1 > p2 {
        ToyAction::B1
    } else {
        ToyAction::B2
    }
}

/// Greedy action after value iteration on the empirical MDP, which only
/// contains the actions seen in the data.
pub fn example1_q_policy(inst: &Example1Instance, mdp: &ToyMdp) -> Result<ToyAction> {
    inst.validate()?;
    if inst.n1 == 0 {
        return Err(AnalysisError::Coverage(ToyAction::B1));
    }
    if inst.n2 == 0 {
        return Err(AnalysisError::Coverage(ToyAction::B2));
    }
    let (r1, r2) = (mdp.reward(ToyAction::B1), mdp.reward(ToyAction::B2));
    let gamma = mdp.gamma();
    let (mut q1, mut q2) = (0.0f64, 0.0f64);
    loop {
        let v = q1.max(q2);
        let (n1, n2) = (r1 + gamma * v, r2 + gamma * v);
        let delta = (n1 - q1).abs().max((n2 - q2).abs());
        (q1, q2) = (n1, n2);
        if delta < 1e-12 {
            break;
        }
    }
    Ok(if q1 > q2 { ToyAction::B1 } else { ToyAction::B2 })
}

/// The count ratio `n1/n2` above which the diffuser prefers b1.
pub fn example1_flip_threshold(g1: f64, g2: f64) -> f64 {
    g2 / g1
}

/// `n1` copies of encoded b1 followed by `n2` copies of encoded b2.
pub fn example1_samples(n1: usize, n2: usize) -> Array2<f64> {
    let mut out = Array2::from_elem((n1 + n2, 1), ToyAction::B2.encode());
    out.slice_mut(ndarray::s![..n1, ..]).fill(ToyAction::B1.encode());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub n1: u64,
    pub n2: u64,
    pub samples: usize,
    pub expected_b1: f64,
    pub observed_b1: f64,
    pub max_abs_error: f64,
}

impl FrequencyReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_error <= tol
    }
}

/// Samples a 1-D model and compares category frequencies with the data
/// frequencies `n_i / (n1 + n2)`.
pub fn example1_empirical_check<R: Rng + ?Sized>(
    n1: u64,
    n2: u64,
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    guidance: Option<Guidance<'_>>,
    samples: usize,
    rng: &mut R,
) -> Result<FrequencyReport> {
    if n1 + n2 == 0 || samples == 0 {
        return Err(AnalysisError::Invalid("need observations and samples".into()));
    }
    let empty = Array2::zeros((samples, 0));
    let x = diffusion::sample(model, samples, empty.view(), schedule, guidance, None, SamplerOptions::default(), rng)?;
    let b1 = x.iter().filter(|&&v| ToyAction::decode(v) == ToyAction::B1).count();
    let observed_b1 = b1 as f64 / samples as f64;
    let expected_b1 = n1 as f64 / (n1 + n2) as f64;
    Ok(FrequencyReport {
        n1,
        n2,
        samples,
        expected_b1,
        observed_b1,
        // Two categories: both errors have the same magnitude.
        max_abs_error: (observed_b1 - expected_b1).abs(),
    })
}

/// Linear guide `J(a) = slope * a`, favouring b2 when `slope > 0`.
pub struct LinearGuide {
    pub slope: f64,
}

impl Guide for LinearGuide {
    fn value_and_grad(&self, x: ArrayView2<f64>, _m: &[usize]) -> diffusion::Result<(ndarray::Array1<f64>, Array2<f64>)> {
        Ok((x.column(0).mapv(|v| self.slope * v), Array2::from_elem(x.raw_dim(), self.slope)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    DiffuserGuidance,
    QCritic,
    OptimalOracle,
}

/// Scalar values on a `resolution x resolution` grid of cell centres.
/// Row `i` is the `i`-th y cell from the bottom, column `j` the `j`-th x cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub source: ValueSource,
    pub resolution: usize,
    pub bounds_min: [f64; 2],
    pub bounds_max: [f64; 2],
    /// Noise level used for guidance grids.
    pub noise_level: Option<usize>,
    pub values: Array2<f64>,
}

/// Cell centre `(x, y)` of grid cell (`row`, `col`).
pub fn cell_center(env: &PointMassEnv, resolution: usize, row: usize, col: usize) -> [f64; 2] {
    let (lo, hi) = (env.bounds.min, env.bounds.max);
    let w = (hi[0] - lo[0]) / resolution as f64;
    let h = (hi[1] - lo[1]) / resolution as f64;
    [lo[0] + (col as f64 + 0.5) * w, lo[1] + (row as f64 + 0.5) * h]
}

fn grid_from(env: &PointMassEnv, resolution: usize, source: ValueSource, mut f: impl FnMut([f64; 2]) -> Result<f64>) -> Result<ValueGrid> {
    if resolution == 0 {
        return Err(AnalysisError::Invalid("resolution must be at least 1".into()));
    }
    let mut values = Array2::zeros((resolution, resolution));
    for row in 0..resolution {
        for col in 0..resolution {
            let v = f(cell_center(env, resolution, row, col))?;
            if !v.is_finite() {
                return Err(AnalysisError::Invalid(format!("non-finite value at cell ({row}, {col})")));
            }
            values[[row, col]] = v;
        }
    }
    Ok(ValueGrid {
        source,
        resolution,
        bounds_min: env.bounds.min,
        bounds_max: env.bounds.max,
        noise_level: None,
        values,
    })
}

fn rest_state(pos: [f64; 2]) -> Vec<f64> {
    vec![pos[0], pos[1], 0.0, 0.0]
}

/// Discounted dense-reward value of driving straight to the goal.
pub fn oracle_value_grid(env: &PointMassEnv, resolution: usize, gamma: f64) -> Result<ValueGrid> {
    grid_from(env, resolution, ValueSource::OptimalOracle, |p| Ok(direct_controller_value(env, p, gamma)))
}

/// Guidance value at noise level 1 of a plan that rests at the cell centre:
/// every column holds the cell state and zero actions.
pub fn guidance_value_grid(conductor: &DConductor, env: &PointMassEnv, resolution: usize) -> Result<ValueGrid> {
    let layout = conductor.layout;
    let mut column = conductor.norm.states.normalize(&rest_state([0.0, 0.0]));
    if layout.augmented {
        let zero = conductor.norm.actions.normalize(&vec![0.0; layout.action_dim]);
        for _ in 0..layout.interval {
            column.extend_from_slice(&zero);
        }
    }
    let mut grid = grid_from(env, resolution, ValueSource::DiffuserGuidance, |p| {
        let s = conductor.norm.states.normalize(&rest_state(p));
        column[..layout.state_dim].copy_from_slice(&s);
        let flat: Vec<f64> = column.iter().copied().cycle().take(layout.flat_len()).collect();
        let x = Array2::from_shape_vec((1, flat.len()), flat).expect("one row");
        Ok(conductor.value(x.view())?[0])
    })?;
    grid.noise_level = Some(1);
    Ok(grid)
}

/// The eight compass unit actions.
pub fn compass_actions() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let th = k as f64 * std::f64::consts::FRAC_PI_4;
            [th.cos(), th.sin()]
        })
        .collect()
}

/// Best critic value over the compass actions at rest, with the env goal.
pub fn critic_value_grid(performer: &QPerformer, env: &PointMassEnv, resolution: usize) -> Result<ValueGrid> {
    let goal = performer.goal_of(&rest_state(env.goal));
    let actions = compass_actions();
    grid_from(env, resolution, ValueSource::QCritic, |p| {
        let s = rest_state(p);
        let mut best = f64::NEG_INFINITY;
        for a in &actions {
            best = best.max(performer.q_value(&s, a, &goal)?);
        }
        Ok(best)
    })
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(AnalysisError::Invalid(format!("need two equal series of length >= 2, got {} and {}", a.len(), b.len())));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

pub fn grid_spearman(a: &ValueGrid, b: &ValueGrid) -> Result<f64> {
    if a.values.dim() != b.values.dim() {
        return Err(AnalysisError::Invalid("grid shapes differ".into()));
    }
    spearman(&a.values.iter().copied().collect::<Vec<_>>(), &b.values.iter().copied().collect::<Vec<_>>())
}

/// One experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.csv", self.experiment, self.variant, self.seed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub grid: ValueGrid,
}

impl GridEntry {
    pub fn file_name(&self) -> String {
        let source = match self.grid.source {
            ValueSource::DiffuserGuidance => "diffuser_guidance",
            ValueSource::QCritic => "q_critic",
            ValueSource::OptimalOracle => "optimal_oracle",
        };
        format!("{}-{}_{}_{}.csv", self.experiment, source, self.variant, self.seed)
    }
}

/// Grid as a CSV matrix, top row first so it reads like a map.
pub fn grid_csv(grid: &ValueGrid) -> String {
    let mut out = String::new();
    for row in grid.values.rows().into_iter().rev() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: String,
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<ValueSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_level: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes every table and grid plus `manifest.json` into `dir`.
pub fn emit_report(tables: &[ReportTable], grids: &[GridEntry], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|source| AnalysisError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = Manifest::default();
    for t in tables {
        let file = t.file_name();
        write(&dir.join(&file), &t.to_csv())?;
        manifest.entries.push(ManifestEntry {
            file,
            kind: "table".into(),
            experiment: t.experiment.clone(),
            variant: t.variant.clone(),
            seed: t.seed,
            source: None,
            noise_level: None,
        });
    }
    for g in grids {
        let file = g.file_name();
        write(&dir.join(&file), &grid_csv(&g.grid))?;
        manifest.entries.push(ManifestEntry {
            file,
            kind: "value_grid".into(),
            experiment: g.experiment.clone(),
            variant: g.variant.clone(),
            seed: g.seed,
            source: Some(g.grid.source),
            noise_level: g.grid.noise_level,
        });
    }
    write(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// The 20 x 20 x 5 x 5 grid of instances used for the exhaustive check.
pub fn example1_grid() -> Vec<Example1Instance> {
    const G: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut out = Vec::with_capacity(20 * 20 * 25);
    for n1 in 1..=20 {
        for n2 in 1..=20 {
            for g1 in G {
                for g2 in G {
                    out.push(Example1Instance { n1, n2, g1, g2 });
                }
            }
        }
    }
    out
}

/// Closed-form example table: one row per instance of [`example1_grid`].
pub fn example1_table(mdp: &ToyMdp) -> Result<ReportTable> {
    let mut rows = Vec::new();
    for inst in example1_grid() {
        let (p1, p2) = example1_diffuser_policy(&inst);
        let q = example1_q_policy(&inst, mdp)?;
        rows.push(vec![
            inst.n1.to_string(),
            inst.n2.to_string(),
            inst.g1.to_string(),
            inst.g2.to_string(),
            p1.to_string(),
            p2.to_string(),
            format!("{:?}", example1_diffuser_argmax(&inst)).to_lowercase(),
            format!("{q:?}").to_lowercase(),
        ]);
    }
    Ok(ReportTable {
        experiment: "example1".into(),
        variant: "closed_form".into(),
        seed: 0,
        header: ["n1", "n2", "g1", "g2", "pi_b1", "pi_b2", "diffuser_argmax", "q_argmax"]
            .map(String::from)
            .to_vec(),
        rows,
    })
}
