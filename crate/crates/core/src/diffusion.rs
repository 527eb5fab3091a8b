//! DDPM machinery: variance schedules, closed-form forward noising, the
//! noise-prediction loss and ancestral sampling with optional classifier
//! guidance and inpainting.
//!
//! Timesteps are 1-based: `m = 1..=M`, with index 0 standing for clean data.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, ForwardCache, Gradients, MlpNet, NnError};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("diffusion needs at least one step")]
    ZeroSteps,
    #[error("timestep {m} outside 1..={steps}")]
    TimestepOutOfRange { m: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `beta` evenly spaced from 1e-4 to 2e-2.
    Linear,
    /// Squared-cosine `alpha_bar` profile with offset 0.008.
    Cosine,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(DiffusionError::ZeroSteps);
        }
        let mut betas = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::Linear => {
                for (m, beta) in betas.iter_mut().enumerate().skip(1) {
                    let frac = if steps == 1 { 0.0 } else { (m - 1) as f64 / (steps - 1) as f64 };
                    *beta = LINEAR_BETA_START + frac * (LINEAR_BETA_END - LINEAR_BETA_START);
                }
            }
            ScheduleKind::Cosine => {
                let f = |m: usize| {
                    let t = (m as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                for (m, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = (1.0 - f(m) / f(m - 1)).clamp(1e-8, MAX_BETA);
                }
            }
        }
        Ok(Self::from_betas(kind, betas))
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let steps = betas.len() - 1;
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; steps + 1];
        for m in 1..=steps {
            alpha_bars[m] = alpha_bars[m - 1] * alphas[m];
        }
        let mut posterior_variances = vec![0.0; steps + 1];
        for m in 1..=steps {
            posterior_variances[m] = betas[m] * (1.0 - alpha_bars[m - 1]) / (1.0 - alpha_bars[m]);
        }
        Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, m: usize) -> f64 {
        self.betas[m]
    }

    pub fn alpha(&self, m: usize) -> f64 {
        self.alphas[m]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, m: usize) -> f64 {
        self.alpha_bars[m]
    }

    /// `sigma_m^2 = beta_m (1 - alpha_bar_{m-1}) / (1 - alpha_bar_m)`; zero at `m = 1`.
    pub fn posterior_variance(&self, m: usize) -> f64 {
        self.posterior_variances[m]
    }

    /// Coefficients `(c0, cm)` of the posterior mean `c0 * x0 + cm * x_m`.
    pub fn posterior_coefficients(&self, m: usize) -> (f64, f64) {
        let ab = self.alpha_bars[m];
        let ab_prev = self.alpha_bars[m - 1];
        let c0 = self.betas[m] * ab_prev.sqrt() / (1.0 - ab);
        let cm = (1.0 - ab_prev) * self.alphas[m].sqrt() / (1.0 - ab);
        (c0, cm)
    }

    fn check(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.steps() {
            return Err(DiffusionError::TimestepOutOfRange { m, steps: self.steps() });
        }
        Ok(())
    }

    /// `x_m = sqrt(alpha_bar_m) x0 + sqrt(1 - alpha_bar_m) eps`, one timestep per row.
    pub fn q_sample(&self, x0: ArrayView2<f64>, m: &[usize], eps: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x0.dim() != eps.dim() || m.len() != x0.nrows() {
            return Err(DiffusionError::Shape("q_sample operands".into()));
        }
        let mut out = Array2::zeros(x0.raw_dim());
        for (row, &mi) in m.iter().enumerate() {
            self.check(mi)?;
            let (a, b) = (self.alpha_bars[mi].sqrt(), (1.0 - self.alpha_bars[mi]).sqrt());
            let mut o = out.row_mut(row);
            o.assign(&(&x0.row(row) * a + &eps.row(row) * b));
        }
        Ok(out)
    }
}

/// Width of the sinusoidal timestep embedding.
pub const TIME_EMBED_DIM: usize = 16;

pub fn timestep_embedding(m: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / (half - 1) as f64).exp();
        out[i] = (m as f64 * freq).sin();
        out[half + i] = (m as f64 * freq).cos();
    }
    out
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Anything that predicts the noise in `x_m`.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn predict_noise(&self, x: ArrayView2<f64>, m: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// A differentiable scalar score used for classifier guidance.
pub trait Guide {
    /// Returns `J(x)` per row and `dJ/dx`.
    fn value_and_grad(&self, x: ArrayView2<f64>, m: &[usize]) -> Result<(Array1<f64>, Array2<f64>)>;
}

/// Conditioned MLP noise predictor over a flattened array.
///
/// Network input is `[x, embed(m), cond]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: MlpNet,
    data_dim: usize,
    cond_dim: usize,
}

pub struct DenoiserCache {
    net: ForwardCache,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(data_dim: usize, cond_dim: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let mut widths = vec![data_dim + TIME_EMBED_DIM + cond_dim];
        widths.extend(std::iter::repeat_n(hidden, depth));
        widths.push(data_dim);
        Self {
            net: MlpNet::new(&widths, rng),
            data_dim,
            cond_dim,
        }
    }

    pub fn from_net(net: MlpNet, data_dim: usize, cond_dim: usize) -> Result<Self> {
        if net.input_dim() != data_dim + TIME_EMBED_DIM + cond_dim || net.output_dim() != data_dim {
            return Err(DiffusionError::Shape("denoiser network widths".into()));
        }
        Ok(Self { net, data_dim, cond_dim })
    }

    pub fn input(&self, x: ArrayView2<f64>, m: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        let rows = x.nrows();
        if x.ncols() != self.data_dim || m.len() != rows || cond.ncols() != self.cond_dim || cond.nrows() != rows {
            return Err(DiffusionError::Shape(format!(
                "denoiser input: x {:?}, {} timesteps, cond {:?}",
                x.dim(),
                m.len(),
                cond.dim()
            )));
        }
        let mut input = Array2::zeros((rows, self.data_dim + TIME_EMBED_DIM + self.cond_dim));
        input.slice_mut(s![.., ..self.data_dim]).assign(&x);
        for (row, &mi) in m.iter().enumerate() {
            let emb = timestep_embedding(mi);
            input
                .slice_mut(s![row, self.data_dim..self.data_dim + TIME_EMBED_DIM])
                .assign(&ndarray::aview1(&emb));
        }
        input.slice_mut(s![.., self.data_dim + TIME_EMBED_DIM..]).assign(&cond);
        Ok(input)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>, m: &[usize], cond: ArrayView2<f64>) -> Result<(Array2<f64>, DenoiserCache)> {
        let input = self.input(x, m, cond)?;
        let (out, net) = self.net.forward_cached(input.view())?;
        Ok((out, DenoiserCache { net }))
    }

    /// Parameter gradients and the gradient with respect to `x` (the noisy
    /// sample); conditioning gradients are dropped.
    pub fn backward(&self, cache: &DenoiserCache, output_grad: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let (g, dinput) = self.net.backward(&cache.net, output_grad)?;
        Ok((g, dinput.slice(s![.., ..self.data_dim]).to_owned()))
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn predict_noise(&self, x: ArrayView2<f64>, m: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        let input = self.input(x, m, cond)?;
        Ok(self.net.forward(input.view())?)
    }
}

/// Noise-prediction loss `mean((eps - eps_theta(x_m, m, cond))^2)` for given
/// timesteps and noise, with parameter gradients.
pub fn denoise_loss_with(
    den: &Denoiser,
    x0: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    m: &[usize],
    eps: ArrayView2<f64>,
) -> Result<(f64, Gradients)> {
    let xm = schedule.q_sample(x0, m, eps)?;
    let (pred, cache) = den.forward_cached(xm.view(), m, cond)?;
    let diff = &pred - &eps;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(DiffusionError::NonFiniteLoss);
    }
    let grad = diff.mapv(|d| 2.0 * d / n);
    let (g, _) = den.backward(&cache, grad.view())?;
    Ok((loss, g))
}

/// Draws `m ~ U{1..M}` and `eps ~ N(0, I)` per row, then evaluates
/// [`denoise_loss_with`].
pub fn denoise_loss<R: Rng + ?Sized>(
    den: &Denoiser,
    x0: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let m: Vec<usize> = (0..x0.nrows()).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = standard_normal(x0.nrows(), x0.ncols(), rng);
    denoise_loss_with(den, x0, cond, schedule, &m, eps.view())
}

/// Cells pinned to known values throughout sampling. `values` has one row
/// per batch element and one column per index.
#[derive(Debug, Clone, PartialEq)]
pub struct Inpaint {
    pub indices: Vec<usize>,
    pub values: Array2<f64>,
}

impl Inpaint {
    pub fn new(indices: Vec<usize>, values: Array2<f64>) -> Self {
        assert_eq!(indices.len(), values.ncols(), "one value column per pinned index");
        Self { indices, values }
    }

    /// Same pinned values for every row.
    pub fn broadcast(indices: Vec<usize>, values: &[f64], rows: usize) -> Self {
        let v = Array2::from_shape_fn((rows, values.len()), |(_, j)| values[j]);
        Self::new(indices, v)
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for (row, mut xr) in x.axis_iter_mut(Axis(0)).enumerate() {
            for (j, &idx) in self.indices.iter().enumerate() {
                xr[idx] = self.values[[row, j]];
            }
        }
    }
}

#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub guide: &'a dyn Guide,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    /// Clip the implied clean sample to `[-1, 1]` before forming the mean.
    pub clip_denoised: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { clip_denoised: true }
    }
}

/// Posterior mean `mu_theta(x_m)` from a noise prediction.
pub fn posterior_mean(schedule: &DiffusionSchedule, x: &Array2<f64>, eps: &Array2<f64>, m: usize, clip: bool) -> Array2<f64> {
    let ab = schedule.alpha_bar(m);
    let mut x0 = (x - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
    if clip {
        x0.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    }
    let (c0, cm) = schedule.posterior_coefficients(m);
    x0 * c0 + x * cm
}

/// One reverse step `x_m -> x_{m-1}`.
///
/// With guidance the mean is shifted by `omega * sigma_m^2 * grad J(mu)`,
/// the gradient taken at the unguided mean. Noise is drawn for every step
/// `m > 1` whether or not guidance is active, so `omega = 0` reproduces the
/// unguided chain exactly.
#[allow(clippy::too_many_arguments)]
pub fn p_sample_step<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    x: &Array2<f64>,
    m: usize,
    cond: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    guidance: Option<Guidance<'_>>,
    inpaint: Option<&Inpaint>,
    options: SamplerOptions,
    rng: &mut R,
) -> Result<Array2<f64>> {
    schedule.check(m)?;
    let ms = vec![m; x.nrows()];
    let eps = predictor.predict_noise(x.view(), &ms, cond)?;
    let mut mean = posterior_mean(schedule, x, &eps, m, options.clip_denoised);
    let var = schedule.posterior_variance(m);
    if let Some(g) = guidance {
        if g.omega != 0.0 {
            let (_, grad) = g.guide.value_and_grad(mean.view(), &ms)?;
            mean.scaled_add(g.omega * var, &grad);
        }
    }
    if m > 1 {
        let z = standard_normal(x.nrows(), x.ncols(), rng);
        mean.scaled_add(var.sqrt(), &z);
    }
    if let Some(p) = inpaint {
        p.apply(&mut mean);
    }
    Ok(mean)
}

/// Full ancestral sampling from `x_M ~ N(0, I)`; the result is clipped to
/// `[-1, 1]` and pinned cells are re-applied.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    rows: usize,
    cond: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    guidance: Option<Guidance<'_>>,
    inpaint: Option<&Inpaint>,
    options: SamplerOptions,
    rng: &mut R,
) -> Result<Array2<f64>> {
    sample_traced(predictor, rows, cond, schedule, guidance, inpaint, options, rng, &mut |_, _| {})
}

/// [`sample`] with an observer called on `x_M` and after every step.
#[allow(clippy::too_many_arguments)]
pub fn sample_traced<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    rows: usize,
    cond: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    guidance: Option<Guidance<'_>>,
    inpaint: Option<&Inpaint>,
    options: SamplerOptions,
    rng: &mut R,
    observe: &mut dyn FnMut(usize, &Array2<f64>),
) -> Result<Array2<f64>> {
    let mut x = standard_normal(rows, predictor.data_dim(), rng);
    if let Some(p) = inpaint {
        p.apply(&mut x);
    }
    observe(schedule.steps(), &x);
    for m in (1..=schedule.steps()).rev() {
        x = p_sample_step(predictor, &x, m, cond, schedule, guidance, inpaint, options, rng)?;
        observe(m - 1, &x);
    }
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    if let Some(p) = inpaint {
        p.apply(&mut x);
    }
    Ok(x)
}

/// Exact noise predictor for data that is a weighted set of points: the
/// minimizer of the noise-prediction loss over all functions.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMixtureOracle {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub schedule: DiffusionSchedule,
}

impl NoisePredictor for PointMixtureOracle {
    fn data_dim(&self) -> usize {
        self.points[0].len()
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn predict_noise(&self, x: ArrayView2<f64>, m: &[usize], _cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        let total: f64 = self.weights.iter().sum();
        for (row, &mi) in m.iter().enumerate() {
            let ab = self.schedule.alpha_bar(mi);
            let (a, var) = (ab.sqrt(), 1.0 - ab);
            let xr = x.row(row);
            let logits: Vec<f64> = self
                .points
                .iter()
                .zip(&self.weights)
                .map(|(p, w)| {
                    let d2: f64 = xr.iter().zip(p).map(|(xv, pv)| (xv - a * pv).powi(2)).sum();
                    (w / total).ln() - d2 / (2.0 * var)
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = probs.iter().sum();
            for j in 0..xr.len() {
                let mean_x0: f64 = self.points.iter().zip(&probs).map(|(p, w)| p[j] * w / z).sum();
                out[[row, j]] = (xr[j] - a * mean_x0) / var.sqrt();
            }
        }
        Ok(out)
    }
}

/// Settings for fitting an unconditional denoiser to a fixed sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
}

/// Cosine decay from `lr` to `lr * floor` over `total` steps.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Trains `den` (no conditioning) on rows of `data`; returns per-step losses.
pub fn fit_unconditional<R: Rng + ?Sized>(
    den: &mut Denoiser,
    data: &Array2<f64>,
    schedule: &DiffusionSchedule,
    config: FitConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(&den.net, config.lr);
    let empty = Array2::zeros((config.batch, 0));
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut x0 = Array2::zeros((config.batch, data.ncols()));
        for mut row in x0.rows_mut() {
            row.assign(&data.row(rng.random_range(0..data.nrows())));
        }
        let (loss, g) = denoise_loss(den, x0.view(), empty.view(), schedule, rng)?;
        adam.lr = cosine_lr(config.lr, config.lr_floor, step, config.steps);
        adam.step(&mut den.net, &g)?;
        losses.push(loss);
    }
    Ok(losses)
}
