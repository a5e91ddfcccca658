//! Dropout SGD on synthetic linear regression: planted low-rank targets,
//! minibatch sampling, masked backpropagation, learning-rate selection,
//! trajectories of losses, spectra and equalization gaps, and spectrum sweeps
//! over retain probabilities.

use std::io::Write;

use ndarray::Array1;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{network_map, random_init, Architecture, DropoutConfig, WeightStack};
use crate::regularizer::{
    dropout_objective, population_loss, regularizer_report, DataSampler,
    DropoutMaskPattern, Moments, PopulationMoments,
};

/// Learning rates tried when none is configured.
pub const LR_GRID: [f64; 3] = [1.0, 0.1, 0.01];
/// Singular values above this fraction of the largest count toward effective rank.
pub const EFFECTIVE_RANK_CUTOFF: f64 = 0.05;

/// Regression targets `y = N x` with `x ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataModel {
    n: Matrix,
    planted_rank: usize,
    noise_std: f64,
}

impl DataModel {
    pub fn new(n: Matrix, planted_rank: usize, noise_std: f64) -> Result<Self> {
        linalg::ensure_finite(n.view(), "target map")?;
        if n.is_empty() {
            return Err(Error::Shape("target map must be nonempty".into()));
        }
        Ok(Self {
            n,
            planted_rank,
            noise_std,
        })
    }

    /// `N = U V^T + E` with standard Gaussian `U` (`d_out x rank`), `V`
    /// (`d_in x rank`) and `E` entries of standard deviation `noise_std`.
    pub fn planted(d_out: usize, d_in: usize, rank: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if d_out == 0 || d_in == 0 {
            return Err(Error::Shape("dimensions must be positive".into()));
        }
        if rank > d_out.min(d_in) {
            return Err(Error::InvalidArgument(format!(
                "planted rank {rank} exceeds min({d_out}, {d_in})"
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std must be non-negative, got {noise_std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = gaussian(d_out, rank, &mut rng);
        let v = gaussian(d_in, rank, &mut rng);
        let noise = gaussian(d_out, d_in, &mut rng) * noise_std;
        Self::new(u.dot(&v.t()) + noise, rank, noise_std)
    }

    pub fn target(&self) -> &Matrix {
        &self.n
    }

    pub fn planted_rank(&self) -> usize {
        self.planted_rank
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Population moments: `C = I`, `C_yx = N`, `tr C_yy = ||N||_F^2`.
    pub fn population(&self) -> PopulationMoments {
        PopulationMoments::linear_identity(&self.n)
    }
}

impl DataSampler for DataModel {
    fn input_dim(&self) -> usize {
        self.n.ncols()
    }

    fn output_dim(&self) -> usize {
        self.n.nrows()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Array1<f64>, Array1<f64>) {
        let x = Array1::from_shape_simple_fn(self.n.ncols(), || StandardNormal.sample(&mut *rng));
        let y = self.n.dot(&x);
        (x, y)
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

/// A minibatch with examples in columns: `x` is `d_0 x n`, `y` is `d_{k+1} x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

pub fn sample_batch(model: &DataModel, n: usize, seed: u64) -> Result<Batch> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(draw_batch(model, n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn draw_batch<R: Rng + ?Sized>(model: &DataModel, n: usize, rng: &mut R) -> Batch {
    let x = gaussian(model.n.ncols(), n, rng);
    let y = model.n.dot(&x);
    Batch { x, y }
}

/// How dropout masks are shared within a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// One mask per hidden layer per step, shared by every example.
    #[default]
    PerStep,
    /// An independent mask for every example.
    PerExample,
}

/// Minibatch loss `(1/n) sum ||y_i - W_bar x_i||^2` under one mask pattern and
/// its gradient with respect to every layer.
pub fn stochastic_gradient(
    ws: &WeightStack,
    pattern: &DropoutMaskPattern,
    theta: f64,
    batch: &Batch,
) -> Result<(f64, Vec<Matrix>)> {
    if pattern.masks().len() != ws.hidden_depth() {
        return Err(Error::Shape("mask pattern depth does not match the stack".into()));
    }
    let inv_theta = 1.0 / theta;
    let scales: Vec<Matrix> = pattern
        .masks()
        .iter()
        .map(|b| {
            Matrix::from_shape_fn((b.len(), 1), |(i, _)| if b[i] { inv_theta } else { 0.0 })
        })
        .collect();
    masked_gradient(ws, &scales, batch)
}

/// Like [`stochastic_gradient`], with masks given as `d_i x n` (per example)
/// or `d_i x 1` (shared) matrices already scaled by `1 / theta`.
fn masked_gradient(ws: &WeightStack, scales: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
    let arch = ws.architecture();
    if batch.x.nrows() != arch.input_dim()
        || batch.y.nrows() != arch.output_dim()
        || batch.x.ncols() != batch.y.ncols()
    {
        return Err(Error::Shape("batch does not match the network".into()));
    }
    let layers = ws.layers();
    let n = batch.x.ncols() as f64;

    // activations a_0 = X, a_i = D_i W_i a_{i-1}
    let mut acts = Vec::with_capacity(layers.len());
    acts.push(batch.x.clone());
    for (w, d) in layers.iter().zip(scales) {
        let z = w.dot(acts.last().unwrap());
        acts.push(z * d);
    }
    let out = layers[layers.len() - 1].dot(acts.last().unwrap());
    let resid = &out - &batch.y;
    let loss = resid.iter().map(|v| v * v).sum::<f64>() / n;

    let mut grads = vec![Matrix::zeros((0, 0)); layers.len()];
    let mut delta = resid * (2.0 / n);
    for i in (0..layers.len()).rev() {
        grads[i] = delta.dot(&acts[i].t());
        if i > 0 {
            delta = layers[i].t().dot(&delta) * &scales[i - 1];
        }
    }
    Ok((loss, grads))
}

fn draw_scales<R: Rng + ?Sized>(
    arch: &Architecture,
    theta: f64,
    mode: MaskMode,
    n: usize,
    rng: &mut R,
) -> Vec<Matrix> {
    let cols = match mode {
        MaskMode::PerStep => 1,
        MaskMode::PerExample => n,
    };
    let inv_theta = 1.0 / theta;
    arch.hidden_widths()
        .iter()
        .map(|&d| {
            Matrix::from_shape_simple_fn((d, cols), || {
                if rng.random::<f64>() < theta {
                    inv_theta
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Minibatch dropout loss and gradient with masks drawn from `rng` in the given mode.
pub fn sampled_gradient<R: Rng + ?Sized>(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    mode: MaskMode,
    batch: &Batch,
    rng: &mut R,
) -> Result<(f64, Vec<Matrix>)> {
    let scales = draw_scales(ws.architecture(), cfg.theta(), mode, batch.x.ncols(), rng);
    masked_gradient(ws, &scales, batch)
}

/// One dropout SGD step with a shared mask drawn from `seed`.
pub fn dropout_sgd_step(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    batch: &Batch,
    lr: f64,
    seed: u64,
) -> Result<WeightStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sgd_step(ws, cfg, MaskMode::PerStep, batch, lr, &mut rng, 0).map(|(next, _)| next)
}

fn sgd_step<R: Rng + ?Sized>(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    mode: MaskMode,
    batch: &Batch,
    lr: f64,
    rng: &mut R,
    step: usize,
) -> Result<(WeightStack, f64)> {
    let (loss, grads) = sampled_gradient(ws, cfg, mode, batch, rng)?;
    let layers: Vec<Matrix> = ws
        .layers()
        .iter()
        .zip(&grads)
        .map(|(w, g)| w - &(g * lr))
        .collect();
    if !loss.is_finite() || layers.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence { step, partial: None });
    }
    Ok((WeightStack::new(layers)?, loss))
}

/// Optimization settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub minibatch: usize,
    /// `None` selects from [`LR_GRID`] by pilot runs over a tenth of the budget.
    pub lr: Option<f64>,
    pub steps: usize,
    pub log_stride: usize,
    pub seed: u64,
    pub repeats: usize,
    pub init_scale: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch: 200,
            lr: None,
            steps: 5000,
            log_stride: 100,
            seed: 0,
            repeats: 10,
            init_scale: 1.0,
            mask_mode: MaskMode::PerStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 {
            return Err(Error::InvalidArgument("minibatch must be at least 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
            }
        }
        if self.log_stride == 0 {
            return Err(Error::InvalidArgument("log stride must be at least 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument("init scale must be positive".into()));
        }
        Ok(())
    }

    /// Seeds for weight initialization and for the data/mask stream of one repeat.
    fn run_seeds(&self, repeat: usize) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(repeat as u64);
        (rng.next_u64(), rng.next_u64())
    }
}

/// One logged step of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    /// Mean minibatch dropout loss since the previous record (`None` at step 0).
    pub mc_loss: Option<f64>,
    pub l_theta_closed: f64,
    pub l: f64,
    pub r: f64,
    pub sigma: Vec<f64>,
    pub gaps: Vec<Option<f64>>,
    pub overall_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrajectory {
    pub theta: f64,
    pub lr: f64,
    pub records: Vec<TrajectoryRecord>,
}

impl TrainTrajectory {
    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    fn header(&self, with_repeat: bool) -> Vec<String> {
        let first = self.records.first();
        let m = first.map_or(0, |r| r.sigma.len());
        let k = first.map_or(0, |r| r.gaps.len());
        let mut cols = Vec::new();
        if with_repeat {
            cols.push("repeat".to_string());
        }
        cols.extend(["step", "L_theta_closed", "L", "R"].map(String::from));
        cols.extend((1..=m).map(|i| format!("sigma_{i}")));
        cols.extend((1..=k).map(|i| format!("r_{i}")));
        cols.push("r_overall".into());
        cols
    }

    fn rows(&self) -> impl Iterator<Item = Vec<String>> + '_ {
        self.records.iter().map(|rec| {
            let mut row = vec![
                rec.step.to_string(),
                rec.l_theta_closed.to_string(),
                rec.l.to_string(),
                rec.r.to_string(),
            ];
            row.extend(rec.sigma.iter().map(f64::to_string));
            row.extend(rec.gaps.iter().map(opt_to_string));
            row.push(opt_to_string(&rec.overall_gap));
            row
        })
    }

    /// Columns `step, L_theta_closed, L, R, sigma_1.., r_1.., r_overall`;
    /// undefined gaps are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header(false))?;
        for row in self.rows() {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Several trajectories in one table with a leading `repeat` column.
pub fn write_trajectories_csv<W: Write>(runs: &[(usize, &TrainTrajectory)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some((_, first)) = runs.first() {
        w.write_record(first.header(true))?;
    }
    for (repeat, traj) in runs {
        for row in traj.rows() {
            let mut full = vec![repeat.to_string()];
            full.extend(row);
            w.write_record(full)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn opt_to_string(x: &Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trajectory: TrainTrajectory,
    pub weights: WeightStack,
    pub lr: f64,
}

fn check_dims(arch: &Architecture, model: &DataModel) -> Result<()> {
    if arch.input_dim() != model.n.ncols() || arch.output_dim() != model.n.nrows() {
        return Err(Error::Shape(format!(
            "architecture maps {} -> {} but the target is {}x{}",
            arch.input_dim(),
            arch.output_dim(),
            model.n.nrows(),
            model.n.ncols()
        )));
    }
    Ok(())
}

fn record(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    pm: &PopulationMoments,
    step: usize,
    mc_loss: Option<f64>,
) -> Result<TrajectoryRecord> {
    let report = regularizer_report(ws, cfg, &pm.moment)?;
    Ok(TrajectoryRecord {
        step,
        mc_loss,
        l_theta_closed: dropout_objective(ws, cfg, pm)?,
        l: population_loss(ws, pm)?,
        r: report.total_r,
        sigma: linalg::svd(&network_map(ws))?.singular_values,
        gaps: report.levels.iter().map(|l| l.gap).collect(),
        overall_gap: report.overall_gap,
    })
}

/// Trains the first repeat of `tc` (seeds derived from `tc.seed`).
pub fn train(
    arch: &Architecture,
    model: &DataModel,
    cfg: &DropoutConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_repeat(arch, model, cfg, tc, 0)
}

/// Trains one repeat: picks the learning rate if needed, then runs the full budget.
pub fn train_repeat(
    arch: &Architecture,
    model: &DataModel,
    cfg: &DropoutConfig,
    tc: &TrainConfig,
    repeat: usize,
) -> Result<TrainOutcome> {
    tc.validate()?;
    check_dims(arch, model)?;
    let lr = match tc.lr {
        Some(lr) => lr,
        None => select_lr(arch, model, cfg, tc, repeat)?,
    };
    let (trajectory, weights) = run(arch, model, cfg, tc, repeat, lr, tc.steps, true)?;
    Ok(TrainOutcome {
        trajectory,
        weights,
        lr,
    })
}

/// Runs every repeat in parallel; results keep repeat order.
pub fn train_repeats(
    arch: &Architecture,
    model: &DataModel,
    cfg: &DropoutConfig,
    tc: &TrainConfig,
) -> Vec<Result<TrainOutcome>> {
    (0..tc.repeats)
        .into_par_iter()
        .map(|r| train_repeat(arch, model, cfg, tc, r))
        .collect()
}

/// Best grid rate by closed-form `L_theta` after a pilot run of a tenth of
/// the budget; ties go to the earlier grid entry.
fn select_lr(
    arch: &Architecture,
    model: &DataModel,
    cfg: &DropoutConfig,
    tc: &TrainConfig,
    repeat: usize,
) -> Result<f64> {
    let pilot = (tc.steps / 10).max(1).min(tc.steps);
    let pm = model.population();
    let mut best: Option<(f64, f64)> = None;
    let mut last_divergence = 0;
    for &lr in &LR_GRID {
        match run(arch, model, cfg, tc, repeat, lr, pilot, false) {
            Ok((_, ws)) => {
                let value = dropout_objective(&ws, cfg, &pm)?;
                if value.is_finite() && best.is_none_or(|(_, b)| value < b) {
                    best = Some((lr, value));
                }
            }
            Err(Error::Divergence { step, .. }) => last_divergence = step,
            Err(e) => return Err(e),
        }
    }
    best.map(|(lr, _)| lr).ok_or(Error::Divergence {
        step: last_divergence,
        partial: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn run(
    arch: &Architecture,
    model: &DataModel,
    cfg: &DropoutConfig,
    tc: &TrainConfig,
    repeat: usize,
    lr: f64,
    steps: usize,
    log: bool,
) -> Result<(TrainTrajectory, WeightStack)> {
    let (init_seed, data_seed) = tc.run_seeds(repeat);
    let mut ws = random_init(arch, tc.init_scale, init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let pm = model.population();
    let mut traj = TrainTrajectory {
        theta: cfg.theta(),
        lr,
        records: Vec::new(),
    };
    if log {
        traj.records.push(record(&ws, cfg, &pm, 0, None)?);
    }
    let mut window = Moments::default();
    for step in 1..=steps {
        let batch = draw_batch(model, tc.minibatch, &mut rng);
        match sgd_step(&ws, cfg, tc.mask_mode, &batch, lr, &mut rng, step) {
            Ok((next, loss)) => {
                ws = next;
                window.push(loss);
            }
            Err(Error::Divergence { step, .. }) => {
                return Err(Error::Divergence {
                    step,
                    partial: log.then(|| Box::new(traj)),
                })
            }
            Err(e) => return Err(e),
        }
        if log && (step % tc.log_stride == 0 || step == steps) {
            traj.records.push(record(&ws, cfg, &pm, step, Some(window.mean))?);
            window = Moments::default();
        }
    }
    Ok((traj, ws))
}

/// Number of singular values above [`EFFECTIVE_RANK_CUTOFF`] times the largest.
pub fn effective_rank(sigma: &[f64]) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > EFFECTIVE_RANK_CUTOFF * top).count()
}

/// One row of a spectrum sweep; `repeat = None` marks the repeat average.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    pub repeat: Option<usize>,
    pub sigma: Vec<f64>,
    /// Per-run count, or the mean count over successful repeats.
    pub effective_rank: f64,
}

#[derive(Debug, Clone)]
pub struct SweepFailure {
    pub theta: f64,
    pub repeat: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct SpectrumSweep {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl SpectrumSweep {
    pub fn averaged(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.repeat.is_none())
    }

    /// Columns `theta, repeat, sigma_1.., effective_rank`; averaged rows carry `repeat = mean`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let m = self.rows.first().map_or(0, |r| r.sigma.len());
        let mut header = vec!["theta".to_string(), "repeat".to_string()];
        header.extend((1..=m).map(|i| format!("sigma_{i}")));
        header.push("effective_rank".into());
        w.write_record(header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.theta.to_string(),
                row.repeat.map_or("mean".to_string(), |r| r.to_string()),
            ];
            rec.extend(row.sigma.iter().map(f64::to_string));
            rec.push(row.effective_rank.to_string());
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `tc.repeats` networks per retain probability and tabulates the
/// final spectra. Divergent runs are recorded as failures and left out of the
/// averages.
pub fn spectrum_sweep(
    arch: &Architecture,
    model: &DataModel,
    thetas: &[f64],
    tc: &TrainConfig,
) -> Result<SpectrumSweep> {
    tc.validate()?;
    check_dims(arch, model)?;
    let cfgs = thetas
        .iter()
        .map(|&t| {
            if t > 0.0 && t < 1.0 {
                DropoutConfig::new(t)
            } else {
                Err(Error::InvalidArgument(format!("sweep retain probabilities must lie in (0, 1), got {t}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..cfgs.len())
        .flat_map(|c| (0..tc.repeats).map(move |r| (c, r)))
        .collect();
    let results: Vec<Result<Vec<f64>>> = cells
        .par_iter()
        .map(|&(c, r)| {
            let out = train_repeat(arch, model, &cfgs[c], tc, r)?;
            Ok(linalg::svd(&network_map(&out.weights))?.singular_values)
        })
        .collect();

    let mut sweep = SpectrumSweep::default();
    let mut results = results.into_iter();
    for cfg in &cfgs {
        let mut spectra = Vec::new();
        for repeat in 0..tc.repeats {
            match results.next().expect("one result per cell") {
                Ok(sigma) => {
                    sweep.rows.push(SweepRow {
                        theta: cfg.theta(),
                        repeat: Some(repeat),
                        effective_rank: effective_rank(&sigma) as f64,
                        sigma: sigma.clone(),
                    });
                    spectra.push(sigma);
                }
                Err(e) => sweep.failures.push(SweepFailure {
                    theta: cfg.theta(),
                    repeat,
                    message: e.to_string(),
                }),
            }
        }
        if !spectra.is_empty() {
            let count = spectra.len() as f64;
            let m = spectra[0].len();
            let mean: Vec<f64> = (0..m)
                .map(|i| spectra.iter().map(|s| s[i]).sum::<f64>() / count)
                .collect();
            let rank = spectra.iter().map(|s| effective_rank(s) as f64).sum::<f64>() / count;
            sweep.rows.push(SweepRow {
                theta: cfg.theta(),
                repeat: None,
                sigma: mean,
                effective_rank: rank,
            });
        }
    }
    Ok(sweep)
}

/// Consistency of a logged record: `L_theta - L` against `R`, relative.
pub fn record_consistency(rec: &TrajectoryRecord) -> f64 {
    let lhs = rec.l_theta_closed - rec.l;
    (lhs - rec.r).abs() / rec.r.abs().max(rec.l_theta_closed.abs()).max(1.0)
}
