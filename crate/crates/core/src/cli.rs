//! Command-line driver. Machine-readable JSON goes to stdout, progress and
//! diagnostics to stderr. Exit codes: 0 ok, 1 verification or training
//! failure, 2 bad input, 3 capacity exceeded.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::network::{matrix_from_rows, Architecture, DropoutConfig, InputMoment, WeightStack};
use crate::optima::{equalized_rank1, gap_condition, solve_convex_envelope};
use crate::regularizer::{
    effective_nu, exact_dropout_regularizer_with_budget, explicit_regularizer, regularizer_report,
    MASK_UNIT_BUDGET,
};
use crate::training::{
    spectrum_sweep, train, train_repeats, write_trajectories_csv, DataModel, MaskMode, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CAPACITY: i32 = 3;

/// Relative disagreement tolerated by `verify`.
const VERIFY_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "droplin", version, about = "Dropout regularizer calculus for deep linear networks")]
pub struct Cli {
    /// Worker threads for parallel library calls (default: all cores).
    #[arg(long, global = true, env = "DROPLIN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Effective regularization parameter of an architecture.
    Nu {
        /// `{"widths": [...]}` or `{"hidden_widths": [...]}`, as a path or inline JSON.
        arch: String,
        #[arg(long)]
        theta: f64,
    },
    /// Closed-form regularizer, sub-regularizers, lower bounds and gaps of a weight file.
    Reg {
        weights: PathBuf,
        #[arg(long)]
        theta: f64,
        /// Input second moment `{"C": [[...]]}`; identity when omitted.
        #[arg(long)]
        moment: Option<PathBuf>,
    },
    /// Compares the closed form against exhaustive mask enumeration.
    Verify {
        weights: PathBuf,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        moment: Option<PathBuf>,
        /// Largest number of hidden units to enumerate masks over.
        #[arg(long, default_value_t = MASK_UNIT_BUDGET)]
        budget: usize,
        /// Perturbs the closed-form value so the comparison must fail.
        #[arg(long, hide = true)]
        corrupt_closed_form: bool,
    },
    /// Global optimum of the convex envelope for `{"Cyx", "C", "widths", "theta"}`.
    Solve {
        problem: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Trains the first repeat of an experiment and writes its trajectory.
    Train(ExperimentArgs),
    /// Trains every repeat at every sweep theta and writes final spectra.
    Spectrum(ExperimentArgs),
    /// Trains every repeat and writes all gap trajectories.
    Gap(ExperimentArgs),
    /// Writes an equalized factorization of `u v^T`.
    MakeEqualized {
        /// Output vector, inline JSON array or path.
        #[arg(long)]
        u: String,
        /// Input vector, inline JSON array or path.
        #[arg(long)]
        v: String,
        /// Full widths `d_0,...,d_{k+1}`.
        #[arg(long, value_delimiter = ',', conflicts_with = "hidden", required_unless_present = "hidden")]
        widths: Option<Vec<usize>>,
        /// Hidden widths only; the outer widths come from `u` and `v`.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        /// Weight file to write; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config JSON.
    pub config: PathBuf,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// One experiment as a single JSON document. Omitted fields take the desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub widths: Vec<usize>,
    pub theta: f64,
    /// Retain probabilities for `spectrum`.
    pub thetas: Vec<f64>,
    pub planted_rank: usize,
    pub noise_std: f64,
    pub model_seed: u64,
    pub minibatch: usize,
    pub lr: Option<f64>,
    pub steps: usize,
    pub log_stride: usize,
    pub seed: u64,
    pub repeats: usize,
    pub init_scale: f64,
    pub mask_mode: MaskMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            widths: vec![5, 5, 5, 5, 5, 1],
            theta: 0.5,
            thetas: vec![0.9, 0.7, 0.5, 0.3],
            planted_rank: 1,
            noise_std: 0.01,
            model_seed: 0,
            minibatch: tc.minibatch,
            lr: tc.lr,
            steps: tc.steps,
            log_stride: tc.log_stride,
            seed: tc.seed,
            repeats: tc.repeats,
            init_scale: tc.init_scale,
            mask_mode: tc.mask_mode,
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            minibatch: self.minibatch,
            lr: self.lr,
            steps: self.steps,
            log_stride: self.log_stride,
            seed: self.seed,
            repeats: self.repeats,
            init_scale: self.init_scale,
            mask_mode: self.mask_mode,
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.widths.clone())
    }

    pub fn model(&self) -> Result<DataModel> {
        let arch = self.architecture()?;
        DataModel::planted(
            arch.output_dim(),
            arch.input_dim(),
            self.planted_rank,
            self.noise_std,
            self.model_seed,
        )
    }

    fn dropout(&self) -> Result<DropoutConfig> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "training retain probability must lie in (0, 1), got {}",
                self.theta
            )));
        }
        DropoutConfig::new(self.theta)
    }
}

/// What a subcommand hands back: JSON for stdout and an exit code.
#[derive(Debug)]
pub struct Outcome {
    pub json: Value,
    pub code: i32,
}

impl Outcome {
    fn ok(json: Value) -> Self {
        Self { json, code: EXIT_OK }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::Csv(_) | Error::Io(_) => {
            EXIT_INPUT
        }
        Error::Capacity(_) => EXIT_CAPACITY,
        Error::Contract(_)
        | Error::NoConvergence { .. }
        | Error::Undefined(_)
        | Error::Divergence { .. } => EXIT_FAILURE,
    }
}

/// Parses `args`, runs the subcommand, prints its JSON and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool already configured: {e}");
        }
    }
    match run(&cli.command) {
        Ok(out) => {
            println!("{}", out.json);
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Nu { arch, theta } => cmd_nu(arch, *theta),
        Command::Reg { weights, theta, moment } => cmd_reg(weights, *theta, moment.as_deref()),
        Command::Verify {
            weights,
            theta,
            moment,
            budget,
            corrupt_closed_form,
        } => cmd_verify(weights, *theta, moment.as_deref(), *budget, *corrupt_closed_form),
        Command::Solve { problem, theta } => cmd_solve(problem, *theta),
        Command::Train(args) => cmd_train(args),
        Command::Spectrum(args) => cmd_spectrum(args),
        Command::Gap(args) => cmd_gap(args),
        Command::MakeEqualized {
            u,
            v,
            widths,
            hidden,
            out,
        } => cmd_make_equalized(u, v, widths.as_deref(), hidden.as_deref(), out.as_deref()),
    }
}

/// Inline JSON when the argument starts with `{` or `[`, stdin for `-`, a file path otherwise.
fn json_source(arg: &str) -> Result<String> {
    let trimmed = arg.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        return Ok(arg.to_string());
    }
    if arg == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    Ok(std::fs::read_to_string(arg)?)
}

fn read_moment(path: Option<&Path>, dim: usize) -> Result<InputMoment> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct MomentFile {
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
    }
    match path {
        None => Ok(InputMoment::identity(dim)),
        Some(p) => {
            let file: MomentFile = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            InputMoment::new(matrix_from_rows(&file.c)?)
        }
    }
}

fn cmd_nu(arch: &str, theta: f64) -> Result<Outcome> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ArchFile {
        widths: Option<Vec<usize>>,
        hidden_widths: Option<Vec<usize>>,
    }
    let file: ArchFile = serde_json::from_str(&json_source(arch)?)?;
    let arch = match (file.widths, file.hidden_widths) {
        (Some(w), None) => Architecture::new(w)?,
        (None, Some(h)) => Architecture::new([vec![1], h, vec![1]].concat())?,
        _ => {
            return Err(Error::InvalidArgument(
                "expected exactly one of \"widths\" or \"hidden_widths\"".into(),
            ))
        }
    };
    let cfg = DropoutConfig::new(theta)?;
    Ok(Outcome::ok(json!({ "nu": effective_nu(&arch, &cfg) })))
}

fn cmd_reg(weights: &Path, theta: f64, moment: Option<&Path>) -> Result<Outcome> {
    let ws = WeightStack::read(weights)?;
    let cfg = DropoutConfig::new(theta)?;
    let m = read_moment(moment, ws.architecture().input_dim())?;
    let report = regularizer_report(&ws, &cfg, &m)?;
    Ok(Outcome::ok(serde_json::to_value(report)?))
}

fn cmd_verify(
    weights: &Path,
    theta: f64,
    moment: Option<&Path>,
    budget: usize,
    corrupt: bool,
) -> Result<Outcome> {
    let ws = WeightStack::read(weights)?;
    let cfg = DropoutConfig::new(theta)?;
    let m = read_moment(moment, ws.architecture().input_dim())?;
    let enumerated = exact_dropout_regularizer_with_budget(&ws, &cfg, &m, budget)?;
    let mut closed = explicit_regularizer(&ws, &cfg, &m)?;
    if corrupt {
        closed += 1e-3 * closed.abs().max(1.0);
    }
    let abs_diff = (closed - enumerated).abs();
    let scale = closed.abs().max(enumerated.abs());
    let rel_diff = if scale > 0.0 { abs_diff / scale } else { 0.0 };
    let agree = rel_diff <= VERIFY_TOL;
    if !agree {
        eprintln!("closed form and enumeration disagree: relative difference {rel_diff:e}");
    }
    Ok(Outcome {
        json: json!({
            "closed": closed,
            "enumerated": enumerated,
            "abs_diff": abs_diff,
            "rel_diff": rel_diff,
            "agree": agree,
        }),
        code: if agree { EXIT_OK } else { EXIT_FAILURE },
    })
}

fn cmd_solve(problem: &Path, theta: Option<f64>) -> Result<Outcome> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ProblemFile {
        #[serde(rename = "Cyx")]
        cyx: Vec<Vec<f64>>,
        #[serde(rename = "C")]
        c: Option<Vec<Vec<f64>>>,
        widths: Vec<usize>,
        theta: Option<f64>,
    }
    let file: ProblemFile = serde_json::from_str(&std::fs::read_to_string(problem)?)?;
    let arch = Architecture::new(file.widths)?;
    let theta = theta
        .or(file.theta)
        .ok_or_else(|| Error::InvalidArgument("theta missing from problem and command line".into()))?;
    let cfg = DropoutConfig::new(theta)?;
    let cyx = matrix_from_rows(&file.cyx)?;
    if cyx.dim() != (arch.output_dim(), arch.input_dim()) {
        return Err(Error::Shape(format!(
            "Cyx is {}x{} but widths map {} -> {}",
            cyx.nrows(),
            cyx.ncols(),
            arch.input_dim(),
            arch.output_dim()
        )));
    }
    let m = match file.c {
        Some(rows) => InputMoment::new(matrix_from_rows(&rows)?)?,
        None => InputMoment::identity(arch.input_dim()),
    };
    let nu = effective_nu(&arch, &cfg);
    let solution = solve_convex_envelope(&cyx, &m, nu, arch.max_rank())?;
    let gap = if nu > 0.0 { Some(gap_condition(&cyx, &m, nu)?) } else { None };
    let mut out = serde_json::to_value(solution)?;
    out["gap_condition"] = serde_json::to_value(gap)?;
    Ok(Outcome::ok(out))
}

fn load_experiment(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&args.config)?)?;
    if let Some(theta) = args.theta {
        cfg.theta = theta;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_out(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

fn cmd_train(args: &ExperimentArgs) -> Result<Outcome> {
    let exp = load_experiment(args)?;
    let (arch, model, cfg, tc) = (exp.architecture()?, exp.model()?, exp.dropout()?, exp.train_config());
    eprintln!("training {:?} at theta {} for {} steps", arch.widths(), cfg.theta(), tc.steps);
    match train(&arch, &model, &cfg, &tc) {
        Ok(outcome) => {
            let mut w = create_out(&args.out)?;
            outcome.trajectory.write_csv(&mut w)?;
            w.flush()?;
            let last = outcome.trajectory.last().expect("trajectory has the initial record");
            Ok(Outcome::ok(json!({
                "theta": cfg.theta(),
                "lr": outcome.lr,
                "steps": last.step,
                "L_theta_closed": last.l_theta_closed,
                "L": last.l,
                "R": last.r,
                "r_overall": last.overall_gap,
            })))
        }
        Err(Error::Divergence { step, partial }) => {
            eprintln!("training diverged at step {step}");
            if let Some(traj) = &partial {
                let mut w = create_out(&args.out)?;
                traj.write_csv(&mut w)?;
                w.flush()?;
            }
            Ok(Outcome {
                json: json!({ "theta": cfg.theta(), "diverged_at_step": step }),
                code: EXIT_FAILURE,
            })
        }
        Err(e) => Err(e),
    }
}

fn cmd_gap(args: &ExperimentArgs) -> Result<Outcome> {
    let exp = load_experiment(args)?;
    let (arch, model, cfg, tc) = (exp.architecture()?, exp.model()?, exp.dropout()?, exp.train_config());
    eprintln!(
        "training {} repeats of {:?} at theta {} for {} steps",
        tc.repeats,
        arch.widths(),
        cfg.theta(),
        tc.steps
    );
    let results = train_repeats(&arch, &model, &cfg, &tc);
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (repeat, result) in results.iter().enumerate() {
        match result {
            Ok(outcome) => runs.push((repeat, outcome)),
            Err(e) => {
                eprintln!("repeat {repeat}: {e}");
                failures.push(json!({ "repeat": repeat, "message": e.to_string() }));
            }
        }
    }
    let tables: Vec<_> = runs.iter().map(|(r, o)| (*r, &o.trajectory)).collect();
    let mut w = create_out(&args.out)?;
    write_trajectories_csv(&tables, &mut w)?;
    w.flush()?;

    let gaps_at = |pick: fn(&crate::training::TrainTrajectory) -> Option<f64>| {
        median(runs.iter().filter_map(|(_, o)| pick(&o.trajectory)).collect())
    };
    let code = if runs.is_empty() && tc.repeats > 0 { EXIT_FAILURE } else { EXIT_OK };
    Ok(Outcome {
        json: json!({
            "theta": cfg.theta(),
            "repeats": tc.repeats,
            "succeeded": runs.len(),
            "failures": failures,
            "lr": runs.iter().map(|(_, o)| o.lr).collect::<Vec<_>>(),
            "median_initial_r_overall": gaps_at(|t| t.records.first().and_then(|r| r.overall_gap)),
            "median_final_r_overall": gaps_at(|t| t.last().and_then(|r| r.overall_gap)),
            "median_final_L_theta_closed": median(
                runs.iter().filter_map(|(_, o)| o.trajectory.last()).map(|r| r.l_theta_closed).collect()
            ),
        }),
        code,
    })
}

fn cmd_spectrum(args: &ExperimentArgs) -> Result<Outcome> {
    let exp = load_experiment(args)?;
    let (arch, model, tc) = (exp.architecture()?, exp.model()?, exp.train_config());
    eprintln!(
        "sweeping theta over {:?} with {} repeats of {:?}",
        exp.thetas,
        tc.repeats,
        arch.widths()
    );
    let sweep = spectrum_sweep(&arch, &model, &exp.thetas, &tc)?;
    for f in &sweep.failures {
        eprintln!("theta {} repeat {}: {}", f.theta, f.repeat, f.message);
    }
    let mut w = create_out(&args.out)?;
    sweep.write_csv(&mut w)?;
    w.flush()?;
    let cells: Vec<Value> = sweep
        .averaged()
        .map(|row| json!({ "theta": row.theta, "effective_rank": row.effective_rank, "sigma": row.sigma }))
        .collect();
    let code = if cells.is_empty() && !exp.thetas.is_empty() && tc.repeats > 0 {
        EXIT_FAILURE
    } else {
        EXIT_OK
    };
    Ok(Outcome {
        json: json!({ "cells": cells, "failures": sweep.failures.len() }),
        code,
    })
}

fn cmd_make_equalized(
    u: &str,
    v: &str,
    widths: Option<&[usize]>,
    hidden: Option<&[usize]>,
    out: Option<&Path>,
) -> Result<Outcome> {
    let u: Vec<f64> = serde_json::from_str(&json_source(u)?)?;
    let v: Vec<f64> = serde_json::from_str(&json_source(v)?)?;
    let widths = match (widths, hidden) {
        (Some(w), _) => w.to_vec(),
        (None, Some(h)) => [&[v.len()], h, &[u.len()]].concat(),
        (None, None) => return Err(Error::InvalidArgument("either --widths or --hidden is required".into())),
    };
    let arch = Architecture::new(widths)?;
    let ws = equalized_rank1(&arch, &u, &v)?;
    match out {
        Some(path) => {
            ws.write(path)?;
            Ok(Outcome::ok(json!({ "out": path, "widths": arch.widths() })))
        }
        None => Ok(Outcome::ok(serde_json::from_str(&ws.to_json_string()?)?)),
    }
}
