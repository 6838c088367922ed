//! Command-line front end: chain files, subcommands and exit codes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::chain::{validate_chain, BallSet, ChainSpec, Dist, DistRole, Kernel, MetricSpace, Violation};
use crate::divergence::ModelKind;
use crate::error::Error;
use crate::montecarlo::{compare_rates, plot_csv, simulate_paths, RateEstimate, SimPlan, Verdict};
use crate::rate::{sharpness_check, tail_rate, RateReport, NONVACUOUS_TOL};
use crate::report::ReportFile;
use crate::set_chain::{check_conditions, envelope, robust_functional_bound, stationary, Envelope};
use crate::transport::{w1, W1};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONDITION: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_UNUSABLE: i32 = 5;

/// Overrides `--threads` when set.
pub const THREADS_ENV: &str = "ROBUST_LDP_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] Error),
}

impl CliError {
    fn input(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Input {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(Error::NotConverged(_) | Error::Lp(_)) => EXIT_NOT_CONVERGED,
            _ => EXIT_INPUT,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "robust-ldp", version, about = "Large deviations for Markov chains under Wasserstein model uncertainty")]
pub struct Cli {
    /// Worker threads for simulation and envelopes (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Omit the timestamp so repeated runs give identical output.
    #[arg(long, global = true)]
    pub reproducible: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the support and invariance conditions on the kernel.
    Check {
        #[arg(long)]
        chain: PathBuf,
        /// Search bound for the k-step supports (default n² + n).
        #[arg(long)]
        max_exponent: Option<usize>,
    },
    /// Worst-case exponential rate of the empirical measure entering a W1 ball.
    Rate {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum, default_value_t = ModelArg::RobustEntropy)]
        model: ModelArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-state range of the invariant measures of the robust chain.
    Envelope {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelArg::BallIndicator)]
        model: ModelArg,
        /// Maximise this linear functional instead, e.g. `0,0,1`.
        #[arg(long)]
        weights: Option<String>,
    },
    /// Estimate the decay rate by simulation and compare with the analytic rate.
    Simulate {
        #[command(flatten)]
        target: Target,
        /// Simulate under the worst-case kernel instead of the nominal one.
        #[arg(long)]
        worst_case: bool,
        #[arg(long, value_enum, default_value_t = ModelArg::RobustEntropy)]
        model: ModelArg,
        /// `A..B:S` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "40..160:20")]
        lengths: String,
        #[arg(long, default_value_t = SimPlan::DEFAULT_PATHS)]
        paths: usize,
        #[arg(long, default_value_t = SimPlan::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        rel_tol: f64,
        /// Write `n,hits,p_hat,ln_p_hat` rows here.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// First Wasserstein distance between two laws on the chain's metric.
    Wasserstein {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        mu: String,
        #[arg(long)]
        nu: String,
    },
}

#[derive(Debug, Args)]
pub struct Target {
    #[arg(long)]
    pub chain: PathBuf,
    /// Comma-separated probabilities or a state name (Dirac mass).
    #[arg(long)]
    pub center: String,
    #[arg(long)]
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Entropy,
    RobustEntropy,
    RobustEntropyAc,
    BallIndicator,
    BallIndicatorAc,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Entropy => ModelKind::Entropy,
            ModelArg::RobustEntropy => ModelKind::RobustEntropy,
            ModelArg::RobustEntropyAc => ModelKind::RobustEntropyAC,
            ModelArg::BallIndicator => ModelKind::BallIndicator,
            ModelArg::BallIndicatorAc => ModelKind::BallIndicatorAC,
        }
    }
}

/// On-disk chain description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpecFile {
    pub states: Vec<String>,
    pub metric: MetricField,
    pub pi0: Vec<f64>,
    pub kernel: Vec<Vec<f64>>,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricField {
    Named(NamedMetric),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedMetric {
    Discrete,
}

fn violation_path(v: &Violation) -> String {
    let role_path = |role: &DistRole| match role {
        DistRole::Pi0 => "pi0".to_string(),
        DistRole::KernelRow(x) => format!("kernel[{x}]"),
    };
    match v {
        Violation::Dimension { what, .. } => what.split(' ').next().unwrap_or("").to_string(),
        Violation::InvalidDistance { i, j, .. }
        | Violation::ZeroDistance { i, j }
        | Violation::Asymmetric { i, j, .. } => format!("metric[{i}][{j}]"),
        Violation::NonzeroDiagonal { i, .. } => format!("metric[{i}][{i}]"),
        Violation::Triangle { i, k, .. } => format!("metric[{i}][{k}]"),
        Violation::NegativeMass { role, index, .. } => format!("{}[{index}]", role_path(role)),
        Violation::MassSum { role, .. } => role_path(role),
        Violation::InvalidRadius { .. } => "r".to_string(),
    }
}

impl ChainSpecFile {
    /// Validates the file contents; errors carry the JSON path of the first problem.
    pub fn into_spec(self) -> CliResult<ChainSpec> {
        let n = self.states.len();
        if n == 0 {
            return Err(CliError::input("states", "at least one state is required"));
        }
        for (i, s) in self.states.iter().enumerate() {
            if self.states[..i].contains(s) {
                return Err(CliError::input(format!("states[{i}]"), format!("duplicate state name {s:?}")));
            }
        }
        let check_len = |path: String, found: usize| {
            if found == n {
                Ok(())
            } else {
                Err(CliError::input(path, format!("expected {n} entries, found {found}")))
            }
        };
        let space = match self.metric {
            MetricField::Named(NamedMetric::Discrete) => MetricSpace::discrete_labeled(self.states.clone()),
            MetricField::Matrix(rows) => {
                check_len("metric".into(), rows.len())?;
                for (i, row) in rows.iter().enumerate() {
                    check_len(format!("metric[{i}]"), row.len())?;
                }
                MetricSpace::from_raw(self.states.clone(), rows)
            }
        };
        check_len("pi0".into(), self.pi0.len())?;
        check_len("kernel".into(), self.kernel.len())?;
        for (x, row) in self.kernel.iter().enumerate() {
            check_len(format!("kernel[{x}]"), row.len())?;
        }
        let raw = ChainSpec {
            space,
            pi0: Dist::from_raw(self.pi0),
            kernel: Kernel::from_raw(self.kernel),
            radius: self.r,
        };
        if let Some(v) = validate_chain(&raw).first() {
            return Err(CliError::input(violation_path(v), v.to_string()));
        }
        let ChainSpec {
            space,
            pi0,
            kernel,
            radius,
        } = raw;
        Ok(ChainSpec::new(space, pi0, kernel, radius)?)
    }
}

/// Parses a chain file from JSON text.
pub fn parse_chain(text: &str) -> CliResult<ChainSpec> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ChainSpecFile = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::input(e.path().to_string(), e.inner().to_string()))?;
    file.into_spec()
}

pub fn load_chain(path: &Path) -> CliResult<ChainSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_chain(&text)
}

/// A state name (Dirac mass) or comma-separated probabilities.
pub fn parse_dist(spec: &ChainSpec, arg: &str, flag: &str) -> CliResult<Dist> {
    let n = spec.n();
    if let Some(i) = spec.space.index_of(arg.trim()) {
        return Ok(Dist::dirac(n, i));
    }
    let values = parse_numbers(arg).map_err(|m| CliError::input(flag, m))?;
    if values.len() != n {
        return Err(CliError::input(
            flag,
            format!("expected a state name or {n} probabilities, found {} values", values.len()),
        ));
    }
    Dist::new(values).map_err(|e| CliError::input(flag, e.to_string()))
}

fn parse_numbers(arg: &str) -> std::result::Result<Vec<f64>, String> {
    arg.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// `A..B:S` with `B` inclusive, or a comma-separated list.
pub fn parse_lengths(arg: &str) -> CliResult<Vec<usize>> {
    let bad = |m: String| CliError::input("--lengths", m);
    if let Some((range, step)) = arg.split_once(':') {
        let (a, b) = range
            .split_once("..")
            .ok_or_else(|| bad(format!("expected A..B:S, got {arg:?}")))?;
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let (a, b, s) = (parse(a)?, parse(b)?, parse(step)?);
        if s == 0 || a > b {
            return Err(bad(format!("empty or invalid range {arg:?}")));
        }
        return Ok((a..=b).step_by(s).collect());
    }
    arg.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}"))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateOutput {
    pub model: ModelKind,
    pub radius: f64,
    pub center: Dist,
    pub kappa: f64,
    pub rate: RateReport,
    pub nonvacuous: bool,
    pub sharp: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeOutput {
    pub model: ModelKind,
    pub radius: f64,
    pub envelope: Envelope,
    /// Envelope under the other indicator model (with or without the support restriction).
    pub companion_model: ModelKind,
    pub companion: Envelope,
    /// Largest coordinate gap between the two envelopes is at most 1e-9.
    pub models_agree: bool,
    pub stationary: Dist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalOutput {
    pub model: ModelKind,
    pub radius: f64,
    pub weights: Vec<f64>,
    pub max: f64,
    pub argmax: Dist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub worst_case: bool,
    pub seed: u64,
    pub play_kernel: Kernel,
    pub analytic_rate: f64,
    pub estimate: RateEstimate,
    pub verdict: Verdict,
}

struct Output {
    buf: Vec<u8>,
    reproducible: bool,
}

impl Output {
    fn emit<T: Serialize>(&mut self, kind: &str, report: T, file: Option<&Path>) -> CliResult<()> {
        let json = ReportFile::new(kind, report, self.reproducible)
            .to_json()
            .expect("reports serialise");
        if let Some(path) = file {
            write_file(path, &(json.clone() + "\n"))?;
        }
        self.buf.extend_from_slice(json.as_bytes());
        self.buf.push(b'\n');
        Ok(())
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn rate_model(m: ModelArg) -> CliResult<ModelKind> {
    let kind = ModelKind::from(m);
    if kind.is_indicator() {
        return Err(CliError::input("--model", "rates need an entropy model"));
    }
    Ok(kind)
}

fn ball(spec: &ChainSpec, t: &Target) -> CliResult<BallSet> {
    let center = parse_dist(spec, &t.center, "--center")?;
    BallSet::new(center, t.kappa).map_err(|e| CliError::input("--kappa", e.to_string()))
}

fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return v
            .trim()
            .parse::<usize>()
            .map_err(|e| CliError::input(THREADS_ENV, format!("{v:?}: {e}")));
    }
    Ok(flag.unwrap_or(0))
}

fn execute(cli: Cli, out: &mut Output) -> CliResult<i32> {
    match cli.command {
        Command::Check { chain, max_exponent } => {
            let spec = load_chain(&chain)?;
            let n = spec.n();
            let report = check_conditions(&spec, max_exponent.unwrap_or(n * n + n))?;
            let code = if report.m1_holds && report.m2_holds {
                EXIT_OK
            } else {
                EXIT_CONDITION
            };
            out.emit("conditions", report, None)?;
            Ok(code)
        }
        Command::Rate { target, model, out: file } => {
            let spec = load_chain(&target.chain)?;
            let kind = rate_model(model)?;
            let ball = ball(&spec, &target)?;
            let rate = tail_rate(&spec, &ball, kind)?;
            let converged = rate.converged;
            let output = RateOutput {
                model: kind,
                radius: spec.radius,
                center: ball.center,
                kappa: ball.kappa,
                nonvacuous: rate.value > NONVACUOUS_TOL,
                sharp: sharpness_check(&spec, &rate),
                rate,
            };
            out.emit("rate", output, file.as_deref())?;
            Ok(if converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Command::Envelope { chain, model, weights } => {
            let spec = load_chain(&chain)?;
            let kind = ModelKind::from(model);
            if !kind.is_indicator() {
                return Err(CliError::input("--model", "envelopes need an indicator model"));
            }
            if let Some(w) = weights {
                let weights = parse_numbers(&w).map_err(|m| CliError::input("--weights", m))?;
                if weights.len() != spec.n() {
                    return Err(CliError::input(
                        "--weights",
                        format!("expected {} values, found {}", spec.n(), weights.len()),
                    ));
                }
                let (max, argmax) = robust_functional_bound(&spec, kind, &weights)?;
                let output = FunctionalOutput {
                    model: kind,
                    radius: spec.radius,
                    weights,
                    max,
                    argmax,
                };
                out.emit("functional_bound", output, None)?;
            } else {
                let env = envelope(&spec, kind)?;
                let other = if kind.is_absolutely_continuous() {
                    ModelKind::BallIndicator
                } else {
                    ModelKind::BallIndicatorAC
                };
                let companion = envelope(&spec, other)?;
                let gap = env
                    .lo
                    .iter()
                    .zip(&companion.lo)
                    .chain(env.hi.iter().zip(&companion.hi))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let output = EnvelopeOutput {
                    model: kind,
                    radius: spec.radius,
                    envelope: env,
                    companion_model: other,
                    companion,
                    models_agree: gap <= 1e-9,
                    stationary: stationary(&spec.kernel).0,
                };
                out.emit("envelope", output, None)?;
            }
            Ok(EXIT_OK)
        }
        Command::Simulate {
            target,
            worst_case,
            model,
            lengths,
            paths,
            seed,
            rel_tol,
            plot,
        } => {
            let spec = load_chain(&target.chain)?;
            let kind = rate_model(model)?;
            let ball = ball(&spec, &target)?;
            let lengths = parse_lengths(&lengths)?;
            let (analytic, play_kernel) = if worst_case {
                let rep = tail_rate(&spec, &ball, kind)?;
                if !rep.converged {
                    return Err(Error::NotConverged("worst-case rate did not converge".into()).into());
                }
                (rep.value, rep.pi_hat)
            } else {
                let rep = tail_rate(&spec.with_radius(0.0), &ball, kind)?;
                if !rep.converged {
                    return Err(Error::NotConverged("nominal rate did not converge".into()).into());
                }
                (rep.value, spec.kernel.clone())
            };
            let plan = SimPlan {
                spec,
                play_kernel: play_kernel.clone(),
                ball,
                lengths,
                paths_per_length: paths,
                seed,
            };
            plan.validate().map_err(|e| CliError::input("--lengths/--paths", e.to_string()))?;
            let estimate = simulate_paths(&plan)?;
            if let Some(path) = &plot {
                write_file(path, &plot_csv(&estimate))?;
            }
            let verdict = compare_rates(analytic, &estimate, rel_tol);
            let code = if estimate.usable { EXIT_OK } else { EXIT_UNUSABLE };
            out.emit(
                "simulation",
                SimulateOutput {
                    worst_case,
                    seed,
                    play_kernel,
                    analytic_rate: analytic,
                    estimate,
                    verdict,
                },
                None,
            )?;
            Ok(code)
        }
        Command::Wasserstein { chain, mu, nu } => {
            let spec = load_chain(&chain)?;
            let mu = parse_dist(&spec, &mu, "--mu")?;
            let nu = parse_dist(&spec, &nu, "--nu")?;
            let result: W1 = w1(&spec.space, &mu, &nu)?;
            out.emit("wasserstein", result, None)?;
            Ok(EXIT_OK)
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: cannot start worker pool: {e}");
            return EXIT_INPUT;
        }
    };
    let mut out = Output {
        buf: Vec::new(),
        reproducible: cli.reproducible,
    };
    let result = pool.install(|| execute(cli, &mut out));
    if let Err(e) = stdout.write_all(&out.buf).and_then(|_| stdout.flush()) {
        let _ = writeln!(stderr, "error: cannot write output: {e}");
        return EXIT_INPUT;
    }
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
