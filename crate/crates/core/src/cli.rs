//! Command implementations behind the `dsgd-lab` binary.
//!
//! Every command reads one TOML config, writes its CSV files plus a
//! `<command>.meta.json` sidecar into the output directory and reports failures
//! through [`CliError`], whose [`CliError::exit_code`] is 2 for configuration
//! problems and 3 for runtime failures.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::warn;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bounds::{
    bound_convex, bound_data_dependent, bound_nonconvex, bound_strongly, bound_worst_convex,
    bound_worst_convex_spectral, bound_worst_nonconvex, bound_worst_strongly, check_stepsize,
    compute_init_gap, empirical_sigma, BoundInputs, BoundReport,
};
use crate::config::ExperimentConfig;
use crate::engine::{run, DsgdConfig, Stepsize};
use crate::losses::Regime;
use crate::stability::{estimate_generalization, estimate_stability, MonteCarlo};
use crate::topology::{GraphKind, MixingMatrix};
use crate::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn config(e: Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Missing constants are configuration problems wherever they surface.
    fn runtime(e: Error) -> Self {
        match e {
            Error::MissingConstant(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dsgd-lab", version, about = "Decentralized SGD stability and generalization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Spectral and structural diagnostics for every configured graph.
    Topology(CommonArgs),
    /// Closed-form bounds and stepsize admissibility.
    Bounds(CommonArgs),
    /// Monte Carlo stability estimates.
    Stability(CommonArgs),
    /// Train/test generalization-gap experiment.
    Genexp(CommonArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `OUTPUT_DIR` and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Topology(a) => ("topology", a),
            Command::Bounds(a) => ("bounds", a),
            Command::Stability(a) => ("stability", a),
            Command::Genexp(a) => ("genexp", a),
        }
    }
}

/// Loads the config, sets up the thread pool and runs the command. Returns the
/// files written.
pub fn execute(command: &Command) -> CliResult<Vec<PathBuf>> {
    let (name, args) = command.parts();
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let config = ExperimentConfig::parse(&text).map_err(CliError::config)?;
    let out_dir = match (&args.out, std::env::var_os("OUTPUT_DIR")) {
        (Some(out), _) => out.clone(),
        (None, Some(env)) => PathBuf::from(env),
        (None, None) => config.output_dir(&args.config),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = args.threads {
        if k == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(k);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::create_dir_all(&out_dir)?;

    let files = pool.install(|| match command {
        Command::Topology(_) => cmd_topology(&config, &out_dir),
        Command::Bounds(_) => cmd_bounds(&config, &out_dir),
        Command::Stability(_) => cmd_stability(&config, &out_dir),
        Command::Genexp(_) => cmd_genexp(&config, &out_dir),
    })?;
    write_metadata(name, &text, &config, &files, &out_dir)?;
    Ok(files)
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    data_seed: u64,
    algo_seed: u64,
    graphs: Vec<&'static str>,
    files: Vec<String>,
}

fn write_metadata(
    command: &str,
    text: &str,
    config: &ExperimentConfig,
    files: &[PathBuf],
    out_dir: &Path,
) -> CliResult<()> {
    let digest = Sha256::digest(text.as_bytes());
    let meta = Metadata {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        data_seed: config.data.seed,
        algo_seed: config.algo.seed,
        graphs: config
            .graphs()
            .map_err(CliError::config)?
            .iter()
            .map(GraphKind::name)
            .collect(),
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    json.push('\n');
    fs::write(out_dir.join(format!("{command}.meta.json")), json)?;
    Ok(())
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn graphs(config: &ExperimentConfig) -> CliResult<Vec<(GraphKind, MixingMatrix)>> {
    config
        .graphs()
        .map_err(CliError::config)?
        .into_iter()
        .map(|g| Ok((g, g.build(config.graph.m).map_err(CliError::config)?)))
        .collect()
}

pub fn cmd_topology(config: &ExperimentConfig, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let path = out_dir.join("topology.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "graph",
        "m",
        "spectral_gap",
        "max_norm",
        "connectivity_sum",
        "min_diag",
        "lambda_min",
        "cw_limit",
        "cw_converged",
    ])?;
    for (kind, matrix) in graphs(config)? {
        let d = matrix.default_diagnostics().map_err(CliError::runtime)?;
        if !d.cw_converged {
            warn!("{kind}: C_W did not converge; cw_limit is a partial sum");
        }
        w.write_record([
            kind.name().to_string(),
            d.m.to_string(),
            num(d.spectral_gap),
            num(d.max_norm),
            num(d.connectivity_sum),
            num(d.min_diag),
            num(d.smallest_eigenvalue),
            num(d.cw_limit),
            d.cw_converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![path])
}

fn warn_stepsize(kind: GraphKind, inputs: &BoundInputs) {
    for msg in check_stepsize(inputs).warnings {
        warn!("{kind}: {msg}");
    }
}

/// Bound inputs for one graph: overrides from `[bounds]`, otherwise constants
/// of the first Monte Carlo training set, `sigma` from a recorded run on it and
/// the initialization gap from its local minimizers.
fn bound_inputs(config: &ExperimentConfig, matrix: &MixingMatrix, need_data_terms: bool) -> CliResult<BoundInputs> {
    let loss = config.loss_model().map_err(CliError::config)?;
    let algo = config.dsgd().map_err(CliError::config)?;
    let overrides = &config.bounds;
    let mc = MonteCarlo {
        spec: config.mixture().map_err(CliError::config)?,
        n: config.data.n,
        algo: algo.clone(),
        num_mc: 1,
        data_seed: config.data.seed,
    };
    let data = mc.dataset(matrix.size(), 0).map_err(CliError::runtime)?;
    let observed = loss.constants(&data.flatten());
    let mut sigma = overrides.sigma.unwrap_or(0.0);
    let mut init_gap = overrides.init_gap;
    if need_data_terms {
        if overrides.sigma.is_none() {
            let traj_config = DsgdConfig {
                record_trajectory: true,
                ..mc.config(0)
            };
            let traj = run(matrix, &loss, &data, &traj_config)
                .map_err(CliError::runtime)?
                .trajectory
                .expect("trajectory recorded");
            sigma = empirical_sigma(&loss, &data, &traj);
        }
        if init_gap.is_none() {
            let theta0 = algo.initial(data.dim()).map_err(CliError::config)?;
            let gap = compute_init_gap(&loss, &data, &theta0).map_err(CliError::runtime)?;
            if gap.clipped {
                warn!("a local minimizer left the projection ball and was clipped");
            }
            if !gap.converged {
                warn!("local minimizer search did not converge; init_gap is an under-estimate");
            }
            init_gap = Some(gap.value);
        }
    }
    Ok(BoundInputs {
        lipschitz: overrides.lipschitz.unwrap_or(observed.lipschitz),
        smoothness: overrides.beta.unwrap_or(observed.smoothness),
        strong_convexity: loss.strong_convexity(),
        sigma,
        decay_c: overrides.c,
        stepsize: algo.stepsize,
        iterations: algo.iterations,
        m: matrix.size(),
        n: config.data.n,
        topology: matrix.default_diagnostics().map_err(CliError::runtime)?,
        init_gap,
    })
}

pub fn cmd_bounds(config: &ExperimentConfig, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let regime = config.loss_model().map_err(CliError::config)?.regime();
    let constant = matches!(config.stepsize().map_err(CliError::config)?, Stepsize::Constant(_));
    let mut rows: Vec<(GraphKind, BoundReport)> = Vec::new();
    for (kind, matrix) in graphs(config)? {
        let convex = regime != Regime::NonConvex;
        let inputs = bound_inputs(config, &matrix, convex && constant)?;
        inputs.validate().map_err(CliError::config)?;
        warn_stepsize(kind, &inputs);
        let mut reports = Vec::new();
        match regime {
            Regime::NonConvex => {
                reports.push(bound_nonconvex(&inputs).map_err(CliError::runtime)?);
                reports.push(bound_worst_nonconvex(&inputs).map_err(CliError::runtime)?);
            }
            Regime::Convex | Regime::StronglyConvex => {
                reports.push(bound_convex(&inputs));
                if regime == Regime::StronglyConvex {
                    reports.push(bound_strongly(&inputs).map_err(CliError::runtime)?);
                }
                reports.push(bound_worst_convex(&inputs));
                reports.push(bound_worst_convex_spectral(&inputs));
                if regime == Regime::StronglyConvex {
                    reports.push(bound_worst_strongly(&inputs).map_err(CliError::runtime)?);
                }
                if constant {
                    match bound_data_dependent(&inputs) {
                        Ok(r) => reports.push(r),
                        Err(e @ Error::CwNotConverged { .. }) => warn!("{kind}: data-dependent bound skipped: {e}"),
                        Err(e) => return Err(CliError::runtime(e)),
                    }
                }
            }
        }
        rows.extend(reports.into_iter().map(|r| (kind, r)));
    }

    let path = out_dir.join("bounds.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "bound_name",
        "value",
        "admissible",
        "graph",
        "L",
        "beta",
        "mu",
        "sigma",
        "c",
        "eta_max",
        "eta_sum",
        "T",
        "m",
        "n",
        "spectral_gap",
        "connectivity_sum",
        "max_norm",
        "min_diag",
        "cw_limit",
        "init_gap",
    ])?;
    for (kind, r) in &rows {
        let i = &r.inputs;
        let c = i.decay_c.or(match i.stepsize {
            Stepsize::Decaying { c } => Some(c),
            Stepsize::Constant(_) => None,
        });
        w.write_record([
            r.name.to_string(),
            num(r.value),
            r.admissible.to_string(),
            kind.name().to_string(),
            num(i.lipschitz),
            num(i.smoothness),
            opt(i.strong_convexity),
            num(i.sigma),
            opt(c),
            num(i.stepsize.max(i.iterations)),
            num(i.stepsize.total(i.iterations)),
            i.iterations.to_string(),
            i.m.to_string(),
            i.n.to_string(),
            num(i.topology.spectral_gap),
            num(i.topology.connectivity_sum),
            num(i.topology.max_norm),
            num(i.topology.min_diag),
            num(i.topology.cw_limit),
            opt(i.init_gap),
        ])?;
    }
    w.flush()?;
    Ok(vec![path])
}

pub fn cmd_stability(config: &ExperimentConfig, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let loss = config.loss_model().map_err(CliError::config)?;
    let (mc, pairs, modes) = config.stability_setup().map_err(CliError::config)?;
    let path = out_dir.join("stability.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["graph", "mode", "epsilon_hat", "stderr", "num_pairs", "num_mc"])?;
    for (kind, matrix) in graphs(config)? {
        let estimates = estimate_stability(&matrix, &loss, &mc, &pairs, &modes).map_err(CliError::runtime)?;
        let observed = estimates[0].observed;
        let inputs = BoundInputs {
            lipschitz: config.bounds.lipschitz.unwrap_or(observed.lipschitz),
            smoothness: config.bounds.beta.unwrap_or(observed.smoothness),
            strong_convexity: loss.strong_convexity(),
            sigma: 0.0,
            decay_c: config.bounds.c,
            stepsize: mc.algo.stepsize,
            iterations: mc.algo.iterations,
            m: matrix.size(),
            n: mc.n,
            topology: matrix.default_diagnostics().map_err(CliError::runtime)?,
            init_gap: None,
        };
        if inputs.smoothness > 0.0 {
            warn_stepsize(kind, &inputs);
        }
        for e in estimates {
            w.write_record([
                kind.name().to_string(),
                e.mode.name().to_string(),
                num(e.epsilon_hat),
                num(e.std_error),
                e.num_pairs.to_string(),
                e.num_mc.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(vec![path])
}

pub fn cmd_genexp(config: &ExperimentConfig, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let loss = config.loss_model().map_err(CliError::config)?;
    let exp = config.genexp_setup().map_err(CliError::config)?;
    let raw_path = out_dir.join("genexp.csv");
    let summary_path = out_dir.join("genexp_summary.csv");
    let mut raw = csv_writer(&raw_path)?;
    let mut summary = csv_writer(&summary_path)?;
    raw.write_record(["graph", "rep", "run", "t", "gap_signed"])?;
    summary.write_record(["graph", "t", "abs_mean_gap", "stderr"])?;
    for (kind, matrix) in graphs(config)? {
        let g = estimate_generalization(&matrix, &loss, &exp).map_err(CliError::runtime)?;
        for trace in &g.traces {
            for (t, gap) in trace.gaps.iter().enumerate() {
                raw.write_record([
                    kind.name().to_string(),
                    trace.rep.to_string(),
                    trace.run.to_string(),
                    t.to_string(),
                    num(*gap),
                ])?;
            }
        }
        for (t, (v, se)) in g.per_iteration.iter().zip(&g.std_error).enumerate() {
            summary.write_record([kind.name().to_string(), t.to_string(), num(*v), num(*se)])?;
        }
    }
    raw.flush()?;
    summary.flush()?;
    Ok(vec![raw_path, summary_path])
}
