//! `covshare`: fit a shared subspace across groups, sample projected
//! covariance posteriors, select ranks, compute goodness of fit, and run the
//! simulation experiments. All inputs and outputs are files; every command
//! is deterministic given its inputs, flags, and seed, and writes a
//! manifest with input digests for rerun verification.

mod io;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use covshare::em::{self, EmOptions};
use covshare::gibbs::{
    angle_logratio, hull_peel_region, run_chain, stein_estimator, write_chain_jsonl,
    write_chain_summary_csv, ChainConfig,
};
use covshare::model::{GroupDataset, SubspaceBasis};
use covshare::rank::{estimate_group_rank, estimate_shared_dimension, RankEstimate};
use covshare::sim::experiments::{AccuracyOptions, CoverageOptions, Table1Options};
use covshare::sim::{run_accuracy_vs_k, run_coverage, run_table1};

use manifest::RunManifest;

/// Command failure with the exit code taxonomy: 2 usage, 3 data validation,
/// 4 numerical failure.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<covshare::Error> for Failure {
    fn from(e: covshare::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "covshare",
    version,
    about = "Multi-group covariance estimation on a shared subspace"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the shared subspace by EM and write the basis, the
    /// marginal-likelihood trace, and per-group diagnostics.
    Fit(FitArgs),
    /// Sample per-group posterior chains on a fixed subspace; write chains,
    /// angle/log-ratio summaries, 95% regions, and Stein estimates.
    Gibbs(GibbsArgs),
    /// Estimate per-group spike ranks and the pooled shared dimension.
    Ranks(RanksArgs),
    /// Run a simulation experiment and write its report.
    Simulate(SimulateArgs),
    /// Compute the goodness-of-fit statistic for each group on a subspace.
    Gof(GofArgs),
}

#[derive(Args)]
struct InputOpts {
    /// Group CSV files, one per group (rows = observations).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Inputs are precomputed p x p scatter matrices instead of raw data.
    #[arg(long)]
    scatter: bool,
    /// Sample counts for --scatter inputs, comma-separated, one per file.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Subtract column means and reduce each group's recorded sample count
    /// by one.
    #[arg(long)]
    demean: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputOpts,
    /// Shared subspace dimension.
    #[arg(long)]
    s: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Relative convergence tolerance on the marginal log-likelihood.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GibbsArgs {
    #[command(flatten)]
    input: InputOpts,
    /// CSV file holding the p x s subspace basis (columns orthonormal to
    /// within 1e-6).
    #[arg(long)]
    subspace: PathBuf,
    /// Spike rank for every group.
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 1000)]
    burnin: usize,
    #[arg(long, default_value_t = 2)]
    thin: usize,
    #[arg(long, default_value_t = 1024)]
    omega_grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RanksArgs {
    #[command(flatten)]
    input: InputOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Experiment {
    Table1,
    Coverage,
    Accuracy,
}

#[derive(Args)]
struct SimulateArgs {
    /// Which experiment to run.
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// Number of replications (defaults per experiment).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GofArgs {
    #[command(flatten)]
    input: InputOpts,
    #[arg(long)]
    subspace: PathBuf,
    /// Per-group noise variances, comma-separated; the plug-in estimate at
    /// the supplied basis is used when omitted.
    #[arg(long, value_delimiter = ',')]
    sigma2: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(raw) = std::env::var("COVSHARE_THREADS") {
        let n: usize = raw.parse().map_err(|_| {
            Failure::Usage(format!("COVSHARE_THREADS must be a positive integer, got '{raw}'"))
        })?;
        if n == 0 {
            return Err(Failure::Usage("COVSHARE_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot configure worker pool: {e}")))?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Gibbs(args) => cmd_gibbs(args),
        Command::Ranks(args) => cmd_ranks(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Gof(args) => cmd_gof(args),
    });
    if let Err(f) = result {
        eprintln!("error: {}", f.message());
        std::process::exit(f.code());
    }
}

/// Load all group datasets according to the shared input options.
fn load_groups(opts: &InputOpts) -> Result<Vec<GroupDataset>, Failure> {
    if opts.scatter {
        if opts.demean {
            return Err(Failure::Usage(
                "--demean applies to raw data inputs, not --scatter matrices".into(),
            ));
        }
        if opts.n.len() != opts.inputs.len() {
            return Err(Failure::Usage(format!(
                "--scatter needs --n with one sample count per input ({} inputs, {} counts)",
                opts.inputs.len(),
                opts.n.len()
            )));
        }
    } else if !opts.n.is_empty() {
        return Err(Failure::Usage("--n is only meaningful with --scatter".into()));
    }

    let mut groups = Vec::with_capacity(opts.inputs.len());
    for (k, path) in opts.inputs.iter().enumerate() {
        let mut m = io::read_matrix_csv(path)?;
        let ds = if opts.scatter {
            GroupDataset::from_scatter(m, opts.n[k])
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        } else if opts.demean {
            if m.nrows() < 2 {
                return Err(Failure::Data(format!(
                    "{}: need at least 2 rows to demean",
                    path.display()
                )));
            }
            io::demean_columns(&mut m);
            let n = m.nrows() - 1;
            let scatter = m.transpose() * &m;
            GroupDataset::from_scatter(scatter, n)
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        } else {
            covshare::model::scatter_from_data(&m)
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        };
        groups.push(ds);
    }
    let p = groups[0].p();
    if groups.iter().any(|g| g.p() != p) {
        return Err(Failure::Data("all groups must share the same feature count".into()));
    }
    Ok(groups)
}

/// Read a basis CSV, accept orthonormality up to 1e-6, and tighten it with
/// a polar projection so downstream invariants hold exactly.
fn load_subspace(path: &Path) -> Result<SubspaceBasis, Failure> {
    let v = io::read_matrix_csv(path)?;
    let (p, s) = v.shape();
    if s == 0 || s >= p {
        return Err(Failure::Data(format!(
            "{}: basis must be p x s with 1 <= s < p, got {p}x{s}",
            path.display()
        )));
    }
    let gram = v.transpose() * &v;
    let gram_err = (&gram - DMatrix::identity(s, s)).norm();
    if gram_err > 1e-6 {
        return Err(Failure::Data(format!(
            "{}: basis columns are not orthonormal (|V'V - I|_F = {gram_err:.3e} > 1e-6)",
            path.display()
        )));
    }
    let eig = gram.symmetric_eigen();
    let inv_sqrt = DMatrix::from_fn(s, s, |i, j| {
        (0..s)
            .map(|k| eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / eig.eigenvalues[k].sqrt())
            .sum()
    });
    SubspaceBasis::new(v * inv_sqrt).map_err(Failure::from)
}

fn ensure_out_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::Data(format!("cannot create {}: {e}", path.display())))
}

fn input_options_json(opts: &InputOpts) -> serde_json::Value {
    serde_json::json!({
        "inputs": opts.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "scatter": opts.scatter,
        "n": opts.n,
        "demean": opts.demean,
    })
}

#[derive(Serialize)]
struct FitGroupDiagnostics {
    group: usize,
    input: String,
    n: usize,
    sigma2_hat: f64,
    gamma: f64,
}

#[derive(Serialize)]
struct FitDiagnostics {
    s: usize,
    converged: bool,
    iterations: usize,
    log_marginal_likelihood: f64,
    groups: Vec<FitGroupDiagnostics>,
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    if args.s == 0 {
        return Err(Failure::Usage("--s must be at least 1".into()));
    }
    let groups = load_groups(&args.input)?;
    let p = groups[0].p();
    if args.s >= p {
        return Err(Failure::Usage(format!(
            "--s {} must be smaller than the feature count p = {p}",
            args.s
        )));
    }
    ensure_out_dir(&args.out)?;

    let em_opts = EmOptions { max_iters: args.max_iters, tol: args.tol, ..Default::default() };
    let fit = em::fit(&groups, args.s, &em_opts)?;

    io::write_matrix_csv(&args.out.join("v_hat.csv"), fit.v_hat.matrix())?;

    io::with_file(&args.out.join("marginal_likelihood_trace.csv"), |w| {
        writeln!(w, "iteration,log_marginal_likelihood")?;
        for (i, ll) in fit.objective_trace.iter().enumerate() {
            writeln!(w, "{i},{ll}")?;
        }
        Ok(())
    })?;

    let mut diag_groups = Vec::with_capacity(groups.len());
    for (k, g) in groups.iter().enumerate() {
        let sigma2_hat = em::sigma2_plugin(&fit.v_hat, g)?;
        let gamma = em::goodness_of_fit(g, &fit.v_hat, sigma2_hat)?;
        diag_groups.push(FitGroupDiagnostics {
            group: k,
            input: args.input.inputs[k].display().to_string(),
            n: g.n(),
            sigma2_hat,
            gamma,
        });
    }
    let diagnostics = FitDiagnostics {
        s: args.s,
        converged: fit.converged,
        iterations: fit.iterations,
        log_marginal_likelihood: *fit.objective_trace.last().unwrap(),
        groups: diag_groups,
    };
    let json = serde_json::to_string_pretty(&diagnostics)
        .map_err(|e| Failure::Data(format!("diagnostics serialization failed: {e}")))?;
    fs::write(args.out.join("diagnostics.json"), json + "\n")
        .map_err(|e| Failure::Data(format!("cannot write diagnostics: {e}")))?;

    let mut options = input_options_json(&args.input);
    options["s"] = args.s.into();
    options["max_iters"] = args.max_iters.into();
    options["tol"] = args.tol.into();
    RunManifest::new("fit", options, Some(args.seed), &args.input.inputs)?.write(&args.out)
}

fn cmd_gibbs(args: GibbsArgs) -> Result<(), Failure> {
    let groups = load_groups(&args.input)?;
    let v = load_subspace(&args.subspace)?;
    if v.p() != groups[0].p() {
        return Err(Failure::Data(format!(
            "subspace has p = {} but the data have p = {}",
            v.p(),
            groups[0].p()
        )));
    }
    if args.r == 0 || args.r > v.s() {
        return Err(Failure::Usage(format!(
            "--r must lie in [1, s]; got r = {}, s = {}",
            args.r,
            v.s()
        )));
    }
    ensure_out_dir(&args.out)?;

    let config = ChainConfig {
        n_iter: args.iters,
        burn_in: args.burnin,
        thin: args.thin,
        seed: args.seed,
        omega_grid: args.omega_grid,
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let chains = groups
        .par_iter()
        .enumerate()
        .map(|(k, g)| run_chain(g, &v, args.r, &config, k).map_err(Failure::from))
        .collect::<Result<Vec<_>, _>>()?;

    for (k, chain) in chains.iter().enumerate() {
        io::with_file(&args.out.join(format!("chain_{k}.jsonl")), |w| {
            write_chain_jsonl(chain, w).map_err(covshare::Error::from)
        })?;

        if args.r == 2 {
            io::with_file(&args.out.join(format!("summary_{k}.csv")), |w| {
                write_chain_summary_csv(chain, w)
            })?;
            let points: Vec<(f64, f64)> = chain
                .draws
                .iter()
                .filter_map(|d| angle_logratio(d).ok())
                .map(|s| (s.angle, s.log_ratio))
                .collect();
            let region = hull_peel_region(&points, 0.95)?;
            io::with_file(&args.out.join(format!("region_{k}.csv")), |w| {
                writeln!(w, "angle,log_ratio")?;
                for (a, l) in &region.vertices {
                    writeln!(w, "{a},{l}")?;
                }
                Ok(())
            })?;
        }

        let stein = stein_estimator(chain, &v)?;
        io::write_matrix_csv(&args.out.join(format!("stein_{k}.csv")), &stein)?;
    }
    if args.r != 2 {
        eprintln!(
            "note: angle/log-ratio summaries and regions are only defined for r = 2; \
             skipped for r = {}",
            args.r
        );
    }

    let mut options = input_options_json(&args.input);
    options["subspace"] = args.subspace.display().to_string().into();
    options["r"] = args.r.into();
    options["iters"] = args.iters.into();
    options["burnin"] = args.burnin.into();
    options["thin"] = args.thin.into();
    options["omega_grid"] = args.omega_grid.into();
    let mut manifest_inputs = args.input.inputs.clone();
    manifest_inputs.push(args.subspace.clone());
    RunManifest::new("gibbs", options, Some(args.seed), &manifest_inputs)?.write(&args.out)
}

#[derive(Serialize)]
struct RanksGroupReport {
    group: usize,
    input: String,
    rank: usize,
    threshold: f64,
    median_sv: f64,
    beta: f64,
}

#[derive(Serialize)]
struct RanksReport {
    groups: Vec<RanksGroupReport>,
    pooled: RankEstimate,
}

fn cmd_ranks(args: RanksArgs) -> Result<(), Failure> {
    let groups = load_groups(&args.input)?;
    ensure_out_dir(&args.out)?;

    let mut per_group = Vec::with_capacity(groups.len());
    for (k, g) in groups.iter().enumerate() {
        let est = estimate_group_rank(g)?;
        per_group.push(RanksGroupReport {
            group: k,
            input: args.input.inputs[k].display().to_string(),
            rank: est.rank,
            threshold: est.threshold,
            median_sv: est.median_sv,
            beta: est.beta,
        });
    }
    let pooled = estimate_shared_dimension(&groups)?;
    let report = RanksReport { groups: per_group, pooled };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::Data(format!("serialization failed: {e}")))?;
    fs::write(args.out.join("ranks.json"), json + "\n")
        .map_err(|e| Failure::Data(format!("cannot write ranks.json: {e}")))?;

    RunManifest::new("ranks", input_options_json(&args.input), None, &args.input.inputs)?
        .write(&args.out)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    if args.reps == Some(0) {
        return Err(Failure::Usage("--reps must be at least 1".into()));
    }
    ensure_out_dir(&args.out)?;
    let report = match args.experiment {
        Experiment::Table1 => {
            let mut opts = Table1Options::default();
            if let Some(r) = args.reps {
                opts.replications = r;
            }
            if let Some(s) = args.seed {
                opts.seed = s;
            }
            run_table1(&opts)?
        }
        Experiment::Coverage => {
            let mut opts = CoverageOptions::default();
            if let Some(r) = args.reps {
                opts.replications = r;
            }
            if let Some(s) = args.seed {
                opts.seed = s;
            }
            run_coverage(&opts)?
        }
        Experiment::Accuracy => {
            let mut opts = AccuracyOptions::default();
            if let Some(r) = args.reps {
                opts.replications = r;
            }
            if let Some(s) = args.seed {
                opts.seed = s;
            }
            run_accuracy_vs_k(&opts)?
        }
    };

    io::with_file(&args.out.join("report.csv"), |w| report.write_csv(w))?;
    io::with_file(&args.out.join("summary.json"), |w| report.write_json(w))?;

    let options = serde_json::json!({
        "experiment": format!("{:?}", args.experiment).to_lowercase(),
        "replications": report.replications,
    });
    RunManifest::new("simulate", options, Some(report.seed), &[])?.write(&args.out)
}

fn cmd_gof(args: GofArgs) -> Result<(), Failure> {
    let groups = load_groups(&args.input)?;
    let v = load_subspace(&args.subspace)?;
    if v.p() != groups[0].p() {
        return Err(Failure::Data(format!(
            "subspace has p = {} but the data have p = {}",
            v.p(),
            groups[0].p()
        )));
    }
    if !args.sigma2.is_empty() && args.sigma2.len() != groups.len() {
        return Err(Failure::Usage(format!(
            "--sigma2 needs one value per group ({} groups, {} values)",
            groups.len(),
            args.sigma2.len()
        )));
    }
    ensure_out_dir(&args.out)?;

    io::with_file(&args.out.join("gamma.csv"), |w| {
        writeln!(w, "group,input,gamma,status")?;
        for (k, g) in groups.iter().enumerate() {
            let result = if args.sigma2.is_empty() {
                em::sigma2_plugin(&v, g).and_then(|s2| em::goodness_of_fit(g, &v, s2))
            } else {
                em::goodness_of_fit(g, &v, args.sigma2[k])
            };
            let input = args.input.inputs[k].display();
            match result {
                Ok(gamma) => writeln!(w, "{k},{input},{gamma},ok")?,
                Err(e) => {
                    let msg = e.to_string().replace([',', '\n'], ";");
                    writeln!(w, "{k},{input},,{msg}")?;
                }
            }
        }
        Ok(())
    })?;

    let mut options = input_options_json(&args.input);
    options["subspace"] = args.subspace.display().to_string().into();
    options["sigma2"] = serde_json::json!(args.sigma2);
    let mut manifest_inputs = args.input.inputs.clone();
    manifest_inputs.push(args.subspace.clone());
    RunManifest::new("gof", options, None, &manifest_inputs)?.write(&args.out)
}
