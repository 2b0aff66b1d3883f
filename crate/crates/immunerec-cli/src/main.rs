//! Command-line front end: per-patient reconstruction runs, twin-experiment
//! verification runs, forward solves, and reruns from a saved manifest. Every
//! run writes plot-ready CSV files plus a manifest that reproduces it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod manifest;
mod output;
mod run;

use manifest::{EtrueSpec, Manifest, PriorSpec, RunKind};

/// Exit code for malformed invocations.
const EXIT_USAGE: u8 = 64;
/// Exit code for solver or I/O failures during a run.
const EXIT_RUN: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "immunerec",
    version,
    about = "Reconstruct the immune response E(t) of an acute-HIV model from clinical series",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Adaptive reconstruction from a clinical record.
    Reconstruct(ReconstructArgs),
    /// Synthetic twin experiment: generate data from a known E(t), then
    /// reconstruct it and compare.
    Twin(TwinArgs),
    /// Forward solve only: integrate the model for a given E(t).
    Forward(ForwardArgs),
    /// Re-execute a run exactly as described by its manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Patient record to use: 1..4, or "all" to fan out one run per patient.
    #[arg(long, default_value = "1")]
    patient: String,

    /// CSV file with a clinical series (overrides --patient data).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Number of refinement rounds after level 0.
    #[arg(long, default_value_t = 4)]
    refinements: usize,

    /// Mesh refinement fraction in (0,1).
    #[arg(long, default_value_t = 0.875)]
    beta: f64,

    /// Initial regularization weight.
    #[arg(long, default_value_t = 0.1)]
    gamma0: f64,

    /// Regularization decay exponent in (0,1).
    #[arg(long, default_value_t = 0.5)]
    p: f64,

    /// Gradient-norm stopping tolerance.
    #[arg(long, default_value_t = 1e-3)]
    theta: f64,

    /// Iteration cap per refinement level.
    #[arg(long, default_value_t = 200)]
    max_iters: usize,

    /// Taper width of the data weights, days (0 keeps unit weights).
    #[arg(long, default_value_t = 0.0)]
    taper: f64,

    /// Clamp iterates into the admissible box [1, 10].
    #[arg(long)]
    project_box: bool,

    /// Starting iterate for refined levels.
    #[arg(long, default_value = "previous", value_parser = ["previous", "initial"])]
    restart: String,

    /// Implicit sub-steps per mesh interval.
    #[arg(long, default_value_t = 500)]
    substeps: usize,

    /// Cap on the max-norm of one optimizer update.
    #[arg(long, default_value_t = 2.0)]
    step_max: f64,

    /// Enable the cross-level stop with the given stall factor
    /// (a level keeps refining only while its final gradient norm drops
    /// below factor times the previous level's).
    #[arg(long)]
    cross_level_stop: Option<f64>,

    /// Stop refining once the constant-free error estimator drops below
    /// this tolerance.
    #[arg(long, default_value_t = 0.0)]
    theta_est: f64,

    /// Initial state "u1,u2,u3" in cells/ml and virions/ml.
    #[arg(long, default_value = "1125000,0,1")]
    x0: String,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Clone)]
struct TwinArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Relative noise half-width applied to both observables.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,

    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Ground truth: "patient1-profile", "constant:<v>" or "step:<t>:<a>:<b>".
    #[arg(long, default_value = "step:30:1:3")]
    etrue: String,

    /// Prior/initial guess: "profile" (CTL-derived) or "constant:<v>".
    #[arg(long, default_value = "constant:1")]
    prior: String,
}

#[derive(Args, Debug, Clone)]
struct ForwardArgs {
    /// Patient record supplying the CTL profiles.
    #[arg(long, default_value = "1")]
    patient: String,

    /// CSV file with a clinical series (overrides --patient data).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Immune response: "profile" (CTL initial guess) or "constant:<v>".
    #[arg(long, default_value = "profile")]
    e: String,

    /// Mesh step in days.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,

    /// End of the integration window, days.
    #[arg(long, default_value_t = 363.0)]
    t_end: f64,

    /// Implicit sub-steps per mesh interval.
    #[arg(long, default_value_t = 500)]
    substeps: usize,

    /// Initial state "u1,u2,u3" in cells/ml and virions/ml.
    #[arg(long, default_value = "1125000,0,1")]
    x0: String,

    #[arg(long, default_value = "out")]
    out: PathBuf,

    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct RerunArgs {
    /// Manifest of an earlier run.
    #[arg(long)]
    manifest: PathBuf,

    /// Output directory for the re-executed run.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    let outcome = match cli.command {
        Command::Reconstruct(args) => run_reconstruct(args),
        Command::Twin(args) => run_twin(args),
        Command::Forward(args) => run_forward(args),
        Command::Rerun(args) => run_rerun(args),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUN)
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Malformed invocation: bad flag values, missing inputs, refusal to
    /// overwrite without --force.
    Usage(String),
    /// The run itself failed: solver error or output I/O.
    Run(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn run(msg: impl Into<String>) -> Self {
        CliError::Run(msg.into())
    }
}

fn parse_patients(spec: &str) -> Result<Vec<u8>, CliError> {
    match spec {
        "all" => Ok(vec![1, 2, 3, 4]),
        s => s
            .parse::<u8>()
            .ok()
            .filter(|n| (1..=4).contains(n))
            .map(|n| vec![n])
            .ok_or_else(|| {
                CliError::usage(format!("--patient must be 1..4 or \"all\", got {s:?}"))
            }),
    }
}

fn run_reconstruct(args: ReconstructArgs) -> Result<(), CliError> {
    let patients = parse_patients(&args.common.patient)?;
    if patients.len() == 1 {
        let manifest =
            manifest::from_common(RunKind::Reconstruct, &args.common, patients[0], None)?;
        return run::execute(&manifest, &args.common.out, args.common.force);
    }
    // Fan out one run per patient into isolated directories.
    let results: Vec<Result<(), CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = patients
            .iter()
            .map(|&n| {
                let common = args.common.clone();
                scope.spawn(move || -> Result<(), CliError> {
                    let manifest = manifest::from_common(RunKind::Reconstruct, &common, n, None)?;
                    let dir = common.out.join(format!("patient{n}"));
                    run::execute(&manifest, &dir, common.force)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("runner panicked"))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(())
}

fn run_twin(args: TwinArgs) -> Result<(), CliError> {
    let patients = parse_patients(&args.common.patient)?;
    if patients.len() != 1 {
        return Err(CliError::usage("twin runs use a single --patient"));
    }
    if args.noise < 0.0 {
        return Err(CliError::usage("--noise must be non-negative"));
    }
    let etrue = EtrueSpec::parse(&args.etrue).map_err(CliError::usage)?;
    let prior = PriorSpec::parse(&args.prior).map_err(CliError::usage)?;
    let twin = manifest::TwinSection {
        noise: args.noise,
        seed: args.seed,
        etrue,
        prior,
    };
    let manifest = manifest::from_common(RunKind::Twin, &args.common, patients[0], Some(twin))?;
    run::execute(&manifest, &args.common.out, args.common.force)
}

fn run_forward(args: ForwardArgs) -> Result<(), CliError> {
    let patients = parse_patients(&args.patient)?;
    if patients.len() != 1 {
        return Err(CliError::usage("forward runs use a single --patient"));
    }
    if !(args.tau > 0.0) || !(args.t_end > 0.0) {
        return Err(CliError::usage("--tau and --t-end must be positive"));
    }
    let e_spec = EtrueSpec::parse(&args.e).map_err(CliError::usage)?;
    let manifest = manifest::forward_manifest(&args, patients[0], e_spec)?;
    run::execute(&manifest, &args.out, args.force)
}

fn run_rerun(args: RerunArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.manifest).map_err(|e| {
        CliError::usage(format!(
            "cannot read manifest {}: {e}",
            args.manifest.display()
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("malformed manifest: {e}")))?;
    run::execute(&manifest, &args.out, args.force)
}

/// Refuse to clobber files unless --force was given.
pub fn check_overwrite(dir: &Path, files: &[String], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    for f in files {
        let path = dir.join(f);
        if path.exists() {
            return Err(CliError::usage(format!(
                "output file {} exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    Ok(())
}
