use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;

use qsv_core::adaptive::run_av;
use qsv_core::experiment::{run_experiment, Algorithm, ExperimentConfig, REQUIRED_COMPLETION};
use qsv_core::hermitian::{
    bures_from_fidelity, pauli_projector_set, pauli_projectors_from_labels, DensityMatrix, HermitianOperator,
    ObservableSet,
};
use qsv_core::planner::{
    plan_ias, plan_ios, plan_os, plan_random, target_digest, PlanMethod, SequencePlan, DEFAULT_MAX_SUBSET,
};
use qsv_core::verifier::{run_vm, MeasurementOracle};
use qsv_core::QsvError;

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "qsv", version, about = "Plan and run quantum state verification protocols")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan an observable sequence for a pure target.
    Plan(PlanArgs),
    /// Verify a prepared state along a precomputed plan.
    Verify(VerifyArgs),
    /// Verify a prepared state with adaptively chosen observables.
    Adapt(AdaptArgs),
    /// Run the Monte Carlo comparison of all protocols.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct Common {
    /// Pure target state (JSON with `dim`, `re`, `im`).
    #[arg(long)]
    target: PathBuf,
    /// `pauli2q` or a JSON file of Pauli labels or `{label, operator}` entries.
    #[arg(long, default_value = "pauli2q")]
    observables: String,
    #[arg(long, default_value_t = 0.95)]
    epsilon_fidelity: f64,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = ["os", "ios", "ias", "random"])]
    algo: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest subset size searched by `os`.
    #[arg(long, default_value_t = DEFAULT_MAX_SUBSET)]
    os_cap: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Measurement {
    /// Prepared state (JSON with `dim`, `re`, `im`).
    #[arg(long)]
    state: PathBuf,
    /// Shots per observable; exact expectation values when absent.
    #[arg(long)]
    shots: Option<u64>,
    /// Seed of the shot-noise sampler.
    #[arg(long, default_value_t = 0)]
    shot_seed: u64,
    /// Write the step trace as CSV instead of JSON.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    measurement: Measurement,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    measurement: Measurement,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_targets: Option<usize>,
    #[arg(long)]
    shots: Option<u64>,
    /// Comma-separated subset of os, ios, ias, av, random.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<Algorithm>>,
    #[arg(long)]
    os_cap: Option<usize>,
    /// Run trials on one thread.
    #[arg(long)]
    sequential: bool,
}

/// Failure classes mapped to process exit codes.
enum Failure {
    Config(anyhow::Error),
    Solver(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let solver = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<QsvError>(),
                Some(
                    QsvError::Infeasible
                        | QsvError::NumericalFailure(_)
                        | QsvError::Remeasure { .. }
                        | QsvError::PlanStep { .. }
                        | QsvError::Unphysical(_)
                        | QsvError::SingularGram(_)
                )
            )
        });
        if solver {
            Failure::Solver(e)
        } else {
            Failure::Config(e)
        }
    }
}

impl From<QsvError> for Failure {
    fn from(e: QsvError) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => plan(a),
        Command::Verify(a) => verify(a),
        Command::Adapt(a) => adapt(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure: {e:#}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ObservableEntry {
    Label(String),
    Operator { label: String, operator: HermitianOperator },
}

fn load_observables(spec: &str) -> anyhow::Result<ObservableSet> {
    if spec == "pauli2q" {
        return Ok(pauli_projector_set(2)?);
    }
    let entries: Vec<ObservableEntry> = read_json(Path::new(spec))?;
    if entries.iter().all(|e| matches!(e, ObservableEntry::Label(_))) {
        let labels: Vec<String> = entries
            .into_iter()
            .map(|e| match e {
                ObservableEntry::Label(l) => l,
                ObservableEntry::Operator { label, .. } => label,
            })
            .collect();
        return Ok(pauli_projectors_from_labels(&labels)?);
    }
    let mut ops = Vec::new();
    let mut labels = Vec::new();
    for e in entries {
        match e {
            ObservableEntry::Operator { label, operator } => {
                labels.push(label);
                ops.push(operator);
            }
            ObservableEntry::Label(l) => bail!("mixed observable entries: bare label {l:?}"),
        }
    }
    Ok(ObservableSet::new(ops, labels)?)
}

struct Problem {
    rho0: DensityMatrix,
    set: ObservableSet,
    epsilon: f64,
}

fn load_problem(c: &Common) -> anyhow::Result<Problem> {
    if !(c.epsilon_fidelity > 0.0 && c.epsilon_fidelity < 1.0) {
        bail!("--epsilon-fidelity must lie in (0,1)");
    }
    let rho0: DensityMatrix = read_json(&c.target)?;
    let set = load_observables(&c.observables)?;
    if set.dim() != rho0.dim() {
        bail!(
            "target has dimension {} but observables act on dimension {}",
            rho0.dim(),
            set.dim()
        );
    }
    Ok(Problem {
        rho0,
        set,
        epsilon: bures_from_fidelity(c.epsilon_fidelity),
    })
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{}", text.trim_end());
            Ok(())
        }
    }
}

fn plan(a: PlanArgs) -> CliResult<()> {
    let p = load_problem(&a.common)?;
    let method: PlanMethod = a.algo.parse()?;
    let plan = match method {
        PlanMethod::OS => plan_os(&p.rho0, &p.set, p.epsilon, a.os_cap),
        PlanMethod::IOS => plan_ios(&p.rho0, &p.set, a.seed),
        PlanMethod::IAS => plan_ias(&p.rho0, &p.set, a.seed),
        PlanMethod::Random => plan_random(&p.set, a.seed),
    }?;
    info!(
        "{:?} plan: {} observables, stop {:?}",
        plan.method,
        plan.len(),
        plan.stop_reason
    );
    emit(a.out.as_deref(), &plan.to_json()?)?;
    Ok(())
}

fn oracle(m: &Measurement) -> CliResult<MeasurementOracle> {
    let rho: DensityMatrix = read_json(&m.state)?;
    Ok(match m.shots {
        None => MeasurementOracle::perfect(rho),
        Some(0) => return Err(Failure::Config(anyhow!("--shots must be positive"))),
        Some(n) => MeasurementOracle::finite_shots(rho, n, m.shot_seed)?,
    })
}

fn verify(a: VerifyArgs) -> CliResult<()> {
    let p = load_problem(&a.common)?;
    let text = std::fs::read_to_string(&a.plan).with_context(|| format!("reading {}", a.plan.display()))?;
    let plan = SequencePlan::from_json(&text)?;
    if plan.target_digest != target_digest(&p.rho0, &p.set) {
        warn!("plan was computed for a different target or observable set");
    }
    let oracle = oracle(&a.measurement)?;
    let outcome = run_vm(&plan, &p.set, &oracle, &p.rho0, p.epsilon)?;
    eprintln!("{} after {} measurements", outcome.verdict, outcome.steps_used);
    let text = if a.measurement.csv {
        outcome.to_csv()?
    } else {
        outcome.to_json()?
    };
    emit(a.measurement.out.as_deref(), &text)?;
    Ok(())
}

fn adapt(a: AdaptArgs) -> CliResult<()> {
    let p = load_problem(&a.common)?;
    let oracle = oracle(&a.measurement)?;
    let trace = run_av(&p.set, &oracle, &p.rho0, p.epsilon, a.seed)?;
    eprintln!("{} after {} measurements", trace.verdict, trace.steps_used);
    let text = if a.measurement.csv {
        trace.to_csv()?
    } else {
        trace.to_json()?
    };
    emit(a.measurement.out.as_deref(), &text)?;
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml_str(&text).map_err(|e| Failure::Config(anyhow!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_targets {
        cfg.n_targets = n;
    }
    if a.shots.is_some() {
        cfg.shots = a.shots;
    }
    if let Some(algs) = a.algorithms {
        cfg.algorithms = algs;
    }
    if let Some(c) = a.os_cap {
        cfg.os_cap = c;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    if a.sequential {
        qsv_core::par::set_execution_mode(qsv_core::par::ExecutionMode::Sequential);
    }
    let report = run_experiment(&cfg)?;
    report
        .write_outputs(&a.out_dir)
        .map_err(|e| Failure::Config(e.into()))?;
    for x in &report.exclusions {
        warn!("excluded target {} {:?} {}: {}", x.target, x.class, x.group, x.reason);
    }
    let summary = report.summary();
    for (class, groups) in &summary.steps {
        let line: Vec<String> = groups
            .iter()
            .map(|(g, s)| format!("{g} {:.2} ({:.2})", s.mean, s.std))
            .collect();
        eprintln!("{class}: {}", line.join(", "));
    }
    eprintln!(
        "completed {}/{} trials; outputs in {}",
        summary.completed,
        summary.attempted,
        a.out_dir.display()
    );
    if summary.completion < REQUIRED_COMPLETION {
        return Err(Failure::Solver(anyhow!(
            "only {:.1}% of trials completed",
            100.0 * summary.completion
        )));
    }
    Ok(())
}
