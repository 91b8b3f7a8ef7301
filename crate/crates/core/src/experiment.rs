//! Monte Carlo comparison of the verification protocols.
//!
//! For every random pure target the harness prepares one state inside and
//! one outside the acceptance ball, plans measurement sequences, verifies
//! both preparations with every requested protocol and collects the number
//! of measurements each protocol needed. All randomness flows from a single
//! master seed through per-target substreams, so results do not depend on
//! scheduling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::run_av;
use crate::error::{QsvError, Result};
use crate::hermitian::{
    bures_from_fidelity, bures_pure, pauli_projector_set, perturb_state, random_pure_target, DensityMatrix,
    ObservableSet, PerturbationSpec,
};
use crate::par;
use crate::planner::{
    max_distance_profile, plan_ias, plan_ios, plan_os, plan_random, SequencePlan, DEFAULT_MAX_SUBSET, ZERO_DISTANCE_TOL,
};
use crate::verifier::{run_vm, MeasurementOracle, Verdict};

/// Largest number of perturbation draws tried per preparation.
const MAX_PREPARATION_ATTEMPTS: u32 = 10_000;

/// Share of trials that must finish for a run to count as complete.
pub const REQUIRED_COMPLETION: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    OS,
    IOS,
    IAS,
    AV,
    Random,
}

impl std::str::FromStr for Algorithm {
    type Err = QsvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "os" => Ok(Self::OS),
            "ios" => Ok(Self::IOS),
            "ias" => Ok(Self::IAS),
            "av" => Ok(Self::AV),
            "random" => Ok(Self::Random),
            _ => Err(QsvError::InvalidArgument(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateClass {
    Accurate,
    NonAccurate,
}

impl StateClass {
    pub const ALL: [StateClass; 2] = [StateClass::Accurate, StateClass::NonAccurate];

    pub fn as_str(self) -> &'static str {
        match self {
            StateClass::Accurate => "accurate",
            StateClass::NonAccurate => "non_accurate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_targets: usize,
    /// Fidelity threshold; the Bures radius is derived from it.
    pub epsilon_fidelity: f64,
    pub lambda_accurate: f64,
    pub lambda_nonaccurate: f64,
    pub eta: f64,
    pub n_control_sequences: usize,
    /// Shots per observable; absent means exact expectation values.
    pub shots: Option<u64>,
    pub algorithms: Vec<Algorithm>,
    pub os_cap: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_targets: 100,
            epsilon_fidelity: 0.95,
            lambda_accurate: 1e-4,
            lambda_nonaccurate: 0.1,
            eta: 0.1,
            n_control_sequences: 5,
            shots: None,
            algorithms: vec![Algorithm::IOS, Algorithm::IAS, Algorithm::AV, Algorithm::Random],
            os_cap: DEFAULT_MAX_SUBSET,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| QsvError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QsvError::Parse(e.to_string()))
    }

    /// Bures radius `sqrt(2 (1 - sqrt(F)))` of the acceptance ball.
    pub fn epsilon(&self) -> f64 {
        bures_from_fidelity(self.epsilon_fidelity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QsvError::InvalidArgument(m));
        if self.n_targets == 0 {
            return bad("n_targets must be positive".into());
        }
        if !(self.epsilon_fidelity > 0.0 && self.epsilon_fidelity < 1.0) {
            return bad(format!("epsilon_fidelity {} outside (0,1)", self.epsilon_fidelity));
        }
        for (name, l) in [
            ("lambda_accurate", self.lambda_accurate),
            ("lambda_nonaccurate", self.lambda_nonaccurate),
        ] {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("{name} {l} outside [0,1]"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be >= 0", self.eta));
        }
        if self.shots == Some(0) {
            return bad("shots must be positive".into());
        }
        if self.algorithms.is_empty() {
            return bad("no algorithms selected".into());
        }
        if self.algorithms.contains(&Algorithm::Random) && self.n_control_sequences == 0 {
            return bad("Random needs n_control_sequences > 0".into());
        }
        Ok(())
    }

    fn lambda(&self, class: StateClass) -> f64 {
        match class {
            StateClass::Accurate => self.lambda_accurate,
            StateClass::NonAccurate => self.lambda_nonaccurate,
        }
    }
}

// Substream labels; each target owns a block of streams.
const STREAM_TARGET: u64 = 0;
const STREAM_PREP: u64 = 1;
const STREAM_SHOTS: u64 = 3;
const STREAM_IOS: u64 = 5;
const STREAM_IAS: u64 = 6;
const STREAM_AV: u64 = 7;
const STREAM_OS: u64 = 9;
const STREAM_RANDOM: u64 = 16;
const STREAMS_PER_TARGET: u64 = 1 << 16;

/// Seed of substream `label` for `target`: the first word of ChaCha8 keyed by
/// the master seed on stream `target * 2^16 + label`.
pub fn substream_seed(master: u64, target: usize, label: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(target as u64 * STREAMS_PER_TARGET + label);
    rng.next_u64()
}

fn class_offset(class: StateClass) -> u64 {
    match class {
        StateClass::Accurate => 0,
        StateClass::NonAccurate => 1,
    }
}

/// Perturbs `rho0` until the preparation falls in the requested class.
pub fn prepare_state(
    rho0: &DensityMatrix,
    lambda: f64,
    eta: f64,
    epsilon: f64,
    class: StateClass,
    seed: u64,
) -> Result<(DensityMatrix, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_PREPARATION_ATTEMPTS {
        let spec = PerturbationSpec::random(lambda, eta, &mut rng)?;
        let rho = perturb_state(rho0, &spec)?;
        let inside = bures_pure(&rho, rho0)? <= epsilon;
        if inside == (class == StateClass::Accurate) {
            return Ok((rho, attempt));
        }
    }
    Err(QsvError::InvalidArgument(format!(
        "no {} preparation after {MAX_PREPARATION_ATTEMPTS} draws (lambda {lambda}, eta {eta})",
        class.as_str()
    )))
}

/// Worst-case distance after each prefix of an IAS plan, measured with the
/// target's own statistics.
pub fn cross_evaluate_beta(rho0: &DensityMatrix, ias_plan: &SequencePlan, set: &ObservableSet) -> Result<Vec<f64>> {
    max_distance_profile(rho0, set, &ias_plan.indices, None)
}

/// Measurement and bracket of one logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub k: usize,
    pub index: usize,
    pub y: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub target: usize,
    pub class: StateClass,
    pub algorithm: Algorithm,
    /// Control-sequence number for `Random`, 0 otherwise.
    pub sequence: usize,
    pub verdict: Verdict,
    pub steps_used: usize,
    pub trace: Vec<TraceStep>,
}

impl TrialResult {
    /// Label of the group this trial is aggregated in, e.g. `IOS` or `Random3`.
    pub fn group(&self) -> String {
        group_name(self.algorithm, self.sequence)
    }
}

fn group_name(algorithm: Algorithm, sequence: usize) -> String {
    match algorithm {
        Algorithm::Random => format!("Random{sequence}"),
        a => format!("{a:?}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub target: usize,
    pub class: Option<StateClass>,
    pub group: String,
    pub reason: String,
}

/// Offline sequence quality for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProfile {
    pub target: usize,
    /// IOS worst-case distance after each step.
    pub alpha: Vec<f64>,
    /// Worst-case distance after each prefix of the IAS plan.
    pub beta: Vec<f64>,
    pub ios_reconstruction: Option<usize>,
    pub ias_reconstruction: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation.
pub fn aggregate(xs: &[f64]) -> Aggregate {
    let n = xs.len();
    if n == 0 {
        return Aggregate {
            n,
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { n, mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub kind: String,
    pub class: String,
    pub name: String,
    pub bin: i64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub epsilon: f64,
    pub trials: Vec<TrialResult>,
    pub profiles: Vec<TargetProfile>,
    pub exclusions: Vec<Exclusion>,
    /// Number of attempted trials, including excluded ones.
    pub attempted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub epsilon: f64,
    pub attempted: usize,
    pub completed: usize,
    pub completion: f64,
    /// `class -> group -> (n, mean, std)` of step counts.
    pub steps: BTreeMap<String, BTreeMap<String, Aggregate>>,
    /// Steps until the worst-case distance reaches zero with target statistics.
    pub reconstruction: BTreeMap<String, Aggregate>,
    /// Mean of `beta_l - alpha_l` over targets for each prefix length.
    pub beta_minus_alpha: Vec<Aggregate>,
    pub exclusions: Vec<Exclusion>,
}

impl ExperimentReport {
    pub fn completed(&self) -> usize {
        self.trials.len()
    }

    pub fn completion(&self) -> f64 {
        if self.attempted == 0 {
            1.0
        } else {
            self.trials.len() as f64 / self.attempted as f64
        }
    }

    pub fn steps_for(&self, class: StateClass, group: &str) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| t.class == class && t.group() == group)
            .map(|t| t.steps_used as f64)
            .collect()
    }

    /// Aggregation groups in a fixed order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<(Algorithm, usize)> = self.trials.iter().map(|t| (t.algorithm, t.sequence)).collect();
        out.sort();
        out.dedup();
        out.into_iter().map(|(a, s)| group_name(a, s)).collect()
    }

    pub fn summary(&self) -> Summary {
        let mut steps = BTreeMap::new();
        for class in StateClass::ALL {
            let per: BTreeMap<String, Aggregate> = self
                .groups()
                .into_iter()
                .map(|g| {
                    let xs = self.steps_for(class, &g);
                    (g, aggregate(&xs))
                })
                .filter(|(_, a)| a.n > 0)
                .collect();
            steps.insert(class.as_str().to_string(), per);
        }
        let mut reconstruction = BTreeMap::new();
        let ios: Vec<f64> = self
            .profiles
            .iter()
            .filter_map(|p| p.ios_reconstruction)
            .map(|k| k as f64)
            .collect();
        let ias: Vec<f64> = self
            .profiles
            .iter()
            .filter_map(|p| p.ias_reconstruction)
            .map(|k| k as f64)
            .collect();
        if !ios.is_empty() {
            reconstruction.insert("IOS".to_string(), aggregate(&ios));
        }
        if !ias.is_empty() {
            reconstruction.insert("IAS".to_string(), aggregate(&ias));
        }
        let len = self
            .profiles
            .iter()
            .map(|p| p.alpha.len().min(p.beta.len()))
            .max()
            .unwrap_or(0);
        let beta_minus_alpha = (0..len)
            .map(|l| {
                let xs: Vec<f64> = self
                    .profiles
                    .iter()
                    .filter(|p| l < p.alpha.len() && l < p.beta.len())
                    .map(|p| p.beta[l] - p.alpha[l])
                    .collect();
                aggregate(&xs)
            })
            .collect();
        Summary {
            config: self.config.clone(),
            epsilon: self.epsilon,
            attempted: self.attempted,
            completed: self.completed(),
            completion: self.completion(),
            steps,
            reconstruction,
            beta_minus_alpha,
            exclusions: self.exclusions.clone(),
        }
    }

    /// Step-count frequencies over `1..=d^2` per group and pairwise step
    /// differences over `-(d^2-1)..=d^2-1` per pair of groups.
    pub fn histograms(&self) -> Vec<HistogramRow> {
        let d2 = 16i64;
        let groups = self.groups();
        let mut rows = Vec::new();
        for class in StateClass::ALL {
            for g in &groups {
                let xs = self.steps_for(class, g);
                for bin in 1..=d2 {
                    rows.push(HistogramRow {
                        kind: "steps".into(),
                        class: class.as_str().into(),
                        name: g.clone(),
                        bin,
                        count: xs.iter().filter(|&&x| x as i64 == bin).count(),
                    });
                }
            }
            let by_target = |g: &str| -> BTreeMap<usize, i64> {
                self.trials
                    .iter()
                    .filter(|t| t.class == class && t.group() == g)
                    .map(|t| (t.target, t.steps_used as i64))
                    .collect()
            };
            for (i, a) in groups.iter().enumerate() {
                for b in &groups[i + 1..] {
                    let (ma, mb) = (by_target(a), by_target(b));
                    let diffs: Vec<i64> = ma.iter().filter_map(|(t, x)| mb.get(t).map(|y| x - y)).collect();
                    for bin in -(d2 - 1)..=(d2 - 1) {
                        rows.push(HistogramRow {
                            kind: "difference".into(),
                            class: class.as_str().into(),
                            name: format!("{a}-{b}"),
                            bin,
                            count: diffs.iter().filter(|&&x| x == bin).count(),
                        });
                    }
                }
            }
        }
        rows
    }

    /// One row per trial step.
    pub fn write_raw_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            target: usize,
            class: &'a str,
            group: String,
            verdict: String,
            steps_used: usize,
            k: usize,
            index: usize,
            y: f64,
            lower: f64,
            upper: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for t in &self.trials {
            for s in &t.trace {
                w.serialize(Row {
                    target: t.target,
                    class: t.class.as_str(),
                    group: t.group(),
                    verdict: t.verdict.to_string(),
                    steps_used: t.steps_used,
                    k: s.k,
                    index: s.index,
                    y: s.y,
                    lower: s.lower,
                    upper: s.upper,
                })
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_histograms_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.histograms() {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `raw.csv`, `summary.json` and `histograms.csv` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_raw_csv(std::fs::File::create(dir.join("raw.csv"))?)?;
        self.write_histograms_csv(std::fs::File::create(dir.join("histograms.csv"))?)?;
        let summary = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(dir.join("summary.json"), summary + "\n")?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> QsvError {
    QsvError::Io(std::io::Error::other(e.to_string()))
}

struct TargetOutcome {
    trials: Vec<TrialResult>,
    exclusions: Vec<Exclusion>,
    profile: Option<TargetProfile>,
    attempted: usize,
}

fn vm_trace(out: &crate::verifier::VerificationOutcome) -> Vec<TraceStep> {
    out.trace
        .iter()
        .map(|r| TraceStep {
            k: r.k,
            index: r.index,
            y: r.y,
            lower: r.gamma,
            upper: r.big_gamma,
        })
        .collect()
}

fn run_target(cfg: &ExperimentConfig, set: &ObservableSet, t: usize) -> TargetOutcome {
    let eps = cfg.epsilon();
    let seed = |label: u64| substream_seed(cfg.seed, t, label);
    let mut out = TargetOutcome {
        trials: Vec::new(),
        exclusions: Vec::new(),
        profile: None,
        attempted: 0,
    };
    let wants = |a: Algorithm| cfg.algorithms.contains(&a);
    // trial groups attempted per class
    let mut groups: Vec<(Algorithm, usize)> = Vec::new();
    for a in [Algorithm::OS, Algorithm::IOS, Algorithm::IAS, Algorithm::AV] {
        if wants(a) {
            groups.push((a, 0));
        }
    }
    if wants(Algorithm::Random) {
        groups.extend((1..=cfg.n_control_sequences).map(|j| (Algorithm::Random, j)));
    }
    out.attempted = groups.len() * StateClass::ALL.len();
    let exclude_all = |out: &mut TargetOutcome, class: Option<StateClass>, reason: String| {
        warn!("target {t}: excluded ({reason})");
        for c in StateClass::ALL {
            if class.is_some_and(|x| x != c) {
                continue;
            }
            for &(a, j) in &groups {
                out.exclusions.push(Exclusion {
                    target: t,
                    class: Some(c),
                    group: group_name(a, j),
                    reason: reason.clone(),
                });
            }
        }
    };

    let rho0 = match random_pure_target(seed(STREAM_TARGET), set.dim()) {
        Ok(r) => r,
        Err(e) => {
            exclude_all(&mut out, None, format!("target generation: {e}"));
            return out;
        }
    };

    // offline plans depend on the target only
    let mut plans: BTreeMap<(Algorithm, usize), std::result::Result<SequencePlan, String>> = BTreeMap::new();
    for &(a, j) in &groups {
        let plan = match a {
            Algorithm::IOS => plan_ios(&rho0, set, seed(STREAM_IOS)),
            Algorithm::IAS => plan_ias(&rho0, set, seed(STREAM_IAS)),
            Algorithm::OS => plan_os(&rho0, set, eps, cfg.os_cap).map(|mut p| {
                p.seed = seed(STREAM_OS);
                p
            }),
            Algorithm::Random => plan_random(set, seed(STREAM_RANDOM + j as u64)),
            Algorithm::AV => continue,
        };
        plans.insert((a, j), plan.map_err(|e| e.to_string()));
    }
    if let (Some(Ok(ios)), Some(Ok(ias))) = (plans.get(&(Algorithm::IOS, 0)), plans.get(&(Algorithm::IAS, 0))) {
        match cross_evaluate_beta(&rho0, ias, set) {
            Ok(beta) => {
                let ias_reconstruction = beta.iter().position(|&b| b <= ZERO_DISTANCE_TOL).map(|k| k + 1);
                out.profile = Some(TargetProfile {
                    target: t,
                    alpha: ios.scores.clone(),
                    beta,
                    ios_reconstruction: ios.steps_to(ZERO_DISTANCE_TOL),
                    ias_reconstruction,
                });
            }
            Err(e) => warn!("target {t}: beta profile failed ({e})"),
        }
    }

    for class in StateClass::ALL {
        let prep_seed = seed(STREAM_PREP + class_offset(class));
        let rho = match prepare_state(&rho0, cfg.lambda(class), cfg.eta, eps, class, prep_seed) {
            Ok((r, _)) => r,
            Err(e) => {
                exclude_all(&mut out, Some(class), format!("preparation: {e}"));
                continue;
            }
        };
        let oracle = match cfg.shots {
            None => MeasurementOracle::perfect(rho),
            Some(n) => match MeasurementOracle::finite_shots(rho, n, seed(STREAM_SHOTS + class_offset(class))) {
                Ok(o) => o,
                Err(e) => {
                    exclude_all(&mut out, Some(class), format!("oracle: {e}"));
                    continue;
                }
            },
        };
        for &(a, j) in &groups {
            let result = match a {
                Algorithm::AV => run_av(set, &oracle, &rho0, eps, seed(STREAM_AV + class_offset(class)))
                    .map(|tr| {
                        let trace = tr
                            .steps
                            .iter()
                            .map(|s| TraceStep {
                                k: s.k,
                                index: s.index,
                                y: s.y,
                                lower: s.omega,
                                upper: s.big_omega,
                            })
                            .collect();
                        (tr.verdict, tr.steps_used, trace)
                    })
                    .map_err(|e| e.to_string()),
                _ => match &plans[&(a, j)] {
                    Ok(plan) => run_vm(plan, set, &oracle, &rho0, eps)
                        .map(|o| (o.verdict, o.steps_used, vm_trace(&o)))
                        .map_err(|e| e.to_string()),
                    Err(e) => Err(format!("planning: {e}")),
                },
            };
            match result {
                Ok((verdict, steps_used, trace)) => out.trials.push(TrialResult {
                    target: t,
                    class,
                    algorithm: a,
                    sequence: j,
                    verdict,
                    steps_used,
                    trace,
                }),
                Err(reason) => {
                    warn!(
                        "target {t} {} {}: excluded ({reason})",
                        class.as_str(),
                        group_name(a, j)
                    );
                    out.exclusions.push(Exclusion {
                        target: t,
                        class: Some(class),
                        group: group_name(a, j),
                        reason,
                    });
                }
            }
        }
    }
    out
}

/// Runs the full study on the two-qubit Pauli projector set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let set = pauli_projector_set(2)?;
    let targets: Vec<usize> = (0..config.n_targets).collect();
    let outcomes = par::map(&targets, |&t| {
        let o = run_target(config, &set, t);
        info!("target {t} done ({} trials)", o.trials.len());
        o
    });
    let mut report = ExperimentReport {
        config: config.clone(),
        epsilon: config.epsilon(),
        trials: Vec::new(),
        profiles: Vec::new(),
        exclusions: Vec::new(),
        attempted: 0,
    };
    for o in outcomes {
        report.attempted += o.attempted;
        report.trials.extend(o.trials);
        report.exclusions.extend(o.exclusions);
        report.profiles.extend(o.profile);
    }
    Ok(report)
}
