//! Sequential verification of a prepared state against a pure target.
//!
//! [`run_vm`] walks a fixed measurement plan. After every measurement it
//! brackets the distance of the unknown state to the target by the minimum
//! and maximum Bures distance over the compatible set, and stops as soon as
//! the bracket lies entirely on one side of the threshold.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{QsvError, Result};
use crate::hermitian::{hs_dot, DensityMatrix, HermitianOperator, ObservableSet, PSD_TOL};
use crate::planner::{complete_sequence, ProjectionState, SequencePlan};
use crate::sdp::{distance_extrema, CompatibleSetSpec, DistanceExtrema};

/// Eigenvalues of a reconstruction below this are reported as unphysical.
pub const UNPHYSICAL_TOL: f64 = 1e-6;

const PROJECTOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OracleMode {
    /// Exact expectation values.
    Perfect,
    /// Sample means of `shots` projective measurements.
    FiniteShots { shots: u64, seed: u64 },
}

/// Source of measured expectation values for a prepared state.
#[derive(Debug, Clone)]
pub struct MeasurementOracle {
    rho_exp: DensityMatrix,
    mode: OracleMode,
}

impl MeasurementOracle {
    pub fn perfect(rho_exp: DensityMatrix) -> Self {
        Self {
            rho_exp,
            mode: OracleMode::Perfect,
        }
    }

    pub fn finite_shots(rho_exp: DensityMatrix, shots: u64, seed: u64) -> Result<Self> {
        if shots == 0 {
            return Err(QsvError::InvalidArgument("shots must be positive".into()));
        }
        Ok(Self {
            rho_exp,
            mode: OracleMode::FiniteShots { shots, seed },
        })
    }

    pub fn dim(&self) -> usize {
        self.rho_exp.dim()
    }

    pub fn mode(&self) -> &OracleMode {
        &self.mode
    }

    pub fn rho_exp(&self) -> &DensityMatrix {
        &self.rho_exp
    }

    /// Measures observable `a`, which is element `index` of its set.
    ///
    /// Finite-shot samples for a given index come from their own stream, so
    /// the result does not depend on measurement order.
    pub fn measure(&self, index: usize, a: &HermitianOperator) -> Result<f64> {
        let p = self.rho_exp.expectation(a)?;
        match self.mode {
            OracleMode::Perfect => Ok(p),
            OracleMode::FiniteShots { shots, seed } => {
                let sq = a.matrix() * a.matrix();
                let dev = (sq - a.matrix()).camax();
                if dev > PROJECTOR_TOL {
                    return Err(QsvError::InvalidArgument(format!(
                        "finite-shot sampling needs a projector (|A^2 - A| = {dev:e})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let dist =
                    Binomial::new(shots, p.clamp(0.0, 1.0)).map_err(|e| QsvError::InvalidArgument(e.to_string()))?;
                Ok(dist.sample(&mut rng) as f64 / shots as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accurate,
    NotAccurate,
    Exhausted,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Accurate => "accurate",
            Verdict::NotAccurate => "not_accurate",
            Verdict::Exhausted => "exhausted",
        })
    }
}

/// One measurement and the resulting distance bracket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub index: usize,
    pub y: f64,
    pub gamma: f64,
    #[serde(rename = "Gamma")]
    pub big_gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub verdict: Verdict,
    pub steps_used: usize,
    pub trace: Vec<StepRecord>,
    pub reconstructed: Option<DensityMatrix>,
}

impl VerificationOutcome {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per step: `k,index,y,gamma,Gamma`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.trace {
            w.serialize(r).map_err(|e| QsvError::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| QsvError::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| QsvError::Parse(e.to_string()))
    }
}

/// Outcome of the bracket test at one step.
pub(crate) fn decide(ext: &DistanceExtrema, epsilon: f64) -> Option<Verdict> {
    if ext.min_dist > epsilon {
        Some(Verdict::NotAccurate)
    } else if ext.max_dist <= epsilon {
        Some(Verdict::Accurate)
    } else {
        None
    }
}

/// Distance bracket for the accumulated data; an empty compatible set means
/// the data are inconsistent and the state must be re-measured.
pub(crate) fn bracket(rho0: &DensityMatrix, spec: &CompatibleSetSpec, step: usize) -> Result<DistanceExtrema> {
    distance_extrema(rho0, spec).map_err(|e| match e {
        QsvError::Infeasible => QsvError::Remeasure { step },
        other => other,
    })
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(QsvError::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    Ok(())
}

/// Runs the plan against the oracle until the bracket decides.
///
/// Plans shorter than `d^2` are first completed with random independent
/// observables seeded by the plan's own seed.
pub fn run_vm(
    plan: &SequencePlan,
    set: &ObservableSet,
    oracle: &MeasurementOracle,
    rho0: &DensityMatrix,
    epsilon: f64,
) -> Result<VerificationOutcome> {
    check_epsilon(epsilon)?;
    if oracle.dim() != rho0.dim() || set.dim() != rho0.dim() {
        return Err(QsvError::DimensionMismatch {
            expected: rho0.dim(),
            found: oracle.dim().max(set.dim()),
        });
    }
    if !rho0.is_pure() {
        return Err(QsvError::NotPure((rho0.purity() - 1.0).abs()));
    }
    let d2 = rho0.dim() * rho0.dim();
    let plan = if plan.len() < d2 {
        complete_sequence(plan, set, plan.seed)?
    } else {
        plan.clone()
    };
    let mut span = ProjectionState::new(rho0.dim());
    let mut spec = CompatibleSetSpec::new(rho0.dim());
    let mut trace = Vec::new();
    let mut values = Vec::new();
    for (k, &i) in plan.indices.iter().take(d2).enumerate() {
        let step = k + 1;
        let a = set
            .get(i)
            .ok_or_else(|| QsvError::InvalidArgument(format!("plan index {i} out of range")))?;
        if !span.is_independent(a) {
            return Err(QsvError::DependentObservable { index: i });
        }
        span = crate::planner::project_update(&span, rho0, a)?;
        let y = oracle.measure(i, a)?;
        spec.push(a.clone(), y)?;
        values.push(y);
        let ext = bracket(rho0, &spec, step)?;
        trace.push(StepRecord {
            k: step,
            index: i,
            y,
            gamma: ext.min_dist,
            big_gamma: ext.max_dist,
        });
        if let Some(verdict) = decide(&ext, epsilon) {
            return Ok(VerificationOutcome {
                verdict,
                steps_used: step,
                trace,
                reconstructed: None,
            });
        }
    }
    let used: Vec<usize> = trace.iter().map(|r| r.index).collect();
    let reconstructed = reconstruct_state(set, &used, &values)?;
    Ok(VerificationOutcome {
        verdict: Verdict::Exhausted,
        steps_used: trace.len(),
        trace,
        reconstructed: Some(reconstructed),
    })
}

/// Linear-inversion estimate from expectation values of a spanning subset.
///
/// Solves the Gram system `[Tr(A_i A_j)] c = y` and returns `sum c_i A_i`.
/// If the subset spans `d^2` only together with the identity, the unit-trace
/// condition is added as an extra row. Eigenvalues in `[-1e-6, 0)` are
/// clipped; anything more negative is reported as unphysical.
pub fn reconstruct_state(set: &ObservableSet, subset: &[usize], values: &[f64]) -> Result<DensityMatrix> {
    if subset.len() != values.len() {
        return Err(QsvError::InvalidArgument(format!(
            "{} indices but {} values",
            subset.len(),
            values.len()
        )));
    }
    let d = set.dim();
    let mut ops = Vec::with_capacity(subset.len() + 1);
    for &i in subset {
        ops.push(
            set.get(i)
                .ok_or_else(|| QsvError::InvalidArgument(format!("index {i} out of range")))?
                .clone(),
        );
    }
    let mut ys = values.to_vec();
    let id = HermitianOperator::identity(d);
    let mut span = ProjectionState::new(d);
    for a in &ops {
        if !span.is_independent(a) {
            return Err(QsvError::SingularGram("subset is linearly dependent".into()));
        }
        span = crate::planner::project_update(&span, &DensityMatrix::maximally_mixed(d), a)?;
    }
    if span.len() < d * d && span.is_independent(&id) {
        ops.push(id);
        ys.push(1.0);
        span = crate::planner::project_update(&span, &DensityMatrix::maximally_mixed(d), &ops[ops.len() - 1])?;
    }
    if span.len() < d * d {
        return Err(QsvError::NotInformationComplete {
            needed: d * d,
            rank: span.len(),
        });
    }
    let n = ops.len();
    let gram = DMatrix::from_fn(n, n, |i, j| hs_dot(&ops[i], &ops[j]));
    let c = gram
        .cholesky()
        .ok_or_else(|| QsvError::SingularGram("Gram matrix is not positive definite".into()))?
        .solve(&DVector::from_vec(ys));
    let mut rho = HermitianOperator::zeros(d);
    for (a, &ci) in ops.iter().zip(c.iter()) {
        rho = rho.axpy(ci, a);
    }
    let tr = rho.trace();
    rho = rho.axpy((1.0 - tr) / d as f64, &HermitianOperator::identity(d));
    let lmin = rho.min_eigenvalue();
    if lmin < -UNPHYSICAL_TOL {
        return Err(QsvError::Unphysical(lmin));
    }
    if lmin < -PSD_TOL {
        let clipped = rho.map_spectrum(|x| x.max(0.0));
        rho = clipped.scale(1.0 / clipped.trace());
    }
    DensityMatrix::new(rho)
}
