//! Adaptive verification: measure, estimate, then choose the next
//! observable from look-ahead distance brackets.
//!
//! After each measurement the closest compatible state to the target serves
//! as a stand-in for the unknown preparation. Every remaining candidate is
//! scored by the distance bracket the compatible set would have if the
//! candidate returned the stand-in's expectation value, and the candidate
//! expected to settle the verdict soonest is measured next.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QsvError, Result};
use crate::hermitian::{DensityMatrix, HermitianOperator, ObservableSet};
use crate::par;
use crate::planner::{ias_score, near_max, pick, ProjectionState};
use crate::sdp::{distance_extrema, distance_extrema_with_estimate, max_distance, CompatibleSetSpec, DEPENDENCE_TOL};
use crate::verifier::{check_epsilon, decide, reconstruct_state, MeasurementOracle, Verdict};

/// Look-ahead minimum distances below this are treated as zero.
pub const ZERO_DELTA_TOL: f64 = 1e-7;

/// Which selection rule produced the next index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Step one: the smallest worst-case distance under target statistics.
    Initial,
    /// Every look-ahead minimum vanished; minimize the look-ahead maximum.
    ZeroDelta,
    /// Minimize the margin `min(eps - delta, Delta - eps)`.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub delta: f64,
    #[serde(rename = "Delta")]
    pub big_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStep {
    pub k: usize,
    pub index: usize,
    pub y: f64,
    pub omega: f64,
    #[serde(rename = "Omega")]
    pub big_omega: f64,
    /// Rule that selected this step's index.
    pub rule: SelectionRule,
    /// Digest of the estimate used to score the next candidates.
    pub estimate_digest: Option<String>,
    pub candidates: Vec<CandidateScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveTrace {
    pub verdict: Verdict,
    pub steps_used: usize,
    pub steps: Vec<AdaptiveStep>,
    pub reconstructed: Option<DensityMatrix>,
}

#[derive(Serialize)]
struct SummaryRow {
    k: usize,
    index: usize,
    y: f64,
    omega: f64,
    #[serde(rename = "Omega")]
    big_omega: f64,
    rule: SelectionRule,
}

impl AdaptiveTrace {
    pub fn indices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.index).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per step: `k,index,y,omega,Omega,rule`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(SummaryRow {
                k: s.k,
                index: s.index,
                y: s.y,
                omega: s.omega,
                big_omega: s.big_omega,
                rule: s.rule,
            })
            .map_err(|e| QsvError::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| QsvError::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| QsvError::Parse(e.to_string()))
    }
}

fn state_digest(rho: &DensityMatrix) -> String {
    let mut h = Sha256::new();
    for x in rho.operator().coordinates() {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Look-ahead bracket `(delta, Delta)` for measuring `candidate` next,
/// assuming it returns the estimate's expectation value.
pub fn candidate_scores(
    estimate: &DensityMatrix,
    accumulated: &CompatibleSetSpec,
    candidate: &HermitianOperator,
    rho0: &DensityMatrix,
) -> Result<(f64, f64)> {
    let spec = accumulated.extended(candidate, estimate.expectation(candidate)?)?;
    let ext = distance_extrema(rho0, &spec).map_err(|e| match e {
        QsvError::Infeasible => {
            QsvError::NumericalFailure("look-ahead set excludes the estimate it was built from".into())
        }
        other => other,
    })?;
    Ok((ext.min_dist, ext.max_dist))
}

/// Chooses among `keys` (smaller is better) with near-ties settled by the
/// analytic score against `reference`, then at random.
fn select(keys: &[f64], residuals: &[HermitianOperator], reference: &DensityMatrix, rng: &mut ChaCha8Rng) -> usize {
    let neg: Vec<f64> = keys.iter().map(|k| -k).collect();
    let tied = near_max(&neg);
    let omegas: Vec<f64> = tied.iter().map(|&t| ias_score(reference, &residuals[t])).collect();
    let best: Vec<usize> = near_max(&omegas).into_iter().map(|t| tied[t]).collect();
    pick(rng, &best)
}

/// Adaptive verification of the oracle's state against `rho0`.
///
/// Uses at most `d^2` measurements. Inconsistent finite-shot data surface
/// as [`QsvError::Remeasure`].
pub fn run_av(
    set: &ObservableSet,
    oracle: &MeasurementOracle,
    rho0: &DensityMatrix,
    epsilon: f64,
    seed: u64,
) -> Result<AdaptiveTrace> {
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
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = set.observables();

    // first pick: target statistics, as in the greedy offline planner
    let all: Vec<usize> = (0..set.len()).collect();
    let alphas: Vec<f64> = par::map(&all, |&i| {
        CompatibleSetSpec::new(rho0.dim())
            .extended(&obs[i], rho0.expectation(&obs[i])?)
            .and_then(|s| max_distance(rho0, &s))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut next = select(&alphas, obs, rho0, &mut rng);
    let mut rule = SelectionRule::Initial;

    let mut span = ProjectionState::new(rho0.dim());
    let mut spec = CompatibleSetSpec::new(rho0.dim());
    let mut steps: Vec<AdaptiveStep> = Vec::new();
    let mut values = Vec::new();
    while steps.len() < d2 {
        let k = steps.len() + 1;
        let a = &obs[next];
        span = crate::planner::project_update(&span, rho0, a)?;
        let y = oracle.measure(next, a)?;
        spec.push(a.clone(), y)?;
        values.push(y);
        let (ext, estimate) = distance_extrema_with_estimate(rho0, &spec).map_err(|e| match e {
            QsvError::Infeasible => QsvError::Remeasure { step: k },
            other => other,
        })?;
        let mut step = AdaptiveStep {
            k,
            index: next,
            y,
            omega: ext.min_dist,
            big_omega: ext.max_dist,
            rule,
            estimate_digest: None,
            candidates: Vec::new(),
        };
        if let Some(verdict) = decide(&ext, epsilon) {
            steps.push(step);
            return Ok(AdaptiveTrace {
                verdict,
                steps_used: k,
                steps,
                reconstructed: None,
            });
        }
        if k == d2 {
            steps.push(step);
            break;
        }

        let measured: Vec<usize> = steps.iter().map(|s| s.index).chain([next]).collect();
        let cands: Vec<(usize, HermitianOperator)> = (0..set.len())
            .filter(|i| !measured.contains(i))
            .map(|i| (i, span.residual(&obs[i])))
            .filter(|(_, r)| r.hs_norm() > DEPENDENCE_TOL)
            .collect();
        if cands.is_empty() {
            return Err(QsvError::NotInformationComplete { needed: d2, rank: k });
        }
        let scores: Vec<CandidateScore> = par::map(&cands, |(i, _)| {
            candidate_scores(&estimate, &spec, &obs[*i], rho0).map(|(delta, big_delta)| CandidateScore {
                index: *i,
                delta,
                big_delta,
            })
        })
        .into_iter()
        .collect::<Result<_>>()
        .map_err(|e| QsvError::PlanStep {
            step: k,
            source: Box::new(e),
        })?;
        let zero_delta = scores.iter().all(|s| s.delta < ZERO_DELTA_TOL);
        let keys: Vec<f64> = scores
            .iter()
            .map(|s| {
                if zero_delta {
                    s.big_delta
                } else {
                    (epsilon - s.delta).min(s.big_delta - epsilon)
                }
            })
            .collect();
        let residuals: Vec<HermitianOperator> = cands.iter().map(|c| c.1.clone()).collect();
        let chosen = select(&keys, &residuals, &estimate, &mut rng);
        next = cands[chosen].0;
        rule = if zero_delta {
            SelectionRule::ZeroDelta
        } else {
            SelectionRule::Margin
        };
        step.estimate_digest = Some(state_digest(&estimate));
        step.candidates = scores;
        steps.push(step);
    }
    let measured: Vec<usize> = steps.iter().map(|s| s.index).collect();
    let reconstructed = reconstruct_state(set, &measured, &values)?;
    Ok(AdaptiveTrace {
        verdict: Verdict::Exhausted,
        steps_used: steps.len(),
        steps,
        reconstructed: Some(reconstructed),
    })
}
