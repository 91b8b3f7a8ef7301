//! Off-line construction of measurement sequences.
//!
//! Three planners are provided: exhaustive search over small subsets
//! ([`plan_os`]), a greedy sequence driven by the worst-case Bures distance
//! of the compatible set ([`plan_ios`]), and a greedy sequence driven by the
//! analytic projection bound ([`plan_ias`]). [`ProjectionState`] carries the
//! orthogonal projection of the target onto the span of the chosen
//! observables.

use itertools::Itertools;
use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QsvError, Result};
use crate::hermitian::{hs_dot, span_rank, DensityMatrix, HermitianOperator, ObservableSet};
use crate::par;
use crate::sdp::{max_distance, CompatibleSetSpec, DEPENDENCE_TOL};

/// Scores closer than this are treated as equal.
pub const TIE_TOL: f64 = 1e-7;

/// A worst-case distance at or below this value counts as zero; the
/// compatible set has collapsed onto the target.
pub const ZERO_DISTANCE_TOL: f64 = 1e-6;

/// IAS scores at or below this value carry no information about the target.
pub const ZERO_GAIN_TOL: f64 = 1e-12;

pub const DEFAULT_MAX_SUBSET: usize = 3;

#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanMethod {
    OS,
    IOS,
    IAS,
    Random,
}

impl std::str::FromStr for PlanMethod {
    type Err = QsvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "os" => Ok(Self::OS),
            "ios" => Ok(Self::IOS),
            "ias" => Ok(Self::IAS),
            "random" => Ok(Self::Random),
            _ => Err(QsvError::InvalidArgument(format!("unknown plan method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Ran until `d^2` independent observables were chosen.
    Complete,
    /// The compatible set collapsed to the target; the remaining independent
    /// observables were appended in ascending index order.
    Span,
    /// A subset meeting the distance threshold was found.
    Epsilon,
    /// Exhaustive search hit the subset-size cap without meeting the threshold.
    Cap,
    /// All remaining analytic scores vanished; the tail is a random
    /// independent fill.
    ZeroGain,
}

/// An ordered list of observable indices with per-step scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePlan {
    pub method: PlanMethod,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub stop_reason: StopReason,
    pub target_digest: String,
    pub seed: u64,
}

impl SequencePlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// First step count whose recorded score is at most `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.scores.iter().position(|&s| s <= threshold).map(|k| k + 1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// SHA-256 over the target and every observable, hex encoded.
pub fn target_digest(rho0: &DensityMatrix, set: &ObservableSet) -> String {
    let mut h = Sha256::new();
    h.update((rho0.dim() as u64).to_le_bytes());
    for x in rho0.operator().coordinates() {
        h.update(x.to_le_bytes());
    }
    for op in set.observables() {
        for x in op.coordinates() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Orthonormal basis of the chosen observables and the projection of the
/// target onto their span.
#[derive(Debug, Clone)]
pub struct ProjectionState {
    ortho_basis: Vec<HermitianOperator>,
    projected: HermitianOperator,
    projected_norm_sq: f64,
}

impl ProjectionState {
    pub fn new(dim: usize) -> Self {
        Self {
            ortho_basis: Vec::new(),
            projected: HermitianOperator::zeros(dim),
            projected_norm_sq: 0.0,
        }
    }

    pub fn ortho_basis(&self) -> &[HermitianOperator] {
        &self.ortho_basis
    }

    pub fn projected(&self) -> &HermitianOperator {
        &self.projected
    }

    pub fn projected_norm_sq(&self) -> f64 {
        self.projected_norm_sq
    }

    pub fn len(&self) -> usize {
        self.ortho_basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ortho_basis.is_empty()
    }

    /// Component of `a` orthogonal to the current span (two Gram-Schmidt
    /// passes).
    pub fn residual(&self, a: &HermitianOperator) -> HermitianOperator {
        let mut r = a.clone();
        for _ in 0..2 {
            for g in &self.ortho_basis {
                r = r.axpy(-hs_dot(&r, g), g);
            }
        }
        r
    }

    pub fn is_independent(&self, a: &HermitianOperator) -> bool {
        self.residual(a).hs_norm() > DEPENDENCE_TOL
    }

    fn push(&mut self, rho0: &DensityMatrix, a: &HermitianOperator) -> Result<()> {
        let r = self.residual(a);
        let n2 = r.hs_norm_sq();
        if n2.sqrt() <= DEPENDENCE_TOL {
            return Err(QsvError::DependentObservable { index: self.len() });
        }
        let t = hs_dot(rho0.operator(), &r);
        self.projected = self.projected.axpy(t / n2, &r);
        self.projected_norm_sq += t * t / n2;
        self.ortho_basis.push(r.scale(1.0 / n2.sqrt()));
        Ok(())
    }
}

/// Adds one observable to the span and updates the projection.
///
/// Fails with [`QsvError::DependentObservable`] (carrying the current span
/// size) when `a_next` lies in the span.
pub fn project_update(
    state: &ProjectionState,
    rho0: &DensityMatrix,
    a_next: &HermitianOperator,
) -> Result<ProjectionState> {
    if a_next.dim() != rho0.dim() || state.projected.dim() != rho0.dim() {
        return Err(QsvError::DimensionMismatch {
            expected: rho0.dim(),
            found: a_next.dim(),
        });
    }
    let mut next = state.clone();
    next.push(rho0, a_next)?;
    Ok(next)
}

/// Projection state after measuring `indices` in order.
pub fn projection_state(rho0: &DensityMatrix, set: &ObservableSet, indices: &[usize]) -> Result<ProjectionState> {
    let mut st = ProjectionState::new(rho0.dim());
    for &i in indices {
        st.push(rho0, observable(set, i)?)?;
    }
    Ok(st)
}

/// Hilbert-Schmidt radius bound on the compatible set around the target:
/// `sqrt(1 - |P|^2) + sqrt(max(Tr(rho0^2) - |P|^2, 0))` with `P` the
/// projection of the target onto the measured span.
pub fn hs_bound(rho0: &DensityMatrix, state: &ProjectionState) -> f64 {
    let n2 = state.projected_norm_sq;
    (1.0 - n2).max(0.0).sqrt() + (rho0.purity() - n2).max(0.0).sqrt()
}

/// Bures bound for a pure target, valid once the projection carries at
/// least half the norm.
pub fn bures_bound_pure(projected_norm_sq: f64) -> Result<f64> {
    if projected_norm_sq.is_nan() || projected_norm_sq < 0.5 - 1e-12 {
        return Err(QsvError::InvalidArgument(format!(
            "Bures bound needs squared projection norm >= 0.5, got {projected_norm_sq}"
        )));
    }
    let s = (2.0 * projected_norm_sq - 1.0).clamp(0.0, 1.0).sqrt();
    Ok((2.0 * (1.0 - s)).max(0.0).sqrt())
}

/// Information gain of adding an observable with orthogonal residual `r`.
pub fn ias_score(rho0: &DensityMatrix, r: &HermitianOperator) -> f64 {
    let n2 = r.hs_norm_sq();
    if n2.sqrt() <= DEPENDENCE_TOL {
        return 0.0;
    }
    let t = hs_dot(rho0.operator(), r);
    t * t / n2
}

fn observable(set: &ObservableSet, i: usize) -> Result<&HermitianOperator> {
    set.get(i)
        .ok_or_else(|| QsvError::InvalidArgument(format!("index {i} out of range for set of {}", set.len())))
}

fn require_complete(set: &ObservableSet) -> Result<()> {
    let need = set.dim() * set.dim();
    let ops: Vec<&HermitianOperator> = set.observables().iter().collect();
    let rank = span_rank(&ops);
    if rank < need {
        return Err(QsvError::NotInformationComplete { needed: need, rank });
    }
    Ok(())
}

fn check_dims(rho0: &DensityMatrix, set: &ObservableSet) -> Result<()> {
    if rho0.dim() != set.dim() {
        return Err(QsvError::DimensionMismatch {
            expected: set.dim(),
            found: rho0.dim(),
        });
    }
    Ok(())
}

/// Indices among `keys` within [`TIE_TOL`] of the maximum.
pub(crate) fn near_max(keys: &[f64]) -> Vec<usize> {
    let best = keys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..keys.len()).filter(|&k| keys[k] >= best - TIE_TOL).collect()
}

pub(crate) fn pick<R: Rng>(rng: &mut R, tied: &[usize]) -> usize {
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

/// Compatible-set constraints for measuring `indices` on the target itself.
fn target_spec(rho0: &DensityMatrix, set: &ObservableSet, indices: &[usize]) -> Result<CompatibleSetSpec> {
    CompatibleSetSpec::from_state(set, indices, rho0)
}

/// Worst-case Bures distance after each prefix of `indices`, evaluated with
/// target statistics. Stops early once a value is at most `stop_below`.
pub fn max_distance_profile(
    rho0: &DensityMatrix,
    set: &ObservableSet,
    indices: &[usize],
    stop_below: Option<f64>,
) -> Result<Vec<f64>> {
    check_dims(rho0, set)?;
    let mut spec = CompatibleSetSpec::new(rho0.dim());
    let mut out = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let a = observable(set, i)?;
        spec.push(a.clone(), rho0.expectation(a)?)?;
        let beta = max_distance(rho0, &spec).map_err(|e| QsvError::PlanStep {
            step: k + 1,
            source: Box::new(e),
        })?;
        out.push(beta);
        if stop_below.is_some_and(|t| beta <= t) {
            break;
        }
    }
    Ok(out)
}

/// Exhaustive search for the smallest subset whose compatible set lies
/// within `epsilon` of the target, over subsets of at most `max_subset`
/// elements. Returns the best subset found with [`StopReason::Cap`] if no
/// subset qualifies.
pub fn plan_os(rho0: &DensityMatrix, set: &ObservableSet, epsilon: f64, max_subset: usize) -> Result<SequencePlan> {
    check_dims(rho0, set)?;
    require_complete(set)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for k in 0..=max_subset.min(set.len()) {
        let subsets: Vec<Vec<usize>> = (0..set.len())
            .combinations(k)
            .filter(|s| {
                let ops: Vec<&HermitianOperator> = s.iter().map(|&i| &set.observables()[i]).collect();
                span_rank(&ops) == k
            })
            .collect();
        let alphas = par::map(&subsets, |s| {
            target_spec(rho0, set, s).and_then(|spec| max_distance(rho0, &spec))
        });
        let mut size_best: Option<(f64, usize)> = None;
        for (j, a) in alphas.into_iter().enumerate() {
            let a = a.map_err(|e| QsvError::PlanStep {
                step: k,
                source: Box::new(e),
            })?;
            if size_best.is_none_or(|(b, _)| a < b) {
                size_best = Some((a, j));
            }
        }
        let Some((a, j)) = size_best else { continue };
        debug!("OS size {k}: best max distance {a:.3e}");
        if best.as_ref().is_none_or(|(b, _)| a < *b - TIE_TOL) {
            best = Some((a, subsets[j].clone()));
        }
        if a <= epsilon {
            return Ok(SequencePlan {
                method: PlanMethod::OS,
                indices: subsets[j].clone(),
                scores: Vec::new(),
                stop_reason: StopReason::Epsilon,
                target_digest: target_digest(rho0, set),
                seed: 0,
            });
        }
    }
    let (_, indices) = best.unwrap_or_default();
    Ok(SequencePlan {
        method: PlanMethod::OS,
        indices,
        scores: Vec::new(),
        stop_reason: StopReason::Cap,
        target_digest: target_digest(rho0, set),
        seed: 0,
    })
}

/// Greedy sequence minimizing the worst-case Bures distance of the
/// compatible set at every step.
///
/// Near-ties in that distance are broken by the analytic score and then at
/// random. Once the set collapses onto the target the remaining independent
/// observables are appended in ascending index order.
pub fn plan_ios(rho0: &DensityMatrix, set: &ObservableSet, seed: u64) -> Result<SequencePlan> {
    check_dims(rho0, set)?;
    if !rho0.is_pure() {
        return Err(QsvError::NotPure((rho0.purity() - 1.0).abs()));
    }
    require_complete(set)?;
    let d2 = rho0.dim() * rho0.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ProjectionState::new(rho0.dim());
    let mut spec = CompatibleSetSpec::new(rho0.dim());
    let mut indices = Vec::with_capacity(d2);
    let mut scores = Vec::with_capacity(d2);
    let values: Vec<f64> = set
        .observables()
        .iter()
        .map(|a| rho0.expectation(a))
        .collect::<Result<_>>()?;
    let mut stop_reason = StopReason::Complete;

    while indices.len() < d2 {
        let step = indices.len() + 1;
        let cands: Vec<(usize, HermitianOperator)> = (0..set.len())
            .filter(|i| !indices.contains(i))
            .map(|i| (i, state.residual(&set.observables()[i])))
            .filter(|(_, r)| r.hs_norm() > DEPENDENCE_TOL)
            .collect();
        if cands.is_empty() {
            return Err(QsvError::NotInformationComplete {
                needed: d2,
                rank: indices.len(),
            });
        }
        let alphas: Vec<f64> = par::map(&cands, |(i, _)| {
            spec.extended(&set.observables()[*i], values[*i])
                .and_then(|s| max_distance(rho0, &s))
        })
        .into_iter()
        .collect::<Result<_>>()
        .map_err(|e| QsvError::PlanStep {
            step,
            source: Box::new(e),
        })?;
        let neg: Vec<f64> = alphas.iter().map(|a| -a).collect();
        let tied = near_max(&neg);
        let omegas: Vec<f64> = tied.iter().map(|&k| ias_score(rho0, &cands[k].1)).collect();
        let by_omega: Vec<usize> = near_max(&omegas).into_iter().map(|t| tied[t]).collect();
        let k = pick(&mut rng, &by_omega);
        let (i, _) = &cands[k];
        let alpha = alphas[k];
        debug!(
            "IOS step {step}: index {i} max distance {alpha:.3e} ({} tied)",
            tied.len()
        );
        state.push(rho0, &set.observables()[*i])?;
        spec.push(set.observables()[*i].clone(), values[*i])?;
        indices.push(*i);
        scores.push(alpha);
        if alpha <= ZERO_DISTANCE_TOL {
            stop_reason = StopReason::Span;
            for j in 0..set.len() {
                if indices.len() == d2 {
                    break;
                }
                if !indices.contains(&j) && state.is_independent(&set.observables()[j]) {
                    state.push(rho0, &set.observables()[j])?;
                    indices.push(j);
                    scores.push(alpha);
                }
            }
            break;
        }
    }
    Ok(SequencePlan {
        method: PlanMethod::IOS,
        indices,
        scores,
        stop_reason,
        target_digest: target_digest(rho0, set),
        seed,
    })
}

/// Greedy sequence maximizing the growth of the projected norm,
/// `Tr^2(rho0 A_perp) / |A_perp|^2`, at every step. Ties are broken at
/// random.
pub fn plan_ias(rho0: &DensityMatrix, set: &ObservableSet, seed: u64) -> Result<SequencePlan> {
    check_dims(rho0, set)?;
    require_complete(set)?;
    let d2 = rho0.dim() * rho0.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ProjectionState::new(rho0.dim());
    let mut indices = Vec::with_capacity(d2);
    let mut scores = Vec::with_capacity(d2);
    let mut stop_reason = StopReason::Complete;

    while indices.len() < d2 {
        let remaining: Vec<usize> = (0..set.len()).filter(|i| !indices.contains(i)).collect();
        let scored: Vec<Option<f64>> = par::map(&remaining, |&i| {
            let r = state.residual(&set.observables()[i]);
            (r.hs_norm() > DEPENDENCE_TOL).then(|| ias_score(rho0, &r))
        });
        let cands: Vec<(usize, f64)> = remaining
            .iter()
            .zip(scored)
            .filter_map(|(&i, s)| s.map(|s| (i, s)))
            .collect();
        if cands.is_empty() {
            return Err(QsvError::NotInformationComplete {
                needed: d2,
                rank: indices.len(),
            });
        }
        let omegas: Vec<f64> = cands.iter().map(|c| c.1).collect();
        let tied = near_max(&omegas);
        if omegas[tied[0]] <= ZERO_GAIN_TOL {
            stop_reason = StopReason::ZeroGain;
            break;
        }
        let (i, w) = cands[pick(&mut rng, &tied)];
        state.push(rho0, &set.observables()[i])?;
        indices.push(i);
        scores.push(w);
    }
    let mut plan = SequencePlan {
        method: PlanMethod::IAS,
        indices,
        scores,
        stop_reason,
        target_digest: target_digest(rho0, set),
        seed,
    };
    if plan.len() < d2 {
        let mut filled = complete_sequence(&plan, set, rng.random())?;
        filled.stop_reason = StopReason::ZeroGain;
        plan = filled;
    }
    Ok(plan)
}

/// Squared projection norm after each step of `indices`.
pub fn norm_trajectory(rho0: &DensityMatrix, set: &ObservableSet, indices: &[usize]) -> Result<Vec<f64>> {
    let mut st = ProjectionState::new(rho0.dim());
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        st.push(rho0, observable(set, i)?)?;
        out.push(st.projected_norm_sq);
    }
    Ok(out)
}

fn span_state(set: &ObservableSet, indices: &[usize]) -> Result<ProjectionState> {
    let dummy = DensityMatrix::maximally_mixed(set.dim());
    let mut st = ProjectionState::new(set.dim());
    for &i in indices {
        st.push(&dummy, observable(set, i)?)?;
    }
    Ok(st)
}

/// Extends `plan` with randomly ordered independent observables until it
/// holds `d^2` of them. The existing prefix is kept.
pub fn complete_sequence(plan: &SequencePlan, set: &ObservableSet, seed: u64) -> Result<SequencePlan> {
    let d2 = set.dim() * set.dim();
    let mut out = plan.clone();
    if out.len() >= d2 {
        return Ok(out);
    }
    let dummy = DensityMatrix::maximally_mixed(set.dim());
    let mut st = span_state(set, &out.indices)?;
    let mut rest: Vec<usize> = (0..set.len()).filter(|i| !out.indices.contains(i)).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for i in rest {
        if out.len() == d2 {
            break;
        }
        let a = &set.observables()[i];
        if st.is_independent(a) {
            st.push(&dummy, a)?;
            out.indices.push(i);
        }
    }
    if out.len() < d2 {
        return Err(QsvError::NotInformationComplete {
            needed: d2,
            rank: out.len(),
        });
    }
    Ok(out)
}

/// A uniformly random order of the set filtered to `d^2` independent
/// observables.
pub fn plan_random(set: &ObservableSet, seed: u64) -> Result<SequencePlan> {
    require_complete(set)?;
    let empty = SequencePlan {
        method: PlanMethod::Random,
        indices: Vec::new(),
        scores: Vec::new(),
        stop_reason: StopReason::Complete,
        target_digest: String::new(),
        seed,
    };
    complete_sequence(&empty, set, seed)
}
