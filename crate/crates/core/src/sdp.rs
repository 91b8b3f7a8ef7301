//! Linear-objective semidefinite programs over measurement-compatible state
//! sets.
//!
//! Every optimization in the toolkit has the form
//!
//! ```text
//!   min / max  Tr(rho C)   s.t.  rho >= 0,  Tr(rho) = 1,  Tr(rho A_i) = y_i
//! ```
//!
//! and is solved by a dense primal-dual interior-point method (HKM search
//! direction, Mehrotra predictor-corrector, infeasible start). Constraint rows
//! are orthonormalized first; linearly dependent rows are dropped after a
//! consistency check. When the main iteration does not converge a phase-one
//! problem `max t s.t. rho - t I >= 0` over the affine slice decides between
//! an empty compatible set and a numerical failure.

use log::{debug, trace};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QsvError, Result};
use crate::hermitian::{bures_from_infidelity, hs_dot, DensityMatrix, HermitianOperator, ObservableSet, PSD_TOL};

/// Residual below which a constraint row is treated as dependent.
pub const DEPENDENCE_TOL: f64 = 1e-9;
/// Constraint inconsistency (or negative phase-one margin) beyond which a
/// compatible set is declared empty.
pub const INFEASIBILITY_TOL: f64 = 1e-7;
/// Constraint satisfaction promised for returned optimizers.
pub const CONSTRAINT_TOL: f64 = 1e-7;

/// An intersection of compatible sets `{rho : Tr(rho A_i) = y_i}`.
#[derive(Debug, Clone)]
pub struct CompatibleSetSpec {
    dim: usize,
    constraints: Vec<(HermitianOperator, f64)>,
}

impl CompatibleSetSpec {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            constraints: Vec::new(),
        }
    }

    pub fn with_constraints(dim: usize, constraints: Vec<(HermitianOperator, f64)>) -> Result<Self> {
        let mut spec = Self::new(dim);
        for (a, y) in constraints {
            spec.push(a, y)?;
        }
        Ok(spec)
    }

    /// Constraints `Tr(rho A_i) = Tr(state A_i)` for the listed observables.
    pub fn from_state(set: &ObservableSet, indices: &[usize], state: &DensityMatrix) -> Result<Self> {
        let mut spec = Self::new(set.dim());
        for &i in indices {
            let a = set
                .get(i)
                .ok_or_else(|| QsvError::InvalidArgument(format!("observable index {i} out of range")))?;
            spec.push(a.clone(), state.expectation(a)?)?;
        }
        Ok(spec)
    }

    pub fn push(&mut self, observable: HermitianOperator, value: f64) -> Result<()> {
        if observable.dim() != self.dim {
            return Err(QsvError::DimensionMismatch {
                expected: self.dim,
                found: observable.dim(),
            });
        }
        if !value.is_finite() {
            return Err(QsvError::InvalidArgument(format!(
                "constraint value {value} is not finite"
            )));
        }
        self.constraints.push((observable, value));
        Ok(())
    }

    /// Copy with one more constraint.
    pub fn extended(&self, observable: &HermitianOperator, value: f64) -> Result<Self> {
        let mut next = self.clone();
        next.push(observable.clone(), value)?;
        Ok(next)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[(HermitianOperator, f64)] {
        &self.constraints
    }

    /// Largest violation `|Tr(rho A_i) - y_i|`, including the trace row.
    pub fn max_violation(&self, rho: &HermitianOperator) -> f64 {
        self.constraints
            .iter()
            .map(|(a, y)| (hs_dot(rho, a) - y).abs())
            .fold((rho.trace() - 1.0).abs(), f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

/// Convergence diagnostics of one solve.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    /// Independent constraint rows after reduction (trace row included).
    pub rank: usize,
    /// Phase-one margin `max lambda_min` over the affine slice, when computed.
    pub phase_one_margin: Option<f64>,
    /// Dimension of the face of the state space the final solve ran on.
    pub face_dim: usize,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub value: Option<f64>,
    pub optimizer: Option<DensityMatrix>,
    pub diagnostics: SolveDiagnostics,
}

impl SdpSolution {
    fn optimal(value: f64, optimizer: DensityMatrix, diagnostics: SolveDiagnostics) -> Self {
        Self {
            status: SdpStatus::Optimal,
            value: Some(value),
            optimizer: Some(optimizer),
            diagnostics,
        }
    }

    fn without_point(status: SdpStatus, diagnostics: SolveDiagnostics) -> Self {
        Self {
            status,
            value: None,
            optimizer: None,
            diagnostics,
        }
    }

    /// Value and optimizer, or the matching error.
    pub fn into_result(self) -> Result<(f64, DensityMatrix)> {
        match self.status {
            SdpStatus::Optimal => Ok((
                self.value.expect("optimal solution has a value"),
                self.optimizer.expect("optimal solution has an optimizer"),
            )),
            SdpStatus::Infeasible => Err(QsvError::Infeasible),
            SdpStatus::NumericalFailure => Err(QsvError::NumericalFailure(format!(
                "no convergence after {} iterations (gap {:.2e}, pres {:.2e}, dres {:.2e})",
                self.diagnostics.iterations,
                self.diagnostics.gap,
                self.diagnostics.primal_residual,
                self.diagnostics.dual_residual
            ))),
        }
    }
}

/// Interior-point tolerances.
#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    /// Gap/residual level at which a solve counts as optimal.
    pub accept_tol: f64,
    /// Level at which the iteration stops early.
    pub target_tol: f64,
    pub max_iter: usize,
    pub step_fraction: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            accept_tol: 1e-8,
            target_tol: 1e-14,
            max_iter: 200,
            step_fraction: 0.98,
        }
    }
}

/// Gram-Schmidt on constraint rows, carrying the right-hand sides along.
/// Dependent rows are dropped; `Err` flags an inconsistent dependent row.
/// Each row carries the norm it is judged against; rows compressed onto a
/// face keep the norm of the original operator.
fn orthonormalize(
    rows_in: impl IntoIterator<Item = (HermitianOperator, f64, f64)>,
    tol: f64,
) -> std::result::Result<(Vec<HermitianOperator>, Vec<f64>), ()> {
    let mut rows: Vec<HermitianOperator> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (a, y, reference) in rows_in {
        let scale = reference.max(1e-300);
        let mut r = a.scale(1.0 / scale);
        let mut v = y / scale;
        // two passes of classical Gram-Schmidt
        for _ in 0..2 {
            for (g, b) in rows.iter().zip(&values) {
                let c = hs_dot(g, &r);
                r = r.axpy(-c, g);
                v -= c * b;
            }
        }
        let n = r.hs_norm();
        if n <= DEPENDENCE_TOL {
            if v.abs() > tol {
                return Err(());
            }
            continue;
        }
        rows.push(r.scale(1.0 / n));
        values.push(v / n);
    }
    Ok((rows, values))
}

/// HS-orthonormal constraint rows; row 0 is the normalized trace.
struct ReducedConstraints {
    dim: usize,
    rows: Vec<HermitianOperator>,
    values: Vec<f64>,
}

impl ReducedConstraints {
    fn build(d: usize, constraints: &[(HermitianOperator, f64, f64)], tol: f64) -> std::result::Result<Self, ()> {
        let all = std::iter::once((HermitianOperator::identity(d), 1.0, (d as f64).sqrt()))
            .chain(constraints.iter().cloned());
        let (rows, values) = orthonormalize(all, tol)?;
        Ok(Self { dim: d, rows, values })
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    /// Minimum-norm point of the affine slice.
    fn particular(&self) -> HermitianOperator {
        self.rows
            .iter()
            .zip(&self.values)
            .fold(HermitianOperator::zeros(self.dim), |acc, (g, &b)| acc.axpy(b, g))
    }

    /// Orthogonal projection of `x` onto the affine slice.
    fn project(&self, x: &HermitianOperator) -> HermitianOperator {
        let mut out = x.clone();
        for (g, &b) in self.rows.iter().zip(&self.values) {
            out = out.axpy(b - hs_dot(g, x), g);
        }
        out
    }

    /// Orthonormal basis of the directions orthogonal to every row.
    fn null_space(&self) -> Vec<HermitianOperator> {
        let d = self.dim;
        let n = d * d;
        let mut basis: Vec<Vec<f64>> = self.rows.iter().map(|g| g.coordinates()).collect();
        let start = basis.len();
        for e in 0..n {
            let mut v = vec![0.0; n];
            v[e] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c: f64 = b.iter().zip(&v).map(|(p, q)| p * q).sum();
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi -= c * bi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
            if basis.len() == n {
                break;
            }
        }
        basis[start..]
            .iter()
            .map(|c| HermitianOperator::from_coordinates(d, c))
            .collect()
    }
}

type CMat = DMatrix<Complex64>;

fn herm(m: CMat) -> CMat {
    let adj = m.adjoint();
    (m + adj).scale(0.5)
}

#[inline]
fn re_trace_prod(a: &CMat, b: &CMat) -> f64 {
    // Re Tr(A B) = sum_ij Re(A_ij B_ji)
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = a[(i, j)];
            let y = b[(j, i)];
            s += x.re * y.re - x.im * y.im;
        }
    }
    s
}

/// `f` applied to the spectrum of a positive definite matrix.
fn spectral_map(m: &CMat, f: impl Fn(f64) -> f64) -> Option<CMat> {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
        return None;
    }
    let mut q = eig.eigenvectors.clone();
    for (j, v) in eig.eigenvalues.iter().enumerate() {
        let fv = f(*v);
        q.column_mut(j).scale_mut(fv);
    }
    Some(herm(q * eig.eigenvectors.adjoint()))
}

fn hs_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest `alpha` with `X + alpha dX >= 0`, given the Cholesky factor of `X`.
fn max_step(l: &CMat, dx: &CMat) -> f64 {
    let Some(t) = l.solve_lower_triangular(dx) else {
        return 0.0;
    };
    let Some(s) = l.solve_lower_triangular(&t.adjoint()) else {
        return 0.0;
    };
    let lmin = herm(s)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if lmin < 0.0 {
        -1.0 / lmin
    } else {
        f64::INFINITY
    }
}

struct IpmOutcome {
    x: CMat,
    y: Vec<f64>,
    pobj: f64,
    converged: bool,
    diverging: bool,
    diagnostics: SolveDiagnostics,
}

/// Primal-dual interior-point method for
/// `min <C,X> s.t. <A_k,X> = b_k, X >= 0` with dual
/// `max b^T y s.t. C - sum y_k A_k = Z >= 0`. The rows must be mutually
/// HS-orthogonal.
fn interior_point(c: &CMat, rows: &[CMat], b: &[f64], x0: CMat, settings: &SolverSettings) -> IpmOutcome {
    let d = c.nrows();
    let m = rows.len();
    let df = d as f64;
    let eye = CMat::identity(d, d);
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cnorm = hs_norm(c);
    let row_norms: Vec<f64> = rows.iter().map(|a| re_trace_prod(a, a)).collect();

    let mut x = x0;
    let mut z = eye.scale(1.0 + cnorm);
    let mut y = vec![0.0; m];

    let mut best: Option<(f64, CMat, Vec<f64>, f64, SolveDiagnostics)> = None;
    let mut since_best = 0usize;
    let mut converged = false;
    let mut diverging = false;
    let mut iterations = 0usize;

    for it in 0..settings.max_iter {
        iterations = it;
        let ax: Vec<f64> = rows.iter().map(|a| re_trace_prod(a, &x)).collect();
        let rp: Vec<f64> = b.iter().zip(&ax).map(|(bk, v)| bk - v).collect();
        let mut rd = c - &z;
        for (a, yk) in rows.iter().zip(&y) {
            rd -= a.scale(*yk);
        }
        let mu = re_trace_prod(&x, &z) / df;
        let pobj = re_trace_prod(c, &x);
        let dobj: f64 = b.iter().zip(&y).map(|(p, q)| p * q).sum();
        let pres = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + bnorm);
        let dres = hs_norm(&rd) / (1.0 + cnorm);
        let gap = (pobj - dobj).abs().max(df * mu.abs()) / (1.0 + pobj.abs().min(dobj.abs()));
        let merit = gap.max(pres).max(dres);
        trace!("ipm it {it}: pobj {pobj:.6e} gap {gap:.2e} pres {pres:.2e} dres {dres:.2e}");

        let diag = SolveDiagnostics {
            iterations: it,
            primal_residual: pres,
            dual_residual: dres,
            gap,
            rank: m,
            phase_one_margin: None,
            face_dim: d,
        };
        let improved = best.as_ref().is_none_or(|(bm, ..)| merit < 0.5 * bm);
        if best.as_ref().is_none_or(|(bm, ..)| merit < *bm) {
            best = Some((merit, x.clone(), y.clone(), pobj, diag));
        }
        if improved {
            since_best = 0;
        } else {
            since_best += 1;
        }
        if merit <= settings.target_tol {
            converged = true;
            break;
        }
        if since_best >= 20 {
            break;
        }
        let ynorm = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if ynorm > 1e10 || hs_norm(&x) > 1e10 {
            diverging = true;
            break;
        }

        let (Some(zchol), Some(xchol)) = (z.clone().cholesky(), x.clone().cholesky()) else {
            break;
        };
        let xl = xchol.l();
        let zl = zchol.l();

        // NT scaling W with W Z W = X, G = W^(1/2), V = G Z G = G^-1 X G^-1
        let Some(xh) = spectral_map(&x, f64::sqrt) else { break };
        let Some(s_isqrt) = spectral_map(&herm(&xh * &z * &xh), |v| 1.0 / v.sqrt()) else {
            break;
        };
        let wmat = herm(&xh * s_isqrt * &xh);
        let (Some(g), Some(ginv)) = (spectral_map(&wmat, f64::sqrt), spectral_map(&wmat, |v| 1.0 / v.sqrt())) else {
            break;
        };
        let vmat = herm(&g * &z * &g);
        let veig = vmat.clone().symmetric_eigen();
        let (vq, vv) = (veig.eigenvectors, veig.eigenvalues);
        if vv.iter().any(|v| *v <= 0.0) {
            break;
        }

        // Schur complement M_kj = Re Tr(A_k W A_j W)
        let wa: Vec<CMat> = rows.iter().map(|a| &wmat * a * &wmat).collect();
        let mut schur = DMatrix::<f64>::zeros(m, m);
        for k in 0..m {
            for j in k..m {
                let v = re_trace_prod(&rows[k], &wa[j]);
                schur[(k, j)] = v;
                schur[(j, k)] = v;
            }
        }
        let schur_chol = match schur.clone().cholesky() {
            Some(ch) => ch,
            None => {
                let reg = 1e-14 * (0..m).map(|k| schur[(k, k)]).fold(1.0, f64::max);
                match (schur + DMatrix::<f64>::identity(m, m).scale(reg)).cholesky() {
                    Some(ch) => ch,
                    None => break,
                }
            }
        };
        let wrdw = &wmat * &rd * &wmat;

        // rt is the scaled complementarity residual in the eigenbasis of V;
        // solves V U + U V = rt and returns (dy, dX, dZ)
        let direction = |rt: &CMat| -> (Vec<f64>, CMat, CMat) {
            let mut u = rt.clone();
            for i in 0..d {
                for j in 0..d {
                    u[(i, j)] /= vv[i] + vv[j];
                }
            }
            let u = &vq * u * vq.adjoint();
            let gug = herm(&g * u * &g);
            let t = &gug - &wrdw;
            let rhs = DVector::from_iterator(m, rows.iter().zip(&rp).map(|(a, r)| r - re_trace_prod(a, &t)));
            let dy = schur_chol.solve(&rhs);
            let mut dz = rd.clone();
            for (a, v) in rows.iter().zip(dy.iter()) {
                dz -= a.scale(*v);
            }
            let dz = herm(dz);
            let mut dx = herm(gug - &wmat * &dz * &wmat);
            // restore A(dX) = r_p lost to Schur round-off (rows are orthogonal)
            for ((a, r), n2) in rows.iter().zip(&rp).zip(&row_norms) {
                let c = (r - re_trace_prod(a, &dx)) / n2;
                dx += a.scale(c);
            }
            (dy.iter().copied().collect(), dx, dz)
        };

        let mut rt = CMat::zeros(d, d);
        for i in 0..d {
            rt[(i, i)] = Complex64::new(-2.0 * vv[i] * vv[i], 0.0);
        }
        let (_, dxa, dza) = direction(&rt);
        let ap = (settings.step_fraction * max_step(&xl, &dxa)).min(1.0);
        let ad = (settings.step_fraction * max_step(&zl, &dza)).min(1.0);
        let mu_aff = re_trace_prod(&(&x + dxa.scale(ap)), &(&z + dza.scale(ad))) / df;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
        let dxs = vq.adjoint() * &ginv * &dxa * &ginv * &vq;
        let dzs = vq.adjoint() * &g * &dza * &g * &vq;
        let cross = &dxs * &dzs;
        let mut rt = -(&cross + cross.adjoint());
        for i in 0..d {
            rt[(i, i)] += Complex64::new(2.0 * (sigma * mu - vv[i] * vv[i]), 0.0);
        }
        let (dy, dx, dz) = direction(&rt);

        let frac = settings.step_fraction.min(0.9 + 0.09 * ap.min(ad));
        let ap = (frac * max_step(&xl, &dx)).min(1.0);
        let ad = (frac * max_step(&zl, &dz)).min(1.0);
        if ap < 1e-12 && ad < 1e-12 {
            break;
        }
        x = herm(&x + dx.scale(ap));
        z = herm(&z + dz.scale(ad));
        for (yk, dk) in y.iter_mut().zip(&dy) {
            *yk += ad * dk;
        }
    }

    let (merit, bx, by, bobj, mut diag) = best.expect("at least one iterate");
    diag.iterations = iterations + 1;
    let converged = converged || merit <= settings.accept_tol;
    IpmOutcome {
        x: bx,
        y: by,
        pobj: bobj,
        converged,
        diverging,
        diagnostics: diag,
    }
}

struct PhaseOne {
    /// Upper bound on `max lambda_min` over the slice.
    margin: f64,
    /// Slice point attaining the margin.
    center: HermitianOperator,
    /// PSD operator in the constraint span with unit trace whose overlap with
    /// every slice point equals `margin`.
    certificate: HermitianOperator,
}

/// `max t` such that some point of the slice satisfies `rho >= t I`.
///
/// Solved through its dual `min <X_p, W> s.t. <N_j, W> = 0, Tr W = 1, W >= 0`,
/// which is strictly feasible at `W = I/d`.
fn phase_one(reduced: &ReducedConstraints, settings: &SolverSettings) -> Option<PhaseOne> {
    let d = reduced.dim;
    let xp = reduced.particular();
    let null = reduced.null_space();
    let mut rows: Vec<CMat> = null.iter().map(|n| n.matrix().clone()).collect();
    rows.push(CMat::identity(d, d));
    let mut b = vec![0.0; null.len()];
    b.push(1.0);
    let x0 = CMat::identity(d, d).scale(1.0 / d as f64);
    let out = interior_point(xp.matrix(), &rows, &b, x0, settings);
    trace!("phase one: converged {} pobj {:.3e}", out.converged, out.pobj);
    if !out.converged {
        return None;
    }
    let center = null.iter().zip(&out.y).fold(xp, |acc, (n, yj)| acc.axpy(-yj, n));
    Some(PhaseOne {
        margin: out.pobj,
        center,
        certificate: HermitianOperator::symmetrized(out.x),
    })
}

/// Margin at or below which the feasible set is treated as lying in a proper
/// face of the state space.
const FACE_TOL: f64 = 1e-9;
/// Relative eigenvalue level of the phase-one certificate that spans the face.
const FACE_KERNEL_TOL: f64 = 1e-6;
/// Largest refined residual `|W Q| + |<W, X>|` accepted for a face kernel.
const KERNEL_RESIDUAL_TOL: f64 = 1e-7;

/// Isometry onto the `r` lowest eigenvectors of a PSD certificate.
///
/// Interior-point certificates pin their kernel only to about the square
/// root of the final gap, so the kernel is refined by damped Gauss-Newton on
/// `W(c) Q = 0`, `sum c_k b_k = 0` with `W(c) = sum c_k G_k` ranging over
/// the constraint rows. Returns `None` if the refined residual stays above
/// [`KERNEL_RESIDUAL_TOL`], meaning the certificate has no `r`-dimensional
/// kernel.
fn certificate_kernel(cert: &HermitianOperator, reduced: &ReducedConstraints, r: usize) -> Option<CMat> {
    let span = &reduced.rows;
    let (_, vecs) = cert.eigen();
    let d = vecs.nrows();
    if r == 1 {
        return fit_pure_state(vecs.column(0).into_owned(), reduced)
            .map(|v| CMat::from_column_slice(d, 1, v.as_slice()));
    }
    let weight = |c: &[f64]| {
        span.iter()
            .zip(c)
            .fold(CMat::zeros(d, d), |acc, (g, ck)| acc + g.matrix().scale(*ck))
    };
    let value = |c: &[f64]| c.iter().zip(&reduced.values).map(|(a, b)| a * b).sum::<f64>();
    let residual = |c: &[f64], basis: &CMat| {
        let q = basis.columns(0, r).into_owned();
        hs_norm(&(weight(c) * q)) + value(c).abs()
    };
    // move the kernel to `Q + Q_perp X` and complete to a unitary
    let rotate = |basis: &CMat, x: &CMat| {
        let q = basis.columns(0, r).into_owned();
        let qp = basis.columns(r, d - r).into_owned();
        let mut full = CMat::zeros(d, d);
        full.columns_mut(0, r).copy_from(&(&q + &qp * x));
        full.columns_mut(r, d - r).copy_from(&qp);
        full.qr().q()
    };

    let mut c: Vec<f64> = span.iter().map(|g| hs_dot(g, cert)).collect();
    let mut basis = vecs;
    let mut resn = residual(&c, &basis);
    let width = span.len() + 2 * (d - r) * r;
    for _ in 0..30 {
        trace!("face refinement residual {resn:.3e}");
        if resn < 1e-15 {
            break;
        }
        let q = basis.columns(0, r).into_owned();
        let qp = basis.columns(r, d - r).into_owned();
        let w = weight(&c);
        // unknowns: coefficient steps, then Re/Im of the rotation X
        let eqs = 2 * d * r + 2;
        let mut jac = DMatrix::<f64>::zeros(eqs, width);
        let mut rhs = DVector::<f64>::zeros(eqs);
        let put = |jac: &mut DMatrix<f64>, col: usize, m: &CMat| {
            for (i, z) in m.iter().enumerate() {
                jac[(2 * i, col)] = z.re;
                jac[(2 * i + 1, col)] = z.im;
            }
        };
        for (k, g) in span.iter().enumerate() {
            put(&mut jac, k, &(g.matrix() * &q));
            jac[(eqs - 2, k)] = g.trace();
            jac[(eqs - 1, k)] = reduced.values[k];
        }
        rhs[eqs - 1] = -value(&c);
        let wqp = &w * &qp;
        for i in 0..d - r {
            for j in 0..r {
                let mut e = CMat::zeros(d - r, r);
                e[(i, j)] = Complex64::new(1.0, 0.0);
                let col = span.len() + 2 * (i * r + j);
                put(&mut jac, col, &(&wqp * &e));
                e[(i, j)] = Complex64::new(0.0, 1.0);
                put(&mut jac, col + 1, &(&wqp * &e));
            }
        }
        for (i, z) in (&w * &q).iter().enumerate() {
            rhs[2 * i] = -z.re;
            rhs[2 * i + 1] = -z.im;
        }
        let step = jac.svd(true, true).solve(&rhs, 1e-10).ok()?;
        // backtrack until the residual drops
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let c_new: Vec<f64> = c.iter().zip(step.iter()).map(|(ck, dk)| ck + t * dk).collect();
            let mut x = CMat::zeros(d - r, r);
            for i in 0..d - r {
                for j in 0..r {
                    let col = span.len() + 2 * (i * r + j);
                    x[(i, j)] = Complex64::new(t * step[col], t * step[col + 1]);
                }
            }
            let b_new = rotate(&basis, &x);
            let r_new = residual(&c_new, &b_new);
            if r_new < resn {
                c = c_new;
                basis = b_new;
                resn = r_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (resn <= KERNEL_RESIDUAL_TOL).then(|| basis.columns(0, r).into_owned())
}

/// Gauss-Newton on `q^dag G_k q = b_k` from a nearby unit vector; used when
/// the feasible set is a single pure state.
fn fit_pure_state(mut q: DVector<Complex64>, reduced: &ReducedConstraints) -> Option<DVector<Complex64>> {
    let d = q.len();
    let m = reduced.len();
    for _ in 0..20 {
        let gq: Vec<DVector<Complex64>> = reduced.rows.iter().map(|g| g.matrix() * &q).collect();
        let res = DVector::from_iterator(m, gq.iter().zip(&reduced.values).map(|(v, b)| q.dotc(v).re - b));
        let rn = res.amax();
        trace!("pure state fit residual {rn:.3e}");
        if rn < 1e-15 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(m, 2 * d);
        for (k, v) in gq.iter().enumerate() {
            for i in 0..d {
                jac[(k, i)] = 2.0 * v[i].re;
                jac[(k, d + i)] = 2.0 * v[i].im;
            }
        }
        let step = jac.svd(true, true).solve(&(-res), 1e-12).ok()?;
        for i in 0..d {
            q[i] += Complex64::new(step[i], step[d + i]);
        }
    }
    let n = q.norm();
    Some(q.unscale(n))
}

fn compress(q: &CMat, op: &HermitianOperator) -> HermitianOperator {
    HermitianOperator::symmetrized(q.adjoint() * op.matrix() * q)
}

fn minimize(objective: &HermitianOperator, spec: &CompatibleSetSpec, settings: &SolverSettings) -> SdpSolution {
    let d = spec.dim;
    // isometry onto the current face; starts as the whole space
    let mut q = CMat::identity(d, d);
    let mut constraints: Vec<(HermitianOperator, f64, f64)> = spec
        .constraints
        .iter()
        .map(|(a, y)| (a.clone(), *y, a.hs_norm()))
        .collect();
    let mut obj = objective.clone();
    let mut diagnostics = SolveDiagnostics::default();
    let mut consistency_tol = INFEASIBILITY_TOL;

    let restore = |q: &CMat, r: &HermitianOperator| HermitianOperator::symmetrized(q * r.matrix() * q.adjoint());

    loop {
        let dr = q.ncols();
        diagnostics.face_dim = dr;
        let Ok(reduced) = ReducedConstraints::build(dr, &constraints, consistency_tol) else {
            debug!("affine constraints inconsistent on face of dimension {dr}");
            return SdpSolution::without_point(SdpStatus::Infeasible, diagnostics);
        };
        let rank = reduced.len();
        diagnostics.rank = rank;

        if rank == dr * dr {
            // the slice is a single point
            let point = reduced.particular();
            let lmin = point.min_eigenvalue();
            diagnostics.phase_one_margin = Some(lmin);
            let restored = restore(&q, &if lmin < 0.0 { clip_psd(&point) } else { point });
            let point = match polish_pure(&restored, spec) {
                Some(pure) => pure,
                None if lmin < -INFEASIBILITY_TOL => {
                    return SdpSolution::without_point(SdpStatus::Infeasible, diagnostics);
                }
                None => restored,
            };
            let value = hs_dot(&point, objective);
            return SdpSolution::optimal(value, DensityMatrix::from_operator_unchecked(point), diagnostics);
        }

        let Some(p1) = phase_one(&reduced, settings) else {
            debug!("phase one did not converge on face of dimension {dr}");
            return SdpSolution::without_point(SdpStatus::NumericalFailure, diagnostics);
        };
        diagnostics.phase_one_margin = Some(p1.margin);
        if p1.margin < -INFEASIBILITY_TOL {
            return SdpSolution::without_point(SdpStatus::Infeasible, diagnostics);
        }
        if p1.margin <= FACE_TOL {
            // the numerical kernel may be too small; widen it until the
            // compressed constraints are consistent
            let vals = p1.certificate.eigenvalues();
            let top = vals.iter().copied().fold(0.0, f64::max);
            let r0 = vals.iter().filter(|&&v| v <= FACE_KERNEL_TOL * top).count().max(1);
            let kernels: Vec<(CMat, Vec<_>)> = (r0..dr)
                .filter_map(|r| {
                    let k = certificate_kernel(&p1.certificate, &reduced, r)?;
                    let compressed: Vec<_> = constraints.iter().map(|(a, y, n)| (compress(&k, a), *y, *n)).collect();
                    Some((k, compressed))
                })
                .collect();
            let consistent = |tol: f64| {
                kernels
                    .iter()
                    .find(|(k, c)| ReducedConstraints::build(k.ncols(), c, tol).is_ok())
                    .cloned()
            };
            // A cut tangent to the state space leaves a face whose kernel is
            // known only to about the square root of the margin; accept that
            // much inconsistency before giving up.
            let relaxed = (10.0 * p1.margin.abs().sqrt()).clamp(consistency_tol, 1e-4);
            let face = consistent(consistency_tol).or_else(|| {
                let f = consistent(relaxed);
                if f.is_some() {
                    debug!("face accepted at relaxed consistency {relaxed:.1e}");
                    consistency_tol = relaxed;
                }
                f
            });
            let Some((k, compressed)) = face else {
                debug!("no consistent face found at margin {:.2e}", p1.margin);
                return SdpSolution::without_point(SdpStatus::NumericalFailure, diagnostics);
            };
            trace!(
                "restricting to face of dimension {} (margin {:.2e})",
                k.ncols(),
                p1.margin
            );
            constraints = compressed;
            obj = compress(&k, &obj);
            q = &q * k;
            continue;
        }

        // congruence by the phase-one center maps it to the identity
        let Some(sqrt_c) = spectral_map(p1.center.matrix(), f64::sqrt) else {
            return SdpSolution::without_point(SdpStatus::NumericalFailure, diagnostics);
        };
        let scale = |a: &HermitianOperator| HermitianOperator::symmetrized(&sqrt_c * a.matrix() * &sqrt_c);
        let scaled: Vec<(HermitianOperator, f64, f64)> = reduced
            .rows
            .iter()
            .zip(&reduced.values)
            .map(|(g, &b)| {
                let sg = scale(g);
                let n = sg.hs_norm();
                (sg, b, n)
            })
            .collect();
        let (rows, values) = match orthonormalize(scaled, consistency_tol) {
            Ok(rv) => rv,
            Err(()) => return SdpSolution::without_point(SdpStatus::NumericalFailure, diagnostics),
        };
        let rows: Vec<CMat> = rows.iter().map(|g| g.matrix().clone()).collect();
        let chat = scale(&obj);
        let mut out = interior_point(chat.matrix(), &rows, &values, CMat::identity(dr, dr), settings);
        // thin slices can lose definiteness near the optimum; shorter steps
        // stay closer to the central path
        for step_fraction in [0.9, 0.7] {
            if out.converged || out.diverging {
                break;
            }
            let cautious = SolverSettings {
                step_fraction,
                ..*settings
            };
            let retry = interior_point(chat.matrix(), &rows, &values, CMat::identity(dr, dr), &cautious);
            if retry.converged {
                out = retry;
            }
        }
        let face = diagnostics.face_dim;
        diagnostics = SolveDiagnostics {
            rank,
            phase_one_margin: Some(p1.margin),
            face_dim: face,
            ..out.diagnostics.clone()
        };
        debug!(
            "sdp solve: face {face}, rank {rank}, {} iterations, gap {:.2e}, pres {:.2e}, dres {:.2e}",
            diagnostics.iterations, diagnostics.gap, diagnostics.primal_residual, diagnostics.dual_residual
        );
        if !out.converged {
            debug!("sdp numerical failure (diverging: {})", out.diverging);
            return SdpSolution::without_point(SdpStatus::NumericalFailure, diagnostics);
        }
        let raw = HermitianOperator::symmetrized(&sqrt_c * out.x * &sqrt_c);
        let projected = reduced.project(&raw);
        let point = if projected.min_eigenvalue() >= -PSD_TOL {
            projected
        } else {
            raw
        };
        let point = restore(&q, &point);
        let value = hs_dot(&point, objective);
        return SdpSolution::optimal(value, DensityMatrix::from_operator_unchecked(point), diagnostics);
    }
}

/// The pure state satisfying the original constraints near `point`, if
/// Gauss-Newton finds one. Faces recovered from numerical certificates blur
/// a pure singleton into a slightly mixed or slightly indefinite point.
fn polish_pure(point: &HermitianOperator, spec: &CompatibleSetSpec) -> Option<HermitianOperator> {
    let (vals, vecs) = point.eigen();
    let d = point.dim();
    if d == 1 || 1.0 - vals[d - 1] > 1e-5 {
        return None;
    }
    let rows: Vec<_> = spec
        .constraints
        .iter()
        .map(|(a, y)| (a.clone(), *y, a.hs_norm()))
        .collect();
    let top = ReducedConstraints::build(d, &rows, INFEASIBILITY_TOL).ok()?;
    let v = fit_pure_state(vecs.column(d - 1).into_owned(), &top)?;
    let pure = HermitianOperator::outer(&v);
    (spec.max_violation(&pure) <= 1e-12).then_some(pure)
}

fn clip_psd(op: &HermitianOperator) -> HermitianOperator {
    let clipped = op.map_spectrum(|v| v.max(0.0));
    let tr = clipped.trace();
    clipped.scale(1.0 / tr)
}

/// Extremal value of `Tr(rho C)` over `{rho >= 0, Tr rho = 1} ∩ spec`.
pub fn extremize_linear(objective: &HermitianOperator, spec: &CompatibleSetSpec, sense: Sense) -> Result<SdpSolution> {
    extremize_linear_with(objective, spec, sense, &SolverSettings::default())
}

pub fn extremize_linear_with(
    objective: &HermitianOperator,
    spec: &CompatibleSetSpec,
    sense: Sense,
    settings: &SolverSettings,
) -> Result<SdpSolution> {
    if objective.dim() != spec.dim {
        return Err(QsvError::DimensionMismatch {
            expected: spec.dim,
            found: objective.dim(),
        });
    }
    Ok(match sense {
        Sense::Min => minimize(objective, spec, settings),
        Sense::Max => {
            let mut sol = minimize(&objective.scale(-1.0), spec, settings);
            sol.value = sol.value.map(|v| -v);
            sol
        }
    })
}

/// Range of Bures distances to a pure target over a compatible set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceExtrema {
    pub min_dist: f64,
    pub max_dist: f64,
    pub max_fidelity: f64,
    pub min_fidelity: f64,
}

fn require_pure(rho0: &DensityMatrix) -> Result<()> {
    if !rho0.is_pure() {
        return Err(QsvError::NotPure((rho0.purity() - 1.0).abs()));
    }
    Ok(())
}

/// Optimal fidelity `Tr(rho rho0)` and the optimizer.
fn fidelity_extremum(rho0: &DensityMatrix, spec: &CompatibleSetSpec, sense: Sense) -> Result<(f64, DensityMatrix)> {
    // A target that already satisfies every constraint attains fidelity one.
    if sense == Sense::Max && spec.dim() == rho0.dim() && spec.max_violation(rho0.operator()) <= 1e-12 {
        return Ok((1.0, rho0.clone()));
    }
    extremize_linear(rho0.operator(), spec, sense)?.into_result()
}

/// Smallest Bures distance to `rho0` over the set (the rejection test).
pub fn min_distance(rho0: &DensityMatrix, spec: &CompatibleSetSpec) -> Result<f64> {
    require_pure(rho0)?;
    let (f, _) = fidelity_extremum(rho0, spec, Sense::Max)?;
    Ok(bures_from_infidelity(1.0 - f))
}

/// Largest Bures distance to `rho0` over the set (the acceptance test).
pub fn max_distance(rho0: &DensityMatrix, spec: &CompatibleSetSpec) -> Result<f64> {
    require_pure(rho0)?;
    let (f, _) = fidelity_extremum(rho0, spec, Sense::Min)?;
    Ok(bures_from_infidelity(1.0 - f))
}

/// Both Bures extrema; `min_dist <= max_dist`.
pub fn distance_extrema(rho0: &DensityMatrix, spec: &CompatibleSetSpec) -> Result<DistanceExtrema> {
    Ok(distance_extrema_with_estimate(rho0, spec)?.0)
}

/// [`distance_extrema`] together with the closest compatible state, which
/// is the optimizer of the minimum-distance problem.
pub fn distance_extrema_with_estimate(
    rho0: &DensityMatrix,
    spec: &CompatibleSetSpec,
) -> Result<(DistanceExtrema, DensityMatrix)> {
    require_pure(rho0)?;
    let (fmax, estimate) = fidelity_extremum(rho0, spec, Sense::Max)?;
    let (fmin, _) = fidelity_extremum(rho0, spec, Sense::Min)?;
    let fmin = fmin.min(fmax);
    let ext = DistanceExtrema {
        min_dist: bures_from_infidelity(1.0 - fmax),
        max_dist: bures_from_infidelity(1.0 - fmin),
        max_fidelity: fmax,
        min_fidelity: fmin,
    };
    Ok((ext, estimate))
}

/// Closest compatible state to `rho0` in Bures distance.
pub fn estimate_state(rho0: &DensityMatrix, spec: &CompatibleSetSpec) -> Result<DensityMatrix> {
    require_pure(rho0)?;
    let (_, rho) = fidelity_extremum(rho0, spec, Sense::Max)?;
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermitian::{pauli_projector_set, random_pure_target};

    fn qubit() -> ObservableSet {
        pauli_projector_set(1).unwrap()
    }

    #[test]
    fn pinned_state() {
        let set = qubit();
        let zp = set.observables()[4].clone();
        let spec = CompatibleSetSpec::with_constraints(2, vec![(zp.clone(), 1.0)]).unwrap();
        let sol = extremize_linear(&zp, &spec, Sense::Min).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.value.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equator_slice() {
        let set = qubit();
        let xp = set.observables()[0].clone();
        let zp = set.observables()[4].clone();
        let spec = CompatibleSetSpec::with_constraints(2, vec![(xp, 0.5)]).unwrap();
        let max = extremize_linear(&zp, &spec, Sense::Max).unwrap();
        let min = extremize_linear(&zp, &spec, Sense::Min).unwrap();
        assert!((max.value.unwrap() - 1.0).abs() < 1e-8);
        assert!(min.value.unwrap().abs() < 1e-8);
    }

    #[test]
    fn inconsistent_trace_is_infeasible() {
        let set = qubit();
        let spec = CompatibleSetSpec::with_constraints(
            2,
            vec![(set.observables()[4].clone(), 1.0), (set.observables()[5].clone(), 0.5)],
        )
        .unwrap();
        let sol = extremize_linear(&set.observables()[0], &spec, Sense::Min).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn psd_infeasible_slice_is_detected() {
        let set = qubit();
        // Tr(rho P) = 1.2 is affine-consistent but outside the state space
        let spec = CompatibleSetSpec::with_constraints(2, vec![(set.observables()[0].clone(), 1.2)]).unwrap();
        let sol = extremize_linear(&set.observables()[4], &spec, Sense::Min).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        assert!(sol.diagnostics.phase_one_margin.unwrap() < -INFEASIBILITY_TOL);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = CompatibleSetSpec::new(4);
        assert!(extremize_linear(&HermitianOperator::identity(2), &spec, Sense::Min).is_err());
        let mut spec = CompatibleSetSpec::new(4);
        assert!(spec.push(HermitianOperator::identity(2), 0.5).is_err());
        assert!(spec.push(HermitianOperator::identity(4), f64::NAN).is_err());
    }

    #[test]
    fn distance_extrema_examples() {
        let set = pauli_projector_set(2).unwrap();
        let rho0 = random_pure_target(42, 4).unwrap();
        let spec = CompatibleSetSpec::from_state(&set, &[3, 17, 30], &rho0).unwrap();
        let ext = distance_extrema(&rho0, &spec).unwrap();
        assert!(ext.min_dist < 1e-5);
        assert!(ext.min_dist <= ext.max_dist);

        let ext = distance_extrema(&rho0, &CompatibleSetSpec::new(4)).unwrap();
        assert!((ext.max_dist - 2f64.sqrt()).abs() < 1e-6);
        assert!(ext.min_dist < 1e-5);
    }

    #[test]
    fn unconstrained_estimate_is_target() {
        let rho0 = random_pure_target(9, 4).unwrap();
        let est = estimate_state(&rho0, &CompatibleSetSpec::new(4)).unwrap();
        assert!((hs_dot(est.operator(), rho0.operator()) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn tomographically_complete_estimate_is_unique_point() {
        let set = pauli_projector_set(2).unwrap();
        let rho0 = random_pure_target(1, 4).unwrap();
        let rho = crate::hermitian::perturb_state_seeded(&rho0, 0.1, 0.1, 5).unwrap();
        let all: Vec<usize> = (0..36).collect();
        let spec = CompatibleSetSpec::from_state(&set, &all, &rho).unwrap();
        let est = estimate_state(&rho0, &spec).unwrap();
        assert!(crate::hermitian::hs_distance(est.operator(), rho.operator()).unwrap() < 1e-6);
        let ext = distance_extrema(&rho0, &spec).unwrap();
        let truth = crate::hermitian::bures_pure(&rho, &rho0).unwrap();
        assert!((ext.min_dist - truth).abs() < 1e-7 && (ext.max_dist - truth).abs() < 1e-7);
    }

    #[test]
    fn estimate_with_target_statistics_has_unit_fidelity() {
        let set = pauli_projector_set(2).unwrap();
        let rho0 = random_pure_target(77, 4).unwrap();
        let spec = CompatibleSetSpec::from_state(&set, &[0, 7, 14, 21, 35], &rho0).unwrap();
        let est = estimate_state(&rho0, &spec).unwrap();
        assert!((hs_dot(est.operator(), rho0.operator()) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn optimizers_satisfy_constraints() {
        let set = pauli_projector_set(2).unwrap();
        for seed in 0..20 {
            let rho0 = random_pure_target(seed, 4).unwrap();
            let rho = crate::hermitian::perturb_state_seeded(&rho0, 0.1, 0.1, seed).unwrap();
            let idx: Vec<usize> = (0..(seed as usize % 9 + 1))
                .map(|k| (k * 7 + seed as usize) % 36)
                .collect();
            let spec = CompatibleSetSpec::from_state(&set, &idx, &rho).unwrap();
            for sense in [Sense::Min, Sense::Max] {
                let sol = extremize_linear(rho0.operator(), &spec, sense).unwrap();
                assert_eq!(sol.status, SdpStatus::Optimal, "seed {seed}");
                let opt = sol.optimizer.as_ref().unwrap();
                assert!(spec.max_violation(opt.operator()) < CONSTRAINT_TOL);
                assert!(opt.operator().min_eigenvalue() >= -PSD_TOL);
                assert!((hs_dot(opt.operator(), rho0.operator()) - sol.value.unwrap()).abs() < 1e-7);
            }
        }
    }
    // Long randomized sweep; run with `--ignored` and `N=<count>`.
    #[test]
    #[ignore]
    fn stress() {
        use rand::{Rng, SeedableRng};
        let set = pauli_projector_set(2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut fails = 0;
        let mut worst: f64 = 0.0;
        let mut iters = 0;
        let n: u64 = std::env::var("N").map(|s| s.parse().unwrap()).unwrap_or(400);
        for seed in 0..n {
            let rho0 = random_pure_target(seed, 4).unwrap();
            let lam = if seed % 2 == 0 { 1e-4 } else { 0.1 };
            let rho = crate::hermitian::perturb_state_seeded(&rho0, lam, 0.1, seed).unwrap();
            let k = rng.random_range(0..16usize);
            let mut idx: Vec<usize> = (0..36).collect();
            for i in 0..k {
                let j = rng.random_range(i..36);
                idx.swap(i, j);
            }
            idx.truncate(k);
            let src = if seed % 3 == 0 { &rho0 } else { &rho };
            let spec = CompatibleSetSpec::from_state(&set, &idx, src).unwrap();
            for sense in [Sense::Min, Sense::Max] {
                let sol = extremize_linear(rho0.operator(), &spec, sense).unwrap();
                iters += sol.diagnostics.iterations;
                let d = &sol.diagnostics;
                let m = d.gap.max(d.primal_residual).max(d.dual_residual);
                if sol.status != SdpStatus::Optimal {
                    fails += 1;
                    println!("fail seed {seed} k {k} {sense:?} {d:?}");
                } else if d.rank < 16 {
                    worst = worst.max(m);
                }
            }
        }
        println!(
            "fails {fails} worst merit {worst:e} mean iters {}",
            iters as f64 / (2 * n) as f64
        );
    }
}
