//! Dense Hermitian operators, density matrices and the state/observable
//! ensembles used by the verification experiments.
//!
//! All operators are stored as `d x d` complex matrices. The Hilbert-Schmidt
//! inner product `Tr(AB)` is real for Hermitian arguments and is the metric
//! used throughout the crate for projections and spans.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QsvError, Result};

/// Max absolute entry deviation tolerated between a matrix and its adjoint.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Eigenvalue floor for density matrices.
pub const PSD_TOL: f64 = 1e-9;
/// Trace tolerance for density matrices.
pub const TRACE_TOL: f64 = 1e-9;
/// Tolerance on `|Tr(rho^2) - 1|` for a state to count as pure.
pub const PURITY_TOL: f64 = 1e-9;
/// Singular-value cutoff used for span ranks.
pub const RANK_TOL: f64 = 1e-9;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const C1: Complex64 = Complex64::new(1.0, 0.0);

/// A dense Hermitian matrix.
#[derive(Clone, PartialEq)]
pub struct HermitianOperator {
    mat: DMatrix<Complex64>,
}

impl fmt::Debug for HermitianOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HermitianOperator{}", self.mat)
    }
}

fn max_anti_hermitian(m: &DMatrix<Complex64>) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

impl HermitianOperator {
    /// Wraps a square matrix, checking Hermiticity within [`HERMITIAN_TOL`].
    /// The stored matrix is the exact Hermitian part `(M + M^dag) / 2`.
    pub fn new(mat: DMatrix<Complex64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() || mat.nrows() == 0 {
            return Err(QsvError::InvalidArgument(format!(
                "operator must be a non-empty square matrix, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let deviation = max_anti_hermitian(&mat);
        if deviation > HERMITIAN_TOL * (1.0 + mat.camax()) {
            return Err(QsvError::NotHermitian { deviation });
        }
        Ok(Self::symmetrized(mat))
    }

    /// Takes the Hermitian part of an arbitrary square matrix without checking.
    pub(crate) fn symmetrized(mat: DMatrix<Complex64>) -> Self {
        let adj = mat.adjoint();
        Self {
            mat: (mat + adj).scale(0.5),
        }
    }

    pub fn from_real_parts(re: &[Vec<f64>], im: &[Vec<f64>]) -> Result<Self> {
        let d = re.len();
        if im.len() != d || re.iter().chain(im.iter()).any(|row| row.len() != d) {
            return Err(QsvError::InvalidArgument(
                "re/im must both be square arrays of the same size".into(),
            ));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| Complex64::new(re[i][j], im[i][j])))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: DMatrix::zeros(dim, dim),
        }
    }

    /// `|v><v|`, not normalized.
    pub fn outer(v: &DVector<Complex64>) -> Self {
        let m = v * v.adjoint();
        Self::symmetrized(m)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            mat: DMatrix::from_fn(n, n, |i, j| if i == j { Complex64::new(values[i], 0.0) } else { C0 }),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.mat
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.mat[(i, i)].re).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { mat: self.mat.scale(s) }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        Self {
            mat: &self.mat + other.mat.scale(s),
        }
    }

    pub fn kron(&self, other: &Self) -> Self {
        Self {
            mat: self.mat.kronecker(&other.mat),
        }
    }

    /// Hilbert-Schmidt norm `sqrt(Tr(A^2))`.
    pub fn hs_norm(&self) -> f64 {
        self.hs_norm_sq().sqrt()
    }

    pub fn hs_norm_sq(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Real eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.mat.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Eigenvalues (ascending) with unit eigenvectors as columns.
    pub fn eigen(&self) -> (Vec<f64>, DMatrix<Complex64>) {
        let eig = self.mat.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..self.dim()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vecs = DMatrix::from_fn(self.dim(), self.dim(), |i, j| eig.eigenvectors[(i, order[j])]);
        (vals, vecs)
    }

    /// Applies a real function to the spectrum.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Self {
        let (vals, vecs) = self.eigen();
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (k, &v) in vals.iter().enumerate() {
            let col = vecs.column(k);
            m += (col * col.adjoint()).scale(f(v));
        }
        Self::symmetrized(m)
    }

    /// Coordinates in a fixed HS-orthonormal real basis of the Hermitian
    /// matrices: diagonal entries, then `sqrt(2) Re` and `sqrt(2) Im` of the
    /// strict upper triangle. `Tr(AB)` equals the dot product of coordinates.
    pub fn coordinates(&self) -> Vec<f64> {
        let d = self.dim();
        let s2 = std::f64::consts::SQRT_2;
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            out.push(self.mat[(i, i)].re);
        }
        for i in 0..d {
            for j in (i + 1)..d {
                out.push(s2 * self.mat[(i, j)].re);
                out.push(s2 * self.mat[(i, j)].im);
            }
        }
        out
    }

    /// Inverse of [`coordinates`](Self::coordinates).
    pub fn from_coordinates(dim: usize, coords: &[f64]) -> Self {
        debug_assert_eq!(coords.len(), dim * dim);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut mat = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            mat[(i, i)] = Complex64::new(coords[i], 0.0);
        }
        let mut k = dim;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let z = Complex64::new(r * coords[k], r * coords[k + 1]);
                mat[(i, j)] = z;
                mat[(j, i)] = z.conj();
                k += 2;
            }
        }
        Self { mat }
    }

    /// Serializable `{dim, re, im}` form.
    pub fn to_file(&self) -> OperatorFile {
        let d = self.dim();
        OperatorFile {
            dim: d,
            re: (0..d).map(|i| (0..d).map(|j| self.mat[(i, j)].re).collect()).collect(),
            im: (0..d).map(|i| (0..d).map(|j| self.mat[(i, j)].im).collect()).collect(),
        }
    }

    pub fn from_file(file: &OperatorFile) -> Result<Self> {
        let op = Self::from_real_parts(&file.re, &file.im)?;
        if op.dim() != file.dim {
            return Err(QsvError::DimensionMismatch {
                expected: file.dim,
                found: op.dim(),
            });
        }
        Ok(op)
    }
}

impl Add for &HermitianOperator {
    type Output = HermitianOperator;
    fn add(self, rhs: Self) -> HermitianOperator {
        HermitianOperator {
            mat: &self.mat + &rhs.mat,
        }
    }
}

impl Sub for &HermitianOperator {
    type Output = HermitianOperator;
    fn sub(self, rhs: Self) -> HermitianOperator {
        HermitianOperator {
            mat: &self.mat - &rhs.mat,
        }
    }
}

impl Mul<f64> for &HermitianOperator {
    type Output = HermitianOperator;
    fn mul(self, rhs: f64) -> HermitianOperator {
        self.scale(rhs)
    }
}

/// JSON wire form of a state or operator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OperatorFile {
    pub dim: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

fn check_dims(a: &HermitianOperator, b: &HermitianOperator) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(QsvError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// `Tr(ab)` without dimension checks. Only the real part survives for
/// Hermitian arguments.
#[inline]
pub(crate) fn hs_dot(a: &HermitianOperator, b: &HermitianOperator) -> f64 {
    a.mat
        .iter()
        .zip(b.mat.iter())
        .map(|(x, y)| x.re * y.re + x.im * y.im)
        .sum()
}

/// Hilbert-Schmidt inner product `Tr(ab)`.
pub fn hs_inner(a: &HermitianOperator, b: &HermitianOperator) -> Result<f64> {
    check_dims(a, b)?;
    Ok(hs_dot(a, b))
}

/// Hilbert-Schmidt distance `sqrt(Tr((a-b)^2))`.
pub fn hs_distance(a: &HermitianOperator, b: &HermitianOperator) -> Result<f64> {
    check_dims(a, b)?;
    Ok((a - b).hs_norm())
}

impl Serialize for HermitianOperator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for HermitianOperator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = OperatorFile::deserialize(d)?;
        Self::from_file(&file).map_err(serde::de::Error::custom)
    }
}

impl Serialize for DensityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.op.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let op = HermitianOperator::deserialize(d)?;
        Self::new(op).map_err(serde::de::Error::custom)
    }
}

/// A positive semidefinite, unit-trace Hermitian matrix.
#[derive(Clone, PartialEq)]
pub struct DensityMatrix {
    op: HermitianOperator,
}

impl fmt::Debug for DensityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DensityMatrix{}", self.op.mat)
    }
}

impl DensityMatrix {
    pub fn new(op: HermitianOperator) -> Result<Self> {
        let tr = op.trace();
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(QsvError::NotDensity(format!("trace {tr} != 1")));
        }
        let lmin = op.min_eigenvalue();
        if lmin < -PSD_TOL {
            return Err(QsvError::NotDensity(format!("min eigenvalue {lmin:e}")));
        }
        Ok(Self { op })
    }

    pub fn from_matrix(mat: DMatrix<Complex64>) -> Result<Self> {
        Self::new(HermitianOperator::new(mat)?)
    }

    /// `|psi><psi| / <psi|psi>`.
    pub fn from_pure(psi: &DVector<Complex64>) -> Result<Self> {
        let n = psi.norm_squared();
        if n <= 0.0 || !n.is_finite() {
            return Err(QsvError::InvalidArgument("zero state vector".into()));
        }
        Ok(Self {
            op: HermitianOperator::outer(psi).scale(1.0 / n),
        })
    }

    /// `I / d`.
    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            op: HermitianOperator::identity(dim).scale(1.0 / dim as f64),
        }
    }

    /// Non-validating constructor used after solves whose output is already
    /// known to satisfy the invariants up to solver noise.
    pub(crate) fn from_operator_unchecked(op: HermitianOperator) -> Self {
        Self { op }
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn operator(&self) -> &HermitianOperator {
        &self.op
    }

    pub fn into_operator(self) -> HermitianOperator {
        self.op
    }

    pub fn purity(&self) -> f64 {
        self.op.hs_norm_sq()
    }

    pub fn is_pure(&self) -> bool {
        (self.purity() - 1.0).abs() <= PURITY_TOL
    }

    /// `Tr(rho A)`.
    pub fn expectation(&self, a: &HermitianOperator) -> Result<f64> {
        hs_inner(&self.op, a)
    }

    /// Unit-norm eigenvector for the largest eigenvalue.
    pub fn leading_vector(&self) -> DVector<Complex64> {
        let (_, vecs) = self.op.eigen();
        vecs.column(self.dim() - 1).into_owned()
    }
}

/// Fidelity-based Bures distance `sqrt(2 (1 - sqrt(F)))` with `F` clamped to
/// `[0, 1]`.
pub fn bures_from_fidelity(fidelity: f64) -> f64 {
    let f = fidelity.clamp(0.0, 1.0);
    (2.0 * (1.0 - f.sqrt())).max(0.0).sqrt()
}

/// Bures distance computed from the infidelity `1 - F`; keeps full relative
/// precision when `F` is close to one.
pub fn bures_from_infidelity(infidelity: f64) -> f64 {
    let q = infidelity.clamp(0.0, 1.0);
    // 1 - sqrt(1 - q) = q / (1 + sqrt(1 - q))
    (2.0 * q / (1.0 + (1.0 - q).sqrt())).sqrt()
}

/// Inverse of [`bures_from_fidelity`]: the fidelity that corresponds to a
/// Bures radius.
pub fn fidelity_from_bures(distance: f64) -> f64 {
    let s = 1.0 - distance * distance / 2.0;
    s * s
}

/// Bures distance to a pure target, `sqrt(2(1 - sqrt(Tr(rho rho0))))`.
pub fn bures_pure(rho: &DensityMatrix, rho0: &DensityMatrix) -> Result<f64> {
    check_dims(&rho.op, &rho0.op)?;
    if !rho0.is_pure() {
        return Err(QsvError::NotPure((rho0.purity() - 1.0).abs()));
    }
    Ok(bures_from_fidelity(hs_dot(&rho.op, &rho0.op)))
}

/// A finite list of observables with display labels.
#[derive(Debug, Clone)]
pub struct ObservableSet {
    observables: Vec<HermitianOperator>,
    labels: Vec<String>,
}

impl ObservableSet {
    pub fn new(observables: Vec<HermitianOperator>, labels: Vec<String>) -> Result<Self> {
        if observables.is_empty() {
            return Err(QsvError::InvalidArgument("observable set is empty".into()));
        }
        if observables.len() != labels.len() {
            return Err(QsvError::InvalidArgument(format!(
                "{} observables but {} labels",
                observables.len(),
                labels.len()
            )));
        }
        let d = observables[0].dim();
        if let Some(bad) = observables.iter().find(|o| o.dim() != d) {
            return Err(QsvError::DimensionMismatch {
                expected: d,
                found: bad.dim(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(QsvError::InvalidArgument(format!("duplicate label {l}")));
            }
        }
        Ok(Self { observables, labels })
    }

    pub fn len(&self) -> usize {
        self.observables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observables.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.observables[0].dim()
    }

    pub fn observables(&self) -> &[HermitianOperator] {
        &self.observables
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> Option<&HermitianOperator> {
        self.observables.get(i)
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        let norm = normalize_label(label);
        self.labels.iter().position(|l| normalize_label(l) == norm)
    }

    /// Subset keeping the listed indices in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut obs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let o = self.observables.get(i).ok_or_else(|| {
                QsvError::InvalidArgument(format!("index {i} out of range for set of {}", self.len()))
            })?;
            obs.push(o.clone());
            labels.push(self.labels[i].clone());
        }
        Self::new(obs, labels)
    }
}

fn normalize_label(l: &str) -> String {
    l.replace('\u{2212}', "-")
        .replace('\u{2297}', "*")
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect()
}

fn single_qubit_projectors() -> Vec<(HermitianOperator, &'static str)> {
    let i = Complex64::new(0.0, 1.0);
    let h = |a: Complex64, b: Complex64, c: Complex64, d: Complex64| {
        HermitianOperator::symmetrized(DMatrix::from_row_slice(2, 2, &[a, b, c, d]))
    };
    let half = Complex64::new(0.5, 0.0);
    let ih = i * 0.5;
    vec![
        (h(half, half, half, half), "x+"),
        (h(half, -half, -half, half), "x\u{2212}"),
        (h(half, -ih, ih, half), "y+"),
        (h(half, ih, -ih, half), "y\u{2212}"),
        (h(C1, C0, C0, C0), "z+"),
        (h(C0, C0, C0, C1), "z\u{2212}"),
    ]
}

/// Rank-one eigenprojectors of the Pauli matrices and their tensor products.
///
/// The single-qubit order is `x+, x-, y+, y-, z+, z-`; the n-qubit set lists
/// all `6^n` products lexicographically with the first qubit outermost, so
/// for two qubits element `6i + j` is `P_i (x) P_j`.
pub fn pauli_projector_set(n_qubits: usize) -> Result<ObservableSet> {
    if n_qubits == 0 {
        return Err(QsvError::InvalidArgument("n_qubits must be positive".into()));
    }
    let base = single_qubit_projectors();
    let mut ops: Vec<(HermitianOperator, String)> = base.iter().map(|(p, l)| (p.clone(), (*l).to_string())).collect();
    for _ in 1..n_qubits {
        let mut next = Vec::with_capacity(ops.len() * 6);
        for (p, l) in &ops {
            for (q, m) in &base {
                next.push((p.kron(q), format!("{l}\u{2297}{m}")));
            }
        }
        ops = next;
    }
    let (obs, labels) = ops.into_iter().unzip();
    ObservableSet::new(obs, labels)
}

/// Expands Pauli-projector labels such as `"x+⊗z-"` (ASCII `-` and `*`
/// accepted as well).
pub fn pauli_projectors_from_labels(labels: &[String]) -> Result<ObservableSet> {
    let base = single_qubit_projectors();
    let mut obs = Vec::with_capacity(labels.len());
    for label in labels {
        let norm = normalize_label(label);
        let mut acc: Option<HermitianOperator> = None;
        for factor in norm.split('*') {
            let p = base
                .iter()
                .find(|(_, l)| normalize_label(l) == factor)
                .map(|(p, _)| p.clone())
                .ok_or_else(|| QsvError::Parse(format!("unknown Pauli factor {factor:?} in {label:?}")))?;
            acc = Some(match acc {
                None => p,
                Some(a) => a.kron(&p),
            });
        }
        obs.push(acc.ok_or_else(|| QsvError::Parse(format!("empty label {label:?}")))?);
    }
    ObservableSet::new(obs, labels.to_vec())
}

/// Dimension of the real span of a list of Hermitian operators.
pub fn span_rank(ops: &[&HermitianOperator]) -> usize {
    if ops.is_empty() {
        return 0;
    }
    let d2 = ops[0].dim() * ops[0].dim();
    let rows: Vec<Vec<f64>> = ops.iter().map(|o| o.coordinates()).collect();
    let m = DMatrix::from_fn(rows.len(), d2, |i, j| rows[i][j]);
    m.singular_values().iter().filter(|&&s| s > RANK_TOL).count()
}

/// True iff the observables together with the identity span all Hermitian
/// `d x d` matrices.
pub fn is_information_complete(set: &ObservableSet) -> bool {
    let id = HermitianOperator::identity(set.dim());
    let mut ops: Vec<&HermitianOperator> = set.observables().iter().collect();
    ops.push(&id);
    span_rank(&ops) == set.dim() * set.dim()
}

/// Generalized Gell-Mann matrices: `d^2 - 1` traceless Hermitian generators
/// with `Tr(G_m G_j) = 2 delta_mj`.
pub fn su_generators(dim: usize) -> Vec<HermitianOperator> {
    let mut out = Vec::with_capacity(dim * dim - 1);
    let i = Complex64::new(0.0, 1.0);
    for j in 0..dim {
        for k in (j + 1)..dim {
            let mut s = DMatrix::zeros(dim, dim);
            s[(j, k)] = C1;
            s[(k, j)] = C1;
            out.push(HermitianOperator { mat: s });
            let mut a = DMatrix::zeros(dim, dim);
            a[(j, k)] = -i;
            a[(k, j)] = i;
            out.push(HermitianOperator { mat: a });
        }
    }
    for l in 1..dim {
        let c = (2.0 / (l as f64 * (l as f64 + 1.0))).sqrt();
        let mut diag = vec![0.0; dim];
        for v in diag.iter_mut().take(l) {
            *v = c;
        }
        diag[l] = -c * l as f64;
        out.push(HermitianOperator::diag(&diag));
    }
    out
}

/// Haar-like random pure state from a Gaussian vector; uses the given RNG.
pub fn random_pure_state<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DensityMatrix {
    loop {
        let psi = DVector::from_fn(dim, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im)
        });
        if psi.norm_squared() > 1e-300 {
            return DensityMatrix::from_pure(&psi).expect("nonzero vector");
        }
    }
}

/// Pure target `|psi><psi|/<psi|psi>` with standard-normal real and imaginary
/// parts, deterministic under `seed`.
pub fn random_pure_target(seed: u64, dim: usize) -> Result<DensityMatrix> {
    if dim < 2 {
        return Err(QsvError::InvalidArgument("dim must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(random_pure_state(&mut rng, dim))
}

/// Parameters of the noisy-rotation perturbation
/// `rho = U((1 - lambda) rho0 + lambda I/4)U^dag`, `U = exp(i eta H)`,
/// `H = sum_j h_j G_j` with `G_0 = I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub lambda: f64,
    pub eta: f64,
    pub h: Vec<f64>,
}

pub const PERTURBATION_DIM: usize = 4;

impl PerturbationSpec {
    pub fn new(lambda: f64, eta: f64, h: Vec<f64>) -> Result<Self> {
        let spec = Self { lambda, eta, h };
        spec.validate()?;
        Ok(spec)
    }

    /// Draws the 16 coefficients uniformly from `(-1, 1)`.
    pub fn random<R: Rng + ?Sized>(lambda: f64, eta: f64, rng: &mut R) -> Result<Self> {
        let n = PERTURBATION_DIM * PERTURBATION_DIM;
        let h = (0..n)
            .map(|_| loop {
                let x: f64 = rng.random_range(-1.0..1.0);
                if x > -1.0 {
                    break x;
                }
            })
            .collect();
        Self::new(lambda, eta, h)
    }

    pub fn validate(&self) -> Result<()> {
        // the closed interval admits the exact-preparation and fully mixed limits
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(QsvError::InvalidArgument(format!(
                "lambda {} outside [0,1]",
                self.lambda
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(QsvError::InvalidArgument(format!("eta {} must be >= 0", self.eta)));
        }
        let n = PERTURBATION_DIM * PERTURBATION_DIM;
        if self.h.len() != n {
            return Err(QsvError::InvalidArgument(format!(
                "expected {n} coefficients, got {}",
                self.h.len()
            )));
        }
        if self.h.iter().any(|x| x.is_nan() || x.abs() >= 1.0) {
            return Err(QsvError::InvalidArgument("coefficients must lie in (-1,1)".into()));
        }
        Ok(())
    }

    /// The Hermitian generator `H`.
    pub fn hamiltonian(&self) -> HermitianOperator {
        let mut gens = vec![HermitianOperator::identity(PERTURBATION_DIM)];
        gens.extend(su_generators(PERTURBATION_DIM));
        gens.iter()
            .zip(&self.h)
            .fold(HermitianOperator::zeros(PERTURBATION_DIM), |acc, (g, &c)| {
                acc.axpy(c, g)
            })
    }
}

/// `exp(i t H)` via the eigendecomposition of `H`.
pub fn unitary_exp(h: &HermitianOperator, t: f64) -> DMatrix<Complex64> {
    let (vals, vecs) = h.eigen();
    let d = h.dim();
    let phases = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            Complex64::from_polar(1.0, t * vals[i])
        } else {
            C0
        }
    });
    &vecs * phases * vecs.adjoint()
}

/// Depolarize then rotate a two-qubit target.
pub fn perturb_state(rho0: &DensityMatrix, spec: &PerturbationSpec) -> Result<DensityMatrix> {
    if rho0.dim() != PERTURBATION_DIM {
        return Err(QsvError::DimensionMismatch {
            expected: PERTURBATION_DIM,
            found: rho0.dim(),
        });
    }
    spec.validate()?;
    let mixed = rho0.operator().scale(1.0 - spec.lambda).axpy(
        spec.lambda / PERTURBATION_DIM as f64,
        &HermitianOperator::identity(PERTURBATION_DIM),
    );
    let u = unitary_exp(&spec.hamiltonian(), spec.eta);
    let rotated = &u * mixed.matrix() * u.adjoint();
    // unitary conjugation keeps the trace; renormalize away rounding
    let op = HermitianOperator::symmetrized(rotated);
    let tr = op.trace();
    DensityMatrix::new(op.scale(1.0 / tr))
}

/// [`perturb_state`] with coefficients drawn from `seed`.
pub fn perturb_state_seeded(rho0: &DensityMatrix, lambda: f64, eta: f64, seed: u64) -> Result<DensityMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PerturbationSpec::random(lambda, eta, &mut rng)?;
    perturb_state(rho0, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ket(v: &[f64]) -> DVector<Complex64> {
        DVector::from_iterator(v.len(), v.iter().map(|&x| Complex64::new(x, 0.0)))
    }

    fn pauli(name: char) -> HermitianOperator {
        let i = Complex64::new(0.0, 1.0);
        let m = match name {
            'x' => DMatrix::from_row_slice(2, 2, &[C0, C1, C1, C0]),
            'y' => DMatrix::from_row_slice(2, 2, &[C0, -i, i, C0]),
            _ => DMatrix::from_row_slice(2, 2, &[C1, C0, C0, -C1]),
        };
        HermitianOperator::new(m).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        let i4 = HermitianOperator::identity(4);
        assert_eq!(hs_inner(&i4, &i4).unwrap(), 4.0);
        assert_eq!(hs_inner(&pauli('z'), &pauli('x')).unwrap(), 0.0);
        let set = pauli_projector_set(1).unwrap();
        let xp = &set.observables()[0];
        let zp = &set.observables()[4];
        assert!((hs_inner(zp, xp).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            hs_inner(&i4, &pauli('x')),
            Err(QsvError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distance_examples() {
        let zero = DensityMatrix::from_pure(&ket(&[1.0, 0.0])).unwrap();
        let one = DensityMatrix::from_pure(&ket(&[0.0, 1.0])).unwrap();
        let mixed = DensityMatrix::maximally_mixed(2);
        assert_eq!(hs_distance(zero.operator(), zero.operator()).unwrap(), 0.0);
        assert!((hs_distance(zero.operator(), one.operator()).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((hs_distance(zero.operator(), mixed.operator()).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bures_examples() {
        let zero = DensityMatrix::from_pure(&ket(&[1.0, 0.0])).unwrap();
        let one = DensityMatrix::from_pure(&ket(&[0.0, 1.0])).unwrap();
        assert_eq!(bures_pure(&zero, &zero).unwrap(), 0.0);
        assert!((bures_pure(&one, &zero).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((bures_from_fidelity(0.95) - 0.2250).abs() < 5e-5);
        let mixed = DensityMatrix::maximally_mixed(2);
        assert!(matches!(bures_pure(&zero, &mixed), Err(QsvError::NotPure(_))));
    }

    #[test]
    fn infidelity_form_agrees_with_fidelity_form() {
        for k in 0..=100 {
            let f = k as f64 / 100.0;
            assert!((bures_from_fidelity(f) - bures_from_infidelity(1.0 - f)).abs() < 1e-12);
        }
        assert!((fidelity_from_bures(bures_from_fidelity(0.95)) - 0.95).abs() < 1e-14);
    }

    #[test]
    fn single_qubit_projectors_are_ordered_eigenprojectors() {
        let set = pauli_projector_set(1).unwrap();
        assert_eq!(set.len(), 6);
        let id = HermitianOperator::identity(2);
        for (k, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
            let p = pauli(axis);
            let plus = id.axpy(1.0, &p).scale(0.5);
            let minus = id.axpy(-1.0, &p).scale(0.5);
            assert!(hs_distance(&set.observables()[2 * k], &plus).unwrap() < 1e-15);
            assert!(hs_distance(&set.observables()[2 * k + 1], &minus).unwrap() < 1e-15);
        }
        for p in set.observables() {
            let sq = HermitianOperator::new(p.matrix() * p.matrix()).unwrap();
            assert!(hs_distance(&sq, p).unwrap() < 1e-15);
            assert!((p.trace() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_qubit_set_layout() {
        let set = pauli_projector_set(2).unwrap();
        assert_eq!(set.len(), 36);
        let single = pauli_projector_set(1).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = single.observables()[i].kron(&single.observables()[j]);
                assert!(hs_distance(&set.observables()[6 * i + j], &expected).unwrap() < 1e-15);
            }
        }
        assert_eq!(set.label(5), "x+\u{2297}z\u{2212}");
        assert_eq!(set.index_of("z+*z+"), Some(28));
        assert!(pauli_projector_set(0).is_err());
    }

    #[test]
    fn labels_round_trip_through_parser() {
        let set = pauli_projector_set(2).unwrap();
        let parsed = pauli_projectors_from_labels(set.labels()).unwrap();
        for (a, b) in set.observables().iter().zip(parsed.observables()) {
            assert!(hs_distance(a, b).unwrap() < 1e-15);
        }
        assert!(pauli_projectors_from_labels(&["q+".to_string()]).is_err());
    }

    // Independent rank oracle: eigenvalues of the HS Gram matrix.
    fn gram_rank(ops: &[HermitianOperator]) -> usize {
        let n = ops.len();
        let g = DMatrix::from_fn(n, n, |i, j| hs_dot(&ops[i], &ops[j]));
        g.symmetric_eigenvalues().iter().filter(|&&v| v > 1e-9).count()
    }

    #[test]
    fn information_completeness() {
        let set = pauli_projector_set(2).unwrap();
        assert!(is_information_complete(&set));
        let mut ops = set.observables().to_vec();
        ops.push(HermitianOperator::identity(4));
        assert_eq!(gram_rank(&ops), 16);

        let single = pauli_projector_set(1).unwrap();
        let zonly = single.subset(&[4, 5]).unwrap();
        assert!(!is_information_complete(&zonly));

        // drop the 12 products whose first factor is a z projector
        let keep: Vec<usize> = (0..36).filter(|i| i / 6 < 4).collect();
        let reduced = set.subset(&keep).unwrap();
        let mut ops = reduced.observables().to_vec();
        ops.push(HermitianOperator::identity(4));
        let oracle = gram_rank(&ops);
        assert_eq!(oracle, 12);
        assert!(!is_information_complete(&reduced));
    }

    #[test]
    fn random_targets_are_pure_and_deterministic() {
        for seed in 0..20 {
            let r = random_pure_target(seed, 4).unwrap();
            assert!((r.operator().trace() - 1.0).abs() < 1e-10);
            assert!((r.purity() - 1.0).abs() < 1e-10);
            assert_eq!(r, random_pure_target(seed, 4).unwrap());
        }
        assert_ne!(random_pure_target(1, 4).unwrap(), random_pure_target(2, 4).unwrap());
        assert!(random_pure_target(0, 1).is_err());
    }

    #[test]
    fn gaussian_ensemble_mean_is_maximally_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let n = 10_000;
        let mut acc = DMatrix::<Complex64>::zeros(d, d);
        for _ in 0..n {
            acc += random_pure_state(&mut rng, d).operator().matrix();
        }
        acc /= Complex64::new(n as f64, 0.0);
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 / d as f64 } else { 0.0 };
                assert!((acc[(i, j)] - Complex64::new(target, 0.0)).norm() < 0.02);
            }
        }
    }

    #[test]
    fn su4_generators_are_orthogonal_and_traceless() {
        let g = su_generators(4);
        assert_eq!(g.len(), 15);
        for (m, a) in g.iter().enumerate() {
            assert!(a.trace().abs() < 1e-15);
            for (j, b) in g.iter().enumerate() {
                let expected = if m == j { 2.0 } else { 0.0 };
                assert!((hs_dot(a, b) - expected).abs() < 1e-14, "({m},{j})");
            }
        }
    }

    #[test]
    fn perturbation_limits() {
        let rho0 = random_pure_target(3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = PerturbationSpec::random(0.0, 0.0, &mut rng).unwrap();
        let same = perturb_state(&rho0, &spec).unwrap();
        assert!(hs_distance(same.operator(), rho0.operator()).unwrap() < 1e-14);

        let spec = PerturbationSpec::random(1.0, 0.7, &mut rng).unwrap();
        let mixed = perturb_state(&rho0, &spec).unwrap();
        assert!(hs_distance(mixed.operator(), DensityMatrix::maximally_mixed(4).operator()).unwrap() < 1e-12);

        let rho1 = random_pure_target(0, 2).unwrap();
        assert!(perturb_state(&rho1, &spec).is_err());
        assert!(PerturbationSpec::new(0.1, 0.1, vec![0.0; 3]).is_err());
        assert!(PerturbationSpec::new(0.1, 0.1, vec![1.0; 16]).is_err());
    }

    #[test]
    fn nonaccurate_perturbation_lowers_fidelity() {
        for seed in 0..50u64 {
            let rho0 = random_pure_target(seed, 4).unwrap();
            let rho = perturb_state_seeded(&rho0, 0.1, 0.1, seed + 1000).unwrap();
            let f = hs_dot(rho.operator(), rho0.operator());
            // depolarizing alone caps the fidelity at 0.925
            assert!(f <= 0.925 + 1e-12, "seed {seed}: F = {f}");
        }
    }

    #[test]
    fn perturbed_states_are_valid_density_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let rho0 = random_pure_state(&mut rng, 4);
            let lambda = rng.random_range(0.0..1.0);
            let eta = rng.random_range(0.0..3.0);
            let spec = PerturbationSpec::random(lambda, eta, &mut rng).unwrap();
            let rho = perturb_state(&rho0, &spec).unwrap();
            assert!(rho.operator().min_eigenvalue() >= -PSD_TOL);
            assert!((rho.operator().trace() - 1.0).abs() <= TRACE_TOL);
        }
    }

    #[test]
    fn file_round_trip() {
        let rho = random_pure_target(5, 4).unwrap();
        let file = rho.operator().to_file();
        let json = serde_json::to_string(&file).unwrap();
        let back: OperatorFile = serde_json::from_str(&json).unwrap();
        let op = HermitianOperator::from_file(&back).unwrap();
        assert!(hs_distance(&op, rho.operator()).unwrap() < 1e-15);
    }

    #[test]
    fn rejects_non_hermitian() {
        let m = DMatrix::from_row_slice(2, 2, &[C0, C1, C0, C0]);
        assert!(matches!(HermitianOperator::new(m), Err(QsvError::NotHermitian { .. })));
    }
}
