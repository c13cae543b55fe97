//! Positive-definite-safe linear algebra and scalar root finding.
//!
//! Every covariance in the crate is stored as an [`SpdMatrix`], which keeps
//! the symmetrized matrix next to its lower Cholesky factor. Square roots are
//! always the lower-triangular Cholesky factor so sigma points are
//! reproducible.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative jitter added to the diagonal on the first Cholesky retry.
const JITTER_SCALE: f64 = 1e-12;
/// Number of tenfold jitter escalations after the first retry.
const JITTER_ESCALATIONS: usize = 3;

/// Returns `(M + M^T) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    assert!(m.is_square(), "symmetrize needs a square matrix");
    (m + m.transpose()) * 0.5
}

fn plain_cholesky(m: &Matrix) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

/// Cholesky factorization with the jitter escalation policy.
///
/// On failure the input is symmetrized and `eps * I` is added, with
/// `eps = 1e-12 * trace / n`, escalating tenfold at most three times.
/// Returns the (possibly jittered) matrix together with its factor.
fn factor_with_jitter(m: &Matrix, context: &'static str) -> Result<(Matrix, Matrix)> {
    if let Some(ch) = plain_cholesky(m) {
        return Ok((m.clone(), ch.l()));
    }
    let sym = symmetrize(m);
    let n = sym.nrows();
    let base = JITTER_SCALE * sym.trace() / n as f64;
    if !(base > 0.0) || !base.is_finite() {
        return Err(Error::NotPositiveDefinite { context });
    }
    let mut eps = base;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut jittered = sym.clone();
        for i in 0..n {
            jittered[(i, i)] += eps;
        }
        if let Some(ch) = plain_cholesky(&jittered) {
            return Ok((jittered, ch.l()));
        }
        eps *= 10.0;
    }
    Err(Error::NotPositiveDefinite { context })
}

/// Lower Cholesky factor `L` with `L L^T = P`, jittering if needed.
pub fn cholesky_lower(p: &Matrix) -> Result<Matrix> {
    if !p.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            p.nrows(),
            p.ncols()
        )));
    }
    factor_with_jitter(p, "cholesky_lower").map(|(_, l)| l)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(p: &Matrix) -> f64 {
    if p.nrows() == 1 {
        return p[(0, 0)];
    }
    SymmetricEigen::new(symmetrize(p))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Eigenvalues of a symmetric matrix, unordered.
pub fn eigenvalues(p: &Matrix) -> Vector {
    if p.nrows() == 1 {
        return Vector::from_element(1, p[(0, 0)]);
    }
    SymmetricEigen::new(symmetrize(p)).eigenvalues
}

/// Symmetric positive definite matrix with a cached lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: Matrix,
    lower: Matrix,
}

impl SpdMatrix {
    /// Symmetrizes `m` and factors it, applying jitter when the plain
    /// factorization fails.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = symmetrize(&m);
        let (matrix, lower) = factor_with_jitter(&sym, "SpdMatrix::new")?;
        Ok(SpdMatrix { matrix, lower })
    }

    /// Like [`SpdMatrix::new`] but never jitters.
    pub fn strict(m: Matrix) -> Result<Self> {
        let sym = symmetrize(&m);
        let ch = plain_cholesky(&sym).ok_or(Error::NotPositiveDefinite {
            context: "SpdMatrix::strict",
        })?;
        Ok(SpdMatrix {
            lower: ch.l(),
            matrix: sym,
        })
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix {
            matrix: Matrix::identity(n, n),
            lower: Matrix::identity(n, n),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    /// Lower Cholesky factor.
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// `P^{-1} b`
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> Matrix {
        symmetrize(&self.solve(&Matrix::identity(self.dim(), self.dim())))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `v^T P^{-1} v`
    pub fn inv_quad_form(&self, v: &Vector) -> f64 {
        let y = self
            .lower
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    /// Gaussian log-density `log N(x; mean, P)`.
    pub fn gaussian_log_pdf(&self, residual: &Vector) -> f64 {
        let k = self.dim() as f64;
        -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + self.log_det() + self.inv_quad_form(residual))
    }
}

/// Bracket and stopping rule for [`bisect`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectionSpec {
    pub lower: f64,
    pub upper: f64,
    pub abs_tolerance: f64,
    pub max_iterations: usize,
}

impl BisectionSpec {
    pub const DEFAULT_TOLERANCE: f64 = 1e-12;
    pub const DEFAULT_MAX_ITERATIONS: usize = 200;

    pub fn new(lower: f64, upper: f64) -> Self {
        BisectionSpec {
            lower,
            upper,
            abs_tolerance: Self::DEFAULT_TOLERANCE,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn with_bracket(self, lower: f64, upper: f64) -> Self {
        BisectionSpec {
            lower,
            upper,
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(Error::Config(format!(
                "bisection needs lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if !(self.abs_tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(
                "bisection needs a positive tolerance and at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

impl Default for BisectionSpec {
    fn default() -> Self {
        BisectionSpec::new(0.0, 1.0)
    }
}

/// Finds a root of a continuous monotone `f` on `[spec.lower, spec.upper]`.
///
/// Stops once `|f(x)| <= abs_tolerance` or the bracket has shrunk to a few
/// ulps around its midpoint.
pub fn bisect<F>(mut f: F, spec: &BisectionSpec) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    spec.validate()?;
    let (mut lo, mut hi) = (spec.lower, spec.upper);
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo.abs() <= spec.abs_tolerance {
        return Ok(lo);
    }
    if f_hi.abs() <= spec.abs_tolerance {
        return Ok(hi);
    }
    if !(f_lo.signum() != f_hi.signum()) || f_lo.is_nan() || f_hi.is_nan() {
        return Err(Error::NoSignChange {
            lower: spec.lower,
            upper: spec.upper,
        });
    }
    for _ in 0..spec.max_iterations {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid.abs() <= spec.abs_tolerance {
            return Ok(mid);
        }
        let floor = 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
        if hi - lo <= floor {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::MaxIterations {
        iterations: spec.max_iterations,
    })
}
