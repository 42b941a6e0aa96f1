//! Covariance building blocks: the rational quadratic kernel over years, the
//! CAR precision over years, and the zero-mean matrix Gaussian used for both
//! the coefficient prior and the predictor-mean prior.
//!
//! Conventions used throughout:
//!
//! * A `P x T` coefficient matrix `B` has one row per predictor and one
//!   column per year.  Stacking its rows (equivalently `vec(B^T)`) gives a
//!   `PT` vector whose covariance is the Kronecker product
//!   `Lambda^-1 (x) C`, with `Lambda` the `P x P` row precision and `C` the
//!   `T x T` column covariance.
//! * Covariance matrices are factorized with a small diagonal jitter; a
//!   factorization failure is reported as a numerical error (or, inside
//!   samplers, as a rejection of the proposed parameter value).

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::std_normal;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Relative diagonal jitter applied before factorizing a kernel matrix.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Parameters of the rational quadratic kernel.
///
/// `kappa1` is the precision (inverse marginal variance), `kappa2` the
/// squared length scale, and `kappa3` the mixture index: the kernel equals a
/// scale mixture of squared-exponential kernels and approaches the squared
/// exponential with length scale `sqrt(kappa2)` as `kappa3 -> inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RqParams {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
}

impl RqParams {
    pub fn new(kappa1: f64, kappa2: f64, kappa3: f64) -> Result<Self> {
        let params = RqParams {
            kappa1,
            kappa2,
            kappa3,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("kappa3", self.kappa3),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!(
                    "rational quadratic parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn component(&self, d: usize) -> f64 {
        match d {
            0 => self.kappa1,
            1 => self.kappa2,
            2 => self.kappa3,
            _ => panic!("kappa component index {d} out of range"),
        }
    }

    pub fn with_component(&self, d: usize, value: f64) -> Self {
        let mut out = *self;
        match d {
            0 => out.kappa1 = value,
            1 => out.kappa2 = value,
            2 => out.kappa3 = value,
            _ => panic!("kappa component index {d} out of range"),
        }
        out
    }
}

/// Rational quadratic covariance over the given time points:
/// `C[j,k] = (1/kappa1) * (1 + (t_j - t_k)^2 / (kappa2 * kappa3))^(-kappa3)`.
///
/// Returns the exact kernel matrix (no jitter); errors if any entry fails to
/// evaluate to a finite number, which samplers treat as a rejection of the
/// proposed parameters.
pub fn rq_covariance(params: &RqParams, time_points: &[f64]) -> Result<DMatrix<f64>> {
    params.validate()?;
    let t = time_points.len();
    let mut c = DMatrix::zeros(t, t);
    for j in 0..t {
        for k in 0..=j {
            let d = time_points[j] - time_points[k];
            let base = 1.0 + d * d / (params.kappa2 * params.kappa3);
            let value = base.powf(-params.kappa3) / params.kappa1;
            if !value.is_finite() {
                return Err(Error::numerical(format!(
                    "rational quadratic kernel overflowed at lag {d} with {params:?}"
                )));
            }
            c[(j, k)] = value;
            c[(k, j)] = value;
        }
    }
    Ok(c)
}

/// Cholesky factorization after adding `jitter` to every diagonal entry.
pub fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
    jitter: f64,
) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let mut m = matrix.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m)
}

/// Factorize a rational quadratic kernel matrix, applying the conventional
/// relative jitter `rel_jitter / kappa1` (the kernel diagonal is `1/kappa1`,
/// so the jitter is relative to the marginal variance).
pub fn rq_cholesky(
    params: &RqParams,
    time_points: &[f64],
    rel_jitter: f64,
) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let c = rq_covariance(params, time_points)?;
    cholesky_with_jitter(&c, rel_jitter / params.kappa1).ok_or_else(|| {
        Error::numerical(format!(
            "rational quadratic kernel not positive definite for {params:?}"
        ))
    })
}

/// Parameters of the proper CAR precision `Q = tau * (D - rho * Omega)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub tau: f64,
    pub rho: f64,
}

impl CarParams {
    pub fn new(tau: f64, rho: f64) -> Result<Self> {
        let params = CarParams { tau, rho };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::validation(format!(
                "CAR scale tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::validation(format!(
                "CAR dependence rho must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Chain-graph adjacency over `t` ordered time points: ones on the first
/// off-diagonals, zero elsewhere.
pub fn chain_adjacency(t: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::zeros(t, t);
    for i in 1..t {
        omega[(i, i - 1)] = 1.0;
        omega[(i - 1, i)] = 1.0;
    }
    omega
}

/// Validate an adjacency matrix: square, symmetric, zero diagonal,
/// non-negative entries, and no isolated vertex (a zero row would make the
/// CAR precision singular).
pub fn validate_adjacency(omega: &DMatrix<f64>) -> Result<()> {
    if omega.nrows() != omega.ncols() {
        return Err(Error::validation("adjacency matrix must be square"));
    }
    for i in 0..omega.nrows() {
        if omega[(i, i)] != 0.0 {
            return Err(Error::validation(
                "adjacency matrix must have zero diagonal",
            ));
        }
        let mut row_sum = 0.0;
        for j in 0..omega.ncols() {
            let v = omega[(i, j)];
            if v < 0.0 || !v.is_finite() {
                return Err(Error::validation(
                    "adjacency entries must be finite and non-negative",
                ));
            }
            if (v - omega[(j, i)]).abs() > 0.0 {
                return Err(Error::validation("adjacency matrix must be symmetric"));
            }
            row_sum += v;
        }
        if row_sum == 0.0 {
            return Err(Error::validation(format!(
                "adjacency row {i} has no neighbors; CAR precision would be singular"
            )));
        }
    }
    Ok(())
}

/// Unscaled CAR structure matrix `R = D - rho * Omega` with `D` the diagonal
/// of adjacency row sums.  Positive definite for `rho` in `(-1, 1)`.
pub fn car_structure(rho: f64, omega: &DMatrix<f64>) -> DMatrix<f64> {
    let t = omega.nrows();
    let mut r = DMatrix::zeros(t, t);
    for i in 0..t {
        let mut degree = 0.0;
        for j in 0..t {
            degree += omega[(i, j)];
            r[(i, j)] = -rho * omega[(i, j)];
        }
        r[(i, i)] += degree;
    }
    r
}

/// CAR precision `Q = tau * (D - rho * Omega)`.
pub fn car_precision(params: &CarParams, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    params.validate()?;
    validate_adjacency(omega)?;
    Ok(car_structure(params.rho, omega) * params.tau)
}

/// Zero-mean matrix Gaussian on `P x T` matrices with row precision `Lambda`
/// and column covariance `C` (equivalently, covariance `Lambda^-1 (x) C` for
/// the row-stacked vector).
///
/// Construction factorizes both scale matrices once; `sample` and
/// `log_density` then cost one triangular solve and one matrix product each.
/// The zeroed triangular factors are stored directly so that products never
/// touch the garbage upper triangle nalgebra leaves in its internal storage.
pub struct MatrixNormalSpec {
    p: usize,
    t: usize,
    /// Upper factor `L_Lambda^T` of the row precision.
    row_lt: DMatrix<f64>,
    /// Lower factor of the column covariance (or precision).
    col_l: DMatrix<f64>,
    col_is_precision: bool,
    log_det_row_prec: f64,
    /// `log |C|`; for the precision variant this is `-log |Q|`.
    log_det_col_cov: f64,
}

fn lower_factor(matrix: &DMatrix<f64>, jitter: f64, what: &str) -> Result<DMatrix<f64>> {
    cholesky_with_jitter(matrix, jitter)
        .map(|chol| chol.l())
        .ok_or_else(|| Error::numerical(format!("{what} is not positive definite")))
}

fn log_det_from_lower(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

impl MatrixNormalSpec {
    /// Build from row precision and column covariance.
    pub fn with_col_covariance(
        row_precision: &DMatrix<f64>,
        col_covariance: &DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        let row_l = lower_factor(row_precision, jitter, "row precision matrix")?;
        let col_l = lower_factor(col_covariance, jitter, "column covariance matrix")?;
        Ok(MatrixNormalSpec {
            p: row_precision.nrows(),
            t: col_covariance.nrows(),
            log_det_row_prec: log_det_from_lower(&row_l),
            log_det_col_cov: log_det_from_lower(&col_l),
            row_lt: row_l.transpose(),
            col_l,
            col_is_precision: false,
        })
    }

    /// Build from row precision and column *precision* (used when the column
    /// scale is naturally a precision, e.g. a CAR matrix).
    pub fn with_col_precision(
        row_precision: &DMatrix<f64>,
        col_precision: &DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        let row_l = lower_factor(row_precision, jitter, "row precision matrix")?;
        let col_l = lower_factor(col_precision, jitter, "column precision matrix")?;
        Ok(MatrixNormalSpec {
            p: row_precision.nrows(),
            t: col_precision.nrows(),
            log_det_row_prec: log_det_from_lower(&row_l),
            log_det_col_cov: -log_det_from_lower(&col_l),
            row_lt: row_l.transpose(),
            col_l,
            col_is_precision: true,
        })
    }

    /// Build from a row precision and an already-factorized column covariance
    /// (e.g. a cached rational quadratic factor).
    pub fn from_parts(
        row_precision: &DMatrix<f64>,
        col_cov_chol: &Cholesky<f64, nalgebra::Dyn>,
        jitter: f64,
    ) -> Result<Self> {
        let row_l = lower_factor(row_precision, jitter, "row precision matrix")?;
        let col_l = col_cov_chol.l();
        Ok(MatrixNormalSpec {
            p: row_precision.nrows(),
            t: col_l.nrows(),
            log_det_row_prec: log_det_from_lower(&row_l),
            log_det_col_cov: log_det_from_lower(&col_l),
            row_lt: row_l.transpose(),
            col_l,
            col_is_precision: false,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.p, self.t)
    }

    /// Draw one `P x T` matrix: `X = L_Lambda^-T Z M` with `Z` iid standard
    /// normal and `M` chosen so that `M^T M` equals the column covariance.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let z = DMatrix::from_fn(self.p, self.t, |_, _| std_normal(rng));
        // Solve L_Lambda^T W = Z so W = L^-T Z has row covariance Lambda^-1.
        let w = self
            .row_lt
            .solve_upper_triangular(&z)
            .expect("triangular solve with positive diagonal cannot fail");
        if self.col_is_precision {
            // M = L_Q^-1: M^T M = (L_Q L_Q^T)^-1 = Q^-1.
            self.col_l
                .solve_lower_triangular(&w.transpose())
                .expect("triangular solve with positive diagonal cannot fail")
                .transpose()
        } else {
            // M = L_C^T: M^T M = L_C L_C^T = C.
            &w * self.col_l.transpose()
        }
    }

    /// Log density at `x`, including the full normalizing constant:
    /// `-(PT/2) ln 2pi + (T/2} ln|Lambda| - (P/2) ln|C| - tr(C^-1 x^T Lambda x)/2`.
    pub fn log_density(&self, x: &DMatrix<f64>) -> f64 {
        debug_assert_eq!(x.nrows(), self.p);
        debug_assert_eq!(x.ncols(), self.t);
        // U = L_Lambda^T X gives x^T Lambda x = U^T U.
        let u = &self.row_lt * x;
        let quad = if self.col_is_precision {
            // tr(Q U^T U) = || U L_Q ||_F^2.
            (&u * &self.col_l).norm_squared()
        } else {
            // tr(C^-1 U^T U) = || L_C^-1 U^T ||_F^2.
            self.col_l
                .solve_lower_triangular(&u.transpose())
                .expect("triangular solve with positive diagonal cannot fail")
                .norm_squared()
        };
        let pt = (self.p * self.t) as f64;
        -0.5 * pt * LN_2PI + 0.5 * self.t as f64 * self.log_det_row_prec
            - 0.5 * self.p as f64 * self.log_det_col_cov
            - 0.5 * quad
    }
}

/// Draw from a Wishart distribution with `df` degrees of freedom and the
/// given scale matrix, via the Bartlett decomposition.  Requires
/// `df > P - 1`.
pub fn sample_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !(df > p as f64 - 1.0) {
        return Err(Error::validation(format!(
            "Wishart degrees of freedom {df} must exceed dimension - 1 = {}",
            p - 1
        )));
    }
    let l = cholesky_with_jitter(scale, 0.0)
        .or_else(|| cholesky_with_jitter(scale, 1e-10 * scale.diagonal().mean()))
        .map(|c| c.l())
        .ok_or_else(|| Error::numerical("Wishart scale matrix is not positive definite"))?;
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::numerical(format!("chi-squared parameter error: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}
