//! Full-conditional updates for every parameter block and the Gibbs sweep
//! orchestrator.
//!
//! The update functions at the top of the module are pure: they map
//! sufficient statistics to posterior parameters (or log kernels) and are
//! unit-tested against closed-form conjugate oracles.  [`Sampler`] wires
//! them to a [`Dataset`] in the sweep order: all coefficient matrices
//! (elliptical slice), all kernel parameters (slice on the log scale), all
//! row precisions (Wishart), cluster labels (auxiliary Gibbs), the
//! concentration, and — when predictors inform the partition — the latent
//! predictor means, their scale and dependence parameters, and the
//! predictor noise precision.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    car_structure, chain_adjacency, rq_cholesky, sample_wishart, MatrixNormalSpec, RqParams, LN_2PI,
};
use crate::linkage::Dataset;
use crate::mixture::{
    assign_clusters, draw_crp, update_alpha, BaseMeasure, ClusterState, LikContext, Mode,
};
use crate::numeric::std_normal;
use crate::slice::{slice_sample, SliceConfig};

/// Tuning and reproducibility knobs for one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_burn: usize,
    pub n_keep: usize,
    pub thin: usize,
    pub seed: u64,
    pub c_star: usize,
    pub mode: Mode,
    pub slice_width: f64,
    pub slice_max_steps: usize,
    pub jitter: f64,
    pub workers: usize,
    /// Average (rather than sum) latent values over a period's years in the
    /// observation mean — a sensitivity-analysis variant only.
    pub period_mean: bool,
    /// Gamma prior (shape, rate) on the concentration parameter.
    pub alpha_prior: (f64, f64),
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_burn: 2000,
            n_keep: 1000,
            thin: 5,
            seed: 0,
            c_star: 2,
            mode: Mode::Baseline,
            slice_width: 1.0,
            slice_max_steps: 50,
            jitter: 1e-8,
            workers: 1,
            period_mean: false,
            alpha_prior: (1.0, 1.0),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keep == 0 {
            return Err(Error::validation("need at least one retained draw"));
        }
        if self.thin == 0 {
            return Err(Error::validation("thinning interval must be at least 1"));
        }
        if self.c_star == 0 {
            return Err(Error::validation("need at least one auxiliary candidate"));
        }
        if !(self.slice_width > 0.0) {
            return Err(Error::validation("slice width must be positive"));
        }
        if self.slice_max_steps == 0 {
            return Err(Error::validation(
                "slice stepping-out budget must be at least 1",
            ));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::validation("jitter must be nonnegative and finite"));
        }
        if self.workers == 0 {
            return Err(Error::validation("need at least one worker"));
        }
        let (a, b) = self.alpha_prior;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::validation(
                "concentration prior parameters must be positive",
            ));
        }
        Ok(())
    }

    /// Total sweeps a full run performs.
    pub fn total_sweeps(&self) -> usize {
        self.n_burn + self.n_keep * self.thin
    }
}

/// Gaussian log density.
pub fn normal_log_density(y: f64, mean: f64, variance: f64) -> f64 {
    let d = y - mean;
    -0.5 * (LN_2PI + variance.ln()) - 0.5 * d * d / variance
}

/// Row-stacked vectorization: entry `(p, j)` of a `P x T` matrix lands at
/// position `p*T + j`.
pub fn vec_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.transpose().as_slice())
}

/// Inverse of [`vec_rows`].
pub fn unvec_rows(v: &DVector<f64>, p: usize, t: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(t, p, v.as_slice()).transpose()
}

/// One elliptical slice sampling step for a parameter with a zero-mean
/// matrix-normal prior.  Returns the new matrix and its log-likelihood;
/// never rejects (the bracket shrinks toward the current state, where the
/// likelihood exceeds the slice level).
pub fn ess_step<R, F>(
    current: &DMatrix<f64>,
    current_log_lik: f64,
    prior: &MatrixNormalSpec,
    log_lik: F,
    rng: &mut R,
) -> Result<(DMatrix<f64>, f64)>
where
    R: Rng + ?Sized,
    F: Fn(&DMatrix<f64>) -> f64,
{
    let nu = prior.sample(rng);
    let level = current_log_lik + rng.random::<f64>().ln();
    let mut theta = rng.random::<f64>() * std::f64::consts::TAU;
    let mut lo = theta - std::f64::consts::TAU;
    let mut hi = theta;
    for _ in 0..100 {
        let proposal = current * theta.cos() + &nu * theta.sin();
        let ll = log_lik(&proposal);
        if ll > level {
            return Ok((proposal, ll));
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
    Err(Error::numerical(
        "elliptical slice bracket failed to accept within 100 shrink steps",
    ))
}

/// Fitted one-year values of one county: `f_j = x_j' beta_j` for each year.
pub fn county_fitted_row(x: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols())
        .map(|j| x.column(j).dot(&b.column(j)))
        .collect()
}

/// Cross-product sufficient statistic for the kernel update:
/// `W_m = sum_{l in members} B_l^T Lambda B_l` (a `T x T` matrix).
pub fn coeff_cross_product(
    coeffs: &[DMatrix<f64>],
    members: &[usize],
    lambda_y: &DMatrix<f64>,
) -> DMatrix<f64> {
    let t = coeffs.first().map_or(0, |b| b.ncols());
    let mut w = DMatrix::zeros(t, t);
    for &l in members {
        let b = &coeffs[l];
        w += b.transpose() * lambda_y * b;
    }
    w
}

/// Log full-conditional kernel of the rational-quadratic parameters given
/// the cross-product statistic: `-c/2 ln|C(kappa)| - tr[C(kappa)^-1 W]/2`
/// where `c = n_m P`.  The gamma prior is added by the caller (on the log
/// scale, including the Jacobian).  Non-factorizable kernels yield `-inf`.
pub fn kappa_log_kernel(
    kappa: &RqParams,
    time_points: &[f64],
    w: &DMatrix<f64>,
    count_times_p: f64,
    jitter: f64,
) -> f64 {
    let chol = match rq_cholesky(kappa, time_points, jitter) {
        Ok(c) => c,
        Err(_) => return f64::NEG_INFINITY,
    };
    let log_det: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let trace = chol.solve(w).trace();
    -0.5 * count_times_p * log_det - 0.5 * trace
}

/// Slice-update all three kernel components of one cluster on the log
/// scale.  With an empty cluster (`count_times_p = 0`, `w = 0`) this
/// reproduces the gamma prior.
#[allow(clippy::too_many_arguments)]
pub fn slice_update_kappa<R: Rng + ?Sized>(
    kappa: &mut RqParams,
    time_points: &[f64],
    w: &DMatrix<f64>,
    count_times_p: f64,
    prior: (f64, f64),
    width: f64,
    max_steps: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<()> {
    let (a, b) = prior;
    let cfg = SliceConfig {
        width,
        max_steps,
        ..SliceConfig::default()
    };
    for d in 0..3 {
        let current = *kappa;
        let target = |z: f64| {
            let value = z.exp();
            if !value.is_finite() {
                return f64::NEG_INFINITY;
            }
            let candidate = current.with_component(d, value);
            kappa_log_kernel(&candidate, time_points, w, count_times_p, jitter) + a * z - b * value
        };
        let z0 = kappa.component(d).ln();
        let (z1, _) = slice_sample(z0, target, &cfg, rng);
        *kappa = kappa.with_component(d, z1.exp());
    }
    kappa.validate()
}

/// Wishart posterior parameters of a cluster's row precision: degrees of
/// freedom `n_m T + P + 1` and scale `(sum_l B_l C^-1 B_l^T + I)^-1`.
pub fn lambda_y_posterior(
    coeffs: &[DMatrix<f64>],
    members: &[usize],
    col_chol: &Cholesky<f64, Dyn>,
    p: usize,
) -> Result<(f64, DMatrix<f64>)> {
    let t = col_chol.l_dirty().nrows();
    let mut s = DMatrix::identity(p, p);
    let l = col_chol.l();
    for &m in members {
        let b = &coeffs[m];
        // B C^-1 B^T = W W^T with W^T = L^-1 B^T.
        let wt = l
            .solve_lower_triangular(&b.transpose())
            .ok_or_else(|| Error::numerical("column factor is singular"))?;
        s += wt.transpose() * &wt;
    }
    let df = (members.len() * t + p + 1) as f64;
    let scale = Cholesky::new(s)
        .ok_or_else(|| Error::numerical("row-precision posterior scale not positive definite"))?
        .inverse();
    Ok((df, scale))
}

/// Gaussian posterior of one county's latent predictor means, as
/// (mean vector, precision Cholesky) over the row-stacked `P*T` vector:
/// precision `H (x) I_T + Lambda_x (x) Q` and linear term `(H (x) I_T) x_v`.
pub fn delta_posterior(
    x: &DMatrix<f64>,
    h_x: &DMatrix<f64>,
    lambda_x: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
    let t = x.ncols();
    let identity_t = DMatrix::identity(t, t);
    let phi = h_x.kronecker(&identity_t) + lambda_x.kronecker(q);
    // (H (x) I_T) vec_rows(X) = vec_rows(H X).
    let e = vec_rows(&(h_x * x));
    let chol = Cholesky::new(phi).ok_or_else(|| {
        Error::numerical("predictor-mean posterior precision not positive definite")
    })?;
    let mean = chol.solve(&e);
    Ok((mean, chol))
}

/// Draw from a Gaussian given its mean and precision Cholesky factor.
pub fn sample_gaussian_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    prec_chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| std_normal(rng));
    let l = prec_chol.l();
    let noise = l
        .transpose()
        .solve_upper_triangular(&z)
        .expect("triangular solve with positive diagonal cannot fail");
    mean + noise
}

/// Gamma posterior (shape, rate) of a cluster's predictor-side scale:
/// shape `n_m T P / 2 + a`, rate `(sum_l tr[R Delta_l^T Lambda_x Delta_l] + b) / 2`.
pub fn tau_posterior(
    deltas: &[DMatrix<f64>],
    members: &[usize],
    lambda_x: &DMatrix<f64>,
    r_structure: &DMatrix<f64>,
    prior: (f64, f64),
) -> (f64, f64) {
    let (a, b) = prior;
    if members.is_empty() {
        return (a, b);
    }
    let p = lambda_x.nrows();
    let t = r_structure.nrows();
    let mut trace = 0.0;
    for &l in members {
        let d = &deltas[l];
        trace += (r_structure * d.transpose() * lambda_x * d).trace();
    }
    let shape = 0.5 * (members.len() * t * p) as f64 + a;
    let rate = 0.5 * (trace + b);
    (shape, rate)
}

/// Log full-conditional kernel of a cluster's dependence parameter:
/// `c/2 ln|D - rho Omega| + (tau rho / 2) tr[Omega S]` with
/// `S = sum_l Delta_l^T Lambda_x Delta_l` and `c = n_m P`; `-inf` outside
/// the stable region.
pub fn rho_log_kernel(
    rho: f64,
    count_times_p: f64,
    tau: f64,
    omega: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> f64 {
    if !(rho > -1.0 && rho < 1.0) {
        return f64::NEG_INFINITY;
    }
    let r = car_structure(rho, omega);
    let Some(chol) = Cholesky::new(r) else {
        return f64::NEG_INFINITY;
    };
    let log_det: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    0.5 * count_times_p * log_det + 0.5 * tau * rho * (omega * s).trace()
}

/// Slice-update a cluster's dependence parameter on `(-1, 1)`.
pub fn slice_update_rho<R: Rng + ?Sized>(
    rho: &mut f64,
    count_times_p: f64,
    tau: f64,
    omega: &DMatrix<f64>,
    s: &DMatrix<f64>,
    width: f64,
    max_steps: usize,
    rng: &mut R,
) -> Result<()> {
    let cfg = SliceConfig::bounded(width, max_steps, -1.0, 1.0);
    let (new, _) = slice_sample(
        *rho,
        |r| rho_log_kernel(r, count_times_p, tau, omega, s),
        &cfg,
        rng,
    );
    *rho = new;
    Ok(())
}

/// Wishart posterior of the predictor noise precision: degrees of freedom
/// `N T + P + 1` and scale `(sum_l (X_l - Delta_l)(X_l - Delta_l)^T + I)^-1`.
pub fn hx_posterior(xs: &[&DMatrix<f64>], deltas: &[DMatrix<f64>]) -> Result<(f64, DMatrix<f64>)> {
    let p = xs.first().map_or(0, |x| x.nrows());
    let t = xs.first().map_or(0, |x| x.ncols());
    let mut s = DMatrix::identity(p, p);
    for (x, d) in xs.iter().zip(deltas) {
        let resid = *x - d;
        s += &resid * resid.transpose();
    }
    let df = (xs.len() * t + p + 1) as f64;
    let scale = Cholesky::new(s)
        .ok_or_else(|| {
            Error::numerical("predictor-precision posterior scale not positive definite")
        })?
        .inverse();
    Ok((df, scale))
}

/// Continuous (non-partition) model parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientState {
    /// Per-county `P x T` coefficient matrices.
    pub coeffs: Vec<DMatrix<f64>>,
    /// Per-county latent predictor means (PPMx mode only).
    pub deltas: Option<Vec<DMatrix<f64>>>,
    /// Predictor noise precision (PPMx mode only).
    pub h_x: Option<DMatrix<f64>>,
}

/// Full model state: the partition plus the continuous parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerState {
    pub clusters: ClusterState,
    pub coeffs: CoefficientState,
}

impl SamplerState {
    /// Draw a complete state from the prior (used for chain initialization
    /// and by the joint-distribution test harness).
    pub fn draw_from_prior<R: Rng + ?Sized>(
        dataset: &Dataset,
        config: &ChainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let n = dataset.n_counties();
        let p = dataset.n_predictors();
        let t = dataset.n_years();
        let base = BaseMeasure::new(p, config.mode);
        let (a, b) = config.alpha_prior;
        let alpha = crate::numeric::draw_gamma(a, b, rng)?;
        let labels = crate::mixture::canonicalize(&draw_crp(n, alpha, rng));
        let n_clusters = labels.iter().copied().max().unwrap_or(0) + 1;
        let locations = (0..n_clusters)
            .map(|_| base.draw(rng))
            .collect::<Result<Vec<_>>>()?;
        let clusters = ClusterState::new(labels, locations, alpha, config.mode)?;

        let time_points = dataset.grid().time_points();
        let omega = chain_adjacency(t);
        let mut coeffs = Vec::with_capacity(n);
        for l in 0..n {
            let loc = clusters.location_of(l);
            let chol = rq_cholesky(&loc.kappa, time_points, config.jitter)?;
            let spec = MatrixNormalSpec::from_parts(&loc.lambda_y, &chol, config.jitter)?;
            coeffs.push(spec.sample(rng));
        }
        let (deltas, h_x) = match config.mode {
            Mode::Baseline => (None, None),
            Mode::Ppmx => {
                let mut deltas = Vec::with_capacity(n);
                for l in 0..n {
                    let ps = clusters
                        .location_of(l)
                        .predictor
                        .as_ref()
                        .expect("ppmx location has predictor side");
                    let q = crate::kernels::car_precision(
                        &crate::kernels::CarParams::new(ps.tau_x, ps.rho_x)?,
                        &omega,
                    )?;
                    let spec =
                        MatrixNormalSpec::with_col_precision(&ps.lambda_x, &q, config.jitter)?;
                    deltas.push(spec.sample(rng));
                }
                let h_x = sample_wishart(p as f64 + 1.0, &DMatrix::identity(p, p), rng)?;
                (Some(deltas), Some(h_x))
            }
        };
        Ok(SamplerState {
            clusters,
            coeffs: CoefficientState {
                coeffs,
                deltas,
                h_x,
            },
        })
    }

    pub fn check_invariants(&self, dataset: &Dataset, mode: Mode) -> Result<()> {
        self.clusters.check_invariants()?;
        let n = dataset.n_counties();
        let p = dataset.n_predictors();
        let t = dataset.n_years();
        if self.coeffs.coeffs.len() != n {
            return Err(Error::validation(
                "coefficient matrix count differs from counties",
            ));
        }
        for b in &self.coeffs.coeffs {
            if b.nrows() != p || b.ncols() != t {
                return Err(Error::validation("coefficient matrix dimension mismatch"));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("non-finite coefficient"));
            }
        }
        match mode {
            Mode::Baseline => {
                if self.coeffs.deltas.is_some() || self.coeffs.h_x.is_some() {
                    return Err(Error::validation(
                        "predictor-side state present in baseline mode",
                    ));
                }
            }
            Mode::Ppmx => {
                let deltas = self
                    .coeffs
                    .deltas
                    .as_ref()
                    .ok_or_else(|| Error::validation("missing latent predictor means"))?;
                if deltas.len() != n {
                    return Err(Error::validation("latent predictor mean count mismatch"));
                }
                if self.coeffs.h_x.is_none() {
                    return Err(Error::validation("missing predictor noise precision"));
                }
            }
        }
        Ok(())
    }
}

/// Cached per-observation fitted means `sum_{l in b} sum_{j in q} f_lj`
/// (times the period weight), kept incrementally consistent as coefficient
/// matrices change.
#[derive(Debug, Clone)]
pub struct ResidualCache {
    /// Fitted one-year values, counties by years.
    f: DMatrix<f64>,
    /// Fitted mean per observation.
    fitted: Vec<f64>,
    /// Period weight per observation (1, or 1/|q| with period averaging).
    weights: Vec<f64>,
}

impl ResidualCache {
    pub fn new(dataset: &Dataset, coeffs: &[DMatrix<f64>], period_mean: bool) -> Self {
        let n = dataset.n_counties();
        let t = dataset.n_years();
        let mut f = DMatrix::zeros(n, t);
        for l in 0..n {
            let row = county_fitted_row(dataset.predictors(l), &coeffs[l]);
            for (j, v) in row.into_iter().enumerate() {
                f[(l, j)] = v;
            }
        }
        let weights: Vec<f64> = dataset
            .observations()
            .iter()
            .map(|o| {
                if period_mean {
                    1.0 / dataset.periods().year_indices(o.period).len() as f64
                } else {
                    1.0
                }
            })
            .collect();
        let fitted = Self::compute_fitted(dataset, &f, &weights);
        ResidualCache { f, fitted, weights }
    }

    fn compute_fitted(dataset: &Dataset, f: &DMatrix<f64>, weights: &[f64]) -> Vec<f64> {
        dataset
            .observations()
            .iter()
            .enumerate()
            .map(|(r, obs)| {
                let mut total = 0.0;
                for &l in dataset.graph().membership(obs.block) {
                    for &j in dataset.periods().year_indices(obs.period) {
                        total += f[(l, j)];
                    }
                }
                weights[r] * total
            })
            .collect()
    }

    /// Fitted one-year values (counties by years).
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// Fitted mean of observation `r`.
    pub fn fitted(&self, r: usize) -> f64 {
        self.fitted[r]
    }

    /// Period weight of observation `r`.
    pub fn weight(&self, r: usize) -> f64 {
        self.weights[r]
    }

    /// County `l`'s own contribution to observation `r`'s fitted mean.
    pub fn county_contribution(&self, l: usize, r: usize, dataset: &Dataset) -> f64 {
        let obs = &dataset.observations()[r];
        let sum: f64 = dataset
            .periods()
            .year_indices(obs.period)
            .iter()
            .map(|&j| self.f[(l, j)])
            .sum();
        self.weights[r] * sum
    }

    /// Replace county `l`'s fitted row and refresh every affected
    /// observation.  Touched entries are recomputed with the same summation
    /// order as a from-scratch build, so the cache stays bitwise equal to a
    /// fresh one — required for exact checkpoint resumption.
    pub fn replace_county(&mut self, l: usize, new_row: &[f64], dataset: &Dataset) {
        for (j, &v) in new_row.iter().enumerate() {
            self.f[(l, j)] = v;
        }
        for &r in dataset.obs_of_county(l) {
            let obs = &dataset.observations()[r];
            let mut total = 0.0;
            for &member in dataset.graph().membership(obs.block) {
                for &j in dataset.periods().year_indices(obs.period) {
                    total += self.f[(member, j)];
                }
            }
            self.fitted[r] = self.weights[r] * total;
        }
    }

    /// Maximum relative disagreement between the incremental cache and a
    /// from-scratch recomputation.
    pub fn drift(&self, dataset: &Dataset) -> f64 {
        let fresh = Self::compute_fitted(dataset, &self.f, &self.weights);
        self.fitted
            .iter()
            .zip(&fresh)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    /// Recompute all fitted means from the current `f` matrix.
    pub fn rebuild(&mut self, dataset: &Dataset) {
        self.fitted = Self::compute_fitted(dataset, &self.f, &self.weights);
    }
}

/// Residual targets of county `l`: for each observation linked to `l`, the
/// observed value minus every other county-year's fitted contribution.
pub fn residual_for(l: usize, cache: &ResidualCache, dataset: &Dataset) -> Vec<(usize, f64)> {
    dataset
        .obs_of_county(l)
        .iter()
        .map(|&r| {
            let obs = &dataset.observations()[r];
            (
                r,
                obs.y - (cache.fitted(r) - cache.county_contribution(l, r, dataset)),
            )
        })
        .collect()
}

/// Per-observation Gaussian log densities at the current fitted means.
pub fn loglik_per_obs(dataset: &Dataset, cache: &ResidualCache) -> Vec<f64> {
    dataset
        .observations()
        .iter()
        .enumerate()
        .map(|(r, obs)| normal_log_density(obs.y, cache.fitted(r), obs.sigma2))
        .collect()
}

fn run_tasks<T, F>(pool: Option<&rayon::ThreadPool>, seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    let task = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        f(i, &mut rng)
    };
    match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..seeds.len()).into_par_iter().map(task).collect()
        }),
        None => (0..seeds.len()).map(task).collect(),
    }
}

/// Gibbs sweep orchestrator owning the dataset, state, cache, and RNG.
pub struct Sampler {
    dataset: Dataset,
    config: ChainConfig,
    base: BaseMeasure,
    omega: DMatrix<f64>,
    state: SamplerState,
    cache: ResidualCache,
    rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
    sweeps_done: u64,
    degenerate_assignments: u64,
}

impl Sampler {
    /// Build a sampler with a prior-drawn initial state.
    pub fn new(dataset: Dataset, config: ChainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let state = SamplerState::draw_from_prior(&dataset, &config, &mut rng)?;
        Self::from_parts(dataset, config, state, rng, 0)
    }

    /// Rebuild a sampler around an existing state (checkpoint resume and
    /// test harnesses).
    pub fn from_parts(
        dataset: Dataset,
        config: ChainConfig,
        state: SamplerState,
        rng: ChaCha8Rng,
        sweeps_done: u64,
    ) -> Result<Self> {
        config.validate()?;
        state.check_invariants(&dataset, config.mode)?;
        let base = BaseMeasure::new(dataset.n_predictors(), config.mode);
        let omega = chain_adjacency(dataset.n_years());
        let cache = ResidualCache::new(&dataset, &state.coeffs.coeffs, config.period_mean);
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::validation(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Sampler {
            dataset,
            config,
            base,
            omega,
            state,
            cache,
            rng,
            pool,
            sweeps_done,
            degenerate_assignments: 0,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn cache(&self) -> &ResidualCache {
        &self.cache
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn sweeps_done(&self) -> u64 {
        self.sweeps_done
    }

    /// Counties whose assignment weights all vanished so far (diagnostic).
    pub fn degenerate_assignments(&self) -> u64 {
        self.degenerate_assignments
    }

    /// Per-observation log likelihood at the current state.
    pub fn loglik_per_obs(&self) -> Vec<f64> {
        loglik_per_obs(&self.dataset, &self.cache)
    }

    fn draw_seeds(&mut self, n: usize) -> Vec<u64> {
        (0..n).map(|_| self.rng.random()).collect()
    }

    /// One full Gibbs scan over every parameter block.
    pub fn sweep(&mut self) -> Result<()> {
        self.update_coefficients()?;
        self.update_kappas()?;
        self.update_lambdas()?;
        self.update_labels()?;
        update_alpha(
            &mut self.state.clusters,
            self.config.alpha_prior,
            &mut self.rng,
        )?;
        if self.config.mode == Mode::Ppmx {
            self.update_deltas()?;
            self.update_taus()?;
            self.update_rhos()?;
            self.update_hx()?;
        }
        self.sweeps_done += 1;
        if self.sweeps_done % 100 == 0 {
            let drift = self.cache.drift(&self.dataset);
            if drift > 1e-6 {
                return Err(Error::numerical(format!(
                    "fitted-value cache drifted by {drift:.3e} at sweep {} (state: {} clusters, alpha {:.6})",
                    self.sweeps_done,
                    self.state.clusters.n_clusters(),
                    self.state.clusters.alpha,
                )));
            }
            self.cache.rebuild(&self.dataset);
        }
        self.state
            .check_invariants(&self.dataset, self.config.mode)?;
        Ok(())
    }

    /// Elliptical slice update of every coefficient matrix, sequential in
    /// the county index because counties sharing a block couple through the
    /// residuals.
    fn update_coefficients(&mut self) -> Result<()> {
        let time_points = self.dataset.grid().time_points().to_vec();
        // One prior factorization per cluster serves all its members.
        let specs: Vec<MatrixNormalSpec> = self
            .state
            .clusters
            .locations
            .iter()
            .map(|loc| {
                let chol = rq_cholesky(&loc.kappa, &time_points, self.config.jitter)?;
                MatrixNormalSpec::from_parts(&loc.lambda_y, &chol, self.config.jitter)
            })
            .collect::<Result<Vec<_>>>()?;
        for l in 0..self.dataset.n_counties() {
            let spec = &specs[self.state.clusters.labels[l]];
            // Residual targets with county l's contribution removed.
            let targets: Vec<(f64, f64, f64, &[usize])> = self
                .dataset
                .obs_of_county(l)
                .iter()
                .map(|&r| {
                    let obs = &self.dataset.observations()[r];
                    let base =
                        self.cache.fitted(r) - self.cache.county_contribution(l, r, &self.dataset);
                    (
                        obs.y,
                        obs.sigma2,
                        base,
                        self.dataset.periods().year_indices(obs.period),
                    )
                })
                .collect();
            let x = self.dataset.predictors(l);
            let weights: Vec<f64> = self
                .dataset
                .obs_of_county(l)
                .iter()
                .map(|&r| self.cache.weight(r))
                .collect();
            let log_lik = |b: &DMatrix<f64>| {
                let row = county_fitted_row(x, b);
                targets
                    .iter()
                    .zip(&weights)
                    .map(|((y, sigma2, base, years), w)| {
                        let own: f64 = years.iter().map(|&j| row[j]).sum();
                        normal_log_density(*y, base + w * own, *sigma2)
                    })
                    .sum()
            };
            let current = &self.state.coeffs.coeffs[l];
            let current_ll = log_lik(current);
            let (new_b, _) = ess_step(current, current_ll, spec, log_lik, &mut self.rng)?;
            let new_row = county_fitted_row(x, &new_b);
            self.cache.replace_county(l, &new_row, &self.dataset);
            self.state.coeffs.coeffs[l] = new_b;
        }
        Ok(())
    }

    /// Slice update of every cluster's kernel parameters; independent
    /// across clusters, so they run as parallel tasks on pre-drawn seeds.
    fn update_kappas(&mut self) -> Result<()> {
        let m = self.state.clusters.n_clusters();
        let seeds = self.draw_seeds(m);
        let time_points = self.dataset.grid().time_points().to_vec();
        let clusters = &self.state.clusters;
        let coeffs = &self.state.coeffs.coeffs;
        let p = self.dataset.n_predictors();
        let (width, max_steps, jitter) = (
            self.config.slice_width,
            self.config.slice_max_steps,
            self.config.jitter,
        );
        let prior = self.base.kappa_prior();
        let new_kappas = run_tasks(self.pool.as_ref(), &seeds, |s, rng| {
            let members = clusters.members_of(s);
            let w = coeff_cross_product(coeffs, &members, &clusters.locations[s].lambda_y);
            let mut kappa = clusters.locations[s].kappa;
            slice_update_kappa(
                &mut kappa,
                &time_points,
                &w,
                (members.len() * p) as f64,
                prior,
                width,
                max_steps,
                jitter,
                rng,
            )?;
            Ok(kappa)
        })?;
        for (loc, kappa) in self.state.clusters.locations.iter_mut().zip(new_kappas) {
            loc.kappa = kappa;
        }
        Ok(())
    }

    /// Wishart update of every cluster's row precision (parallel tasks).
    fn update_lambdas(&mut self) -> Result<()> {
        let m = self.state.clusters.n_clusters();
        let seeds = self.draw_seeds(m);
        let time_points = self.dataset.grid().time_points().to_vec();
        let clusters = &self.state.clusters;
        let coeffs = &self.state.coeffs.coeffs;
        let p = self.dataset.n_predictors();
        let jitter = self.config.jitter;
        let new_lambdas = run_tasks(self.pool.as_ref(), &seeds, |s, rng| {
            let members = clusters.members_of(s);
            let chol = rq_cholesky(&clusters.locations[s].kappa, &time_points, jitter)?;
            let (df, scale) = lambda_y_posterior(coeffs, &members, &chol, p)?;
            sample_wishart(df, &scale, rng)
        })?;
        for (loc, lambda) in self.state.clusters.locations.iter_mut().zip(new_lambdas) {
            loc.lambda_y = lambda;
        }
        Ok(())
    }

    fn update_labels(&mut self) -> Result<()> {
        let ctx = LikContext {
            time_points: self.dataset.grid().time_points(),
            omega: &self.omega,
            jitter: self.config.jitter,
        };
        let report = assign_clusters(
            &mut self.state.clusters,
            &self.state.coeffs.coeffs,
            self.state.coeffs.deltas.as_deref(),
            &self.base,
            self.config.c_star,
            &ctx,
            &mut self.rng,
        )?;
        self.degenerate_assignments += report.degenerate as u64;
        Ok(())
    }

    /// Conjugate Gaussian update of every county's latent predictor means
    /// (parallel tasks; independent across counties given the rest).
    fn update_deltas(&mut self) -> Result<()> {
        let n = self.dataset.n_counties();
        let seeds = self.draw_seeds(n);
        let clusters = &self.state.clusters;
        let h_x = self.state.coeffs.h_x.as_ref().expect("ppmx state has h_x");
        let omega = &self.omega;
        let dataset = &self.dataset;
        let p = dataset.n_predictors();
        let t = dataset.n_years();
        let new_deltas = run_tasks(self.pool.as_ref(), &seeds, |l, rng| {
            let ps = clusters
                .location_of(l)
                .predictor
                .as_ref()
                .expect("ppmx location has predictor side");
            let q = crate::kernels::car_precision(
                &crate::kernels::CarParams::new(ps.tau_x, ps.rho_x)?,
                omega,
            )?;
            let (mean, chol) = delta_posterior(dataset.predictors(l), h_x, &ps.lambda_x, &q)?;
            Ok(unvec_rows(
                &sample_gaussian_precision(&mean, &chol, rng),
                p,
                t,
            ))
        })?;
        self.state.coeffs.deltas = Some(new_deltas);
        Ok(())
    }

    /// Gamma update of every cluster's predictor-side scale (parallel).
    fn update_taus(&mut self) -> Result<()> {
        let m = self.state.clusters.n_clusters();
        let seeds = self.draw_seeds(m);
        let clusters = &self.state.clusters;
        let deltas = self
            .state
            .coeffs
            .deltas
            .as_ref()
            .expect("ppmx state has deltas");
        let omega = &self.omega;
        let prior = self.base.tau_prior();
        let new_taus = run_tasks(self.pool.as_ref(), &seeds, |s, rng| {
            let ps = clusters.locations[s]
                .predictor
                .as_ref()
                .expect("ppmx location");
            let members = clusters.members_of(s);
            let r = car_structure(ps.rho_x, omega);
            let (shape, rate) = tau_posterior(deltas, &members, &ps.lambda_x, &r, prior);
            crate::numeric::draw_gamma(shape, rate, rng)
        })?;
        for (loc, tau) in self.state.clusters.locations.iter_mut().zip(new_taus) {
            loc.predictor.as_mut().expect("ppmx location").tau_x = tau;
        }
        Ok(())
    }

    /// Slice update of every cluster's dependence parameter (parallel).
    fn update_rhos(&mut self) -> Result<()> {
        let m = self.state.clusters.n_clusters();
        let seeds = self.draw_seeds(m);
        let clusters = &self.state.clusters;
        let deltas = self
            .state
            .coeffs
            .deltas
            .as_ref()
            .expect("ppmx state has deltas");
        let omega = &self.omega;
        let p = self.dataset.n_predictors();
        let (width, max_steps) = (self.config.slice_width, self.config.slice_max_steps);
        let new_rhos = run_tasks(self.pool.as_ref(), &seeds, |s, rng| {
            let ps = clusters.locations[s]
                .predictor
                .as_ref()
                .expect("ppmx location");
            let members = clusters.members_of(s);
            let mut cross = DMatrix::zeros(omega.nrows(), omega.nrows());
            for &l in &members {
                cross += deltas[l].transpose() * &ps.lambda_x * &deltas[l];
            }
            let mut rho = ps.rho_x;
            slice_update_rho(
                &mut rho,
                (members.len() * p) as f64,
                ps.tau_x,
                omega,
                &cross,
                width,
                max_steps,
                rng,
            )?;
            Ok(rho)
        })?;
        for (loc, rho) in self.state.clusters.locations.iter_mut().zip(new_rhos) {
            loc.predictor.as_mut().expect("ppmx location").rho_x = rho;
        }
        Ok(())
    }

    fn update_hx(&mut self) -> Result<()> {
        let deltas = self
            .state
            .coeffs
            .deltas
            .as_ref()
            .expect("ppmx state has deltas");
        let xs: Vec<&DMatrix<f64>> = (0..self.dataset.n_counties())
            .map(|l| self.dataset.predictors(l))
            .collect();
        let (df, scale) = hx_posterior(&xs, deltas)?;
        self.state.coeffs.h_x = Some(sample_wishart(df, &scale, &mut self.rng)?);
        Ok(())
    }

    /// Redraw every observation from its likelihood at the current state
    /// and install the new values (joint-distribution test harness).
    pub fn redraw_observations(&mut self) -> Result<()> {
        let values: Vec<f64> = self
            .dataset
            .observations()
            .iter()
            .enumerate()
            .map(|(r, obs)| self.cache.fitted(r) + obs.sigma2.sqrt() * std_normal(&mut self.rng))
            .collect();
        self.dataset.set_observation_values(&values)
    }

    /// Replace the sampler's RNG (checkpoint restore).
    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Restore the degenerate-assignment counter (checkpoint restore).
    pub fn set_degenerate_assignments(&mut self, n: u64) {
        self.degenerate_assignments = n;
    }
}
