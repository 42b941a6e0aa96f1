//! Dirichlet-process cluster state over county covariance parameters:
//! auxiliary-Gibbs label assignment (plain and predictor-assisted), the
//! Escobar-West concentration update, and partition summaries.
//!
//! Counties sharing a cluster share one [`ClusterLocation`] — the kernel and
//! row-precision parameters governing their coefficient matrices (plus the
//! predictor-side parameters when predictors inform the partition).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    car_precision, rq_cholesky, sample_wishart, CarParams, MatrixNormalSpec, RqParams,
};
use crate::numeric::{draw_gamma, sample_from_log_weights};

/// Whether the partition prior sees the predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Coefficient likelihood only.
    Baseline,
    /// Coefficient likelihood times the latent-predictor likelihood.
    Ppmx,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "ppmx" => Ok(Mode::Ppmx),
            other => Err(Error::validation(format!(
                "unknown mode '{other}' (expected baseline or ppmx)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Baseline => write!(f, "baseline"),
            Mode::Ppmx => write!(f, "ppmx"),
        }
    }
}

/// Predictor-side cluster parameters (present only in PPMx mode): row
/// precision of the latent predictor means and their conditional
/// autoregressive column structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSide {
    pub lambda_x: DMatrix<f64>,
    pub tau_x: f64,
    pub rho_x: f64,
}

impl PredictorSide {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_x.nrows() != self.lambda_x.ncols() {
            return Err(Error::validation("lambda_x must be square"));
        }
        CarParams::new(self.tau_x, self.rho_x).map(|_| ())
    }
}

/// One cluster's parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLocation {
    /// Row precision of the coefficient matrices (P x P SPD).
    pub lambda_y: DMatrix<f64>,
    /// Rational-quadratic kernel parameters for the column covariance.
    pub kappa: RqParams,
    /// Predictor-side parameters; `Some` exactly in PPMx mode.
    pub predictor: Option<PredictorSide>,
}

impl ClusterLocation {
    pub fn validate(&self, p: usize, mode: Mode) -> Result<()> {
        if self.lambda_y.nrows() != p || self.lambda_y.ncols() != p {
            return Err(Error::validation(format!(
                "lambda_y is {}x{}, expected {p}x{p}",
                self.lambda_y.nrows(),
                self.lambda_y.ncols()
            )));
        }
        self.kappa.validate()?;
        match (mode, &self.predictor) {
            (Mode::Baseline, None) => Ok(()),
            (Mode::Ppmx, Some(ps)) => {
                if ps.lambda_x.nrows() != p {
                    return Err(Error::validation("lambda_x dimension mismatch"));
                }
                ps.validate()
            }
            (Mode::Baseline, Some(_)) => Err(Error::validation(
                "predictor-side parameters present in baseline mode",
            )),
            (Mode::Ppmx, None) => Err(Error::validation(
                "predictor-side parameters missing in ppmx mode",
            )),
        }
    }
}

/// Base measure over cluster locations: Wishart(P+1, I) for each precision
/// matrix, unit-rate gamma for each positive scalar, uniform on (-1,1) for
/// the autoregression parameter.
#[derive(Debug, Clone)]
pub struct BaseMeasure {
    p: usize,
    mode: Mode,
    wishart_df: f64,
    wishart_scale: DMatrix<f64>,
    /// (shape, rate) shared by the three kernel components.
    kappa_gamma: (f64, f64),
    /// (shape, rate) for the predictor-side scale.
    tau_gamma: (f64, f64),
}

impl BaseMeasure {
    pub fn new(p: usize, mode: Mode) -> Self {
        BaseMeasure {
            p,
            mode,
            wishart_df: p as f64 + 1.0,
            wishart_scale: DMatrix::identity(p, p),
            kappa_gamma: (1.0, 1.0),
            tau_gamma: (1.0, 1.0),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// (shape, rate) of the kernel-component prior.
    pub fn kappa_prior(&self) -> (f64, f64) {
        self.kappa_gamma
    }

    /// (shape, rate) of the predictor-side scale prior.
    pub fn tau_prior(&self) -> (f64, f64) {
        self.tau_gamma
    }

    pub fn wishart_df(&self) -> f64 {
        self.wishart_df
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ClusterLocation> {
        let lambda_y = sample_wishart(self.wishart_df, &self.wishart_scale, rng)?;
        let (a, b) = self.kappa_gamma;
        let kappa = RqParams::new(
            draw_gamma(a, b, rng)?,
            draw_gamma(a, b, rng)?,
            draw_gamma(a, b, rng)?,
        )?;
        let predictor = match self.mode {
            Mode::Baseline => None,
            Mode::Ppmx => {
                let lambda_x = sample_wishart(self.wishart_df, &self.wishart_scale, rng)?;
                let (ta, tb) = self.tau_gamma;
                let tau_x = draw_gamma(ta, tb, rng)?;
                let rho_x = loop {
                    let r = 2.0 * rng.random::<f64>() - 1.0;
                    if r > -1.0 && r < 1.0 {
                        break r;
                    }
                };
                Some(PredictorSide {
                    lambda_x,
                    tau_x,
                    rho_x,
                })
            }
        };
        Ok(ClusterLocation {
            lambda_y,
            kappa,
            predictor,
        })
    }
}

/// The partition and its per-cluster parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterState {
    /// Cluster label of each county, dense in `0..n_clusters()`.
    pub labels: Vec<usize>,
    pub locations: Vec<ClusterLocation>,
    /// Occupancy per cluster; every entry positive.
    pub counts: Vec<usize>,
    /// Dirichlet-process concentration.
    pub alpha: f64,
    pub mode: Mode,
}

impl ClusterState {
    pub fn new(
        labels: Vec<usize>,
        locations: Vec<ClusterLocation>,
        alpha: f64,
        mode: Mode,
    ) -> Result<Self> {
        let mut counts = vec![0usize; locations.len()];
        for &s in &labels {
            if s >= locations.len() {
                return Err(Error::validation("label outside the location list"));
            }
            counts[s] += 1;
        }
        let state = ClusterState {
            labels,
            locations,
            counts,
            alpha,
            mode,
        };
        state.check_invariants()?;
        Ok(state)
    }

    pub fn n_counties(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.locations.len()
    }

    pub fn location_of(&self, county: usize) -> &ClusterLocation {
        &self.locations[self.labels[county]]
    }

    /// Counties in cluster `m`, ascending.
    pub fn members_of(&self, m: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == m)
            .map(|(l, _)| l)
            .collect()
    }

    /// Labels renumbered by order of first occurrence, so that identical
    /// partitions compare equal across draws.
    pub fn canonical_labels(&self) -> Vec<usize> {
        canonicalize(&self.labels)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.counts.len() != self.locations.len() {
            return Err(Error::validation("counts and locations length mismatch"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::validation(
                "concentration must be positive and finite",
            ));
        }
        let mut seen = vec![0usize; self.locations.len()];
        for &s in &self.labels {
            if s >= self.locations.len() {
                return Err(Error::validation("label outside the location list"));
            }
            seen[s] += 1;
        }
        if seen != self.counts {
            return Err(Error::validation("cluster counts do not match labels"));
        }
        if self.counts.iter().any(|&c| c == 0) {
            return Err(Error::validation("empty cluster retained after cleanup"));
        }
        if self.counts.iter().sum::<usize>() != self.labels.len() {
            return Err(Error::validation("cluster counts do not sum to N"));
        }
        let p = self.locations.first().map_or(0, |loc| loc.lambda_y.nrows());
        for loc in &self.locations {
            loc.validate(p, self.mode)?;
        }
        Ok(())
    }
}

/// Renumber labels by order of first occurrence.
pub fn canonicalize(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = Vec::new();
    let mut next = 0;
    let mut out = Vec::with_capacity(labels.len());
    for &s in labels {
        if s >= map.len() {
            map.resize(s + 1, None);
        }
        let canon = *map[s].get_or_insert_with(|| {
            let v = next;
            next += 1;
            v
        });
        out.push(canon);
    }
    out
}

/// Stick-breaking weights: `p_h = v_h prod_{k<h}(1 - v_k)`, with the
/// residual stick mass appended so the output sums to one.
pub fn stick_weights(v: &[f64]) -> Result<Vec<f64>> {
    let mut remaining = 1.0;
    let mut out = Vec::with_capacity(v.len() + 1);
    for &vh in v {
        if !(vh > 0.0 && vh < 1.0) {
            return Err(Error::validation(format!(
                "stick fraction {vh} outside (0,1)"
            )));
        }
        out.push(vh * remaining);
        remaining *= 1.0 - vh;
    }
    out.push(remaining);
    Ok(out)
}

/// Everything the likelihood of one county under one candidate location
/// needs besides the parameters themselves.
#[derive(Debug, Clone, Copy)]
pub struct LikContext<'a> {
    /// Kernel coordinates of the year grid.
    pub time_points: &'a [f64],
    /// Adjacency for the predictor-side autoregressive structure.
    pub omega: &'a DMatrix<f64>,
    pub jitter: f64,
}

/// Log-likelihood of county `l`'s coefficient matrix (and, in PPMx mode, its
/// latent predictor means) under a candidate location.
pub fn location_log_density(
    location: &ClusterLocation,
    coeff: &DMatrix<f64>,
    delta: Option<&DMatrix<f64>>,
    ctx: &LikContext,
) -> Result<f64> {
    let col_chol = rq_cholesky(&location.kappa, ctx.time_points, ctx.jitter)?;
    let spec = MatrixNormalSpec::from_parts(&location.lambda_y, &col_chol, ctx.jitter)?;
    let mut ll = spec.log_density(coeff);
    if let Some(ps) = &location.predictor {
        let delta = delta.ok_or_else(|| {
            Error::validation("predictor-side location given but no delta matrix")
        })?;
        let q = car_precision(&CarParams::new(ps.tau_x, ps.rho_x)?, ctx.omega)?;
        let spec = MatrixNormalSpec::with_col_precision(&ps.lambda_x, &q, ctx.jitter)?;
        ll += spec.log_density(delta);
    }
    Ok(ll)
}

/// Unnormalized log weights for one county's reassignment: occupied
/// clusters weigh `n_s * L_s`, each of the `c_star` auxiliaries weighs
/// `(alpha / c_star) * L`.  `log_liks` holds the occupied clusters first,
/// then the auxiliaries; non-finite entries get zero weight.
pub fn candidate_log_weights(
    counts: &[usize],
    alpha: f64,
    c_star: usize,
    log_liks: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(log_liks.len(), counts.len() + c_star);
    let aux_log_prior = (alpha / c_star as f64).ln();
    log_liks
        .iter()
        .enumerate()
        .map(|(i, &ll)| {
            if !ll.is_finite() && ll != f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let log_prior = if i < counts.len() {
                (counts[i] as f64).ln()
            } else {
                aux_log_prior
            };
            log_prior + ll
        })
        .collect()
}

/// Normalized candidate probabilities (all zeros when every weight
/// vanishes).  Same layout as [`candidate_log_weights`].
pub fn candidate_probabilities(
    counts: &[usize],
    alpha: f64,
    c_star: usize,
    log_liks: &[f64],
) -> Vec<f64> {
    let logw = candidate_log_weights(counts, alpha, c_star, log_liks);
    let total = crate::numeric::log_sum_exp(&logw);
    if !total.is_finite() {
        return vec![0.0; logw.len()];
    }
    logw.iter().map(|&w| (w - total).exp()).collect()
}

/// Outcome counters for one assignment scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssignReport {
    /// Counties whose candidate weights all vanished (label retained).
    pub degenerate: usize,
}

/// One auxiliary-Gibbs scan over all counties with a caller-supplied
/// log-likelihood `log_lik(county, candidate_location)`.
///
/// Each county is removed from the state; if that empties its cluster, the
/// orphaned location is kept as the first of the `c_star` auxiliary
/// candidates (with the remaining auxiliaries drawn fresh from `base`),
/// which is what keeps the scan's invariant distribution exact.  The county
/// is then reseated among occupied clusters (weight `n_{-l,s} * L`) and
/// auxiliaries (weight `alpha / c_star * L`), unused auxiliaries are
/// discarded, and labels stay dense throughout.
pub fn assign_clusters_with<R, F>(
    state: &mut ClusterState,
    base: &BaseMeasure,
    c_star: usize,
    mut log_lik: F,
    rng: &mut R,
) -> Result<AssignReport>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &ClusterLocation) -> f64,
{
    if c_star == 0 {
        return Err(Error::validation("need at least one auxiliary candidate"));
    }
    if base.mode() != state.mode {
        return Err(Error::validation("base measure and state disagree on mode"));
    }
    let mut report = AssignReport::default();
    for l in 0..state.labels.len() {
        let old = state.labels[l];
        state.counts[old] -= 1;
        let was_singleton = state.counts[old] == 0;

        // Auxiliary candidates; an orphaned location survives as the first.
        let mut aux = Vec::with_capacity(c_star);
        if was_singleton {
            let orphan = state.locations.remove(old);
            state.counts.remove(old);
            for s in state.labels.iter_mut() {
                if *s > old {
                    *s -= 1;
                }
            }
            aux.push(orphan);
        }
        while aux.len() < c_star {
            aux.push(base.draw(rng)?);
        }

        let m = state.locations.len();
        let mut log_liks = Vec::with_capacity(m + c_star);
        for loc in &state.locations {
            log_liks.push(log_lik(l, loc));
        }
        for loc in &aux {
            log_liks.push(log_lik(l, loc));
        }
        let logw = candidate_log_weights(&state.counts, state.alpha, c_star, &log_liks);

        let choice = match sample_from_log_weights(&logw, rng) {
            Some(c) => c,
            None => {
                // All weights vanished: retain the current label (the
                // orphaned location is auxiliary 0 when l was a singleton).
                report.degenerate += 1;
                if was_singleton {
                    m
                } else {
                    old
                }
            }
        };
        if choice < m {
            state.labels[l] = choice;
            state.counts[choice] += 1;
        } else {
            let loc = aux.swap_remove(choice - m);
            state.locations.push(loc);
            state.counts.push(1);
            state.labels[l] = m;
        }
        debug_assert!(state.counts.iter().all(|&c| c > 0));
    }
    state.check_invariants()?;
    Ok(report)
}

/// Auxiliary-Gibbs scan using the model likelihood: coefficient matrices
/// under each candidate's matrix-normal law, times the latent-predictor
/// term in PPMx mode.
pub fn assign_clusters<R: Rng + ?Sized>(
    state: &mut ClusterState,
    coeffs: &[DMatrix<f64>],
    deltas: Option<&[DMatrix<f64>]>,
    base: &BaseMeasure,
    c_star: usize,
    ctx: &LikContext,
    rng: &mut R,
) -> Result<AssignReport> {
    if coeffs.len() != state.labels.len() {
        return Err(Error::validation(
            "coefficient list length differs from county count",
        ));
    }
    if state.mode == Mode::Ppmx {
        match deltas {
            Some(d) if d.len() == coeffs.len() => {}
            _ => {
                return Err(Error::validation(
                    "ppmx mode needs one delta matrix per county",
                ))
            }
        }
    }
    assign_clusters_with(
        state,
        base,
        c_star,
        |l, loc| {
            location_log_density(loc, &coeffs[l], deltas.map(|d| &d[l]), ctx)
                .unwrap_or(f64::NEG_INFINITY)
        },
        rng,
    )
}

/// Normalized weights of the Escobar-West two-component gamma mixture given
/// the auxiliary beta variable `eta`: the first component (shape `a + m`)
/// has odds `(a + m - 1) / (n (b - ln eta))` against the second (shape
/// `a + m - 1`).
pub fn escobar_west_weights(n: usize, m: usize, eta: f64, a: f64, b: f64) -> (f64, f64) {
    let odds = (a + m as f64 - 1.0) / (n as f64 * (b - eta.ln()));
    let w1 = odds / (1.0 + odds);
    (w1, 1.0 - w1)
}

/// One Escobar-West draw of the concentration parameter given `m` occupied
/// clusters among `n` counties and a gamma(a, b) prior.
pub fn escobar_west_draw<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    alpha: f64,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<f64> {
    let eta: f64 = Beta::new(alpha + 1.0, n as f64)
        .map_err(|e| Error::validation(format!("beta({}, {n}): {e}", alpha + 1.0)))?
        .sample(rng);
    let rate = b - eta.ln();
    let (w1, _) = escobar_west_weights(n, m, eta, a, b);
    let shape = if rng.random::<f64>() < w1 {
        a + m as f64
    } else {
        a + m as f64 - 1.0
    };
    draw_gamma(shape, rate, rng)
}

/// Update the concentration parameter in place and return the new value.
pub fn update_alpha<R: Rng + ?Sized>(
    state: &mut ClusterState,
    prior: (f64, f64),
    rng: &mut R,
) -> Result<f64> {
    let (a, b) = prior;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::validation(
            "concentration prior parameters must be positive",
        ));
    }
    let alpha = escobar_west_draw(
        state.n_counties(),
        state.n_clusters(),
        state.alpha,
        a,
        b,
        rng,
    )?;
    state.alpha = alpha;
    Ok(alpha)
}

/// One draw of a partition from the Chinese-restaurant prior.
pub fn draw_crp<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<usize> {
    let mut labels = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..n {
        let total = i as f64 + alpha;
        let mut u = rng.random::<f64>() * total;
        let mut chosen = counts.len();
        for (s, &c) in counts.iter().enumerate() {
            u -= c as f64;
            if u < 0.0 {
                chosen = s;
                break;
            }
        }
        if chosen == counts.len() {
            counts.push(1);
        } else {
            counts[chosen] += 1;
        }
        labels.push(chosen);
    }
    labels
}

/// Pairwise co-clustering frequencies over retained draws: entry `(l, l')`
/// is the fraction of draws in which the two counties share a label.
pub fn cluster_cooccurrence(draws: &[Vec<usize>]) -> Result<DMatrix<f64>> {
    let first = draws
        .first()
        .ok_or_else(|| Error::validation("no retained draws"))?;
    let n = first.len();
    let mut acc = DMatrix::zeros(n, n);
    for draw in draws {
        if draw.len() != n {
            return Err(Error::validation(
                "label vectors differ in length across draws",
            ));
        }
        for l in 0..n {
            for l2 in l..n {
                if draw[l] == draw[l2] {
                    acc[(l, l2)] += 1.0;
                }
            }
        }
    }
    let frac = 1.0 / draws.len() as f64;
    for l in 0..n {
        for l2 in l..n {
            acc[(l, l2)] *= frac;
            acc[(l2, l)] = acc[(l, l2)];
        }
    }
    Ok(acc)
}
