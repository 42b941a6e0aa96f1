//! Post-processing of chain output: fitted-function summaries,
//! pseudo-statistics, group roll-ups, fit statistics, and holdout
//! comparisons.  Everything here is a pure function of retained draws plus
//! the dataset; nothing re-runs the model.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linkage::Dataset;
use crate::numeric::{log_mean_exp, mean, quantile};
use crate::samplers::county_fitted_row;

/// Minimum retained draws for stable interval estimates.
pub const MIN_DRAWS: usize = 30;

/// Default importance-weight clipping quantile for the CPO estimator.
pub const CPO_CLIP_QUANTILE: f64 = 0.995;

/// Cellwise posterior mean and equal-tail 95% interval, counties by years.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSummaries {
    pub mean: DMatrix<f64>,
    pub lo: DMatrix<f64>,
    pub hi: DMatrix<f64>,
}

/// Posterior mean and 2.5/97.5 percentiles of every county-year cell.
pub fn fitted_summaries(f_draws: &[DMatrix<f64>]) -> Result<FunctionSummaries> {
    if f_draws.len() < MIN_DRAWS {
        return Err(Error::validation(format!(
            "need at least {MIN_DRAWS} retained draws for interval estimates, got {}",
            f_draws.len()
        )));
    }
    let (n, t) = (f_draws[0].nrows(), f_draws[0].ncols());
    if f_draws.iter().any(|f| f.nrows() != n || f.ncols() != t) {
        return Err(Error::validation("draw dimensions differ across the chain"));
    }
    let mut means = DMatrix::zeros(n, t);
    let mut lo = DMatrix::zeros(n, t);
    let mut hi = DMatrix::zeros(n, t);
    let mut cell = vec![0.0; f_draws.len()];
    for l in 0..n {
        for j in 0..t {
            for (g, f) in f_draws.iter().enumerate() {
                cell[g] = f[(l, j)];
            }
            means[(l, j)] = mean(&cell);
            lo[(l, j)] = quantile(&cell, 0.025);
            hi[(l, j)] = quantile(&cell, 0.975);
        }
    }
    Ok(FunctionSummaries {
        mean: means,
        lo,
        hi,
    })
}

/// One pseudo-statistic: the portion of an observed statistic that carries
/// information about a single county-year cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoStatistic {
    pub county: usize,
    /// Year index on the grid.
    pub year: usize,
    pub block: usize,
    /// Period table row.
    pub period_row: usize,
    pub value: f64,
    /// Inverse sampling variance of the source observation.
    pub precision: f64,
}

/// Pseudo-statistics for every (county, year, block, period) link, computed
/// from the posterior-mean coefficients: the observed value minus the
/// fitted contributions of every *other* cell covered by the observation.
pub fn pseudo_statistics(
    b_mean: &[DMatrix<f64>],
    dataset: &Dataset,
) -> Result<Vec<PseudoStatistic>> {
    if b_mean.len() != dataset.n_counties() {
        return Err(Error::validation(
            "coefficient mean count differs from counties",
        ));
    }
    let fitted: Vec<Vec<f64>> = (0..dataset.n_counties())
        .map(|l| county_fitted_row(dataset.predictors(l), &b_mean[l]))
        .collect();
    let mut out = Vec::new();
    for obs in dataset.observations() {
        let cells = dataset.nested_cells(obs.block, obs.period)?;
        let total: f64 = cells.iter().map(|&(l, j)| fitted[l][j]).sum();
        for &(l, j) in &cells {
            let others = total - fitted[l][j];
            out.push(PseudoStatistic {
                county: l,
                year: j,
                block: obs.block,
                period_row: obs.period,
                value: obs.y - others,
                precision: 1.0 / obs.sigma2,
            });
        }
    }
    Ok(out)
}

/// Per (group, year) posterior summary of summed latent functions, with the
/// percent difference against a matching observed one-year statistic where
/// one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct RollupRow {
    pub group_id: String,
    /// Year index on the grid.
    pub year: usize,
    pub sum_mean: f64,
    pub sum_lo: f64,
    pub sum_hi: f64,
    /// Sum of observed one-year statistics over blocks exactly covering the
    /// group, when such a cover exists.
    pub obs: Option<f64>,
    /// `(obs - sum_mean) / obs`.
    pub pct_diff: Option<f64>,
}

/// Observed one-year statistic for a county set at one year, if some
/// disjoint set of blocks exactly covers the set and each publishes the
/// one-year period.  Larger blocks are preferred; ties break on block id.
fn matching_observation(dataset: &Dataset, group: &[usize], year: usize) -> Option<f64> {
    let period_row = (0..dataset.periods().n_periods())
        .find(|&row| dataset.periods().year_indices(row) == [year])?;
    let by_cell: BTreeMap<usize, f64> = dataset
        .observations()
        .iter()
        .filter(|o| o.period == period_row)
        .map(|o| (o.block, o.y))
        .collect();
    let in_group = |l: usize| group.binary_search(&l).is_ok();
    let mut candidates: Vec<usize> = by_cell
        .keys()
        .copied()
        .filter(|&b| dataset.graph().membership(b).iter().all(|&l| in_group(l)))
        .collect();
    candidates.sort_by(|&a, &b| {
        let (sa, sb) = (
            dataset.graph().membership(a).len(),
            dataset.graph().membership(b).len(),
        );
        sb.cmp(&sa)
            .then_with(|| dataset.graph().block_ids()[a].cmp(&dataset.graph().block_ids()[b]))
    });
    let mut covered = vec![false; dataset.n_counties()];
    let mut total = 0.0;
    let mut n_covered = 0;
    for b in candidates {
        let members = dataset.graph().membership(b);
        if members.iter().any(|&l| covered[l]) {
            continue;
        }
        for &l in members {
            covered[l] = true;
        }
        n_covered += members.len();
        total += by_cell[&b];
    }
    (n_covered == group.len()).then_some(total)
}

/// Group-year sums of the latent functions across draws, summarized, with
/// observed one-year comparisons.  The grouping must assign every county.
pub fn rollup(
    f_draws: &[DMatrix<f64>],
    dataset: &Dataset,
    grouping: &BTreeMap<String, String>,
) -> Result<Vec<RollupRow>> {
    if f_draws.is_empty() {
        return Err(Error::validation("no draws to roll up"));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (l, id) in dataset.graph().county_ids().iter().enumerate() {
        let group = grouping
            .get(id)
            .ok_or_else(|| Error::validation(format!("county '{id}' missing from grouping")))?;
        groups.entry(group.clone()).or_default().push(l);
    }
    for id in grouping.keys() {
        if dataset.graph().county_index(id).is_none() {
            return Err(Error::validation(format!(
                "grouping names unknown county '{id}'"
            )));
        }
    }
    let t = dataset.n_years();
    let g = f_draws.len();
    let mut out = Vec::new();
    let mut sums = vec![0.0; g];
    for (group_id, members) in &groups {
        if members.is_empty() {
            return Err(Error::validation(format!(
                "group '{group_id}' has no counties"
            )));
        }
        for year in 0..t {
            for (k, f) in f_draws.iter().enumerate() {
                sums[k] = members.iter().map(|&l| f[(l, year)]).sum();
            }
            let sum_mean = mean(&sums);
            let obs = matching_observation(dataset, members, year);
            out.push(RollupRow {
                group_id: group_id.clone(),
                year,
                sum_mean,
                sum_lo: quantile(&sums, 0.025),
                sum_hi: quantile(&sums, 0.975),
                obs,
                pct_diff: obs.map(|y| (y - sum_mean) / y),
            });
        }
    }
    Ok(out)
}

/// Deviance-information summary on the marginal (predictive) density scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Dic3Report {
    pub dic3: f64,
    /// Posterior mean deviance `-2 E[log f(y|theta)]`.
    pub mean_deviance: f64,
    /// Observations whose posterior-mean density vanished.
    pub zero_density_obs: Vec<usize>,
}

/// `DIC3 = -4 E[log f(y|theta)] + 2 sum_r log fhat(y_r)` with `fhat(y_r)`
/// the posterior mean of observation `r`'s per-draw density.
pub fn dic3(loglik_draws: &[Vec<f64>]) -> Result<Dic3Report> {
    let g = loglik_draws.len();
    if g == 0 {
        return Err(Error::validation("no retained likelihood draws"));
    }
    let r = loglik_draws[0].len();
    if loglik_draws.iter().any(|d| d.len() != r) {
        return Err(Error::validation("per-draw likelihood lengths differ"));
    }
    let expected_loglik = loglik_draws
        .iter()
        .map(|d| d.iter().sum::<f64>())
        .sum::<f64>()
        / g as f64;
    let mean_deviance = -2.0 * expected_loglik;
    let mut log_fhat_total = 0.0;
    let mut zero_density_obs = Vec::new();
    let mut column = vec![0.0; g];
    for obs in 0..r {
        for (k, d) in loglik_draws.iter().enumerate() {
            column[k] = d[obs];
        }
        let log_fhat = log_mean_exp(&column);
        if log_fhat == f64::NEG_INFINITY {
            zero_density_obs.push(obs);
        }
        log_fhat_total += log_fhat;
    }
    let dic3 = if zero_density_obs.is_empty() {
        -4.0 * expected_loglik + 2.0 * log_fhat_total
    } else {
        f64::INFINITY
    };
    Ok(Dic3Report {
        dic3,
        mean_deviance: if zero_density_obs.is_empty() {
            mean_deviance
        } else {
            f64::INFINITY
        },
        zero_density_obs,
    })
}

/// Leave-one-out fit summary via stabilized conditional predictive
/// ordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LpmlReport {
    /// Negated log pseudo-marginal likelihood (smaller is better).
    pub neg_lpml: f64,
    /// Observations whose importance weights were dominated by one draw.
    pub degenerate_obs: Vec<usize>,
}

/// LPML through weighted resampling: for each observation, draws are
/// resampled with weights proportional to the reciprocal density (clipped
/// at `clip_quantile` before normalization), and the resampled densities
/// are averaged into the conditional predictive ordinate.  Deterministic
/// given `seed`.
pub fn lpml(loglik_draws: &[Vec<f64>], clip_quantile: f64, seed: u64) -> Result<LpmlReport> {
    let g = loglik_draws.len();
    if g == 0 {
        return Err(Error::validation("no retained likelihood draws"));
    }
    if !(0.0 < clip_quantile && clip_quantile <= 1.0) {
        return Err(Error::validation("clip quantile must lie in (0, 1]"));
    }
    let r = loglik_draws[0].len();
    if loglik_draws.iter().any(|d| d.len() != r) {
        return Err(Error::validation("per-draw likelihood lengths differ"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut lpml_total = 0.0;
    let mut degenerate_obs = Vec::new();
    let mut weights = vec![0.0; g];
    let mut column = vec![0.0; g];
    for obs in 0..r {
        let obs_seed: u64 = master.random();
        let mut rng = ChaCha8Rng::seed_from_u64(obs_seed);
        for (k, d) in loglik_draws.iter().enumerate() {
            column[k] = d[obs];
        }
        // Importance weights proportional to 1/f, shifted for stability.
        let max_neg = column.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(-v));
        if !max_neg.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite log likelihood for observation {obs}"
            )));
        }
        for (w, &ll) in weights.iter_mut().zip(&column) {
            *w = (-ll - max_neg).exp();
        }
        let cap = quantile(&weights, clip_quantile);
        for w in weights.iter_mut() {
            *w = w.min(cap);
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::numerical(format!(
                "degenerate importance weights for observation {obs}"
            )));
        }
        let max_p = weights.iter().fold(0.0f64, |acc, &w| acc.max(w)) / total;
        if g > 1 && max_p > 0.99 {
            degenerate_obs.push(obs);
        }
        // Cumulative distribution for inverse-CDF resampling.
        let mut cumulative = weights.clone();
        for k in 1..g {
            cumulative[k] += cumulative[k - 1];
        }
        let mut resampled = vec![0.0; g];
        for slot in resampled.iter_mut() {
            let u: f64 = rng.random::<f64>() * total;
            let idx = cumulative.partition_point(|&c| c < u).min(g - 1);
            *slot = column[idx];
        }
        lpml_total += log_mean_exp(&resampled);
    }
    Ok(LpmlReport {
        neg_lpml: -lpml_total,
        degenerate_obs,
    })
}

/// Harmonic-mean CPO estimator (cross-check for [`lpml`]): each
/// conditional predictive ordinate is the harmonic mean of the per-draw
/// densities.
pub fn harmonic_lpml(loglik_draws: &[Vec<f64>]) -> Result<f64> {
    let g = loglik_draws.len();
    if g == 0 {
        return Err(Error::validation("no retained likelihood draws"));
    }
    let r = loglik_draws[0].len();
    let mut total = 0.0;
    let mut column = vec![0.0; g];
    for obs in 0..r {
        for (k, d) in loglik_draws.iter().enumerate() {
            column[k] = -d[obs];
        }
        // log CPO = -log mean(1/f).
        total -= log_mean_exp(&column);
    }
    Ok(total)
}

/// Fit statistics exported to fit.json.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub neg_lpml: f64,
    pub dic3: f64,
    pub mean_deviance: f64,
}

impl FitReport {
    pub fn assemble(dic: &Dic3Report, lpml: &LpmlReport) -> Self {
        FitReport {
            neg_lpml: lpml.neg_lpml,
            dic3: dic.dic3,
            mean_deviance: dic.mean_deviance,
        }
    }
}

/// One row of the holdout comparison: posterior means with and without the
/// county's one-year data, plus the without-run interval.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutRow {
    pub year: i32,
    pub mean_with: f64,
    pub mean_without: f64,
    pub lo_without: f64,
    pub hi_without: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutTable {
    pub county_id: String,
    pub rows: Vec<HoldoutRow>,
    /// Largest `|mean_with - mean_without| / |mean_with|` across years.
    pub max_relative_gap: f64,
}

/// True when the county's own singleton block publishes at least one
/// one-year observation.
pub fn has_one_year_data(dataset: &Dataset, county: usize) -> bool {
    dataset.observations().iter().any(|o| {
        dataset.graph().membership(o.block) == [county]
            && dataset.periods().year_indices(o.period).len() == 1
    })
}

/// Align the full-data and excluded-data summaries of one county.
pub fn holdout_compare(
    dataset: &Dataset,
    county: usize,
    run_with: &FunctionSummaries,
    run_without: &FunctionSummaries,
) -> Result<HoldoutTable> {
    if county >= dataset.n_counties() {
        return Err(Error::validation("county index out of range"));
    }
    if !has_one_year_data(dataset, county) {
        return Err(Error::validation(format!(
            "county '{}' has no one-year observations to exclude",
            dataset.graph().county_ids()[county]
        )));
    }
    let t = dataset.n_years();
    for s in [run_with, run_without] {
        if s.mean.nrows() != dataset.n_counties() || s.mean.ncols() != t {
            return Err(Error::validation("summary dimensions differ from dataset"));
        }
    }
    let mut rows = Vec::with_capacity(t);
    let mut max_gap = 0.0f64;
    for j in 0..t {
        let with = run_with.mean[(county, j)];
        let without = run_without.mean[(county, j)];
        let gap = if with.abs() > 1e-12 {
            (with - without).abs() / with.abs()
        } else {
            (with - without).abs()
        };
        max_gap = max_gap.max(gap);
        rows.push(HoldoutRow {
            year: dataset.grid().year(j),
            mean_with: with,
            mean_without: without,
            lo_without: run_without.lo[(county, j)],
            hi_without: run_without.hi[(county, j)],
        });
    }
    Ok(HoldoutTable {
        county_id: dataset.graph().county_ids()[county].clone(),
        rows,
        max_relative_gap: max_gap,
    })
}

/// Write summaries.csv: `county_id, year, mean, lo95, hi95`.
pub fn write_summaries(
    path: &Path,
    dataset: &Dataset,
    summaries: &FunctionSummaries,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(["county_id", "year", "mean", "lo95", "hi95"])?;
    for (l, id) in dataset.graph().county_ids().iter().enumerate() {
        for j in 0..dataset.n_years() {
            w.write_record([
                id.as_str(),
                &dataset.grid().year(j).to_string(),
                &format!("{}", summaries.mean[(l, j)]),
                &format!("{}", summaries.lo[(l, j)]),
                &format!("{}", summaries.hi[(l, j)]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write pseudo.csv: `county_id, year, block_id, period_id, value,
/// precision`, optionally restricted to a single county.
pub fn write_pseudo(
    path: &Path,
    dataset: &Dataset,
    pseudo: &[PseudoStatistic],
    county: Option<usize>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record([
        "county_id",
        "year",
        "block_id",
        "period_id",
        "value",
        "precision",
    ])?;
    for p in pseudo {
        if county.is_some_and(|c| c != p.county) {
            continue;
        }
        w.write_record([
            dataset.graph().county_ids()[p.county].as_str(),
            &dataset.grid().year(p.year).to_string(),
            dataset.graph().block_ids()[p.block].as_str(),
            &dataset.periods().id_of_row(p.period_row).to_string(),
            &format!("{}", p.value),
            &format!("{}", p.precision),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write rollup.csv: `group_id, year, sum_mean, sum_lo95, sum_hi95, obs,
/// pct_diff` (the last two empty where no observed cover exists).
pub fn write_rollup(path: &Path, dataset: &Dataset, rows: &[RollupRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record([
        "group_id", "year", "sum_mean", "sum_lo95", "sum_hi95", "obs", "pct_diff",
    ])?;
    for row in rows {
        w.write_record([
            row.group_id.as_str(),
            &dataset.grid().year(row.year).to_string(),
            &format!("{}", row.sum_mean),
            &format!("{}", row.sum_lo),
            &format!("{}", row.sum_hi),
            &row.obs.map_or(String::new(), |v| format!("{v}")),
            &row.pct_diff.map_or(String::new(), |v| format!("{v}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write fit.json with exactly the keys `neg_lpml`, `dic3`,
/// `mean_deviance`.
pub fn write_fit(path: &Path, report: &FitReport) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, report)?;
    out.flush()?;
    Ok(())
}

/// Write the holdout table: `year, mean_with, mean_without, lo95_without,
/// hi95_without`.
pub fn write_holdout(path: &Path, table: &HoldoutTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record([
        "year",
        "mean_with",
        "mean_without",
        "lo95_without",
        "hi95_without",
    ])?;
    for row in &table.rows {
        w.write_record([
            row.year.to_string().as_str(),
            &format!("{}", row.mean_with),
            &format!("{}", row.mean_without),
            &format!("{}", row.lo_without),
            &format!("{}", row.hi_without),
        ])?;
    }
    w.flush()?;
    Ok(())
}
