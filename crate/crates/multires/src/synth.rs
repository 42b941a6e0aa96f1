//! Synthetic multiresolution datasets with known ground truth.  The
//! generator reproduces the model's own data-generating process over a
//! configurable county map with survey-style 1/3/5-year publication tiers,
//! and provides the one-year exclusion protocol used by the holdout
//! experiment.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{rq_covariance, MatrixNormalSpec, RqParams};
use crate::linkage::{Dataset, DatasetBuilder, Observation, PeriodTable};
use crate::mixture::{BaseMeasure, Mode};
use crate::samplers::county_fitted_row;

/// Publication tier of a county's self-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    /// Publishes every period.
    OneYear,
    /// Publishes only periods spanning three or more years.
    ThreeYear,
    /// Publishes only the full-grid period.
    FiveYear,
}

/// How the block graph is laid out.
#[derive(Debug, Clone)]
pub enum BlockPattern {
    /// One self-block per county plus `n_super` super-blocks assigned
    /// round-robin, each publishing every one-year period.
    AcsLike { n_super: usize },
    /// Explicit `(block_id, county_id)` links and per-block published
    /// period ids; tier fractions are ignored.
    Custom {
        links: Vec<(String, String)>,
        published: BTreeMap<String, Vec<i64>>,
    },
}

/// Where the true covariance parameters come from.
#[derive(Debug, Clone)]
pub enum TruthSpec {
    /// One shared set for all counties.
    Fixed {
        kappa: RqParams,
        lambda_y: DMatrix<f64>,
    },
    /// Counties cycle through the listed kernels (county `i` gets group
    /// `i % k`), sharing one coefficient precision.
    Groups {
        kappas: Vec<RqParams>,
        lambda_y: DMatrix<f64>,
    },
    /// Independent per-county draws from the base measure.
    FromPrior,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_counties: usize,
    pub n_years: usize,
    /// Predictors excluding the intercept.
    pub n_predictors: usize,
    pub pattern: BlockPattern,
    pub truth: TruthSpec,
    /// Multiplier on the observation variances; zero yields noiseless
    /// values (recorded variances stay positive).
    pub noise_scale: f64,
    /// Shares of counties in the 1-year, 3-year, and 5-year tiers.
    pub tier_fractions: [f64; 3],
    pub start_year: i32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_counties: 30,
            n_years: 5,
            n_predictors: 2,
            pattern: BlockPattern::AcsLike { n_super: 5 },
            truth: TruthSpec::Fixed {
                kappa: RqParams::new(1.0, 1.0, 1.0).expect("unit kernel"),
                lambda_y: DMatrix::identity(3, 3),
            },
            noise_scale: 1.0,
            tier_fractions: [0.2, 0.4, 0.4],
            start_year: 2010,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Total coefficient rows including the intercept.
    pub fn p(&self) -> usize {
        self.n_predictors + 1
    }

    /// Tier of each county under the configured fractions: the first
    /// `n1` counties are 1-year, the next `n3` are 3-year, the rest 5-year.
    pub fn tiers(&self) -> Vec<Tier> {
        let n = self.n_counties;
        let n1 = (self.tier_fractions[0] * n as f64).round() as usize;
        let n3 = (self.tier_fractions[1] * n as f64).round() as usize;
        (0..n)
            .map(|i| {
                if i < n1 {
                    Tier::OneYear
                } else if i < n1 + n3 {
                    Tier::ThreeYear
                } else {
                    Tier::FiveYear
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_counties < 2 {
            return Err(Error::validation("need at least two counties"));
        }
        if self.n_years == 0 {
            return Err(Error::validation("need at least one year"));
        }
        let total: f64 = self.tier_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.tier_fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::validation(
                "tier fractions must be non-negative and sum to 1",
            ));
        }
        let n1 = (self.tier_fractions[0] * self.n_counties as f64).round() as usize;
        let n3 = (self.tier_fractions[1] * self.n_counties as f64).round() as usize;
        if n1 + n3 > self.n_counties {
            return Err(Error::validation("tier counts exceed the county count"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::validation(
                "noise scale must be finite and non-negative",
            ));
        }
        match &self.pattern {
            BlockPattern::AcsLike { n_super } => {
                if *n_super == 0 || *n_super > self.n_counties {
                    return Err(Error::validation(
                        "super-block count must lie in 1..=n_counties",
                    ));
                }
            }
            BlockPattern::Custom { links, .. } => {
                if links.is_empty() {
                    return Err(Error::validation("custom pattern has zero blocks"));
                }
            }
        }
        let periods = PeriodTable::default_for(self.n_years);
        let has_triple = (0..periods.n_periods()).any(|r| periods.year_indices(r).len() >= 3);
        if n3 > 0 && !has_triple {
            return Err(Error::validation(
                "three-year tier is infeasible: no period spans three years",
            ));
        }
        match &self.truth {
            TruthSpec::Fixed { kappa, lambda_y } => {
                kappa.validate()?;
                if lambda_y.nrows() != self.p() || lambda_y.ncols() != self.p() {
                    return Err(Error::validation("truth precision has the wrong size"));
                }
            }
            TruthSpec::Groups { kappas, lambda_y } => {
                if kappas.is_empty() {
                    return Err(Error::validation("grouped truth needs at least one kernel"));
                }
                for k in kappas {
                    k.validate()?;
                }
                if lambda_y.nrows() != self.p() || lambda_y.ncols() != self.p() {
                    return Err(Error::validation("truth precision has the wrong size"));
                }
            }
            TruthSpec::FromPrior => {}
        }
        Ok(())
    }

    /// Zero-padded, lexicographically ordered county id.
    pub fn county_id(i: usize) -> String {
        format!("county{i:04}")
    }

    /// Zero-padded super-block id.
    pub fn super_id(i: usize) -> String {
        format!("super{i:02}")
    }
}

/// The generating values behind a synthetic dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Per-county true coefficient matrices, P by T.
    pub b: Vec<DMatrix<f64>>,
    /// True latent functions, counties by years.
    pub f: DMatrix<f64>,
    /// Generating group of each county.
    pub labels: Vec<usize>,
    /// Noiseless observation means aligned with `dataset.observations()`.
    pub noiseless: Vec<f64>,
}

/// Periods a self-block publishes under its tier.
fn tier_periods(periods: &PeriodTable, tier: Tier) -> Vec<usize> {
    (0..periods.n_periods())
        .filter(|&row| {
            let len = periods.year_indices(row).len();
            match tier {
                Tier::OneYear => true,
                Tier::ThreeYear => len >= 3,
                Tier::FiveYear => len == periods.n_years(),
            }
        })
        .collect()
}

/// Draw one county's true coefficients from the matrix-normal prior.
fn draw_coeffs(
    kappa: &RqParams,
    lambda_y: &DMatrix<f64>,
    time_points: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let c = rq_covariance(kappa, time_points)?;
    let spec = MatrixNormalSpec::with_col_covariance(lambda_y, &c, 1e-8)?;
    Ok(spec.sample(rng))
}

/// Generate a dataset and its ground truth.  Deterministic in the seed:
/// per-county substreams draw the predictors and coefficients, one further
/// substream draws the observation noise.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let n = config.n_counties;
    let t = config.n_years;
    let time_points: Vec<f64> = (0..t).map(|j| j as f64).collect();
    let periods = PeriodTable::default_for(t);
    let tiers = config.tiers();

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let county_seeds: Vec<u64> = (0..n).map(|_| master.random()).collect();
    let noise_seed: u64 = master.random();

    // Truth parameters per county.
    let labels: Vec<usize> = match &config.truth {
        TruthSpec::Fixed { .. } => vec![0; n],
        TruthSpec::Groups { kappas, .. } => (0..n).map(|i| i % kappas.len()).collect(),
        TruthSpec::FromPrior => (0..n).collect(),
    };

    // Predictors and coefficients from per-county substreams.
    let mut coeffs = Vec::with_capacity(n);
    let mut predictor_rows: BTreeMap<String, BTreeMap<i32, Vec<f64>>> = BTreeMap::new();
    let mut f = DMatrix::zeros(n, t);
    let base = BaseMeasure::new(config.p(), Mode::Baseline);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(county_seeds[i]);
        // Smooth positive curves: exp of a low-order polynomial in scaled
        // time, one per predictor.
        let scale = if t > 1 { (t - 1) as f64 } else { 1.0 };
        let mut curves = Vec::with_capacity(config.n_predictors);
        for _ in 0..config.n_predictors {
            let a0 = rng.random::<f64>();
            let a1 = 1.6 * rng.random::<f64>() - 0.8;
            let a2 = 0.8 * rng.random::<f64>() - 0.4;
            curves.push(move |s: f64| (a0 + a1 * s + a2 * s * s).exp());
        }
        let county = SynthConfig::county_id(i);
        for j in 0..t {
            let s = j as f64 / scale;
            let values: Vec<f64> = curves.iter().map(|c| c(s)).collect();
            predictor_rows
                .entry(county.clone())
                .or_default()
                .insert(config.start_year + j as i32, values);
        }

        let b = match &config.truth {
            TruthSpec::Fixed { kappa, lambda_y } => {
                draw_coeffs(kappa, lambda_y, &time_points, &mut rng)?
            }
            TruthSpec::Groups { kappas, lambda_y } => {
                draw_coeffs(&kappas[labels[i]], lambda_y, &time_points, &mut rng)?
            }
            TruthSpec::FromPrior => {
                let location = base.draw(&mut rng)?;
                draw_coeffs(&location.kappa, &location.lambda_y, &time_points, &mut rng)?
            }
        };
        coeffs.push(b);
    }

    let mut builder = DatasetBuilder {
        years: (0..t).map(|j| config.start_year + j as i32).collect(),
        periods: Some(periods.clone()),
        predictor_rows,
        intercept: true,
        ..Default::default()
    };

    // Blocks: (id, members, published period rows).
    let mut blocks: Vec<(String, Vec<usize>, Vec<usize>)> = Vec::new();
    match &config.pattern {
        BlockPattern::AcsLike { n_super } => {
            for i in 0..n {
                blocks.push((
                    SynthConfig::county_id(i),
                    vec![i],
                    tier_periods(&periods, tiers[i]),
                ));
            }
            let one_year_rows: Vec<usize> = (0..periods.n_periods())
                .filter(|&row| periods.year_indices(row).len() == 1)
                .collect();
            for s in 0..*n_super {
                let members: Vec<usize> = (0..n).filter(|i| i % n_super == s).collect();
                blocks.push((SynthConfig::super_id(s), members, one_year_rows.clone()));
            }
        }
        BlockPattern::Custom { links, published } => {
            let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (block, county) in links {
                let idx = county
                    .strip_prefix("county")
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&i| i < n)
                    .ok_or_else(|| {
                        Error::validation(format!("custom link names unknown county '{county}'"))
                    })?;
                members.entry(block.clone()).or_default().push(idx);
            }
            for (block, mut idx) in members {
                idx.sort_unstable();
                idx.dedup();
                let rows = published
                    .get(&block)
                    .map(|ids| {
                        ids.iter()
                            .map(|&id| {
                                periods.row_of_id(id).ok_or_else(|| {
                                    Error::validation(format!("unknown period id {id}"))
                                })
                            })
                            .collect::<Result<Vec<usize>>>()
                    })
                    .transpose()?
                    .unwrap_or_default();
                blocks.push((block, idx, rows));
            }
        }
    }

    // True latent functions need the final intercept-augmented predictor
    // matrices, so compute them through a throwaway build of the inputs.
    for (block, members, _) in &blocks {
        for &i in members {
            builder
                .links
                .push((block.clone(), SynthConfig::county_id(i)));
        }
    }
    let probe = builder.clone().build();
    let design = match probe {
        Ok(ds) => (0..n).map(|l| ds.predictors(l).clone()).collect::<Vec<_>>(),
        Err(e) => return Err(e),
    };
    for (l, x) in design.iter().enumerate() {
        let fitted = county_fitted_row(x, &coeffs[l]);
        for j in 0..t {
            f[(l, j)] = fitted[j];
        }
    }

    // Observations: noiseless means plus scaled noise.  A published total
    // aggregates |members| * |years| cell-level estimates, so its variance
    // grows with that cell count, as for independent per-cell samples.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut means: BTreeMap<(String, i64), f64> = BTreeMap::new();
    for (block, members, rows) in &blocks {
        for &row in rows {
            let years = periods.year_indices(row);
            let mut mean = 0.0;
            for &l in members {
                for &j in years {
                    mean += f[(l, j)];
                }
            }
            let cells = (members.len() * years.len()) as f64;
            let unit = if config.noise_scale > 0.0 {
                config.noise_scale
            } else {
                1.0
            };
            let sigma2 = unit * cells;
            let noise = if config.noise_scale > 0.0 {
                sigma2.sqrt() * crate::numeric::std_normal(&mut noise_rng)
            } else {
                0.0
            };
            means.insert((block.clone(), periods.id_of_row(row)), mean);
            builder.observations.push((
                block.clone(),
                periods.id_of_row(row),
                mean + noise,
                sigma2,
            ));
        }
    }

    let dataset = builder.build()?;
    let noiseless: Vec<f64> = dataset
        .observations()
        .iter()
        .map(|o| {
            means[&(
                dataset.graph().block_ids()[o.block].clone(),
                dataset.periods().id_of_row(o.period),
            )]
        })
        .collect();
    Ok((
        dataset,
        GroundTruth {
            b: coeffs,
            f,
            labels,
            noiseless,
        },
    ))
}

/// Remove a county's one-year observations from its own singleton block.
/// Applying it twice is a no-op the second time.
pub fn make_holdout(dataset: &Dataset, county: usize) -> Result<Dataset> {
    if county >= dataset.n_counties() {
        return Err(Error::validation("county index out of range"));
    }
    let own = (0..dataset.graph().n_blocks())
        .find(|&b| dataset.graph().membership(b) == [county])
        .ok_or_else(|| {
            Error::validation(format!(
                "county '{}' is not its own block; nothing to exclude",
                dataset.graph().county_ids()[county]
            ))
        })?;
    let kept: Vec<Observation> = dataset
        .observations()
        .iter()
        .filter(|o| !(o.block == own && dataset.periods().year_indices(o.period).len() == 1))
        .copied()
        .collect();
    dataset.with_observations(kept)
}

fn float_field(v: f64) -> String {
    format!("{v}")
}

/// Write the loadable dataset bundle plus the ground-truth files
/// (`truth.csv` with the latent functions, `truth_labels.csv` with the
/// generating groups).
pub fn write_bundle(dir: &Path, dataset: &Dataset, truth: &GroundTruth) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let graph = dataset.graph();

    let mut links = csv::Writer::from_writer(File::create(dir.join("links.csv"))?);
    links.write_record(["block_id", "county_id"])?;
    for b in 0..graph.n_blocks() {
        for &l in graph.membership(b) {
            links.write_record([
                graph.block_ids()[b].as_str(),
                graph.county_ids()[l].as_str(),
            ])?;
        }
    }
    links.flush()?;

    let mut obs = csv::Writer::from_writer(File::create(dir.join("obs.csv"))?);
    obs.write_record(["block_id", "period_id", "y", "sigma2"])?;
    for o in dataset.observations() {
        obs.write_record([
            graph.block_ids()[o.block].as_str(),
            &dataset.periods().id_of_row(o.period).to_string(),
            &float_field(o.y),
            &float_field(o.sigma2),
        ])?;
    }
    obs.flush()?;

    let mut periods = csv::Writer::from_writer(File::create(dir.join("periods.csv"))?);
    periods.write_record(["period_id", "year"])?;
    for row in 0..dataset.periods().n_periods() {
        for &j in dataset.periods().year_indices(row) {
            periods.write_record([
                dataset.periods().id_of_row(row).to_string().as_str(),
                &dataset.grid().year(j).to_string(),
            ])?;
        }
    }
    periods.flush()?;

    let mut preds = csv::Writer::from_writer(File::create(dir.join("predictors.csv"))?);
    let p = dataset.n_predictors();
    let skip = usize::from(dataset.has_intercept());
    let mut header = vec!["county_id".to_string(), "year".to_string()];
    for k in skip..p {
        header.push(format!("x{}", k + 1 - skip));
    }
    preds.write_record(&header)?;
    for l in 0..dataset.n_counties() {
        let x = dataset.predictors(l);
        for j in 0..dataset.n_years() {
            let mut rec = vec![
                graph.county_ids()[l].clone(),
                dataset.grid().year(j).to_string(),
            ];
            for k in skip..p {
                rec.push(float_field(x[(k, j)]));
            }
            preds.write_record(&rec)?;
        }
    }
    preds.flush()?;

    let mut truth_f = csv::Writer::from_writer(File::create(dir.join("truth.csv"))?);
    truth_f.write_record(["county_id", "year", "f_true"])?;
    for l in 0..dataset.n_counties() {
        for j in 0..dataset.n_years() {
            truth_f.write_record([
                graph.county_ids()[l].as_str(),
                &dataset.grid().year(j).to_string(),
                &float_field(truth.f[(l, j)]),
            ])?;
        }
    }
    truth_f.flush()?;

    let mut labels = csv::Writer::from_writer(File::create(dir.join("truth_labels.csv"))?);
    labels.write_record(["county_id", "label"])?;
    for (l, &label) in truth.labels.iter().enumerate() {
        labels.write_record([graph.county_ids()[l].as_str(), &label.to_string()])?;
    }
    labels.flush()?;
    Ok(())
}
