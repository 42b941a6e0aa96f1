//! Data model and ingestion: the year grid, the period-to-year incidence
//! table, the block/county linkage graph, observations, and predictors.
//!
//! Every published statistic is attached to a *block* (any areal unit:
//! single county, metro area, balance of state, ...) and a *period* (a 1-,
//! 3-, or 5-year interval).  The latent estimation targets live on *cells*
//! `(county, year)`.  This module provides both directions of the nesting
//! map — `(block, period) -> {(county, year)}` and its reverse — plus total
//! validation at load time so the samplers never see malformed input.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ordered grid of year labels with the kernel coordinates for each year.
/// Coordinates default to `0, 1, ..., T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct YearGrid {
    years: Vec<i32>,
    time_points: Vec<f64>,
}

impl YearGrid {
    pub fn new(years: Vec<i32>) -> Result<Self> {
        if years.len() < 2 {
            return Err(Error::validation(format!(
                "year grid needs at least 2 years, got {}",
                years.len()
            )));
        }
        if !years.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("year grid must be strictly increasing"));
        }
        let time_points = (0..years.len()).map(|i| i as f64).collect();
        Ok(YearGrid { years, time_points })
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn time_points(&self) -> &[f64] {
        &self.time_points
    }

    pub fn year(&self, index: usize) -> i32 {
        self.years[index]
    }

    pub fn index_of(&self, year: i32) -> Option<usize> {
        self.years.binary_search(&year).ok()
    }
}

/// Period-to-year incidence: row `q` lists which year columns period `q`
/// pools.  Rows must be nonempty and contiguous (periods are intervals).
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodTable {
    ids: Vec<i64>,
    year_indices: Vec<Vec<usize>>,
    t: usize,
}

impl PeriodTable {
    pub fn new(ids: Vec<i64>, year_indices: Vec<Vec<usize>>, t: usize) -> Result<Self> {
        if ids.len() != year_indices.len() {
            return Err(Error::validation(
                "period ids and incidence rows differ in length",
            ));
        }
        let mut seen = BTreeSet::new();
        for (id, row) in ids.iter().zip(&year_indices) {
            if !seen.insert(*id) {
                return Err(Error::validation(format!("duplicate period id {id}")));
            }
            if row.is_empty() {
                return Err(Error::validation(format!("period {id} links to no years")));
            }
            if row.iter().any(|&j| j >= t) {
                return Err(Error::validation(format!(
                    "period {id} references a year outside the grid"
                )));
            }
            if !row.windows(2).all(|w| w[1] == w[0] + 1) {
                return Err(Error::validation(format!(
                    "period {id} years are not a contiguous interval"
                )));
            }
        }
        Ok(PeriodTable {
            ids,
            year_indices,
            t,
        })
    }

    /// Default publication pattern over `t` years: one period per single
    /// year, all 3-year intervals when `t >= 4`, and the full `t`-year
    /// interval.  For `t = 5` this is exactly the classic 9-period layout
    /// (ids 1-5 single years, 6-8 the 3-year windows, 9 all five years).
    pub fn default_for(t: usize) -> Self {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for j in 0..t {
            ids.push((j + 1) as i64);
            rows.push(vec![j]);
        }
        if t >= 4 {
            for start in 0..=(t - 3) {
                ids.push((ids.len() + 1) as i64);
                rows.push((start..start + 3).collect());
            }
        }
        ids.push((ids.len() + 1) as i64);
        rows.push((0..t).collect());
        PeriodTable::new(ids, rows, t).expect("default period table is valid")
    }

    pub fn n_periods(&self) -> usize {
        self.ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.t
    }

    pub fn id_of_row(&self, row: usize) -> i64 {
        self.ids[row]
    }

    pub fn row_of_id(&self, id: i64) -> Option<usize> {
        self.ids.iter().position(|&v| v == id)
    }

    /// Year column indices pooled by the period in table row `row`.
    pub fn year_indices(&self, row: usize) -> &[usize] {
        &self.year_indices[row]
    }
}

/// Block/county membership graph with dense integer indices.  Ids are opaque
/// strings; the dense mapping is deterministic (lexicographic).
#[derive(Debug, Clone)]
pub struct LinkageGraph {
    county_ids: Vec<String>,
    block_ids: Vec<String>,
    /// For each block, the sorted county indices nested in it.
    membership: Vec<Vec<usize>>,
    /// For each county, the sorted block indices containing it.
    county_blocks: Vec<Vec<usize>>,
}

impl LinkageGraph {
    pub fn n_counties(&self) -> usize {
        self.county_ids.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_ids.len()
    }

    pub fn county_ids(&self) -> &[String] {
        &self.county_ids
    }

    pub fn block_ids(&self) -> &[String] {
        &self.block_ids
    }

    pub fn county_index(&self, id: &str) -> Option<usize> {
        self.county_ids
            .binary_search_by(|c| c.as_str().cmp(id))
            .ok()
    }

    pub fn block_index(&self, id: &str) -> Option<usize> {
        self.block_ids.binary_search_by(|b| b.as_str().cmp(id)).ok()
    }

    pub fn membership(&self, block: usize) -> &[usize] {
        &self.membership[block]
    }

    pub fn blocks_of_county(&self, county: usize) -> &[usize] {
        &self.county_blocks[county]
    }
}

/// One published statistic: block, period (table row), value, and known
/// sampling variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub block: usize,
    pub period: usize,
    pub y: f64,
    pub sigma2: f64,
}

/// Fully validated input bundle.  Immutable during sampling; cheap to share
/// read-only across workers.
#[derive(Debug, Clone)]
pub struct Dataset {
    grid: YearGrid,
    periods: PeriodTable,
    graph: LinkageGraph,
    observations: Vec<Observation>,
    /// Per-county `P x T` predictor matrix; column `j` is the year-`j`
    /// predictor vector (intercept row first when present).
    predictors: Vec<DMatrix<f64>>,
    has_intercept: bool,
    /// Reverse index: `county_year_links[l][j]` lists the observation
    /// indices whose (block, period) covers cell `(l, j)`, ascending.
    county_year_links: Vec<Vec<Vec<usize>>>,
    /// All observation indices touching county `l` (union over years).
    county_obs: Vec<Vec<usize>>,
    /// Periods with at least one observation, per block.
    published: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn grid(&self) -> &YearGrid {
        &self.grid
    }

    pub fn periods(&self) -> &PeriodTable {
        &self.periods
    }

    pub fn graph(&self) -> &LinkageGraph {
        &self.graph
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n_counties(&self) -> usize {
        self.graph.n_counties()
    }

    pub fn n_years(&self) -> usize {
        self.grid.len()
    }

    pub fn n_predictors(&self) -> usize {
        self.predictors[0].nrows()
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    pub fn predictors(&self, county: usize) -> &DMatrix<f64> {
        &self.predictors[county]
    }

    /// Year labels pooled by the period with external id `period_id`.
    pub fn years_of_period(&self, period_id: i64) -> Result<Vec<i32>> {
        let row = self
            .periods
            .row_of_id(period_id)
            .ok_or_else(|| Error::validation(format!("unknown period id {period_id}")))?;
        Ok(self
            .periods
            .year_indices(row)
            .iter()
            .map(|&j| self.grid.year(j))
            .collect())
    }

    /// All `(county, year)` cells feeding the observed `(block, period)`
    /// pair, county-major then year-minor — the iteration order of every
    /// likelihood sum, fixed for reproducibility.
    pub fn nested_cells(&self, block: usize, period_row: usize) -> Result<Vec<(usize, usize)>> {
        if !self.published[block].contains(&period_row) {
            return Err(Error::validation(format!(
                "block {} has no observation for period {}",
                self.graph.block_ids[block],
                self.periods.id_of_row(period_row)
            )));
        }
        let mut cells = Vec::new();
        for &l in self.graph.membership(block) {
            for &j in self.periods.year_indices(period_row) {
                cells.push((l, j));
            }
        }
        Ok(cells)
    }

    /// Observation indices whose `(block, period)` covers cell `(l, j)` —
    /// the reverse image of [`Dataset::nested_cells`], ascending.
    pub fn links_of_cell(&self, county: usize, year: usize) -> Result<&[usize]> {
        if county >= self.n_counties() {
            return Err(Error::validation(format!("unknown county index {county}")));
        }
        if year >= self.n_years() {
            return Err(Error::validation(format!("year index {year} outside grid")));
        }
        Ok(&self.county_year_links[county][year])
    }

    /// All observation indices touching county `l` in any year.
    pub fn obs_of_county(&self, county: usize) -> &[usize] {
        &self.county_obs[county]
    }

    /// Periods (table rows) with observations on the given block.
    pub fn published_periods(&self, block: usize) -> &[usize] {
        &self.published[block]
    }

    /// Replace observation values in place (used by joint-distribution
    /// simulator tests, which redraw `y` given the current state).  Lengths
    /// must match and values must be finite; variances are untouched.
    pub fn set_observation_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.observations.len() {
            return Err(Error::validation("observation value count mismatch"));
        }
        for (obs, &v) in self.observations.iter_mut().zip(values) {
            if !v.is_finite() {
                return Err(Error::validation("observation value must be finite"));
            }
            obs.y = v;
        }
        Ok(())
    }

    /// Copy of this dataset with a different observation list (same graph,
    /// periods, and predictors); revalidates and rebuilds the indices.
    pub fn with_observations(&self, observations: Vec<Observation>) -> Result<Dataset> {
        let mut out = Dataset {
            grid: self.grid.clone(),
            periods: self.periods.clone(),
            graph: self.graph.clone(),
            observations,
            predictors: self.predictors.clone(),
            has_intercept: self.has_intercept,
            county_year_links: Vec::new(),
            county_obs: Vec::new(),
            published: Vec::new(),
        };
        out.validate_and_index()?;
        Ok(out)
    }

    /// Validate observation invariants and (re)build the derived indices.
    fn validate_and_index(&mut self) -> Result<()> {
        let n = self.n_counties();
        let t = self.n_years();
        self.observations.sort_by_key(|o| (o.block, o.period));
        let mut seen = BTreeSet::new();
        for obs in &self.observations {
            if obs.block >= self.graph.n_blocks() || obs.period >= self.periods.n_periods() {
                return Err(Error::validation(
                    "observation references unknown block or period",
                ));
            }
            if !seen.insert((obs.block, obs.period)) {
                return Err(Error::validation(format!(
                    "duplicate observation for block {} period {}",
                    self.graph.block_ids[obs.block],
                    self.periods.id_of_row(obs.period)
                )));
            }
            if !(obs.sigma2 > 0.0) || !obs.sigma2.is_finite() {
                return Err(Error::validation(format!(
                    "non-positive variance for block {} period {}",
                    self.graph.block_ids[obs.block],
                    self.periods.id_of_row(obs.period)
                )));
            }
            if !obs.y.is_finite() {
                return Err(Error::validation("observation value must be finite"));
            }
        }
        let mut published = vec![Vec::new(); self.graph.n_blocks()];
        let mut county_year_links = vec![vec![Vec::new(); t]; n];
        let mut county_obs = vec![Vec::new(); n];
        for (r, obs) in self.observations.iter().enumerate() {
            published[obs.block].push(obs.period);
            for &l in self.graph.membership(obs.block) {
                county_obs[l].push(r);
                for &j in self.periods.year_indices(obs.period) {
                    county_year_links[l][j].push(r);
                }
            }
        }
        self.published = published;
        self.county_year_links = county_year_links;
        self.county_obs = county_obs;
        Ok(())
    }
}

/// Raw inputs prior to validation.  Both the CSV loader and the synthetic
/// generator funnel through [`DatasetBuilder::build`], so there is a single
/// validation path.
#[derive(Debug, Clone, Default)]
pub struct DatasetBuilder {
    pub years: Vec<i32>,
    /// `None` selects [`PeriodTable::default_for`] over the grid length.
    pub periods: Option<PeriodTable>,
    /// `(block_id, county_id)` membership pairs.
    pub links: Vec<(String, String)>,
    /// `(block_id, period_id, y, sigma2)`.
    pub observations: Vec<(String, i64, f64, f64)>,
    /// Per county, per year: predictor values (without intercept).
    pub predictor_rows: BTreeMap<String, BTreeMap<i32, Vec<f64>>>,
    /// Prepend an all-ones intercept row to every predictor matrix.
    pub intercept: bool,
}

impl DatasetBuilder {
    pub fn build(self) -> Result<Dataset> {
        let grid = YearGrid::new(self.years)?;
        let t = grid.len();
        let periods = match self.periods {
            Some(p) => {
                if p.n_years() != t {
                    return Err(Error::validation(
                        "period table and year grid disagree on the number of years",
                    ));
                }
                p
            }
            None => PeriodTable::default_for(t),
        };

        if self.links.is_empty() {
            return Err(Error::validation("no membership links given"));
        }
        let county_ids: Vec<String> = self
            .links
            .iter()
            .map(|(_, c)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let block_ids: Vec<String> = self
            .links
            .iter()
            .map(|(b, _)| b.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let county_index: HashMap<&str, usize> = county_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let block_index: HashMap<&str, usize> = block_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();

        let mut membership = vec![BTreeSet::new(); block_ids.len()];
        for (b, c) in &self.links {
            let bi = block_index[b.as_str()];
            let ci = county_index[c.as_str()];
            if !membership[bi].insert(ci) {
                return Err(Error::validation(format!(
                    "duplicate link: block {b}, county {c}"
                )));
            }
        }
        let membership: Vec<Vec<usize>> = membership
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();
        let mut county_blocks = vec![Vec::new(); county_ids.len()];
        for (bi, members) in membership.iter().enumerate() {
            for &ci in members {
                county_blocks[ci].push(bi);
            }
        }
        // A block named after a county must actually contain that county.
        for (bi, bid) in block_ids.iter().enumerate() {
            if let Some(&ci) = county_index.get(bid.as_str()) {
                if !membership[bi].contains(&ci) {
                    return Err(Error::validation(format!(
                        "block {bid} shares its id with a county but lacks the self-link"
                    )));
                }
            }
        }
        let mut observations = Vec::with_capacity(self.observations.len());
        for (block, period_id, y, sigma2) in &self.observations {
            let bi = block_index.get(block.as_str()).copied().ok_or_else(|| {
                Error::validation(format!(
                    "dangling reference: observation block {block} has no membership links"
                ))
            })?;
            let row = periods.row_of_id(*period_id).ok_or_else(|| {
                Error::validation(format!(
                    "observation references unknown period id {period_id}"
                ))
            })?;
            observations.push(Observation {
                block: bi,
                period: row,
                y: *y,
                sigma2: *sigma2,
            });
        }
        drop(block_index);
        drop(county_index);
        let graph = LinkageGraph {
            county_ids,
            block_ids,
            membership,
            county_blocks,
        };

        // Predictors: exact county coverage, all years, consistent width.
        let declared: BTreeSet<&str> = self.predictor_rows.keys().map(|s| s.as_str()).collect();
        let expected: BTreeSet<&str> = graph.county_ids.iter().map(|s| s.as_str()).collect();
        if declared != expected {
            let mut msg = String::from("predictor counties do not match linked counties;");
            for c in expected.difference(&declared) {
                let _ = write!(msg, " missing {c}");
            }
            for c in declared.difference(&expected) {
                let _ = write!(msg, " unknown {c}");
            }
            return Err(Error::validation(msg));
        }
        let mut p_in: Option<usize> = None;
        let mut predictors = Vec::with_capacity(graph.n_counties());
        for county in &graph.county_ids {
            let by_year = &self.predictor_rows[county];
            let width = by_year.values().next().map_or(0, Vec::len);
            match p_in {
                None => p_in = Some(width),
                Some(w) if w != width => {
                    return Err(Error::validation(format!(
                        "county {county} has {width} predictor columns, expected {w}"
                    )))
                }
                _ => {}
            }
            let p = width + usize::from(self.intercept);
            if p == 0 {
                return Err(Error::validation(
                    "no predictor columns and no intercept; nothing to regress on",
                ));
            }
            let mut x = DMatrix::zeros(p, t);
            for (j, &year) in grid.years().iter().enumerate() {
                let values = by_year.get(&year).ok_or_else(|| {
                    Error::validation(format!("county {county} is missing predictors for {year}"))
                })?;
                if values.len() != width {
                    return Err(Error::validation(format!(
                        "county {county}, year {year}: ragged predictor row"
                    )));
                }
                let mut row0 = 0;
                if self.intercept {
                    x[(0, j)] = 1.0;
                    row0 = 1;
                }
                for (i, &v) in values.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::validation(format!(
                            "county {county}, year {year}: non-finite predictor"
                        )));
                    }
                    x[(row0 + i, j)] = v;
                }
            }
            if by_year.len() != t {
                return Err(Error::validation(format!(
                    "county {county} has predictor rows for years outside the grid"
                )));
            }
            predictors.push(x);
        }

        let mut dataset = Dataset {
            grid,
            periods,
            graph,
            observations,
            predictors,
            has_intercept: self.intercept,
            county_year_links: Vec::new(),
            county_obs: Vec::new(),
            published: Vec::new(),
        };
        dataset.validate_and_index()?;
        Ok(dataset)
    }
}

/// File locations of one dataset bundle.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub links: PathBuf,
    pub observations: PathBuf,
    /// Optional; the default period table is used when absent.
    pub periods: Option<PathBuf>,
    pub predictors: PathBuf,
}

impl DatasetPaths {
    /// Conventional layout: `links.csv`, `obs.csv`, `predictors.csv`, and an
    /// optional `periods.csv` inside `dir`.
    pub fn from_dir(dir: &Path) -> Self {
        let periods = dir.join("periods.csv");
        DatasetPaths {
            links: dir.join("links.csv"),
            observations: dir.join("obs.csv"),
            periods: periods.exists().then_some(periods),
            predictors: dir.join("predictors.csv"),
        }
    }

    /// Every file in the bundle, for content hashing.
    pub fn files(&self) -> Vec<&Path> {
        let mut v = vec![
            self.links.as_path(),
            self.observations.as_path(),
            self.predictors.as_path(),
        ];
        if let Some(p) = &self.periods {
            v.push(p.as_path());
        }
        v
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    path: &Path,
    line: u64,
    what: &str,
) -> Result<T> {
    let raw = record
        .get(idx)
        .ok_or_else(|| Error::validation(format!("{}:{line}: missing {what}", path.display())))?;
    raw.parse().map_err(|_| {
        Error::validation(format!(
            "{}:{line}: cannot parse {what} from '{raw}'",
            path.display()
        ))
    })
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// Load and validate a dataset bundle.  `intercept` prepends an all-ones row
/// to every predictor matrix (the usual case).
pub fn load_dataset(paths: &DatasetPaths, intercept: bool) -> Result<Dataset> {
    let mut builder = DatasetBuilder {
        intercept,
        ..Default::default()
    };

    let mut links = csv_reader(&paths.links)?;
    let headers = links.headers()?.clone();
    expect_columns(&paths.links, &headers, &["block_id", "county_id"])?;
    for record in links.records() {
        let record = record?;
        let line = line_of(&record);
        let block: String = parse_field(&record, 0, &paths.links, line, "block_id")?;
        let county: String = parse_field(&record, 1, &paths.links, line, "county_id")?;
        builder.links.push((block, county));
    }

    let mut obs = csv_reader(&paths.observations)?;
    let headers = obs.headers()?.clone();
    expect_columns(
        &paths.observations,
        &headers,
        &["block_id", "period_id", "y", "sigma2"],
    )?;
    for record in obs.records() {
        let record = record?;
        let line = line_of(&record);
        builder.observations.push((
            parse_field(&record, 0, &paths.observations, line, "block_id")?,
            parse_field(&record, 1, &paths.observations, line, "period_id")?,
            parse_field(&record, 2, &paths.observations, line, "y")?,
            parse_field(&record, 3, &paths.observations, line, "sigma2")?,
        ));
    }

    let mut years = BTreeSet::new();
    let mut preds = csv_reader(&paths.predictors)?;
    let headers = preds.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "county_id" || &headers[1] != "year" {
        return Err(Error::validation(format!(
            "{}: header must start with county_id, year",
            paths.predictors.display()
        )));
    }
    for record in preds.records() {
        let record = record?;
        let line = line_of(&record);
        let county: String = parse_field(&record, 0, &paths.predictors, line, "county_id")?;
        let year: i32 = parse_field(&record, 1, &paths.predictors, line, "year")?;
        let mut values = Vec::with_capacity(headers.len() - 2);
        for idx in 2..headers.len() {
            values.push(parse_field(
                &record,
                idx,
                &paths.predictors,
                line,
                &headers[idx],
            )?);
        }
        years.insert(year);
        if builder
            .predictor_rows
            .entry(county.clone())
            .or_default()
            .insert(year, values)
            .is_some()
        {
            return Err(Error::validation(format!(
                "{}:{line}: duplicate predictor row for county {county}, year {year}",
                paths.predictors.display()
            )));
        }
    }
    builder.years = years.into_iter().collect();

    if let Some(period_path) = &paths.periods {
        let mut reader = csv_reader(period_path)?;
        let headers = reader.headers()?.clone();
        expect_columns(period_path, &headers, &["period_id", "year"])?;
        let mut rows: BTreeMap<i64, Vec<i32>> = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let line = line_of(&record);
            let id: i64 = parse_field(&record, 0, period_path, line, "period_id")?;
            let year: i32 = parse_field(&record, 1, period_path, line, "year")?;
            rows.entry(id).or_default().push(year);
        }
        let grid_years = builder.years.clone();
        let mut ids = Vec::new();
        let mut year_indices = Vec::new();
        for (id, mut ys) in rows {
            ys.sort_unstable();
            let mut indices = Vec::with_capacity(ys.len());
            for y in ys {
                let j = grid_years.binary_search(&y).map_err(|_| {
                    Error::validation(format!(
                        "{}: period {id} references year {y} absent from predictors",
                        period_path.display()
                    ))
                })?;
                indices.push(j);
            }
            ids.push(id);
            year_indices.push(indices);
        }
        builder.periods = Some(PeriodTable::new(ids, year_indices, grid_years.len())?);
    }

    builder.build()
}

fn expect_columns(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::validation(format!(
            "{}: expected header {expected:?}, got {got:?}",
            path.display()
        )));
    }
    Ok(())
}
