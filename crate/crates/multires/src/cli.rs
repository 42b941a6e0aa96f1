//! Command-line front end: `simulate`, `fit`, `summarize`, and `holdout`
//! subcommands over the library, with a flat key=value configuration file,
//! manifest emission, and deterministic seeding.  Diagnostics go to
//! standard error; data only to files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::chain::{read_chain, run_chain, Checkpoint, CsvSink, RunStatus, CHECKPOINT};
use crate::error::{Error, Result};
use crate::estimands::{
    dic3, fitted_summaries, has_one_year_data, holdout_compare, lpml, pseudo_statistics, rollup,
    write_fit, write_holdout, write_pseudo, write_rollup, write_summaries, FitReport,
    CPO_CLIP_QUANTILE,
};
use crate::kernels::RqParams;
use crate::linkage::{load_dataset, Dataset, DatasetPaths};
use crate::mixture::Mode;
use crate::samplers::{ChainConfig, Sampler};
use crate::synth::{generate, make_holdout, write_bundle, BlockPattern, SynthConfig, TruthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "multires",
    version,
    about = "Bayesian multiresolution estimation"
)]
struct Cli {
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (required by every subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the parallel update stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Model variant: observation model only, or with predictor clustering.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    Ppmx,
}

impl From<ModeArg> for Mode {
    fn from(value: ModeArg) -> Mode {
        match value {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Ppmx => Mode::Ppmx,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TruthArg {
    /// One shared covariance setting.
    Fixed,
    /// Per-county draws from the base measure.
    Prior,
    /// Two kernel groups with 100x separated scales.
    TwoGroups,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle with ground truth files.
    Simulate(SimulateArgs),
    /// Run the sampler over a dataset bundle, writing chain files.
    Fit(FitArgs),
    /// Post-process chain output into summary, pseudo, rollup, and fit files.
    Summarize(SummarizeArgs),
    /// Compare fits with and without one county's one-year data.
    Holdout(HoldoutArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// County count.
    #[arg(long)]
    counties: Option<usize>,
    /// Grid length in years.
    #[arg(long)]
    years: Option<usize>,
    /// Predictors excluding the intercept.
    #[arg(long)]
    predictors: Option<usize>,
    /// Super-block count.
    #[arg(long)]
    super_blocks: Option<usize>,
    /// Observation noise multiplier.
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Source of the true covariance parameters.
    #[arg(long, value_enum)]
    truth: Option<TruthArg>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Burn-in sweeps.
    #[arg(long)]
    burn: Option<usize>,
    /// Retained draws.
    #[arg(long)]
    keep: Option<usize>,
    /// Sweeps between retained draws.
    #[arg(long)]
    thin: Option<usize>,
    /// Continue from this checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many total sweeps.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Average period years instead of summing (sensitivity variant).
    #[arg(long)]
    period_mean: bool,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Chain output directory produced by `fit`.
    #[arg(long)]
    chain: PathBuf,
    /// Optional county_id,group_id file keying the roll-up.
    #[arg(long)]
    rollup: Option<PathBuf>,
    /// Restrict pseudo.csv to --county.
    #[arg(long, requires = "county")]
    pseudo: bool,
    /// County id for --pseudo.
    #[arg(long, requires = "pseudo")]
    county: Option<String>,
}

#[derive(Debug, Args)]
struct HoldoutArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// County whose one-year data is excluded.
    #[arg(long)]
    county: String,
    /// Burn-in sweeps for both fits.
    #[arg(long)]
    burn: Option<usize>,
    /// Retained draws for both fits.
    #[arg(long)]
    keep: Option<usize>,
    /// Sweeps between retained draws.
    #[arg(long)]
    thin: Option<usize>,
}

/// Keys the configuration file may define.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "workers",
    "mode",
    "burn",
    "keep",
    "thin",
    "c_star",
    "slice_width",
    "slice_max_steps",
    "jitter",
    "period_mean",
    "alpha_shape",
    "alpha_rate",
    "log_every",
    "counties",
    "years",
    "predictors",
    "super_blocks",
    "noise_scale",
    "truth",
    "tiers",
    "start_year",
    "clip_quantile",
];

/// Parsed configuration file: flat `key = value` lines, `#` comments.
#[derive(Debug, Default)]
struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        Settings::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<Settings> {
        let mut map = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("{origin}:{}: expected key=value", idx + 1))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::validation(format!(
                    "{origin}:{}: unknown configuration key '{key}'",
                    idx + 1
                )));
            }
            map.insert(key, value.trim().to_string());
        }
        Ok(Settings { map })
    }

    /// Resolve one option: explicit flag, then config entry, then default.
    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                Error::validation(format!("configuration key '{key}': cannot parse '{raw}'"))
            }),
            None => Ok(default),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }
}

/// Options shared by every subcommand after precedence resolution.
#[derive(Debug, Clone)]
struct Globals {
    seed: u64,
    workers: usize,
    mode: Mode,
    out: PathBuf,
}

fn resolve_globals(cli: &Cli, settings: &Settings) -> Result<Globals> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::validation("--out <dir> is required"))?;
    let seed = settings.get("seed", cli.seed, 0)?;
    let workers = settings.get("workers", cli.workers, 1)?;
    let mode = match cli.mode {
        Some(m) => m.into(),
        None => match settings.raw("mode") {
            None | Some("baseline") => Mode::Baseline,
            Some("ppmx") => Mode::Ppmx,
            Some(other) => {
                return Err(Error::validation(format!(
                    "configuration key 'mode': expected baseline or ppmx, got '{other}'"
                )))
            }
        },
    };
    Ok(Globals {
        seed,
        workers,
        mode,
        out,
    })
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "baseline",
        Mode::Ppmx => "ppmx",
    }
}

/// Run record written to `manifest.json` for every subcommand.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub mode: String,
    /// Resolved option values after flag/config/default precedence.
    pub options: BTreeMap<String, String>,
    /// SHA-256 of every input file read.
    pub inputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    /// Present for commands that ran the sampler.
    pub sweeps: Option<SweepTiming>,
}

#[derive(Debug, Serialize)]
pub struct SweepTiming {
    pub count: u64,
    pub seconds_total: f64,
    pub seconds_mean: f64,
    pub seconds_max: f64,
}

impl SweepTiming {
    fn from_durations(durations: &[f64]) -> Option<SweepTiming> {
        if durations.is_empty() {
            return None;
        }
        let total: f64 = durations.iter().sum();
        let max = durations.iter().fold(0.0f64, |acc, &d| acc.max(d));
        Some(SweepTiming {
            count: durations.len() as u64,
            seconds_total: total,
            seconds_mean: total / durations.len() as f64,
            seconds_max: max,
        })
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file =
        File::open(path).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Content fingerprint of a dataset bundle: hash of the per-file hashes in
/// bundle order.
pub fn dataset_fingerprint(paths: &DatasetPaths) -> Result<String> {
    let mut hasher = Sha256::new();
    for file in paths.files() {
        hasher.update(file_sha256(file)?.as_bytes());
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn hash_inputs(files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for path in files {
        map.insert(path.display().to_string(), file_sha256(path)?);
    }
    Ok(map)
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    let mut file = BufWriter::new(File::create(out.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut file, manifest)?;
    file.flush()?;
    Ok(())
}

/// Per-command output for the manifest.
struct CommandReport {
    options: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    sweeps: Option<SweepTiming>,
}

fn chain_config(
    globals: &Globals,
    burn: Option<usize>,
    keep: Option<usize>,
    thin: Option<usize>,
    period_mean: bool,
    settings: &Settings,
) -> Result<ChainConfig> {
    let defaults = ChainConfig::default();
    let config = ChainConfig {
        n_burn: settings.get("burn", burn, defaults.n_burn)?,
        n_keep: settings.get("keep", keep, defaults.n_keep)?,
        thin: settings.get("thin", thin, defaults.thin)?,
        seed: globals.seed,
        c_star: settings.get("c_star", None, defaults.c_star)?,
        mode: globals.mode,
        slice_width: settings.get("slice_width", None, defaults.slice_width)?,
        slice_max_steps: settings.get("slice_max_steps", None, defaults.slice_max_steps)?,
        jitter: settings.get("jitter", None, defaults.jitter)?,
        workers: globals.workers,
        period_mean: settings.get("period_mean", period_mean.then_some(true), false)?,
        alpha_prior: (
            settings.get("alpha_shape", None, defaults.alpha_prior.0)?,
            settings.get("alpha_rate", None, defaults.alpha_prior.1)?,
        ),
    };
    config.validate()?;
    Ok(config)
}

fn chain_options(config: &ChainConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert("burn".into(), config.n_burn.to_string());
    map.insert("keep".into(), config.n_keep.to_string());
    map.insert("thin".into(), config.thin.to_string());
    map.insert("c_star".into(), config.c_star.to_string());
    map.insert("slice_width".into(), config.slice_width.to_string());
    map.insert("slice_max_steps".into(), config.slice_max_steps.to_string());
    map.insert("jitter".into(), config.jitter.to_string());
    map.insert("period_mean".into(), config.period_mean.to_string());
    map.insert("alpha_shape".into(), config.alpha_prior.0.to_string());
    map.insert("alpha_rate".into(), config.alpha_prior.1.to_string());
    map
}

fn cmd_simulate(
    globals: &Globals,
    args: &SimulateArgs,
    settings: &Settings,
) -> Result<CommandReport> {
    let n_predictors = settings.get("predictors", args.predictors, 2)?;
    let p = n_predictors + 1;
    let truth_arg = match args.truth {
        Some(t) => t,
        None => match settings.raw("truth") {
            None | Some("fixed") => TruthArg::Fixed,
            Some("prior") => TruthArg::Prior,
            Some("two-groups") => TruthArg::TwoGroups,
            Some(other) => {
                return Err(Error::validation(format!(
                    "configuration key 'truth': expected fixed, prior, or two-groups, got '{other}'"
                )))
            }
        },
    };
    let truth = match truth_arg {
        TruthArg::Fixed => TruthSpec::Fixed {
            kappa: RqParams::new(1.0, 1.0, 1.0)?,
            lambda_y: DMatrix::identity(p, p),
        },
        TruthArg::Prior => TruthSpec::FromPrior,
        TruthArg::TwoGroups => TruthSpec::Groups {
            kappas: vec![
                RqParams::new(0.1, 1.0, 1.0)?,
                RqParams::new(10.0, 1.0, 1.0)?,
            ],
            lambda_y: DMatrix::identity(p, p),
        },
    };
    let tier_fractions = match settings.raw("tiers") {
        None => [0.2, 0.4, 0.4],
        Some(raw) => {
            let parts: Vec<f64> = raw
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::validation(format!("configuration key 'tiers': cannot parse '{raw}'"))
                })?;
            if parts.len() != 3 {
                return Err(Error::validation(
                    "configuration key 'tiers': expected three shares",
                ));
            }
            [parts[0], parts[1], parts[2]]
        }
    };
    let config = SynthConfig {
        n_counties: settings.get("counties", args.counties, 30)?,
        n_years: settings.get("years", args.years, 5)?,
        n_predictors,
        pattern: BlockPattern::AcsLike {
            n_super: settings.get("super_blocks", args.super_blocks, 5)?,
        },
        truth,
        noise_scale: settings.get("noise_scale", args.noise_scale, 1.0)?,
        tier_fractions,
        start_year: settings.get("start_year", None, 2010)?,
        seed: globals.seed,
    };
    let (dataset, truth) = generate(&config)?;
    write_bundle(&globals.out, &dataset, &truth)?;
    eprintln!(
        "[simulate] wrote {} counties, {} observations to {}",
        dataset.n_counties(),
        dataset.observations().len(),
        globals.out.display()
    );

    let mut options = BTreeMap::new();
    options.insert("counties".into(), config.n_counties.to_string());
    options.insert("years".into(), config.n_years.to_string());
    options.insert("predictors".into(), config.n_predictors.to_string());
    options.insert("noise_scale".into(), config.noise_scale.to_string());
    options.insert(
        "truth".into(),
        match truth_arg {
            TruthArg::Fixed => "fixed",
            TruthArg::Prior => "prior",
            TruthArg::TwoGroups => "two-groups",
        }
        .to_string(),
    );
    options.insert(
        "tiers".into(),
        format!(
            "{},{},{}",
            tier_fractions[0], tier_fractions[1], tier_fractions[2]
        ),
    );
    Ok(CommandReport {
        options,
        inputs: BTreeMap::new(),
        sweeps: None,
    })
}

/// Run (or resume) one chain into `dir`, returning per-sweep durations.
fn run_fit(
    dataset: Dataset,
    config: ChainConfig,
    dir: &Path,
    fingerprint: &str,
    resume: Option<&Path>,
    stop_after: Option<u64>,
    log_every: u64,
) -> Result<Vec<f64>> {
    std::fs::create_dir_all(dir)?;
    let ppmx = config.mode == Mode::Ppmx;
    let total = config.total_sweeps() as u64;
    let (mut sampler, mut sink) = match resume {
        None => {
            let sampler = Sampler::new(dataset.clone(), config)?;
            let sink = CsvSink::create(dir, &dataset, ppmx)?;
            (sampler, sink)
        }
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            if checkpoint.data_fingerprint != fingerprint {
                return Err(Error::validation(
                    "checkpoint was created from different dataset files",
                ));
            }
            let mut stored = checkpoint.config.clone();
            stored.workers = config.workers;
            let checkpoint = Checkpoint {
                config: stored,
                ..checkpoint
            };
            let (sampler, draws_kept, b_sum) = checkpoint.into_sampler(dataset.clone())?;
            eprintln!(
                "[fit] resuming at sweep {}/{} with {} retained draws",
                sampler.sweeps_done(),
                sampler.config().total_sweeps(),
                draws_kept
            );
            let sink = CsvSink::resume(dir, &dataset, ppmx, b_sum, draws_kept)?;
            (sampler, sink)
        }
    };

    let mut durations = Vec::new();
    let mut last = Instant::now();
    let status = run_chain(&mut sampler, stop_after, &mut sink, |sweep, m, alpha| {
        let now = Instant::now();
        durations.push(now.duration_since(last).as_secs_f64());
        last = now;
        if sweep % log_every == 0 || sweep == total {
            eprintln!("[fit] sweep {sweep}/{total} M={m} alpha={alpha:.4}");
        }
    })?;
    sink.flush()?;
    let checkpoint = Checkpoint::capture(&sampler, sink.draws_kept(), sink.b_sum(), fingerprint);
    checkpoint.save(&dir.join(CHECKPOINT))?;
    match status {
        RunStatus::Completed => {
            sink.finalize()?;
            eprintln!(
                "[fit] completed {} sweeps, retained {} draws",
                sampler.sweeps_done(),
                sink.draws_kept()
            );
        }
        RunStatus::Stopped => {
            eprintln!(
                "[fit] stopped at sweep {} of {}; resume with --resume {}",
                sampler.sweeps_done(),
                sampler.config().total_sweeps(),
                dir.join(CHECKPOINT).display()
            );
        }
    }
    Ok(durations)
}

fn cmd_fit(globals: &Globals, args: &FitArgs, settings: &Settings) -> Result<CommandReport> {
    let paths = DatasetPaths::from_dir(&args.data);
    let fingerprint = dataset_fingerprint(&paths)?;
    let dataset = load_dataset(&paths, true)?;
    let config = chain_config(
        globals,
        args.burn,
        args.keep,
        args.thin,
        args.period_mean,
        settings,
    )?;
    let log_every = settings.get("log_every", None, 100)?;
    let durations = run_fit(
        dataset,
        config.clone(),
        &globals.out,
        &fingerprint,
        args.resume.as_deref(),
        args.stop_after,
        log_every,
    )?;

    let mut options = chain_options(&config);
    options.insert("data".into(), args.data.display().to_string());
    if let Some(stop) = args.stop_after {
        options.insert("stop_after".into(), stop.to_string());
    }
    if let Some(resume) = &args.resume {
        options.insert("resume".into(), resume.display().to_string());
    }
    let inputs = hash_inputs(
        &paths
            .files()
            .iter()
            .map(|p| p.to_path_buf())
            .collect::<Vec<_>>(),
    )?;
    Ok(CommandReport {
        options,
        inputs,
        sweeps: SweepTiming::from_durations(&durations),
    })
}

fn read_grouping(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["county_id", "group_id"] {
        return Err(Error::validation(format!(
            "{}: expected header county_id,group_id",
            path.display()
        )));
    }
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let county = record.get(0).unwrap_or("").to_string();
        let group = record.get(1).unwrap_or("").to_string();
        if county.is_empty() || group.is_empty() {
            return Err(Error::validation(format!(
                "{}: empty field",
                path.display()
            )));
        }
        map.insert(county, group);
    }
    Ok(map)
}

fn cmd_summarize(
    globals: &Globals,
    args: &SummarizeArgs,
    settings: &Settings,
) -> Result<CommandReport> {
    let paths = DatasetPaths::from_dir(&args.data);
    let dataset = load_dataset(&paths, true)?;
    let chain = read_chain(&args.chain)?;
    if chain.county_ids != dataset.graph().county_ids() {
        return Err(Error::validation(
            "chain county ids differ from the dataset",
        ));
    }
    if chain.years != dataset.grid().years() {
        return Err(Error::validation(
            "chain year grid differs from the dataset",
        ));
    }
    std::fs::create_dir_all(&globals.out)?;

    let summaries = fitted_summaries(&chain.f_draws)?;
    write_summaries(&globals.out.join("summaries.csv"), &dataset, &summaries)?;

    let pseudo = pseudo_statistics(&chain.b_mean, &dataset)?;
    let county_filter = match (&args.county, args.pseudo) {
        (Some(id), true) => Some(
            dataset
                .graph()
                .county_index(id)
                .ok_or_else(|| Error::validation(format!("unknown county '{id}'")))?,
        ),
        _ => None,
    };
    write_pseudo(
        &globals.out.join("pseudo.csv"),
        &dataset,
        &pseudo,
        county_filter,
    )?;

    let grouping = match &args.rollup {
        Some(path) => read_grouping(path)?,
        None => dataset
            .graph()
            .county_ids()
            .iter()
            .map(|id| (id.clone(), "all".to_string()))
            .collect(),
    };
    let rollup_rows = rollup(&chain.f_draws, &dataset, &grouping)?;
    write_rollup(&globals.out.join("rollup.csv"), &dataset, &rollup_rows)?;

    let clip = settings.get("clip_quantile", None, CPO_CLIP_QUANTILE)?;
    let dic = dic3(&chain.loglik_draws)?;
    if !dic.zero_density_obs.is_empty() {
        eprintln!(
            "[summarize] warning: zero posterior-mean density for observations {:?}; DIC3 is infinite",
            dic.zero_density_obs
        );
    }
    let cpo = lpml(&chain.loglik_draws, clip, globals.seed)?;
    if !cpo.degenerate_obs.is_empty() {
        eprintln!(
            "[summarize] warning: {} observations have near-degenerate importance weights",
            cpo.degenerate_obs.len()
        );
    }
    let report = FitReport::assemble(&dic, &cpo);
    write_fit(&globals.out.join("fit.json"), &report)?;
    eprintln!(
        "[summarize] {} draws: -LPML={:.4} DIC3={:.4}",
        chain.f_draws.len(),
        report.neg_lpml,
        report.dic3
    );

    let mut input_files: Vec<PathBuf> = paths.files().iter().map(|p| p.to_path_buf()).collect();
    for name in [
        "chain_f.csv",
        "chain_state.csv",
        "chain_clusters.csv",
        "chain_loglik.csv",
        "b_mean.csv",
    ] {
        input_files.push(args.chain.join(name));
    }
    if let Some(path) = &args.rollup {
        input_files.push(path.clone());
    }
    let mut options = BTreeMap::new();
    options.insert("data".into(), args.data.display().to_string());
    options.insert("chain".into(), args.chain.display().to_string());
    options.insert("clip_quantile".into(), clip.to_string());
    if let Some(path) = &args.rollup {
        options.insert("rollup".into(), path.display().to_string());
    }
    if let Some(id) = &args.county {
        options.insert("county".into(), id.clone());
    }
    Ok(CommandReport {
        options,
        inputs: hash_inputs(&input_files)?,
        sweeps: None,
    })
}

fn cmd_holdout(
    globals: &Globals,
    args: &HoldoutArgs,
    settings: &Settings,
) -> Result<CommandReport> {
    let paths = DatasetPaths::from_dir(&args.data);
    let fingerprint = dataset_fingerprint(&paths)?;
    let dataset = load_dataset(&paths, true)?;
    let county = dataset
        .graph()
        .county_index(&args.county)
        .ok_or_else(|| Error::validation(format!("unknown county '{}'", args.county)))?;
    if !has_one_year_data(&dataset, county) {
        return Err(Error::validation(format!(
            "county '{}' has no one-year observations to exclude",
            args.county
        )));
    }
    let reduced = make_holdout(&dataset, county)?;
    let config = chain_config(globals, args.burn, args.keep, args.thin, false, settings)?;
    let log_every = settings.get("log_every", None, 100)?;

    let with_dir = globals.out.join("with");
    let without_dir = globals.out.join("without");
    eprintln!("[holdout] fitting with full data");
    let mut durations = run_fit(
        dataset.clone(),
        config.clone(),
        &with_dir,
        &fingerprint,
        None,
        None,
        log_every,
    )?;
    eprintln!(
        "[holdout] fitting without county '{}' one-year data",
        args.county
    );
    durations.extend(run_fit(
        reduced,
        config.clone(),
        &without_dir,
        &fingerprint,
        None,
        None,
        log_every,
    )?);

    let with_chain = read_chain(&with_dir)?;
    let without_chain = read_chain(&without_dir)?;
    let with_summaries = fitted_summaries(&with_chain.f_draws)?;
    let without_summaries = fitted_summaries(&without_chain.f_draws)?;
    let table = holdout_compare(&dataset, county, &with_summaries, &without_summaries)?;
    write_holdout(&globals.out.join("holdout.csv"), &table)?;
    eprintln!(
        "[holdout] county '{}': max relative gap {:.4} over {} years",
        args.county,
        table.max_relative_gap,
        table.rows.len()
    );

    let mut options = chain_options(&config);
    options.insert("data".into(), args.data.display().to_string());
    options.insert("county".into(), args.county.clone());
    let inputs = hash_inputs(
        &paths
            .files()
            .iter()
            .map(|p| p.to_path_buf())
            .collect::<Vec<_>>(),
    )?;
    Ok(CommandReport {
        options,
        inputs,
        sweeps: SweepTiming::from_durations(&durations),
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let settings = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let globals = resolve_globals(cli, &settings)?;
    std::fs::create_dir_all(&globals.out)?;
    let (name, report) = match &cli.command {
        Command::Simulate(args) => ("simulate", cmd_simulate(&globals, args, &settings)?),
        Command::Fit(args) => ("fit", cmd_fit(&globals, args, &settings)?),
        Command::Summarize(args) => ("summarize", cmd_summarize(&globals, args, &settings)?),
        Command::Holdout(args) => ("holdout", cmd_holdout(&globals, args, &settings)?),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: globals.seed,
        workers: globals.workers,
        mode: mode_name(globals.mode).to_string(),
        options: report.options,
        inputs: report.inputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        sweeps: report.sweeps,
    };
    write_manifest(&globals.out, &manifest)
}

/// Parse arguments and run; returns the process exit code (0 success,
/// 2 validation, 3 numerical abort).
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version print to stdout and exit 0; usage errors
            // exit 2 through clap's own convention.
            err.exit();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            if matches!(err, Error::Numerical(_)) {
                3
            } else {
                2
            }
        }
    }
}
