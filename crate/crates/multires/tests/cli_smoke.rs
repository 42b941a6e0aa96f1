//! End-to-end smoke tests of the `multires` binary: every subcommand, the
//! documented exit codes, determinism, resume, and the config-file
//! precedence rules.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multires::chain::{B_MEAN, CHAIN_CLUSTERS, CHAIN_F, CHAIN_LOGLIK, CHAIN_STATE, CHECKPOINT};

fn multires(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multires"))
        .args(args)
        .output()
        .expect("spawn multires")
}

fn run_ok(args: &[&str]) {
    let out = multires(args);
    assert!(
        out.status.success(),
        "multires {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(args: &[&str]) -> i32 {
    multires(args).status.code().expect("exit code")
}

/// Simulate a small bundle into `dir`.
fn simulate_small(dir: &Path) {
    run_ok(&[
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
        "simulate",
        "--counties",
        "12",
        "--super-blocks",
        "3",
    ]);
}

const BUNDLE_FILES: [&str; 6] = [
    "links.csv",
    "obs.csv",
    "periods.csv",
    "predictors.csv",
    "truth.csv",
    "truth_labels.csv",
];

#[test]
fn simulate_is_deterministic_and_requires_out() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        run_ok(&[
            "--seed",
            "7",
            "--out",
            dir.to_str().unwrap(),
            "simulate",
            "--counties",
            "30",
        ]);
    }
    for name in BUNDLE_FILES {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        assert_eq!(
            left, right,
            "{name} differs between identical simulate runs"
        );
    }
    // The manifest names every emitted file.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 7);

    assert_eq!(
        exit_code(&["simulate", "--counties", "4"]),
        2,
        "missing --out is a usage error"
    );
}

#[test]
fn fit_smoke_keeps_valid_cluster_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let fit = tmp.path().join("fit");
    run_ok(&[
        "--seed",
        "7",
        "--out",
        sim.to_str().unwrap(),
        "simulate",
        "--counties",
        "30",
    ]);
    run_ok(&[
        "--seed",
        "1",
        "--mode",
        "baseline",
        "--out",
        fit.to_str().unwrap(),
        "fit",
        "--data",
        sim.to_str().unwrap(),
        "--burn",
        "100",
        "--keep",
        "100",
    ]);
    let state = fs::read_to_string(fit.join(CHAIN_STATE)).unwrap();
    let mut lines = state.lines();
    assert_eq!(lines.next().unwrap(), "draw,alpha,m,labels");
    let mut draws = 0;
    for line in lines {
        let m: usize = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(m >= 1, "retained draw with no clusters: {line}");
        draws += 1;
    }
    assert_eq!(draws, 100);
    for name in [
        CHAIN_F,
        CHAIN_CLUSTERS,
        CHAIN_LOGLIK,
        B_MEAN,
        CHECKPOINT,
        "manifest.json",
    ] {
        assert!(fit.join(name).exists(), "{name} missing after fit");
    }
}

#[test]
fn resume_continues_bitwise_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim);
    let whole = tmp.path().join("whole");
    let split = tmp.path().join("split");
    let fit_args = |dir: &Path| {
        vec![
            "--seed".to_string(),
            "5".to_string(),
            "--out".to_string(),
            dir.to_str().unwrap().to_string(),
            "fit".to_string(),
            "--data".to_string(),
            sim.to_str().unwrap().to_string(),
            "--burn".to_string(),
            "30".to_string(),
            "--keep".to_string(),
            "20".to_string(),
            "--thin".to_string(),
            "2".to_string(),
        ]
    };
    let whole_args = fit_args(&whole);
    run_ok(&whole_args.iter().map(String::as_str).collect::<Vec<_>>());

    let mut first = fit_args(&split);
    first.extend(["--stop-after".to_string(), "35".to_string()]);
    run_ok(&first.iter().map(String::as_str).collect::<Vec<_>>());
    let checkpoint = split.join(CHECKPOINT);
    let mut second = fit_args(&split);
    second.extend([
        "--resume".to_string(),
        checkpoint.to_str().unwrap().to_string(),
    ]);
    run_ok(&second.iter().map(String::as_str).collect::<Vec<_>>());

    for name in [
        CHAIN_F,
        CHAIN_STATE,
        CHAIN_CLUSTERS,
        CHAIN_LOGLIK,
        B_MEAN,
        CHECKPOINT,
    ] {
        let a = fs::read(whole.join(name)).unwrap();
        let b = fs::read(split.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between unbroken and resumed runs");
    }
}

#[test]
fn ppmx_mode_adds_predictor_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim);
    for (mode, expects_tail) in [("baseline", false), ("ppmx", true)] {
        let fit = tmp.path().join(mode);
        run_ok(&[
            "--seed",
            "2",
            "--mode",
            mode,
            "--out",
            fit.to_str().unwrap(),
            "fit",
            "--data",
            sim.to_str().unwrap(),
            "--burn",
            "10",
            "--keep",
            "5",
            "--thin",
            "1",
        ]);
        let clusters = fs::read_to_string(fit.join(CHAIN_CLUSTERS)).unwrap();
        let header = clusters.lines().next().unwrap();
        assert_eq!(
            header.ends_with("tau_x,rho_x"),
            expects_tail,
            "{mode} cluster header: {header}"
        );
    }
}

#[test]
fn summarize_emits_four_files_with_rollup_and_pseudo_filters() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim);
    let fit = tmp.path().join("fit");
    run_ok(&[
        "--seed",
        "3",
        "--out",
        fit.to_str().unwrap(),
        "fit",
        "--data",
        sim.to_str().unwrap(),
        "--burn",
        "50",
        "--keep",
        "30",
        "--thin",
        "1",
    ]);

    let summ = tmp.path().join("summ");
    run_ok(&[
        "--out",
        summ.to_str().unwrap(),
        "summarize",
        "--data",
        sim.to_str().unwrap(),
        "--chain",
        fit.to_str().unwrap(),
    ]);
    for name in [
        "summaries.csv",
        "pseudo.csv",
        "rollup.csv",
        "fit.json",
        "manifest.json",
    ] {
        assert!(summ.join(name).exists(), "{name} missing after summarize");
    }
    // Default roll-up groups every county together.
    let rollup = fs::read_to_string(summ.join("rollup.csv")).unwrap();
    assert!(rollup.lines().skip(1).all(|l| l.starts_with("all,")));

    // Custom grouping keys the roll-up.
    let groups = tmp.path().join("groups.csv");
    let mut table = String::from("county_id,group_id\n");
    for i in 0..12 {
        let group = if i < 6 { "east" } else { "west" };
        table.push_str(&format!("county{i:04},{group}\n"));
    }
    fs::write(&groups, table).unwrap();
    let keyed = tmp.path().join("keyed");
    run_ok(&[
        "--out",
        keyed.to_str().unwrap(),
        "summarize",
        "--data",
        sim.to_str().unwrap(),
        "--chain",
        fit.to_str().unwrap(),
        "--rollup",
        groups.to_str().unwrap(),
    ]);
    let rollup = fs::read_to_string(keyed.join("rollup.csv")).unwrap();
    let mut seen: Vec<&str> = rollup
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    seen.dedup();
    assert_eq!(seen, ["east", "west"]);

    // --county X --pseudo restricts pseudo.csv to that county.
    let filtered = tmp.path().join("filtered");
    run_ok(&[
        "--out",
        filtered.to_str().unwrap(),
        "summarize",
        "--data",
        sim.to_str().unwrap(),
        "--chain",
        fit.to_str().unwrap(),
        "--county",
        "county0003",
        "--pseudo",
    ]);
    let pseudo = fs::read_to_string(filtered.join("pseudo.csv")).unwrap();
    let mut rows = 0;
    for line in pseudo.lines().skip(1) {
        assert!(
            line.starts_with("county0003,"),
            "unexpected pseudo row: {line}"
        );
        rows += 1;
    }
    assert!(rows > 0, "filtered pseudo.csv is empty");
}

#[test]
fn holdout_writes_gap_table_and_rejects_ineligible_counties() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim);
    let hold = tmp.path().join("hold");
    run_ok(&[
        "--seed",
        "2",
        "--out",
        hold.to_str().unwrap(),
        "holdout",
        "--data",
        sim.to_str().unwrap(),
        "--county",
        "county0000",
        "--burn",
        "50",
        "--keep",
        "30",
        "--thin",
        "1",
    ]);
    let table = fs::read_to_string(hold.join("holdout.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5, "one row per year plus header");
    assert!(table.starts_with("year,"));

    // county0011 sits in the five-year tier: nothing to exclude.
    let out = multires(&[
        "--out",
        tmp.path().join("bad").to_str().unwrap(),
        "holdout",
        "--data",
        sim.to_str().unwrap(),
        "--county",
        "county0011",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no one-year observations"));
}

#[test]
fn config_file_yields_to_flags_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim);

    let config = tmp.path().join("run.conf");
    fs::write(
        &config,
        "# fit settings\nburn=40\nkeep=30\nthin=1\nseed=9\n",
    )
    .unwrap();
    let fit = tmp.path().join("fit");
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        fit.to_str().unwrap(),
        "fit",
        "--data",
        sim.to_str().unwrap(),
        "--burn",
        "20",
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fit.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["options"]["burn"], "20", "flag beats config file");
    assert_eq!(manifest["options"]["keep"], "30", "config beats default");
    assert_eq!(manifest["options"]["thin"], "1");
    assert_eq!(manifest["seed"], 9, "seed comes from the config file");

    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "bogus=1\n").unwrap();
    assert_eq!(
        exit_code(&[
            "--config",
            bad.to_str().unwrap(),
            "--out",
            tmp.path().join("x").to_str().unwrap(),
            "fit",
            "--data",
            sim.to_str().unwrap(),
        ]),
        2,
        "unknown config key is a validation error"
    );
}
