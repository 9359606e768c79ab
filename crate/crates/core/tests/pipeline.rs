mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use biquant::basis::{build_design, DesignLayout};
use biquant::distributions::QuantileSpec;
use biquant::model::{simulate_panel, ClusterParams, Panel};
use biquant::pipeline::*;
use biquant::simbench::adjusted_rand_index;
use biquant::Error;
use common::rng;

const SMALL: &str = "\
site_id,lon,lat,t,component,value
a,10.5,34.1,1,1,0.30
a,10.5,34.1,2,1,0.42
a,10.5,34.1,3,1,0.51
a,10.5,34.1,1,2,1.2
a,10.5,34.1,2,2,1.4
a,10.5,34.1,3,2,1.1
b,10.7,34.0,1,1,0.22
b,10.7,34.0,2,1,0.25
b,10.7,34.0,3,1,0.31
b,10.7,34.0,1,2,0.9
b,10.7,34.0,2,2,0.8
b,10.7,34.0,3,2,1.0
";

fn load(text: &str) -> biquant::Result<(Panel, MissingnessReport)> {
    load_panel_from_str(text, Path::new("panel.csv"), &[0.05, 0.05])
}

#[test]
fn loads_a_complete_panel() {
    let (panel, report) = load(SMALL).unwrap();
    assert_eq!((panel.n(), panel.q(), panel.t_len()), (2, 2, 3));
    assert_eq!(panel.times(), &[1.0, 2.0, 3.0]);
    assert_eq!(panel.value(1, 1, 2), Some(1.0));
    assert_eq!(panel.sites()[0].id, "a");
    assert_eq!(panel.sites()[1].lon, Some(10.7));
    assert!(report.components.iter().all(|c| c.missing_percent == 0.0));
}

#[test]
fn floors_and_blanks_are_masked() {
    let text = SMALL.replace("b,10.7,34.0,2,1,0.25", "b,10.7,34.0,2,1,0.04").replace("a,10.5,34.1,3,2,1.1", "a,10.5,34.1,3,2,");
    let (panel, report) = load(&text).unwrap();
    assert_eq!(panel.value(1, 0, 1), None);
    assert_eq!(panel.value(0, 1, 2), None);
    assert_eq!(report.components[0].floored, 1);
    assert_eq!(report.components[0].blank, 0);
    assert_eq!(report.components[1].blank, 1);
    assert!((report.components[0].missing_percent - 100.0 / 6.0).abs() < 1e-12);
    // Without a floor the small value is kept.
    let (panel, _) = load_panel_from_str(&text, Path::new("p.csv"), &[f64::NEG_INFINITY; 2]).unwrap();
    assert_eq!(panel.value(1, 0, 1), Some(0.04));
    // Absent rows are missing too.
    let dropped: String = SMALL.lines().filter(|l| !l.starts_with("b,10.7,34.0,3,2")).map(|l| format!("{l}\n")).collect();
    let (panel, report) = load(&dropped).unwrap();
    assert_eq!(panel.value(1, 1, 2), None);
    assert_eq!(report.components[1].blank, 1);
}

fn parse_line(err: Error) -> usize {
    match err {
        Error::Parse { line, .. } => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn bad_rows_report_line_numbers() {
    let dup = format!("{SMALL}a,10.5,34.1,2,1,0.9\n");
    assert_eq!(parse_line(load(&dup).unwrap_err()), 14);
    let bad = SMALL.replace("b,10.7,34.0,1,2,0.9", "b,10.7,34.0,1,2,abc");
    assert_eq!(parse_line(load(&bad).unwrap_err()), 11);
    let bad = SMALL.replace("a,10.5,34.1,2,2,1.4", "a,10.5,34.1,2,0,1.4");
    assert_eq!(parse_line(load(&bad).unwrap_err()), 6);
    let bad = SMALL.replace("b,10.7,34.0,3,1,0.31", "b,10.9,34.0,3,1,0.31");
    assert_eq!(parse_line(load(&bad).unwrap_err()), 10);
    let short = SMALL.replace("a,10.5,34.1,1,1,0.30", "a,10.5,34.1,1");
    assert_eq!(parse_line(load(&short).unwrap_err()), 2);
    assert_eq!(parse_line(load("site_id,lon,lat,t,value\n").unwrap_err()), 1);
}

#[test]
fn write_and_reload_round_trip() {
    let text = SMALL.replace("a,10.5,34.1,3,2,1.1", "a,10.5,34.1,3,2,");
    let (panel, _) = load(&text).unwrap();
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf).unwrap();
    let written = String::from_utf8(buf).unwrap();
    assert!(written.starts_with("site_id,lon,lat,t,component,value\n"));
    let (again, _) = load(&written).unwrap();
    assert_eq!(again, panel);
    let mut buf2 = Vec::new();
    write_panel(&again, &mut buf2).unwrap();
    assert_eq!(String::from_utf8(buf2).unwrap(), written);
}

#[test]
fn sparse_sites_are_dropped() {
    let text = SMALL.replace("b,10.7,34.0,2,2,0.8", "b,10.7,34.0,2,2,");
    let (panel, _) = load(&text).unwrap();
    let (kept, dropped) = drop_sparse_sites(&panel, 3);
    assert_eq!(kept.n(), 1);
    assert_eq!(dropped, vec!["b".to_string()]);
}

#[test]
fn config_files_and_fields() {
    let map = parse_config_text("input = x.csv\noutput = out\nmode = seasonal\nK = 2-4\nfloor2 = none\n", "c").unwrap();
    let c = RunConfig::from_map(&map).unwrap();
    assert_eq!(c.mode, Mode::Seasonal);
    assert_eq!(c.k_range, vec![2, 3, 4]);
    assert_eq!(c.floors[0], 0.05);
    assert_eq!(c.floors[1], f64::NEG_INFINITY);
    let (cands, _) = c.basis_candidates();
    assert_eq!(cands.len(), 3 * 4 * 4);
    for (key, value) in [("mode", "wavy"), ("thin", "0"), ("gamma_mode", "sample"), ("init", "x"), ("floor1", "abc")] {
        let mut m = map.clone();
        m.insert(key.to_string(), value.to_string());
        if key == "gamma_mode" {
            m.insert("gamma_window".into(), "-1".into());
        }
        match RunConfig::from_map(&m) {
            Err(Error::Config { field, .. }) => {
                let expected = if key == "gamma_mode" { "gamma_window" } else { key };
                assert_eq!(field, expected);
            }
            other => panic!("{key}: {other:?}"),
        }
    }
    let mut m = map.clone();
    m.remove("input");
    assert!(matches!(RunConfig::from_map(&m), Err(Error::Config { field, .. }) if field == "input"));
}

// ---------- end-to-end runs ----------

fn seasonal_truth(k: usize) -> ClusterParams {
    let level = [0.5, 2.0, 3.5][k];
    let amp = [0.8, -0.6, 0.3][k];
    let mut beta = Vec::new();
    for j in 0..2 {
        let l = level * (1.0 + 0.3 * j as f64);
        beta.extend([l, l + 0.2, l - 0.1, l + 0.1]);
        beta.extend([amp; 3]);
        beta.extend([0.4 * amp; 3]);
    }
    ClusterParams {
        beta,
        sigma: vec![0.05, 0.05],
        phi: 0.3,
        gamma: 0.5,
    }
}

/// Three seasonal clusters, quantile level 0.9, written to `dir/panel.csv`.
fn seasonal_panel(dir: &Path, per_cluster: usize) -> Vec<usize> {
    let times: Vec<f64> = (1..=48).map(|t| t as f64).collect();
    let design = build_design(DesignLayout::Seasonal { m1: 4, m2: 3, m3: 3 }, &times, 2).unwrap();
    let quant = QuantileSpec::bivariate(0.9, 0.9).unwrap();
    let clusters: Vec<ClusterParams> = (0..3).map(seasonal_truth).collect();
    let labels: Vec<usize> = (0..3).flat_map(|k| std::iter::repeat_n(k, per_cluster)).collect();
    let (panel, _) = simulate_panel(&clusters, &labels, &quant, &design, 0.05, &mut rng(31)).unwrap();
    let mut f = fs::File::create(dir.join("panel.csv")).unwrap();
    write_panel(&panel, &mut f).unwrap();
    labels
}

fn plain_panel(dir: &Path) {
    let times: Vec<f64> = (1..=30).map(|t| t as f64).collect();
    let design = build_design(DesignLayout::Plain { m: 4 }, &times, 2).unwrap();
    let quant = QuantileSpec::bivariate(0.5, 0.5).unwrap();
    let mk = |l: f64| ClusterParams {
        beta: vec![l, l + 0.5, l, l - 0.5, 2.0 * l, 2.0 * l, 2.0 * l, 2.0 * l],
        sigma: vec![0.2, 0.2],
        phi: 0.2,
        gamma: 0.5,
    };
    let (panel, _) = simulate_panel(&[mk(1.0), mk(3.0)], &[0, 0, 0, 1, 1, 1], &quant, &design, 0.0, &mut rng(32)).unwrap();
    let mut f = fs::File::create(dir.join("panel.csv")).unwrap();
    write_panel(&panel, &mut f).unwrap();
}

fn base_config(dir: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut map = BTreeMap::new();
    map.insert("input".to_string(), dir.join("panel.csv").display().to_string());
    map.insert("output".to_string(), dir.join("out").display().to_string());
    map.insert("floor1".to_string(), "none".to_string());
    map.insert("floor2".to_string(), "none".to_string());
    map.insert("iterations".to_string(), "60".to_string());
    map.insert("burn_in".to_string(), "20".to_string());
    map.insert("basis_max".to_string(), "6".to_string());
    for (k, v) in extra {
        map.insert(k.to_string(), v.to_string());
    }
    RunConfig::from_map(&map).unwrap()
}

fn header(path: PathBuf) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn output_files_have_fixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    plain_panel(dir.path());
    let config = base_config(dir.path(), &[("K", "1-2"), ("trace", "true")]);
    let outcome = run_pipeline(&config).unwrap();
    let out = dir.path().join("out");
    assert_eq!(header(out.join("basis_selection.csv")), "candidate,width,aic,chosen");
    assert_eq!(header(out.join("cdic.csv")), "K,cdic,term1,term2,chosen");
    assert_eq!(header(out.join("memberships.csv")), "site_id,lon,lat,cluster");
    assert_eq!(header(out.join("curves.csv")), "cluster,component,t,fitted_quantile");
    assert_eq!(header(out.join("posterior.csv")), "parameter,cluster,component,mean,sd");
    assert_eq!(header(out.join("trace.csv")), "draw,block,cluster,index,value");
    assert!(!out.join("error.json").exists());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["chosen_k"], outcome.chosen_k);
    assert_eq!(run["seed"], 1);
    assert_eq!(run["config"]["sampler"]["iterations"], 60);
    let cdic = fs::read_to_string(out.join("cdic.csv")).unwrap();
    assert_eq!(cdic.lines().count(), 3);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + outcome.chosen_k * 2 * 30);
}

#[test]
fn single_k_still_writes_cdic() {
    let dir = tempfile::tempdir().unwrap();
    plain_panel(dir.path());
    let outcome = run_pipeline(&base_config(dir.path(), &[("K", "2")])).unwrap();
    assert_eq!(outcome.chosen_k, 2);
    let cdic = fs::read_to_string(dir.path().join("out/cdic.csv")).unwrap();
    let lines: Vec<&str> = cdic.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("2,") && lines[1].ends_with(",true"));
}

#[test]
fn failures_write_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = base_config(dir.path(), &[]);
    let err = run_pipeline(&config).unwrap_err();
    assert_eq!(error_kind(&err), "io");
    let body: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/error.json")).unwrap()).unwrap();
    assert_eq!(body["error"], "io");
    assert!(body["message"].as_str().unwrap().len() > 3);

    // A single-component panel is rejected after ingestion.
    let single: String = SMALL
        .lines()
        .filter(|l| l.split(',').nth(4) != Some("2"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.path().join("panel.csv"), single).unwrap();
    let err = run_pipeline(&config).unwrap_err();
    assert_eq!(error_kind(&err), "domain");
}

#[test]
fn seasonal_run_recovers_three_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let labels = seasonal_panel(dir.path(), 6);
    let config = base_config(
        dir.path(),
        &[
            ("mode", "seasonal"),
            ("quantiles", "0.9,0.9"),
            ("K", "3"),
            ("iterations", "300"),
            ("burn_in", "100"),
            ("basis_max", "5"),
        ],
    );
    let outcome = run_pipeline(&config).unwrap();
    assert!(matches!(outcome.basis, DesignLayout::Seasonal { .. }));
    let ari = adjusted_rand_index(&labels, &outcome.summary.membership_mode).unwrap();
    assert!(ari > 0.9, "ARI {ari}");
    // Three distinct component-1 curves, in ascending order of their mean.
    let means: Vec<f64> = outcome.summary.curves.iter().map(|c| c[0].iter().sum::<f64>() / 48.0).collect();
    assert!(means[0] + 0.5 < means[1] && means[1] + 0.5 < means[2], "{means:?}");
    let text = fs::read_to_string(dir.path().join("out/curves.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 48);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    plain_panel(dir.path());
    let config = base_config(dir.path(), &[("K", "1-3"), ("seed", "17")]);
    run_pipeline(&config).unwrap();
    let first: Vec<Vec<u8>> = ["memberships.csv", "curves.csv", "posterior.csv", "cdic.csv"]
        .iter()
        .map(|f| fs::read(dir.path().join("out").join(f)).unwrap())
        .collect();
    run_pipeline(&config).unwrap();
    for (f, bytes) in ["memberships.csv", "curves.csv", "posterior.csv", "cdic.csv"].iter().zip(&first) {
        assert_eq!(&fs::read(dir.path().join("out").join(f)).unwrap(), bytes, "{f}");
    }
}

// ---------- command line ----------

fn biquant(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_biquant")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes_and_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let panel = d.join("sim.csv");
    let labels = d.join("labels.csv");
    let out = biquant(&[
        "simulate", "--n_per_cluster", "3", "--T", "20", "--seed", "4",
        "--output", panel.to_str().unwrap(), "--labels", labels.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = biquant(&["ari", labels.to_str().unwrap(), labels.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1");

    let out = biquant(&["select-basis", "--input", panel.to_str().unwrap(), "--basis_max", "6"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("candidate,width,aic,chosen"));

    let cfg = d.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "input = {}\noutput = {}\nK = 3\niterations = 40\nburn_in = 10\nbasis_max = 5\n",
            panel.display(),
            d.join("fit").display()
        ),
    )
    .unwrap();
    let out = biquant(&["fit", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("fit/memberships.csv").exists());

    // Flags override the file; a bad value is a configuration error.
    let out = biquant(&["fit", "--config", cfg.to_str().unwrap(), "--burn_in", "400"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = d.join("bad.cfg");
    fs::write(&bad, "colour = blue\n").unwrap();
    assert_eq!(biquant(&["fit", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let out = biquant(&["fit", "--input", d.join("absent.csv").to_str().unwrap(), "--output", d.join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(d.join("x/error.json").exists());
}

#[test]
fn error_classes() {
    assert_eq!(error_kind(&Error::Numerical("x".into())), "numerical");
    let sweep = Error::Sweep { sweep: 3, source: Box::new(Error::Numerical("x".into())) };
    assert!(sweep.is_numerical());
    assert_eq!(error_kind(&sweep), "numerical");
    assert_eq!(error_kind(&Error::Config { field: "K".into(), message: "m".into() }), "config");
}
