mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use qlink::analysis::secure_key_rate;
use qlink::correlation::coarse_to_fine_delay;
use qlink::experiment::{bell_from_slots, count_schedule, key_from_slots};
use qlink::link::Schedule;
use qlink::tags::read_tags;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("qlink").chain(args.iter().copied());
    let code = qlink::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json(args: &[&str]) -> Value {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "{args:?}: {err}");
    serde_json::from_str(&out).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SCHEDULE: &str = "\
setting0_start_s = 0
setting0_malta_deg = 22.5
setting0_sicily_deg = 0
setting0_duration_s = 1
setting1_start_s = 1
setting1_malta_deg = 22.5
setting1_sicily_deg = -45
setting1_duration_s = 1
setting2_start_s = 2
setting2_malta_deg = 157.5
setting2_sicily_deg = 0
setting2_duration_s = 1
setting3_start_s = 3
setting3_malta_deg = 157.5
setting3_sicily_deg = -45
setting3_duration_s = 1
setting4_start_s = 4
setting4_malta_deg = 0
setting4_sicily_deg = 0
setting4_duration_s = 1
setting5_start_s = 5
setting5_malta_deg = 45
setting5_sicily_deg = 45
setting5_duration_s = 1
";

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    schedule: PathBuf,
    a: PathBuf,
    b: PathBuf,
}

/// Bright link config, a six-slot schedule and simulated tag files.
fn fixture(ext: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::bright_link(6.0);
    cfg.v_werner = 0.95;
    let config = dir.path().join("link.cfg");
    std::fs::write(&config, cfg.to_text()).unwrap();
    let schedule = dir.path().join("schedule.cfg");
    std::fs::write(&schedule, SCHEDULE).unwrap();
    let a = dir.path().join(format!("malta.{ext}"));
    let b = dir.path().join(format!("sicily.{ext}"));
    let (code, _, err) = run(&["simulate", "--config", p(&config), "--seed", "42", "--schedule", p(&schedule), "--out-a", p(&a), "--out-b", p(&b)]);
    assert_eq!(code, 0, "{err}");
    Fixture { dir, config, schedule, a, b }
}

#[test]
fn correlate_matches_library_search() {
    let f = fixture("qtags");
    let r = json(&["correlate", "--a", p(&f.a), "--b", p(&f.b), "--span-s", "0.001", "--fine-bin-ps", "100", "--json", "--deterministic"]);
    let a = read_tags(std::fs::File::open(&f.a).unwrap()).unwrap();
    let b = read_tags(std::fs::File::open(&f.b).unwrap()).unwrap();
    let lib = coarse_to_fine_delay(a.tags(), b.tags(), 1_000_000_000, 100).unwrap();
    assert_eq!(r["delay_ps"].as_f64().unwrap(), lib.delay_ps);
    assert_eq!(r["fwhm_ps"].as_f64().unwrap(), lib.peak.fwhm_ps);
    assert_eq!(r["levels"].as_array().unwrap().len(), lib.levels.len());
    assert!((lib.delay_ps - 532_281_000.0).abs() < 500.0);
    assert_eq!(r["manifest"]["subcommand"], "correlate");
    assert_eq!(r["manifest"]["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn bell_matches_library_pipeline() {
    let f = fixture("qtags");
    let r = json(&["bell", "--a", p(&f.a), "--b", p(&f.b), "--schedule", p(&f.schedule), "--blocks", "13", "--delay-ps", "532281000", "--json", "--deterministic"]);
    let a = read_tags(std::fs::File::open(&f.a).unwrap()).unwrap();
    let b = read_tags(std::fs::File::open(&f.b).unwrap()).unwrap();
    let schedule = Schedule::load(&f.schedule).unwrap();
    let slots = count_schedule(a.tags(), b.tags(), &schedule, 532_281_000, 1000, 13).unwrap();
    let bell = bell_from_slots(&slots).unwrap();
    let key = key_from_slots(&slots).unwrap().unwrap();
    assert_eq!(r["s_direct"]["value"].as_f64().unwrap(), bell.chsh.s);
    assert_eq!(r["s_direct"]["error"].as_f64().unwrap(), bell.chsh.sigma);
    assert_eq!(r["s_blocks"]["n_blocks"].as_u64().unwrap(), 13);
    assert_eq!(r["s_blocks"]["mean"].as_f64().unwrap(), bell.blocks.mean);
    assert_eq!(r["qber"]["value"].as_f64().unwrap(), key.qber.0);
    assert_eq!(r["secure_key_rate_bps"].as_f64().unwrap(), secure_key_rate(key.rate_cps.0, key.qber.0, 1.1).unwrap());
    assert!(r["key_rate_formula"].as_str().unwrap().contains("H2(Q)"));
    assert!(bell.chsh.s > 2.0);
}

#[test]
fn reports_are_deterministic_and_carry_a_manifest() {
    let f = fixture("qtags");
    let args = ["bell", "--a", p(&f.a), "--b", p(&f.b), "--schedule", p(&f.schedule), "--json", "--deterministic"];
    let (_, one, _) = run(&args);
    let (_, two, _) = run(&args);
    assert_eq!(one, two);
    let v: Value = serde_json::from_str(&one).unwrap();
    assert!(v["manifest"].get("timestamp_unix_s").is_none());
    assert_eq!(v["manifest"]["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["manifest"]["config_digest"].as_str().unwrap().len(), 64);
    let stamped = json(&args[..args.len() - 1]);
    assert!(stamped["manifest"]["timestamp_unix_s"].is_u64());

    // simulating again with the same seed reproduces the tag files and report
    let a2 = f.dir.path().join("again_a.qtags");
    let b2 = f.dir.path().join("again_b.qtags");
    let sim = |a: &Path, b: &Path| {
        let r = json(&["simulate", "--config", p(&f.config), "--seed", "42", "--schedule", p(&f.schedule), "--out-a", p(a), "--out-b", p(b), "--json", "--deterministic"]);
        r["malta"].clone()
    };
    assert_eq!(sim(&a2, &b2), sim(&f.dir.path().join("x.qtags"), &f.dir.path().join("y.qtags")));
    assert_eq!(std::fs::read(&a2).unwrap(), std::fs::read(&f.a).unwrap());
    assert_eq!(std::fs::read(&b2).unwrap(), std::fs::read(&f.b).unwrap());
}

#[test]
fn every_subcommand_emits_json_and_tables() {
    let f = fixture("csv");
    let curves = f.dir.path().join("curves.csv");
    let report_file = f.dir.path().join("report.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["correlate", "--a", p(&f.a), "--b", p(&f.b), "--table", p(&curves)],
        vec!["coincide", "--a", p(&f.a), "--b", p(&f.b), "--delay-ps", "532281000"],
        vec!["coincide", "--a", p(&f.a), "--b", p(&f.b)],
        vec!["bell", "--a", p(&f.a), "--b", p(&f.b), "--schedule", p(&f.schedule), "--report", p(&report_file)],
        vec!["report", "--config", p(&f.config), "--seconds-per-setting", "1", "--blocks", "5"],
    ];
    for case in cases {
        let mut with_json = case.clone();
        with_json.extend(["--json", "--deterministic"]);
        let v = json(&with_json);
        assert_eq!(v["manifest"]["subcommand"], case[0]);
        let (code, table, err) = run(&case);
        assert_eq!(code, 0, "{err}");
        assert!(serde_json::from_str::<Value>(&table).is_err());
        assert!(table.contains("manifest.subcommand"));
    }
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report_file).unwrap()).unwrap();
    assert_eq!(saved["manifest"]["subcommand"], "bell");
    assert!(std::fs::read_to_string(&curves).unwrap().starts_with("offset_ps,counts\n"));
}

#[test]
fn scan_fits_both_bases() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::bright_link(1.0);
    cfg.v_werner = 0.941;
    cfg.hv_dephasing = 1.0 - 0.868 / 0.941;
    let config = dir.path().join("link.cfg");
    std::fs::write(&config, cfg.to_text()).unwrap();
    let (a, b) = (dir.path().join("a.qtags"), dir.path().join("b.qtags"));
    let (code, _, err) = run(&["simulate", "--config", p(&config), "--schedule", "scan", "--seed", "3", "--out-a", p(&a), "--out-b", p(&b)]);
    assert_eq!(code, 0, "{err}");
    let (c3, c4) = (dir.path().join("c3.csv"), dir.path().join("c4.csv"));
    let r = json(&["scan", "--a", p(&a), "--b", p(&b), "--schedule", "scan", "--curves", p(&c3), "--s-curve", p(&c4), "--json"]);
    let vis = r["visibilities"].as_array().unwrap();
    assert_eq!(vis.len(), 2);
    assert_eq!(vis[0]["basis"], "da");
    assert_eq!(vis[1]["basis"], "hv");
    for (v, truth) in vis.iter().zip([0.941, 0.868]) {
        let (x, e) = (v["visibility"]["value"].as_f64().unwrap(), v["visibility"]["error"].as_f64().unwrap());
        assert!((x - truth).abs() < 4.0 * e + 0.02, "{x} +- {e} vs {truth}");
    }
    let s = r["s_fit"]["value"].as_f64().unwrap();
    assert!((s - 2.558).abs() < 0.15, "{s}");
    assert_eq!(std::fs::read_to_string(&c3).unwrap().lines().count(), 37);
    assert_eq!(std::fs::read_to_string(&c4).unwrap().lines().count(), 182);
}

#[test]
fn exit_codes() {
    let (code, _, err) = run(&["correlate", "--bogus"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(run(&[]).0, 1);
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("simulate") && out.contains("bell"));
    assert_eq!(run(&["bell", "--help"]).0, 0);
    assert_eq!(run(&["correlate", "--a", "/nonexistent/a.qtags", "--b", "/nonexistent/b.qtags"]).0, 2);
    assert_eq!(run(&["simulate", "--config", "no-such-preset", "--out-a", "a", "--out-b", "b"]).0, 2);

    // independent streams: nothing to find
    let f = fixture("qtags");
    let (code, _, err) = run(&["correlate", "--a", p(&f.a), "--b", p(&f.a), "--center-ps", "400000000", "--span-s", "1e-4"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("no correlation found"));
}

#[test]
fn binary_honours_exit_codes_and_thread_cap() {
    let exe = env!("CARGO_BIN_EXE_qlink");
    let out = Command::new(exe).arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("qlink "));
    let status = Command::new(exe).args(["coincide", "--window-ps", "x"]).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let out = Command::new(exe).args(["report", "--seconds-per-setting", "1"]).env("QLINK_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("QLINK_THREADS"));
}
