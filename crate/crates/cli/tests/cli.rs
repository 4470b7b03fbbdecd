mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{invoke, read_json, stray_series, write};
use ionfiber::photostream::read_time_tags;
use nalgebra::Matrix3;
use tempfile::TempDir;

fn ionfiber(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ionfiber")).args(args).output().expect("binary runs")
}

fn out_args<'a>(dir: &'a TempDir, rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--output-dir", dir.path().to_str().unwrap()];
    v.extend_from_slice(rest);
    v
}

fn header_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(&format!("# {key}: ")))
}

#[test]
fn geometry_table_on_stdout() {
    let out = ionfiber(&["geometry", "--separations-um", "275,183,1000000"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(header_value(&text, "config_sha256").is_some_and(|h| h.len() == 64));
    let rows: Vec<Vec<&str>> = text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][1], "0.3417");
    assert_eq!(rows[1][3], "12.247");
    let far: f64 = rows[2][3].parse().unwrap();
    assert!(far < 1e-6, "1 m separation collects {far}%");
}

#[test]
fn non_positive_separation_is_config_error() {
    let out = ionfiber(&["geometry", "--separations-um", "275,-3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("separation"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(ionfiber(&["scan", "--points", "many"]).status.code(), Some(2));
    assert_eq!(ionfiber(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(ionfiber(&["geometry", "--linewidth-mhz", "Q=1"]).status.code(), Some(2));
}

#[test]
fn scan_writes_csv_and_fit() {
    let dir = TempDir::new().unwrap();
    let outcome = invoke(&out_args(&dir, &["scan"])).unwrap();
    let text = std::fs::read_to_string(dir.path().join("scan_summary.json")).unwrap();
    assert_eq!(text, serde_json::to_string_pretty(&outcome.summary).unwrap() + "\n");
    let summary = read_json(&dir.path().join("scan_summary.json"));
    assert!(summary["fit"]["hwhm_mhz"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(dir.path().join("scan.csv")).unwrap();
    assert_eq!(header_value(&csv, "config_sha256"), summary["config_sha256"].as_str());
    assert_eq!(header_value(&csv, "seed"), Some("20100401"));
    assert_eq!(header_value(&csv, "version"), Some(env!("CARGO_PKG_VERSION")));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 41);
}

#[test]
fn zero_saturation_scan_is_flat() {
    let dir = TempDir::new().unwrap();
    let outcome = invoke(&out_args(&dir, &["scan", "--saturation", "0"])).unwrap();
    assert!(outcome.summary["fit"].is_null());
    let csv = std::fs::read_to_string(dir.path().join("scan.csv")).unwrap();
    for line in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let combined: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((combined - 740.0).abs() < 1e-6, "{line}");
    }
}

#[test]
fn regression_curve_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    invoke(&out_args(&a, &["g2", "--mode", "regression"])).unwrap();
    invoke(&out_args(&b, &["g2", "--mode", "regression"])).unwrap();
    let fa = std::fs::read(a.path().join("g2.csv")).unwrap();
    assert_eq!(fa, std::fs::read(b.path().join("g2.csv")).unwrap());
    let s = read_json(&a.path().join("g2_summary.json"));
    assert!((s["offset"].as_f64().unwrap() - 0.0497).abs() < 5e-4);
    assert!(s["montecarlo"].is_null());
    let text = String::from_utf8(fa).unwrap();
    assert!(text.lines().any(|l| l == "tau_ns,g2_regression,g2_regression_with_offset"));
}

#[test]
fn short_monte_carlo_g2() {
    let dir = TempDir::new().unwrap();
    let outcome = invoke(&out_args(&dir, &["g2", "--mode", "both", "--acquisition-s", "30"])).unwrap();
    let s = &outcome.summary;
    let mc = &s["montecarlo"];
    assert!(mc["coincidences"].as_u64().unwrap() > 1000);
    for r in mc["rates_cps"].as_array().unwrap() {
        assert!(r.as_f64().unwrap() <= 5.0e4 * 1.05);
    }
    assert!(s["comparison"]["bins"].as_u64() == Some(151));
    let csv = std::fs::read_to_string(dir.path().join("g2.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "tau_ns,g2_regression,g2_regression_with_offset,counts,g2_raw,g2_raw_err,g2_corrected"));
}

#[test]
fn trap_summary_and_field_map() {
    let dir = TempDir::new().unwrap();
    let outcome = invoke(&out_args(&dir, &["trap"])).unwrap();
    let s = &outcome.summary;
    for key in ["radial_depth_ev", "axial_depth_ev", "secular_radial_mhz", "secular_axial_mhz"] {
        assert!(s[key].as_f64().unwrap() > 0.0, "{key}");
    }
    assert!(s.get("depth_ratio").is_none());
    let csv = std::fs::read_to_string(dir.path().join("field_map.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "r_um,z_um,phi_V,E_V_per_m,U_ps_eV"));
    assert_eq!(header_value(&csv, "command"), Some("trap"));
}

fn bundled_trap_text() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/endcap_trap.toml")).unwrap()
}

#[test]
fn bad_geometry_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let geo = dir.path().join("broken.toml");
    write(&geo, &bundled_trap_text().replace("outer_radius_um = 229", "outer_radius_um = \"wide\""));
    let out = ionfiber(&out_args(&dir, &["trap", "--geometry", geo.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.toml"));
    let missing = ionfiber(&out_args(&dir, &["trap", "--geometry", "/nonexistent/trap.toml"]));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn solver_failure_exits_1() {
    let dir = TempDir::new().unwrap();
    let geo = dir.path().join("capped.toml");
    write(&geo, &bundled_trap_text().replace("max_iterations = 200000", "max_iterations = 50"));
    let out = ionfiber(&out_args(&dir, &["trap", "--geometry", geo.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("did not converge"));
}

#[test]
fn straytrack_recovers_rate_with_calibration() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("series.csv");
    let m = Matrix3::new(0.8, 0.1, -0.05, 0.02, 1.1, 0.3, -0.2, 0.05, 0.6);
    write(&input, &stray_series(1.0, 5e-4, 1.0, 67, 0.0, 0, &m));
    let mut cfg = ionfiber_cli::RunConfig::bundled();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.calibration = m;
    let outcome = ionfiber_cli::commands::cmd_straytrack(&cfg, &input).unwrap();
    let s = &outcome.summary;
    assert!((s["rate_per_s"].as_f64().unwrap() / 5e-4 - 1.0).abs() < 1e-6);
    assert!((s["source_azimuth_deg"].as_f64().unwrap() - 1f64.to_degrees()).abs() < 1e-4);
    assert!((s["initial_field_v_per_cm"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn constant_series_gives_zero_rate() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("flat.csv");
    write(&input, &stray_series(0.7, 0.0, 0.3, 30, 0.0, 0, &Matrix3::identity()));
    let outcome = invoke(&out_args(&dir, &["straytrack", "--input", input.to_str().unwrap()])).unwrap();
    assert!(outcome.summary["rate_per_s"].as_f64().unwrap().abs() < 1e-9);
    assert!(dir.path().join("straytrack_summary.json").exists());
}

#[test]
fn malformed_series_exits_2() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.csv");
    write(&input, "time_s,v1_V,v2_V\n0,1,2\n");
    let out = ionfiber(&out_args(&dir, &["straytrack", "--input", input.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("v3_V"));
    write(&input, "time_s,v1_V,v2_V,v3_V\n0,1,2,x\n");
    assert_eq!(ionfiber(&out_args(&dir, &["straytrack", "--input", input.to_str().unwrap()])).status.code(), Some(2));
}

#[test]
fn stream_files_round_trip() {
    let dir = TempDir::new().unwrap();
    for format in ["binary", "csv"] {
        let outcome = invoke(&out_args(&dir, &["stream", "--duration-s", "0.05", "--format", format])).unwrap();
        let counts = outcome.summary["counts"].as_array().unwrap().clone();
        let ext = if format == "binary" { "ttag" } else { "csv" };
        for (ch, n) in [1, 2].iter().zip(counts) {
            let (header, stream) = read_time_tags(&dir.path().join(format!("ch{ch}.{ext}"))).unwrap();
            assert_eq!(header.config_sha256, outcome.summary["config_sha256"].as_str().unwrap());
            assert_eq!(header.software_version, env!("CARGO_PKG_VERSION"));
            assert_eq!(header.seed, 20100401);
            assert_eq!(stream.len() as u64, n.as_u64().unwrap());
            assert!(stream.len() > 100);
        }
    }
}

#[test]
fn atom_overrides_change_results_and_hash() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let base = invoke(&out_args(&a, &["scan", "--points", "5"])).unwrap();
    let wide = invoke(&out_args(&b, &["scan", "--points", "5", "--linewidth-mhz", "P1/2=30"])).unwrap();
    assert_ne!(base.summary["config_sha256"], wide.summary["config_sha256"]);
    assert_ne!(base.summary["peak_cps"], wide.summary["peak_cps"]);
    let bad = ionfiber(&["geometry", "--branching", "P1/2:S1/2=0.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn seed_flag_recorded() {
    let dir = TempDir::new().unwrap();
    let outcome = invoke(&out_args(&dir, &["--seed", "42", "stream", "--duration-s", "0.01"])).unwrap();
    assert_eq!(outcome.summary["seed"], 42);
}

#[test]
fn run_config_file_paths_are_relative() {
    let dir = TempDir::new().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config");
    for f in ["run.toml", "ca40.toml", "endcap_trap.toml"] {
        std::fs::copy(root.join(f), dir.path().join(f)).unwrap();
    }
    let cfg = dir.path().join("run.toml");
    let outcome = invoke(&["--config", cfg.to_str().unwrap(), "scan", "--points", "7"]).unwrap();
    assert!(dir.path().join("results/scan.csv").exists());
    let bundled = invoke(&["--output-dir", dir.path().join("b").to_str().unwrap(), "scan", "--points", "7"]).unwrap();
    assert_eq!(outcome.summary["config_sha256"], bundled.summary["config_sha256"]);
    std::fs::remove_file(dir.path().join("ca40.toml")).unwrap();
    let out = ionfiber(&["--config", cfg.to_str().unwrap(), "scan"]);
    assert_eq!(out.status.code(), Some(2));
}
