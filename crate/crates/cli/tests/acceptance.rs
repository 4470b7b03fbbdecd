//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Built without the libtest harness so the
//! report is always shown.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ionfiber::atom::{build_ca40_scheme, hamiltonian, rabi_from_saturation, AtomConfig, LaserDrive, Level};
use ionfiber::constants::mhz_to_angular;
use ionfiber::correlator::{background_offset, normalize, tdc_crosscorrelate, TdcConfig};
use ionfiber::dynamics::{g2_regression, steady_state};
use ionfiber::photostream::PhotonStream;
use ionfiber::presets::with_repumps;
use ionfiber::trap::detection_limit;
use ionfiber_cli::commands::{cmd_g2, cmd_geometry, cmd_scan, cmd_trap, G2Mode, TrapOptions};
use ionfiber_cli::RunConfig;
use nalgebra::Matrix3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

use common::{invoke, stray_series, write};

/// Outcome of one criterion: pass flag and a one-line account of the numbers.
type Check = (bool, String);

fn config_in(dir: &TempDir) -> RunConfig {
    let mut cfg = RunConfig::bundled();
    cfg.output_dir = dir.path().to_path_buf();
    cfg
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn geometry() -> Check {
    let dir = TempDir::new().unwrap();
    let out = cmd_geometry(&config_in(&dir), &[275.0, 183.0]).unwrap();
    let rows = out.summary["rows"].as_array().unwrap();
    let (na, total_275, total_183) =
        (f(&rows[0]["effective_na"]), f(&rows[0]["total_percent"]), f(&rows[1]["total_percent"]));
    let ok = within(na, 0.34, 0.005) && within(total_275, 6.0, 0.2) && within(total_183, 12.3, 0.2);
    (ok, format!("NA_eff {na:.4}, total {total_275:.3}% at 275 um, {total_183:.3}% at 183 um"))
}

fn offset() -> Check {
    let o = background_offset(75.0, 26.0);
    (within(o, 0.0497, 0.0005), format!("offset {o:.5}"))
}

/// Both Monte Carlo criteria come from one 40-minute run.
struct G2Run {
    summary: Value,
    csv: String,
}

fn g2_run() -> G2Run {
    let dir = TempDir::new().unwrap();
    let cfg = config_in(&dir);
    assert!((cfg.g2.acquisition_s - 2400.0).abs() < 1e-9 && cfg.g2.detuning_mhz == -6.0);
    assert_eq!(cfg.detector.channel_sbr, [75.0, 26.0]);
    let out = cmd_g2(&cfg, &cfg.g2, G2Mode::Both).unwrap();
    G2Run { summary: out.summary, csv: std::fs::read_to_string(dir.path().join("g2.csv")).unwrap() }
}

/// Rows of g2.csv as `(tau_ns, g2_regression, counts)`.
fn csv_rows(run: &G2Run) -> Vec<(f64, f64, f64)> {
    let mut lines = run.csv.lines().filter(|l| !l.starts_with('#'));
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| head.iter().position(|h| *h == name).unwrap();
    let (ct, cr, cc) = (col("tau_ns"), col("g2_regression"), col("counts"));
    lines
        .map(|line| {
            let v: Vec<&str> = line.split(',').collect();
            (v[ct].parse().unwrap(), v[cr].parse().unwrap(), v[cc].parse().unwrap())
        })
        .collect()
}

/// Both traces record every pair closer than half a bin, so the zero-bin
/// count is twice a Poisson variable.
fn variance_factor(tau_ns: f64) -> f64 {
    if tau_ns.abs() < 0.5 { 2.0 } else { 1.0 }
}

/// g²(0) and its standard error recomputed from the zero-bin count.
fn antibunching(run: &G2Run) -> Check {
    let mc = &run.summary["montecarlo"];
    let norm = f(&mc["norm_per_bin"]);
    let offset = background_offset(75.0, 26.0);
    let &(_, _, c0) = csv_rows(run).iter().find(|r| r.0 == 0.0).unwrap();
    let raw = c0 / norm;
    let corrected = raw - offset;
    let sigma = (variance_factor(0.0) * c0.max(1.0)).sqrt() / norm;
    let reported = (f(&mc["g2_zero_raw"]) - raw).abs() < 1e-12 && (f(&mc["uncertainty"]) - sigma).abs() < 1e-12;
    let ok = reported && (0.03..=0.08).contains(&raw) && corrected.abs() <= 2.0 * sigma;
    (ok, format!("raw g2(0) {raw:.4}, corrected {corrected:.4} +- {sigma:.4} ({c0} zero-bin counts)"))
}

/// Recomputed from the CSV columns: expected counts are
/// `norm·(offset + (1 − offset)·g_regression)` with Poisson errors.
fn regression_equivalence(run: &G2Run) -> Check {
    let norm = f(&run.summary["montecarlo"]["norm_per_bin"]);
    let offset = background_offset(75.0, 26.0);
    let (mut n, mut inside, mut chi2) = (0usize, 0usize, 0.0);
    for (tau, g, counts) in csv_rows(run) {
        if !(0.0..=150.0).contains(&tau) {
            continue;
        }
        let expected = norm * (offset + (1.0 - offset) * g);
        let z = (counts - expected) / (variance_factor(tau) * expected).sqrt();
        n += 1;
        inside += usize::from(z.abs() < 3.0);
        chi2 += z * z;
    }
    let (frac, red) = (inside as f64 / n as f64, chi2 / n as f64);
    let ok = n == 151 && frac >= 0.99 && (0.7..=1.4).contains(&red);
    (ok, format!("{inside}/{n} bins within 3 sigma ({:.1}%), reduced chi2 {red:.3}", 100.0 * frac))
}

fn closed_cycle() -> (ionfiber::atom::LevelScheme, f64) {
    let scheme = build_ca40_scheme(&AtomConfig::ca40_default().closed_397_cycle()).unwrap();
    let gamma = scheme.total_decay_rate(Level::P12);
    (scheme, gamma)
}

fn two_level_g2() -> Check {
    let (scheme, gamma) = closed_cycle();
    let detect = *scheme.fluorescence_channel().unwrap();
    let mut worst: f64 = 0.0;
    for rabi_mhz in [10.0, 22.3, 40.0] {
        let rabi = mhz_to_angular(rabi_mhz);
        let drives = with_repumps(&[LaserDrive::new(Level::S12, Level::P12, rabi, 0.0)]);
        let h = hamiltonian(&scheme, &drives).unwrap();
        let taus: Vec<f64> = (0..=500).map(|i| i as f64 * 20.0 / gamma / 500.0).collect();
        let curve = g2_regression(&h, &scheme.decays, &detect, &taus).unwrap();
        let wp = (rabi * rabi - gamma * gamma / 16.0).sqrt();
        for (t, v) in taus.iter().zip(&curve.values) {
            let exact = 1.0 - (-0.75 * gamma * t).exp() * ((wp * t).cos() + 0.75 * gamma / wp * (wp * t).sin());
            worst = worst.max((v - exact).abs());
        }
    }
    (worst <= 1e-4, format!("max |g2 - closed form| {worst:.2e} over 3 drive strengths"))
}

fn steady_state_oracle() -> Check {
    let (scheme, gamma) = closed_cycle();
    let mut worst: f64 = 0.0;
    for (s, delta_mhz) in [(0.1, 0.0), (1.0, -5.0), (1.3, -20.0), (5.0, 12.0), (20.0, -60.0)] {
        let delta = mhz_to_angular(delta_mhz);
        let drives = with_repumps(&[LaserDrive::new(Level::S12, Level::P12, rabi_from_saturation(s, gamma), delta)]);
        let rho = steady_state(&hamiltonian(&scheme, &drives).unwrap(), &scheme.decays).unwrap();
        let x = 2.0 * delta / gamma;
        let exact = 0.5 * s / (1.0 + s + x * x);
        worst = worst.max((rho.population(Level::P12) - exact).abs());
    }
    (worst <= 1e-8, format!("max |P_e - Bloch| {worst:.2e} over 5 points"))
}

fn spectrum() -> Check {
    let dir = TempDir::new().unwrap();
    let cfg = config_in(&dir);
    assert_eq!(cfg.scan.saturation, 1.3);
    let s = cmd_scan(&cfg, &cfg.scan).unwrap().summary;
    let (peak, bg, hwhm) = (f(&s["peak_cps"]), f(&s["background_cps"]), f(&s["fit"]["hwhm_mhz"]));
    let ok = within(peak, 36_000.0, 4_000.0) && within(bg, 740.0, 1.0) && hwhm >= 11.15 && within(hwhm / 23.8, 1.0, 0.25);
    (ok, format!("peak {peak:.0} cps over {bg:.1} cps, HWHM {hwhm:.2} MHz ({:+.1}% vs 23.8)", 100.0 * (hwhm / 23.8 - 1.0)))
}

fn trap_summary() -> Value {
    let dir = TempDir::new().unwrap();
    cmd_trap(&config_in(&dir), TrapOptions { compare_solid: true, convergence: true }).unwrap().summary
}

fn trap_depths(s: &Value) -> Check {
    let t = &s["tubular"];
    let (radial, axial, ratio) = (f(&t["radial_depth_ev"]), f(&t["axial_depth_ev"]), f(&s["depth_ratio"]));
    let conv = f(&s["convergence"]["max_relative_change"]).max(f(&s["convergence"]["other_style_max_relative_change"]));
    let ok = within(radial / 2.8, 1.0, 0.2) && within(axial / 2.1, 1.0, 0.2) && within(ratio, 0.75, 0.05) && conv < 0.03;
    (ok, format!("radial {radial:.3} eV, axial {axial:.3} eV, solid/tubular ratio {ratio:.3}, grid halving {:.2}%", 100.0 * conv))
}

fn secular(s: &Value) -> Check {
    let (wr, wz) = (f(&s["secular_radial_mhz"]), f(&s["secular_axial_mhz"]));
    let ratio = wz / wr;
    ((1.7..=2.3).contains(&ratio), format!("w_r {wr:.3} MHz, w_z {wz:.3} MHz, ratio {ratio:.3}"))
}

fn micromotion() -> Check {
    let dz = detection_limit(0.016, 4.0, mhz_to_angular(22.3), mhz_to_angular(3.8), 1.0);
    (within(dz, 0.04, 0.005), format!("detection limit {dz:.4} lambda"))
}

fn stray_tracker() -> Check {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("series.csv");
    let (mut worst_rate, mut worst_az): (f64, f64) = (0.0, 0.0);
    for seed in 0..10u64 {
        let source = -3.0 + 0.6 * seed as f64;
        write(&input, &stray_series(1.0, 5e-4, source, 67, 0.06, seed, &Matrix3::identity()));
        let s = invoke(&["--output-dir", dir.path().to_str().unwrap(), "straytrack", "--input", input.to_str().unwrap()])
            .unwrap()
            .summary;
        worst_rate = worst_rate.max((f(&s["rate_per_s"]) / 5e-4 - 1.0).abs());
        let d = (f(&s["source_azimuth_deg"]) - source.to_degrees()).rem_euclid(360.0);
        worst_az = worst_az.max(d.min(360.0 - d));
    }
    let ok = worst_rate < 0.05 && worst_az < 10.0;
    (ok, format!("10 noisy series: worst rate error {:.2}%, worst azimuth error {worst_az:.2} deg", 100.0 * worst_rate))
}

/// Every start paired with every stop: the earliest stop whose rounded bin
/// lies in the window is counted.
fn brute_force(starts: &[f64], stops: &[f64], cfg: &TdcConfig, hist: &mut [u64]) {
    let side = (cfg.half_window / cfg.bin_width).round() as i64;
    for &a in starts {
        let first = stops
            .iter()
            .map(|&b| ((b - a) / cfg.bin_width + 0.5).floor() as i64)
            .filter(|k| k.abs() <= side)
            .min();
        if let Some(k) = first {
            hist[(k + side) as usize] += 1;
        }
    }
}

fn poisson(rate: f64, duration: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t -= (1.0 - rng.random::<f64>()).ln() / rate;
        if t >= duration {
            return out;
        }
        out.push(t);
    }
}

fn correlator_oracle() -> Check {
    let cfg = TdcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n1 = rng.random_range(0..5000usize);
        let n2 = rng.random_range(1..=10_000 - n1);
        let duration = 10f64.powf(rng.random_range(-4.5..-1.5));
        let mut draw = |n: usize| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * duration).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (draw(n1), draw(n2));
        let sa = PhotonStream::new(1, duration, a.clone(), None).unwrap();
        let sb = PhotonStream::new(2, duration, b.clone(), None).unwrap();
        let fast = tdc_crosscorrelate(&sa, &sb, &cfg).unwrap();
        let mut slow = vec![0u64; cfg.n_bins()];
        brute_force(&a, &b, &cfg, &mut slow);
        brute_force(&b, &a, &cfg, &mut slow);
        mismatches += usize::from(fast.counts != slow);
    }
    let duration = 200.0;
    let a = PhotonStream::new(1, duration, poisson(2e4, duration, &mut rng), None).unwrap();
    let b = PhotonStream::new(2, duration, poisson(3e4, duration, &mut rng), None).unwrap();
    let g2 = normalize(&tdc_crosscorrelate(&a, &b, &cfg).unwrap()).unwrap();
    let mean = g2.values.iter().sum::<f64>() / g2.values.len() as f64;
    let ok = mismatches == 0 && (0.98..=1.02).contains(&mean);
    (ok, format!("{mismatches}/100 instances differ from brute force, Poisson mean g2 {mean:.4}"))
}

fn files_of(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn determinism() -> Check {
    let input_dir = TempDir::new().unwrap();
    let series = input_dir.path().join("series.csv");
    write(&series, &stray_series(1.0, 5e-4, 0.5, 67, 0.06, 3, &Matrix3::identity()));
    let commands: Vec<Vec<&str>> = vec![
        vec!["scan"],
        vec!["g2", "--mode", "both", "--acquisition-s", "60"],
        vec!["trap", "--compare-solid"],
        vec!["geometry"],
        vec!["straytrack", "--input", series.to_str().unwrap()],
        vec!["stream", "--duration-s", "0.2", "--format", "binary"],
        vec!["stream", "--duration-s", "0.2", "--format", "csv"],
    ];
    let mut differing = Vec::new();
    for cmd in &commands {
        let runs: Vec<(BTreeMap<String, Vec<u8>>, String)> = (0..2)
            .map(|_| {
                let dir = TempDir::new().unwrap();
                let mut args = vec!["--output-dir", dir.path().to_str().unwrap()];
                args.extend(cmd.iter().copied());
                let out = invoke(&args).unwrap();
                (files_of(dir.path()), format!("{}{}", out.stdout, out.summary))
            })
            .collect();
        if runs[0] != runs[1] {
            differing.push(cmd[0]);
        }
    }
    let ok = differing.is_empty();
    (ok, format!("{} seeded commands rerun, differing: {differing:?}", commands.len()))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
}

fn main() {
    // libtest flags such as `--nocapture` or a name filter are accepted and ignored.
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let seconds = Duration::from_secs;
    let mut failures = 0;
    let mut report = |c: Criterion, check: Box<dyn FnOnce() -> Check + '_>| {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = t0.elapsed();
        let (pass, detail) = match result {
            Ok((pass, detail)) => (pass && elapsed <= c.budget, detail),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        failures += usize::from(!pass);
        println!(
            "{} {:>2} {:<34} {} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    };

    report(Criterion { id: 1, name: "geometry figures", budget: seconds(1) }, Box::new(geometry));
    report(Criterion { id: 2, name: "background offset", budget: seconds(1) }, Box::new(offset));

    let t0 = Instant::now();
    let run = catch_unwind(g2_run);
    let shared = t0.elapsed();
    let mc_budget = minutes(10);
    match &run {
        Ok(run) => {
            let over = shared > mc_budget;
            let timed = |check: Check| -> Check {
                let (pass, detail) = check;
                (pass && !over, format!("{detail}; shared run {:.0} s", shared.as_secs_f64()))
            };
            report(Criterion { id: 3, name: "antibunching pipeline", budget: mc_budget }, Box::new(|| timed(antibunching(run))));
            report(
                Criterion { id: 4, name: "regression vs Monte Carlo", budget: mc_budget },
                Box::new(|| timed(regression_equivalence(run))),
            );
        }
        Err(_) => {
            for (id, name) in [(3, "antibunching pipeline"), (4, "regression vs Monte Carlo")] {
                report(Criterion { id, name, budget: mc_budget }, Box::new(|| (false, "Monte Carlo run panicked".to_string())));
            }
        }
    }

    report(Criterion { id: 5, name: "two-level g2 closed form", budget: seconds(10) }, Box::new(two_level_g2));
    report(Criterion { id: 6, name: "steady-state Bloch oracle", budget: seconds(5) }, Box::new(steady_state_oracle));
    report(Criterion { id: 7, name: "fluorescence spectrum", budget: minutes(2) }, Box::new(spectrum));

    let t0 = Instant::now();
    let trap = catch_unwind(trap_summary);
    let trap_time = t0.elapsed();
    let trap_budget = minutes(5);
    for (id, name, check) in [(8, "trap depths", trap_depths as fn(&Value) -> Check), (9, "secular symmetry", secular)] {
        let trap = &trap;
        report(
            Criterion { id, name, budget: trap_budget },
            Box::new(move || match trap {
                Ok(s) if trap_time <= trap_budget => check(s),
                Ok(_) => (false, format!("trap analysis took {:.0} s", trap_time.as_secs_f64())),
                Err(_) => (false, "trap analysis panicked".into()),
            }),
        );
    }

    report(Criterion { id: 10, name: "micromotion detection limit", budget: seconds(1) }, Box::new(micromotion));
    report(Criterion { id: 11, name: "stray-field tracker", budget: seconds(30) }, Box::new(stray_tracker));
    report(Criterion { id: 12, name: "correlator oracle", budget: minutes(1) }, Box::new(correlator_oracle));
    report(Criterion { id: 13, name: "determinism", budget: minutes(10) }, Box::new(determinism));

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 13 acceptance criteria passed");
}
