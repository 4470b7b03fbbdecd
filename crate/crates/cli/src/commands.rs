//! One function per subcommand. Each writes its result files and returns a
//! JSON summary.

use std::path::{Path, PathBuf};

use ionfiber::atom::{build_ca40_scheme, hamiltonian, LaserDrive, LevelScheme};
use ionfiber::collection::collection_table;
use ionfiber::constants::{angular_to_mhz, mhz_to_angular};
use ionfiber::correlator::{background_offset, count_variance_factor, normalize, tdc_crosscorrelate, CorrelationSummary};
use ionfiber::dynamics::{g2_bin_averaged, scattering_rate, steady_state, tau_ns, G2Curve};
use ionfiber::photostream::{
    simulate_acquisition, write_binary, write_csv, AcquisitionOptions, DetectorModel, TimeTagHeader,
};
use ionfiber::presets::{cooling_drive, with_repumps};
use ionfiber::spectroscopy::{line_scan, lorentzian_fit};
use ionfiber::trap::{
    analyze, compare_styles, fit_field_decay, stray_field_from_voltages, CompensationSample, TrapAnalysis,
};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{G2Settings, RunConfig, ScanSettings};
use crate::error::{CliError, CliResult};
use crate::output::{comment_header, num, OutputDir, Provenance};

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Value,
    pub files: Vec<PathBuf>,
    /// Text for standard output; empty when the summary should be printed.
    pub stdout: String,
}

fn provenance(cfg: &RunConfig, command: &'static str) -> Provenance {
    Provenance { command, config_sha256: cfg.config_hash(), seed: cfg.seed }
}

fn mhz_range(start: f64, stop: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| start + (stop - start) * i as f64 / (points - 1) as f64).collect()
}

/// Cooling beam at `(s, detuning)` plus the default repumps.
fn operating_drives(scheme: &LevelScheme, saturation: f64, detuning_mhz: f64) -> Vec<LaserDrive> {
    with_repumps(&[cooling_drive(scheme, saturation, mhz_to_angular(detuning_mhz))])
}

/// Steady-state 397 nm emission rate, photons/s.
fn emission_rate(scheme: &LevelScheme, drives: &[LaserDrive]) -> CliResult<f64> {
    let h = hamiltonian(scheme, drives)?;
    let channel = scheme.fluorescence_channel().ok_or_else(|| CliError::Config("atom has no P1/2 -> S1/2 decay".into()))?;
    Ok(scattering_rate(&steady_state(&h, &scheme.decays)?, channel))
}

pub fn cmd_scan(cfg: &RunConfig, settings: &ScanSettings) -> CliResult<Outcome> {
    settings.validate()?;
    let prov = provenance(cfg, "scan");
    let scheme = build_ca40_scheme(&cfg.atom)?;
    let drives = operating_drives(&scheme, settings.saturation, 0.0);
    let detunings: Vec<f64> = mhz_range(settings.detuning_start_mhz, settings.detuning_stop_mhz, settings.points)
        .into_iter()
        .map(mhz_to_angular)
        .collect();
    let scan = line_scan(&scheme, &drives, &detunings, &cfg.detector.model())?;

    let lo = scan.combined.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scan.combined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Without a line (s = 0) the fit is undefined rather than failed.
    let flat = hi - lo <= 1e-9 * hi.abs().max(1.0);
    let fit = if flat { None } else { Some(lorentzian_fit(&detunings, &scan.combined)?) };

    let peak = scan.peak_index();
    let background = scan.total_background();
    let mut s = prov.summary();
    s.insert("saturation".into(), num(settings.saturation));
    s.insert("detuning_range_mhz".into(), json!([settings.detuning_start_mhz, settings.detuning_stop_mhz]));
    s.insert("points".into(), settings.points.into());
    s.insert("peak_cps".into(), num(scan.combined[peak]));
    s.insert("peak_detuning_mhz".into(), num(angular_to_mhz(scan.detunings[peak])));
    s.insert("background_cps".into(), num(background));
    s.insert(
        "peak_sbr".into(),
        if background > 0.0 { num((scan.combined[peak] - background) / background) } else { Value::Null },
    );
    s.insert("peak_emission_per_s".into(), num(scan.emission[peak]));
    match fit {
        Some(f) => {
            s.insert(
                "fit".into(),
                json!({
                    "center_mhz": num(angular_to_mhz(f.center)),
                    "center_err_mhz": num(angular_to_mhz(f.errors[0])),
                    "hwhm_mhz": num(angular_to_mhz(f.hwhm)),
                    "hwhm_err_mhz": num(angular_to_mhz(f.errors[1])),
                    "peak_cps": num(f.peak),
                    "floor_cps": num(f.floor),
                    "reduced_chi2": num(f.reduced_chi2),
                }),
            );
        }
        None => {
            s.insert("fit".into(), Value::Null);
            s.insert("fit_note".into(), "flat scan: no line to fit".into());
        }
    }
    let summary = Value::Object(s);

    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("scan.csv", |w| Ok(scan.write_csv(w, &prov.header_lines())?))?;
    out.write_json("scan_summary.json", &summary)?;
    Ok(Outcome { summary, files: out.written, stdout: String::new() })
}

/// Which g² estimates to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum G2Mode {
    Regression,
    MonteCarlo,
    Both,
}

impl G2Mode {
    fn regression(self) -> bool {
        self != G2Mode::MonteCarlo
    }

    fn montecarlo(self) -> bool {
        self != G2Mode::Regression
    }
}

/// Agreement of a measured curve with a prediction over a τ range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub bins: usize,
    /// Fraction of bins within three standard errors.
    pub within_3_sigma: f64,
    pub reduced_chi2: f64,
}

/// Compares measured counts with `off + (1 − off)·g_signal` over the bins
/// with `lo ≤ τ ≤ hi`. Standard errors are Poissonian in the expected counts,
/// doubled in variance for the zero bin.
pub fn agreement(measured: &G2Curve, signal: &G2Curve, offset: f64, lo: f64, hi: f64, bin_width: f64) -> CliResult<Agreement> {
    let (Some(counts), Some(norm)) = (&measured.counts, measured.norm) else {
        return Err(CliError::Config("measured curve carries no counts".into()));
    };
    let (mut n, mut inside, mut chi2) = (0usize, 0usize, 0.0);
    let eps = 1e-6 * (hi - lo).abs().max(1e-12);
    for (k, &tau) in measured.tau.iter().enumerate() {
        if tau < lo - eps || tau > hi + eps {
            continue;
        }
        let expected = norm * (offset + (1.0 - offset) * signal.values[k]);
        let variance = count_variance_factor(tau, bin_width) * expected.max(1.0);
        let z = (counts[k] as f64 - expected) / variance.sqrt();
        n += 1;
        inside += usize::from(z.abs() < 3.0);
        chi2 += z * z;
    }
    if n == 0 {
        return Err(CliError::Config(format!("no bins in [{lo:e}, {hi:e}] s")));
    }
    Ok(Agreement { bins: n, within_3_sigma: inside as f64 / n as f64, reduced_chi2: chi2 / n as f64 })
}

/// Sub-intervals per half bin for the bin-averaged regression curve.
const BIN_AVERAGE_HALF_STEPS: usize = 4;

pub fn cmd_g2(cfg: &RunConfig, settings: &G2Settings, mode: G2Mode) -> CliResult<Outcome> {
    settings.validate()?;
    let prov = provenance(cfg, "g2");
    let scheme = build_ca40_scheme(&cfg.atom)?;
    let drives = operating_drives(&scheme, settings.saturation, settings.detuning_mhz);
    let emission = emission_rate(&scheme, &drives)?;
    let sbr = cfg.detector.channel_sbr;
    let offset = background_offset(sbr[0], sbr[1]);
    let tdc = settings.tdc;
    let centers = tdc.bin_centers();

    let mut s = prov.summary();
    s.insert("mode".into(), format!("{mode:?}").to_lowercase().into());
    s.insert("saturation".into(), num(settings.saturation));
    s.insert("detuning_mhz".into(), num(settings.detuning_mhz));
    s.insert("emission_rate_per_s".into(), num(emission));
    s.insert("sbr".into(), json!(sbr));
    s.insert("offset".into(), num(offset));
    s.insert("bin_width_ns".into(), num(tau_ns(tdc.bin_width)));

    let regression = if mode.regression() {
        let h = hamiltonian(&scheme, &drives)?;
        let channel = scheme.fluorescence_channel().expect("checked by emission_rate");
        let curve = g2_bin_averaged(&h, &scheme.decays, channel, &centers, tdc.bin_width, BIN_AVERAGE_HALF_STEPS)?;
        let z = curve.zero_index().expect("non-empty bins");
        s.insert(
            "regression".into(),
            json!({
                "g2_zero": num(curve.values[z]),
                "g2_zero_with_offset": num(offset + (1.0 - offset) * curve.values[z]),
            }),
        );
        Some(curve)
    } else {
        None
    };

    let montecarlo = if mode.montecarlo() {
        let model = cfg.detector.model_at(emission)?;
        let options = AcquisitionOptions { segment: settings.segment_s, parallel: true };
        let acq = simulate_acquisition(&scheme, &drives, &model, settings.acquisition_s, cfg.seed, options)?;
        let hist = tdc_crosscorrelate(&acq.streams.0, &acq.streams.1, &tdc)?;
        let curve = normalize(&hist)?;
        let cs = CorrelationSummary::new(&curve, sbr)?;
        s.insert(
            "montecarlo".into(),
            json!({
                "acquisition_s": num(settings.acquisition_s),
                "fluorescence_emissions": acq.fluorescence_emissions,
                "rates_cps": [num(hist.rates[0]), num(hist.rates[1])],
                "coincidences": hist.total(),
                "norm_per_bin": num(curve.norm.unwrap_or(f64::NAN)),
                "g2_zero_raw": num(cs.g2_zero_raw),
                "g2_zero": num(cs.g2_zero),
                "uncertainty": num(cs.uncertainty),
            }),
        );
        Some((curve, cs))
    } else {
        None
    };

    match (&regression, &montecarlo) {
        (_, Some((_, cs))) => {
            s.insert("g2_zero".into(), num(cs.g2_zero));
            s.insert("uncertainty".into(), num(cs.uncertainty));
        }
        (Some(reg), None) => {
            s.insert("g2_zero".into(), num(reg.values[reg.zero_index().expect("non-empty")]));
            s.insert("uncertainty".into(), num(0.0));
        }
        (None, None) => unreachable!("every mode computes a curve"),
    }
    if let (Some(reg), Some((mc, _))) = (&regression, &montecarlo) {
        let a = agreement(mc, reg, offset, 0.0, tdc.half_window, tdc.bin_width)?;
        s.insert(
            "comparison".into(),
            json!({
                "tau_range_ns": [0.0, num(tau_ns(tdc.half_window))],
                "bins": a.bins,
                "fraction_within_3_sigma": num(a.within_3_sigma),
                "reduced_chi2": num(a.reduced_chi2),
            }),
        );
    }
    let summary = Value::Object(s);

    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("g2.csv", |w| {
        comment_header(w, &prov);
        let mut csv = csv::Writer::from_writer(w);
        let mut head = vec!["tau_ns"];
        if regression.is_some() {
            head.extend(["g2_regression", "g2_regression_with_offset"]);
        }
        if montecarlo.is_some() {
            head.extend(["counts", "g2_raw", "g2_raw_err", "g2_corrected"]);
        }
        csv.write_record(&head).expect("in-memory CSV");
        for (k, &tau) in centers.iter().enumerate() {
            let mut row = vec![tau_ns(tau).to_string()];
            if let Some(reg) = &regression {
                row.push(reg.values[k].to_string());
                row.push((offset + (1.0 - offset) * reg.values[k]).to_string());
            }
            if let Some((mc, _)) = &montecarlo {
                row.push(mc.counts.as_ref().expect("measured")[k].to_string());
                row.push(mc.values[k].to_string());
                row.push(mc.errors.as_ref().expect("measured")[k].to_string());
                row.push(((mc.values[k] - offset) / (1.0 - offset)).to_string());
            }
            csv.write_record(&row).expect("in-memory CSV");
        }
        csv.flush().expect("in-memory CSV");
        Ok(())
    })?;
    out.write_json("g2_summary.json", &summary)?;
    Ok(Outcome { summary, files: out.written, stdout: String::new() })
}

/// Options of the trap command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrapOptions {
    /// Also solve the trap with solid center electrodes and report the depth ratio.
    pub compare_solid: bool,
    /// Re-solve on a grid of half the spacing and report the relative changes.
    pub convergence: bool,
}

fn trap_json(a: &TrapAnalysis) -> Value {
    let (wr, wz) = (angular_to_mhz(a.secular.radial), angular_to_mhz(a.secular.axial));
    json!({
        "radial_depth_ev": num(a.depth.radial),
        "axial_depth_ev": num(a.depth.axial),
        "depth_ev": num(a.depth.overall()),
        "minimum_r_um": num(a.depth.minimum_r * 1e6),
        "minimum_z_um": num(a.depth.minimum_z * 1e6),
        "minimum_energy_ev": num(a.depth.minimum_energy),
        "secular_radial_mhz": num(wr),
        "secular_axial_mhz": num(wz),
        "secular_ratio": num(wz / wr),
        "secular_fit_residual": num(a.secular.fit_residual),
        "solver_iterations": a.field.iterations,
        "solver_residual_v": num(a.field.residual),
    })
}

/// Largest relative change of depths and secular frequencies between two
/// resolutions.
fn relative_change(coarse: &TrapAnalysis, fine: &TrapAnalysis) -> f64 {
    let pairs = [
        (coarse.depth.radial, fine.depth.radial),
        (coarse.depth.axial, fine.depth.axial),
        (coarse.secular.radial, fine.secular.radial),
        (coarse.secular.axial, fine.secular.axial),
    ];
    pairs.iter().map(|(c, f)| ((f - c) / c).abs()).fold(0.0, f64::max)
}

pub fn cmd_trap(cfg: &RunConfig, opts: TrapOptions) -> CliResult<Outcome> {
    let prov = provenance(cfg, "trap");
    let t = &cfg.trap;
    let (m, q) = (cfg.atom.mass, cfg.atom.charge);
    let mut s = prov.summary();
    s.insert("style".into(), json!(t.geometry.style));
    s.insert("rf_amplitude_v".into(), num(t.rf.amplitude));
    s.insert("rf_frequency_mhz".into(), num(angular_to_mhz(t.rf.angular_frequency)));
    s.insert("grid_spacing_um".into(), num(t.grid.spacing * 1e6));

    let (primary, other) = if opts.compare_solid {
        let c = compare_styles(&t.geometry, &t.rf, &t.grid, m, q)?;
        s.insert("depth_ratio".into(), num(c.depth_ratio()));
        s.insert("tubular".into(), trap_json(&c.tubular));
        s.insert("solid".into(), trap_json(&c.solid));
        let (a, b) = match t.geometry.style {
            ionfiber::trap::ElectrodeStyle::Tubular => (c.tubular, c.solid),
            ionfiber::trap::ElectrodeStyle::Solid => (c.solid, c.tubular),
        };
        (a, Some(b))
    } else {
        (analyze(&t.geometry, &t.rf, &t.grid, m, q)?, None)
    };
    if let Value::Object(fields) = trap_json(&primary) {
        s.extend(fields);
    }
    if opts.convergence {
        let fine = t.grid.halved();
        let mut conv = Map::new();
        conv.insert("fine_spacing_um".into(), num(fine.spacing * 1e6));
        let primary_fine = analyze(&t.geometry, &t.rf, &fine, m, q)?;
        conv.insert("max_relative_change".into(), num(relative_change(&primary, &primary_fine)));
        if let Some(o) = &other {
            let style = if t.geometry.style == ionfiber::trap::ElectrodeStyle::Tubular {
                ionfiber::trap::ElectrodeStyle::Solid
            } else {
                ionfiber::trap::ElectrodeStyle::Tubular
            };
            let other_fine = analyze(&t.geometry.with_style(style), &t.rf, &fine, m, q)?;
            conv.insert("other_style_max_relative_change".into(), num(relative_change(o, &other_fine)));
        }
        s.insert("convergence".into(), Value::Object(conv));
    }
    let summary = Value::Object(s);

    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("field_map.csv", |w| {
        comment_header(w, &prov);
        Ok(primary.field.write_csv(w, Some(&primary.pseudopotential))?)
    })?;
    out.write_json("trap_summary.json", &summary)?;
    Ok(Outcome { summary, files: out.written, stdout: String::new() })
}

/// Ion-fiber distances used when none are given, µm.
pub const DEFAULT_SEPARATIONS_UM: [f64; 2] = [275.0, 183.0];

pub fn cmd_geometry(cfg: &RunConfig, separations_um: &[f64]) -> CliResult<Outcome> {
    let prov = provenance(cfg, "geometry");
    let separations: Vec<f64> = separations_um.iter().map(|d| d * 1e-6).collect();
    let rows = collection_table(&cfg.detector.fiber, &separations)?;
    let mut text = String::new();
    for line in prov.header_lines() {
        text.push_str(&format!("# {line}\n"));
    }
    text.push_str(&format!("{:>14} {:>8} {:>12} {:>8} {:>10}\n", "separation_um", "NA_eff", "per_fiber_%", "total_%", "vignetted"));
    let mut table = Vec::new();
    for (d, r) in separations_um.iter().zip(&rows) {
        text.push_str(&format!(
            "{:>14.1} {:>8.4} {:>12.3} {:>8.3} {:>10}\n",
            d,
            r.effective_na,
            100.0 * r.per_fiber,
            100.0 * r.total,
            if r.vignetted { "yes" } else { "no" }
        ));
        table.push(json!({
            "separation_um": num(*d),
            "effective_na": num(r.effective_na),
            "per_fiber_percent": num(100.0 * r.per_fiber),
            "total_percent": num(100.0 * r.total),
            "vignetted": r.vignetted,
        }));
    }
    if rows.iter().any(|r| r.vignetted) {
        text.push_str("# warning: the electrode bore clips the collection cone at some separations\n");
    }
    let mut s = prov.summary();
    s.insert("rows".into(), Value::Array(table));
    Ok(Outcome { summary: Value::Object(s), files: Vec::new(), stdout: text })
}

/// Reads `time_s,v1_V,v2_V,v3_V` rows; `#` lines are comments.
pub fn read_compensation_series(path: &Path) -> CliResult<Vec<CompensationSample>> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column `{name}`")));
    let cols = [column("time_s")?, column("v1_V")?, column("v2_V")?, column("v3_V")?];
    let mut samples = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let mut v = [0.0; 4];
        for (slot, &c) in v.iter_mut().zip(&cols) {
            let field = record.get(c).ok_or_else(|| bad(format!("row {} is short", n + 1)))?;
            *slot = field.parse().map_err(|e| bad(format!("row {}: `{field}`: {e}", n + 1)))?;
        }
        samples.push(CompensationSample { time: v[0], voltages: [v[1], v[2], v[3]] });
    }
    Ok(samples)
}

pub fn cmd_straytrack(cfg: &RunConfig, input: &Path) -> CliResult<Outcome> {
    let prov = provenance(cfg, "straytrack");
    let samples = read_compensation_series(input)?;
    let bytes = std::fs::read(input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    let input_hash: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let series = samples
        .iter()
        .map(|smp| Ok((smp.time, stray_field_from_voltages(smp, &cfg.calibration)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let fit = fit_field_decay(&series)?;

    let mut s = prov.summary();
    s.insert("input_sha256".into(), input_hash.into());
    s.insert("samples".into(), samples.len().into());
    s.insert("span_s".into(), num(series.last().map_or(0.0, |p| p.0) - series.first().map_or(0.0, |p| p.0)));
    s.insert("rate_per_s".into(), num(fit.rate));
    s.insert("rate_error_per_s".into(), num(fit.rate_error));
    s.insert("initial_field_v_per_cm".into(), num(fit.initial_magnitude));
    s.insert("amplitude_v_per_cm".into(), num(fit.amplitude));
    s.insert("floor_v_per_cm".into(), num(fit.floor));
    s.insert("direction".into(), json!(fit.direction.map(num)));
    s.insert("field_azimuth_deg".into(), num(fit.azimuth.to_degrees()));
    s.insert("source_azimuth_deg".into(), num(fit.source_azimuth.to_degrees()));
    s.insert("rms_residual_v_per_cm".into(), num(fit.rms_residual));
    let summary = Value::Object(s);

    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write_json("straytrack_summary.json", &summary)?;
    Ok(Outcome { summary, files: out.written, stdout: String::new() })
}

/// Time-tag file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Binary,
    Csv,
}

/// Simulates raw detector streams at the correlation operating point, with
/// backgrounds set to the configured SBRs.
pub fn cmd_stream(cfg: &RunConfig, duration_s: f64, format: StreamFormat) -> CliResult<Outcome> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(CliError::Config(format!("stream duration must be positive, got {duration_s}")));
    }
    let prov = provenance(cfg, "stream");
    let g = &cfg.g2;
    let scheme = build_ca40_scheme(&cfg.atom)?;
    let drives = operating_drives(&scheme, g.saturation, g.detuning_mhz);
    let emission = emission_rate(&scheme, &drives)?;
    let model: DetectorModel = cfg.detector.model_at(emission)?;
    let options = AcquisitionOptions { segment: g.segment_s, parallel: true };
    let acq = simulate_acquisition(&scheme, &drives, &model, duration_s, cfg.seed, options)?;

    let mut out = OutputDir::create(&cfg.output_dir)?;
    let ext = match format {
        StreamFormat::Binary => "ttag",
        StreamFormat::Csv => "csv",
    };
    let mut counts = Vec::new();
    for stream in [&acq.streams.0, &acq.streams.1] {
        let header = TimeTagHeader {
            channel: stream.channel,
            duration_s,
            seed: cfg.seed,
            model,
            software_version: crate::output::VERSION.to_string(),
            config_sha256: prov.config_sha256.clone(),
        };
        out.write(&format!("ch{}.{ext}", stream.channel), |w| {
            match format {
                StreamFormat::Binary => write_binary(&mut *w, stream, &header)?,
                StreamFormat::Csv => write_csv(&mut *w, stream, &header)?,
            }
            Ok(())
        })?;
        counts.push(stream.len());
    }
    let mut s = prov.summary();
    s.insert("duration_s".into(), num(duration_s));
    s.insert("format".into(), ext.into());
    s.insert("emission_rate_per_s".into(), num(emission));
    s.insert("fluorescence_emissions".into(), acq.fluorescence_emissions.into());
    s.insert("counts".into(), json!(counts));
    s.insert("rates_cps".into(), json!(counts.iter().map(|&c| num(c as f64 / duration_s)).collect::<Vec<_>>()));
    s.insert("background_cps".into(), json!(model.background.map(num)));
    let summary = Value::Object(s);
    out.write_json("stream_summary.json", &summary)?;
    Ok(Outcome { summary, files: out.written, stdout: String::new() })
}
