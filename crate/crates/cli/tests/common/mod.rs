#![allow(dead_code)]

use std::path::Path;

use ionfiber::trap::voltages_from_field;
use ionfiber_cli::{run, Cli, CliResult, Outcome};
use nalgebra::Matrix3;
use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Sampling interval of the compensation series, s.
pub const SAMPLING_S: f64 = 120.0;

/// Parses `args` (without the program name) and runs the command.
pub fn invoke(args: &[&str]) -> CliResult<Outcome> {
    let cli = Cli::try_parse_from(std::iter::once("ionfiber").chain(args.iter().copied())).expect("valid arguments");
    run(&cli)
}

/// Compensation voltages that null a field `a·e^{−γt}` pointing away from a
/// source at `source_az`, with white field noise of the given spectral
/// density (V/cm/√Hz) averaged over each sample.
pub fn stray_series(a: f64, gamma: f64, source_az: f64, samples: usize, density: f64, seed: u64, calibration: &Matrix3<f64>) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, density / SAMPLING_S.sqrt()).unwrap();
    let az = source_az + std::f64::consts::PI;
    let mut out = String::from("# synthetic compensation series\ntime_s,v1_V,v2_V,v3_V\n");
    for k in 0..samples {
        let t = k as f64 * SAMPLING_S;
        let m = a * (-gamma * t).exp();
        let mut e = [m * az.cos(), m * az.sin(), 0.0];
        if density > 0.0 {
            for c in &mut e {
                *c += noise.sample(&mut rng);
            }
        }
        let v = voltages_from_field(e, calibration).unwrap();
        out.push_str(&format!("{t},{},{},{}\n", v[0], v[1], v[2]));
    }
    out
}

pub fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
