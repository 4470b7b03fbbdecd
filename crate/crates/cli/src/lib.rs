//! Command-line front end of the `ionfiber` simulator.
//!
//! Each subcommand maps to one function in [`commands`]; [`run`] resolves the
//! configuration and flag overrides and dispatches. Exit codes: 0 on success,
//! 1 on a runtime failure, 2 on a configuration or parse error.

pub mod commands;
pub mod config;
mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ionfiber::atom::Level;

pub use commands::Outcome;
pub use config::{AtomOverrides, RunConfig};
pub use error::{CliError, CliResult};

use commands::{G2Mode, StreamFormat, TrapOptions};

#[derive(Debug, Parser)]
#[command(name = "ionfiber", version, about = "Fiber-coupled trapped-ion single-photon source simulator")]
pub struct Cli {
    /// Run configuration file. Defaults to the bundled configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the run configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory of the run configuration.
    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    #[command(flatten)]
    pub atom: AtomFlags,
    #[command(subcommand)]
    pub command: Command,
}

/// Replacements for the keys of the atom configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct AtomFlags {
    /// Atom configuration file replacing the one named in the run config.
    #[arg(long, global = true, value_name = "PATH")]
    pub atom_config: Option<PathBuf>,
    /// Ion mass, u.
    #[arg(long, global = true)]
    pub mass_u: Option<f64>,
    /// Ion charge, e.
    #[arg(long, global = true)]
    pub charge_e: Option<f64>,
    /// Level linewidth, e.g. `P1/2=22.3` (MHz). Repeatable.
    #[arg(long = "linewidth-mhz", global = true, value_name = "LEVEL=MHZ", value_parser = parse_linewidth)]
    pub linewidth_mhz: Vec<(Level, f64)>,
    /// Branching fraction, e.g. `P1/2:D3/2=0.064`. Repeatable.
    #[arg(long, global = true, value_name = "UPPER:LOWER=FRACTION", value_parser = parse_branching)]
    pub branching: Vec<(Level, Level, f64)>,
}

fn parse_level(s: &str) -> Result<Level, String> {
    Level::from_label(s.trim()).ok_or_else(|| {
        let known: Vec<_> = Level::ALL.iter().map(|l| l.label()).collect();
        format!("unknown level `{s}` (expected one of {})", known.join(", "))
    })
}

fn parse_value(s: &str) -> Result<f64, String> {
    s.trim().parse().map_err(|e| format!("`{s}`: {e}"))
}

fn parse_linewidth(s: &str) -> Result<(Level, f64), String> {
    let (level, value) = s.split_once('=').ok_or("expected LEVEL=MHZ")?;
    Ok((parse_level(level)?, parse_value(value)?))
}

fn parse_branching(s: &str) -> Result<(Level, Level, f64), String> {
    let (pair, value) = s.split_once('=').ok_or("expected UPPER:LOWER=FRACTION")?;
    let (upper, lower) = pair.split_once(':').ok_or("expected UPPER:LOWER=FRACTION")?;
    Ok((parse_level(upper)?, parse_level(lower)?, parse_value(value)?))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Steady-state fluorescence versus 397 nm detuning, with a Lorentzian fit.
    Scan {
        /// Saturation parameter of the 397 nm beam.
        #[arg(long)]
        saturation: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        from_mhz: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        to_mhz: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Photon cross-correlation g²(τ) by quantum regression, Monte Carlo or both.
    G2 {
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        /// Acquisition time of the Monte Carlo run, s.
        #[arg(long)]
        acquisition_s: Option<f64>,
        #[arg(long)]
        saturation: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        detuning_mhz: Option<f64>,
    },
    /// Trap field map, pseudopotential depths and secular frequencies.
    Trap {
        /// Trap geometry file replacing the one named in the run config.
        #[arg(long, value_name = "PATH")]
        geometry: Option<PathBuf>,
        /// Also solve with solid center electrodes and report the depth ratio.
        #[arg(long)]
        compare_solid: bool,
        /// Re-solve at half the grid spacing and report the relative change.
        #[arg(long)]
        convergence: bool,
    },
    /// Fiber collection efficiency table.
    Geometry {
        /// Ion-fiber distances, µm, comma separated. Defaults to 275,183.
        #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
        separations_um: Vec<f64>,
    },
    /// Stray-field decay from a compensation-voltage series.
    Straytrack {
        /// CSV with columns time_s, v1_V, v2_V, v3_V.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Raw two-channel photon time tags at the correlation operating point.
    Stream {
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
        format: FormatArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Regression,
    Montecarlo,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Binary,
    Csv,
}

impl Cli {
    /// The run configuration with every global flag applied.
    pub fn resolve_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::bundled(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(path) = &self.atom.atom_config {
            cfg = cfg.with_atom_file(path)?;
        }
        let overrides = AtomOverrides {
            mass_u: self.atom.mass_u,
            charge_e: self.atom.charge_e,
            linewidth_mhz: self.atom.linewidth_mhz.clone(),
            branching: self.atom.branching.clone(),
        };
        if !overrides.is_empty() {
            cfg = cfg.with_atom_overrides(&overrides)?;
        }
        Ok(cfg)
    }
}

/// Runs the parsed command line.
pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let mut cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Scan { saturation, from_mhz, to_mhz, points } => {
            let mut s = cfg.scan;
            s.saturation = saturation.unwrap_or(s.saturation);
            s.detuning_start_mhz = from_mhz.unwrap_or(s.detuning_start_mhz);
            s.detuning_stop_mhz = to_mhz.unwrap_or(s.detuning_stop_mhz);
            s.points = points.unwrap_or(s.points);
            commands::cmd_scan(&cfg, &s)
        }
        Command::G2 { mode, acquisition_s, saturation, detuning_mhz } => {
            let mut g = cfg.g2;
            g.acquisition_s = acquisition_s.unwrap_or(g.acquisition_s);
            g.saturation = saturation.unwrap_or(g.saturation);
            g.detuning_mhz = detuning_mhz.unwrap_or(g.detuning_mhz);
            let mode = match mode {
                ModeArg::Regression => G2Mode::Regression,
                ModeArg::Montecarlo => G2Mode::MonteCarlo,
                ModeArg::Both => G2Mode::Both,
            };
            commands::cmd_g2(&cfg, &g, mode)
        }
        Command::Trap { geometry, compare_solid, convergence } => {
            if let Some(path) = geometry {
                cfg = cfg.with_trap_file(path)?;
            }
            commands::cmd_trap(&cfg, TrapOptions { compare_solid: *compare_solid, convergence: *convergence })
        }
        Command::Geometry { separations_um } => {
            let list = if separations_um.is_empty() { commands::DEFAULT_SEPARATIONS_UM.to_vec() } else { separations_um.clone() };
            commands::cmd_geometry(&cfg, &list)
        }
        Command::Straytrack { input } => commands::cmd_straytrack(&cfg, input),
        Command::Stream { duration_s, format } => {
            let format = match format {
                FormatArg::Binary => StreamFormat::Binary,
                FormatArg::Csv => StreamFormat::Csv,
            };
            commands::cmd_stream(&cfg, duration_s.unwrap_or(cfg.stream.duration_s), format)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_parsers() {
        assert_eq!(parse_linewidth("P1/2=21.5").unwrap(), (Level::P12, 21.5));
        assert_eq!(parse_branching("P3/2:D5/2=0.06").unwrap(), (Level::P32, Level::D52, 0.06));
        assert!(parse_linewidth("P1/2").is_err());
        assert!(parse_branching("X:S1/2=1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["ionfiber", "scan", "--seed", "7", "--from-mhz", "-40"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        assert!(matches!(cli.command, Command::Scan { from_mhz: Some(f), .. } if f == -40.0));
        let cli = Cli::try_parse_from(["ionfiber", "geometry", "--separations-um", "275,-3"]).unwrap();
        assert!(matches!(cli.command, Command::Geometry { separations_um } if separations_um == [275.0, -3.0]));
    }
}
