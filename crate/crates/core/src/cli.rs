//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::{self, RunError};
use crate::config::{Experiment, RunConfig};
use crate::table::fmt_sig9;

#[derive(Debug, Parser)]
#[command(name = "sagnac", version, about = "Sagnac-loop entangled photon source simulator")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for CSV and report files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coincidence fringe versus signal analyzer angle, with fit.
    Fringe {
        /// Idler analyzer angle in degrees; every configured angle when omitted.
        #[arg(long, allow_hyphen_values = true)]
        theta2: Option<f64>,
    },
    /// Sixteen-measurement CHSH test.
    Chsh,
    /// Visibility and flux versus collection divergence.
    SweepAperture {
        /// Comma-separated divergences in mrad.
        #[arg(long, value_delimiter = ',')]
        divergences: Option<Vec<f64>>,
    },
    /// Solve for pump plate angles giving a balanced state.
    Balance,
    /// Refit a saved fringe CSV.
    Fit { csv: PathBuf },
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
        context: format!("cannot create {}", dir.display()),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| RunError::Io {
        context: format!("cannot write {}", path.display()),
        source,
    })?;
    Ok(path)
}

fn load_experiment(cli: &Cli) -> Result<Experiment, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Command::SweepAperture {
        divergences: Some(list),
    } = &cli.command
    {
        cfg.scan.divergences_mrad = list.clone();
    }
    Ok(cfg.into_experiment()?)
}

fn angle_label(deg: f64) -> String {
    fmt_sig9(deg).replace('-', "m")
}

/// Runs one invocation, returning the text for stdout.
pub fn run(cli: &Cli) -> Result<String, RunError> {
    if let Command::Fit { csv } = &cli.command {
        let text = std::fs::read_to_string(csv).map_err(|source| RunError::Io {
            context: format!("cannot read {}", csv.display()),
            source,
        })?;
        let fit = commands::fit_csv(&text)?;
        return Ok(commands::fit_report(&fit));
    }

    let exp = load_experiment(cli)?;
    let out_dir = &exp.out_dir;
    let mut stdout = String::new();
    match &cli.command {
        Command::Fringe { theta2 } => {
            let angles: Vec<f64> = match theta2 {
                Some(deg) if deg.is_finite() => vec![deg.to_radians()],
                Some(deg) => {
                    return Err(crate::config::ConfigError::Invalid {
                        key: "theta2",
                        reason: format!("must be finite, got {deg}"),
                    }
                    .into())
                }
                None => exp.theta2_set.clone(),
            };
            for t2 in angles {
                let res = commands::fringe(&exp, t2)?;
                let stem = format!("fringe_theta2_{}", angle_label(t2.to_degrees()));
                let csv = write_file(out_dir, &format!("{stem}.csv"), &res.csv)?;
                let report = format!(
                    "theta2_deg={}\ncsv={}\n{}",
                    fmt_sig9(t2.to_degrees()),
                    csv.display(),
                    commands::fit_report(&res.fit)
                );
                write_file(out_dir, &format!("{stem}.fit.txt"), &report)?;
                stdout.push_str(&report);
            }
        }
        Command::Chsh => {
            let res = commands::chsh(&exp)?;
            let csv = write_file(out_dir, "chsh.csv", &res.csv)?;
            let report = format!("csv={}\n{}", csv.display(), commands::chsh_report(&res.analysis));
            write_file(out_dir, "chsh_report.txt", &report)?;
            stdout.push_str(&report);
        }
        Command::SweepAperture { .. } => {
            let res = commands::sweep(&exp)?;
            let csv = write_file(out_dir, "sweep.csv", &res.csv)?;
            stdout.push_str(&format!("csv={}\n", csv.display()));
            for r in &res.rows {
                stdout.push_str(&format!(
                    "divergence_mrad={} V={} flux_pairs_per_s_per_mw={}\n",
                    fmt_sig9(r.divergence_mrad),
                    fmt_sig9(r.fitted_v),
                    fmt_sig9(r.flux_per_mw)
                ));
            }
        }
        Command::Balance => {
            let res = commands::balance(&exp)?;
            let report = commands::balance_report(&res, exp.detection.pump_power_mw);
            write_file(out_dir, "balance.txt", &report)?;
            stdout.push_str(&report);
        }
        Command::Fit { .. } => unreachable!("handled above"),
    }
    Ok(stdout)
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
