//! Runs built from a validated [`Experiment`]: fringe scans, CHSH, aperture
//! sweeps, pump balancing and refitting saved scans.
//!
//! Each command returns its CSV text and a `key=value` report; writing files
//! is left to the caller.

use std::fmt::Write as _;

use thiserror::Error;

use crate::analysis::{analyze_chsh, brightness, fit_points, AnalysisError, ChshAnalysis, FitOptions, FitResult};
use crate::config::{ConfigError, DephasingSetting, Experiment, PumpSetting};
use crate::detection::{fringe_tag, run_chsh, run_fringe_tagged, DetectionError, PairSource};
use crate::source::{
    aperture_to_sigma, balance_solve, coherence_factor, prepare_pump, sagnac_state, sigma_for_coherence,
    BalanceSolution, SourceError, SourceOutput, BALANCE_TOL,
};
use crate::table::{self, fmt_sig9, SweepRow, TableError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 1 for invalid input, 2 for solver or fit failure, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Source(SourceError::NoConvergence { .. }) => 2,
            RunError::Analysis(AnalysisError::NoConvergence { .. } | AnalysisError::Underdetermined { .. }) => 2,
            RunError::Io { .. } | RunError::Config(ConfigError::Io { .. }) => 3,
            _ => 1,
        }
    }
}

/// Pump plate angles (rad) and the balance solution when they were solved for.
pub fn pump_plates(exp: &Experiment) -> Result<(f64, f64, Option<BalanceSolution>), RunError> {
    match exp.pump {
        PumpSetting::AutoBalance { target_phi } => {
            let sol = balance_solve(&exp.params, target_phi)?;
            Ok((sol.hwp1_angle, sol.qwp1_angle, Some(sol)))
        }
        PumpSetting::Manual { hwp1, qwp1 } => Ok((hwp1, qwp1, None)),
    }
}

/// Coherence factor and relative collected flux of the configured aperture.
pub fn configured_dephasing(exp: &Experiment) -> (f64, f64) {
    match exp.dephasing {
        DephasingSetting::Coherence(d) => (d, 1.0),
        DephasingSetting::Aperture { divergence_mrad } => (
            coherence_factor(aperture_to_sigma(divergence_mrad, &exp.calibration)),
            exp.collection.relative_flux(divergence_mrad),
        ),
    }
}

/// Dephased source output and its detected pair source.
pub fn build_source(exp: &Experiment, coherence: f64, flux_scale: f64) -> Result<(SourceOutput, PairSource), RunError> {
    let (hwp1, qwp1, _) = pump_plates(exp)?;
    let pump = prepare_pump(exp.detection.pump_power_mw, hwp1, qwp1)?;
    let output = sagnac_state(&pump, &exp.params)?.dephased(sigma_for_coherence(coherence)?)?;
    let base = PairSource::new(&output, &exp.params, &exp.detection);
    Ok((output, PairSource::with_rate(base.state, base.pair_rate * flux_scale)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FringeOutput {
    /// rad
    pub theta2: f64,
    pub csv: String,
    pub fit: FitResult,
}

/// Simulates and fits one fringe. The fit reads the points back from the
/// CSV text so that refitting the saved file reproduces it exactly.
pub fn fringe(exp: &Experiment, theta2: f64) -> Result<FringeOutput, RunError> {
    let (d, flux) = configured_dephasing(exp);
    let (_, src) = build_source(exp, d, flux)?;
    let scan = run_fringe_tagged(&src, theta2, &exp.theta1_grid, &exp.detection, fringe_tag(theta2))?;
    let csv = table::write_fringe(&scan);
    let fit = fit_csv(&csv)?;
    Ok(FringeOutput { theta2, csv, fit })
}

/// Fits a fringe table written by [`fringe`].
pub fn fit_csv(text: &str) -> Result<FitResult, RunError> {
    let t = table::read_fringe(text)?;
    Ok(fit_points(&t.points, &FitOptions::default())?)
}

pub fn fit_report(fit: &FitResult) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
    kv("V", fmt_sig9(fit.visibility));
    kv("sigma_V", fmt_sig9(fit.sigma_v));
    kv("c0", fmt_sig9(fit.c0));
    kv("sigma_c0", fmt_sig9(fit.sigma_c0));
    kv("phase_deg", fmt_sig9(fit.phase_offset.to_degrees()));
    kv("sigma_phase_deg", fmt_sig9(fit.sigma_phase.to_degrees()));
    kv("phase_degenerate", fit.phase_degenerate.to_string());
    kv("chi2", fmt_sig9(fit.chi2));
    kv("chi2_per_dof", fmt_sig9(fit.chi2_per_dof));
    kv(
        "extrema_V",
        fit.extrema_visibility.map_or_else(|| "nan".into(), fmt_sig9),
    );
    kv("iterations", fit.iterations.to_string());
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChshOutput {
    pub csv: String,
    pub analysis: ChshAnalysis,
}

pub fn chsh(exp: &Experiment) -> Result<ChshOutput, RunError> {
    let (d, flux) = configured_dephasing(exp);
    let (_, src) = build_source(exp, d, flux)?;
    let run = run_chsh(&src, &exp.detection, &exp.chsh_angles)?;
    Ok(ChshOutput {
        csv: table::write_chsh(&run),
        analysis: analyze_chsh(&run)?,
    })
}

pub fn chsh_report(a: &ChshAnalysis) -> String {
    let r = &a.result;
    let mut s = String::new();
    for (i, e) in r.e_values.iter().enumerate() {
        writeln!(s, "E{}={}", i + 1, fmt_sig9(e.e)).expect("string write");
        writeln!(s, "sigma_E{}={}", i + 1, fmt_sig9(e.sigma)).expect("string write");
    }
    writeln!(s, "S={}", fmt_sig9(r.s)).expect("string write");
    writeln!(s, "sigma_S={}", fmt_sig9(r.sigma_s)).expect("string write");
    writeln!(s, "sigma_S_raw_only={}", fmt_sig9(a.sigma_s_raw_only)).expect("string write");
    writeln!(s, "violation_sigmas={}", fmt_sig9(r.significance())).expect("string write");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub csv: String,
    pub rows: Vec<SweepRow>,
}

/// Fringe at the sweep idler angle for each divergence, with the pair rate
/// scaled by the collection model.
pub fn sweep(exp: &Experiment) -> Result<SweepOutput, RunError> {
    crate::config::check_divergences(&exp.divergences_mrad).map_err(|reason| ConfigError::Invalid {
        key: "divergences",
        reason,
    })?;
    let theta2 = exp.sweep_theta2;
    let cfg = &exp.detection;
    let mut rows = Vec::with_capacity(exp.divergences_mrad.len());
    for &div in &exp.divergences_mrad {
        let d = coherence_factor(aperture_to_sigma(div, &exp.calibration));
        let (_, src) = build_source(exp, d, exp.collection.relative_flux(div))?;
        let tag = fringe_tag(theta2) ^ div.to_bits().rotate_left(17);
        let scan = run_fringe_tagged(&src, theta2, &exp.theta1_grid, cfg, tag)?;
        let fit = fit_csv(&table::write_fringe(&scan))?;
        rows.push(SweepRow {
            divergence_mrad: div,
            coherence: d,
            fitted_v: fit.visibility,
            sigma_v: fit.sigma_v,
            // mean coincidences over θ1 are half the pair rate
            flux_per_mw: brightness(2.0 * fit.c0, cfg.integration_time, cfg.pump_power_mw, 1.0)?,
        });
    }
    Ok(SweepOutput {
        csv: table::write_sweep(&rows),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutput {
    pub solution: BalanceSolution,
    pub usable_pump_mw: f64,
}

/// Solves for the pump plates at the configured target phase (π when the
/// config fixes the plates by hand).
pub fn balance(exp: &Experiment) -> Result<BalanceOutput, RunError> {
    let target = match exp.pump {
        PumpSetting::AutoBalance { target_phi } => target_phi,
        PumpSetting::Manual { .. } => std::f64::consts::PI,
    };
    let solution = balance_solve(&exp.params, target)?;
    if (solution.beta - 1.0).abs() > BALANCE_TOL {
        return Err(SourceError::NoConvergence {
            iterations: solution.iterations,
            residual: (solution.beta - 1.0).abs(),
        }
        .into());
    }
    let pump = prepare_pump(exp.detection.pump_power_mw, solution.hwp1_angle, solution.qwp1_angle)?;
    let out = sagnac_state(&pump, &exp.params)?;
    Ok(BalanceOutput {
        solution,
        usable_pump_mw: out.usable_pump_mw,
    })
}

pub fn balance_report(b: &BalanceOutput, input_mw: f64) -> String {
    let sol = &b.solution;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
    kv("hwp1_deg", fmt_sig9(sol.hwp1_angle.to_degrees()));
    kv("qwp1_deg", fmt_sig9(sol.qwp1_angle.to_degrees()));
    kv("beta", fmt_sig9(sol.beta));
    kv("phi_deg", fmt_sig9(sol.phi.to_degrees()));
    kv("iterations", sol.iterations.to_string());
    kv("usable_pump_mw", fmt_sig9(b.usable_pump_mw));
    kv("usable_fraction", fmt_sig9(b.usable_pump_mw / input_mw));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn exp() -> Experiment {
        RunConfig::default().into_experiment().unwrap()
    }

    #[test]
    fn default_dephasing_is_anchor() {
        let (d, flux) = configured_dephasing(&exp());
        assert!((d - 0.968).abs() < 1e-12, "{d}");
        assert!((flux - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fringe_fit_equals_refit() {
        let e = exp();
        let out = fringe(&e, 46f64.to_radians()).unwrap();
        assert_eq!(fit_csv(&out.csv).unwrap(), out.fit);
        assert!((out.fit.visibility - 0.968).abs() < 0.01, "{}", out.fit.visibility);
    }

    #[test]
    fn low_flux_fits_converge_for_many_seeds() {
        let e = exp();
        let (_, src) = build_source(&e, 0.9999, 2e-3).unwrap();
        let theta2 = 45f64.to_radians();
        for seed in 0..60 {
            let cfg = crate::detection::DetectionConfig {
                rng_seed: seed,
                ..e.detection
            };
            let scan = crate::detection::run_fringe(&src, theta2, &e.theta1_grid, &cfg).unwrap();
            let fit = crate::analysis::fit_fringe(&scan).unwrap_or_else(|err| panic!("seed {seed}: {err}"));
            assert!(
                fit.visibility > 0.9 && fit.visibility <= 1.0,
                "seed {seed}: {}",
                fit.visibility
            );
        }
    }

    #[test]
    fn exit_codes() {
        let e = RunError::Source(SourceError::NoConvergence {
            iterations: 3,
            residual: 1.0,
        });
        assert_eq!(e.exit_code(), 2);
        assert_eq!(RunError::Source(SourceError::NoDownConversion).exit_code(), 1);
        let io = RunError::Io {
            context: "x".into(),
            source: std::io::Error::other("y"),
        };
        assert_eq!(io.exit_code(), 3);
    }

    #[test]
    fn balance_report_keys() {
        let e = exp();
        let b = balance(&e).unwrap();
        let rep = balance_report(&b, e.detection.pump_power_mw);
        for key in ["hwp1_deg=", "qwp1_deg=", "beta=1", "phi_deg=", "usable_fraction="] {
            assert!(rep.contains(key), "{rep}");
        }
    }
}
