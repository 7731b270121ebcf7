//! Run configuration: TOML sections of flat `key = value` pairs.
//!
//! Angles are degrees in the file and radians everywhere past
//! [`RunConfig::into_experiment`]. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::detection::{DetectionConfig, DEFAULT_BACKGROUND_RATE, DEFAULT_CHSH_ANGLES, MIN_FRINGE_POINTS};
use crate::source::{ApertureCalibration, CollectionModel, PbsPump, SourceParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub source: SourceSection,
    pub pbs: PbsSection,
    pub pump: PumpSection,
    pub dephasing: DephasingSection,
    pub detection: DetectionSection,
    pub scan: ScanSection,
    pub chsh: ChshSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub eta_h: f64,
    pub eta_v: f64,
    pub l_a_m: f64,
    pub l_b_m: f64,
    /// rad/m; the pump wavenumber is their sum
    pub k_s: f64,
    pub k_i: f64,
    pub theta_s_deg: f64,
    pub theta_i_deg: f64,
    pub theta_p_deg: f64,
    pub pair_rate_per_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbsSection {
    pub t_h: f64,
    pub leak_h: f64,
    pub r_v: f64,
    pub leak_v: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpSection {
    pub power_mw: f64,
    pub auto_balance: bool,
    pub target_phi_deg: f64,
    pub hwp1_deg: f64,
    pub qwp1_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DephasingSection {
    /// Overrides the aperture model when set.
    pub coherence: Option<f64>,
    pub divergence_mrad: f64,
    pub sigma_slope_per_mrad: Option<f64>,
    pub sigma_offset_rad: Option<f64>,
    pub flux_reference_divergence_mrad: f64,
    pub cone_width_mrad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    pub det_eff_1: f64,
    pub det_eff_2: f64,
    pub dark_rate_1: f64,
    pub dark_rate_2: f64,
    pub coincidence_window_s: f64,
    pub integration_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub theta1_start_deg: f64,
    pub theta1_stop_deg: f64,
    pub theta1_step_deg: f64,
    pub theta2_deg: Vec<f64>,
    pub sweep_theta2_deg: f64,
    pub divergences_mrad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChshSection {
    /// Four `[θ1, θ2]` pairs; the last enters S with a minus sign.
    pub angles_deg: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            source: SourceSection::default(),
            pbs: PbsSection::default(),
            pump: PumpSection::default(),
            dephasing: DephasingSection::default(),
            detection: DetectionSection::default(),
            scan: ScanSection::default(),
            chsh: ChshSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl Default for SourceSection {
    fn default() -> Self {
        let p = SourceParams::default();
        Self {
            eta_h: p.eta_h,
            eta_v: p.eta_v,
            l_a_m: p.l_a,
            l_b_m: p.l_b,
            k_s: p.k_s,
            k_i: p.k_i,
            theta_s_deg: 0.0,
            theta_i_deg: 0.0,
            theta_p_deg: 0.0,
            pair_rate_per_mw: p.pair_rate_per_mw,
        }
    }
}

impl Default for PbsSection {
    fn default() -> Self {
        let p = PbsPump::default();
        Self {
            t_h: p.t_h,
            leak_h: p.leak_h,
            r_v: p.r_v,
            leak_v: p.leak_v,
        }
    }
}

impl Default for PumpSection {
    fn default() -> Self {
        Self {
            power_mw: 3.28,
            auto_balance: true,
            target_phi_deg: 180.0,
            hwp1_deg: 22.5,
            qwp1_deg: 45.0,
        }
    }
}

impl Default for DephasingSection {
    fn default() -> Self {
        Self {
            coherence: None,
            divergence_mrad: 12.5,
            sigma_slope_per_mrad: None,
            sigma_offset_rad: None,
            flux_reference_divergence_mrad: 12.5,
            cone_width_mrad: None,
        }
    }
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self {
            det_eff_1: 1.0,
            det_eff_2: 1.0,
            dark_rate_1: DEFAULT_BACKGROUND_RATE,
            dark_rate_2: DEFAULT_BACKGROUND_RATE,
            coincidence_window_s: 1e-9,
            integration_time_s: 40.0,
        }
    }
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            theta1_start_deg: 0.0,
            theta1_stop_deg: 350.0,
            theta1_step_deg: 10.0,
            theta2_deg: vec![0.0, 46.0, 90.5, 135.0],
            sweep_theta2_deg: 45.0,
            divergences_mrad: vec![5.0, 7.5, 10.0, 12.5, 15.0, 20.0, 25.0, 30.0],
        }
    }
}

impl Default for ChshSection {
    fn default() -> Self {
        Self {
            angles_deg: DEFAULT_CHSH_ANGLES
                .iter()
                .map(|&(a, b)| [a.to_degrees(), b.to_degrees()])
                .collect(),
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// How the pump plates are set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PumpSetting {
    /// Solve for β = 1 at this relative phase (rad).
    AutoBalance { target_phi: f64 },
    /// Fixed plate angles (rad).
    Manual { hwp1: f64, qwp1: f64 },
}

/// Where the coherence factor comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DephasingSetting {
    Coherence(f64),
    Aperture { divergence_mrad: f64 },
}

/// A validated configuration, in internal units.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub params: SourceParams,
    pub detection: DetectionConfig,
    pub pump: PumpSetting,
    pub dephasing: DephasingSetting,
    pub calibration: ApertureCalibration,
    pub collection: CollectionModel,
    pub theta1_grid: Vec<f64>,
    pub theta2_set: Vec<f64>,
    pub sweep_theta2: f64,
    pub divergences_mrad: Vec<f64>,
    pub chsh_angles: [(f64, f64); 4],
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Validates every field and converts to internal units.
    pub fn into_experiment(&self) -> Result<Experiment, ConfigError> {
        let s = &self.source;
        let params = SourceParams {
            eta_h: s.eta_h,
            eta_v: s.eta_v,
            pbs: PbsPump {
                t_h: self.pbs.t_h,
                leak_h: self.pbs.leak_h,
                r_v: self.pbs.r_v,
                leak_v: self.pbs.leak_v,
            },
            l_a: s.l_a_m,
            l_b: s.l_b_m,
            k_s: s.k_s,
            k_i: s.k_i,
            theta_s: s.theta_s_deg.to_radians(),
            theta_i: s.theta_i_deg.to_radians(),
            theta_p: s.theta_p_deg.to_radians(),
            pair_rate_per_mw: s.pair_rate_per_mw,
        };
        params.validate().map_err(|e| invalid("source", e.to_string()))?;

        let d = &self.detection;
        let detection = DetectionConfig {
            det_eff_1: d.det_eff_1,
            det_eff_2: d.det_eff_2,
            dark_rate_1: d.dark_rate_1,
            dark_rate_2: d.dark_rate_2,
            coincidence_window: d.coincidence_window_s,
            integration_time: d.integration_time_s,
            pump_power_mw: self.pump.power_mw,
            rng_seed: self.seed,
        };
        detection.validate().map_err(|e| invalid("detection", e.to_string()))?;

        let p = &self.pump;
        let pump = if p.auto_balance {
            if !p.target_phi_deg.is_finite() {
                return Err(invalid("pump.target_phi_deg", "must be finite"));
            }
            PumpSetting::AutoBalance {
                target_phi: p.target_phi_deg.to_radians(),
            }
        } else {
            if !(p.hwp1_deg.is_finite() && p.qwp1_deg.is_finite()) {
                return Err(invalid("pump.hwp1_deg", "plate angles must be finite"));
            }
            PumpSetting::Manual {
                hwp1: p.hwp1_deg.to_radians(),
                qwp1: p.qwp1_deg.to_radians(),
            }
        };

        let dp = &self.dephasing;
        let dephasing = match dp.coherence {
            Some(c) if c > 0.0 && c <= 1.0 => DephasingSetting::Coherence(c),
            Some(c) => return Err(invalid("dephasing.coherence", format!("must lie in (0, 1], got {c}"))),
            None => {
                if !(dp.divergence_mrad.is_finite() && dp.divergence_mrad >= 0.0) {
                    return Err(invalid("dephasing.divergence_mrad", "must be ≥ 0"));
                }
                DephasingSetting::Aperture {
                    divergence_mrad: dp.divergence_mrad,
                }
            }
        };
        let calibration = match (dp.sigma_slope_per_mrad, dp.sigma_offset_rad) {
            (None, None) => ApertureCalibration::default(),
            (Some(slope), Some(offset)) if slope.is_finite() && offset.is_finite() && slope >= 0.0 => {
                ApertureCalibration { slope, offset }
            }
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "dephasing.sigma_slope_per_mrad",
                    "slope must be finite and ≥ 0",
                ))
            }
            _ => {
                return Err(invalid(
                    "dephasing.sigma_offset_rad",
                    "set both sigma_slope_per_mrad and sigma_offset_rad, or neither",
                ))
            }
        };
        if !(dp.flux_reference_divergence_mrad.is_finite() && dp.flux_reference_divergence_mrad > 0.0) {
            return Err(invalid("dephasing.flux_reference_divergence_mrad", "must be > 0"));
        }
        let collection = match dp.cone_width_mrad {
            None => CollectionModel {
                reference_divergence_mrad: dp.flux_reference_divergence_mrad,
                ..CollectionModel::default()
            },
            Some(w) if w.is_finite() && w > 0.0 => CollectionModel {
                reference_divergence_mrad: dp.flux_reference_divergence_mrad,
                cone_width_mrad: w,
            },
            Some(w) => return Err(invalid("dephasing.cone_width_mrad", format!("must be > 0, got {w}"))),
        };

        let sc = &self.scan;
        if !(sc.theta1_step_deg.is_finite() && sc.theta1_step_deg > 0.0) {
            return Err(invalid("scan.theta1_step_deg", "must be > 0"));
        }
        if !(sc.theta1_start_deg.is_finite() && sc.theta1_stop_deg.is_finite()) {
            return Err(invalid("scan.theta1_start_deg", "must be finite"));
        }
        let n = ((sc.theta1_stop_deg - sc.theta1_start_deg) / sc.theta1_step_deg + 1e-9).floor();
        if n < 0.0 || (n as usize) + 1 < MIN_FRINGE_POINTS {
            return Err(invalid(
                "scan.theta1_stop_deg",
                format!("grid must hold at least {MIN_FRINGE_POINTS} points"),
            ));
        }
        let theta1_grid = (0..=n as usize)
            .map(|k| (sc.theta1_start_deg + k as f64 * sc.theta1_step_deg).to_radians())
            .collect();
        if sc.theta2_deg.is_empty() || sc.theta2_deg.iter().any(|t| !t.is_finite()) {
            return Err(invalid("scan.theta2_deg", "need at least one finite angle"));
        }
        let theta2_set = sc.theta2_deg.iter().map(|t| t.to_radians()).collect();
        if !sc.sweep_theta2_deg.is_finite() {
            return Err(invalid("scan.sweep_theta2_deg", "must be finite"));
        }
        check_divergences(&sc.divergences_mrad).map_err(|r| invalid("scan.divergences_mrad", r))?;

        if self.chsh.angles_deg.len() != 4 || self.chsh.angles_deg.iter().flatten().any(|a| !a.is_finite()) {
            return Err(invalid(
                "chsh.angles_deg",
                "need exactly four finite [theta1, theta2] pairs",
            ));
        }
        let chsh_angles = std::array::from_fn(|i| {
            (
                self.chsh.angles_deg[i][0].to_radians(),
                self.chsh.angles_deg[i][1].to_radians(),
            )
        });

        Ok(Experiment {
            params,
            detection,
            pump,
            dephasing,
            calibration,
            collection,
            theta1_grid,
            theta2_set,
            sweep_theta2: sc.sweep_theta2_deg.to_radians(),
            divergences_mrad: sc.divergences_mrad.clone(),
            chsh_angles,
            out_dir: self.output.dir.clone(),
        })
    }
}

/// Non-empty, finite, non-negative and strictly increasing.
pub fn check_divergences(list: &[f64]) -> Result<(), String> {
    if list.is_empty() {
        return Err("list is empty".into());
    }
    if list.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err("divergences must be finite and ≥ 0".into());
    }
    if list.windows(2).any(|w| w[1] <= w[0]) {
        return Err("divergences must be strictly increasing".into());
    }
    Ok(())
}
