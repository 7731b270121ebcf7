//! Biphoton state synthesis for the bidirectionally pumped polarization Sagnac loop.
//!
//! The H pump component travels counterclockwise, down-converts into
//! `|H_s V_i⟩`, and is rotated by the in-loop half-wave plate into
//! `|V_s⟩₁|H_i⟩₂` at the PBS. The V pump component is first rotated to H by the
//! same plate, travels clockwise and leaves as `|H_s⟩₁|V_i⟩₂`. The output state
//! is therefore
//!
//! ```text
//! |Ψ⟩ ∝ |HV⟩ + β e^{iφ} |VH⟩,   φ = θ_s + θ_i − θ_p − φ_p,   β = η_H|E_H|√t_h / (η_V|E_V|√r_v)
//! ```
//!
//! and the loop path lengths only contribute a global phase.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::polarization::{
    wrap_phase, Basis, BiphotonState, DensityState, JonesVector, PairState, PolarizationError, PolarizationOperator,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SourceError {
    #[error("invalid pump: {0}")]
    InvalidPump(String),
    #[error("invalid source parameters: {0}")]
    InvalidParams(String),
    #[error("both down-conversion paths have zero amplitude")]
    NoDownConversion,
    #[error("balance solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    State(#[from] PolarizationError),
}

/// Classical pump field entering the loop. `|e_h|² + |e_v|²` is the power in mW.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpField {
    e_h: Complex64,
    e_v: Complex64,
}

impl PumpField {
    pub fn new(e_h: Complex64, e_v: Complex64) -> Result<Self, SourceError> {
        let finite = |z: Complex64| z.re.is_finite() && z.im.is_finite();
        if !finite(e_h) || !finite(e_v) {
            return Err(SourceError::InvalidPump("non-finite amplitude".into()));
        }
        if e_h.norm_sqr() + e_v.norm_sqr() <= 0.0 {
            return Err(SourceError::InvalidPump("zero pump power".into()));
        }
        Ok(Self { e_h, e_v })
    }

    /// Real amplitudes with relative phase `phi_p` on the V component.
    pub fn from_components(e_h: f64, e_v: f64, phi_p: f64) -> Result<Self, SourceError> {
        Self::new(Complex64::new(e_h, 0.0), Complex64::from_polar(e_v, phi_p))
    }

    pub fn e_h(&self) -> Complex64 {
        self.e_h
    }

    pub fn e_v(&self) -> Complex64 {
        self.e_v
    }

    pub fn power_mw(&self) -> f64 {
        self.e_h.norm_sqr() + self.e_v.norm_sqr()
    }

    /// `arg(e_v) − arg(e_h)` in `(−π, π]`.
    pub fn relative_phase(&self) -> f64 {
        wrap_phase(self.e_v.arg() - self.e_h.arg())
    }

    pub fn jones(&self) -> JonesVector {
        JonesVector::new(self.e_h, self.e_v)
    }
}

/// Pump-wavelength behavior of the loop PBS. Fractions are of power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbsPump {
    /// H transmitted into the loop.
    pub t_h: f64,
    /// H sent to the wrong port.
    pub leak_h: f64,
    /// V reflected into the loop.
    pub r_v: f64,
    /// V sent to the wrong port.
    pub leak_v: f64,
}

impl Default for PbsPump {
    fn default() -> Self {
        Self {
            t_h: 0.73,
            leak_h: 0.03,
            r_v: 0.80,
            leak_v: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    /// Generation efficiency of the counterclockwise (H-pumped) direction.
    pub eta_h: f64,
    /// Generation efficiency of the clockwise (V-pumped) direction.
    pub eta_v: f64,
    pub pbs: PbsPump,
    /// PBS to crystal, path A (m).
    pub l_a: f64,
    /// PBS to crystal, path B (m).
    pub l_b: f64,
    /// Signal wavenumber (rad/m).
    pub k_s: f64,
    /// Idler wavenumber (rad/m).
    pub k_i: f64,
    /// Phases picked up in the loop half-wave plate (rad).
    pub theta_s: f64,
    pub theta_i: f64,
    pub theta_p: f64,
    /// Detected pairs per second per mW of input pump.
    pub pair_rate_per_mw: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        let k_810 = 2.0 * PI / 810e-9;
        Self {
            eta_h: 1.0,
            eta_v: 1.0,
            pbs: PbsPump::default(),
            l_a: 0.10,
            l_b: 0.12,
            k_s: k_810,
            k_i: k_810,
            theta_s: 0.0,
            theta_i: 0.0,
            theta_p: 0.0,
            pair_rate_per_mw: 5000.0,
        }
    }
}

impl SourceParams {
    /// Pump wavenumber; energy conservation makes it `k_s + k_i` in free space.
    pub fn k_p(&self) -> f64 {
        self.k_s + self.k_i
    }

    /// Net plate phase `θ_s + θ_i − θ_p`.
    pub fn plate_phase(&self) -> f64 {
        self.theta_s + self.theta_i - self.theta_p
    }

    /// Amplitude factor of the H-pumped direction, `η_H √t_h`.
    pub fn h_path_gain(&self) -> f64 {
        self.eta_h * self.pbs.t_h.sqrt()
    }

    /// Amplitude factor of the V-pumped direction, `η_V √r_v`.
    pub fn v_path_gain(&self) -> f64 {
        self.eta_v * self.pbs.r_v.sqrt()
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        let bad = |msg: String| Err(SourceError::InvalidParams(msg));
        let all = [
            self.eta_h,
            self.eta_v,
            self.pbs.t_h,
            self.pbs.leak_h,
            self.pbs.r_v,
            self.pbs.leak_v,
            self.l_a,
            self.l_b,
            self.k_s,
            self.k_i,
            self.theta_s,
            self.theta_i,
            self.theta_p,
            self.pair_rate_per_mw,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return bad("non-finite value".into());
        }
        if self.eta_h <= 0.0 {
            return bad(format!("eta_h must be > 0, got {}", self.eta_h));
        }
        if self.eta_v <= 0.0 {
            return bad(format!("eta_v must be > 0, got {}", self.eta_v));
        }
        let p = &self.pbs;
        for (name, v) in [
            ("t_h", p.t_h),
            ("leak_h", p.leak_h),
            ("r_v", p.r_v),
            ("leak_v", p.leak_v),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("pbs {name} must lie in [0, 1], got {v}"));
            }
        }
        if p.t_h + p.leak_h > 1.0 {
            return bad(format!("t_h + leak_h = {} exceeds 1", p.t_h + p.leak_h));
        }
        if p.r_v + p.leak_v > 1.0 {
            return bad(format!("r_v + leak_v = {} exceeds 1", p.r_v + p.leak_v));
        }
        if self.k_s <= 0.0 || self.k_i <= 0.0 {
            return bad("wavenumbers must be positive".into());
        }
        if self.pair_rate_per_mw < 0.0 {
            return bad("pair_rate_per_mw must be non-negative".into());
        }
        Ok(())
    }
}

/// Result of propagating a pump through the loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceOutput {
    pub state: PairState,
    /// `|a_VH| / |a_HV|`.
    pub beta: f64,
    /// `arg(a_VH) − arg(a_HV)` in `(−π, π]`.
    pub phi: f64,
    /// Pump power that reaches the crystal in a phase-matched direction (mW).
    pub usable_pump_mw: f64,
}

impl SourceOutput {
    /// The pure state, if no dephasing has been applied yet.
    pub fn pure_state(&self) -> Option<&BiphotonState> {
        match &self.state {
            PairState::Pure(p) => Some(p),
            PairState::Mixed(_) => None,
        }
    }

    /// Replaces the state by its dephased version.
    pub fn dephased(&self, sigma_phi: f64) -> Result<SourceOutput, SourceError> {
        let pure = self
            .pure_state()
            .ok_or_else(|| SourceError::InvalidParams("state already dephased".into()))?;
        Ok(SourceOutput {
            state: PairState::Mixed(apply_dephasing(pure, sigma_phi)?),
            ..*self
        })
    }
}

/// H-polarized pump of the given power sent through HWP1 then QWP1.
pub fn prepare_pump(input_power_mw: f64, hwp1_angle: f64, qwp1_angle: f64) -> Result<PumpField, SourceError> {
    if !(input_power_mw.is_finite() && input_power_mw > 0.0) {
        return Err(SourceError::InvalidPump(format!(
            "input power must be > 0 mW, got {input_power_mw}"
        )));
    }
    if !(hwp1_angle.is_finite() && qwp1_angle.is_finite()) {
        return Err(SourceError::InvalidPump("non-finite plate angle".into()));
    }
    let input = JonesVector::new(Complex64::new(input_power_mw.sqrt(), 0.0), Complex64::new(0.0, 0.0));
    let plates = PolarizationOperator::quarter_wave(qwp1_angle) * PolarizationOperator::half_wave(hwp1_angle);
    let out = plates.apply(&input);
    PumpField::new(out[0], out[1])
}

/// Output state of the loop for a given pump.
pub fn sagnac_state(pump: &PumpField, params: &SourceParams) -> Result<SourceOutput, SourceError> {
    params.validate()?;
    let k_p = params.k_p();
    let k_out = params.k_s + params.k_i;

    // Path phases are kept apart from the plate phases so that the large
    // k·L products cancel exactly between the two directions.
    // V pump, clockwise: exits as |H_s⟩₁|V_i⟩₂
    let v_path = Complex64::from_polar(1.0, k_p * params.l_b + k_out * params.l_a);
    let v_plate = Complex64::from_polar(params.v_path_gain(), params.theta_p);
    let a_hv = v_path * v_plate * pump.e_v();
    // H pump, counterclockwise: exits as |V_s⟩₁|H_i⟩₂
    let h_path = Complex64::from_polar(1.0, k_p * params.l_a + k_out * params.l_b);
    let h_plate = Complex64::from_polar(params.h_path_gain(), params.theta_s + params.theta_i);
    let a_vh = h_path * h_plate * pump.e_h();

    if a_hv.norm_sqr() == 0.0 && a_vh.norm_sqr() == 0.0 {
        return Err(SourceError::NoDownConversion);
    }
    let state = BiphotonState::from_hv_vh(a_hv, a_vh)?;
    let beta = if a_hv.norm() > 0.0 {
        a_vh.norm() / a_hv.norm()
    } else {
        f64::INFINITY
    };
    let phi = wrap_phase((h_plate * pump.e_h() * (v_plate * pump.e_v()).conj()).arg());
    let usable_pump_mw = params.pbs.t_h * pump.e_h().norm_sqr() + params.pbs.r_v * pump.e_v().norm_sqr();
    Ok(SourceOutput {
        state: PairState::Pure(state),
        beta,
        phi,
        usable_pump_mw,
    })
}

/// Pump plate angles that give a balanced (`β = 1`) state with relative phase `target_phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceSolution {
    pub hwp1_angle: f64,
    pub qwp1_angle: f64,
    pub beta: f64,
    pub phi: f64,
    pub iterations: usize,
}

/// Newton iteration settings for [`balance_solve`].
pub const BALANCE_INITIAL_GUESS: (f64, f64) = (PI / 8.0, PI / 4.0);
pub const BALANCE_MAX_ITER: usize = 100;
pub const BALANCE_STEP_TOL: f64 = 1e-10;
pub const BALANCE_TOL: f64 = 1e-6;
const BALANCE_FD_STEP: f64 = 1e-6;
const BALANCE_MAX_STEP: f64 = 0.5;

fn balance_residual(params: &SourceParams, target_phi: f64, x: [f64; 2]) -> Option<[f64; 2]> {
    let pump = prepare_pump(1.0, x[0], x[1]).ok()?;
    let out = sagnac_state(&pump, params).ok()?;
    if !out.beta.is_finite() {
        return None;
    }
    Some([out.beta - 1.0, wrap_phase(out.phi - target_phi)])
}

fn norm2(r: [f64; 2]) -> f64 {
    r[0].hypot(r[1])
}

/// Damped Newton search over (HWP1, QWP1) with a central-difference Jacobian.
///
/// Starts at [`BALANCE_INITIAL_GUESS`] (diagonal pump light), caps at
/// [`BALANCE_MAX_ITER`] iterations, and stops once a step is shorter than
/// [`BALANCE_STEP_TOL`] or the residual vanishes.
pub fn balance_solve(params: &SourceParams, target_phi: f64) -> Result<BalanceSolution, SourceError> {
    params.validate()?;
    if !target_phi.is_finite() {
        return Err(SourceError::InvalidParams("non-finite target phase".into()));
    }
    if params.h_path_gain() <= 0.0 || params.v_path_gain() <= 0.0 {
        return Err(SourceError::InvalidParams(
            "one loop direction has zero gain; β cannot be balanced".into(),
        ));
    }

    let mut x = [BALANCE_INITIAL_GUESS.0, BALANCE_INITIAL_GUESS.1];
    let mut r = balance_residual(params, target_phi, x).ok_or(SourceError::NoDownConversion)?;
    let mut iterations = 0;
    while iterations < BALANCE_MAX_ITER {
        if norm2(r) < 1e-14 {
            break;
        }
        iterations += 1;

        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += BALANCE_FD_STEP;
            xm[j] -= BALANCE_FD_STEP;
            let (Some(rp), Some(rm)) = (
                balance_residual(params, target_phi, xp),
                balance_residual(params, target_phi, xm),
            ) else {
                return Err(SourceError::NoConvergence {
                    iterations,
                    residual: norm2(r),
                });
            };
            for i in 0..2 {
                let mut d = rp[i] - rm[i];
                if i == 1 {
                    d = wrap_phase(d);
                }
                jac[i][j] = d / (2.0 * BALANCE_FD_STEP);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-14 {
            return Err(SourceError::NoConvergence {
                iterations,
                residual: norm2(r),
            });
        }
        let mut step = [
            -(jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
            -(-jac[1][0] * r[0] + jac[0][0] * r[1]) / det,
        ];
        let len = norm2(step);
        if len > BALANCE_MAX_STEP {
            step = [step[0] * BALANCE_MAX_STEP / len, step[1] * BALANCE_MAX_STEP / len];
        }

        // backtrack until the residual decreases
        let mut damping = 1.0;
        let mut accepted = None;
        while damping > 1e-6 {
            let trial = [x[0] + damping * step[0], x[1] + damping * step[1]];
            if let Some(rt) = balance_residual(params, target_phi, trial) {
                if norm2(rt) < norm2(r) {
                    accepted = Some((trial, rt));
                    break;
                }
            }
            damping *= 0.5;
        }
        let Some((trial, rt)) = accepted else {
            break;
        };
        let moved = norm2([trial[0] - x[0], trial[1] - x[1]]);
        x = trial;
        r = rt;
        if moved < BALANCE_STEP_TOL {
            break;
        }
    }

    if r[0].abs() > BALANCE_TOL || r[1].abs() > BALANCE_TOL {
        return Err(SourceError::NoConvergence {
            iterations,
            residual: norm2(r),
        });
    }
    Ok(BalanceSolution {
        hwp1_angle: x[0],
        qwp1_angle: x[1],
        beta: r[0] + 1.0,
        phi: wrap_phase(target_phi + r[1]),
        iterations,
    })
}

/// Coherence factor `exp(−σ²/2)` of a Gaussian phase spread.
pub fn coherence_factor(sigma_phi: f64) -> f64 {
    (-0.5 * sigma_phi * sigma_phi).exp()
}

/// Inverse of [`coherence_factor`] for `0 < d ≤ 1`.
pub fn sigma_for_coherence(d: f64) -> Result<f64, SourceError> {
    if !(d > 0.0 && d <= 1.0) {
        return Err(SourceError::InvalidParams(format!(
            "coherence must lie in (0, 1], got {d}"
        )));
    }
    Ok((-2.0 * d.ln()).max(0.0).sqrt())
}

/// Averages the state over a Gaussian spread of the relative phase between
/// the two loop directions.
///
/// The phase rides on the `|VH⟩` component (the counterclockwise output), so
/// every coherence involving `|VH⟩` is scaled by `exp(−σ²/2)` and the
/// populations are untouched. For source states, which only populate
/// `|HV⟩` and `|VH⟩`, this is exactly the damping of the `HV`/`VH`
/// coherence. `σ = ∞` removes the coherence entirely.
pub fn apply_dephasing(state: &BiphotonState, sigma_phi: f64) -> Result<DensityState, SourceError> {
    if sigma_phi.is_nan() || sigma_phi < 0.0 {
        return Err(SourceError::InvalidParams(format!(
            "sigma_phi must be ≥ 0, got {sigma_phi}"
        )));
    }
    let d = coherence_factor(sigma_phi);
    let mut rho = state.to_density().matrix().to_owned();
    let vh = Basis::VH.index();
    for k in 0..4 {
        if k != vh {
            rho[(vh, k)] *= d;
            rho[(k, vh)] *= d;
        }
    }
    Ok(DensityState::from_matrix_unchecked(rho))
}

/// Linear map from collection divergence to phase spread, clipped at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApertureCalibration {
    /// rad per mrad of full divergence
    pub slope: f64,
    /// rad
    pub offset: f64,
}

/// Full divergence assigned to the open-iris measurement (mrad). Not a measured value.
pub const NO_IRIS_DIVERGENCE_MRAD: f64 = 30.0;

impl ApertureCalibration {
    /// Line through two `(divergence_mrad, visibility)` anchors in σ-space.
    pub fn from_anchors(a: (f64, f64), b: (f64, f64)) -> Result<Self, SourceError> {
        if a.0 == b.0 {
            return Err(SourceError::InvalidParams(
                "calibration anchors share a divergence".into(),
            ));
        }
        let sa = sigma_for_coherence(a.1)?;
        let sb = sigma_for_coherence(b.1)?;
        let slope = (sb - sa) / (b.0 - a.0);
        Ok(Self {
            slope,
            offset: sa - slope * a.0,
        })
    }
}

impl Default for ApertureCalibration {
    /// 12.5 mrad → 96.8 % and open iris → 93.0 %.
    fn default() -> Self {
        Self::from_anchors((12.5, 0.968), (NO_IRIS_DIVERGENCE_MRAD, 0.930)).expect("default anchors are valid")
    }
}

pub fn aperture_to_sigma(divergence_mrad: f64, calibration: &ApertureCalibration) -> f64 {
    (calibration.offset + calibration.slope * divergence_mrad).max(0.0)
}

/// Relative collected pair flux versus full divergence.
///
/// The emission cone is taken as Gaussian in angle with 1/e half-width
/// `cone_width_mrad`, so a centered iris of full divergence `x` collects
/// `1 − exp(−(x/w)²)`. Flux is normalized to 1 at `reference_divergence_mrad`,
/// the aperture at which the pair rate was quoted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectionModel {
    pub reference_divergence_mrad: f64,
    pub cone_width_mrad: f64,
}

impl CollectionModel {
    fn collected(&self, divergence_mrad: f64) -> f64 {
        let x = divergence_mrad.max(0.0) / self.cone_width_mrad;
        -(-x * x).exp_m1()
    }

    pub fn relative_flux(&self, divergence_mrad: f64) -> f64 {
        self.collected(divergence_mrad) / self.collected(self.reference_divergence_mrad)
    }

    /// Cone width such that `flux(other) / flux(reference) = ratio`.
    ///
    /// The ratio must lie strictly between 1 and `(other/reference)²`, the
    /// saturated and small-cone limits.
    pub fn from_flux_ratio(reference_mrad: f64, other_mrad: f64, ratio: f64) -> Result<Self, SourceError> {
        let upper = (other_mrad / reference_mrad).powi(2);
        if !(reference_mrad > 0.0 && other_mrad > reference_mrad && ratio > 1.0 && ratio < upper) {
            return Err(SourceError::InvalidParams(format!(
                "flux ratio {ratio} not attainable between {reference_mrad} and {other_mrad} mrad"
            )));
        }
        let ratio_at = |w: f64| {
            Self {
                reference_divergence_mrad: reference_mrad,
                cone_width_mrad: w,
            }
            .relative_flux(other_mrad)
        };
        // ratio_at increases monotonically with w
        let (mut lo, mut hi) = (reference_mrad * 1e-2, reference_mrad * 1e4);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio_at(mid) < ratio {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self {
            reference_divergence_mrad: reference_mrad,
            cone_width_mrad: 0.5 * (lo + hi),
        })
    }
}

impl Default for CollectionModel {
    /// 5 000 pairs/s/mW at 12.5 mrad and 22 750 pairs/s/mW with the iris open.
    fn default() -> Self {
        Self::from_flux_ratio(12.5, NO_IRIS_DIVERGENCE_MRAD, 22_750.0 / 5_000.0)
            .expect("default flux anchors are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarization::{fidelity, TwoPhotonState};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn symmetric() -> SourceParams {
        SourceParams {
            pbs: PbsPump {
                t_h: 0.8,
                leak_h: 0.05,
                r_v: 0.8,
                leak_v: 0.05,
            },
            ..SourceParams::default()
        }
    }

    #[test]
    fn pump_on_axis_stays_h() {
        let p = prepare_pump(1.0, 0.0, 0.0).unwrap();
        assert!((p.e_h().norm() - 1.0).abs() < 1e-15);
        assert!(p.e_v().norm() < 1e-15);
    }

    #[test]
    fn pump_diagonal_is_balanced() {
        let p = prepare_pump(1.0, PI / 8.0, FRAC_PI_4).unwrap();
        // matrix-product oracle: HWP(22.5°) H = (cos 45°, sin 45°); QWP(45°) leaves it on its axis
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let diag = JonesVector::new(c(r, 0.0), c(r, 0.0));
        let q = PolarizationOperator::quarter_wave(FRAC_PI_4).apply(&diag);
        assert!((p.e_h() - q[0]).norm() < 1e-14);
        assert!((p.e_v() - q[1]).norm() < 1e-14);
        assert!((p.e_h().norm_sqr() - 0.5).abs() < 1e-14);
        assert!((p.e_v().norm_sqr() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pump_rejects_nonpositive_power() {
        assert!(prepare_pump(0.0, 0.0, 0.0).is_err());
        assert!(prepare_pump(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn balanced_pump_gives_singlet() {
        let params = symmetric();
        let pump = PumpField::from_components(1.0, 1.0, PI).unwrap();
        let out = sagnac_state(&pump, &params).unwrap();
        assert!((out.beta - 1.0).abs() < 1e-12);
        assert!((out.phi - PI).abs() < 1e-12);
        let singlet = BiphotonState::singlet();
        assert!((fidelity(out.pure_state().unwrap(), &singlet) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path_change_keeps_state() {
        let params = SourceParams::default();
        let pump = prepare_pump(3.28, 0.3, 0.9).unwrap();
        let a = sagnac_state(&pump, &SourceParams { l_a: 0.10, ..params }).unwrap();
        let b = sagnac_state(&pump, &SourceParams { l_a: 0.17, ..params }).unwrap();
        let f = fidelity(a.pure_state().unwrap(), b.pure_state().unwrap());
        assert!((f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_is_gain_ratio() {
        let params = SourceParams {
            eta_h: 0.8 * 0.8f64.sqrt() / 0.73f64.sqrt(),
            eta_v: 1.0,
            ..SourceParams::default()
        };
        let pump = PumpField::from_components(1.0, 1.0, 0.0).unwrap();
        let out = sagnac_state(&pump, &params).unwrap();
        // oracle: (η_H √t_h |e_h|) / (η_V √r_v |e_v|)
        let oracle = params.eta_h * 0.73f64.sqrt() / (params.eta_v * 0.8f64.sqrt());
        assert!((oracle - 0.8).abs() < 1e-12);
        assert!((out.beta - oracle).abs() < 1e-12);
    }

    #[test]
    fn usable_power_at_balance() {
        // balanced: t_h |e_h|² = r_v |e_v|², so usable = 2 t_h r_v / (t_h + r_v) ≈ 0.763
        let params = SourceParams::default();
        let sol = balance_solve(&params, PI).unwrap();
        let pump = prepare_pump(1.0, sol.hwp1_angle, sol.qwp1_angle).unwrap();
        let out = sagnac_state(&pump, &params).unwrap();
        let expected = 2.0 * 0.73 * 0.80 / (0.73 + 0.80);
        assert!((out.usable_pump_mw - expected).abs() < 1e-6);
        assert!((out.usable_pump_mw - 0.76).abs() < 0.01);
    }

    #[test]
    fn no_down_conversion_is_an_error() {
        let params = SourceParams {
            pbs: PbsPump {
                t_h: 0.0,
                ..PbsPump::default()
            },
            ..SourceParams::default()
        };
        let pump = PumpField::from_components(1.0, 0.0, 0.0).unwrap();
        assert_eq!(sagnac_state(&pump, &params).unwrap_err(), SourceError::NoDownConversion);
    }

    #[test]
    fn params_validation() {
        let ok = SourceParams::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SourceParams { eta_v: 0.0, ..ok },
            SourceParams { eta_h: -1.0, ..ok },
            SourceParams {
                pbs: PbsPump {
                    t_h: 0.9,
                    leak_h: 0.2,
                    ..ok.pbs
                },
                ..ok
            },
            SourceParams {
                pbs: PbsPump { r_v: 1.2, ..ok.pbs },
                ..ok
            },
            SourceParams { k_s: f64::NAN, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(SourceError::InvalidParams(_))));
        }
    }

    #[test]
    fn balance_symmetric_round_trip() {
        let params = SourceParams {
            theta_s: 0.3,
            theta_i: -0.1,
            theta_p: 0.5,
            ..symmetric()
        };
        let sol = balance_solve(&params, PI).unwrap();
        let pump = prepare_pump(1.0, sol.hwp1_angle, sol.qwp1_angle).unwrap();
        assert!((pump.e_h().norm() - pump.e_v().norm()).abs() < 1e-6);
        // φ = plate − φ_p = π
        let expect_phi_p = wrap_phase(params.plate_phase() - PI);
        assert!(wrap_phase(pump.relative_phase() - expect_phi_p).abs() < 1e-6);
        let out = sagnac_state(&pump, &params).unwrap();
        assert!((out.beta - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn balance_triplet() {
        let params = SourceParams::default();
        let sol = balance_solve(&params, 0.0).unwrap();
        let out = sagnac_state(&prepare_pump(1.0, sol.hwp1_angle, sol.qwp1_angle).unwrap(), &params).unwrap();
        assert!(out.phi.abs() <= 1e-6);
        assert!((out.beta - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn balance_rejects_dead_direction() {
        let params = SourceParams {
            pbs: PbsPump {
                r_v: 0.0,
                ..PbsPump::default()
            },
            ..SourceParams::default()
        };
        assert!(balance_solve(&params, PI).is_err());
    }

    #[test]
    fn dephasing_zero_is_identity() {
        let psi = sagnac_state(&prepare_pump(1.0, 0.2, 0.4).unwrap(), &SourceParams::default())
            .unwrap()
            .pure_state()
            .copied()
            .unwrap();
        let rho = apply_dephasing(&psi, 0.0).unwrap();
        assert_eq!(rho.matrix(), psi.to_density().matrix());
    }

    #[test]
    fn full_dephasing_is_classical_mixture() {
        let rho = apply_dephasing(&BiphotonState::singlet(), f64::INFINITY).unwrap();
        assert!((rho.joint_probability(FRAC_PI_4, FRAC_PI_4) - 0.25).abs() < 1e-15);
        assert_eq!(rho.element(Basis::HV, Basis::VH), c(0.0, 0.0));
    }

    #[test]
    fn dephased_singlet_closed_form() {
        let d = 0.9685;
        let sigma = sigma_for_coherence(d).unwrap();
        let rho = apply_dephasing(&BiphotonState::singlet(), sigma).unwrap();
        for k in 0..64 {
            let t1 = PI * k as f64 / 64.0;
            let closed = 0.25 * (1.0 - d * (2.0 * t1).sin());
            assert!((rho.joint_probability(t1, FRAC_PI_4) - closed).abs() < 1e-12);
            // H/V basis is unaffected
            let hv_closed = 0.5 * t1.sin().powi(2);
            assert!((rho.joint_probability(t1, 0.0) - hv_closed).abs() < 1e-12);
        }
    }

    #[test]
    fn dephasing_rejects_negative_sigma() {
        assert!(apply_dephasing(&BiphotonState::singlet(), -0.1).is_err());
    }

    #[test]
    fn aperture_anchors() {
        let cal = ApertureCalibration::default();
        let d12 = coherence_factor(aperture_to_sigma(12.5, &cal));
        let dopen = coherence_factor(aperture_to_sigma(NO_IRIS_DIVERGENCE_MRAD, &cal));
        assert!((d12 - 0.968).abs() < 1e-12);
        assert!((dopen - 0.930).abs() < 1e-12);
        let zero = ApertureCalibration {
            slope: 0.01,
            offset: 0.0,
        };
        assert_eq!(aperture_to_sigma(0.0, &zero), 0.0);
        assert_eq!(coherence_factor(aperture_to_sigma(0.0, &zero)), 1.0);
        let neg = ApertureCalibration {
            slope: 0.01,
            offset: -0.5,
        };
        assert_eq!(aperture_to_sigma(10.0, &neg), 0.0);
    }

    #[test]
    fn collection_anchors() {
        let m = CollectionModel::default();
        assert!((m.relative_flux(12.5) - 1.0).abs() < 1e-12);
        assert!((m.relative_flux(NO_IRIS_DIVERGENCE_MRAD) - 4.55).abs() < 1e-9);
        assert!(CollectionModel::from_flux_ratio(12.5, 30.0, 10.0).is_err());
    }

    proptest! {
        #[test]
        fn pump_power_preserved(p in 0.01f64..10.0, h in -7.0f64..7.0, q in -7.0f64..7.0) {
            let pump = prepare_pump(p, h, q).unwrap();
            prop_assert!((pump.power_mw() - p).abs() <= 1e-12 * p.max(1.0));
        }

        #[test]
        fn phi_matches_plate_and_pump_phase(
            e_h in 0.1f64..2.0, e_v in 0.1f64..2.0, phi_p in -PI..PI,
            ts in -3.0f64..3.0, ti in -3.0f64..3.0, tp in -3.0f64..3.0,
            l_a in 0.01f64..1.0, l_b in 0.01f64..1.0,
        ) {
            let params = SourceParams { theta_s: ts, theta_i: ti, theta_p: tp, l_a, l_b, ..SourceParams::default() };
            let pump = PumpField::from_components(e_h, e_v, phi_p).unwrap();
            let out = sagnac_state(&pump, &params).unwrap();
            let expect = ts + ti - tp - phi_p;
            prop_assert!(wrap_phase(out.phi - expect).abs() <= 1e-12);
            prop_assert!(out.beta >= 0.0);
        }

        #[test]
        fn path_lengths_only_change_global_phase(
            l_a in 0.0f64..2.0, l_b in 0.0f64..2.0, h in -3.0f64..3.0, q in -3.0f64..3.0,
        ) {
            let pump = prepare_pump(1.0, h, q).unwrap();
            let base = SourceParams::default();
            let reference = sagnac_state(&pump, &base).unwrap();
            let moved = sagnac_state(&pump, &SourceParams { l_a, l_b, ..base }).unwrap();
            let f = fidelity(reference.pure_state().unwrap(), moved.pure_state().unwrap());
            prop_assert!((f - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn dephasing_keeps_density_invariants(
            a in prop::array::uniform8(-1.0f64..1.0), sigma in 0.0f64..5.0,
        ) {
            let psi = BiphotonState::new([c(a[0], a[1]), c(a[2], a[3]), c(a[4], a[5]), c(a[6], a[7])]);
            prop_assume!(psi.is_ok());
            let psi = psi.unwrap();
            let rho = apply_dephasing(&psi, sigma).unwrap();
            let m = rho.matrix();
            prop_assert!((rho.trace() - c(1.0, 0.0)).norm() <= 1e-14);
            prop_assert!((m - m.adjoint()).iter().all(|z| z.norm() <= 1e-14));
            let pure = psi.to_density();
            for k in 0..4 {
                prop_assert_eq!(m[(k, k)], pure.matrix()[(k, k)]);
            }
            prop_assert!(rho.min_eigenvalue() >= -1e-10);
            prop_assert!(DensityState::from_matrix(*m).is_ok());
        }

        #[test]
        fn sigma_monotone_in_divergence(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let cal = ApertureCalibration::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(aperture_to_sigma(lo, &cal) <= aperture_to_sigma(hi, &cal));
        }
    }
}
