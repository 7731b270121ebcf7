//! Jones calculus for single photons and Born-rule probabilities for photon pairs.
//!
//! Every operator is a 2×2 complex matrix in the `{H, V}` basis. Two-photon
//! states live in the product basis ordered `(HH, HV, VH, VV)`, signal first,
//! idler second. A retarder with retardance `Γ` whose fast axis sits at `θ`
//! from horizontal is
//!
//! ```text
//! W(Γ, θ) = R(θ) · diag(1, e^{iΓ}) · R(−θ),    R(θ) = [[cos θ, −sin θ], [sin θ, cos θ]]
//! ```
//!
//! Any consistent sign convention gives identical probabilities; this one is
//! used everywhere in the crate. Angles are radians.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;
use thiserror::Error;

/// Smallest state norm accepted by normalization.
pub const MIN_NORM: f64 = 1e-9;

const DENSITY_TOL: f64 = 1e-12;
const EIGEN_TOL: f64 = 1e-10;

/// A single-photon polarization (Jones) vector, `(H, V)`.
pub type JonesVector = Vector2<Complex64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolarizationError {
    #[error("non-finite amplitude or matrix entry")]
    NonFinite,
    #[error("state norm {norm:e} is below the minimum {MIN_NORM:e}")]
    ZeroNorm { norm: f64 },
    #[error("density matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),
    #[error("density matrix trace is {0}, expected 1")]
    BadTrace(f64),
    #[error("density matrix has negative eigenvalue {0:e}")]
    NotPositive(f64),
}

/// Reduce an angle to `(−π, π]`.
pub fn wrap_phase(phase: f64) -> f64 {
    let mut p = phase.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    // rem_euclid can return exactly 2π for tiny negative inputs
    if p <= -PI {
        p += 2.0 * PI;
    }
    p
}

fn rotation(angle: f64) -> Matrix2<Complex64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(
        Complex64::new(c, 0.0),
        Complex64::new(-s, 0.0),
        Complex64::new(s, 0.0),
        Complex64::new(c, 0.0),
    )
}

/// A linear operator acting on one photon's polarization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationOperator {
    m: Matrix2<Complex64>,
}

impl PolarizationOperator {
    pub fn from_matrix(m: Matrix2<Complex64>) -> Result<Self, PolarizationError> {
        if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            Ok(Self { m })
        } else {
            Err(PolarizationError::NonFinite)
        }
    }

    pub fn identity() -> Self {
        Self { m: Matrix2::identity() }
    }

    /// General linear retarder.
    pub fn waveplate(retardance: f64, axis_angle: f64) -> Self {
        let core = Matrix2::new(
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::from_polar(1.0, retardance),
        );
        Self {
            m: rotation(axis_angle) * core * rotation(-axis_angle),
        }
    }

    pub fn half_wave(axis_angle: f64) -> Self {
        Self::waveplate(PI, axis_angle)
    }

    pub fn quarter_wave(axis_angle: f64) -> Self {
        Self::waveplate(PI / 2.0, axis_angle)
    }

    /// Rank-1 projector onto linear polarization at `angle` from H.
    pub fn projector(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            m: Matrix2::new(
                Complex64::new(c * c, 0.0),
                Complex64::new(c * s, 0.0),
                Complex64::new(s * c, 0.0),
                Complex64::new(s * s, 0.0),
            ),
        }
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.m
    }

    pub fn adjoint(&self) -> Self {
        Self { m: self.m.adjoint() }
    }

    pub fn apply(&self, v: &JonesVector) -> JonesVector {
        self.m * v
    }

    /// Tensor product `self ⊗ other` in the `(HH, HV, VH, VV)` basis.
    pub fn kron(&self, other: &Self) -> Matrix4<Complex64> {
        let mut out = Matrix4::zeros();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        out[(2 * i + k, 2 * j + l)] = self.m[(i, j)] * other.m[(k, l)];
                    }
                }
            }
        }
        out
    }

    /// Largest entry of `|U†U − I|`.
    pub fn unitarity_defect(&self) -> f64 {
        (self.m.adjoint() * self.m - Matrix2::identity()).max_abs()
    }
}

impl Mul for PolarizationOperator {
    type Output = PolarizationOperator;

    fn mul(self, rhs: Self) -> Self {
        Self { m: self.m * rhs.m }
    }
}

/// Largest entry modulus of a complex matrix.
pub(crate) trait MaxAbs {
    fn max_abs(&self) -> f64;
}

impl<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<Complex64, R, C>> MaxAbs
    for nalgebra::Matrix<Complex64, R, C, S>
{
    fn max_abs(&self) -> f64 {
        self.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Product-basis label, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    HH = 0,
    HV = 1,
    VH = 2,
    VV = 3,
}

impl Basis {
    pub const ALL: [Basis; 4] = [Basis::HH, Basis::HV, Basis::VH, Basis::VV];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Basis::HH => "HH",
            Basis::HV => "HV",
            Basis::VH => "VH",
            Basis::VV => "VV",
        };
        f.write_str(s)
    }
}

/// Anything that yields Born-rule probabilities for a pair of linear analyzers.
pub trait TwoPhotonState {
    fn density_matrix(&self) -> Matrix4<Complex64>;

    /// Probability that the signal passes a polarizer at `theta1` and the idler
    /// one at `theta2`.
    fn joint_probability(&self, theta1: f64, theta2: f64) -> f64;

    /// Probability that the signal alone passes a polarizer at `theta1`.
    fn signal_marginal(&self, theta1: f64) -> f64 {
        let op = PolarizationOperator::projector(theta1).kron(&PolarizationOperator::identity());
        (op * self.density_matrix()).trace().re.clamp(0.0, 1.0)
    }

    /// Probability that the idler alone passes a polarizer at `theta2`.
    fn idler_marginal(&self, theta2: f64) -> f64 {
        let op = PolarizationOperator::identity().kron(&PolarizationOperator::projector(theta2));
        (op * self.density_matrix()).trace().re.clamp(0.0, 1.0)
    }
}

/// Free-function form of [`TwoPhotonState::joint_probability`].
pub fn joint_probability<S: TwoPhotonState + ?Sized>(state: &S, theta1: f64, theta2: f64) -> f64 {
    state.joint_probability(theta1, theta2)
}

/// A normalized pure two-photon polarization state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiphotonState {
    amp: Vector4<Complex64>,
}

impl BiphotonState {
    /// Normalizes `amps` (ordered HH, HV, VH, VV). Rejects norms below [`MIN_NORM`].
    pub fn new(amps: [Complex64; 4]) -> Result<Self, PolarizationError> {
        if amps.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(PolarizationError::NonFinite);
        }
        let v = Vector4::from(amps);
        let norm = v.norm();
        if norm < MIN_NORM {
            return Err(PolarizationError::ZeroNorm { norm });
        }
        Ok(Self { amp: v.unscale(norm) })
    }

    /// `a|HV⟩ + b|VH⟩`, normalized.
    pub fn from_hv_vh(a: Complex64, b: Complex64) -> Result<Self, PolarizationError> {
        let zero = Complex64::new(0.0, 0.0);
        Self::new([zero, a, b, zero])
    }

    /// `(|HV⟩ − |VH⟩)/√2`.
    pub fn singlet() -> Self {
        Self::from_hv_vh(Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)).expect("singlet is normalizable")
    }

    pub fn product(signal: &JonesVector, idler: &JonesVector) -> Result<Self, PolarizationError> {
        Self::new([
            signal[0] * idler[0],
            signal[0] * idler[1],
            signal[1] * idler[0],
            signal[1] * idler[1],
        ])
    }

    pub fn amplitudes(&self) -> &Vector4<Complex64> {
        &self.amp
    }

    pub fn amplitude(&self, b: Basis) -> Complex64 {
        self.amp[b.index()]
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &BiphotonState) -> Complex64 {
        self.amp.dotc(&other.amp)
    }

    pub fn with_global_phase(&self, phase: f64) -> Self {
        Self {
            amp: self.amp * Complex64::from_polar(1.0, phase),
        }
    }

    pub fn to_density(&self) -> DensityState {
        DensityState {
            rho: self.amp * self.amp.adjoint(),
        }
    }

    /// Applies `signal_op ⊗ idler_op` and renormalizes.
    pub fn apply_local(
        &self,
        signal_op: &PolarizationOperator,
        idler_op: &PolarizationOperator,
    ) -> Result<Self, PolarizationError> {
        let v = signal_op.kron(idler_op) * self.amp;
        Self::new([v[0], v[1], v[2], v[3]])
    }
}

impl TwoPhotonState for BiphotonState {
    fn density_matrix(&self) -> Matrix4<Complex64> {
        self.amp * self.amp.adjoint()
    }

    fn joint_probability(&self, theta1: f64, theta2: f64) -> f64 {
        let (s1, c1) = theta1.sin_cos();
        let (s2, c2) = theta2.sin_cos();
        let a = &self.amp;
        let overlap = a[0] * (c1 * c2) + a[1] * (c1 * s2) + a[2] * (s1 * c2) + a[3] * (s1 * s2);
        overlap.norm_sqr().clamp(0.0, 1.0)
    }
}

/// `|⟨a|b⟩|²` for normalized pure states.
pub fn fidelity(a: &BiphotonState, b: &BiphotonState) -> f64 {
    a.inner(b).norm_sqr().clamp(0.0, 1.0)
}

/// A mixed two-photon polarization state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityState {
    rho: Matrix4<Complex64>,
}

impl DensityState {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn from_matrix(rho: Matrix4<Complex64>) -> Result<Self, PolarizationError> {
        if rho.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(PolarizationError::NonFinite);
        }
        let herm = (rho - rho.adjoint()).max_abs();
        if herm > DENSITY_TOL {
            return Err(PolarizationError::NotHermitian(herm));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > DENSITY_TOL || tr.im.abs() > DENSITY_TOL {
            return Err(PolarizationError::BadTrace(tr.re));
        }
        let state = Self { rho };
        let min_eig = state.min_eigenvalue();
        if min_eig < -EIGEN_TOL {
            return Err(PolarizationError::NotPositive(min_eig));
        }
        Ok(state)
    }

    /// Convex mixture `Σ w_k |ψ_k⟩⟨ψ_k|`; weights are renormalized.
    pub fn mixture(parts: &[(f64, BiphotonState)]) -> Result<Self, PolarizationError> {
        let total: f64 = parts.iter().map(|(w, _)| *w).sum();
        if !total.is_finite() || total <= 0.0 || parts.iter().any(|(w, _)| *w < 0.0) {
            return Err(PolarizationError::BadTrace(total));
        }
        let mut rho = Matrix4::zeros();
        for (w, psi) in parts {
            rho += psi.density_matrix() * Complex64::new(w / total, 0.0);
        }
        Self::from_matrix(rho)
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.rho
    }

    pub fn element(&self, row: Basis, col: Basis) -> Complex64 {
        self.rho[(row.index(), col.index())]
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    pub fn eigenvalues(&self) -> Vector4<f64> {
        self.rho.symmetric_eigenvalues()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn purity(&self) -> f64 {
        (self.rho * self.rho).trace().re
    }

    pub(crate) fn from_matrix_unchecked(rho: Matrix4<Complex64>) -> Self {
        Self { rho }
    }
}

impl From<&BiphotonState> for DensityState {
    fn from(psi: &BiphotonState) -> Self {
        psi.to_density()
    }
}

impl TwoPhotonState for DensityState {
    fn density_matrix(&self) -> Matrix4<Complex64> {
        self.rho
    }

    fn joint_probability(&self, theta1: f64, theta2: f64) -> f64 {
        let op = PolarizationOperator::projector(theta1).kron(&PolarizationOperator::projector(theta2));
        (op * self.rho).trace().re.clamp(0.0, 1.0)
    }
}

/// Either kind of state, for APIs that accept both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairState {
    Pure(BiphotonState),
    Mixed(DensityState),
}

impl PairState {
    pub fn to_density(&self) -> DensityState {
        match self {
            PairState::Pure(p) => p.to_density(),
            PairState::Mixed(m) => *m,
        }
    }
}

impl TwoPhotonState for PairState {
    fn density_matrix(&self) -> Matrix4<Complex64> {
        match self {
            PairState::Pure(p) => p.density_matrix(),
            PairState::Mixed(m) => m.density_matrix(),
        }
    }

    fn joint_probability(&self, theta1: f64, theta2: f64) -> f64 {
        match self {
            PairState::Pure(p) => p.joint_probability(theta1, theta2),
            PairState::Mixed(m) => m.joint_probability(theta1, theta2),
        }
    }
}

impl From<BiphotonState> for PairState {
    fn from(p: BiphotonState) -> Self {
        PairState::Pure(p)
    }
}

impl From<DensityState> for PairState {
    fn from(m: DensityState) -> Self {
        PairState::Mixed(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn h() -> JonesVector {
        JonesVector::new(c(1.0, 0.0), c(0.0, 0.0))
    }

    #[test]
    fn hwp_on_axis_flips_v() {
        let m = PolarizationOperator::waveplate(PI, 0.0);
        let expect = Matrix2::new(c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0));
        assert!((m.matrix() - expect).max_abs() < 1e-15);
    }

    #[test]
    fn hwp_at_45_swaps_h_and_v() {
        let out = PolarizationOperator::waveplate(PI, FRAC_PI_4).apply(&h());
        assert!(out[0].norm() < 1e-15);
        assert!((out[1] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn qwp_at_45_makes_circular() {
        let out = PolarizationOperator::waveplate(FRAC_PI_2, FRAC_PI_4).apply(&h());
        // direct product R(π/4)·diag(1, i)·R(−π/4)·(1, 0)
        let r = FRAC_1_SQRT_2;
        let rot_back = (c(r, 0.0), c(-r, 0.0));
        let after_core = (rot_back.0, rot_back.1 * c(0.0, 1.0));
        let oracle = (
            c(r, 0.0) * after_core.0 + c(-r, 0.0) * after_core.1,
            c(r, 0.0) * after_core.0 + c(r, 0.0) * after_core.1,
        );
        assert!((out[0] - oracle.0).norm() < 1e-15);
        assert!((out[1] - oracle.1).norm() < 1e-15);
        assert!((out[0].norm() - r).abs() < 1e-15);
        assert!((out[1].norm() - r).abs() < 1e-15);
        // circular: quarter-period phase between components
        let rel = wrap_phase(out[1].arg() - out[0].arg()).abs();
        assert!((rel - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn projector_values() {
        let p0 = PolarizationOperator::projector(0.0);
        assert!((p0.matrix() - Matrix2::new(c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0))).max_abs() < 1e-15);
        let p90 = PolarizationOperator::projector(FRAC_PI_2);
        assert!((p90.matrix() - Matrix2::new(c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0))).max_abs() < 1e-15);
        let p45 = PolarizationOperator::projector(FRAC_PI_4);
        let v = [FRAC_PI_4.cos(), FRAC_PI_4.sin()];
        for i in 0..2 {
            for j in 0..2 {
                assert!((p45.matrix()[(i, j)].re - v[i] * v[j]).abs() < 1e-15);
                assert!((p45.matrix()[(i, j)].re - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn singlet_probabilities() {
        let s = BiphotonState::singlet();
        assert!(s.joint_probability(0.0, 0.0).abs() < 1e-15);
        assert!((s.joint_probability(FRAC_PI_2, 0.0) - 0.5).abs() < 1e-15);
        // four-term amplitude expansion: (c1 s2 − s1 c2)/√2
        for &(t1, t2) in &[(0.3, 1.1), (-0.7, 2.0), (1.5, 0.2)] {
            let (s1, c1) = f64::sin_cos(t1);
            let (s2, c2) = f64::sin_cos(t2);
            let amp = (c1 * s2 - s1 * c2) * FRAC_1_SQRT_2;
            assert!((s.joint_probability(t1, t2) - amp * amp).abs() < 1e-15);
        }
    }

    #[test]
    fn unbalanced_state_has_analytic_zero() {
        let beta = 2.0;
        let psi = BiphotonState::from_hv_vh(c(1.0, 0.0), Complex64::from_polar(beta, PI)).unwrap();
        let t1 = (0.5f64).atan();
        assert!(psi.joint_probability(t1, FRAC_PI_4) < 1e-30);
    }

    #[test]
    fn fidelity_cases() {
        let psi = BiphotonState::singlet();
        assert!((fidelity(&psi, &psi) - 1.0).abs() < 1e-15);
        assert!((fidelity(&psi, &psi.with_global_phase(0.7)) - 1.0).abs() < 1e-15);
        let hv = BiphotonState::from_hv_vh(c(1.0, 0.0), c(0.0, 0.0)).unwrap();
        let vh = BiphotonState::from_hv_vh(c(0.0, 0.0), c(1.0, 0.0)).unwrap();
        assert_eq!(fidelity(&hv, &vh), 0.0);
    }

    #[test]
    fn rejects_tiny_norm() {
        let z = c(1e-10, 0.0);
        let err = BiphotonState::new([z, z, z, z]).unwrap_err();
        assert!(matches!(err, PolarizationError::ZeroNorm { .. }));
        assert_eq!(
            BiphotonState::new([c(f64::NAN, 0.0), z, z, z]).unwrap_err(),
            PolarizationError::NonFinite
        );
    }

    #[test]
    fn density_validation() {
        let mut m = BiphotonState::singlet().density_matrix();
        assert!(DensityState::from_matrix(m).is_ok());
        m[(0, 0)] += c(0.1, 0.0);
        assert!(matches!(
            DensityState::from_matrix(m),
            Err(PolarizationError::BadTrace(_))
        ));
        let mut m = BiphotonState::singlet().density_matrix();
        m[(0, 1)] = c(0.3, 0.0);
        assert!(matches!(
            DensityState::from_matrix(m),
            Err(PolarizationError::NotHermitian(_))
        ));
        // Hermitian, unit trace, but indefinite
        let mut m = Matrix4::zeros();
        m[(0, 0)] = c(1.5, 0.0);
        m[(1, 1)] = c(-0.5, 0.0);
        assert!(matches!(
            DensityState::from_matrix(m),
            Err(PolarizationError::NotPositive(_))
        ));
    }

    #[test]
    fn wrap_phase_range() {
        assert_eq!(wrap_phase(PI), PI);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-15);
        assert!((wrap_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(0.5 - 4.0 * PI) - 0.5).abs() < 1e-12);
    }

    fn arb_state() -> impl Strategy<Value = BiphotonState> {
        prop::array::uniform8(-1.0f64..1.0).prop_filter_map("norm", |x| {
            BiphotonState::new([c(x[0], x[1]), c(x[2], x[3]), c(x[4], x[5]), c(x[6], x[7])]).ok()
        })
    }

    proptest! {
        #[test]
        fn waveplates_are_unitary(gamma in -10.0f64..10.0, theta in -10.0f64..10.0) {
            prop_assert!(PolarizationOperator::waveplate(gamma, theta).unitarity_defect() <= 1e-12);
        }

        #[test]
        fn compositions_stay_unitary(plates in prop::collection::vec((-7.0f64..7.0, -7.0f64..7.0), 1..12)) {
            let u = plates
                .iter()
                .fold(PolarizationOperator::identity(), |acc, &(g, t)| acc * PolarizationOperator::waveplate(g, t));
            prop_assert!(u.unitarity_defect() <= 1e-10);
        }

        #[test]
        fn projectors_are_hermitian_idempotent(theta in -10.0f64..10.0) {
            let p = PolarizationOperator::projector(theta);
            let m = p.matrix();
            prop_assert!((m * m - m).max_abs() <= 1e-12);
            prop_assert!((m - m.adjoint()).max_abs() <= 1e-12);
            let q = PolarizationOperator::projector(theta + FRAC_PI_2);
            prop_assert!((m + q.matrix() - Matrix2::identity()).max_abs() <= 1e-12);
        }

        #[test]
        fn four_outcomes_sum_to_one(psi in arb_state(), t1 in -4.0f64..4.0, t2 in -4.0f64..4.0) {
            let rho = psi.to_density();
            for state in [PairState::Pure(psi), PairState::Mixed(rho)] {
                let total: f64 = [(t1, t2), (t1 + FRAC_PI_2, t2), (t1, t2 + FRAC_PI_2), (t1 + FRAC_PI_2, t2 + FRAC_PI_2)]
                    .iter()
                    .map(|&(a, b)| state.joint_probability(a, b))
                    .sum();
                prop_assert!((total - 1.0).abs() <= 1e-10);
            }
        }

        #[test]
        fn pure_and_density_routes_agree(psi in arb_state(), t1 in -4.0f64..4.0, t2 in -4.0f64..4.0) {
            let rho = psi.to_density();
            prop_assert!((psi.joint_probability(t1, t2) - rho.joint_probability(t1, t2)).abs() <= 1e-12);
        }

        #[test]
        fn two_term_fringe_has_full_contrast(
            mix in 0.0f64..1.0,
            sign in prop::sample::select(vec![1.0f64, -1.0]),
            t2 in 0.05f64..(FRAC_PI_2 - 0.05),
        ) {
            let a = Complex64::new(mix.sqrt(), 0.0);
            let b = Complex64::new((1.0 - mix).sqrt() * sign, 0.0);
            let psi = BiphotonState::from_hv_vh(a, b).unwrap();
            let n = 20_000;
            let min = (0..n)
                .map(|k| psi.joint_probability(PI * k as f64 / n as f64, t2))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(min <= 1e-6, "min {}", min);
        }
    }
}
