//! Fringe fitting, visibility, CHSH correlations and brightness normalization.

use std::f64::consts::{FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::detection::{subtract_accidentals, ChshRun, ChshSetting, CountRecord, FringeScan, Outcome};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("total coincidence count is zero")]
    ZeroTotal,
    #[error("scan has {distinct} distinct analyzer angles (mod π); at least {needed} are required")]
    Underdetermined { distinct: usize, needed: usize },
    #[error("fit did not converge after {iterations} iterations (gradient norm {gradient:e})")]
    NoConvergence { iterations: usize, gradient: f64 },
}

/// `(C_max − C_min) / (C_max + C_min)`.
pub fn visibility(c_max: f64, c_min: f64) -> Result<f64, AnalysisError> {
    if !(c_max.is_finite() && c_min.is_finite()) {
        return Err(AnalysisError::InvalidInput("non-finite count".into()));
    }
    let total = c_max + c_min;
    if total == 0.0 {
        return Err(AnalysisError::ZeroTotal);
    }
    if c_min < 0.0 || c_max < c_min {
        return Err(AnalysisError::InvalidInput(format!(
            "need c_max ≥ c_min ≥ 0, got c_max = {c_max}, c_min = {c_min}"
        )));
    }
    Ok((c_max - c_min) / total)
}

/// One fringe sample: accidental-corrected counts and their variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringePoint {
    /// rad
    pub theta1: f64,
    pub corrected: f64,
    /// Poisson variance estimate, taken from the raw counts.
    pub raw: f64,
}

impl FringePoint {
    pub fn from_record(rec: &CountRecord) -> Self {
        Self {
            theta1: rec.theta1,
            corrected: subtract_accidentals(rec),
            raw: rec.coincidences_raw as f64,
        }
    }

    fn weight(&self) -> f64 {
        1.0 / self.raw.max(1.0)
    }
}

/// Fitted `C(θ1) = c0 · [1 + V cos 2(θ1 − phase_offset)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub c0: f64,
    pub visibility: f64,
    /// rad, in `[0, π)`
    pub phase_offset: f64,
    pub sigma_c0: f64,
    pub sigma_v: f64,
    pub sigma_phase: f64,
    pub chi2: f64,
    pub chi2_per_dof: f64,
    /// data − model
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Set when the phase is not determined by the data (flat fringe).
    pub phase_degenerate: bool,
    /// Visibility from the raw data extrema, for comparison.
    pub extrema_visibility: Option<f64>,
}

impl FitResult {
    pub fn model(&self, theta1: f64) -> f64 {
        fringe_model(self.c0, self.visibility, self.phase_offset, theta1)
    }
}

pub fn fringe_model(c0: f64, v: f64, phase: f64, theta1: f64) -> f64 {
    c0 * (1.0 + v * (2.0 * (theta1 - phase)).cos())
}

/// Holds parameters fixed during a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub fixed_visibility: Option<f64>,
    pub fixed_phase: Option<f64>,
    pub max_iterations: usize,
    /// On the gradient of ½χ² with each parameter scaled by its starting-point
    /// standard error `1/√(JᵀWJ)_jj`.
    pub gradient_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            fixed_visibility: None,
            fixed_phase: None,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
        }
    }
}

const PHASE_GRID: usize = 16;
/// Phase uncertainty above which the offset is reported as undetermined.
pub const PHASE_DEGENERATE_SIGMA: f64 = FRAC_PI_4;

pub fn fit_fringe(scan: &FringeScan) -> Result<FitResult, AnalysisError> {
    let points: Vec<FringePoint> = scan.points().iter().map(FringePoint::from_record).collect();
    fit_points(&points, &FitOptions::default())
}

fn distinct_angles(points: &[FringePoint]) -> usize {
    let mut reduced: Vec<f64> = points.iter().map(|p| p.theta1.rem_euclid(PI)).collect();
    reduced.sort_by(f64::total_cmp);
    let mut n = 0;
    let mut last = f64::NEG_INFINITY;
    for t in reduced {
        if t - last > 1e-9 {
            n += 1;
            last = t;
        }
    }
    // 0 and π−ε are the same setting
    if n > 1 && points.iter().any(|p| p.theta1.rem_euclid(PI) < 1e-9) && last > PI - 1e-9 {
        n -= 1;
    }
    n
}

struct Problem<'a> {
    points: &'a [FringePoint],
    free: [bool; 3],
}

impl Problem<'_> {
    fn chi2(&self, p: &[f64; 3]) -> f64 {
        self.points
            .iter()
            .map(|pt| {
                let r = pt.corrected - fringe_model(p[0], p[1], p[2], pt.theta1);
                pt.weight() * r * r
            })
            .sum()
    }

    /// Full 3-column Jacobian of the model.
    fn jacobian_row(p: &[f64; 3], theta1: f64) -> [f64; 3] {
        let arg = 2.0 * (theta1 - p[2]);
        let (s, c) = arg.sin_cos();
        [1.0 + p[1] * c, p[0] * c, 2.0 * p[0] * p[1] * s]
    }

    /// `(JᵀWJ, JᵀW r)` over the free parameters, in scaled coordinates.
    fn normal_equations(&self, p: &[f64; 3], scale: &[f64; 3]) -> (DMatrix<f64>, DVector<f64>) {
        let idx: Vec<usize> = (0..3).filter(|&j| self.free[j]).collect();
        let n = idx.len();
        let mut a = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for pt in self.points {
            let row = Self::jacobian_row(p, pt.theta1);
            let r = pt.corrected - fringe_model(p[0], p[1], p[2], pt.theta1);
            let w = pt.weight();
            for (a_i, &i) in idx.iter().enumerate() {
                let ji = row[i] * scale[i];
                g[a_i] += w * ji * r;
                for (b_i, &k) in idx.iter().enumerate() {
                    a[(a_i, b_i)] += w * ji * row[k] * scale[k];
                }
            }
        }
        (a, g)
    }
}

fn fold(p: &mut [f64; 3], v_free: bool) {
    if v_free {
        if p[1] < 0.0 {
            p[1] = -p[1];
            p[2] += PI / 2.0;
        }
        p[1] = p[1].min(1.0);
    }
    p[2] = p[2].rem_euclid(PI);
}

/// Weighted least-squares fit of the two-photon fringe model.
///
/// Weights are `1/max(raw_i, 1)`. The starting point takes `c0` and `V` from
/// the data extrema and the best of 16 trial phases; a Levenberg–Marquardt
/// damped Gauss–Newton iteration then refines the free parameters, with `V`
/// kept in `[0, 1]`. Uncertainties are the square roots of the diagonal of
/// `(JᵀWJ)⁻¹`, the inverse curvature of ½χ² at the optimum.
pub fn fit_points(points: &[FringePoint], opts: &FitOptions) -> Result<FitResult, AnalysisError> {
    if points
        .iter()
        .any(|p| !(p.theta1.is_finite() && p.corrected.is_finite() && p.raw.is_finite()))
    {
        return Err(AnalysisError::InvalidInput("non-finite data".into()));
    }
    let free = [true, opts.fixed_visibility.is_none(), opts.fixed_phase.is_none()];
    let n_free = free.iter().filter(|&&f| f).count();
    let needed = n_free + 1;
    let distinct = distinct_angles(points);
    if distinct < needed.max(2) || points.len() <= n_free {
        return Err(AnalysisError::Underdetermined { distinct, needed });
    }
    if let Some(v) = opts.fixed_visibility {
        if !(0.0..=1.0).contains(&v) {
            return Err(AnalysisError::InvalidInput(format!(
                "fixed visibility {v} outside [0, 1]"
            )));
        }
    }

    let problem = Problem { points, free };

    // starting point
    let (mut c_max, mut c_min) = (f64::NEG_INFINITY, f64::INFINITY);
    for p in points {
        c_max = c_max.max(p.corrected);
        c_min = c_min.min(p.corrected);
    }
    let mean = points.iter().map(|p| p.corrected).sum::<f64>() / points.len() as f64;
    let extrema_visibility = visibility(c_max, c_min.max(0.0)).ok();
    let mut p = [0.5 * (c_max + c_min), extrema_visibility.unwrap_or(0.0), 0.0];
    if p[0] <= 0.0 {
        p[0] = mean;
    }
    if let Some(v) = opts.fixed_visibility {
        p[1] = v;
    }
    if let Some(ph) = opts.fixed_phase {
        p[2] = ph;
    } else {
        let mut best = f64::INFINITY;
        for k in 0..PHASE_GRID {
            let trial = [p[0], p[1], PI * k as f64 / PHASE_GRID as f64];
            let chi = problem.chi2(&trial);
            if chi < best {
                best = chi;
                p[2] = trial[2];
            }
        }
    }

    // Jacobi scaling: each parameter measured in units of its initial standard error
    let (a0, _) = problem.normal_equations(&p, &[1.0; 3]);
    let mut scale = [1.0; 3];
    for (i, j) in (0..3).filter(|&j| free[j]).enumerate() {
        if a0[(i, i)] > 0.0 && a0[(i, i)].is_finite() {
            scale[j] = 1.0 / a0[(i, i)].sqrt();
        }
    }
    let mut chi2 = problem.chi2(&p);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let (a_full, g_full) = problem.normal_equations(&p, &scale);
        let idx_full: Vec<usize> = (0..3).filter(|&j| free[j]).collect();
        // V on its upper bound and pushed outward is held there for this step
        let keep: Vec<usize> = (0..idx_full.len())
            .filter(|&i| !(idx_full[i] == 1 && p[1] >= 1.0 && g_full[i] > 0.0))
            .collect();
        let idx: Vec<usize> = keep.iter().map(|&i| idx_full[i]).collect();
        let a = DMatrix::from_fn(keep.len(), keep.len(), |r, c| a_full[(keep[r], keep[c])]);
        let g = DVector::from_fn(keep.len(), |r, _| g_full[keep[r]]);
        grad_norm = g.norm();
        if grad_norm <= opts.gradient_tolerance {
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(AnalysisError::NoConvergence {
                iterations,
                gradient: grad_norm,
            });
        }
        iterations += 1;

        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&g) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p;
            for (s_i, &j) in idx.iter().enumerate() {
                trial[j] += step[s_i] * scale[j];
            }
            fold(&mut trial, free[1]);
            let chi_trial = problem.chi2(&trial);
            // near the optimum χ² changes fall below its rounding error
            if chi_trial <= chi2 + 1e-13 * (1.0 + chi2) {
                let stalled = chi_trial == chi2 && trial == p;
                p = trial;
                chi2 = chi_trial;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !stalled;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no representable descent step left: the gradient is at rounding level
            let rounding = 1e-12 * (1.0 + chi2);
            if grad_norm <= rounding.max(opts.gradient_tolerance) {
                break;
            }
            return Err(AnalysisError::NoConvergence {
                iterations,
                gradient: grad_norm,
            });
        }
    }

    // covariance from the unscaled curvature
    let unit = [1.0; 3];
    let (curv, _) = problem.normal_equations(&p, &unit);
    let idx: Vec<usize> = (0..3).filter(|&j| free[j]).collect();
    let mut sigma = [0.0; 3];
    let mut phase_degenerate = false;
    match curv.clone().try_inverse() {
        Some(cov) if (0..idx.len()).all(|i| cov[(i, i)].is_finite() && cov[(i, i)] >= 0.0) => {
            for (i, &j) in idx.iter().enumerate() {
                sigma[j] = cov[(i, i)].sqrt();
            }
        }
        _ => {
            // phase unidentifiable (V = 0): invert without it
            let keep: Vec<usize> = (0..idx.len()).filter(|&i| idx[i] != 2).collect();
            let sub = DMatrix::from_fn(keep.len(), keep.len(), |r, c| curv[(keep[r], keep[c])]);
            if let Some(cov) = sub.try_inverse() {
                for (r, &i) in keep.iter().enumerate() {
                    sigma[idx[i]] = cov[(r, r)].max(0.0).sqrt();
                }
            }
            if free[2] {
                sigma[2] = f64::INFINITY;
            }
            phase_degenerate = true;
        }
    }
    if free[2] && sigma[2] > PHASE_DEGENERATE_SIGMA {
        phase_degenerate = true;
    }

    let residuals = points
        .iter()
        .map(|pt| pt.corrected - fringe_model(p[0], p[1], p[2], pt.theta1))
        .collect();
    let dof = (points.len() - n_free) as f64;
    Ok(FitResult {
        c0: p[0],
        visibility: p[1],
        phase_offset: p[2],
        sigma_c0: sigma[0],
        sigma_v: sigma[1],
        sigma_phase: sigma[2],
        chi2,
        chi2_per_dof: chi2 / dof,
        residuals,
        iterations,
        phase_degenerate,
        extrema_visibility,
    })
}

/// A correlation value with its 1σ uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub e: f64,
    pub sigma: f64,
}

/// `E = (C++ − C+− − C−+ + C−−) / ΣC`, with Poisson variance `var_k = C_k`.
pub fn chsh_e(counts: [f64; 4]) -> Result<Correlation, AnalysisError> {
    chsh_e_with_variances(counts, counts)
}

/// Like [`chsh_e`], with separately supplied count variances.
///
/// `σ_E² = Σ_k (∂E/∂C_k)² var_k` with `∂E/∂C_k = (s_k − E)/ΣC`, `s_k = ±1`.
pub fn chsh_e_with_variances(counts: [f64; 4], variances: [f64; 4]) -> Result<Correlation, AnalysisError> {
    if counts.iter().chain(&variances).any(|c| !c.is_finite()) {
        return Err(AnalysisError::InvalidInput("non-finite count".into()));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(AnalysisError::ZeroTotal);
    }
    let parity = Outcome::ALL.map(Outcome::parity);
    let e = counts.iter().zip(&parity).map(|(c, s)| c * s).sum::<f64>() / total;
    let var = parity
        .iter()
        .zip(&variances)
        .map(|(s, v)| {
            let d = (s - e) / total;
            d * d * v.max(0.0)
        })
        .sum::<f64>();
    Ok(Correlation { e, sigma: var.sqrt() })
}

/// How accidental subtraction enters the count variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccidentalVariance {
    /// Raw-count variance plus the singles-propagated variance of the estimate.
    Included,
    /// Raw-count variance only.
    Excluded,
}

/// Correlation from the four labeled measurements of one setting.
pub fn correlation_from_setting(setting: &ChshSetting, mode: AccidentalVariance) -> Result<Correlation, AnalysisError> {
    let counts = setting.records.map(|r| subtract_accidentals(&r));
    let variances = setting.records.map(|r| {
        let raw = r.coincidences_raw as f64;
        match mode {
            AccidentalVariance::Included => raw + r.accidental_variance(),
            AccidentalVariance::Excluded => raw,
        }
    });
    chsh_e_with_variances(counts, variances)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChshResult {
    pub e_values: [Correlation; 4],
    pub s: f64,
    pub sigma_s: f64,
}

impl ChshResult {
    /// Standard deviations above the local-realist bound of 2.
    pub fn significance(&self) -> f64 {
        (self.s - 2.0) / self.sigma_s
    }
}

/// `S = |E₁ + E₂ + E₃ − E₄|`, `σ_S = √Σσ²`.
pub fn chsh_s(e: &[Correlation; 4]) -> ChshResult {
    let s = (e[0].e + e[1].e + e[2].e - e[3].e).abs();
    let sigma_s = e.iter().map(|c| c.sigma * c.sigma).sum::<f64>().sqrt();
    ChshResult {
        e_values: *e,
        s,
        sigma_s,
    }
}

/// CHSH analysis of a 16-measurement run under both variance conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChshAnalysis {
    /// Accidental-estimate variance included; the reported result.
    pub result: ChshResult,
    /// Raw-count variance only.
    pub sigma_s_raw_only: f64,
}

pub fn analyze_chsh(run: &ChshRun) -> Result<ChshAnalysis, AnalysisError> {
    let mut incl = [Correlation { e: 0.0, sigma: 0.0 }; 4];
    let mut excl = incl;
    for (i, setting) in run.settings.iter().enumerate() {
        incl[i] = correlation_from_setting(setting, AccidentalVariance::Included)?;
        excl[i] = correlation_from_setting(setting, AccidentalVariance::Excluded)?;
    }
    Ok(ChshAnalysis {
        result: chsh_s(&incl),
        sigma_s_raw_only: chsh_s(&excl).sigma_s,
    })
}

/// Detected pairs per second per mW of pump per nm of bandwidth.
pub fn brightness(pairs_detected: f64, duration: f64, pump_mw: f64, bandwidth_nm: f64) -> Result<f64, AnalysisError> {
    for (name, v) in [
        ("duration", duration),
        ("pump_mw", pump_mw),
        ("bandwidth_nm", bandwidth_nm),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(AnalysisError::InvalidInput(format!("{name} must be > 0, got {v}")));
        }
    }
    if !pairs_detected.is_finite() {
        return Err(AnalysisError::InvalidInput("non-finite pair count".into()));
    }
    Ok(pairs_detected / (duration * pump_mw * bandwidth_nm))
}
