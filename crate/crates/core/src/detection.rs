//! Count-rate model and Poisson sampling of singles and coincidences.
//!
//! Rates are computed from Born-rule probabilities; counts are drawn as
//! independent Poisson variates per setting. Each setting owns a random stream
//! keyed by `(seed, tag, index)`, so settings can be simulated in any order or
//! in parallel with identical results.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::polarization::{PairState, TwoPhotonState};
use crate::source::{SourceOutput, SourceParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
    #[error("invalid scan: {0}")]
    InvalidScan(String),
}

/// Fraction of analyzed pairs seen at the peak of a maximally entangled fringe.
///
/// The quoted pair rate is a peak coincidence rate through both analyzers, so
/// the pair rate reaching the analyzers is the quoted rate divided by this.
pub const PEAK_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    pub det_eff_1: f64,
    pub det_eff_2: f64,
    /// Uncorrelated singles per arm (counts/s): dark counts plus unpaired photons.
    pub dark_rate_1: f64,
    pub dark_rate_2: f64,
    /// s
    pub coincidence_window: f64,
    /// s per setting
    pub integration_time: f64,
    pub pump_power_mw: f64,
    pub rng_seed: u64,
}

/// Default uncorrelated singles rate. Reconstructed so that each arm sees
/// about 1e5 singles/s at the default pump power; not a measured value.
pub const DEFAULT_BACKGROUND_RATE: f64 = 83_600.0;

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            det_eff_1: 1.0,
            det_eff_2: 1.0,
            dark_rate_1: DEFAULT_BACKGROUND_RATE,
            dark_rate_2: DEFAULT_BACKGROUND_RATE,
            coincidence_window: 1e-9,
            integration_time: 40.0,
            pump_power_mw: 3.28,
            rng_seed: 1,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DetectionError> {
        let bad = |m: String| Err(DetectionError::InvalidConfig(m));
        for (name, e) in [("det_eff_1", self.det_eff_1), ("det_eff_2", self.det_eff_2)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} must lie in [0, 1], got {e}"));
            }
        }
        for (name, r) in [("dark_rate_1", self.dark_rate_1), ("dark_rate_2", self.dark_rate_2)] {
            if !(r.is_finite() && r >= 0.0) {
                return bad(format!("{name} must be ≥ 0, got {r}"));
            }
        }
        for (name, v) in [
            ("coincidence_window", self.coincidence_window),
            ("integration_time", self.integration_time),
            ("pump_power_mw", self.pump_power_mw),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// A state together with the rate at which its pairs reach the analyzers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSource {
    pub state: PairState,
    /// pairs/s
    pub pair_rate: f64,
}

impl PairSource {
    /// Pair rate `pair_rate_per_mw · P / PEAK_FRACTION` for the configured pump power.
    pub fn new(output: &SourceOutput, params: &SourceParams, cfg: &DetectionConfig) -> Self {
        Self {
            state: output.state,
            pair_rate: params.pair_rate_per_mw * cfg.pump_power_mw / PEAK_FRACTION,
        }
    }

    pub fn with_rate(state: PairState, pair_rate: f64) -> Self {
        Self { state, pair_rate }
    }
}

/// Expected rates (counts/s) at one analyzer setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub singles_1: f64,
    pub singles_2: f64,
    /// True coincidences only; accidentals are added at sampling time.
    pub coincidence: f64,
}

pub fn expected_rates(source: &PairSource, theta1: f64, theta2: f64, cfg: &DetectionConfig) -> Rates {
    let r = source.pair_rate;
    let st = &source.state;
    Rates {
        singles_1: r * st.signal_marginal(theta1) * cfg.det_eff_1 + cfg.dark_rate_1,
        singles_2: r * st.idler_marginal(theta2) * cfg.det_eff_2 + cfg.dark_rate_2,
        coincidence: r * st.joint_probability(theta1, theta2) * cfg.det_eff_1 * cfg.det_eff_2,
    }
}

/// Rate of uncorrelated clicks falling in the same window: `r1 · r2 · τ`.
pub fn accidental_rate(r1: f64, r2: f64, window: f64) -> f64 {
    r1 * r2 * window
}

/// Sampled counts at one analyzer setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountRecord {
    pub theta1: f64,
    pub theta2: f64,
    pub singles_1: u64,
    pub singles_2: u64,
    pub coincidences_raw: u64,
    /// Accidental counts inferred from the measured singles.
    pub accidental_estimate: f64,
    /// s
    pub duration: f64,
    /// s
    pub window: f64,
}

impl CountRecord {
    /// Variance of [`CountRecord::accidental_estimate`], propagated from the
    /// Poisson variances of both singles counts.
    pub fn accidental_variance(&self) -> f64 {
        let k = self.window / self.duration;
        let s1 = self.singles_1 as f64;
        let s2 = self.singles_2 as f64;
        k * k * (s2 * s2 * s1 + s1 * s1 * s2)
    }
}

/// Independent random stream for one setting.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 finalizer to decorrelate (seed, tag)
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(index);
    rng
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    // new() only fails for non-positive or astronomically large means
    let draw: f64 = Poisson::new(mean).expect("finite positive mean").sample(rng);
    draw as u64
}

/// Draws singles and raw coincidences (true + accidental) over `duration`.
pub fn sample_counts<R: Rng + ?Sized>(
    rates: &Rates,
    theta1: f64,
    theta2: f64,
    duration: f64,
    window: f64,
    rng: &mut R,
) -> CountRecord {
    let singles_1 = poisson(rates.singles_1 * duration, rng);
    let singles_2 = poisson(rates.singles_2 * duration, rng);
    let acc = accidental_rate(rates.singles_1, rates.singles_2, window);
    let coincidences_raw = poisson((rates.coincidence + acc) * duration, rng);
    let accidental_estimate =
        accidental_rate(singles_1 as f64 / duration, singles_2 as f64 / duration, window) * duration;
    CountRecord {
        theta1,
        theta2,
        singles_1,
        singles_2,
        coincidences_raw,
        accidental_estimate,
        duration,
        window,
    }
}

/// Raw coincidences minus the accidental estimate. May be negative.
pub fn subtract_accidentals(rec: &CountRecord) -> f64 {
    rec.coincidences_raw as f64 - rec.accidental_estimate
}

/// Coincidence counts versus signal analyzer angle at a fixed idler angle.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeScan {
    theta2: f64,
    points: Vec<CountRecord>,
}

pub const MIN_FRINGE_POINTS: usize = 8;

fn check_grid(theta1: &[f64]) -> Result<(), DetectionError> {
    if theta1.len() < MIN_FRINGE_POINTS {
        return Err(DetectionError::InvalidScan(format!(
            "need at least {MIN_FRINGE_POINTS} points, got {}",
            theta1.len()
        )));
    }
    if theta1.iter().any(|t| !t.is_finite()) {
        return Err(DetectionError::InvalidScan("non-finite angle".into()));
    }
    if let Some(w) = theta1.windows(2).position(|w| w[1] <= w[0]) {
        return Err(DetectionError::InvalidScan(format!(
            "theta1 grid not strictly increasing at index {}",
            w + 1
        )));
    }
    Ok(())
}

impl FringeScan {
    pub fn new(theta2: f64, points: Vec<CountRecord>) -> Result<Self, DetectionError> {
        let grid: Vec<f64> = points.iter().map(|p| p.theta1).collect();
        check_grid(&grid)?;
        Ok(Self { theta2, points })
    }

    pub fn theta2(&self) -> f64 {
        self.theta2
    }

    pub fn points(&self) -> &[CountRecord] {
        &self.points
    }
}

const FRINGE_TAG: u64 = 0x4652_494E_4745; // "FRINGE"
const CHSH_TAG: u64 = 0x4348_5348; // "CHSH"

/// Random-stream tag of a fringe scan at `theta2`.
pub fn fringe_tag(theta2: f64) -> u64 {
    FRINGE_TAG ^ theta2.to_bits()
}

/// Fringe scan at idler angle `theta2`. Point `k` uses stream `(seed, fringe_tag(θ2), k)`.
pub fn run_fringe(
    source: &PairSource,
    theta2: f64,
    theta1_grid: &[f64],
    cfg: &DetectionConfig,
) -> Result<FringeScan, DetectionError> {
    run_fringe_tagged(source, theta2, theta1_grid, cfg, fringe_tag(theta2))
}

/// [`run_fringe`] with an explicit stream tag.
pub fn run_fringe_tagged(
    source: &PairSource,
    theta2: f64,
    theta1_grid: &[f64],
    cfg: &DetectionConfig,
    tag: u64,
) -> Result<FringeScan, DetectionError> {
    cfg.validate()?;
    check_grid(theta1_grid)?;
    let points = theta1_grid
        .iter()
        .enumerate()
        .map(|(k, &t1)| {
            let rates = expected_rates(source, t1, theta2, cfg);
            let mut rng = stream_rng(cfg.rng_seed, tag, k as u64);
            sample_counts(
                &rates,
                t1,
                theta2,
                cfg.integration_time,
                cfg.coincidence_window,
                &mut rng,
            )
        })
        .collect();
    Ok(FringeScan { theta2, points })
}

/// Outcome label for one of the four coincidence combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    PlusPlus,
    PlusMinus,
    MinusPlus,
    MinusMinus,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::PlusPlus,
        Outcome::PlusMinus,
        Outcome::MinusPlus,
        Outcome::MinusMinus,
    ];

    /// Analyzer angles for this outcome at base setting `(θ1, θ2)`.
    pub fn angles(self, theta1: f64, theta2: f64) -> (f64, f64) {
        match self {
            Outcome::PlusPlus => (theta1, theta2),
            Outcome::PlusMinus => (theta1, theta2 + FRAC_PI_2),
            Outcome::MinusPlus => (theta1 + FRAC_PI_2, theta2),
            Outcome::MinusMinus => (theta1 + FRAC_PI_2, theta2 + FRAC_PI_2),
        }
    }

    /// +1 for parallel-parallel and perpendicular-perpendicular, −1 otherwise.
    pub fn parity(self) -> f64 {
        match self {
            Outcome::PlusPlus | Outcome::MinusMinus => 1.0,
            Outcome::PlusMinus | Outcome::MinusPlus => -1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::PlusPlus => "++",
            Outcome::PlusMinus => "+-",
            Outcome::MinusPlus => "-+",
            Outcome::MinusMinus => "--",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Outcome::ALL.into_iter().find(|o| o.label() == s)
    }
}

/// `(θ1, θ2)` pairs of the four correlation terms, in summation order:
/// the first three enter with `+`, the last with `−`.
pub const DEFAULT_CHSH_ANGLES: [(f64, f64); 4] = [
    (0.0, 7.0 * PI / 8.0),
    (-FRAC_PI_4, 7.0 * PI / 8.0),
    (-FRAC_PI_4, 5.0 * PI / 8.0),
    (0.0, 5.0 * PI / 8.0),
];

/// The four coincidence measurements behind one correlation value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChshSetting {
    pub theta1: f64,
    pub theta2: f64,
    /// Indexed like [`Outcome::ALL`].
    pub records: [CountRecord; 4],
}

impl ChshSetting {
    pub fn record(&self, o: Outcome) -> &CountRecord {
        &self.records[o as usize]
    }
}

/// All 16 measurements of a CHSH run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChshRun {
    pub settings: [ChshSetting; 4],
}

impl ChshRun {
    /// `(setting index, outcome, record)` for all 16 measurements.
    pub fn labeled(&self) -> impl Iterator<Item = (usize, Outcome, &CountRecord)> {
        self.settings.iter().enumerate().flat_map(|(i, s)| {
            Outcome::ALL
                .into_iter()
                .zip(s.records.iter())
                .map(move |(o, r)| (i, o, r))
        })
    }
}

/// Measures all four outcome combinations at each of the four settings.
/// Measurement `4·i + outcome` uses its own random stream.
pub fn run_chsh(
    source: &PairSource,
    cfg: &DetectionConfig,
    angle_set: &[(f64, f64); 4],
) -> Result<ChshRun, DetectionError> {
    cfg.validate()?;
    if angle_set.iter().any(|(a, b)| !(a.is_finite() && b.is_finite())) {
        return Err(DetectionError::InvalidScan("non-finite CHSH angle".into()));
    }
    let settings = std::array::from_fn(|i| {
        let (theta1, theta2) = angle_set[i];
        let records = std::array::from_fn(|k| {
            let (t1, t2) = Outcome::ALL[k].angles(theta1, theta2);
            let rates = expected_rates(source, t1, t2, cfg);
            let mut rng = stream_rng(cfg.rng_seed, CHSH_TAG, (4 * i + k) as u64);
            sample_counts(&rates, t1, t2, cfg.integration_time, cfg.coincidence_window, &mut rng)
        });
        ChshSetting {
            theta1,
            theta2,
            records,
        }
    });
    Ok(ChshRun { settings })
}
