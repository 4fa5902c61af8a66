//! Synthetic LPPLS series with known parameters, decorated with white or AR(1) noise.
//!
//! Every random draw goes through [`stream_rng`]: a ChaCha8 generator seeded
//! from a master seed and switched to a per-example stream, so example `i`
//! is the same whether a dataset is generated serially, in parallel, or in part.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LpplsError, Result};
use crate::model::{
    min_max_scale, reconstruct, uniform_grid, Affine, LinearParams, LpplsParams, NonlinearParams, Series,
    MIN_SERIES_LEN,
};

/// Length of the P-LNN input window.
pub const WINDOW_LEN: usize = 252;

/// Critical time, in grid steps (days) after the last observation.
pub const TC_DAYS_RANGE: (f64, f64) = (0.0, 50.0);
pub const M_RANGE: (f64, f64) = (0.1, 0.9);
pub const OMEGA_RANGE: (f64, f64) = (6.0, 13.0);
pub const WHITE_AMPLITUDE_RANGE: (f64, f64) = (0.01, 0.15);
pub const AR1_AMPLITUDE_RANGE: (f64, f64) = (0.01, 0.05);
pub const AR1_PHI: f64 = 0.9;

// Linear coefficients of generated curves, before min-max scaling.
const A_RANGE: (f64, f64) = (0.5, 1.0);
const B_MAGNITUDE_RANGE: (f64, f64) = (0.1, 0.6);
const C_OVER_B_RANGE: (f64, f64) = (0.02, 0.3);
/// Smallest accepted `|B|` after scaling to `[0, 1]`.
pub const MIN_SCALED_B: f64 = 0.05;
const MAX_LINEAR_DRAWS: usize = 100;

/// Deterministic generator for stream `stream` of master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Ar1,
    Both,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Ar1, NoiseKind::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Ar1 => "ar1",
            NoiseKind::Both => "both",
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = LpplsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "white" => Ok(NoiseKind::White),
            "ar1" => Ok(NoiseKind::Ar1),
            "both" => Ok(NoiseKind::Both),
            other => Err(LpplsError::config("", format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Concrete noise applied to one series. Amplitudes are fractions of the unit value range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// White noise standard deviation (unused for `Ar1`).
    pub white_amplitude: f64,
    /// AR(1) innovation standard deviation (unused for `White`).
    pub ar1_amplitude: f64,
    pub phi: f64,
}

impl NoiseSpec {
    pub fn white(alpha: f64) -> Self {
        Self {
            kind: NoiseKind::White,
            white_amplitude: alpha,
            ar1_amplitude: 0.0,
            phi: AR1_PHI,
        }
    }

    pub fn ar1(sigma: f64, phi: f64) -> Self {
        Self {
            kind: NoiseKind::Ar1,
            white_amplitude: 0.0,
            ar1_amplitude: sigma,
            phi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.white_amplitude >= 0.0) {
            return Err(LpplsError::config("/white_amplitude", "must be >= 0"));
        }
        if !(self.ar1_amplitude >= 0.0) {
            return Err(LpplsError::config("/ar1_amplitude", "must be >= 0"));
        }
        if !(self.phi.abs() < 1.0) {
            return Err(LpplsError::config("/phi", "|phi| < 1 is required for stationarity"));
        }
        Ok(())
    }

    /// Stationary variance `sigma^2 / (1 - phi^2)` of the AR(1) component.
    pub fn ar1_stationary_variance(&self) -> f64 {
        ar1_stationary_variance(self.ar1_amplitude, self.phi)
    }
}

pub fn ar1_stationary_variance(sigma: f64, phi: f64) -> f64 {
    sigma * sigma / (1.0 - phi * phi)
}

/// i.i.d. `N(0, alpha^2)` draws.
pub fn white_noise(n: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| alpha * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// AR(1) path `eta_t = phi eta_{t-1} + eps_t`, `eps_t ~ N(0, sigma^2)`, started
/// from its stationary distribution.
pub fn ar1_noise(n: usize, sigma: f64, phi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let z: f64 = rng.sample(StandardNormal);
    let mut eta = ar1_stationary_variance(sigma, phi).sqrt() * z;
    out.push(eta);
    for _ in 1..n {
        let z: f64 = rng.sample(StandardNormal);
        eta = phi * eta + sigma * z;
        out.push(eta);
    }
    out
}

/// Add `noise` in the series' normalized units and min-max scale the result
/// again. The value map is composed so raw units are preserved.
pub fn add_noise(series: &Series, noise: &[f64]) -> Result<Series> {
    if noise.len() != series.len() {
        return Err(LpplsError::ShapeMismatch(format!(
            "{} noise samples for a series of {}",
            noise.len(),
            series.len()
        )));
    }
    let noisy: Vec<f64> = series.values().iter().zip(noise).map(|(v, e)| v + e).collect();
    let (values, rescale) = min_max_scale(&noisy)?;
    series.with_values(values, series.value_map.compose(&rescale))
}

pub fn add_white(series: &Series, alpha: f64, rng: &mut impl Rng) -> Result<Series> {
    if !(alpha >= 0.0) {
        return Err(LpplsError::config("/white_amplitude", "must be >= 0"));
    }
    add_noise(series, &white_noise(series.len(), alpha, rng))
}

pub fn add_ar1(series: &Series, sigma: f64, phi: f64, rng: &mut impl Rng) -> Result<Series> {
    NoiseSpec::ar1(sigma, phi).validate()?;
    add_noise(series, &ar1_noise(series.len(), sigma, phi, rng))
}

/// Apply a concrete noise spec. `Both` superimposes a white and an AR(1) path.
pub fn apply_noise(series: &Series, spec: &NoiseSpec, rng: &mut impl Rng) -> Result<Series> {
    spec.validate()?;
    match spec.kind {
        NoiseKind::White => add_white(series, spec.white_amplitude, rng),
        NoiseKind::Ar1 => add_ar1(series, spec.ar1_amplitude, spec.phi, rng),
        NoiseKind::Both => {
            let w = white_noise(series.len(), spec.white_amplitude, rng);
            let a = ar1_noise(series.len(), spec.ar1_amplitude, spec.phi, rng);
            let sum: Vec<f64> = w.iter().zip(&a).map(|(x, y)| x + y).collect();
            add_noise(series, &sum)
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Critical time on the normalized axis of an `n`-point daily grid.
pub fn tc_from_days(days_after_end: f64, n: usize) -> f64 {
    1.0 + days_after_end / (n - 1) as f64
}

/// Clean, min-max scaled LPPLS series for the given nonlinear parameters on a
/// uniform `n`-point grid, with random linear coefficients. Returns the series
/// and the ground truth in its normalized frame.
pub fn gen_clean(nl: NonlinearParams, rng: &mut impl Rng, n: usize) -> Result<(Series, LpplsParams)> {
    if n < MIN_SERIES_LEN {
        return Err(LpplsError::InvalidSeries(format!(
            "series needs at least {MIN_SERIES_LEN} points, got {n}"
        )));
    }
    if !(nl.tc > 1.0) || !(nl.m > 0.0) || !nl.omega.is_finite() {
        return Err(LpplsError::Domain(format!(
            "nonlinear parameters {nl:?} outside the generator domain"
        )));
    }
    let times = uniform_grid(n);
    let time_map = Affine::new((n - 1) as f64, 0.0);
    for _ in 0..MAX_LINEAR_DRAWS {
        let b = -uniform(rng, B_MAGNITUDE_RANGE);
        let c = uniform(rng, C_OVER_B_RANGE) * b.abs();
        let phase = uniform(rng, (0.0, std::f64::consts::TAU));
        let raw_linear = LinearParams {
            a: uniform(rng, A_RANGE),
            b,
            c1: c * phase.cos(),
            c2: c * phase.sin(),
        };
        let raw = reconstruct(&LpplsParams::from_parts(nl, raw_linear), &times)?;
        let (values, value_map) = match min_max_scale(&raw) {
            Ok(v) => v,
            Err(LpplsError::DegenerateRange) => continue,
            Err(e) => return Err(e),
        };
        let linear = raw_linear.through(&value_map.inverse());
        if linear.b.abs() < MIN_SCALED_B {
            continue;
        }
        let series = Series::new(times, values, time_map, value_map)?;
        return Ok((series, LpplsParams::from_parts(nl, linear)));
    }
    Err(LpplsError::DegenerateRange)
}

/// Ranges from which scenarios and training examples are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub n: usize,
    /// Critical time in grid steps after the last observation, drawn from `(lo, hi]`.
    pub tc_days: (f64, f64),
    pub m: (f64, f64),
    pub omega: (f64, f64),
    pub noise_kind: NoiseKind,
    pub white_amplitude: (f64, f64),
    pub ar1_amplitude: (f64, f64),
    pub phi: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n: WINDOW_LEN,
            tc_days: TC_DAYS_RANGE,
            m: M_RANGE,
            omega: OMEGA_RANGE,
            noise_kind: NoiseKind::White,
            white_amplitude: WHITE_AMPLITUDE_RANGE,
            ar1_amplitude: AR1_AMPLITUDE_RANGE,
            phi: AR1_PHI,
            seed: 0,
        }
    }
}

fn check_range(path: &str, r: (f64, f64), outer: (f64, f64)) -> Result<()> {
    if !(r.0 <= r.1) || r.0 < outer.0 || r.1 > outer.1 {
        return Err(LpplsError::config(
            path,
            format!("range {r:?} must be ordered and inside {outer:?}"),
        ));
    }
    Ok(())
}

impl ScenarioSpec {
    pub fn with_kind(kind: NoiseKind) -> Self {
        Self {
            noise_kind: kind,
            ..Self::default()
        }
    }

    /// Noise-free scenarios, used to probe identifiability.
    pub fn noiseless() -> Self {
        Self {
            white_amplitude: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_SERIES_LEN {
            return Err(LpplsError::config("/n", format!("must be >= {MIN_SERIES_LEN}")));
        }
        check_range("/tc_days", self.tc_days, TC_DAYS_RANGE)?;
        check_range("/m", self.m, M_RANGE)?;
        check_range("/omega", self.omega, OMEGA_RANGE)?;
        // zero noise is allowed; the upper ends are capped at the training ranges
        check_range("/white_amplitude", self.white_amplitude, (0.0, WHITE_AMPLITUDE_RANGE.1))?;
        check_range("/ar1_amplitude", self.ar1_amplitude, (0.0, AR1_AMPLITUDE_RANGE.1))?;
        if !(self.phi.abs() < 1.0) {
            return Err(LpplsError::config("/phi", "|phi| < 1 is required"));
        }
        Ok(())
    }

    /// Normalized critical-time range implied by `tc_days`.
    pub fn tc_range(&self) -> (f64, f64) {
        (
            tc_from_days(self.tc_days.0, self.n),
            tc_from_days(self.tc_days.1, self.n),
        )
    }

    /// Draw `(tc, m, omega)`; `tc` lies in `(tc_lo, tc_hi]` on the normalized axis.
    pub fn draw_labels(&self, rng: &mut impl Rng) -> NonlinearParams {
        let (lo, hi) = self.tc_days;
        let days = hi - (hi - lo) * rng.random::<f64>();
        NonlinearParams::new(
            tc_from_days(days, self.n),
            uniform(rng, self.m),
            uniform(rng, self.omega),
        )
    }

    /// Draw a concrete noise configuration; `Both` picks white or AR(1) with probability 1/2.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> NoiseSpec {
        let kind = match self.noise_kind {
            NoiseKind::Both => {
                if rng.random::<bool>() {
                    NoiseKind::White
                } else {
                    NoiseKind::Ar1
                }
            }
            k => k,
        };
        match kind {
            NoiseKind::White => NoiseSpec::white(uniform(rng, self.white_amplitude)),
            _ => NoiseSpec::ar1(uniform(rng, self.ar1_amplitude), self.phi),
        }
    }

    /// Scenario `index` of this spec; depends only on `(seed, index)`.
    pub fn scenario(&self, index: u64) -> Result<Scenario> {
        let mut rng = stream_rng(self.seed, index);
        let labels = self.draw_labels(&mut rng);
        let noise = self.draw_noise(&mut rng);
        let (clean, truth) = gen_clean(labels, &mut rng, self.n)?;
        let noisy = apply_noise(&clean, &noise, &mut rng)?;
        Ok(Scenario {
            index,
            truth,
            noise,
            clean,
            noisy,
        })
    }
}

/// One synthetic series with its ground truth.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub index: u64,
    /// Ground truth in the frame of `clean`.
    pub truth: LpplsParams,
    pub noise: NoiseSpec,
    pub clean: Series,
    pub noisy: Series,
}

impl Scenario {
    /// The clean curve expressed in the normalized frame of `noisy`.
    pub fn clean_in_noisy_frame(&self) -> Vec<f64> {
        let to_noisy = self.noisy.value_map.inverse().compose(&self.clean.value_map);
        self.clean.values().iter().map(|&v| to_noisy.apply(v)).collect()
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub spec: ScenarioSpec,
    pub seed: u64,
    pub count: usize,
    pub n: usize,
}

/// Labelled examples: `count` rows of `n` features and `(tc, m, omega)` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    /// Row-major, `count * n`.
    pub features: Vec<f32>,
    /// Row-major, `count * 3`, normalized frame.
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn width(&self) -> usize {
        self.header.n
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.header.n;
        &self.features[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> [f64; 3] {
        [self.labels[3 * i], self.labels[3 * i + 1], self.labels[3 * i + 2]]
    }
}

/// Generate `count` labelled examples from `spec`.
pub fn gen_dataset(spec: &ScenarioSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let rows: Vec<(Vec<f32>, [f64; 3])> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = spec.scenario(i)?;
            let features = s.noisy.values().iter().map(|&v| v as f32).collect();
            Ok((features, s.truth.nonlinear().to_array()))
        })
        .collect::<Result<_>>()?;
    let mut features = Vec::with_capacity(count * spec.n);
    let mut labels = Vec::with_capacity(count * 3);
    for (f, l) in rows {
        features.extend(f);
        labels.extend(l);
    }
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            spec: spec.clone(),
            seed: spec.seed,
            count,
            n: spec.n,
        },
        features,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::solve_linear;

    #[test]
    fn clean_series_spans_unit_interval() {
        let mut rng = stream_rng(1, 0);
        let nl = NonlinearParams::new(tc_from_days(25.0, 252), 0.5, 9.0);
        let (s, truth) = gen_clean(nl, &mut rng, 252).unwrap();
        assert_eq!(s.len(), 252);
        let lo = s.values().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_eq!(truth.nonlinear(), nl);
        assert!((s.time_map.apply(truth.tc) - (251.0 + 25.0)).abs() < 1e-9);
    }

    #[test]
    fn clean_truth_roundtrips_through_linear_solve() {
        for seed in 0..20 {
            let spec = ScenarioSpec {
                seed,
                ..ScenarioSpec::noiseless()
            };
            let sc = spec.scenario(0).unwrap();
            let t = sc.truth;
            let lin = solve_linear(&sc.clean, t.tc, t.m, t.omega).unwrap();
            for (a, b) in lin.to_array().iter().zip(t.linear().to_array()) {
                assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
            }
            assert!(t.b.abs() >= MIN_SCALED_B);
        }
    }

    #[test]
    fn zero_amplitude_white_noise_is_identity() {
        let sc = ScenarioSpec::noiseless().scenario(3).unwrap();
        let mut rng = stream_rng(9, 9);
        let out = add_white(&sc.clean, 0.0, &mut rng).unwrap();
        assert_eq!(out.values(), sc.clean.values());
    }

    #[test]
    fn white_noise_std() {
        let mut rng = stream_rng(5, 0);
        let eta = white_noise(100_000, 0.05, &mut rng);
        let mean = eta.iter().sum::<f64>() / eta.len() as f64;
        let var = eta.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (eta.len() - 1) as f64;
        assert!((var.sqrt() / 0.05 - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn ar1_with_zero_phi_is_white() {
        let w = white_noise(300, 0.07, &mut stream_rng(11, 4));
        let a = ar1_noise(300, 0.07, 0.0, &mut stream_rng(11, 4));
        assert_eq!(w, a);
    }

    #[test]
    fn ar1_rejects_nonstationary_phi() {
        let sc = ScenarioSpec::noiseless().scenario(0).unwrap();
        assert!(add_ar1(&sc.clean, 0.1, 1.0, &mut stream_rng(0, 0)).is_err());
        assert!(add_ar1(&sc.clean, 0.1, -1.2, &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn fixed_seed_reproduces() {
        let spec = ScenarioSpec::with_kind(NoiseKind::Both);
        let a = spec.scenario(17).unwrap();
        let b = spec.scenario(17).unwrap();
        assert_eq!(a.noisy, b.noisy);
        let c = spec.scenario(18).unwrap();
        assert_ne!(a.noisy, c.noisy);
    }

    #[test]
    fn noise_is_additive_before_rescaling() {
        let spec = ScenarioSpec::with_kind(NoiseKind::White);
        let sc = spec.scenario(2).unwrap();
        // replay the draws that produced the noise
        let mut rng = stream_rng(spec.seed, 2);
        let _ = spec.draw_labels(&mut rng);
        let noise = spec.draw_noise(&mut rng);
        let _ = gen_clean(sc.truth.nonlinear(), &mut rng, spec.n).unwrap();
        let eta = white_noise(spec.n, noise.white_amplitude, &mut rng);
        // undo the final rescaling and subtract the clean curve
        let back = sc.clean.value_map.inverse().compose(&sc.noisy.value_map);
        for ((y, c), e) in sc.noisy.values().iter().zip(sc.clean.values()).zip(&eta) {
            assert!((back.apply(*y) - c - e).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_curve_maps_into_noisy_frame() {
        let sc = ScenarioSpec::with_kind(NoiseKind::White).scenario(0).unwrap();
        let mapped = sc.clean_in_noisy_frame();
        let raw_a: Vec<f64> = mapped.iter().map(|&v| sc.noisy.value_map.apply(v)).collect();
        for (a, b) in raw_a.iter().zip(sc.clean.raw_values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset() {
        let d = gen_dataset(&ScenarioSpec::default(), 0).unwrap();
        assert!(d.is_empty());
        assert!(d.features.is_empty() && d.labels.is_empty());
    }

    #[test]
    fn spec_validation_paths() {
        let spec = ScenarioSpec {
            m: (0.05, 0.9),
            ..ScenarioSpec::default()
        };
        match spec.validate() {
            Err(LpplsError::InvalidConfig { path, .. }) => assert_eq!(path, "/m"),
            other => panic!("{other:?}"),
        }
        let unstable = ScenarioSpec {
            phi: 1.0,
            ..ScenarioSpec::default()
        };
        assert!(unstable.validate().is_err());
    }

    #[test]
    fn both_mixes_kinds() {
        let spec = ScenarioSpec::with_kind(NoiseKind::Both);
        let mut white = 0;
        for i in 0..400 {
            let mut rng = stream_rng(spec.seed, i);
            let _ = spec.draw_labels(&mut rng);
            if spec.draw_noise(&mut rng).kind == NoiseKind::White {
                white += 1;
            }
        }
        // Binomial(400, 1/2): 5 standard deviations is 50
        assert!((white as i64 - 200).abs() < 50, "{white}");
    }
}
