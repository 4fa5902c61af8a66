//! Synthetic comparison of the calibrators: per-scenario absolute errors,
//! their empirical CDFs, pairwise dominance and wall-clock statistics.
//!
//! A failed fit scores `+inf` on every metric, so failures can only push a
//! method's CDF down.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationResult, Method};
use crate::error::{LpplsError, Result};
use crate::lm::{lm_fit, LmConfig};
use crate::mlnn::{mlnn_fit, MlnnConfig};
use crate::model::reconstruct;
use crate::noise::{NoiseKind, Scenario, ScenarioSpec};
use crate::plnn::{plnn_infer, PlnnModel};
use crate::svg::{render_grid, Line, Panel, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Tc,
    M,
    Omega,
    Mse,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Tc, Metric::M, Metric::Omega, Metric::Mse];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Tc => "tc",
            Metric::M => "m",
            Metric::Omega => "omega",
            Metric::Mse => "mse",
        }
    }

    fn axis_label(self) -> &'static str {
        match self {
            Metric::Tc => "|Δtc|",
            Metric::M => "|Δm|",
            Metric::Omega => "|Δω|",
            Metric::Mse => "MSE vs clean curve",
        }
    }
}

/// One method on one scenario. Parameter errors are absolute, in the
/// normalized frame of the labels (`tc` in window lengths).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub scenario: u64,
    pub regime: NoiseKind,
    pub method: Method,
    pub tc_error: f64,
    pub m_error: f64,
    pub omega_error: f64,
    pub mse: f64,
    /// Seconds.
    pub wall_clock: f64,
    pub converged: bool,
}

impl ErrorRecord {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Tc => self.tc_error,
            Metric::M => self.m_error,
            Metric::Omega => self.omega_error,
            Metric::Mse => self.mse,
        }
    }

    /// Score one calibration outcome against the scenario's ground truth.
    pub fn score(
        sc: &Scenario,
        regime: NoiseKind,
        method: Method,
        outcome: &Result<CalibrationResult>,
        wall_clock: f64,
    ) -> Self {
        let failed = Self {
            scenario: sc.index,
            regime,
            method,
            tc_error: f64::INFINITY,
            m_error: f64::INFINITY,
            omega_error: f64::INFINITY,
            mse: f64::INFINITY,
            wall_clock,
            converged: false,
        };
        let Ok(r) = outcome else { return failed };
        let clean = sc.clean_in_noisy_frame();
        let Ok(fit) = reconstruct(&r.params, sc.noisy.times()) else {
            return failed;
        };
        let mse = fit.iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / clean.len() as f64;
        let finite = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
        Self {
            tc_error: finite((r.params.tc - sc.truth.tc).abs()),
            m_error: finite((r.params.m - sc.truth.m).abs()),
            omega_error: finite((r.params.omega - sc.truth.omega).abs()),
            mse: finite(mse),
            converged: r.converged,
            ..failed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub scenarios_per_regime: usize,
    pub regimes: Vec<NoiseKind>,
    pub methods: Vec<Method>,
    /// Series length; P-LNN methods need 252.
    pub n: usize,
    pub seed: u64,
    pub lm: LmConfig,
    pub mlnn: MlnnConfig,
    /// Run scenarios one at a time so timings are not disturbed by sibling work.
    pub serial_timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenarios_per_regime: 100,
            regimes: NoiseKind::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            n: crate::noise::WINDOW_LEN,
            seed: 0,
            lm: LmConfig::default(),
            mlnn: MlnnConfig::default(),
            serial_timing: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(LpplsError::config("/regimes", "at least one regime is required"));
        }
        if self.methods.is_empty() {
            return Err(LpplsError::config("/methods", "at least one method is required"));
        }
        self.lm.validate().map_err(|e| e.within("/lm"))?;
        self.mlnn.validate().map_err(|e| e.within("/mlnn"))?;
        self.scenario_spec(self.regimes[0]).validate()
    }

    /// Scenario generator of one regime; each regime draws its own scenarios.
    pub fn scenario_spec(&self, regime: NoiseKind) -> ScenarioSpec {
        let tag = NoiseKind::ALL.iter().position(|k| *k == regime).expect("known kind") as u64;
        ScenarioSpec {
            n: self.n,
            noise_kind: regime,
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag),
            ..ScenarioSpec::default()
        }
    }
}

/// Trained P-LNN variants keyed by their training noise.
pub type Models = BTreeMap<NoiseKind, PlnnModel>;

fn run_method(
    method: Method,
    sc: &Scenario,
    config: &BenchConfig,
    models: &Models,
) -> (Result<CalibrationResult>, f64) {
    let started = Instant::now();
    let out = match method {
        Method::Lm => lm_fit(&sc.noisy, &config.lm),
        Method::Mlnn => mlnn_fit(&sc.noisy, &config.mlnn),
        _ => {
            let kind = method.plnn_kind().expect("P-LNN method");
            plnn_infer(&models[&kind], &sc.noisy)
        }
    };
    (out, started.elapsed().as_secs_f64())
}

/// Run every configured method on every scenario of every regime.
pub fn run_benchmark(config: &BenchConfig, models: &Models) -> Result<Vec<ErrorRecord>> {
    config.validate()?;
    for m in &config.methods {
        if let Some(kind) = m.plnn_kind() {
            if !models.contains_key(&kind) {
                return Err(LpplsError::config("/methods", format!("no trained model for {m}")));
            }
        }
    }
    let jobs: Vec<(NoiseKind, u64)> = config
        .regimes
        .iter()
        .flat_map(|r| (0..config.scenarios_per_regime as u64).map(move |i| (*r, i)))
        .collect();
    let one = |&(regime, i): &(NoiseKind, u64)| -> Result<Vec<ErrorRecord>> {
        let sc = config.scenario_spec(regime).scenario(i)?;
        Ok(config
            .methods
            .iter()
            .map(|&m| {
                let (out, secs) = run_method(m, &sc, config, models);
                ErrorRecord::score(&sc, regime, m, &out, secs)
            })
            .collect())
    };
    let nested: Vec<Vec<ErrorRecord>> = if config.serial_timing {
        jobs.iter().map(one).collect::<Result<_>>()?
    } else {
        jobs.par_iter().map(one).collect::<Result<_>>()?
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Empirical CDF: one step per distinct observed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfTable {
    pub values: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub count: usize,
}

pub fn empirical_cdf(samples: &[f64]) -> CdfTable {
    let mut v: Vec<f64> = samples.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut values = Vec::new();
    let mut probabilities = Vec::new();
    for (i, x) in v.iter().enumerate() {
        if i + 1 < n && v[i + 1] == *x {
            continue;
        }
        values.push(*x);
        probabilities.push((i + 1) as f64 / n as f64);
    }
    CdfTable {
        values,
        probabilities,
        count: n,
    }
}

impl CdfTable {
    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.values.partition_point(|v| *v <= x);
        if k == 0 {
            0.0
        } else {
            self.probabilities[k - 1]
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] < w[1])
            && self.probabilities.windows(2).all(|w| w[0] <= w[1])
            && self
                .probabilities
                .first()
                .is_none_or(|p| *p >= 1.0 / self.count as f64 - 1e-15)
    }

    /// Terminal probability is one (every sample counted).
    pub fn is_complete(&self) -> bool {
        self.count > 0 && self.probabilities.last().is_some_and(|p| (*p - 1.0).abs() < 1e-12)
    }
}

pub const DOMINANCE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ADominates,
    BDominates,
    Crossing,
}

/// First-order dominance on the pooled support. `margin_a` is the largest
/// amount by which `CDF_a` falls below `CDF_b` (zero when `a` dominates),
/// and symmetrically for `margin_b`. Identical CDFs are reported as a
/// crossing with both margins zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    pub verdict: Verdict,
    pub margin_a: f64,
    pub margin_b: f64,
}

pub fn dominance_check(a: &CdfTable, b: &CdfTable) -> Dominance {
    let mut margin_a: f64 = 0.0;
    let mut margin_b: f64 = 0.0;
    for &x in a.values.iter().chain(&b.values) {
        let (fa, fb) = (a.eval(x), b.eval(x));
        margin_a = margin_a.max(fb - fa);
        margin_b = margin_b.max(fa - fb);
    }
    let a_ok = margin_a <= DOMINANCE_TOLERANCE;
    let b_ok = margin_b <= DOMINANCE_TOLERANCE;
    let verdict = match (a_ok, b_ok) {
        (true, false) => Verdict::ADominates,
        (false, true) => Verdict::BDominates,
        _ => Verdict::Crossing,
    };
    Dominance {
        verdict,
        margin_a,
        margin_b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn timing_summary(records: &[ErrorRecord]) -> Vec<TimingRow> {
    let mut by: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    for r in records {
        by.entry(r.method).or_default().push(r.wall_clock);
    }
    by.into_iter()
        .map(|(method, t)| {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            TimingRow {
                method,
                count: t.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

pub fn samples(records: &[ErrorRecord], regime: NoiseKind, method: Method, metric: Metric) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.regime == regime && r.method == method)
        .map(|r| r.metric(metric))
        .collect()
}

/// Dominance of `a` over `b` for one regime and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub regime: NoiseKind,
    pub metric: Metric,
    pub a: Method,
    pub b: Method,
    pub verdict: Verdict,
    pub margin_a: f64,
    pub margin_b: f64,
}

/// Every present method against LM, for every regime and metric.
pub fn dominance_report(records: &[ErrorRecord]) -> Vec<DominanceRow> {
    let regimes: std::collections::BTreeSet<NoiseKind> = records.iter().map(|r| r.regime).collect();
    let methods: std::collections::BTreeSet<Method> = records.iter().map(|r| r.method).collect();
    let mut rows = Vec::new();
    if !methods.contains(&Method::Lm) {
        return rows;
    }
    for &regime in &regimes {
        for metric in Metric::ALL {
            let lm = empirical_cdf(&samples(records, regime, Method::Lm, metric));
            for &m in methods.iter().filter(|m| **m != Method::Lm) {
                let d = dominance_check(&empirical_cdf(&samples(records, regime, m, metric)), &lm);
                rows.push(DominanceRow {
                    regime,
                    metric,
                    a: m,
                    b: Method::Lm,
                    verdict: d.verdict,
                    margin_a: d.margin_a,
                    margin_b: d.margin_b,
                });
            }
        }
    }
    rows
}

/// The 3x4 grid: one row per regime, one column per metric.
pub fn cdf_grid_svg(records: &[ErrorRecord]) -> String {
    let regimes: std::collections::BTreeSet<NoiseKind> = records.iter().map(|r| r.regime).collect();
    let methods: std::collections::BTreeSet<Method> = records.iter().map(|r| r.method).collect();
    let mut panels = Vec::new();
    for &regime in &regimes {
        for metric in Metric::ALL {
            let lines = methods
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let cdf = empirical_cdf(&samples(records, regime, m, metric));
                    let mut l = Line::new(
                        m.as_str(),
                        PALETTE[i % PALETTE.len()],
                        cdf.values
                            .iter()
                            .copied()
                            .zip(cdf.probabilities.iter().copied())
                            .collect(),
                    );
                    l.step = true;
                    l
                })
                .collect();
            panels.push(Panel {
                title: format!("{regime} noise: {}", metric.axis_label()),
                x_label: metric.axis_label().into(),
                y_label: "CDF".into(),
                log_x: true,
                lines,
                ..Panel::default()
            });
        }
    }
    render_grid(&panels, Metric::ALL.len(), 330.0, 260.0)
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CdfRow {
    method: Method,
    value: f64,
    probability: f64,
}

/// Write `records.csv`, `cdf_<metric>_<regime>.csv`, `timing.csv`,
/// `dominance.csv` and optionally `cdf_grid.svg` into `dir`.
pub fn write_outputs(records: &[ErrorRecord], dir: &Path, svg: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("records.csv"), records)?;
    let regimes: std::collections::BTreeSet<NoiseKind> = records.iter().map(|r| r.regime).collect();
    let methods: std::collections::BTreeSet<Method> = records.iter().map(|r| r.method).collect();
    for &regime in &regimes {
        for metric in Metric::ALL {
            let mut rows = Vec::new();
            for &m in &methods {
                let cdf = empirical_cdf(&samples(records, regime, m, metric));
                rows.extend(cdf.values.iter().zip(&cdf.probabilities).map(|(v, p)| CdfRow {
                    method: m,
                    value: *v,
                    probability: *p,
                }));
            }
            write_csv(
                &dir.join(format!("cdf_{}_{}.csv", metric.as_str(), regime.as_str())),
                rows,
            )?;
        }
    }
    write_csv(&dir.join("timing.csv"), timing_summary(records))?;
    write_csv(&dir.join("dominance.csv"), dominance_report(records))?;
    if svg {
        std::fs::write(dir.join("cdf_grid.svg"), cdf_grid_svg(records))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_cdf(s: &[f64], x: f64) -> f64 {
        s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64
    }

    #[test]
    fn cdf_basics() {
        let c = empirical_cdf(&[0.5]);
        assert_eq!((c.values.clone(), c.probabilities.clone()), (vec![0.5], vec![1.0]));
        let c = empirical_cdf(&[3.0, 1.0, 2.0]);
        assert_eq!(c.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(c.probabilities, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(c.is_monotone() && c.is_complete());
    }

    #[test]
    fn cdf_matches_counting_oracle() {
        let mut rng = crate::noise::stream_rng(3, 3);
        use rand::Rng;
        let s: Vec<f64> = (0..100).map(|_| (rng.random::<f64>() * 20.0).floor()).collect();
        let c = empirical_cdf(&s);
        for x in (0..45).map(|k| k as f64 * 0.5 - 1.0) {
            assert_eq!(c.eval(x), naive_cdf(&s, x));
        }
        assert!(c.is_monotone() && c.is_complete());
    }

    #[test]
    fn failures_keep_cdf_below_one() {
        let c = empirical_cdf(&[0.1, f64::INFINITY]);
        assert_eq!(c.eval(1e300), 0.5);
        assert!(c.is_complete());
    }

    #[test]
    fn dominance_cases() {
        let a = empirical_cdf(&[1.0, 2.0, 3.0]);
        let same = dominance_check(&a, &a);
        assert_eq!(same.verdict, Verdict::Crossing);
        assert_eq!((same.margin_a, same.margin_b), (0.0, 0.0));
        let shifted = empirical_cdf(&[2.0, 3.0, 4.0]);
        assert_eq!(dominance_check(&a, &shifted).verdict, Verdict::ADominates);
        assert_eq!(dominance_check(&shifted, &a).verdict, Verdict::BDominates);
        let wide = empirical_cdf(&[0.0, 10.0]);
        let d = dominance_check(&a, &wide);
        assert_eq!(d.verdict, Verdict::Crossing);
        assert!((d.margin_a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dominance_matches_brute_force() {
        use rand::Rng;
        let mut rng = crate::noise::stream_rng(9, 1);
        for _ in 0..200 {
            let na = rng.random_range(1..12);
            let nb = rng.random_range(1..12);
            let shift = rng.random::<f64>() * 3.0;
            let sa: Vec<f64> = (0..na).map(|_| (rng.random::<f64>() * 6.0).round()).collect();
            let sb: Vec<f64> = (0..nb).map(|_| (rng.random::<f64>() * 6.0 + shift).round()).collect();
            let d = dominance_check(&empirical_cdf(&sa), &empirical_cdf(&sb));
            let pts: Vec<f64> = sa.iter().chain(&sb).copied().collect();
            let a_dom = pts.iter().all(|&x| naive_cdf(&sa, x) >= naive_cdf(&sb, x) - 1e-12);
            let b_dom = pts.iter().all(|&x| naive_cdf(&sb, x) >= naive_cdf(&sa, x) - 1e-12);
            let expect = match (a_dom, b_dom) {
                (true, false) => Verdict::ADominates,
                (false, true) => Verdict::BDominates,
                _ => Verdict::Crossing,
            };
            assert_eq!(d.verdict, expect);
        }
    }

    #[test]
    fn timing_population_std() {
        let rec = |m, t| ErrorRecord {
            scenario: 0,
            regime: NoiseKind::White,
            method: m,
            tc_error: 0.0,
            m_error: 0.0,
            omega_error: 0.0,
            mse: 0.0,
            wall_clock: t,
            converged: true,
        };
        let rows = timing_summary(&[
            rec(Method::Lm, 2.0),
            rec(Method::Lm, 2.0),
            rec(Method::Mlnn, 1.0),
            rec(Method::Mlnn, 3.0),
        ]);
        assert_eq!(rows[0].method, Method::Lm);
        assert_eq!((rows[0].mean, rows[0].std), (2.0, 0.0));
        assert_eq!((rows[1].mean, rows[1].std), (2.0, 1.0));
        let single = timing_summary(&[rec(Method::Lm, 0.7)]);
        assert_eq!(single[0].std, 0.0);
    }

    #[test]
    fn small_lm_run_is_reproducible() {
        let cfg = BenchConfig {
            scenarios_per_regime: 2,
            regimes: vec![NoiseKind::White],
            methods: vec![Method::Lm],
            lm: LmConfig {
                starts: 4,
                ..LmConfig::default()
            },
            ..BenchConfig::default()
        };
        let a = run_benchmark(&cfg, &Models::new()).unwrap();
        let b = run_benchmark(&cfg, &Models::new()).unwrap();
        assert_eq!(a.len(), 2);
        let strip = |v: &[ErrorRecord]| {
            v.iter()
                .map(|r| ErrorRecord {
                    wall_clock: 0.0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        let missing = BenchConfig {
            methods: vec![Method::PlnnWhite],
            ..cfg
        };
        assert!(run_benchmark(&missing, &Models::new()).is_err());
    }
}
