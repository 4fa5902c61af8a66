//! Rolling-window critical-time forecasts on a raw calendar series.
//!
//! Calendar time is an `f64` day count: ISO dates become days since
//! 1970-01-01, integer indices are used as is. Each window is resampled to a
//! uniform grid that ends at the window's analysis date, calibrated by every
//! requested method, and the predicted `tc` mapped back to the calendar.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::Models;
use crate::calibration::{CalibrationResult, Method};
use crate::error::{LpplsError, Result};
use crate::lm::{lm_fit, LmConfig};
use crate::mlnn::{mlnn_fit, MlnnConfig};
use crate::model::{eval_lppls, Affine, Series, MIN_SERIES_LEN};
use crate::noise::WINDOW_LEN;
use crate::plnn::plnn_infer;
use crate::svg::{render_grid, Line, Panel, PALETTE};

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateKind {
    /// ISO-8601 dates; calendar values are days since 1970-01-01.
    Iso,
    /// Plain numeric day indices.
    Index,
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

fn parse_iso(s: &str) -> Option<f64> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some((d - epoch()).num_days() as f64);
    }
    let dt = DateTime::parse_from_rfc3339(s).ok()?;
    Some(dt.timestamp() as f64 / SECONDS_PER_DAY + f64::from(dt.timestamp_subsec_nanos()) * 1e-9 / SECONDS_PER_DAY)
}

/// Parse one date field; numeric fields are indices, everything else must be ISO.
pub fn parse_calendar(s: &str) -> Option<(f64, DateKind)> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some((v, DateKind::Index));
    }
    parse_iso(s).map(|v| (v, DateKind::Iso))
}

/// Render a calendar value the way it was read.
pub fn format_calendar(v: f64, kind: DateKind) -> String {
    match kind {
        DateKind::Index => format!("{v}"),
        DateKind::Iso => {
            if !v.is_finite() {
                return "NaN".into();
            }
            let days = v.floor();
            let d = if days >= 0.0 {
                epoch().checked_add_days(Days::new(days as u64))
            } else {
                epoch().checked_sub_days(Days::new((-days) as u64))
            };
            d.map_or_else(|| format!("{v}"), |d| d.format("%Y-%m-%d").to_string())
        }
    }
}

/// A calendar series as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub dates: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: DateKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderMode {
    /// Header present iff the first row's value field is not a number.
    #[default]
    Auto,
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestOptions {
    pub header: HeaderMode,
    pub date_column: usize,
    pub value_column: usize,
    /// Take the natural log of every value (prices).
    pub log_values: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            header: HeaderMode::Auto,
            date_column: 0,
            value_column: 1,
            log_values: false,
        }
    }
}

pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<RawSeries> {
    ingest_reader(std::fs::File::open(path)?, opts)
}

pub fn ingest_reader(input: impl Read, opts: &IngestOptions) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut dates = Vec::new();
    let mut values = Vec::new();
    let mut kind = None;
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let field = |i: usize| {
            rec.get(i).ok_or_else(|| LpplsError::Parse {
                line,
                reason: format!("missing column {i}"),
            })
        };
        let (d, v) = (field(opts.date_column)?, field(opts.value_column)?);
        if std::mem::take(&mut first) {
            let header = match opts.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Auto => v.parse::<f64>().is_err(),
            };
            if header {
                continue;
            }
        }
        let (date, k) = parse_calendar(d).ok_or_else(|| LpplsError::Parse {
            line,
            reason: format!("unrecognised date {d:?}"),
        })?;
        if *kind.get_or_insert(k) != k {
            return Err(LpplsError::Parse {
                line,
                reason: "mixes ISO dates and numeric indices".into(),
            });
        }
        let mut value: f64 = v.parse().map_err(|_| LpplsError::Parse {
            line,
            reason: format!("value {v:?} is not a number"),
        })?;
        if opts.log_values {
            if !(value > 0.0) {
                return Err(LpplsError::Parse {
                    line,
                    reason: format!("cannot take log of {value}"),
                });
            }
            value = value.ln();
        }
        if !value.is_finite() {
            return Err(LpplsError::Parse {
                line,
                reason: "value is not finite".into(),
            });
        }
        if dates.last().is_some_and(|p| date <= *p) {
            return Err(LpplsError::NonMonotoneDates { line });
        }
        dates.push(date);
        values.push(value);
    }
    if dates.is_empty() {
        return Err(LpplsError::Parse {
            line: 0,
            reason: "no data rows".into(),
        });
    }
    Ok(RawSeries {
        dates,
        values,
        kind: kind.unwrap_or(DateKind::Index),
    })
}

impl RawSeries {
    /// Last observation date not after `t2`.
    pub fn last_date_before(&self, t2: f64) -> Option<f64> {
        let k = self.dates.partition_point(|d| *d <= t2);
        (k > 0).then(|| self.dates[k - 1])
    }

    fn interpolate(&self, t: f64) -> f64 {
        let k = self.dates.partition_point(|d| *d <= t);
        if k == self.dates.len() {
            return self.values[k - 1];
        }
        if k == 0 {
            return self.values[0];
        }
        let (d0, d1) = (self.dates[k - 1], self.dates[k]);
        let w = (t - d0) / (d1 - d0);
        self.values[k - 1] + w * (self.values[k] - self.values[k - 1])
    }
}

/// Linearly interpolate `raw` at `n` evenly spaced calendar points over
/// `[t1, t2']`, where `t2'` is the last observation not after `t2`, and
/// min-max scale the result. Nothing dated after `t2'` is read.
pub fn resample(raw: &RawSeries, t1: f64, t2: f64, n: usize) -> Result<Series> {
    let end = raw
        .last_date_before(t2)
        .ok_or_else(|| LpplsError::InvalidSeries(format!("no observation on or before {t2}")))?;
    if !(t1 >= raw.dates[0]) {
        return Err(LpplsError::InvalidSeries(format!(
            "window start {t1} precedes the first observation {}",
            raw.dates[0]
        )));
    }
    if !(t1 < end) {
        return Err(LpplsError::InvalidSeries(format!("empty window [{t1}, {end}]")));
    }
    let inside = raw.dates.iter().filter(|d| **d >= t1 && **d <= end).count();
    if inside < MIN_SERIES_LEN {
        return Err(LpplsError::InvalidSeries(format!(
            "window [{t1}, {end}] holds {inside} observations, at least {MIN_SERIES_LEN} required"
        )));
    }
    let time_map = Affine::between((0.0, 1.0), (t1, end));
    let points: Vec<f64> = (0..n)
        .map(|i| {
            let t = if i + 1 == n {
                end
            } else {
                time_map.apply(i as f64 / (n - 1) as f64)
            };
            raw.interpolate(t)
        })
        .collect();
    Series::from_raw(&points, time_map)
}

/// `n = 252` resampling used by every method here.
pub fn resample_252(raw: &RawSeries, t1: f64, t2: f64) -> Result<Series> {
    resample(raw, t1, t2, WINDOW_LEN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShiftScheme {
    /// Fixed end, start swept so lengths run from `min_ratio` to `max_ratio`
    /// times the base length.
    SweepStart { min_ratio: f64, max_ratio: f64 },
    /// Fixed length, both ends moved back by `step` calendar units per window.
    SlideBoth { step: f64 },
}

impl Default for ShiftScheme {
    fn default() -> Self {
        ShiftScheme::SweepStart {
            min_ratio: 0.7,
            max_ratio: 1.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub windows: usize,
    /// Calendar length of the reference window. Defaults to the longest
    /// window that fits the data.
    pub base_length: Option<f64>,
    pub scheme: ShiftScheme,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            windows: 10,
            base_length: None,
            scheme: ShiftScheme::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    /// `(t1, t2)` calendar boundaries, ordered by start.
    pub windows: Vec<(f64, f64)>,
    pub scheme: ShiftScheme,
    pub n: usize,
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 {
            return Err(LpplsError::config("/plan/windows", "must be at least 1"));
        }
        if let Some(b) = self.base_length {
            if !(b > 0.0 && b.is_finite()) {
                return Err(LpplsError::config("/plan/base_length", "must be positive"));
            }
        }
        match self.scheme {
            ShiftScheme::SweepStart { min_ratio, max_ratio } => {
                if !(min_ratio > 0.0 && min_ratio <= max_ratio && max_ratio.is_finite()) {
                    return Err(LpplsError::config("/plan/scheme", "need 0 < min_ratio <= max_ratio"));
                }
            }
            ShiftScheme::SlideBoth { step } => {
                if !(step >= 0.0 && step.is_finite()) {
                    return Err(LpplsError::config("/plan/scheme/step", "must be >= 0"));
                }
            }
        }
        Ok(())
    }

    /// Lay out windows ending at (or, when sliding, before) `t2` over `raw`.
    pub fn plan(&self, raw: &RawSeries, t2: f64) -> Result<WindowPlan> {
        self.validate()?;
        let end = raw
            .last_date_before(t2)
            .ok_or_else(|| LpplsError::InvalidSeries(format!("no observation on or before {t2}")))?;
        let span = end - raw.dates[0];
        let k = self.windows;
        let frac = |i: usize| if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 };
        let mut windows: Vec<(f64, f64)> = match self.scheme {
            ShiftScheme::SweepStart { min_ratio, max_ratio } => {
                let base = self.base_length.unwrap_or(span / max_ratio);
                let lo = if k == 1 { base } else { min_ratio * base };
                let hi = if k == 1 { base } else { max_ratio * base };
                (0..k)
                    .map(|i| {
                        let len = hi + frac(i) * (lo - hi);
                        (end - len, end)
                    })
                    .collect()
            }
            ShiftScheme::SlideBoth { step } => {
                let total = step * (k - 1) as f64;
                let base = self.base_length.unwrap_or(span - total);
                (0..k)
                    .map(|i| {
                        let back = step * (k - 1 - i) as f64;
                        (end - back - base, end - back)
                    })
                    .collect()
            }
        };
        // Default bases put the widest window exactly on the first date; absorb round-off.
        let slack = 1e-9 * span.abs().max(1.0);
        for w in &mut windows {
            if w.0 < raw.dates[0] && w.0 > raw.dates[0] - slack {
                w.0 = raw.dates[0];
            }
        }
        if let Some(&(t1, _)) = windows.iter().find(|(t1, t2)| *t1 < raw.dates[0] || !(t1 < t2)) {
            return Err(LpplsError::config(
                "/plan/base_length",
                format!(
                    "window start {t1} falls outside the data (first observation {})",
                    raw.dates[0]
                ),
            ));
        }
        Ok(WindowPlan {
            windows,
            scheme: self.scheme,
            n: WINDOW_LEN,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub plan: PlanConfig,
    pub methods: Vec<Method>,
    pub lm: LmConfig,
    pub mlnn: MlnnConfig,
    /// Evaluation points of each density curve.
    pub density_points: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            plan: PlanConfig::default(),
            methods: vec![Method::Lm, Method::Mlnn],
            lm: LmConfig::default(),
            mlnn: MlnnConfig::default(),
            density_points: 512,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.methods.is_empty() {
            return Err(LpplsError::config("/methods", "at least one method is required"));
        }
        if self.density_points < 2 {
            return Err(LpplsError::config("/density_points", "must be at least 2"));
        }
        self.lm.validate().map_err(|e| e.within("/lm"))?;
        self.mlnn.validate().map_err(|e| e.within("/mlnn"))
    }
}

/// One method on one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub window: usize,
    pub t1: f64,
    /// Last observation actually used.
    pub t2: f64,
    pub method: Method,
    pub result: Option<CalibrationResult>,
    pub tc_calendar: f64,
    pub value_map: Affine,
    pub error: Option<String>,
}

impl ForecastRow {
    /// Usable for the density: a finite fit whose `tc` lies after the window.
    pub fn is_valid(&self) -> bool {
        self.result.is_some() && self.tc_calendar.is_finite() && self.tc_calendar > self.t2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Density {
    /// Fewer than three valid predictions, or all equal.
    Atoms {
        values: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Gaussian KDE sampled on a uniform grid.
    Kde {
        bandwidth: f64,
        grid: Vec<f64>,
        pdf: Vec<f64>,
    },
    Empty,
}

impl Density {
    /// Total mass: weights for atoms, trapezoid rule for a KDE.
    pub fn integral(&self) -> f64 {
        match self {
            Density::Atoms { weights, .. } => weights.iter().sum(),
            Density::Kde { grid, pdf, .. } => grid
                .windows(2)
                .zip(pdf.windows(2))
                .map(|(x, p)| 0.5 * (x[1] - x[0]) * (p[0] + p[1]))
                .sum(),
            Density::Empty => 0.0,
        }
    }
}

fn atoms(sorted: &[f64]) -> Density {
    let mut values: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let w = 1.0 / sorted.len() as f64;
    for &v in sorted {
        if values.last() == Some(&v) {
            *weights.last_mut().expect("nonempty") += w;
        } else {
            values.push(v);
            weights.push(w);
        }
    }
    Density::Atoms { values, weights }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule: `0.9 min(sd, IQR / 1.34) n^(-1/5)`, falling back to `sd`
/// alone when the IQR is zero.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = (quantile(sorted, 0.75) - quantile(sorted, 0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

pub fn density(samples: &[f64], points: usize) -> Density {
    let mut s: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    if s.is_empty() {
        return Density::Empty;
    }
    s.sort_by(f64::total_cmp);
    if s.len() < 3 {
        return atoms(&s);
    }
    let h = silverman_bandwidth(&s);
    if !(h > 0.0) {
        return atoms(&s);
    }
    let (lo, hi) = (s[0] - 5.0 * h, s[s.len() - 1] + 5.0 * h);
    let grid: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();
    let norm = 1.0 / (s.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let pdf = grid
        .iter()
        .map(|x| norm * s.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Density::Kde {
        bandwidth: h,
        grid,
        pdf,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub valid: usize,
    pub failed: usize,
    pub median_tc: Option<f64>,
    pub density: Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub t2: f64,
    pub kind: DateKind,
    pub plan: WindowPlan,
    pub rows: Vec<ForecastRow>,
    pub summaries: Vec<MethodSummary>,
}

impl ForecastSet {
    pub fn valid_tcs(&self, method: Method) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.is_valid())
            .map(|r| r.tc_calendar)
            .collect()
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut s: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    Some(quantile(&s, 0.5))
}

fn calibrate(method: Method, series: &Series, config: &ForecastConfig, models: &Models) -> Result<CalibrationResult> {
    match method {
        Method::Lm => lm_fit(series, &config.lm),
        Method::Mlnn => mlnn_fit(series, &config.mlnn),
        _ => {
            let kind = method.plnn_kind().expect("P-LNN method");
            let model = models
                .get(&kind)
                .ok_or_else(|| LpplsError::config("/methods", format!("no trained model for {method}")))?;
            plnn_infer(model, series)
        }
    }
}

/// Calibrate every method on every window of `config.plan` ending at `t2`.
/// Per-window failures are kept as rows with `error` set.
pub fn forecast(raw: &RawSeries, t2: f64, config: &ForecastConfig, models: &Models) -> Result<ForecastSet> {
    config.validate()?;
    for m in &config.methods {
        if let Some(kind) = m.plnn_kind() {
            if !models.contains_key(&kind) {
                return Err(LpplsError::config("/methods", format!("no trained model for {m}")));
            }
        }
    }
    let plan = config.plan.plan(raw, t2)?;
    let jobs: Vec<(usize, Method)> = (0..plan.windows.len())
        .flat_map(|w| config.methods.iter().map(move |m| (w, *m)))
        .collect();
    let rows: Vec<ForecastRow> = jobs
        .par_iter()
        .map(|&(w, method)| {
            let (t1, wt2) = plan.windows[w];
            let end = raw.last_date_before(wt2).unwrap_or(wt2);
            let mut row = ForecastRow {
                window: w,
                t1,
                t2: end,
                method,
                result: None,
                tc_calendar: f64::NAN,
                value_map: Affine::IDENTITY,
                error: None,
            };
            let outcome = resample(raw, t1, wt2, plan.n).and_then(|s| {
                row.value_map = s.value_map;
                let r = calibrate(method, &s, config, models)?;
                Ok((r.calendar_tc(&s.time_map), r))
            });
            match outcome {
                Ok((tc, r)) => {
                    row.tc_calendar = tc;
                    if !(tc > end) {
                        row.error = Some(format!("predicted tc {tc} does not lie after the window end {end}"));
                    }
                    row.result = Some(r);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    let mut set = ForecastSet {
        t2,
        kind: raw.kind,
        plan,
        rows,
        summaries: Vec::new(),
    };
    set.summaries = config
        .methods
        .iter()
        .map(|&method| {
            let tcs = set.valid_tcs(method);
            let total = set.rows.iter().filter(|r| r.method == method).count();
            MethodSummary {
                method,
                valid: tcs.len(),
                failed: total - tcs.len(),
                median_tc: median(&tcs),
                density: density(&tcs, config.density_points),
            }
        })
        .collect();
    Ok(set)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    window: usize,
    t1: String,
    t2: String,
    method: Method,
    tc_normalized: f64,
    tc_calendar: f64,
    tc_date: String,
    m: f64,
    omega: f64,
    mse: f64,
    converged: bool,
    status: &'a str,
}

#[derive(Serialize)]
struct DensityRow {
    kind: &'static str,
    x: f64,
    density: f64,
}

/// Optional user-supplied calendar interval shaded on the plot (e.g. a
/// realized drawdown).
pub type Annotation = (f64, f64);

/// Write `forecasts.csv`, `density_<method>.csv` and optionally
/// `forecast.svg` into `dir`.
pub fn write_outputs(set: &ForecastSet, raw: &RawSeries, dir: &Path, svg: bool, bands: &[Annotation]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("forecasts.csv"))?;
    for r in &set.rows {
        let (tcn, m, omega, mse, conv) = r
            .result
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN, false), |c| {
                (c.params.tc, c.params.m, c.params.omega, c.final_mse, c.converged)
            });
        w.serialize(CsvRow {
            window: r.window,
            t1: format_calendar(r.t1, set.kind),
            t2: format_calendar(r.t2, set.kind),
            method: r.method,
            tc_normalized: tcn,
            tc_calendar: r.tc_calendar,
            tc_date: format_calendar(r.tc_calendar, set.kind),
            m,
            omega,
            mse,
            converged: conv,
            status: r.error.as_deref().unwrap_or("ok"),
        })?;
    }
    w.flush()?;
    for s in &set.summaries {
        let mut w =
            csv::Writer::from_path(dir.join(format!("density_{}.csv", s.method.as_str().to_ascii_lowercase())))?;
        match &s.density {
            Density::Atoms { values, weights } => {
                for (x, p) in values.iter().zip(weights) {
                    w.serialize(DensityRow {
                        kind: "atom",
                        x: *x,
                        density: *p,
                    })?;
                }
            }
            Density::Kde { grid, pdf, .. } => {
                for (x, p) in grid.iter().zip(pdf) {
                    w.serialize(DensityRow {
                        kind: "kde",
                        x: *x,
                        density: *p,
                    })?;
                }
            }
            Density::Empty => w.write_record(["kind", "x", "density"])?,
        }
        w.flush()?;
    }
    if svg {
        std::fs::write(dir.join("forecast.svg"), overlay_svg(set, raw, bands))?;
    }
    Ok(())
}

/// Data, fitted curves extended toward their `tc`, and the `tc` densities.
pub fn overlay_svg(set: &ForecastSet, raw: &RawSeries, bands: &[Annotation]) -> String {
    let first = set.plan.windows.iter().map(|w| w.0).fold(f64::INFINITY, f64::min);
    let horizon = set
        .rows
        .iter()
        .filter(|r| r.is_valid())
        .map(|r| r.tc_calendar)
        .fold(set.t2, f64::max);
    let data: Vec<(f64, f64)> = raw
        .dates
        .iter()
        .zip(&raw.values)
        .filter(|(d, _)| **d >= first && **d <= horizon)
        .map(|(d, v)| (*d, *v))
        .collect();
    let mut lines = vec![Line::new("data", "#555", data)];
    for (mi, method) in set.summaries.iter().map(|s| s.method).enumerate() {
        for (k, r) in set
            .rows
            .iter()
            .filter(|r| r.method == method && r.is_valid())
            .enumerate()
        {
            let c = r.result.as_ref().expect("valid row");
            let map = Affine::between((0.0, 1.0), (r.t1, r.t2));
            let stop = c.params.tc - 1e-3 * (c.params.tc - 1.0);
            let pts = (0..200)
                .filter_map(|i| {
                    let t = stop * i as f64 / 199.0;
                    eval_lppls(&c.params, t)
                        .ok()
                        .map(|v| (map.apply(t), r.value_map.apply(v)))
                })
                .collect();
            let mut l = Line::new(
                if k == 0 { method.as_str() } else { "" },
                PALETTE[mi % PALETTE.len()],
                pts,
            );
            l.dashed = true;
            lines.push(l);
        }
    }
    let fits = Panel {
        title: format!("Fits up to {}", format_calendar(set.t2, set.kind)),
        x_label: "calendar time".into(),
        y_label: "value".into(),
        lines: lines.into_iter().filter(|l| !l.points.is_empty()).collect(),
        bands: bands.to_vec(),
        markers: vec![set.t2],
        ..Panel::default()
    };
    let pdfs = Panel {
        title: "Predicted tc density".into(),
        x_label: "calendar time".into(),
        y_label: "density".into(),
        lines: set
            .summaries
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let color = PALETTE[i % PALETTE.len()];
                match &s.density {
                    Density::Kde { grid, pdf, .. } => Some(Line::new(
                        s.method.as_str(),
                        color,
                        grid.iter().copied().zip(pdf.iter().copied()).collect(),
                    )),
                    Density::Atoms { values, weights } => Some(Line::new(
                        format!("{} (atoms)", s.method),
                        color,
                        values
                            .iter()
                            .zip(weights)
                            .flat_map(|(x, w)| [(*x, 0.0), (*x, *w), (*x, 0.0)])
                            .collect(),
                    )),
                    Density::Empty => None,
                }
            })
            .collect(),
        bands: bands.to_vec(),
        markers: vec![set.t2],
        ..Panel::default()
    };
    render_grid(&[fits, pdfs], 1, 900.0, 360.0)
}

/// Per-method medians, for the report.
pub fn medians(set: &ForecastSet) -> BTreeMap<Method, Option<f64>> {
    set.summaries.iter().map(|s| (s.method, s.median_tc)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> RawSeries {
        RawSeries {
            dates: (0..n).map(|i| i as f64).collect(),
            values: (0..n).map(|i| 2.0 + 0.5 * i as f64).collect(),
            kind: DateKind::Index,
        }
    }

    #[test]
    fn ingest_well_formed_with_and_without_header() {
        let body = "2000-01-03,10\n2000-01-04,11.5\n2000-01-06,9\n";
        let plain = ingest_reader(body.as_bytes(), &IngestOptions::default()).unwrap();
        let with = ingest_reader(format!("date,close\n{body}").as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(plain, with);
        assert_eq!(plain.kind, DateKind::Iso);
        assert_eq!(plain.values, vec![10.0, 11.5, 9.0]);
        assert_eq!(plain.dates[2] - plain.dates[0], 3.0);
        assert_eq!(format_calendar(plain.dates[1], DateKind::Iso), "2000-01-04");
        let forced = IngestOptions {
            header: HeaderMode::Present,
            ..IngestOptions::default()
        };
        assert_eq!(ingest_reader(body.as_bytes(), &forced).unwrap().values.len(), 2);
    }

    #[test]
    fn ingest_errors_carry_lines() {
        let dup = "1,1\n2,2\n2,3\n";
        assert!(matches!(
            ingest_reader(dup.as_bytes(), &IngestOptions::default()),
            Err(LpplsError::NonMonotoneDates { line: 3 })
        ));
        let bad = "d,v\n1,1\n2,x\n";
        assert!(matches!(
            ingest_reader(bad.as_bytes(), &IngestOptions::default()),
            Err(LpplsError::Parse { line: 3, .. })
        ));
        let log = IngestOptions {
            log_values: true,
            ..IngestOptions::default()
        };
        assert!(matches!(
            ingest_reader("1,0\n".as_bytes(), &log),
            Err(LpplsError::Parse { line: 1, .. })
        ));
        let r = ingest_reader("1,1\n2,2.718281828459045\n".as_bytes(), &log).unwrap();
        assert!((r.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resampling_identity_and_ramp() {
        let raw = ramp(252);
        let s = resample_252(&raw, 0.0, 251.0).unwrap();
        for (v, r) in s.raw_values().iter().zip(&raw.values) {
            assert!((v - r).abs() < 1e-9);
        }
        let s = resample(&ramp(400), 100.0, 300.5, 252).unwrap();
        assert_eq!(s.len(), 252);
        for (t, v) in s.times().iter().zip(s.values()) {
            assert!((t - v).abs() < 1e-12);
        }
        // tc = 1.1 maps to 100 + 1.1 * 200, by hand.
        assert!((s.time_map.apply(1.1) - 320.0).abs() < 1e-9);
    }

    #[test]
    fn resampling_never_reads_past_t2() {
        let mut raw = ramp(300);
        let s0 = resample(&raw, 50.0, 250.0, 252).unwrap();
        for v in &mut raw.values[251..] {
            *v = 1e6;
        }
        assert_eq!(resample(&raw, 50.0, 250.0, 252).unwrap(), s0);
        assert!(resample(&raw, -1.0, 250.0, 252).is_err());
        assert!(resample(&raw, 240.0, 250.0, 252).is_err());
    }

    #[test]
    fn sweep_plan_lengths() {
        let raw = ramp(400);
        let plan = PlanConfig::default().plan(&raw, 399.0).unwrap();
        assert_eq!(plan.windows.len(), 10);
        for t2 in [120.0, 379.0, 380.0, 399.0] {
            assert_eq!(PlanConfig::default().plan(&raw, t2).unwrap().windows[0].0, 0.0);
        }
        let base = 399.0 / 1.3;
        assert!(((399.0 - plan.windows[9].0) - 0.7 * base).abs() < 1e-9);
        assert!(plan.windows.windows(2).all(|w| w[0].0 < w[1].0));
        let slide = PlanConfig {
            windows: 3,
            base_length: Some(200.0),
            scheme: ShiftScheme::SlideBoth { step: 10.0 },
        };
        assert_eq!(
            slide.plan(&raw, 399.0).unwrap().windows,
            vec![(179.0, 379.0), (189.0, 389.0), (199.0, 399.0)]
        );
        let too_long = PlanConfig {
            base_length: Some(500.0),
            ..PlanConfig::default()
        };
        assert!(too_long.plan(&raw, 399.0).is_err());
    }

    #[test]
    fn density_atoms_and_kde() {
        assert_eq!(density(&[], 16), Density::Empty);
        match density(&[5.0], 16) {
            Density::Atoms { values, weights } => assert_eq!((values, weights), (vec![5.0], vec![1.0])),
            d => panic!("{d:?}"),
        }
        assert!(matches!(density(&[1.0, 1.0, 1.0, 1.0], 16), Density::Atoms { .. }));
        let d = density(&[1.0, 2.0, 2.5, 4.0, 7.0], 1024);
        assert!((d.integral() - 1.0).abs() < 1e-3, "{}", d.integral());
    }

    #[test]
    fn silverman_matches_hand_value() {
        // sd = 1.5811, IQR / 1.34 = 1.4925: the IQR term wins.
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let expect = 0.9 * (2.0f64 / 1.34) * 5f64.powf(-0.2);
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn calendar_formats() {
        assert_eq!(parse_calendar("1970-01-11"), Some((10.0, DateKind::Iso)));
        assert_eq!(parse_calendar("17"), Some((17.0, DateKind::Index)));
        assert_eq!(parse_calendar("1970-01-02T12:00:00Z"), Some((1.5, DateKind::Iso)));
        assert_eq!(format_calendar(-1.0, DateKind::Iso), "1969-12-31");
        assert!(parse_calendar("yesterday").is_none());
    }
}
