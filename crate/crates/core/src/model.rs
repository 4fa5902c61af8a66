//! The LPPLS function and its linear subproblem.
//!
//! The model is written in the `(C1, C2)` form
//!
//! ```text
//! O(t) = A + B f(t) + C1 g(t) + C2 h(t)
//! f = (tc - t)^m,  g = f cos(omega ln(tc - t)),  h = f sin(omega ln(tc - t))
//! ```
//!
//! which is linear in `(A, B, C1, C2)` once `(tc, m, omega)` are fixed. Everything
//! here works on the normalized frame where the observation window is `[0, 1]`
//! and observed values are min-max scaled to `[0, 1]`.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{LpplsError, Result};

/// Shortest series accepted by [`Series::new`].
pub const MIN_SERIES_LEN: usize = 20;

/// Largest tolerated condition number of the 4x4 normal matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// `y = scale * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn new(scale: f64, offset: f64) -> Self {
        Self { scale, offset }
    }

    /// Map sending `from.0 -> to.0` and `from.1 -> to.1`.
    pub fn between(from: (f64, f64), to: (f64, f64)) -> Self {
        let scale = (to.1 - to.0) / (from.1 - from.0);
        Self {
            scale,
            offset: to.0 - scale * from.0,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.offset
    }

    pub fn inverse(&self) -> Self {
        Self {
            scale: 1.0 / self.scale,
            offset: -self.offset / self.scale,
        }
    }

    /// `self ∘ inner`, i.e. `x -> self(inner(x))`.
    pub fn compose(&self, inner: &Affine) -> Self {
        Self {
            scale: self.scale * inner.scale,
            offset: self.scale * inner.offset + self.offset,
        }
    }
}

/// The three nonlinear parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearParams {
    pub tc: f64,
    pub m: f64,
    pub omega: f64,
}

impl NonlinearParams {
    pub fn new(tc: f64, m: f64, omega: f64) -> Self {
        Self { tc, m, omega }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.tc, self.m, self.omega]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// The four linear parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub a: f64,
    pub b: f64,
    pub c1: f64,
    pub c2: f64,
}

impl LinearParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.a, self.b, self.c1, self.c2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            a: a[0],
            b: a[1],
            c1: a[2],
            c2: a[3],
        }
    }

    /// Re-express the coefficients for observable values transformed by `map`.
    pub fn through(self, map: &Affine) -> Self {
        Self {
            a: map.apply(self.a),
            b: map.scale * self.b,
            c1: map.scale * self.c1,
            c2: map.scale * self.c2,
        }
    }
}

/// All seven LPPLS parameters on the normalized time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpplsParams {
    pub tc: f64,
    pub m: f64,
    pub omega: f64,
    pub a: f64,
    pub b: f64,
    pub c1: f64,
    pub c2: f64,
}

impl LpplsParams {
    pub fn from_parts(nl: NonlinearParams, lin: LinearParams) -> Self {
        Self {
            tc: nl.tc,
            m: nl.m,
            omega: nl.omega,
            a: lin.a,
            b: lin.b,
            c1: lin.c1,
            c2: lin.c2,
        }
    }

    pub fn nonlinear(&self) -> NonlinearParams {
        NonlinearParams::new(self.tc, self.m, self.omega)
    }

    pub fn linear(&self) -> LinearParams {
        LinearParams {
            a: self.a,
            b: self.b,
            c1: self.c1,
            c2: self.c2,
        }
    }

    /// Oscillation amplitude `C = sqrt(C1^2 + C2^2)`.
    pub fn c_amplitude(&self) -> f64 {
        self.c1.hypot(self.c2)
    }

    /// Oscillation phase `phi = atan2(C2, C1)`.
    pub fn phase(&self) -> f64 {
        self.c2.atan2(self.c1)
    }

    pub fn is_finite(&self) -> bool {
        [self.tc, self.m, self.omega, self.a, self.b, self.c1, self.c2]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Basis functions `(f, g, h)` at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Basis {
    pub f: f64,
    pub g: f64,
    pub h: f64,
}

/// Evaluate `(f, g, h)` at `t`. Requires `t < tc`.
pub fn eval_basis(t: f64, tc: f64, m: f64, omega: f64) -> Result<Basis> {
    let dt = tc - t;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(LpplsError::Domain(format!(
            "t = {t} must lie strictly before tc = {tc}"
        )));
    }
    let f = dt.powf(m);
    let (s, c) = (omega * dt.ln()).sin_cos();
    Ok(Basis { f, g: f * c, h: f * s })
}

/// Evaluate the model at `t`. Requires `t < params.tc`.
pub fn eval_lppls(params: &LpplsParams, t: f64) -> Result<f64> {
    let Basis { f, g, h } = eval_basis(t, params.tc, params.m, params.omega)?;
    Ok(params.a + params.b * f + params.c1 * g + params.c2 * h)
}

/// Fixed-grid observations in the normalized frame, plus the maps back to
/// calendar time and raw observable units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    times: Vec<f64>,
    values: Vec<f64>,
    /// normalized time -> calendar time
    pub time_map: Affine,
    /// normalized value -> raw observable
    pub value_map: Affine,
}

impl Series {
    pub fn new(times: Vec<f64>, values: Vec<f64>, time_map: Affine, value_map: Affine) -> Result<Self> {
        let n = times.len();
        if n != values.len() {
            return Err(LpplsError::InvalidSeries(format!(
                "{} times but {} values",
                n,
                values.len()
            )));
        }
        if n < MIN_SERIES_LEN {
            return Err(LpplsError::InvalidSeries(format!(
                "series has {n} points, at least {MIN_SERIES_LEN} required"
            )));
        }
        if times[0] != 0.0 || times[n - 1] != 1.0 {
            return Err(LpplsError::InvalidSeries(
                "normalized times must start at 0 and end at 1".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LpplsError::InvalidSeries("times must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LpplsError::InvalidSeries(format!("value {v} lies outside [0, 1]")));
        }
        Ok(Self {
            times,
            values,
            time_map,
            value_map,
        })
    }

    /// Min-max scale `raw` onto a uniform grid over `[0, 1]`. `time_map` sends
    /// the normalized axis back to calendar time.
    pub fn from_raw(raw: &[f64], time_map: Affine) -> Result<Self> {
        let (values, value_map) = min_max_scale(raw)?;
        Self::new(uniform_grid(raw.len()), values, time_map, value_map)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn last_time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Observations in raw units.
    pub fn raw_values(&self) -> Vec<f64> {
        self.values.iter().map(|&v| self.value_map.apply(v)).collect()
    }

    /// Same grid and maps, new normalized values (validated).
    pub fn with_values(&self, values: Vec<f64>, value_map: Affine) -> Result<Self> {
        Self::new(self.times.clone(), values, self.time_map, value_map)
    }
}

/// `n` evenly spaced points from 0 to 1 inclusive, with exact endpoints.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let last = (n - 1) as f64;
    (0..n).map(|i| i as f64 / last).collect()
}

/// Scale `raw` to `[0, 1]`. The returned map sends normalized values back to raw.
pub fn min_max_scale(raw: &[f64]) -> Result<(Vec<f64>, Affine)> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(LpplsError::NonFinite("raw series contains NaN or inf".into()));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(LpplsError::DegenerateRange);
    }
    let scaled = raw.iter().map(|&v| (v - lo) / range).collect();
    Ok((scaled, Affine::new(range, lo)))
}

/// Columns `f, g, h` of the design matrix.
pub(crate) fn basis_columns(times: &[f64], nl: NonlinearParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = times.len();
    let (mut f, mut g, mut h) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for &t in times {
        let b = eval_basis(t, nl.tc, nl.m, nl.omega)?;
        f.push(b.f);
        g.push(b.g);
        h.push(b.h);
    }
    Ok((f, g, h))
}

/// Normal matrix and right-hand side built from sums of `{1, f, g, h}` products.
pub fn normal_system(f: &[f64], g: &[f64], h: &[f64], values: &[f64]) -> (Matrix4<f64>, Vector4<f64>) {
    let mut gram = Matrix4::zeros();
    let mut rhs = Vector4::zeros();
    for i in 0..values.len() {
        let row = [1.0, f[i], g[i], h[i]];
        for r in 0..4 {
            rhs[r] += row[r] * values[i];
            for c in r..4 {
                gram[(r, c)] += row[r] * row[c];
            }
        }
    }
    for r in 0..4 {
        for c in 0..r {
            gram[(r, c)] = gram[(c, r)];
        }
    }
    (gram, rhs)
}

/// Condition number of a symmetric matrix from its eigenvalues; infinite when
/// it is not positive definite.
pub fn condition_number(gram: &Matrix4<f64>) -> f64 {
    let eig = SymmetricEigen::new(*gram).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Guarded, fully pivoted solve of the normal system.
pub fn solve_normal_system(gram: &Matrix4<f64>, rhs: &Vector4<f64>) -> Result<LinearParams> {
    let cond = condition_number(gram);
    if !(cond <= MAX_CONDITION) {
        return Err(LpplsError::SingularSystem { cond });
    }
    let x = gram
        .full_piv_lu()
        .solve(rhs)
        .ok_or(LpplsError::SingularSystem { cond })?;
    Ok(LinearParams::from_array([x[0], x[1], x[2], x[3]]))
}

/// Least-squares linear parameters for raw slices. Used by [`solve_linear`];
/// exposed for callers that hold data not satisfying [`Series`] invariants.
pub fn solve_linear_slices(times: &[f64], values: &[f64], nl: NonlinearParams) -> Result<LinearParams> {
    if times.len() != values.len() {
        return Err(LpplsError::ShapeMismatch(format!(
            "{} times vs {} values",
            times.len(),
            values.len()
        )));
    }
    let (f, g, h) = basis_columns(times, nl)?;
    let (gram, rhs) = normal_system(&f, &g, &h, values);
    solve_normal_system(&gram, &rhs)
}

/// Minimize the mean squared residual over `(A, B, C1, C2)` for fixed `(tc, m, omega)`.
pub fn solve_linear(series: &Series, tc: f64, m: f64, omega: f64) -> Result<LinearParams> {
    solve_linear_slices(series.times(), series.values(), NonlinearParams::new(tc, m, omega))
}

/// `(1/n) Σ (value_i - model(t_i))^2`.
pub fn residual_mse(series: &Series, params: &LpplsParams) -> Result<f64> {
    let mut acc = 0.0;
    for (&t, &v) in series.times().iter().zip(series.values()) {
        let r = v - eval_lppls(params, t)?;
        acc += r * r;
    }
    Ok(acc / series.len() as f64)
}

/// Linear solution and residual vector at one nonlinear trial point.
#[derive(Debug, Clone)]
pub struct Projection {
    pub linear: LinearParams,
    pub residuals: Vec<f64>,
}

impl Projection {
    pub fn mse(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum::<f64>() / self.residuals.len() as f64
    }
}

/// Variable projection: eliminate the linear parameters and return residuals
/// `value_i - model(t_i)` at the optimal `(A, B, C1, C2)`.
pub fn project(series: &Series, nl: NonlinearParams) -> Result<Projection> {
    let (f, g, h) = basis_columns(series.times(), nl)?;
    let (gram, rhs) = normal_system(&f, &g, &h, series.values());
    let linear = solve_normal_system(&gram, &rhs)?;
    let residuals = series
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| v - (linear.a + linear.b * f[i] + linear.c1 * g[i] + linear.c2 * h[i]))
        .collect();
    Ok(Projection { linear, residuals })
}

/// Reduced loss `F1(tc, m, omega)`.
pub fn reduced_loss(series: &Series, tc: f64, m: f64, omega: f64) -> Result<f64> {
    let linear = solve_linear(series, tc, m, omega)?;
    residual_mse(
        series,
        &LpplsParams::from_parts(NonlinearParams::new(tc, m, omega), linear),
    )
}

/// Evaluate the model over the series' time grid.
pub fn reconstruct(params: &LpplsParams, times: &[f64]) -> Result<Vec<f64>> {
    times.iter().map(|&t| eval_lppls(params, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{LN_2, PI};

    fn sample_params() -> LpplsParams {
        LpplsParams {
            tc: 1.1,
            m: 0.5,
            omega: 9.0,
            a: 0.8,
            b: -0.4,
            c1: 0.05,
            c2: 0.03,
        }
    }

    fn series_from(params: &LpplsParams, n: usize) -> Series {
        let times = uniform_grid(n);
        let values = reconstruct(params, &times).unwrap();
        // not min-max scaled: the generator output already lies inside [0, 1]
        Series::new(times, values, Affine::IDENTITY, Affine::IDENTITY).unwrap()
    }

    #[test]
    fn basis_at_unit_distance() {
        let b = eval_basis(0.0, 1.0, 0.5, 6.0).unwrap();
        assert_eq!((b.f, b.g, b.h), (1.0, 1.0, 0.0));
        let b = eval_basis(0.5, 1.5, 1.0, 2.0 * PI / LN_2).unwrap();
        assert_eq!((b.f, b.g, b.h), (1.0, 1.0, 0.0));
    }

    #[test]
    fn basis_matches_extended_precision() {
        // (tc - t) = 0.2; frozen from a 50-digit mpmath evaluation
        let b = eval_basis(0.9, 1.1, 0.3, 9.0).unwrap();
        assert!((b.f - 0.617_033_862_720_009_6).abs() < 1e-12);
        assert!((b.g - -0.210_288_947_838_089_3).abs() < 1e-12);
        assert!((b.h - -0.580_094_256_272_482_9).abs() < 1e-12);
    }

    #[test]
    fn basis_rejects_points_at_or_after_tc() {
        assert!(matches!(eval_basis(1.0, 1.0, 0.5, 6.0), Err(LpplsError::Domain(_))));
        assert!(matches!(eval_basis(1.2, 1.0, 0.5, 6.0), Err(LpplsError::Domain(_))));
    }

    #[test]
    fn constant_and_pure_power_law() {
        let mut p = sample_params();
        p.a = 0.7;
        p.b = 0.0;
        p.c1 = 0.0;
        p.c2 = 0.0;
        assert_eq!(eval_lppls(&p, 0.33).unwrap(), 0.7);
        let p = LpplsParams {
            tc: 1.2,
            m: 1.0,
            omega: 7.0,
            a: 0.0,
            b: 1.0,
            c1: 0.0,
            c2: 0.0,
        };
        assert!((eval_lppls(&p, 0.2).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_linear_recovers_generator() {
        let p = sample_params();
        let s = series_from(&p, 252);
        let lin = solve_linear(&s, p.tc, p.m, p.omega).unwrap();
        for (got, want) in lin.to_array().iter().zip(p.linear().to_array()) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        assert!(reduced_loss(&s, p.tc, p.m, p.omega).unwrap() <= 1e-16);
        assert!(residual_mse(&s, &p).unwrap() <= 1e-16);
    }

    #[test]
    fn solve_linear_constant_series() {
        let times = uniform_grid(100);
        let s = Series::new(times, vec![0.5; 100], Affine::IDENTITY, Affine::IDENTITY).unwrap();
        let lin = solve_linear(&s, 1.15, 0.4, 8.0).unwrap();
        assert!((lin.a - 0.5).abs() < 1e-8);
        assert!(lin.b.abs() < 1e-8 && lin.c1.abs() < 1e-8 && lin.c2.abs() < 1e-8);
    }

    #[test]
    fn solve_linear_singular_on_tiny_degenerate_input() {
        let r = solve_linear_slices(&[0.0, 0.5, 1.0], &[0.1, 0.4, 0.9], NonlinearParams::new(1.1, 1e-9, 9.0));
        assert!(matches!(r, Err(LpplsError::SingularSystem { .. })), "{r:?}");
    }

    #[test]
    fn offset_is_absorbed_by_a() {
        let p = sample_params();
        let times = uniform_grid(120);
        let delta = 0.05;
        let values: Vec<f64> = reconstruct(&p, &times)
            .unwrap()
            .into_iter()
            .map(|v| v + delta)
            .collect();
        let s = Series::new(times, values, Affine::IDENTITY, Affine::IDENTITY).unwrap();
        let mut shifted = p;
        shifted.a += delta;
        assert!(residual_mse(&s, &shifted).unwrap() <= 1e-16);
    }

    #[test]
    fn series_invariants_enforced() {
        let t = uniform_grid(30);
        assert!(Series::new(t.clone(), vec![0.5; 29], Affine::IDENTITY, Affine::IDENTITY).is_err());
        assert!(Series::new(uniform_grid(10), vec![0.5; 10], Affine::IDENTITY, Affine::IDENTITY).is_err());
        let mut bad = vec![0.5; 30];
        bad[3] = 1.5;
        assert!(Series::new(t.clone(), bad, Affine::IDENTITY, Affine::IDENTITY).is_err());
        let mut tt = t.clone();
        tt.swap(4, 5);
        assert!(Series::new(tt, vec![0.5; 30], Affine::IDENTITY, Affine::IDENTITY).is_err());
        assert!(matches!(min_max_scale(&[2.0; 40]), Err(LpplsError::DegenerateRange)));
    }

    #[test]
    fn affine_roundtrip() {
        let a = Affine::between((0.0, 1.0), (100.0, 351.0));
        assert_eq!(a.apply(1.0), 351.0);
        let inv = a.inverse();
        assert!((inv.apply(a.apply(0.37)) - 0.37).abs() < 1e-14);
        let c = a.compose(&Affine::new(2.0, 1.0));
        assert_eq!(c.apply(0.5), a.apply(2.0));
    }
}
