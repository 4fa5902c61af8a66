//! Types shared by the three calibrators.

use serde::{Deserialize, Serialize};

use crate::error::{LpplsError, Result};
use crate::model::LpplsParams;
use crate::noise::NoiseKind;

/// Smallest admissible gap between the last observation and `tc` on the normalized axis.
pub const TC_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "M-LNN")]
    Mlnn,
    #[serde(rename = "P-LNN-White")]
    PlnnWhite,
    #[serde(rename = "P-LNN-AR1")]
    PlnnAr1,
    #[serde(rename = "P-LNN-Both")]
    PlnnBoth,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Lm,
        Method::Mlnn,
        Method::PlnnWhite,
        Method::PlnnAr1,
        Method::PlnnBoth,
    ];

    pub fn plnn(kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::White => Method::PlnnWhite,
            NoiseKind::Ar1 => Method::PlnnAr1,
            NoiseKind::Both => Method::PlnnBoth,
        }
    }

    /// Training noise of a P-LNN variant.
    pub fn plnn_kind(self) -> Option<NoiseKind> {
        match self {
            Method::PlnnWhite => Some(NoiseKind::White),
            Method::PlnnAr1 => Some(NoiseKind::Ar1),
            Method::PlnnBoth => Some(NoiseKind::Both),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lm => "LM",
            Method::Mlnn => "M-LNN",
            Method::PlnnWhite => "P-LNN-White",
            Method::PlnnAr1 => "P-LNN-AR1",
            Method::PlnnBoth => "P-LNN-Both",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = LpplsError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().to_ascii_lowercase().replace('-', "") == key)
            .ok_or_else(|| LpplsError::config("", format!("unknown method {s:?}")))
    }
}

/// Box constraints on `(tc, m, omega)` in the normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub tc: (f64, f64),
    pub m: (f64, f64),
    pub omega: (f64, f64),
}

impl Default for Bounds {
    /// `tc` within 20% of the window end, `m` in `[0.1, 1]`, `omega` in `[6, 13]`.
    fn default() -> Self {
        Self {
            tc: (0.8, 1.2),
            m: (0.1, 1.0),
            omega: (6.0, 13.0),
        }
    }
}

impl Bounds {
    pub fn lower(&self) -> [f64; 3] {
        [self.tc.0, self.m.0, self.omega.0]
    }

    pub fn upper(&self) -> [f64; 3] {
        [self.tc.1, self.m.1, self.omega.1]
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, (lo, hi)) in [("tc", self.tc), ("m", self.m), ("omega", self.omega)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(LpplsError::config(
                    format!("{prefix}/{name}"),
                    format!("bounds ({lo}, {hi}) must be finite and nonempty"),
                ));
            }
        }
        if !(self.m.0 > 0.0) {
            return Err(LpplsError::config(format!("{prefix}/m"), "lower bound must be > 0"));
        }
        Ok(())
    }

    /// The box with the `tc` lower end raised to `last_time + TC_MARGIN`.
    pub fn effective(&self, last_time: f64) -> Result<Bounds> {
        let lo = self.tc.0.max(last_time + TC_MARGIN);
        if !(lo < self.tc.1) {
            return Err(LpplsError::config(
                "/bounds/tc",
                format!("upper bound {} leaves no room after the last observation", self.tc.1),
            ));
        }
        Ok(Bounds {
            tc: (lo, self.tc.1),
            ..*self
        })
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = (self.lower(), self.upper());
        std::array::from_fn(|k| p[k].clamp(lo[k], hi[k]))
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        (0..3).all(|k| lo[k] <= p[k] && p[k] <= hi[k])
    }

    /// Whether any coordinate sits on a face of the box.
    pub fn on_boundary(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        (0..3).any(|k| p[k] <= lo[k] || p[k] >= hi[k])
    }
}

/// Method-specific extras attached to a [`CalibrationResult`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// LM: index of the winning multi-start.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_index: Option<usize>,
    /// LM: starts that raised an error.
    pub failed_starts: usize,
    /// Objective after every accepted LM step, or total loss per M-LNN epoch.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
    /// M-LNN: epoch of the returned snapshot.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    /// Returned parameters lie on a face of the search box.
    pub boundary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: Method,
    pub params: LpplsParams,
    pub final_mse: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Seconds.
    pub wall_clock: f64,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

impl CalibrationResult {
    /// `tc` on the calendar axis of a series with the given time map.
    pub fn calendar_tc(&self, time_map: &crate::model::Affine) -> f64 {
        time_map.apply(self.params.tc)
    }
}
