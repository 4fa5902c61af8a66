//! Minimal static SVG line charts, enough for CDF grids and forecast overlays.

use std::fmt::Write;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Line {
    pub label: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
    /// Draw as a right-continuous step function.
    pub step: bool,
    pub dashed: bool,
}

impl Line {
    pub fn new(label: impl Into<String>, color: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            color: color.to_string(),
            points,
            step: false,
            dashed: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub lines: Vec<Line>,
    /// Shaded vertical bands `(x0, x1)`.
    pub bands: Vec<(f64, f64)>,
    /// Vertical marker lines.
    pub markers: Vec<f64>,
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
    log_x: bool,
}

impl Frame {
    fn tx(&self, x: f64) -> f64 {
        let x = if self.log_x { x.log10() } else { x };
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn ty(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }
}

fn usable(log_x: bool, (x, y): (f64, f64)) -> bool {
    x.is_finite() && y.is_finite() && (!log_x || x > 0.0)
}

fn range(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    Some(if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
}

fn ticks(lo: f64, hi: f64, log: bool) -> Vec<f64> {
    if log {
        let (a, b) = (lo.floor() as i32, hi.ceil() as i32);
        let step = ((b - a) / 6).max(1);
        (a..=b)
            .step_by(step as usize)
            .map(|e| e as f64)
            .filter(|e| *e >= lo && *e <= hi)
            .collect()
    } else {
        let raw = (hi - lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(raw);
        let mut t = (lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= hi + 1e-9 * step {
            out.push(t);
            t += step;
        }
        out
    }
}

fn fmt_tick(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v as i32)
    } else if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1e4).round() / 1e4)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_panel(out: &mut String, p: &Panel, left: f64, top: f64, width: f64, height: f64) {
    let f = Frame {
        x0: left + 60.0,
        y0: top + 30.0,
        w: width - 80.0,
        h: height - 75.0,
        xr: (0.0, 1.0),
        yr: (0.0, 1.0),
        log_x: p.log_x,
    };
    let pts = || {
        p.lines
            .iter()
            .flat_map(|l| l.points.iter().copied())
            .filter(|pt| usable(p.log_x, *pt))
    };
    let tx = |x: f64| if p.log_x { x.log10() } else { x };
    let xs = pts().map(|(x, _)| tx(x)).chain(p.markers.iter().map(|m| tx(*m)));
    let xr = range(
        xs.chain(p.bands.iter().flat_map(|(a, b)| [tx(*a), tx(*b)]))
            .filter(|v| v.is_finite()),
    );
    let yr = range(pts().map(|(_, y)| y));
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
        left + width / 2.0,
        top + 18.0,
        escape(&p.title)
    );
    let (Some(xr), Some(yr)) = (xr, yr) else {
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">no finite data</text>"#,
            left + width / 2.0,
            top + height / 2.0
        );
        return;
    };
    let f = Frame { xr, yr, ..f };
    let _ = write!(
        out,
        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        f.x0, f.y0, f.w, f.h
    );
    for &(a, b) in &p.bands {
        let (xa, xb) = (f.tx(a).max(f.x0), f.tx(b).min(f.x0 + f.w));
        if xb > xa {
            let _ = write!(
                out,
                r##"<rect x="{xa:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#e88" fill-opacity="0.3"/>"##,
                f.y0,
                xb - xa,
                f.h
            );
        }
    }
    for &m in &p.markers {
        if usable(p.log_x, (m, 0.0)) {
            let x = f.tx(m);
            let _ = write!(
                out,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#000" stroke-dasharray="2,3"/>"##,
                f.y0,
                f.y0 + f.h
            );
        }
    }
    for t in ticks(xr.0, xr.1, p.log_x) {
        let x = f.x0 + (t - xr.0) / (xr.1 - xr.0) * f.w;
        let _ = write!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            f.y0 + f.h + 14.0,
            fmt_tick(t, p.log_x)
        );
    }
    for t in ticks(yr.0, yr.1, false) {
        let y = f.ty(t);
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            f.x0 - 4.0,
            y + 3.0,
            fmt_tick(t, false)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
        f.x0 + f.w / 2.0,
        f.y0 + f.h + 30.0,
        escape(&p.x_label)
    );
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        left + 14.0,
        f.y0 + f.h / 2.0,
        left + 14.0,
        f.y0 + f.h / 2.0,
        escape(&p.y_label)
    );
    for (i, l) in p.lines.iter().enumerate() {
        let kept: Vec<(f64, f64)> = l.points.iter().copied().filter(|pt| usable(p.log_x, *pt)).collect();
        if kept.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (k, &(x, y)) in kept.iter().enumerate() {
            let (px, py) = (f.tx(x), f.ty(y));
            if k == 0 {
                let _ = write!(d, "M{px:.2},{py:.2}");
            } else if l.step {
                let _ = write!(d, " H{px:.2} V{py:.2}");
            } else {
                let _ = write!(d, " L{px:.2},{py:.2}");
            }
        }
        let dash = if l.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = write!(
            out,
            r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.4"{dash}/>"#,
            l.color
        );
        let ly = f.y0 + 12.0 + 13.0 * i as f64;
        let _ = write!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
            f.x0 + 6.0,
            f.x0 + 22.0,
            l.color,
            f.x0 + 26.0,
            ly + 3.5,
            escape(&l.label)
        );
    }
}

/// Lay panels out row by row, `cols` per row.
pub fn render_grid(panels: &[Panel], cols: usize, panel_w: f64, panel_h: f64) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let (w, h) = (panel_w * cols as f64, panel_h * rows as f64);
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/>"#
    );
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        draw_panel(&mut out, p, c as f64 * panel_w, r as f64 * panel_h, panel_w, panel_h);
    }
    out.push_str("</svg>\n");
    out
}
