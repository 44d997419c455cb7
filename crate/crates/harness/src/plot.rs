//! Minimal hand-written SVG line plots.

use std::fmt::Write as _;

use crate::fit::DecayFit;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points }
    }
}

/// A fitted power law drawn over `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOverlay {
    pub name: String,
    pub fit: DecayFit,
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotStyle {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub fits: Vec<FitOverlay>,
}

impl PlotStyle {
    pub fn log_log(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), log_x: true, log_y: true, fits: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    NoSeries,
    #[error("series '{0}' needs at least 2 points")]
    TooFewPoints(String),
    #[error("series '{0}' has no points usable on the chosen axes")]
    NoUsablePoints(String),
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(log: bool, values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.04 * (hi - lo);
        Self { log, lo: lo - pad, hi: hi + pad }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn label(&self, f: f64) -> String {
        let v = self.lo + f * (self.hi - self.lo);
        if self.log {
            format!("1e{v:.1}")
        } else {
            format!("{v:.3}")
        }
    }
}

fn usable(style: &PlotStyle, p: &(f64, f64)) -> bool {
    p.0.is_finite() && p.1.is_finite() && (!style.log_x || p.0 > 0.0) && (!style.log_y || p.1 > 0.0)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG document. Points that cannot be drawn on logarithmic axes are skipped.
pub fn emit_plot(series: &[Series], style: &PlotStyle) -> Result<String, PlotError> {
    if series.is_empty() {
        return Err(PlotError::NoSeries);
    }
    for s in series {
        if s.points.len() < 2 {
            return Err(PlotError::TooFewPoints(s.name.clone()));
        }
        if !s.points.iter().any(|p| usable(style, p)) {
            return Err(PlotError::NoUsablePoints(s.name.clone()));
        }
    }
    let fit_points = style.fits.iter().flat_map(|f| [(f.x_min, f.fit.eval(f.x_min)), (f.x_max, f.fit.eval(f.x_max))]);
    let all: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).chain(fit_points).filter(|p| usable(style, p)).collect();
    let ax = Axis::new(style.log_x, all.iter().map(|p| p.0));
    let ay = Axis::new(style.log_y, all.iter().map(|p| p.1));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let px = |x: f64| LEFT + ax.frac(x) * pw;
    let py = |y: f64| TOP + (1.0 - ay.frac(y)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, LEFT + pw / 2.0, escape(&style.title));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (x, y) = (LEFT + f * pw, TOP + (1.0 - f) * ph);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ccc"/>"##, TOP, TOP + ph);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ccc"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, ax.label(f));
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 4.0, y + 4.0, ay.label(f));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 14.0, escape(&style.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&style.y_label)
    );
    let mut legend = 0usize;
    let mut legend_entry = |s: &mut String, name: &str, color: &str, dashed: bool| {
        let y = TOP + 12.0 + 18.0 * legend as f64;
        let x = W - RIGHT + 12.0;
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(s, r#"<line class="legend" x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#, x + 22.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 28.0, y + 4.0, escape(name));
        legend += 1;
    };
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> =
            ser.points.iter().filter(|p| usable(style, p)).map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        for p in ser.points.iter().filter(|p| usable(style, p)) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(p.0), py(p.1));
        }
        legend_entry(&mut s, &ser.name, color, false);
    }
    for (i, f) in style.fits.iter().enumerate() {
        let color = COLORS[(series.len() + i) % COLORS.len()];
        let (y0, y1) = (f.fit.eval(f.x_min), f.fit.eval(f.x_max));
        let _ = writeln!(
            s,
            r#"<line class="fit" data-x0="{:e}" data-y0="{:e}" data-x1="{:e}" data-y1="{:e}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="5,3"/>"#,
            f.x_min,
            y0,
            f.x_max,
            y1,
            px(f.x_min),
            py(y0),
            px(f.x_max),
            py(y1)
        );
        legend_entry(&mut s, &format!("{} (slope {:.3})", f.name, f.fit.exponent), color, true);
    }
    s.push_str("</svg>\n");
    Ok(s)
}
