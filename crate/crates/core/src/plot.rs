//! Minimal SVG scatter and line plots with round-number axis ticks.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of<'a>(vals: impl Iterator<Item = &'a f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in vals.filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self { lo: lo - 0.5, hi: hi + 0.5 };
        }
        let pad = 0.05 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad }
    }
}

/// Tick positions at multiples of 1, 2 or 5 times a power of ten.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) || target == 0 {
        return vec![lo];
    }
    let raw = (hi - lo) / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

struct Frame {
    x: Range,
    y: Range,
    out: String,
}

impl Frame {
    fn new(title: &str, xlabel: &str, ylabel: &str, x: Range, y: Range) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
        let mut f = Self { x, y, out };
        f.axes();
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.lo) / (self.x.hi - self.x.lo) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.lo) / (self.y.hi - self.y.lo) * (H - 2.0 * MARGIN)
    }

    fn axes(&mut self) {
        let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
        let _ = writeln!(self.out, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
        for t in nice_ticks(self.x.lo, self.x.hi, 6) {
            let p = self.px(t);
            let _ = writeln!(self.out, r#"<line x1="{p:.2}" y1="{y0}" x2="{p:.2}" y2="{}" stroke="black"/>"#, y0 + 5.0);
            let _ = writeln!(self.out, r#"<text x="{p:.2}" y="{}" text-anchor="middle">{}</text>"#, y0 + 18.0, label(t));
        }
        for t in nice_ticks(self.y.lo, self.y.hi, 6) {
            let p = self.py(t);
            let _ = writeln!(self.out, r#"<line x1="{}" y1="{p:.2}" x2="{x0}" y2="{p:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(self.out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 8.0, p + 4.0, label(t));
        }
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let y = MARGIN + 16.0 + 16.0 * i as f64;
            let x = W - MARGIN - 140.0;
            let c = PALETTE[i % PALETTE.len()];
            let _ = writeln!(self.out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{c}"/>"#, y - 9.0);
            let _ = writeln!(self.out, r#"<text x="{}" y="{y}">{}</text>"#, x + 16.0, escape(name));
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn label(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A named set of 2-D points.
pub struct Series<'a> {
    pub name: &'a str,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl<'a> Series<'a> {
    pub fn new(name: &'a str, points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let (xs, ys) = points.into_iter().unzip();
        Self { name, xs, ys }
    }

    /// First two coordinates of a flat point buffer.
    pub fn from_coords(name: &'a str, coords: &[f64], dim: usize) -> Self {
        Self::new(name, coords.chunks_exact(dim).map(|p| (p[0], if dim > 1 { p[1] } else { 0.0 })))
    }
}

fn frame(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> Frame {
    let x = Range::of(series.iter().flat_map(|s| s.xs.iter()));
    let y = Range::of(series.iter().flat_map(|s| s.ys.iter()));
    let mut f = Frame::new(title, xlabel, ylabel, x, y);
    f.legend(&series.iter().map(|s| s.name).collect::<Vec<_>>());
    f
}

pub fn scatter(series: &[Series], title: &str) -> String {
    let mut f = frame(series, title, "x", "y");
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(f.out, r#"<g fill="{c}" fill-opacity="0.5">"#);
        for (x, y) in s.xs.iter().zip(&s.ys).filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(f.out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#, f.px(*x), f.py(*y));
        }
        f.out.push_str("</g>\n");
    }
    f.finish()
}

pub fn lines(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut f = frame(series, title, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .xs
            .iter()
            .zip(&s.ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
            .collect();
        let _ = writeln!(f.out, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
    }
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round() {
        assert_eq!(nice_ticks(0.0, 1.0, 5), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(nice_ticks(-3.0, 7.0, 5), vec![-2.0, 0.0, 2.0, 4.0, 6.0]);
        assert_eq!(nice_ticks(1.0, 1.0, 5), vec![1.0]);
    }

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let s = [Series::new("a", [(0.0, 1.0), (1.0, 2.0)]), Series::new("b<c", [(0.5, f64::NAN)])];
        let one = scatter(&s, "t");
        assert_eq!(one, scatter(&s, "t"));
        assert!(one.starts_with("<svg") && one.trim_end().ends_with("</svg>"));
        assert_eq!(one.matches("<circle").count(), 2);
        assert!(one.contains("b&lt;c"));
        let l = lines(&s, "loss", "epoch", "value");
        assert_eq!(l.matches("<polyline").count(), 2);
    }
}
