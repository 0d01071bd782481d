//! Minimal SVG charts: line overlays with shaded bands, error-bar curves and
//! scatter plots with a diagonal reference.

use std::fmt::Write as _;

use gflow_core::causality::{mean, std_dev};

const W: f64 = 640.0;
const H: f64 = 240.0;
const PAD: f64 = 44.0;
const COLORS: [&str; 6] = ["black", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Pointwise mean and `mean -/+ 2 std` over repeats (population std).
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn band(runs: &[Vec<f64>]) -> Band {
    let n = runs.first().map_or(0, Vec::len);
    let mut b = Band { mean: Vec::with_capacity(n), lower: Vec::with_capacity(n), upper: Vec::with_capacity(n) };
    let mut col = Vec::with_capacity(runs.len());
    for i in 0..n {
        col.clear();
        col.extend(runs.iter().map(|r| r[i]));
        let (m, s) = (mean(&col), std_dev(&col));
        b.mean.push(m);
        b.lower.push(m - 2.0 * s);
        b.upper.push(m + 2.0 * s);
    }
    b
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    top: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, top: f64) -> Self {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Self { x0, x1, y0, y1, top }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        self.top + H - PAD + (y - self.y0) / (self.y1 - self.y0) * -(H - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (l, r) = (PAD, W - PAD);
        let (t, b) = (self.top + PAD, self.top + H - PAD);
        let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="gray"/>"#, r - l, b - t);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, self.top + 18.0, esc(title));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, W / 2.0, b + 30.0, esc(xlabel));
        let _ = writeln!(
            out,
            r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            esc(ylabel)
        );
        for (v, x) in [(self.x0, l), (self.x1, r)] {
            let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{}</text>"#, b + 14.0, tick(v));
        }
        for (v, y) in [(self.y0, b), (self.y1, t)] {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#, l - 4.0, y + 3.0, tick(v));
        }
    }

    fn polyline(&self, out: &mut String, xs: &[f64], ys: &[f64], color: &str, dash: bool) {
        let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let dash = if dash { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#, pts.join(" "));
    }

    fn area(&self, out: &mut String, xs: &[f64], lo: &[f64], hi: &[f64], color: &str) {
        let mut pts: Vec<String> = xs.iter().zip(hi).map(|(&x, &y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        pts.extend(xs.iter().zip(lo).rev().map(|(&x, &y)| format!("{:.2},{:.2}", self.px(x), self.py(y))));
        let _ = writeln!(out, r#"<polygon fill="{color}" fill-opacity="0.25" stroke="none" points="{}"/>"#, pts.join(" "));
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in v.filter(|x| x.is_finite()) {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" viewBox=\"0 0 {W} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// One panel per series: the truth (solid) and the mean prediction (dashed)
/// inside its two-sigma band.
pub struct Panel<'a> {
    pub title: String,
    pub truth: &'a [f64],
    pub band: &'a Band,
}

pub fn overlay_svg(times: &[f64], pred_times: &[f64], panels: &[Panel], xlabel: &str) -> String {
    let mut out = open(H * panels.len().max(1) as f64);
    for (i, p) in panels.iter().enumerate() {
        let ys = p.truth.iter().chain(&p.band.lower).chain(&p.band.upper).copied();
        let f = Frame::new(times.iter().copied(), ys, i as f64 * H);
        f.axes(&mut out, &p.title, xlabel, "value");
        f.area(&mut out, pred_times, &p.band.lower, &p.band.upper, COLORS[1]);
        f.polyline(&mut out, times, p.truth, COLORS[0], false);
        f.polyline(&mut out, pred_times, &p.band.mean, COLORS[1], true);
    }
    out.push_str("</svg>\n");
    out
}

/// Mean test MSE against the number of delays, with two-sigma error bars.
pub fn mse_curve_svg(points: &[(f64, f64, f64)]) -> String {
    let mut out = open(H);
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys = points.iter().flat_map(|p| [p.1 - 2.0 * p.2, p.1 + 2.0 * p.2]);
    let f = Frame::new(xs.iter().copied(), ys, 0.0);
    f.axes(&mut out, "test MSE vs number of delays", "m", "MSE");
    let means: Vec<f64> = points.iter().map(|p| p.1).collect();
    f.polyline(&mut out, &xs, &means, COLORS[1], false);
    for &(x, m, s) in points {
        let (px, lo, hi) = (f.px(x), f.py(m - 2.0 * s), f.py(m + 2.0 * s));
        let _ = writeln!(out, r#"<line x1="{px:.2}" y1="{lo:.2}" x2="{px:.2}" y2="{hi:.2}" stroke="{}"/>"#, COLORS[1]);
        let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{:.2}" r="3" fill="{}"/>"#, f.py(m), COLORS[1]);
    }
    out.push_str("</svg>\n");
    out
}

/// Observed against predicted values, one colour per group, with `y = x`.
pub fn scatter_svg(title: &str, groups: &[(String, Vec<(f64, f64)>)], xlabel: &str, ylabel: &str) -> String {
    let mut out = open(H);
    let all = groups.iter().flat_map(|g| g.1.iter().flat_map(|&(a, b)| [a, b]));
    let (lo, hi) = bounds(all);
    let f = Frame { x0: lo, x1: hi, y0: lo, y1: hi, top: 0.0 };
    f.axes(&mut out, title, xlabel, ylabel);
    let _ = writeln!(
        out,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4,3"/>"#,
        f.px(lo),
        f.py(lo),
        f.px(hi),
        f.py(hi)
    );
    for (gi, (name, pts)) in groups.iter().enumerate() {
        let c = COLORS[(gi + 1) % COLORS.len()];
        for &(a, b) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"#, f.px(a), f.py(b));
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" fill="{c}">{}</text>"#, PAD + 6.0, PAD + 12.0 * (gi + 1) as f64, esc(name));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_is_two_sigma_each_side() {
        let b = band(&[vec![1.0, 2.0], vec![3.0, 2.0]]);
        assert_eq!(b.mean, vec![2.0, 2.0]);
        assert_eq!(b.upper[0] - b.mean[0], 2.0);
        assert_eq!(b.mean[0] - b.lower[0], 2.0);
        assert_eq!(b.upper[1], b.lower[1]);
    }

    #[test]
    fn identical_curves_draw_identical_points() {
        let t = [0.0, 1.0, 2.0];
        let v = [0.0, 1.0, 0.5];
        let b = band(&[v.to_vec()]);
        let svg = overlay_svg(&t, &t, &[Panel { title: "a".into(), truth: &v, band: &b }], "t");
        let lines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
        let pts = |l: &str| l.split("points=").nth(1).unwrap().to_string();
        assert_eq!(pts(lines[0]), pts(lines[1]));
    }

    #[test]
    fn diagonal_scatter_sits_on_reference() {
        let svg = scatter_svg("p", &[("g".into(), vec![(1.0, 1.0), (2.0, 2.0)])], "obs", "pred");
        for l in svg.lines().filter(|l| l.starts_with("<circle")) {
            let num = |k: &str| -> f64 {
                let s = l.split(&format!("{k}=\"")).nth(1).unwrap();
                s[..s.find('"').unwrap()].parse().unwrap()
            };
            // y = x maps to a straight line through the frame corners
            let (cx, cy) = (num("cx"), num("cy"));
            let t = (cx - PAD) / (W - 2.0 * PAD);
            assert!((cy - (H - PAD - t * (H - 2.0 * PAD))).abs() < 0.02);
        }
    }
}
