//! Minimal SVG figures: mean and IQR lines over an optional density-error
//! heat strip.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;
const MAX_CELLS_T: usize = 120;
const MAX_CELLS_X: usize = 80;

/// Per-time mean and quartiles of one process.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub label: String,
    pub color: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
}

/// `values[i][k]` at `(times[i], xs[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatStrip {
    pub label: String,
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

struct Frame {
    t0: f64,
    t1: f64,
    x0: f64,
    x1: f64,
}

impl Frame {
    fn px(&self, t: f64) -> f64 {
        LEFT + (t - self.t0) / (self.t1 - self.t0) * (W - LEFT - RIGHT)
    }

    fn py(&self, x: f64) -> f64 {
        H - BOTTOM - (x - self.x0) / (self.x1 - self.x0) * (H - TOP - BOTTOM)
    }
}

fn extent<'a>(it: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn polyline(s: &mut String, f: &Frame, ts: &[f64], ys: &[f64], color: &str, dashed: bool) {
    let pts: Vec<String> = ts
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(&t, &y)| format!("{:.2},{:.2}", f.px(t), f.py(y)))
        .collect();
    let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"{dash} points=\"{}\"/>",
        pts.join(" ")
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the bands (solid mean, dashed quartiles) over `heat`.
pub fn overlay(title: &str, heat: Option<&HeatStrip>, bands: &[Band]) -> String {
    let (mut t0, mut t1) = extent(bands.iter().flat_map(|b| b.times.iter()));
    let (mut x0, mut x1) = extent(bands.iter().flat_map(|b| b.q1.iter().chain(&b.q3).chain(&b.mean)));
    if let Some(h) = heat {
        let (a, b) = extent(h.times.iter());
        let (c, d) = extent(h.xs.iter());
        (t0, t1, x0, x1) = (t0.min(a), t1.max(b), c, d);
    }
    t0 = t0.min(0.0);
    if !(t1 > t0) {
        t1 = t0 + 1.0;
    }
    if !(x1 > x0) {
        (x0, x1) = (x0 - 1.0, x0 + 1.0);
    }
    let f = Frame { t0, t1, x0, x1 };

    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">");
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{LEFT}\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\">{}</text>", escape(title));

    if let Some(h) = heat {
        let vmax = h.values.iter().flatten().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
        let st = h.times.len().div_ceil(MAX_CELLS_T).max(1);
        let sx = h.xs.len().div_ceil(MAX_CELLS_X).max(1);
        let dt = (f.px(t1) - f.px(t0)) / h.times.len() as f64 * st as f64;
        let dx = (f.py(x0) - f.py(x1)) / h.xs.len() as f64 * sx as f64;
        for i in (0..h.times.len()).step_by(st) {
            for k in (0..h.xs.len()).step_by(sx) {
                let v = h.values[i][k];
                if !(v > 0.0) || vmax == 0.0 {
                    continue;
                }
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#d94801\" fill-opacity=\"{:.3}\"/>",
                    f.px(h.times[i]) - dt,
                    f.py(h.xs[k]) - dx / 2.0,
                    dt,
                    dx,
                    (v / vmax).min(1.0)
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{} (max {:.3e})</text>",
            W - RIGHT + 8.0,
            TOP + 12.0,
            escape(&h.label),
            vmax
        );
    }

    for (n, b) in bands.iter().enumerate() {
        polyline(&mut s, &f, &b.times, &b.mean, &b.color, false);
        polyline(&mut s, &f, &b.times, &b.q1, &b.color, true);
        polyline(&mut s, &f, &b.times, &b.q3, &b.color, true);
        let y = TOP + 36.0 + 18.0 * n as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" stroke-width=\"2\"/>",
            W - RIGHT + 8.0,
            W - RIGHT + 26.0,
            b.color
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            W - RIGHT + 30.0,
            y + 4.0,
            escape(&b.label)
        );
    }

    let (l, r, t, btm) = (f.px(t0), f.px(t1), f.py(x1), f.py(x0));
    let _ = writeln!(s, "<rect x=\"{l:.2}\" y=\"{t:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>", r - l, btm - t);
    for k in 0..=4 {
        let tv = t0 + (t1 - t0) * k as f64 / 4.0;
        let xv = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{tv:.2}</text>",
            f.px(tv),
            btm + 14.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{xv:.2}</text>",
            l - 4.0,
            f.py(xv) + 3.0
        );
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">t</text>", (l + r) / 2.0, H - 8.0);
    s.push_str("</svg>\n");
    s
}
