//! Minimal SVG plots: bar charts with error bars, line plots and contours.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

/// Linear map from data range `[lo, hi]` onto pixel range `[a, b]`.
struct Axis {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, a: f64, b: f64) -> Self {
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        Axis { lo, hi, a, b }
    }

    fn map(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }
}

fn frame(s: &mut String, x_label: &str, y: &Axis, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        s,
        "<path d=\"M{x0} {y0} L{x0} {y1} L{x1} {y1}\" fill=\"none\" stroke=\"black\"/>"
    );
    for t in 0..=4 {
        let v = y.lo + (y.hi - y.lo) * t as f64 / 4.0;
        let py = y.map(v);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            x0 - 4.0,
            py + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        H - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// One bar per label with a ±std error bar.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    labels: &[String],
    means: &[f64],
    stds: &[f64],
) -> String {
    let mut s = open(title);
    let top = means
        .iter()
        .zip(stds)
        .map(|(m, e)| m + e)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let bottom = means
        .iter()
        .zip(stds)
        .map(|(m, e)| m - e)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::min);
    let y = Axis::new(bottom, top * 1.05, H - BOTTOM, TOP);
    frame(&mut s, "", &y, y_label);
    let slot = (W - LEFT - RIGHT) / labels.len().max(1) as f64;
    for (i, label) in labels.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let (m, e) = (means[i], stds[i]);
        let (y0, ym) = (y.map(0.0), y.map(m));
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
            cx - slot * 0.3,
            ym.min(y0),
            slot * 0.6,
            (y0 - ym).abs(),
            PALETTE[i % PALETTE.len()]
        );
        if e > 0.0 {
            let (lo, hi) = (y.map(m - e), y.map(m + e));
            let _ = writeln!(
                s,
                "<path d=\"M{cx:.2} {lo:.2} L{cx:.2} {hi:.2} M{:.2} {lo:.2} L{:.2} {lo:.2} M{:.2} {hi:.2} L{:.2} {hi:.2}\" stroke=\"black\"/>",
                cx - 5.0,
                cx + 5.0,
                cx - 5.0,
                cx + 5.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            H - BOTTOM + 14.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub struct Series {
    pub name: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// Overlaid polylines with a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut s = open(title);
    let finite = |v: &&f64| v.is_finite();
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for sr in series {
        for x in sr.xs.iter().filter(finite) {
            xlo = xlo.min(*x);
            xhi = xhi.max(*x);
        }
        for y in sr.ys.iter().filter(finite) {
            ylo = ylo.min(*y);
            yhi = yhi.max(*y);
        }
    }
    if !xlo.is_finite() {
        (xlo, xhi) = (0.0, 1.0);
    }
    let x = Axis::new(xlo, xhi, LEFT, W - RIGHT);
    let y = Axis::new(ylo, yhi * 1.05, H - BOTTOM, TOP);
    frame(&mut s, x_label, &y, y_label);
    for (i, t) in [xlo, (xlo + xhi) / 2.0, xhi].iter().enumerate() {
        let anchor = ["start", "middle", "end"][i];
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"{anchor}\">{}</text>",
            x.map(*t),
            H - BOTTOM + 14.0,
            tick(*t)
        );
    }
    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = sr
            .xs
            .iter()
            .zip(&sr.ys)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", x.map(*a), y.map(*b)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        );
        let ly = TOP + 14.0 * i as f64 + 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{ly:.2}\" text-anchor=\"end\" fill=\"{color}\">{}</text>",
            W - RIGHT - 4.0,
            escape(&sr.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Iso-line segments of `values` (row-major over `coords × coords`, first
/// index along x) at `level`, by marching squares with linear
/// interpolation along cell edges.
pub fn contour_segments(coords: &[f64], values: &[f64], level: f64) -> Vec<[(f64, f64); 2]> {
    let r = coords.len();
    let v = |i: usize, j: usize| values[i * r + j];
    let mut out = Vec::new();
    for i in 0..r.saturating_sub(1) {
        for j in 0..r - 1 {
            // Corners counter-clockwise from (i, j).
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let mut pts = Vec::with_capacity(4);
            for e in 0..4 {
                // Shared edges interpolate identically from both cells.
                let (a, b) = (
                    corners[e].min(corners[(e + 1) % 4]),
                    corners[e].max(corners[(e + 1) % 4]),
                );
                let (va, vb) = (v(a.0, a.1), v(b.0, b.1));
                if !(va.is_finite() && vb.is_finite()) || (va < level) == (vb < level) {
                    continue;
                }
                let t = (level - va) / (vb - va);
                let lerp = |p: usize, q: usize| coords[p] + t * (coords[q] - coords[p]);
                pts.push((lerp(a.0, b.0), lerp(a.1, b.1)));
            }
            for pair in pts.chunks_exact(2) {
                out.push([pair[0], pair[1]]);
            }
        }
    }
    out
}

/// Contour plot of a square grid with `levels` evenly spaced iso-lines.
pub fn contour_plot(title: &str, coords: &[f64], values: &[f64], levels: usize) -> String {
    let mut s = open(title);
    let lo = coords.first().copied().unwrap_or(-1.0);
    let hi = coords.last().copied().unwrap_or(1.0);
    let side = (H - TOP - BOTTOM).min(W - LEFT - RIGHT);
    let x = Axis::new(lo, hi, LEFT, LEFT + side);
    let y = Axis::new(lo, hi, TOP + side, TOP);
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{side:.2}\" height=\"{side:.2}\" fill=\"none\" stroke=\"black\"/>"
    );
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let vmin = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if vmax > vmin {
        for l in 1..=levels {
            let level = vmin + (vmax - vmin) * l as f64 / (levels + 1) as f64;
            let mut d = String::new();
            for [(ax, ay), (bx, by)] in contour_segments(coords, values, level) {
                let _ = write!(
                    d,
                    "M{:.2} {:.2} L{:.2} {:.2} ",
                    x.map(ax),
                    y.map(ay),
                    x.map(bx),
                    y.map(by)
                );
            }
            let shade = (200.0 * (1.0 - l as f64 / levels as f64)) as u8;
            let _ = writeln!(
                s,
                "<path d=\"{}\" fill=\"none\" stroke=\"rgb({shade},{shade},255)\"/>",
                d.trim_end()
            );
        }
    }
    let (cx, cy) = (x.map(0.0), y.map(0.0));
    let _ = writeln!(
        s,
        "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"red\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{} to {}</text>",
        LEFT + side / 2.0,
        TOP + side + 16.0,
        tick(lo),
        tick(hi)
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_of_plane_is_exact() {
        let coords: Vec<f64> = (0..7).map(|i| -1.0 + i as f64 / 3.0).collect();
        let f = |a: f64, b: f64| 2.0 * a - b + 0.25;
        let values: Vec<f64> = coords
            .iter()
            .flat_map(|&a| coords.iter().map(move |&b| f(a, b)))
            .collect();
        for level in [-1.3, 0.0, 0.7, 2.1] {
            let segs = contour_segments(&coords, &values, level);
            assert!(!segs.is_empty());
            for [p, q] in segs {
                assert!((f(p.0, p.1) - level).abs() < 1e-12);
                assert!((f(q.0, q.1) - level).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paraboloid_contour_closes_around_origin() {
        let r = 41;
        let coords: Vec<f64> = (0..r)
            .map(|i| -1.0 + 2.0 * i as f64 / (r - 1) as f64)
            .collect();
        let values: Vec<f64> = coords
            .iter()
            .flat_map(|&a| coords.iter().map(move |&b| a * a + b * b))
            .collect();
        // No grid point lies exactly on this level.
        let level = 0.23;
        let segs = contour_segments(&coords, &values, level);
        // Every endpoint is shared by exactly two segments on a closed curve.
        let key = |p: (f64, f64)| ((p.0 * 1e9).round() as i64, (p.1 * 1e9).round() as i64);
        let mut counts = std::collections::HashMap::new();
        for [p, q] in &segs {
            *counts.entry(key(*p)).or_insert(0) += 1;
            *counts.entry(key(*q)).or_insert(0) += 1;
            let rad = (p.0 * p.0 + p.1 * p.1).sqrt();
            assert!((rad - level.sqrt()).abs() < 0.01);
        }
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn charts_are_well_formed() {
        let labels = vec!["T".to_string(), "S1".to_string()];
        let svg = bar_chart("trace", "tr", &labels, &[3.0, 2.0], &[0.5, 0.0]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 3);
        let line = line_chart(
            "d",
            "x",
            "y",
            &[Series {
                name: "a<b".into(),
                xs: vec![0.0, 1.0],
                ys: vec![1.0, 2.0],
            }],
        );
        assert!(line.contains("a&lt;b"));
    }
}
