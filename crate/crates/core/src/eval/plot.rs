//! Minimal SVG figures for reports.

use std::fmt::Write;

use super::Series;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(title: &str, x_label: &str, y_label: &str, frame: &Frame) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = write!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 16.0, escape(x_label));
    let _ = write!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (v, anchor) in [(frame.x.0, "start"), (frame.x.1, "end")] {
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#, frame.px(v), y0 + 16.0, tick(v));
    }
    for v in [frame.y.0, frame.y.1] {
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, frame.py(v) + 4.0, tick(v));
    }
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Polylines, one per series, with a legend.
pub fn line_chart(title: &str, series: &[Series]) -> String {
    let frame = Frame::fit(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.0)),
        series.iter().flat_map(|s| s.points.iter().map(|p| p.1)),
    );
    let (xl, yl) = series.first().map(|s| (s.x_label.as_str(), s.y_label.as_str())).unwrap_or(("", ""));
    let mut s = open(title, xl, yl, &frame);
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", frame.px(p.0), frame.py(p.1)))
            .collect();
        let _ = write!(s, r#"<polyline points="{}" stroke="{colour}" fill="none" stroke-width="1.5"/>"#, path.join(" "));
        let ly = MARGIN + 16.0 * i as f64;
        let _ = write!(
            s,
            r#"<text x="{}" y="{ly}" text-anchor="end" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with category labels.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let frame = Frame {
        x: (0.0, bars.len().max(1) as f64),
        y: (0.0, if top > 0.0 { top * 1.1 } else { 1.0 }),
    };
    let mut s = open(title, "", y_label, &frame);
    for (i, (label, v)) in bars.iter().enumerate() {
        let (x0, x1) = (frame.px(i as f64 + 0.15), frame.px(i as f64 + 0.85));
        let y = frame.py(if v.is_finite() { *v } else { 0.0 });
        let _ = write!(
            s,
            r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x1 - x0,
            frame.py(0.0) - y,
            PALETTE[0]
        );
        let cx = (x0 + x1) / 2.0;
        let ly = HEIGHT - MARGIN + 12.0;
        let _ = write!(
            s,
            r#"<text x="{cx:.2}" y="{ly}" font-size="9" text-anchor="end" transform="rotate(-35 {cx:.2} {ly})">{}</text>"#,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Points coloured by a scalar on a blue to red ramp.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64, f64)]) -> String {
    let frame = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let (lo, hi) = points
        .iter()
        .map(|p| p.2)
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let mut s = open(title, x_label, y_label, &frame);
    for &(x, y, c) in points {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let t = if hi > lo { (c - lo) / (hi - lo) } else { 0.5 };
        let (r, b) = ((255.0 * t) as u8, (255.0 * (1.0 - t)) as u8);
        let _ = write!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="rgb({r},60,{b})" fill-opacity="0.7"/>"#,
            frame.px(x),
            frame.py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let ser = Series {
            name: "a<b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)],
        };
        let svg = line_chart("t", &[ser]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        let bars = bar_chart("b", "mm", &[("do(a+5)".into(), 0.2), ("do(a-5)".into(), 0.1)]);
        assert_eq!(bars.matches("<rect").count(), 3);
        let sc = scatter("s", "x", "y", &[(0.0, 0.0, 1.0), (1.0, 1.0, 2.0)]);
        assert_eq!(sc.matches("<circle").count(), 2);
        assert_eq!(line_chart("t", &[]), line_chart("t", &[]));
    }
}
