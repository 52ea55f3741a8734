//! Minimal static SVG figures: ROC curves and labeled scatter plots.

use std::fmt::Write;

const SIZE: f64 = 360.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 30.0;
const WIDTH: f64 = LEFT + SIZE + 140.0;
const HEIGHT: f64 = TOP + SIZE + 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Axis range for one dimension of a plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const UNIT: Range = Range { lo: 0.0, hi: 1.0 };

    /// Smallest range covering `values` with a small margin; falls back to the unit range.
    pub fn covering(values: impl Iterator<Item = f64>) -> Range {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Range::UNIT;
        }
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.05 };
        Range { lo: lo - pad, hi: hi + pad }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

/// Canvas coordinates of a data point.
pub fn to_canvas(x: f64, y: f64, xr: Range, yr: Range) -> (f64, f64) {
    (LEFT + xr.frac(x) * SIZE, TOP + (1.0 - yr.frac(y)) * SIZE)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Canvas {
    out: String,
}

impl Canvas {
    fn new(title: &str, meta: Option<&str>) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        if let Some(m) = meta {
            let _ = writeln!(out, "<!-- {} -->", m.replace("--", "- -"));
        }
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, LEFT + SIZE / 2.0, escape(title));
        Canvas { out }
    }

    fn axes(&mut self, xr: Range, yr: Range, xlabel: &str, ylabel: &str) {
        let _ = writeln!(self.out, r#"<rect x="{LEFT}" y="{TOP}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (xr.lo + t * (xr.hi - xr.lo), yr.lo + t * (yr.hi - yr.lo));
            let (cx, _) = to_canvas(xv, yr.lo, xr, yr);
            let (_, cy) = to_canvas(xr.lo, yv, xr, yr);
            let _ = writeln!(self.out, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#, TOP + SIZE + 14.0);
            let _ = writeln!(self.out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#, LEFT - 4.0, cy + 4.0);
        }
        let _ = writeln!(self.out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + SIZE / 2.0, TOP + SIZE + 32.0, escape(xlabel));
        let _ = writeln!(
            self.out,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            TOP + SIZE / 2.0,
            TOP + SIZE / 2.0,
            escape(ylabel)
        );
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray"{dash}/>"#,
            a.0, a.1, b.0, b.1
        );
    }

    fn legend(&mut self, i: usize, label: &str) {
        let y = TOP + 12.0 + 16.0 * i as f64;
        let x = LEFT + SIZE + 12.0;
        let _ = writeln!(self.out, r#"<rect x="{x}" y="{:.2}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(self.out, r#"<text x="{}" y="{y:.2}">{}</text>"#, x + 14.0, escape(label));
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// One polyline per curve of `(fpr, tpr)` points, with the chance diagonal.
pub fn roc_svg(curves: &[(String, Vec<(f64, f64)>)], title: &str, meta: Option<&str>) -> String {
    let (xr, yr) = (Range::UNIT, Range::UNIT);
    let mut c = Canvas::new(title, meta);
    c.axes(xr, yr, "false positive rate", "true positive rate");
    c.line(to_canvas(0.0, 0.0, xr, yr), to_canvas(1.0, 1.0, xr, yr), true);
    for (i, (label, pts)) in curves.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (cx, cy) = to_canvas(x, y, xr, yr);
                format!("{cx:.2},{cy:.2}")
            })
            .collect();
        let _ = writeln!(
            c.out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            PALETTE[i % PALETTE.len()],
            coords.join(" "),
            escape(label)
        );
        c.legend(i, label);
    }
    c.finish()
}

/// Labeled points; `diagonal` draws y = x, `zero_line` draws y = 0.
pub struct Scatter<'a> {
    pub title: &'a str,
    pub xlabel: &'a str,
    pub ylabel: &'a str,
    pub points: &'a [(String, f64, f64)],
    pub diagonal: bool,
    pub zero_line: bool,
}

pub fn scatter_svg(s: &Scatter, meta: Option<&str>) -> String {
    let (xr, yr) = if s.diagonal {
        let r = Range::covering(s.points.iter().flat_map(|p| [p.1, p.2]));
        (r, r)
    } else {
        let mut yr = Range::covering(s.points.iter().map(|p| p.2));
        if s.zero_line {
            yr = Range { lo: yr.lo.min(0.0), hi: yr.hi.max(0.0) };
        }
        (Range::covering(s.points.iter().map(|p| p.1)), yr)
    };
    let mut c = Canvas::new(s.title, meta);
    c.axes(xr, yr, s.xlabel, s.ylabel);
    if s.diagonal {
        c.line(to_canvas(xr.lo, xr.lo, xr, yr), to_canvas(xr.hi, xr.hi, xr, yr), true);
    }
    if s.zero_line {
        c.line(to_canvas(xr.lo, 0.0, xr, yr), to_canvas(xr.hi, 0.0, xr, yr), true);
    }
    for (label, x, y) in s.points {
        let (cx, cy) = to_canvas(*x, *y, xr, yr);
        let _ = writeln!(c.out, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="3.5" fill="#1f77b4"><title>{}</title></circle>"##, escape(label));
        let _ = writeln!(c.out, r#"<text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#, cx + 5.0, cy - 5.0, escape(label));
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_roc_passes_top_left() {
        let svg = roc_svg(&[("A".into(), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)])], "ROC", None);
        let (x, y) = to_canvas(0.0, 1.0, Range::UNIT, Range::UNIT);
        assert!(svg.contains(&format!("{x:.2},{y:.2}")));
        assert!(!svg.contains("<!--"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn meta_comment_is_optional_and_escaped() {
        let svg = roc_svg(&[], "t", Some("made -- now"));
        assert!(svg.contains("<!-- made - - now -->"));
    }

    #[test]
    fn scatter_labels_escaped() {
        let pts = vec![("A<B".to_string(), 0.6, 0.7), ("C".to_string(), 0.8, 0.75)];
        let s = Scatter { title: "t", xlabel: "x", ylabel: "y", points: &pts, diagonal: true, zero_line: false };
        let svg = scatter_svg(&s, None);
        assert!(svg.contains("A&lt;B"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn degenerate_range_is_widened() {
        let r = Range::covering([0.5, 0.5].into_iter());
        assert!(r.hi > r.lo);
        assert_eq!(Range::covering(std::iter::empty()), Range::UNIT);
    }
}
