//! Minimal self-contained SVG charts.

use std::fmt::Write;

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{fill}"/>"#
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            escape(content)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue-white-red ramp over `t` in `[0, 1]`.
pub fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (59.0 + u * 196.0, 76.0 + u * 179.0, 192.0 + u * 63.0)
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0 - u * 75.0, 255.0 - u * 251.0, 255.0 - u * 217.0)
    };
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !(lo.is_finite() && hi.is_finite()) {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Horizontal-axis bar chart with one labelled bar per value in `[0, 1]`.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let (w, h, pad) = (480.0, 320.0, 50.0);
    let mut svg = Svg::new(w, h);
    svg.text(w / 2.0, 24.0, 16.0, "middle", title);
    let plot_h = h - 2.0 * pad;
    let slot = (w - 2.0 * pad) / values.len().max(1) as f64;
    svg.line(pad, h - pad, w - pad, h - pad, "black");
    svg.line(pad, pad, pad, h - pad, "black");
    for tick in [0.0, 0.5, 1.0] {
        let y = h - pad - tick * plot_h;
        svg.text(pad - 6.0, y + 4.0, 11.0, "end", &format!("{tick:.1}"));
    }
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let bh = v.clamp(0.0, 1.0) * plot_h;
        let x = pad + i as f64 * slot + slot * 0.15;
        svg.rect(x, h - pad - bh, slot * 0.7, bh, "rgb(70,110,180)");
        svg.text(x + slot * 0.35, h - pad + 16.0, 12.0, "middle", label);
        svg.text(x + slot * 0.35, h - pad - bh - 6.0, 11.0, "middle", &format!("{v:.4}"));
    }
    svg.finish()
}

/// Side-by-side maps of two value sets at the same locations, sharing one
/// color scale.
pub fn paired_maps(title: &str, names: [&str; 2], points: &[(f64, f64, f64, f64)]) -> String {
    let (panel, pad) = (320.0, 40.0);
    let (w, h) = (2.0 * panel + 3.0 * pad, panel + 2.5 * pad);
    let mut svg = Svg::new(w, h);
    svg.text(w / 2.0, 22.0, 16.0, "middle", title);
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let (v0, v1) = range(points.iter().flat_map(|p| [p.2, p.3]));
    for (k, name) in names.iter().enumerate() {
        let left = pad + k as f64 * (panel + pad);
        let top = 1.5 * pad;
        svg.rect(left, top, panel, panel, "rgb(240,240,240)");
        svg.text(left + panel / 2.0, top - 6.0, 13.0, "middle", name);
        for p in points {
            let v = if k == 0 { p.2 } else { p.3 };
            let cx = left + (p.0 - x0) / (x1 - x0) * panel;
            let cy = top + panel - (p.1 - y0) / (y1 - y0) * panel;
            svg.circle(cx, cy, 3.0, &color((v - v0) / (v1 - v0)));
        }
    }
    svg.text(pad, h - 8.0, 11.0, "start", &format!("color scale {v0:.3} .. {v1:.3}"));
    svg.finish()
}

/// Scatter of predictions against reference values with the identity line.
pub fn scatter(title: &str, pairs: &[(f64, f64)]) -> String {
    let (size, pad) = (360.0, 50.0);
    let mut svg = Svg::new(size + 2.0 * pad, size + 2.0 * pad);
    svg.text(pad + size / 2.0, 24.0, 16.0, "middle", title);
    let (lo, hi) = range(pairs.iter().flat_map(|p| [p.0, p.1]));
    let map = |v: f64| (v - lo) / (hi - lo) * size;
    svg.rect(pad, pad, size, size, "rgb(245,245,245)");
    svg.line(pad, pad + size, pad + size, pad, "gray");
    for &(reference, prediction) in pairs {
        svg.circle(pad + map(reference), pad + size - map(prediction), 2.5, "rgb(70,110,180)");
    }
    svg.text(pad + size / 2.0, pad + size + 30.0, 12.0, "middle", "reference");
    svg.text(14.0, pad + size / 2.0, 12.0, "middle", "prediction");
    svg.text(pad, pad + size + 16.0, 10.0, "start", &format!("{lo:.3}"));
    svg.text(pad + size, pad + size + 16.0, 10.0, "end", &format!("{hi:.3}"));
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_are_well_formed() {
        let a = bar_chart("scores", &["a".into(), "b<".into()], &[0.7, 0.3]);
        assert!(a.starts_with("<?xml") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("b&lt;"));
        let b = paired_maps("m", ["p", "r"], &[(0.0, 0.0, 1.0, 2.0), (1.0, 1.0, 3.0, 3.0)]);
        assert_eq!(b.matches("<circle").count(), 4);
        let c = scatter("s", &[(1.0, 1.0)]);
        assert_eq!(c.matches("<circle").count(), 1);
    }

    #[test]
    fn color_ramp_ends() {
        assert_eq!(color(0.0), "rgb(59,76,192)");
        assert_eq!(color(0.5), "rgb(255,255,255)");
        assert_eq!(color(1.0), "rgb(180,4,38)");
        assert_eq!(color(f64::NAN), color(0.5));
    }
}
