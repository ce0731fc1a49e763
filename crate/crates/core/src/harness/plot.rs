//! Minimal SVG line charts for strategy comparisons and action traces.

use std::fmt::Write as _;

use super::logs::ActionTrace;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 45.0); // left, right, top, bottom
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.05;
        y1 += 0.05;
    }
    (x0, x1, y0, y1)
}

/// One panel at (ox, oy) of size (w, h) with axes, ticks and polylines.
#[allow(clippy::too_many_arguments)]
fn panel(out: &mut String, ox: f64, oy: f64, w: f64, h: f64, title: &str, xl: &str, yl: &str, series: &[Series], legend: bool) {
    let (x0, x1, y0, y1) = bounds(series);
    let (l, r, t, b) = PAD;
    let (pw, ph) = (w - l - r, h - t - b);
    let sx = |x: f64| ox + l + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| oy + t + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
        ox + w / 2.0,
        oy + 18.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="gray"/>"#,
        ox + l,
        oy + t
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            sx(xv),
            oy + t + ph + 14.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            ox + l - 4.0,
            sy(yv) + 3.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
        ox + l + pw / 2.0,
        oy + h - 8.0,
        escape(xl)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        ox + 14.0,
        oy + t + ph / 2.0,
        ox + 14.0,
        oy + t + ph / 2.0,
        escape(yl)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() == 1 {
            let (x, y) = pts[0].split_once(',').expect("formatted pair");
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(&s.label)
        );
        if legend {
            let ly = oy + t + 14.0 + 14.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{ly:.1}" font-size="10" fill="{color}">{}</text>"#,
                ox + l + 8.0,
                escape(&s.label)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() < 1e6) {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Single-panel chart with one polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    out.push('\n');
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut out, 0.0, 0.0, W, H, title, x_label, y_label, series, true);
    out.push_str("</svg>\n");
    out
}

/// Sliding-window means (valid positions only). A window longer than the
/// series collapses to a single overall mean.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let window = window.max(1);
    if window > xs.len() {
        return vec![xs.iter().sum::<f64>() / xs.len() as f64];
    }
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    let mut acc: f64 = xs[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..xs.len() {
        acc += xs[i] - xs[i - window];
        out.push(acc / window as f64);
    }
    out
}

/// Stacked panels, one per coordinate, of the smoothed scale trace. Smoothed
/// point i sits at the last step of its window.
pub fn action_panels(trace: &ActionTrace, window: usize) -> String {
    let ph = 180.0;
    let height = ph * trace.coordinates.len() as f64;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}">"#
    );
    out.push('\n');
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (c, name) in trace.coordinates.iter().enumerate() {
        let smooth = moving_average(&trace.scales[c], window);
        let offset = trace.scales[c].len().saturating_sub(smooth.len());
        let points = smooth
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + offset) as f64, v))
            .collect();
        let s = Series {
            label: name.clone(),
            points,
        };
        panel(
            &mut out,
            0.0,
            c as f64 * ph,
            W,
            ph,
            &format!("{name} (moving average, window {window})"),
            "step",
            "scale",
            &[s],
            false,
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 50), vec![2.0]);
        assert!(moving_average(&[], 3).is_empty());
    }

    #[test]
    fn one_polyline_per_series() {
        let s = |l: &str| Series {
            label: l.into(),
            points: vec![(1.0, 0.5), (2.0, 0.6)],
        };
        let svg = line_chart("t", "x", "y", &[s("a"), s("b"), s("c")]);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn panels_per_coordinate() {
        let trace = ActionTrace {
            coordinates: vec!["conv1".into(), "new_head".into()],
            scales: vec![vec![0.1; 10], vec![1.0; 10]],
        };
        let svg = action_panels(&trace, 50);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
