//! Minimal static SVG charts. Fixed canvas, fixed number formatting, no
//! timestamps: the same data always renders to the same bytes.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, y_min: f64, y_max: f64, y_label: &str) {
    let (x0, y0, y1) = (LEFT, H - BOTTOM, TOP);
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>",
        W - RIGHT
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            x0 - 6.0,
            y + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v == v.round() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else if v.abs() >= 0.01 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    let y0 = H - BOTTOM;
    if hi > lo {
        y0 - (v - lo) / (hi - lo) * (y0 - TOP)
    } else {
        y0
    }
}

/// Vertical bars with their values printed on top.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let y_max = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-12);
    axes(&mut s, 0.0, y_max, y_label);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let y = scale(*v, 0.0, y_max);
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            slot * 0.7,
            H - BOTTOM - y,
            PALETTE[0]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            y - 4.0,
            tick(*v)
        );
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - BOTTOM + 18.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Box summaries (min, quartiles, max) of several samples side by side.
pub fn box_chart(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let mut s = header(title);
    let all = groups.iter().flat_map(|g| g.1.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() {
        (lo.min(0.0), hi.max(lo + 1.0))
    } else {
        (0.0, 1.0)
    };
    axes(&mut s, lo, hi, y_label);
    let slot = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    for (i, (label, values)) in groups.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{} (n={})</text>",
            H - BOTTOM + 18.0,
            escape(label),
            values.len()
        );
        let Some(q) = quantiles(values) else { continue };
        let [min, q1, med, q3, max] = q.map(|v| scale(v, lo, hi));
        let half = slot * 0.2;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" y1=\"{min:.1}\" x2=\"{cx:.1}\" y2=\"{max:.1}\" stroke=\"{color}\"/>"
        );
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{q3:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\" fill-opacity=\"0.4\" stroke=\"{color}\"/>",
            cx - half,
            2.0 * half,
            q1 - q3
        );
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{med:.1}\" x2=\"{:.1}\" y2=\"{med:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
            cx - half,
            cx + half
        );
    }
    s.push_str("</svg>\n");
    s
}

/// `[min, q1, median, q3, max]` by linear interpolation between order
/// statistics.
pub fn quantiles(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] + f * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    Some([at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)])
}

/// Polylines over a shared x axis, with a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = header(title);
    let pts = series.iter().flat_map(|(_, p)| p.iter().copied());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        (x_lo, x_hi, y_lo, y_hi) = (x_lo.min(x), x_hi.max(x), y_lo.min(y), y_hi.max(y));
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    axes(&mut s, y_lo, y_hi, y_label);
    let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (W - LEFT - RIGHT);
    for k in 0..=4 {
        let v = x_lo + (x_hi - x_lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            px(v),
            H - BOTTOM + 18.0,
            tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), scale(y, y_lo, y_hi)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path.join(" ")
        );
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            W - RIGHT - 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate() {
        assert_eq!(quantiles(&[4.0, 1.0, 3.0, 2.0, 5.0]), Some([1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(quantiles(&[]), None);
        assert_eq!(quantiles(&[1.0, 2.0]).unwrap()[2], 1.5);
    }

    #[test]
    fn charts_are_well_formed_and_stable() {
        let bars = vec![("a".to_string(), 3.0), ("b<c".to_string(), 0.0)];
        let svg = bar_chart("t", "count", &bars);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("b&lt;c"));
        assert_eq!(svg, bar_chart("t", "count", &bars));
        let line = line_chart(
            "t",
            "x",
            "y",
            &[("s".into(), vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 0.5)])],
        );
        assert!(line.contains("<polyline"));
        assert!(!line.contains("NaN"));
    }
}
