use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Line plot of `points` with optional symmetric error bars.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64, Option<f64>)]) -> String {
    let (x0, x1) = bounds(points.iter().map(|p| p.0));
    let (y0, y1) = bounds(
        points
            .iter()
            .flat_map(|&(_, y, e)| [y - e.unwrap_or(0.0), y + e.unwrap_or(0.0)]),
    );
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();

    // axes
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    )
    .unwrap();
    for k in 0..=4 {
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        let y = py(yv);
        writeln!(
            s,
            r##"<path d="M{left} {y:.2} L{right} {y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            left - 6.0,
            y + 4.0,
            fmt_tick(yv)
        )
        .unwrap();
    }
    for &(xv, _, _) in points {
        let x = px(xv);
        writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            bottom + 18.0,
            fmt_tick(xv)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    )
    .unwrap();

    if !points.is_empty() {
        let path: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y, _))| format!("{}{:.2} {:.2}", if i == 0 { 'M' } else { 'L' }, px(x), py(y)))
            .collect();
        writeln!(
            s,
            r##"<path d="{}" stroke="#1f77b4" stroke-width="2" fill="none"/>"##,
            path.join(" ")
        )
        .unwrap();
    }
    for &(x, y, err) in points {
        if let Some(e) = err {
            writeln!(
                s,
                r##"<path d="M{0:.2} {1:.2} L{0:.2} {2:.2}" stroke="#1f77b4"/>"##,
                px(x),
                py(y - e),
                py(y + e)
            )
            .unwrap();
        }
        writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#1f77b4"><title>{}</title></circle>"##,
            px(x),
            py(y),
            escape(&format!("{x}: {y}"))
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// White (0) to dark blue (1).
fn shade(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    let mix = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(255.0, 8.0), mix(255.0, 48.0), mix(255.0, 107.0))
}

/// Grid heatmap of a square matrix with values in `[0, 1]`.
pub fn heatmap(title: &str, matrix: &[Vec<f64>]) -> String {
    let n = matrix.len();
    let cell = 64.0;
    let side = cell * n as f64;
    let (w, h) = (side + 2.0 * 40.0, side + 80.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    )
    .unwrap();
    for (i, row) in matrix.iter().enumerate() {
        writeln!(
            s,
            r#"<text x="34" y="{:.1}" text-anchor="end">{i}</text>"#,
            40.0 + cell * (i as f64 + 0.5) + 4.0
        )
        .unwrap();
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (40.0 + cell * j as f64, 40.0 + cell * i as f64);
            let ink = if v > 0.5 { "white" } else { "black" };
            writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="#888"/><text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}">{:.3}</text>"##,
                shade(v),
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                v
            )
            .unwrap();
        }
    }
    for j in 0..n {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{j}</text>"#,
            40.0 + cell * (j as f64 + 0.5),
            40.0 + side + 16.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_has_one_marker_per_point() {
        let pts: Vec<_> = [0.3, 0.4, 0.5].iter().map(|&x| (x, x * 2.0, Some(0.1))).collect();
        let svg = line_plot("t", "x", "y", &pts);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn flat_series_does_not_divide_by_zero() {
        let svg = line_plot("t", "x", "y", &[(1.0, 2.0, None), (2.0, 2.0, None)]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn uniform_off_diagonal_shares_one_color() {
        let third = 1.0 / 3.0;
        let m: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 0.0 } else { third }).collect())
            .collect();
        let svg = heatmap("m", &m);
        assert_eq!(svg.matches("<rect x=").count(), 16);
        assert_eq!(svg.matches(&format!("fill=\"{}\"", shade(third))).count(), 12);
        assert_eq!(svg.matches(&format!("fill=\"{}\"", shade(0.0))).count(), 4);
    }

    #[test]
    fn text_is_escaped() {
        assert!(line_plot("a<b", "x", "y", &[]).contains("a&lt;b"));
    }
}
