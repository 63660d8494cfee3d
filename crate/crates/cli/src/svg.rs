//! Minimal static SVG writers; no display dependency, deterministic output.

use std::fmt::Write;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 460.0;
const MARGIN: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN;
    let y0 = HEIGHT - MARGIN;
    let x1 = WIDTH - MARGIN;
    let y1 = MARGIN;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 18.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    )
}

fn scale_x(t: f64, max_t: f64) -> f64 {
    MARGIN + (t / max_t.max(1.0)) * (WIDTH - 2.0 * MARGIN)
}

fn scale_y(v: f64, lo: f64, hi: f64) -> f64 {
    let frac = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (HEIGHT - MARGIN) - frac * (HEIGHT - 2.0 * MARGIN)
}

/// Polyline chart of one series per (name, values) pair.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<f64>)],
    y_range: (f64, f64),
) -> String {
    let mut out = header(title);
    out.push_str(&axes(x_label, y_label));
    let max_t = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1) as f64;
    for (i, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for (t, v) in values.iter().enumerate() {
            let _ = write!(
                points,
                "{:.2},{:.2} ",
                scale_x(t as f64, max_t),
                scale_y(*v, y_range.0, y_range.1)
            );
        }
        let _ = write!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.trim_end()
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = write!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>\n",
            WIDTH - MARGIN - 170.0,
            ly,
            WIDTH - MARGIN - 152.0,
            ly + 10.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Precision (y) vs recall (x) scatter, colored by gamma.
pub fn pr_scatter(title: &str, points: &[(f64, f64, f64)]) -> String {
    let mut out = header(title);
    out.push_str(&axes("recall", "precision"));
    let mut gammas: Vec<f64> = points.iter().map(|p| p.2).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    for (recall, precision, gamma) in points {
        let gi = gammas.iter().position(|g| g == gamma).unwrap_or(0);
        let color = PALETTE[gi % PALETTE.len()];
        let _ = write!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n",
            scale_x(recall.clamp(0.0, 1.0) * 100.0, 100.0),
            scale_y(precision.clamp(0.0, 1.0), 0.0, 1.0)
        );
    }
    for (gi, gamma) in gammas.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let ly = MARGIN + 16.0 * gi as f64;
        let _ = write!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">gamma {gamma}</text>\n",
            WIDTH - MARGIN - 160.0,
            ly + 5.0,
            WIDTH - MARGIN - 148.0,
            ly + 10.0
        );
    }
    out.push_str("</svg>\n");
    out
}
