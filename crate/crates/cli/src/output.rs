//! Deterministic output formats: CSV (comma-separated, header row, LF line
//! endings, floats with 9 significant digits, `-inf` as a literal token),
//! JSON values with the same `-inf` convention, and hand-rolled SVG line
//! charts.

use serde_json::{json, Value};

/// Float formatting for CSV and text reports: 9 significant digits,
/// negative infinity as the literal token `-inf`.
pub fn fmt_float(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{x:.8e}")
    }
}

/// JSON number, with exact zero log-probabilities (`-inf`) carried as the
/// string `"-inf"` since JSON numbers cannot express it.
pub fn json_float(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x == f64::NEG_INFINITY {
        json!("-inf")
    } else {
        json!(x.to_string())
    }
}

/// Minimal CSV builder; all writes go through [`fmt_float`].
pub struct Csv {
    out: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            out: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "csv row width mismatch");
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    pub fn into_string(self) -> String {
        self.out
    }
}

/// Parse a CSV produced by [`Csv`] back into header and string cells.
pub fn parse_csv(text: &str) -> Option<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header = lines.next()?.split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Some((header, rows))
}

pub fn parse_float(cell: &str) -> Option<f64> {
    if cell == "-inf" {
        Some(f64::NEG_INFINITY)
    } else {
        cell.parse().ok()
    }
}

// ---------------------------------------------------------------------------
// SVG line charts
// ---------------------------------------------------------------------------

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Render one line chart with axes, ticks, and a legend. Output is a pure
/// function of the inputs.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const ML: f64 = 70.0; // margins
    const MR: f64 = 160.0;
    const MT: f64 = 40.0;
    const MB: f64 = 55.0;
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;

    let finite_points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1) = finite_points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
            (lo.min(x), hi.max(x))
        });
    let (mut y0, mut y1) = finite_points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| {
            (lo.min(y), hi.max(y))
        });
    if !x0.is_finite() || !x1.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
    }
    if !y0.is_finite() || !y1.is_finite() {
        y0 = 0.0;
        y1 = 1.0;
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = move |x: f64| ML + (x - x0) / (x1 - x0) * plot_w;
    let sy = move |y: f64| MT + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        ML + plot_w / 2.0,
        escape(title)
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MT + plot_h,
        ML + plot_w,
        MT + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        MT + plot_h
    ));
    // Ticks: five per axis.
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let px = sx(fx);
        svg.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"black\"/>\n",
            MT + plot_h,
            MT + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            MT + plot_h + 20.0,
            tick(fx)
        ));
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(fy);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{ML}\" y2=\"{py:.2}\" stroke=\"black\"/>\n",
            ML - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            ML - 9.0,
            py + 4.0,
            tick(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        ML + plot_w / 2.0,
        H - 12.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        MT + plot_h / 2.0,
        MT + plot_h / 2.0,
        escape(y_label)
    ));
    // Series and legend.
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if path.len() > 1 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        for p in &path {
            let (px, py) = p.split_once(',').expect("formatted point");
            svg.push_str(&format!(
                "<circle cx=\"{px}\" cy=\"{py}\" r=\"2.2\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = MT + 14.0 + 18.0 * k as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly:.2}\" x2=\"{}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            ML + plot_w + 12.0,
            ML + plot_w + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\">{}</text>\n",
            ML + plot_w + 40.0,
            ly + 4.0,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting() {
        assert_eq!(fmt_float(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_float(1.0), "1.00000000e0");
        assert_eq!(parse_float("-inf"), Some(f64::NEG_INFINITY));
        assert_eq!(parse_float(&fmt_float(0.25)), Some(0.25));
    }

    #[test]
    fn csv_roundtrip() {
        let mut csv = Csv::new(&["a", "b"]);
        csv.row(&[fmt_float(1.5), "x".to_string()]);
        let text = csv.into_string();
        assert!(text.ends_with('\n'));
        let (header, rows) = parse_csv(&text).unwrap();
        assert_eq!(header, vec!["a", "b"]);
        assert_eq!(rows.len(), 1);
        assert_eq!(parse_float(&rows[0][0]), Some(1.5));
    }

    #[test]
    fn chart_is_deterministic() {
        let series = vec![Series {
            label: "one".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 0.5)],
        }];
        let a = line_chart("t", "x", "y", &series);
        let b = line_chart("t", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("polyline"));
    }
}
