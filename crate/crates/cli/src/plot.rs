//! Minimal SVG line plots for trajectory logs.

use std::fmt::Write as _;

use lintrack::equilibria::solve_nonlinear_equilibrium;
use lintrack::model::Plant;
use lintrack::mpc::LogRow;
use lintrack::sets::BoxSet;
use nalgebra::DVector;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 220.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points: points.into_iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect(),
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let w = (hi - lo).max(1e-9 * lo.abs().max(1.0));
        (lo - 0.05 * w, hi + 0.05 * w)
    };
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { pad(x0, x1) };
    let (y0, y1) = pad(y0, y1);
    (x0, x1, y0, y1)
}

/// One panel at vertical offset `top`.
fn panel(svg: &mut String, top: f64, title: &str, x_label: &str, series: &[Series]) {
    let (x0, x1, y0, y1) = bounds(series);
    let pw = WIDTH - 2.0 * MARGIN;
    let ph = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + MARGIN + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN}" y="{:.1}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##,
        top + MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        top + MARGIN - 10.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        top + HEIGHT - 12.0,
        escape(x_label)
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            sx(fx),
            top + HEIGHT - MARGIN + 14.0,
            tick(fx)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            sy(fy) + 3.0,
            tick(fy)
        );
    }
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for (k, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let dash = if s.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            d.trim_end()
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN - 4.0,
            top + MARGIN + 14.0 + 12.0 * i as f64,
            escape(&s.label)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Stack of panels sharing the same width.
pub fn render(panels: &[(String, String, Vec<Series>)]) -> String {
    let total = HEIGHT * panels.len().max(1) as f64;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total}" viewBox="0 0 {WIDTH} {total}" font-family="sans-serif">"#
    );
    svg.push('\n');
    for (i, (title, x_label, series)) in panels.iter().enumerate() {
        panel(&mut svg, HEIGHT * i as f64, title, x_label, series);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Time series of every state and input component, one panel each, with
/// one line per labelled log. `y_r` is drawn on the panel of the output
/// component equal to a state, when given.
pub fn time_series(logs: &[(&str, &[LogRow])], reference: Option<(usize, f64)>) -> String {
    let Some(first) = logs.iter().find_map(|(_, rows)| rows.first()) else {
        return render(&[]);
    };
    let n = first.x.len();
    let m = logs
        .iter()
        .flat_map(|(_, rows)| rows.iter())
        .find_map(|r| r.u.as_ref().map(|u| u.len()))
        .unwrap_or(0);
    let mut panels = Vec::new();
    for i in 0..n {
        let mut series: Vec<Series> = logs
            .iter()
            .map(|(label, rows)| Series::new(*label, rows.iter().map(|r| (r.t as f64, r.x[i])).collect()))
            .collect();
        if let Some((_, y_r)) = reference.filter(|(idx, _)| *idx == i) {
            let t_max = logs.iter().flat_map(|(_, r)| r.last()).map(|r| r.t).max().unwrap_or(0) as f64;
            series.push(Series::new("reference", vec![(0.0, y_r), (t_max, y_r)]).dashed());
        }
        panels.push((format!("x{}", i + 1), "t".to_string(), series));
    }
    for j in 0..m {
        let series = logs
            .iter()
            .map(|(label, rows)| {
                Series::new(
                    *label,
                    rows.iter().filter_map(|r| r.u.as_ref().map(|u| (r.t as f64, u[j]))).collect(),
                )
            })
            .collect();
        panels.push((format!("u{}", j + 1), "t".to_string(), series));
    }
    render(&panels)
}

/// Equilibrium states of `plant` for `samples` inputs spread over the
/// first axis of `inputs` (other inputs at their centers), solved from
/// every guess in turn and, when found, from the previous point.
pub fn equilibrium_manifold(
    plant: &dyn Plant,
    inputs: &BoxSet,
    samples: usize,
    guesses: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    let mut previous: Option<DVector<f64>> = None;
    let center = inputs.center();
    for k in 0..samples.max(2) {
        let s = k as f64 / (samples.max(2) - 1) as f64;
        let mut u = center.clone();
        u[0] = inputs.lower[0] + s * (inputs.upper[0] - inputs.lower[0]);
        let found = previous
            .iter()
            .chain(guesses.iter())
            .find_map(|g| solve_nonlinear_equilibrium(plant, &u, g).ok());
        if let Some(eq) = found {
            previous = Some(eq.x_s.clone());
            out.push(eq.x_s);
        }
    }
    out
}

/// Phase plot of the first two state components over a manifold curve.
pub fn phase_plot(logs: &[(&str, &[LogRow])], manifold: &[DVector<f64>]) -> String {
    let mut series: Vec<Series> = logs
        .iter()
        .map(|(label, rows)| {
            Series::new(
                *label,
                rows.iter().filter(|r| r.x.len() >= 2).map(|r| (r.x[0], r.x[1])).collect(),
            )
        })
        .collect();
    let curve = manifold.iter().filter(|x| x.len() >= 2).map(|x| (x[0], x[1])).collect();
    series.push(Series::new("equilibria", curve).dashed());
    render(&[("phase portrait".to_string(), "x1".to_string(), series)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use lintrack::cstr::{cstr, CstrParams, EQUILIBRIUM_INPUT_BOUNDS};
    use nalgebra::dvector;

    fn rows() -> Vec<LogRow> {
        (0..5)
            .map(|t| LogRow {
                t,
                x: dvector![t as f64, 1.0 / (1.0 + t as f64)],
                u: (t < 4).then(|| dvector![0.5]),
                y: None,
                solve: None,
            })
            .collect()
    }

    #[test]
    fn time_series_has_a_path_per_log_and_panel() {
        let r = rows();
        let svg = time_series(&[("a", &r), ("b", &r)], Some((1, 0.3)));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // x1, x2 (+reference) and u1, two logs each
        assert_eq!(svg.matches("<path").count(), 7);
    }

    #[test]
    fn manifold_points_are_equilibria() {
        let plant = cstr();
        let us = BoxSet::interval(EQUILIBRIUM_INPUT_BOUNDS[0], EQUILIBRIUM_INPUT_BOUNDS[1]).unwrap();
        let pts = equilibrium_manifold(plant.as_ref(), &us, 20, &[dvector![0.9, 0.4], dvector![0.2, 0.7]]);
        assert!(pts.len() >= 18);
        let params = CstrParams::default();
        for x in &pts {
            let (x1, u) = params.steady_state_at(x[1]);
            assert!((x1 - x[0]).abs() < 1e-8);
            assert!(us.contains(&dvector![u], 1e-8));
        }
        let svg = phase_plot(&[("run", &rows())], &pts);
        assert_eq!(svg.matches("<path").count(), 2);
    }

    #[test]
    fn degenerate_series_do_not_divide_by_zero() {
        let svg = render(&[("flat".into(), "t".into(), vec![Series::new("c", vec![(1.0, 2.0), (1.0, 2.0)])])]);
        assert!(!svg.contains("NaN"));
    }
}
