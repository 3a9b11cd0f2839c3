//! Standalone SVG rendering for the experiment outputs.
//!
//! Kept dependency-free: each figure is a fixed-size viewport with linear or
//! log10 axes, polylines, sample markers, and error bars.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::experiments::{GrowthPoint, Method, SelectionRun, SweepResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    x_log: bool,
    y_log: bool,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let v = if self.x_log { v.log10() } else { v };
        let (lo, hi) = if self.x_log {
            (self.x_min.log10(), self.x_max.log10())
        } else {
            (self.x_min, self.x_max)
        };
        MARGIN_L + (v - lo) / (hi - lo).max(f64::MIN_POSITIVE) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let v = if self.y_log { v.log10() } else { v };
        let (lo, hi) = if self.y_log {
            (self.y_min.log10(), self.y_max.log10())
        } else {
            (self.y_min, self.y_max)
        };
        HEIGHT - MARGIN_B - (v - lo) / (hi - lo).max(f64::MIN_POSITIVE) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
             <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
             <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"15\">{title}</text>\n",
            (MARGIN_L + WIDTH - MARGIN_R) / 2.0
        );
        Svg { body }
    }

    fn axes(&mut self, frame: &Frame, x_label: &str, y_label: &str) {
        let x0 = MARGIN_L;
        let x1 = WIDTH - MARGIN_R;
        let y0 = HEIGHT - MARGIN_B;
        let y1 = MARGIN_T;
        let _ = write!(
            self.body,
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
        );
        for (pos, frac) in tick_positions(frame.x_min, frame.x_max, frame.x_log) {
            let px = x0 + frac * (x1 - x0);
            let _ = write!(
                self.body,
                "<line x1=\"{px:.1}\" y1=\"{y0}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
                 <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
                 font-size=\"11\">{}</text>\n",
                y0 + 5.0,
                y0 + 18.0,
                fmt_tick(pos)
            );
        }
        for (pos, frac) in tick_positions(frame.y_min, frame.y_max, frame.y_log) {
            let py = y0 - frac * (y0 - y1);
            let _ = write!(
                self.body,
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{x0}\" y2=\"{py:.1}\" stroke=\"black\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
                 font-size=\"11\">{}</text>\n",
                x0 - 5.0,
                x0 - 8.0,
                py + 4.0,
                fmt_tick(pos)
            );
        }
        let _ = write!(
            self.body,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"13\">{x_label}</text>\n\
             <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"13\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = write!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
            coords.join(" ")
        );
    }

    fn marker(&mut self, x: f64, y: f64, color: &str) {
        let _ = write!(
            self.body,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.6\" fill=\"{color}\"/>\n"
        );
    }

    fn error_bar(&mut self, x: f64, y_lo: f64, y_hi: f64, color: &str) {
        let _ = write!(
            self.body,
            "<line x1=\"{x:.2}\" y1=\"{y_lo:.2}\" x2=\"{x:.2}\" y2=\"{y_hi:.2}\" stroke=\"{color}\"/>\n\
             <line x1=\"{:.2}\" y1=\"{y_lo:.2}\" x2=\"{:.2}\" y2=\"{y_lo:.2}\" stroke=\"{color}\"/>\n\
             <line x1=\"{:.2}\" y1=\"{y_hi:.2}\" x2=\"{:.2}\" y2=\"{y_hi:.2}\" stroke=\"{color}\"/>\n",
            x - 3.0,
            x + 3.0,
            x - 3.0,
            x + 3.0,
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        let x = WIDTH - MARGIN_R + 12.0;
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN_T + 14.0 + i as f64 * 18.0;
            let _ = write!(
                self.body,
                "<line x1=\"{x}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" \
                 stroke-width=\"2\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
                x + 18.0,
                x + 24.0,
                y + 4.0,
            );
        }
    }

    fn finish(mut self, path: &std::path::Path) -> Result<()> {
        self.body.push_str("</svg>\n");
        std::fs::write(path, self.body)?;
        Ok(())
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Tick values and their fractional position along the axis.
fn tick_positions(min: f64, max: f64, log: bool) -> Vec<(f64, f64)> {
    if log {
        let lo = min.log10().floor() as i32;
        let hi = max.log10().ceil() as i32;
        let span = (max.log10() - min.log10()).max(f64::MIN_POSITIVE);
        (lo..=hi)
            .map(|e| {
                let v = 10f64.powi(e);
                (v, (v.log10() - min.log10()) / span)
            })
            .filter(|&(_, f)| (0.0..=1.0).contains(&f))
            .collect()
    } else {
        let span = (max - min).max(f64::MIN_POSITIVE);
        let raw_step = span / 5.0;
        let mag = 10f64.powf(raw_step.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|&s| s * mag)
            .find(|&s| span / s <= 6.0)
            .unwrap_or(mag);
        let start = (min / step).ceil() * step;
        let mut out = Vec::new();
        let mut v = start;
        while v <= max + 1e-9 * span {
            out.push((v, (v - min) / span));
            v += step;
        }
        out
    }
}

/// Error-versus-M figure: one series per `(method, a)` group, log-log axes,
/// replicate standard deviations as error bars.
pub fn render_sweep_plot(result: &SweepResult, path: &std::path::Path) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let mut groups: Vec<(Method, Option<f64>)> = Vec::new();
    for row in &result.rows {
        if !groups.contains(&(row.method, row.a)) {
            groups.push((row.method, row.a));
        }
    }
    let x_min = result.rows.iter().map(|r| r.m).min().unwrap() as f64;
    let x_max = (result.rows.iter().map(|r| r.m).max().unwrap() as f64).max(x_min * 1.01);
    let mut y_min = f64::INFINITY;
    let mut y_max: f64 = 0.0;
    for r in &result.rows {
        let lo = (r.mean_error - r.std_error).max(r.mean_error / 10.0).max(1e-300);
        y_min = y_min.min(lo);
        y_max = y_max.max(r.mean_error + r.std_error);
    }
    let frame = Frame { x_min, x_max, y_min, y_max: y_max.max(y_min * 1.01), x_log: true, y_log: true };
    let mut svg = Svg::new("Per-system estimation error vs number of systems");
    svg.axes(&frame, "M", "mean ||A_hat - A||_F^2");
    let mut legend = Vec::new();
    for (gi, &(method, a)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let rows: Vec<_> =
            result.rows.iter().filter(|r| r.method == method && r.a == a).collect();
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (frame.x(r.m as f64), frame.y(r.mean_error.max(1e-300))))
            .collect();
        svg.polyline(&pts, color);
        for (r, &(px, py)) in rows.iter().zip(&pts) {
            svg.marker(px, py, color);
            if r.std_error > 0.0 {
                let lo = (r.mean_error - r.std_error).max(r.mean_error / 10.0);
                let hi = r.mean_error + r.std_error;
                svg.error_bar(px, frame.y(hi), frame.y(lo), color);
            }
        }
        let label = match a {
            Some(a) => format!("{} (a={a})", method.label()),
            None => method.label().to_string(),
        };
        legend.push((label, color));
    }
    svg.legend(&legend);
    svg.finish(path)
}

/// State-growth figure: `log ||x(t)||` against `t`, one series per profile,
/// every finite sample drawn as a marker.
pub fn render_growth_plot(
    profiles: &[(String, Vec<GrowthPoint>)],
    path: &std::path::Path,
) -> Result<()> {
    if profiles.is_empty() || profiles.iter().all(|(_, p)| p.is_empty()) {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let x_max = profiles.iter().flat_map(|(_, p)| p.iter().map(|q| q.t)).max().unwrap() as f64;
    let finite: Vec<f64> =
        profiles.iter().flat_map(|(_, p)| p.iter().filter_map(|q| q.log_norm)).collect();
    if finite.is_empty() {
        return Err(Error::InvalidArgument("all samples are zero-norm".into()));
    }
    let y_min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.05 * (y_max - y_min).max(1.0);
    let frame = Frame {
        x_min: 0.0,
        x_max,
        y_min: y_min - pad,
        y_max: y_max + pad,
        x_log: false,
        y_log: false,
    };
    let mut svg = Svg::new("State magnitude growth");
    svg.axes(&frame, "t", "log ||x(t)||");
    let mut legend = Vec::new();
    for (gi, (label, points)) in profiles.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let pts: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|p| p.log_norm.map(|v| (frame.x(p.t as f64), frame.y(v))))
            .collect();
        svg.polyline(&pts, color);
        for &(px, py) in &pts {
            svg.marker(px, py, color);
        }
        legend.push((label.clone(), color));
    }
    svg.legend(&legend);
    svg.finish(path)
}

/// Model-selection figure: training and validation error against the basis
/// count, averaged over runs, with the chosen counts marked.
pub fn render_selection_plot(runs: &[SelectionRun], path: &std::path::Path) -> Result<()> {
    if runs.is_empty() || runs[0].curve.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let grid: Vec<usize> = runs[0].curve.iter().map(|p| p.k).collect();
    let n = runs.len() as f64;
    let mut fit_mean = vec![0.0; grid.len()];
    let mut val_mean = vec![0.0; grid.len()];
    for run in runs {
        for (i, p) in run.curve.iter().enumerate() {
            fit_mean[i] += p.fit_error / n;
            val_mean[i] += p.validation_error / n;
        }
    }
    let y_vals: Vec<f64> = fit_mean.iter().chain(&val_mean).copied().collect();
    let y_min = y_vals.iter().copied().fold(f64::INFINITY, f64::min).max(1e-300);
    let y_max = y_vals.iter().copied().fold(0.0, f64::max).max(y_min * 1.01);
    let frame = Frame {
        x_min: grid[0] as f64,
        x_max: (*grid.last().unwrap() as f64).max(grid[0] as f64 + 1.0),
        y_min,
        y_max,
        x_log: false,
        y_log: true,
    };
    let mut svg = Svg::new("Training and validation error vs basis count");
    svg.axes(&frame, "k", "error");
    for (series, color) in [(&fit_mean, PALETTE[0]), (&val_mean, PALETTE[1])] {
        let pts: Vec<(f64, f64)> = grid
            .iter()
            .zip(series.iter())
            .map(|(&k, &v)| (frame.x(k as f64), frame.y(v.max(1e-300))))
            .collect();
        svg.polyline(&pts, color);
        for &(px, py) in &pts {
            svg.marker(px, py, color);
        }
    }
    let mut legend = vec![
        ("training loss".to_string(), PALETTE[0]),
        ("validation error".to_string(), PALETTE[1]),
    ];
    for run in runs {
        let px = frame.x(run.k_chosen as f64);
        svg.error_bar(px, MARGIN_T, HEIGHT - MARGIN_B, PALETTE[2]);
    }
    legend.push(("chosen k".to_string(), PALETTE[2]));
    svg.legend(&legend);
    svg.finish(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::SweepRow;

    #[test]
    fn growth_plot_contains_every_sample() {
        let dir = tempfile::tempdir().unwrap();
        let points: Vec<GrowthPoint> =
            (0..200).map(|t| GrowthPoint { t, log_norm: Some((t as f64 + 1.0).ln()) }).collect();
        let path = dir.path().join("growth.svg");
        render_growth_plot(&[("l=2".into(), points)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("<circle").count(), 200);
        assert!(text.contains("</svg>"));
    }

    #[test]
    fn sweep_plot_renders_both_methods() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SweepRow { m: 1, method: Method::Joint, regime: "stable".into(), a: None, mean_error: 1.0, std_error: 0.1, replicates: 3 },
            SweepRow { m: 10, method: Method::Joint, regime: "stable".into(), a: None, mean_error: 0.2, std_error: 0.05, replicates: 3 },
            SweepRow { m: 1, method: Method::Ols, regime: "stable".into(), a: None, mean_error: 1.1, std_error: 0.1, replicates: 3 },
            SweepRow { m: 10, method: Method::Ols, regime: "stable".into(), a: None, mean_error: 1.05, std_error: 0.2, replicates: 3 },
        ];
        let path = dir.path().join("sweep.svg");
        render_sweep_plot(&SweepResult { rows }, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("joint"));
        assert!(text.contains("ols"));
        assert!(text.matches("<polyline").count() >= 2);
    }

    #[test]
    fn selection_plot_marks_chosen_k() {
        use crate::estimators::SelectionPoint;
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![SelectionRun {
            run: 0,
            k_chosen: 2,
            curve: vec![
                SelectionPoint { k: 1, fit_error: 1.0, validation_error: 2.0 },
                SelectionPoint { k: 2, fit_error: 0.3, validation_error: 0.5 },
                SelectionPoint { k: 3, fit_error: 0.29, validation_error: 0.51 },
            ],
        }];
        let path = dir.path().join("sel.svg");
        render_selection_plot(&runs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("chosen k"));
    }
}
