//! Closed-loop experiments driven by a configuration file: single runs,
//! controller comparisons and assumption audits.

pub mod config;
pub mod csvlog;
pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lintrack::baselines::{lti_controller, ltv_controller};
use lintrack::certify::{
    check_assumptions, contraction_check, distance_fit, exponential_fit, value_bounds, AssumptionReport,
    CertifyOptions, LyapunovSample, LyapunovTrace, Thresholds,
};
use lintrack::mpc::{simulate, Controller, ControllerKind, LogRow, TrajectoryLog};
use lintrack::sets::BoxSet;
use lintrack::smoothness::{estimate_smoothness, SmoothnessEstimates};
use lintrack::Error;
use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error as ThisError;

pub use config::{ConfigError, Experiment, Kind};
use csvlog::Dims;

/// Final output error below which a run counts as converged.
pub const CONVERGENCE_TOL: f64 = 1e-3;
/// Input samples of the plotted steady-state manifold.
pub const MANIFOLD_SAMPLES: usize = 200;
/// Solves skipped before the contraction check.
pub const CONTRACTION_SKIP: usize = 5;
/// Start of the distance fit.
pub const FIT_START: usize = 50;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Csv(#[from] csvlog::CsvError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] Error),
}

impl CliError {
    /// Process exit code: 1 for configuration problems, 2 for an
    /// infeasible control problem, 3 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Model(Error::Config(_)) => 1,
            CliError::Model(Error::Infeasible { .. }) => 2,
            _ => 3,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

pub fn dims(exp: &Experiment) -> Dims {
    let (n, m) = exp.prediction.plant_dims();
    Dims {
        n,
        m,
        p: exp.prediction.output_dim(),
    }
}

pub fn build_controller(exp: &Experiment) -> lintrack::Result<Controller> {
    match exp.kind {
        Kind::ProposedNStep | Kind::ProposedOneStep => {
            Controller::new(exp.mpc.clone(), exp.prediction.clone(), ControllerKind::Proposed)
        }
        Kind::Lti => lti_controller(&exp.mpc, &exp.prediction, &exp.x0),
        Kind::Ltv => ltv_controller(&exp.mpc, &exp.prediction),
    }
}

/// Run the configured controller. Failures during the loop are recorded
/// in the log; failures before the first solve are returned.
pub fn run(exp: &Experiment) -> lintrack::Result<TrajectoryLog> {
    let mut controller = build_controller(exp)?;
    let mut log = simulate(&mut controller, &exp.x0, exp.steps);
    log.controller = exp.kind.name().to_string();
    Ok(log)
}

pub fn converged(log: &TrajectoryLog) -> bool {
    log.failure.is_none() && log.final_output_error().is_some_and(|e| e < CONVERGENCE_TOL)
}

/// Steady-state manifold of the plant for the phase plot.
pub fn manifold(exp: &Experiment, logs: &[&TrajectoryLog]) -> Vec<DVector<f64>> {
    let plant = exp.prediction.plant();
    let mut guesses: Vec<DVector<f64>> = logs
        .iter()
        .flat_map(|l| [l.rows.first(), l.rows.last()])
        .flatten()
        .map(|r| r.x.clone())
        .collect();
    let n = plant.state_dim();
    guesses.push(DVector::from_element(n, 0.5));
    guesses.push(DVector::zeros(n));
    plot::equilibrium_manifold(plant.as_ref(), &exp.mpc.equilibrium_input_set, MANIFOLD_SAMPLES, &guesses)
}

/// Output component that is also a state component, for the reference
/// line of the time-series plot.
fn reference_line(exp: &Experiment) -> Option<(usize, f64)> {
    match (&exp.plant, exp.mpc.y_r.len()) {
        (config::PlantChoice::Cstr(_), 1) => Some((1, exp.mpc.y_r[0])),
        _ => None,
    }
}

pub fn write_plots(exp: &Experiment, dir: &Path, logs: &[&TrajectoryLog]) -> Result<(), CliError> {
    let labelled: Vec<(&str, &[LogRow])> = logs.iter().map(|l| (l.controller.as_str(), l.rows.as_slice())).collect();
    write_file(&dir.join("timeseries.svg"), &plot::time_series(&labelled, reference_line(exp)))?;
    if dims(exp).n >= 2 {
        write_file(&dir.join("phase.svg"), &plot::phase_plot(&labelled, &manifold(exp, logs)))?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub log: TrajectoryLog,
    pub csv: Option<PathBuf>,
}

impl SimulateOutcome {
    pub fn exit_code(&self) -> i32 {
        match &self.log.failure {
            None => 0,
            Some(e) => CliError::Model(e.clone()).exit_code(),
        }
    }
}

/// Run, then write the CSV (partial on failure) and plots.
pub fn simulate_command(exp: &Experiment) -> Result<SimulateOutcome, CliError> {
    let log = run(exp)?;
    if let Some(path) = &exp.output.csv {
        csvlog::write_log_file(path, &log.rows, dims(exp))?;
    }
    if let Some(dir) = &exp.output.plots {
        write_plots(exp, dir, &[&log])?;
    }
    Ok(SimulateOutcome {
        log,
        csv: exp.output.csv.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub kind: Kind,
    pub tracking_cost: f64,
    pub mean_model_seconds: f64,
    pub mean_solve_seconds: f64,
    pub converged: bool,
    pub final_error: Option<f64>,
    pub steps: usize,
    pub failure: Option<String>,
}

#[derive(Debug)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub logs: Vec<Option<TrajectoryLog>>,
}

impl Comparison {
    pub fn row(&self, kind: Kind) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "controller,tracking_cost,mean_model_seconds,mean_solve_seconds,converged,final_error,steps,failure\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.kind.name(),
                csvlog::format_float(r.tracking_cost),
                csvlog::format_float(r.mean_model_seconds),
                csvlog::format_float(r.mean_solve_seconds),
                r.converged,
                r.final_error.map(csvlog::format_float).unwrap_or_default(),
                r.steps,
                r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            );
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>14} {:>12} {:>12} {:>10} {:>12}\n",
            "controller", "tracking_cost", "model_ms", "solve_ms", "converged", "final_err"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>14.6} {:>12.4} {:>12.4} {:>10} {:>12}{}",
                r.kind.name(),
                r.tracking_cost,
                1e3 * r.mean_model_seconds,
                1e3 * r.mean_solve_seconds,
                r.converged,
                r.final_error.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into()),
                r.failure.as_ref().map(|f| format!("  [{f}]")).unwrap_or_default(),
            );
        }
        s
    }
}

/// Run all four controllers on the same plant and initial state, in
/// parallel. A failing controller is reported in its row.
pub fn compare(exp: &Experiment) -> Comparison {
    let n_steps = match exp.kind {
        Kind::ProposedNStep => exp.mpc.step_count,
        _ => exp.prediction.state_dim(),
    };
    let results: Vec<(Kind, lintrack::Result<TrajectoryLog>)> = Kind::ALL
        .par_iter()
        .map(|&k| (k, run(&exp.with_kind(k, n_steps))))
        .collect();
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for (kind, result) in results {
        match result {
            Ok(log) => {
                rows.push(CompareRow {
                    kind,
                    tracking_cost: log.tracking_cost(),
                    mean_model_seconds: log.mean_model_seconds(),
                    mean_solve_seconds: log.mean_solve_seconds(),
                    converged: converged(&log),
                    final_error: log.final_output_error(),
                    steps: log.rows.len().saturating_sub(1),
                    failure: log.failure.as_ref().map(ToString::to_string),
                });
                logs.push(Some(log));
            }
            Err(e) => {
                rows.push(CompareRow {
                    kind,
                    tracking_cost: f64::NAN,
                    mean_model_seconds: f64::NAN,
                    mean_solve_seconds: f64::NAN,
                    converged: false,
                    final_error: None,
                    steps: 0,
                    failure: Some(e.to_string()),
                });
                logs.push(None);
            }
        }
    }
    Comparison { rows, logs }
}

pub fn compare_command(exp: &Experiment) -> Result<Comparison, CliError> {
    let cmp = compare(exp);
    if let Some(path) = &exp.output.summary {
        write_file(path, &cmp.summary_csv())?;
    }
    if let Some(path) = &exp.output.csv {
        // one log per controller next to the requested path
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
        for log in cmp.logs.iter().flatten() {
            let p = path.with_file_name(format!("{stem}_{}.csv", log.controller));
            csvlog::write_log_file(&p, &log.rows, dims(exp))?;
        }
    }
    if let Some(dir) = &exp.output.plots {
        let logs: Vec<&TrajectoryLog> = cmp.logs.iter().flatten().collect();
        write_plots(exp, dir, &logs)?;
    }
    Ok(cmp)
}

/// Certification settings resolved against the experiment.
pub fn certify_options(exp: &Experiment) -> Result<(BoxSet, CertifyOptions), ConfigError> {
    let c = &exp.certify;
    let n = dims(exp).n;
    let state_box = match &c.state_box {
        Some(b) => config::BoxSpec::PerAxis(b.clone()).to_box("certify.box", n)?,
        None => match exp.plant {
            config::PlantChoice::Cstr(_) => BoxSet::from_slices(&[0.0, 0.0], &[1.0, 1.0]).expect("valid"),
            config::PlantChoice::Linear(_) => {
                return Err(ConfigError::Invalid {
                    key: "certify.box".into(),
                    message: "required for user plants".into(),
                })
            }
        },
    };
    let defaults = CertifyOptions::default();
    let positive = |v: Option<f64>, key: &str, d: f64| match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(ConfigError::Invalid {
            key: key.into(),
            message: "must be positive".into(),
        }),
        Some(x) => Ok(x),
        None => Ok(d),
    };
    let thresholds = Thresholds {
        sigma_s: positive(c.sigma_s_min, "certify.sigma_s_min", defaults.thresholds.sigma_s)?,
        ctrb: positive(c.ctrb_min, "certify.ctrb_min", defaults.thresholds.ctrb)?,
        sigma_underbar: positive(
            c.sigma_underbar_min,
            "certify.sigma_underbar_min",
            defaults.thresholds.sigma_underbar,
        )?,
        reach: defaults.thresholds.reach,
    };
    let grid = c.grid.unwrap_or(defaults.grid);
    if grid < 2 {
        return Err(ConfigError::Invalid {
            key: "certify.grid".into(),
            message: "needs at least two points per axis".into(),
        });
    }
    let input_point = match &c.input_point {
        Some(v) => Some(v.to_vector("certify.input_point", dims(exp).m)?),
        None => None,
    };
    Ok((
        state_box,
        CertifyOptions {
            thresholds,
            grid,
            left_open: c.left_open.unwrap_or(defaults.left_open),
            input_point,
            manifold_samples: defaults.manifold_samples,
        },
    ))
}

pub fn trace_from_rows(rows: &[LogRow]) -> LyapunovTrace {
    LyapunovTrace {
        samples: rows
            .iter()
            .filter_map(|r| {
                r.solve.as_ref().map(|s| LyapunovSample {
                    t: r.t,
                    v: s.v,
                    j_eq_lin: s.j_eq_lin,
                    dist_lin: s.dist_lin,
                    dist_nl: s.dist_nl,
                })
            })
            .collect(),
    }
}

#[derive(Debug)]
pub struct CertifyOutcome {
    pub report: AssumptionReport,
    pub smoothness: Option<SmoothnessEstimates>,
    pub text: String,
}

/// Spacing of consecutive solves in a trace.
fn solve_spacing(trace: &LyapunovTrace) -> Option<usize> {
    trace.samples.windows(2).map(|w| w[1].t - w[0].t).min()
}

pub fn lyapunov_section(trace: &LyapunovTrace) -> String {
    let mut s = String::from("\n[lyapunov]\n");
    let _ = writeln!(s, "solves = {}", trace.samples.len());
    match value_bounds(trace) {
        Ok(b) => {
            let _ = writeln!(s, "c_l = {:.6e}", b.c_l);
            match b.c_u {
                Some(c) => {
                    let _ = writeln!(s, "c_u = {c:.6e}");
                }
                None => {
                    let _ = writeln!(s, "c_u = none (no solve within delta)");
                }
            }
            let _ = writeln!(s, "delta = {:.6e}", b.delta);
        }
        Err(e) => {
            let _ = writeln!(s, "value_bounds = unavailable ({e})");
        }
    }
    let step = solve_spacing(trace).unwrap_or(1);
    let t_skip = trace.samples.get(CONTRACTION_SKIP).map_or(usize::MAX, |x| x.t);
    let c = contraction_check(&trace.after(t_skip), step);
    let _ = writeln!(
        s,
        "c_v = {} (pairs {}, violations {})",
        c.c_v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "none".into()),
        c.pairs,
        c.violations.len()
    );
    let values: Vec<f64> = trace.samples.iter().map(|x| x.v).collect();
    if let Ok((cst, rho)) = exponential_fit(&values) {
        let _ = writeln!(s, "v_fit = C {cst:.6e}, rho {rho:.6}");
    }
    match distance_fit(trace, FIT_START) {
        Ok((cst, rho)) => {
            let _ = writeln!(s, "rho_fit = {rho:.6} (C {cst:.6e}, from t = {FIT_START})");
        }
        Err(e) => {
            let _ = writeln!(s, "rho_fit = unavailable ({e})");
        }
    }
    s
}

pub fn report_text(report: &AssumptionReport, state_box: &BoxSet, options: &CertifyOptions) -> String {
    let mut s = String::from("[assumptions]\n");
    let fmt_box = |b: &BoxSet| {
        b.lower
            .iter()
            .zip(b.upper.iter())
            .map(|(l, u)| format!("{}{l}, {u}]", if options.left_open { "(" } else { "[" }))
            .collect::<Vec<_>>()
            .join(" x ")
    };
    let _ = writeln!(s, "box = {}", fmt_box(state_box));
    let _ = writeln!(s, "grid = {}", options.grid);
    let th = &report.thresholds;
    let _ = writeln!(s, "a2 sigma_s_min = {:.6e} (threshold {:.1e})", report.a2_sigma_s, th.sigma_s);
    let _ = writeln!(s, "a3 ctrb_margin = {:.6e} (threshold {:.1e})", report.a3_ctrb_margin, th.ctrb);
    let _ = writeln!(
        s,
        "a4 sigma_underbar = {:.6e} (threshold {:.1e})",
        report.a4_sigma_underbar, th.sigma_underbar
    );
    let _ = writeln!(s, "a5 manifold_radius = {:.6e}", report.a5_manifold_radius);
    let _ = writeln!(s, "a7 reachable = {}", report.a7_reachable);
    let _ = writeln!(s, "a6 = {}", report.a6);
    let failing: Vec<_> = report.failing_points().collect();
    let _ = writeln!(s, "failing_points = {} of {}", failing.len(), report.points.len());
    let unreachable = report.points.iter().filter(|p| !p.reachable).count();
    let _ = writeln!(s, "unreachable_points = {unreachable}");
    s.push_str("\n[points]\n");
    let n = report.points.first().map_or(0, |p| p.state.len());
    let cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let _ = writeln!(s, "{},sigma_s,ctrb,sigma_underbar,reachable,failed", cols.join(","));
    for p in &report.points {
        if p.failed.is_empty() && p.reachable {
            continue;
        }
        let x: Vec<String> = p.state.iter().map(|v| format!("{v:.6}")).collect();
        let failed: Vec<&str> = p.failed.iter().map(|c| c.label()).collect();
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6e},{:.6e},{},{}",
            x.join(","),
            p.sigma_s,
            p.ctrb,
            p.sigma_underbar,
            p.reachable,
            failed.join(";")
        );
    }
    s
}

pub fn certify(exp: &Experiment) -> Result<CertifyOutcome, CliError> {
    let (state_box, options) = certify_options(exp)?;
    let report = check_assumptions(&exp.prediction, &state_box, &exp.mpc, &options)?;
    let mut text = report_text(&report, &state_box, &options);
    let plant = exp.prediction.plant();
    let samples = exp.certify.smoothness_samples.unwrap_or(10_000);
    let smoothness = if samples >= 2 {
        let est = estimate_smoothness(plant.as_ref(), &state_box, &exp.mpc.input_set, samples, exp.seed)?;
        text.push_str("\n[smoothness]\n");
        let _ = writeln!(text, "samples = {}, seed = {}", est.samples, exp.seed);
        let _ = writeln!(text, "c_x = {:.6e}\nc_xh = {:.6e}\nl_f = {:.6e}\nl_h = {:.6e}", est.c_x, est.c_xh, est.l_f, est.l_h);
        Some(est)
    } else {
        None
    };
    if let Some(path) = &exp.certify.trajectory {
        let (_, rows) = csvlog::read_log_file(path)?;
        text.push_str(&lyapunov_section(&trace_from_rows(&rows)));
    }
    if let Some(path) = &exp.output.report {
        write_file(path, &text)?;
    }
    Ok(CertifyOutcome {
        report,
        smoothness,
        text,
    })
}
