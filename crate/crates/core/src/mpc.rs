//! Tracking MPC with artificial setpoints on an online linearization.
//!
//! At every solve instant the prediction model is linearized at the
//! measured state and the quadratic program
//!
//! ```text
//!   min  sum_k |x_k - xs|_Q^2 + |u_k - us|_R^2 + |ys - y_r|_S^2
//!   s.t. x_0 = x_t,  x_{k+1} = A x_k + B u_k + e,  x_N = xs,
//!        xs = A xs + B us + e,  ys = C xs + D us + r,
//!        u_k in U,  us in U_s
//! ```
//!
//! is solved. The first `step_count` inputs are applied before re-solving.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::augment::AugmentedModel;
use crate::equilibria::{
    min_eigenvalue, optimal_reachable_equilibrium_lin, optimal_reachable_equilibrium_nonlinear,
    steady_state_map, TargetSpec,
};
use crate::error::{Error, Result};
use crate::model::{evaluate_step, linearize, Linearization, Plant, SystemModel};
use crate::qp::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
use crate::sets::BoxSet;

/// Tolerance on equality residuals of returned solutions.
pub const SOLUTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// State weight of the plant state.
    pub q: DMatrix<f64>,
    /// Input weight. For incremental prediction models it weights the
    /// deviation of the applied input from its equilibrium value.
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub horizon: usize,
    pub step_count: usize,
    pub input_set: BoxSet,
    pub equilibrium_input_set: BoxSet,
    pub y_r: DVector<f64>,
    /// Weight on the increment for incremental prediction models.
    pub delta_u_penalty: f64,
}

impl MpcConfig {
    pub fn target(&self) -> Result<TargetSpec> {
        TargetSpec::new(self.y_r.clone(), self.s.clone())
    }

    /// Check the configuration against the prediction model.
    pub fn validate(&self, prediction: &PredictionModel) -> Result<()> {
        let (n_plant, m) = prediction.plant_dims();
        let p = prediction.output_dim();
        let n = prediction.state_dim();
        if self.q.shape() != (n_plant, n_plant) {
            return Err(Error::Config(format!("Q must be {n_plant}x{n_plant}")));
        }
        if self.r.shape() != (m, m) {
            return Err(Error::Config(format!("R must be {m}x{m}")));
        }
        if self.s.shape() != (p, p) || self.y_r.len() != p {
            return Err(Error::Config(format!("S must be {p}x{p} and y_r of length {p}")));
        }
        for (name, w) in [("Q", &self.q), ("R", &self.r), ("S", &self.s)] {
            if min_eigenvalue(w) <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive definite")));
            }
        }
        if self.horizon < n {
            return Err(Error::Config(format!(
                "horizon N = {} must be at least the state dimension {n}",
                self.horizon
            )));
        }
        if self.step_count < 1 || self.step_count > n {
            return Err(Error::Config(format!("step_count must lie in [1, {n}]")));
        }
        if self.input_set.dim() != m || self.equilibrium_input_set.dim() != m {
            return Err(Error::Config(format!("U and U_s must have dimension {m}")));
        }
        if self.input_set.interior_margin(&self.equilibrium_input_set) <= 0.0 {
            return Err(Error::Config("U_s must lie strictly inside U".into()));
        }
        if matches!(prediction, PredictionModel::Incremental(_)) && !(self.delta_u_penalty > 0.0) {
            return Err(Error::Config(
                "delta_u_penalty must be positive for incremental models".into(),
            ));
        }
        if !self.delta_u_penalty.is_finite() || self.delta_u_penalty < 0.0 {
            return Err(Error::Config("delta_u_penalty must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Model used for prediction: a control-affine plant directly, or a plant
/// made control-affine through the incremental-input augmentation.
#[derive(Debug, Clone)]
pub enum PredictionModel {
    Direct(SystemModel),
    Incremental(AugmentedModel),
}

impl PredictionModel {
    pub fn model(&self) -> &SystemModel {
        match self {
            PredictionModel::Direct(m) => m,
            PredictionModel::Incremental(a) => &a.model,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model().state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.model().output_dim()
    }

    /// `(n, m)` of the physical plant.
    pub fn plant_dims(&self) -> (usize, usize) {
        match self {
            PredictionModel::Direct(m) => (m.state_dim(), m.input_dim()),
            PredictionModel::Incremental(a) => (a.base_state_dim(), a.input_dim()),
        }
    }

    /// The physical plant whose equilibria define the tracking target.
    pub fn plant(&self) -> Arc<dyn Plant> {
        match self {
            PredictionModel::Direct(m) => Arc::new(m.clone()),
            PredictionModel::Incremental(a) => a.base.clone(),
        }
    }

    /// Linearization with a nonsingular `I - A` describing the steady
    /// states of `lin`.
    pub fn equilibrium_model(&self, lin: &Linearization) -> Result<Linearization> {
        match self {
            PredictionModel::Direct(_) => Ok(lin.clone()),
            PredictionModel::Incremental(a) => a.reduce(lin),
        }
    }

    /// Map a plant steady state `(x, u)` to a prediction-model state.
    pub fn steady_state_vector(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            PredictionModel::Direct(_) => x.clone(),
            PredictionModel::Incremental(a) => a.join(x, u),
        }
    }

    /// Plant state and, when it is part of the state, the applied input.
    pub fn physical(&self, z: &DVector<f64>) -> (DVector<f64>, Option<DVector<f64>>) {
        match self {
            PredictionModel::Direct(_) => (z.clone(), None),
            PredictionModel::Incremental(a) => {
                let (x, u) = a.split(z);
                (x, Some(u))
            }
        }
    }

    /// Physical view of an artificial equilibrium `(xs, us, ys)`.
    pub fn physical_equilibrium(
        &self,
        x_s: &DVector<f64>,
        u_s: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        match self.physical(x_s) {
            (x, Some(u)) => (x, u),
            (x, None) => (x, u_s.clone()),
        }
    }
}

/// Index bookkeeping of the decision vector
/// `(x_1 .. x_N, u_0 .. u_{N-1}, xs, us, ys)`.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.horizon * (self.n + self.m) + self.n + self.m + self.p
    }
    /// Offset of `x_k`, `k = 1..=N`.
    pub fn x(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.horizon);
        (k - 1) * self.n
    }
    /// Offset of `u_k`, `k = 0..N`.
    pub fn u(&self, k: usize) -> usize {
        self.horizon * self.n + k * self.m
    }
    pub fn xs(&self) -> usize {
        self.horizon * (self.n + self.m)
    }
    pub fn us(&self) -> usize {
        self.xs() + self.n
    }
    pub fn ys(&self) -> usize {
        self.us() + self.m
    }
    pub fn num_eq(&self) -> usize {
        self.horizon * self.n + 2 * self.n + self.p
    }
}

/// Weights and constraint sets in prediction-model coordinates.
#[derive(Debug, Clone)]
struct Weights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    s: DMatrix<f64>,
    y_r: DVector<f64>,
    stage_input: Option<BoxSet>,
    equilibrium_input: Option<BoxSet>,
    /// `(offset, U, U_s)` for inputs embedded in the state.
    state_slice: Option<(usize, BoxSet, BoxSet)>,
}

impl Weights {
    fn new(config: &MpcConfig, prediction: &PredictionModel) -> Self {
        match prediction {
            PredictionModel::Direct(_) => Weights {
                q: config.q.clone(),
                r: config.r.clone(),
                s: config.s.clone(),
                y_r: config.y_r.clone(),
                stage_input: Some(config.input_set.clone()),
                equilibrium_input: Some(config.equilibrium_input_set.clone()),
                state_slice: None,
            },
            PredictionModel::Incremental(aug) => {
                let n = aug.base_state_dim();
                let m = aug.input_dim();
                let mut q = DMatrix::zeros(n + m, n + m);
                q.view_mut((0, 0), (n, n)).copy_from(&config.q);
                q.view_mut((n, n), (m, m)).copy_from(&config.r);
                Weights {
                    q,
                    r: DMatrix::identity(m, m) * config.delta_u_penalty,
                    s: config.s.clone(),
                    y_r: config.y_r.clone(),
                    stage_input: aug.increment_set.clone(),
                    equilibrium_input: aug.increment_set.clone(),
                    state_slice: Some((
                        n,
                        config.input_set.clone(),
                        config.equilibrium_input_set.clone(),
                    )),
                }
            }
        }
    }
}

fn add_block(h: &mut DMatrix<f64>, i: usize, j: usize, w: &DMatrix<f64>, scale: f64) {
    let (r, c) = w.shape();
    let mut view = h.view_mut((i, j), (r, c));
    view += w * scale;
}

/// `|z_a - z_b|_W^2` with both blocks in the decision vector.
fn add_difference(h: &mut DMatrix<f64>, a: usize, b: usize, w: &DMatrix<f64>) {
    add_block(h, a, a, w, 2.0);
    add_block(h, b, b, w, 2.0);
    add_block(h, a, b, w, -2.0);
    add_block(h, b, a, w, -2.0);
}

/// `|c - z_b|_W^2` with `c` constant; returns the constant part.
fn add_offset(h: &mut DMatrix<f64>, g: &mut DVector<f64>, b: usize, c: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    add_block(h, b, b, w, 2.0);
    let wc = w * c;
    let mut gv = g.rows_mut(b, c.len());
    gv -= &wc * 2.0;
    c.dot(&wc)
}

fn add_box_rows(rows: &mut Vec<(usize, f64, f64)>, offset: usize, set: &BoxSet) {
    for i in 0..set.dim() {
        rows.push((offset + i, set.lower[i], set.upper[i]));
    }
}

/// Assemble the tracking QP with per-stage models `stages[k]`, `k = 0..N`,
/// and the equilibrium model `eq`.
fn assemble(
    weights: &Weights,
    layout: &Layout,
    stages: &[&Linearization],
    eq: &Linearization,
    x_t: &DVector<f64>,
) -> Result<QpProblem> {
    let Layout { n, m, p, horizon } = *layout;
    if x_t.len() != n {
        return Err(Error::dim(format!("state has length {}, expected {n}", x_t.len())));
    }
    if stages.len() != horizon {
        return Err(Error::dim("one stage model per prediction step is required"));
    }
    for lin in stages.iter().chain(std::iter::once(&eq)) {
        if lin.state_dim() != n || lin.input_dim() != m || lin.output_dim() != p {
            return Err(Error::dim("linearization does not match the prediction model"));
        }
    }
    let d = layout.dim();
    let mut h = DMatrix::zeros(d, d);
    let mut g = DVector::zeros(d);
    let mut constant = 0.0;

    // stage costs, x_0 = x_t substituted
    constant += add_offset(&mut h, &mut g, layout.xs(), x_t, &weights.q);
    for k in 1..horizon {
        add_difference(&mut h, layout.x(k), layout.xs(), &weights.q);
    }
    for k in 0..horizon {
        add_difference(&mut h, layout.u(k), layout.us(), &weights.r);
    }
    constant += add_offset(&mut h, &mut g, layout.ys(), &weights.y_r, &weights.s);

    let q_rows = layout.num_eq();
    let mut a_eq = DMatrix::zeros(q_rows, d);
    let mut b_eq = DVector::zeros(q_rows);
    let eye_n = DMatrix::<f64>::identity(n, n);
    for k in 0..horizon {
        let lin = stages[k];
        let row = k * n;
        a_eq.view_mut((row, layout.x(k + 1)), (n, n)).copy_from(&eye_n);
        a_eq.view_mut((row, layout.u(k)), (n, m)).copy_from(&(-&lin.b));
        if k == 0 {
            b_eq.rows_mut(row, n).copy_from(&(&lin.a * x_t + &lin.e));
        } else {
            a_eq.view_mut((row, layout.x(k)), (n, n)).copy_from(&(-&lin.a));
            b_eq.rows_mut(row, n).copy_from(&lin.e);
        }
    }
    // terminal equality x_N = xs
    let row = horizon * n;
    a_eq.view_mut((row, layout.x(horizon)), (n, n)).copy_from(&eye_n);
    a_eq.view_mut((row, layout.xs()), (n, n)).copy_from(&(-&eye_n));
    // xs = A xs + B us + e
    let row = row + n;
    a_eq.view_mut((row, layout.xs()), (n, n)).copy_from(&(&eq.a - &eye_n));
    a_eq.view_mut((row, layout.us()), (n, m)).copy_from(&eq.b);
    b_eq.rows_mut(row, n).copy_from(&(-&eq.e));
    // ys = C xs + D us + r
    let row = row + n;
    a_eq.view_mut((row, layout.ys()), (p, p)).fill_with_identity();
    a_eq.view_mut((row, layout.xs()), (p, n)).copy_from(&(-&eq.c));
    a_eq.view_mut((row, layout.us()), (p, m)).copy_from(&(-&eq.d));
    b_eq.rows_mut(row, p).copy_from(&eq.r);

    let mut bounds = Vec::new();
    if let Some(set) = &weights.stage_input {
        for k in 0..horizon {
            add_box_rows(&mut bounds, layout.u(k), set);
        }
    }
    if let Some(set) = &weights.equilibrium_input {
        add_box_rows(&mut bounds, layout.us(), set);
    }
    if let Some((offset, u_set, us_set)) = &weights.state_slice {
        // x_N = xs, so its slice is covered by the equilibrium bound
        for k in 1..horizon {
            add_box_rows(&mut bounds, layout.x(k) + offset, u_set);
        }
        add_box_rows(&mut bounds, layout.xs() + offset, us_set);
    }
    let mut a_in = DMatrix::zeros(2 * bounds.len(), d);
    let mut b_in = DVector::zeros(2 * bounds.len());
    for (i, (col, lo, hi)) in bounds.iter().enumerate() {
        a_in[(2 * i, *col)] = 1.0;
        b_in[2 * i] = *hi;
        a_in[(2 * i + 1, *col)] = -1.0;
        b_in[2 * i + 1] = -*lo;
    }
    Ok(QpProblem::new(h, g, a_eq, b_eq, a_in, b_in)?.with_constant(constant))
}

/// Tracking QP for a single linearization `lin` at the measured state.
pub fn build_problem(
    config: &MpcConfig,
    prediction: &PredictionModel,
    lin: &Linearization,
    x_t: &DVector<f64>,
) -> Result<QpProblem> {
    config.validate(prediction)?;
    let layout = layout_of(config, prediction);
    let stages = vec![lin; config.horizon];
    assemble(&Weights::new(config, prediction), &layout, &stages, lin, x_t)
}

pub fn layout_of(config: &MpcConfig, prediction: &PredictionModel) -> Layout {
    Layout {
        n: prediction.state_dim(),
        m: prediction.input_dim(),
        p: prediction.output_dim(),
        horizon: config.horizon,
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// `x_0 .. x_N`, with `x_0` the measured state.
    pub x_bar: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    pub y_s: DVector<f64>,
    pub j_n: f64,
    pub qp: QpSolution,
}

impl MpcSolution {
    fn from_qp(layout: &Layout, x_t: &DVector<f64>, qp: QpSolution) -> Self {
        let z = &qp.z;
        let mut x_bar = vec![x_t.clone()];
        x_bar.extend((1..=layout.horizon).map(|k| z.rows(layout.x(k), layout.n).into_owned()));
        let u_bar = (0..layout.horizon)
            .map(|k| z.rows(layout.u(k), layout.m).into_owned())
            .collect();
        MpcSolution {
            x_bar,
            u_bar,
            x_s: z.rows(layout.xs(), layout.n).into_owned(),
            u_s: z.rows(layout.us(), layout.m).into_owned(),
            y_s: z.rows(layout.ys(), layout.p).into_owned(),
            j_n: qp.objective,
            qp,
        }
    }

    pub fn horizon(&self) -> usize {
        self.u_bar.len()
    }

    /// Decision vector of the previous solution shifted by `steps`, with the
    /// tail held at the artificial equilibrium.
    pub fn shifted(&self, steps: usize) -> DVector<f64> {
        let horizon = self.horizon();
        let (n, m, p) = (self.x_s.len(), self.u_s.len(), self.y_s.len());
        let layout = Layout { n, m, p, horizon };
        let mut z = DVector::zeros(layout.dim());
        for k in 1..=horizon {
            let src = k + steps;
            let x = if src <= horizon { &self.x_bar[src] } else { &self.x_s };
            z.rows_mut(layout.x(k), n).copy_from(x);
        }
        for k in 0..horizon {
            let src = k + steps;
            let u = if src < horizon { &self.u_bar[src] } else { &self.u_s };
            z.rows_mut(layout.u(k), m).copy_from(u);
        }
        z.rows_mut(layout.xs(), n).copy_from(&self.x_s);
        z.rows_mut(layout.us(), m).copy_from(&self.u_s);
        z.rows_mut(layout.ys(), p).copy_from(&self.y_s);
        z
    }

    /// Cost recomputed from the trajectories.
    pub fn evaluate_cost(&self, config: &MpcConfig, prediction: &PredictionModel) -> f64 {
        let w = Weights::new(config, prediction);
        let quad = |v: DVector<f64>, m: &DMatrix<f64>| v.dot(&(m * &v));
        let mut cost = quad(&self.y_s - &w.y_r, &w.s);
        for k in 0..self.horizon() {
            cost += quad(&self.x_bar[k] - &self.x_s, &w.q);
            cost += quad(&self.u_bar[k] - &self.u_s, &w.r);
        }
        cost
    }

    /// Largest violation of the dynamics, terminal and steady-state
    /// equalities for the single model `lin`.
    pub fn equality_residual(&self, lin: &Linearization) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.horizon() {
            let pred = &lin.a * &self.x_bar[k] + &lin.b * &self.u_bar[k] + &lin.e;
            worst = worst.max((&self.x_bar[k + 1] - pred).amax());
        }
        worst = worst.max((&self.x_bar[self.horizon()] - &self.x_s).amax());
        let eq = &lin.a * &self.x_s + &lin.b * &self.u_s + &lin.e - &self.x_s;
        worst = worst.max(eq.amax());
        let y = &lin.c * &self.x_s + &lin.d * &self.u_s + &lin.r - &self.y_s;
        worst.max(y.amax())
    }
}

fn check_status(qp: &QpSolution, x_t: &DVector<f64>) -> Result<()> {
    match qp.status {
        QpStatus::Optimal => Ok(()),
        QpStatus::Infeasible => Err(Error::infeasible_at(x_t)),
        QpStatus::MaxIterations => Err(Error::Convergence("QP iteration limit reached".into())),
    }
}

/// Linearize at `x_t` and solve the tracking QP. `warm` is the previous
/// solution; it is shifted by `config.step_count` before use.
pub fn solve_mpc(
    config: &MpcConfig,
    prediction: &PredictionModel,
    x_t: &DVector<f64>,
    warm: Option<&MpcSolution>,
) -> Result<MpcSolution> {
    let lin = linearize(prediction.model(), x_t)?;
    let problem = build_problem(config, prediction, &lin, x_t)?;
    let guess = warm.map(|w| w.shifted(config.step_count));
    let qp = QpSolver::new(QpSettings::default()).solve(&problem, guess.as_ref())?;
    check_status(&qp, x_t)?;
    Ok(MpcSolution::from_qp(&layout_of(config, prediction), x_t, qp))
}

/// How the prediction model is obtained at each solve.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerKind {
    /// Linearization at the measured state.
    Proposed,
    /// One fixed linearization at `point`.
    Lti { point: DVector<f64> },
    /// Stage-wise linearizations along the shifted previous prediction.
    Ltv,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Proposed => "proposed",
            ControllerKind::Lti { .. } => "lti",
            ControllerKind::Ltv => "ltv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControllerOutput {
    pub solution: MpcSolution,
    /// Jacobian evaluations spent building the prediction model.
    pub linearizations: usize,
    pub model_time: Duration,
    pub solve_time: Duration,
}

/// Stateful controller holding the warm-start cache.
#[derive(Debug, Clone)]
pub struct Controller {
    config: MpcConfig,
    prediction: PredictionModel,
    kind: ControllerKind,
    weights: Weights,
    layout: Layout,
    solver: QpSolver,
    previous: Option<MpcSolution>,
    fixed: Option<Linearization>,
}

impl Controller {
    pub fn new(config: MpcConfig, prediction: PredictionModel, kind: ControllerKind) -> Result<Self> {
        config.validate(&prediction)?;
        if let PredictionModel::Incremental(aug) = &prediction {
            if aug.input_set != config.input_set {
                return Err(Error::Config(
                    "augmented model and configuration use different input sets".into(),
                ));
            }
        }
        let fixed = match &kind {
            ControllerKind::Lti { point } => Some(linearize(prediction.model(), point)?),
            _ => None,
        };
        Ok(Controller {
            weights: Weights::new(&config, &prediction),
            layout: layout_of(&config, &prediction),
            config,
            prediction,
            kind,
            solver: QpSolver::new(QpSettings::default()),
            previous: None,
            fixed,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn prediction(&self) -> &PredictionModel {
        &self.prediction
    }

    pub fn kind(&self) -> &ControllerKind {
        &self.kind
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Inputs applied per solve: `step_count` for the proposed scheme, one
    /// for the baselines.
    pub fn applied_steps(&self) -> usize {
        match self.kind {
            ControllerKind::Proposed => self.config.step_count,
            _ => 1,
        }
    }

    pub fn previous(&self) -> Option<&MpcSolution> {
        self.previous.as_ref()
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    /// Replace the warm-start cache, which for the LTV scheme also fixes the
    /// stage linearization points.
    pub fn set_previous(&mut self, previous: Option<MpcSolution>) {
        self.previous = previous;
    }

    pub fn solve(&mut self, x_t: &DVector<f64>) -> Result<ControllerOutput> {
        let started = Instant::now();
        let model = self.prediction.model();
        let horizon = self.layout.horizon;
        let (problem, linearizations) = match &self.kind {
            ControllerKind::Proposed => {
                let lin = linearize(model, x_t)?;
                let stages = vec![&lin; horizon];
                (assemble(&self.weights, &self.layout, &stages, &lin, x_t)?, 1)
            }
            ControllerKind::Lti { .. } => {
                let lin = self.fixed.as_ref().expect("set in constructor");
                let stages = vec![lin; horizon];
                (assemble(&self.weights, &self.layout, &stages, lin, x_t)?, 0)
            }
            ControllerKind::Ltv => match &self.previous {
                None => {
                    let lin = linearize(model, x_t)?;
                    let stages = vec![&lin; horizon];
                    (assemble(&self.weights, &self.layout, &stages, &lin, x_t)?, 1)
                }
                Some(prev) => {
                    let lins = (0..horizon)
                        .map(|k| linearize(model, &prev.x_bar[(k + 1).min(horizon)]))
                        .collect::<Result<Vec<_>>>()?;
                    let stages: Vec<&Linearization> = lins.iter().collect();
                    let last = lins.last().expect("horizon is positive");
                    (assemble(&self.weights, &self.layout, &stages, last, x_t)?, horizon)
                }
            },
        };
        let model_time = started.elapsed();
        let guess = self.previous.as_ref().map(|p| p.shifted(self.applied_steps()));
        let started = Instant::now();
        let qp = self.solver.solve(&problem, guess.as_ref())?;
        let solve_time = started.elapsed();
        check_status(&qp, x_t)?;
        let solution = MpcSolution::from_qp(&self.layout, x_t, qp);
        self.previous = Some(solution.clone());
        Ok(ControllerOutput {
            solution,
            linearizations,
            model_time,
            solve_time,
        })
    }
}

/// Controller quantities recorded at a solve instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveRecord {
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    pub y_s: DVector<f64>,
    pub j_n: f64,
    pub j_eq_lin: f64,
    pub v: f64,
    pub dist_lin: f64,
    pub dist_nl: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub t_model_s: f64,
    pub t_solve_s: f64,
}

/// One row per time instant, in plant coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: Option<DVector<f64>>,
    pub y: Option<DVector<f64>>,
    pub solve: Option<SolveRecord>,
}

/// Diagnostics of a solve instant that are not part of the tabular log.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub t: usize,
    /// `|x_{t+1} - x_bar_1(t)|_inf` in prediction coordinates.
    pub prediction_error: f64,
    /// `|x_{t+1}|_inf`.
    pub next_state_norm: f64,
    /// `|x_t - xs|_Q^2 + lambda_min(S) |ys - y^sr_lin|^2`.
    pub value_lower: f64,
    pub linearizations: usize,
    /// `sigma_min` of the steady-state map at `x_t`.
    pub sigma_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub controller: String,
    pub rows: Vec<LogRow>,
    pub diagnostics: Vec<SolveDiagnostics>,
    /// Optimal reachable equilibrium of the plant in prediction
    /// coordinates, if it could be computed.
    pub reference: Option<DVector<f64>>,
    pub y_r: DVector<f64>,
    /// Error that stopped the run early.
    pub failure: Option<Error>,
}

impl TrajectoryLog {
    /// `sum_t |y_t - y_r|^2` over all rows with an output.
    pub fn tracking_cost(&self) -> f64 {
        self.rows
            .iter()
            .filter_map(|r| r.y.as_ref())
            .map(|y| (y - &self.y_r).norm_squared())
            .sum()
    }

    pub fn final_output_error(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find_map(|r| r.y.as_ref())
            .map(|y| (y - &self.y_r).amax())
    }

    pub fn solve_rows(&self) -> impl Iterator<Item = (usize, &SolveRecord)> {
        self.rows.iter().filter_map(|r| r.solve.as_ref().map(|s| (r.t, s)))
    }

    pub fn mean_model_seconds(&self) -> f64 {
        mean(self.solve_rows().map(|(_, s)| s.t_model_s))
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        mean(self.solve_rows().map(|(_, s)| s.t_solve_s))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Optimal reachable equilibrium of the plant in prediction coordinates.
pub fn reference_equilibrium(
    config: &MpcConfig,
    prediction: &PredictionModel,
    x0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let plant = prediction.plant();
    let target = config.target()?;
    let (x_plant, _) = prediction.physical(x0);
    let mut guesses = vec![x_plant];
    if let Ok(lin) = linearize(prediction.model(), x0) {
        if let Ok(best) = prediction
            .equilibrium_model(&lin)
            .and_then(|eq| optimal_reachable_equilibrium_lin(&eq, &target, &config.equilibrium_input_set))
        {
            guesses.push(best.equilibrium.x_s);
        }
    }
    let opt = optimal_reachable_equilibrium_nonlinear(
        plant.as_ref(),
        &target,
        &config.equilibrium_input_set,
        &guesses,
    )?;
    Ok(prediction.steady_state_vector(&opt.equilibrium.x_s, &opt.equilibrium.u_s))
}

fn plant_output(prediction: &PredictionModel, z: &DVector<f64>, u: Option<&DVector<f64>>) -> Option<DVector<f64>> {
    let model = prediction.model();
    match (prediction, u) {
        (PredictionModel::Incremental(_), _) => Some(model.h0(z)),
        (PredictionModel::Direct(_), Some(u)) => Some(model.h0(z) + model.d() * u),
        (PredictionModel::Direct(_), None) => (model.d().amax() == 0.0).then(|| model.h0(z)),
    }
}

/// Run the receding-horizon loop for `steps` plant steps and keep
/// whatever was logged if a solve fails.
pub fn simulate(controller: &mut Controller, x0: &DVector<f64>, steps: usize) -> TrajectoryLog {
    let prediction = controller.prediction().clone();
    let config = controller.config().clone();
    let model = prediction.model().clone();
    let reference = reference_equilibrium(&config, &prediction, x0).ok();
    let target = config.target().ok();
    let lambda_s = min_eigenvalue(&config.s);
    let weights = Weights::new(&config, &prediction);
    let mut log = TrajectoryLog {
        controller: controller.kind().name().to_string(),
        rows: Vec::with_capacity(steps + 1),
        diagnostics: Vec::new(),
        reference: reference.clone(),
        y_r: config.y_r.clone(),
        failure: None,
    };
    if x0.len() != prediction.state_dim() {
        log.failure = Some(Error::dim("initial state length"));
        return log;
    }
    let mut x = x0.clone();
    let mut t = 0;
    while t < steps {
        let output = match controller.solve(&x) {
            Ok(o) => o,
            Err(e) => {
                log.rows.push(physical_row(&prediction, t, &x, None, None));
                log.failure = Some(e.at_time(t));
                return log;
            }
        };
        let sol = &output.solution;

        // Lyapunov quantities on the linearization at x_t
        let lin_eq = linearize(&model, &x).and_then(|l| prediction.equilibrium_model(&l));
        let (j_eq, z_sr_lin, y_sr_lin, sigma_s) = match (&lin_eq, &target) {
            (Ok(l), Some(tg)) => {
                let sigma = steady_state_map(l).map(|m| m.sigma_min).unwrap_or(f64::NAN);
                match optimal_reachable_equilibrium_lin(l, tg, &config.equilibrium_input_set) {
                    Ok(best) => (
                        best.cost,
                        Some(prediction.steady_state_vector(&best.equilibrium.x_s, &best.equilibrium.u_s)),
                        Some(best.equilibrium.y_s),
                        sigma,
                    ),
                    Err(_) => (f64::NAN, None, None, sigma),
                }
            }
            _ => (f64::NAN, None, None, f64::NAN),
        };
        let dist_lin = z_sr_lin.as_ref().map_or(f64::NAN, |z| (&x - z).norm());
        let dist_nl = reference.as_ref().map_or(f64::NAN, |z| (&x - z).norm());
        let dx = &x - &sol.x_s;
        let value_lower = dx.dot(&(&weights.q * &dx))
            + y_sr_lin
                .as_ref()
                .map_or(f64::NAN, |y| lambda_s * (&sol.y_s - y).norm_squared());
        let (xs_phys, us_phys) = prediction.physical_equilibrium(&sol.x_s, &sol.u_s);
        let record = SolveRecord {
            x_s: xs_phys,
            u_s: us_phys,
            y_s: sol.y_s.clone(),
            j_n: sol.j_n,
            j_eq_lin: j_eq,
            v: sol.j_n - j_eq,
            dist_lin,
            dist_nl,
            qp_status: sol.qp.status,
            qp_iterations: sol.qp.iterations,
            t_model_s: output.model_time.as_secs_f64(),
            t_solve_s: output.solve_time.as_secs_f64(),
        };
        let mut diag = SolveDiagnostics {
            t,
            prediction_error: f64::NAN,
            next_state_norm: f64::NAN,
            value_lower,
            linearizations: output.linearizations,
            sigma_s,
        };

        let applied = controller.applied_steps();
        for j in 0..applied {
            if t >= steps {
                break;
            }
            let u = &sol.u_bar[j];
            let next = match evaluate_step(&model, &x, u) {
                Ok(v) => v,
                Err(e) => {
                    log.failure = Some(e);
                    return log;
                }
            };
            let solve = (j == 0).then(|| record.clone());
            log.rows.push(physical_row(&prediction, t, &x, Some(u), solve));
            if j == 0 {
                diag.prediction_error = (&next - &sol.x_bar[1]).amax();
                diag.next_state_norm = next.amax();
            }
            x = next;
            t += 1;
        }
        log.diagnostics.push(diag);
    }
    log.rows.push(physical_row(&prediction, t, &x, None, None));
    log
}

/// Row in plant coordinates; `du` is the prediction-model input applied at
/// `t`, if any.
fn physical_row(
    prediction: &PredictionModel,
    t: usize,
    z: &DVector<f64>,
    du: Option<&DVector<f64>>,
    solve: Option<SolveRecord>,
) -> LogRow {
    let (x, embedded) = prediction.physical(z);
    let u = embedded.or_else(|| du.cloned());
    let y = plant_output(prediction, z, u.as_ref());
    LogRow { t, x, u, y, solve }
}

/// Closed loop under the proposed controller; fails with the time index
/// of an infeasible solve.
pub fn run_closed_loop(
    config: &MpcConfig,
    prediction: &PredictionModel,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<TrajectoryLog> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let mut controller = Controller::new(config.clone(), prediction.clone(), ControllerKind::Proposed)?;
    let mut log = simulate(&mut controller, x0, steps);
    match log.failure.take() {
        Some(e) => Err(e),
        None => Ok(log),
    }
}
