//! Experiment configuration files.
//!
//! ```toml
//! [plant]
//! name = "cstr"
//! Ts = 0.2
//!
//! [mpc]
//! Q = 1.0            # scalar, diagonal list or nested rows
//! R = 0.05
//! S = 100.0
//! N = 40
//! step_count = 3
//! U = [0.1, 2.0]
//! U_s = [0.11, 1.99]
//! y_r = 0.6519
//! delta_u_penalty = 1.0
//!
//! [sim]
//! x0 = [0.9492, 0.43]
//! steps = 2000
//!
//! [controller]
//! kind = "proposed-nstep"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use lintrack::cstr::{self, CstrParams};
use lintrack::model::{Plant, SystemModel};
use lintrack::mpc::{ControllerKind, MpcConfig, PredictionModel};
use lintrack::sets::BoxSet;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_STEPS: usize = 2000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

/// Scalar (scaled identity), diagonal, or full matrix.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>, ConfigError> {
        let m = match self {
            MatrixSpec::Scalar(v) => {
                if rows != cols {
                    return Err(ConfigError::invalid(key, "a scalar only describes a square matrix"));
                }
                DMatrix::identity(rows, cols) * *v
            }
            MatrixSpec::Diagonal(d) => {
                if rows != cols || d.len() != rows {
                    return Err(ConfigError::invalid(
                        key,
                        format!("expected {rows} diagonal entries, got {}", d.len()),
                    ));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(d))
            }
            MatrixSpec::Full(r) => {
                if r.len() != rows || r.iter().any(|row| row.len() != cols) {
                    return Err(ConfigError::invalid(key, format!("expected a {rows}x{cols} matrix")));
                }
                DMatrix::from_fn(rows, cols, |i, j| r[i][j])
            }
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::invalid(key, "entries must be finite"));
        }
        Ok(m)
    }
}

/// A number or a list, for vector-valued keys of one-dimensional plants.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    List(Vec<f64>),
}

impl VectorSpec {
    pub fn to_vector(&self, key: &str, len: usize) -> Result<DVector<f64>, ConfigError> {
        let v = match self {
            VectorSpec::Scalar(x) => vec![*x; len],
            VectorSpec::List(l) => l.clone(),
        };
        if v.len() != len {
            return Err(ConfigError::invalid(key, format!("expected {len} entries, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ConfigError::invalid(key, "entries must be finite"));
        }
        Ok(DVector::from_vec(v))
    }
}

/// Interval `[lo, hi]` applied to every input, or one `[lo, hi]` per input.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum BoxSpec {
    Interval([f64; 2]),
    PerAxis(Vec<[f64; 2]>),
}

impl BoxSpec {
    pub fn to_box(&self, key: &str, dim: usize) -> Result<BoxSet, ConfigError> {
        let bounds: Vec<[f64; 2]> = match self {
            BoxSpec::Interval(b) => vec![*b; dim],
            BoxSpec::PerAxis(v) => v.clone(),
        };
        if bounds.len() != dim {
            return Err(ConfigError::invalid(key, format!("expected {dim} intervals")));
        }
        let lo: Vec<f64> = bounds.iter().map(|b| b[0]).collect();
        let hi: Vec<f64> = bounds.iter().map(|b| b[1]).collect();
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return Err(ConfigError::invalid(key, "bounds must be finite"));
        }
        BoxSet::from_slices(&lo, &hi).map_err(|e| ConfigError::invalid(key, e.to_string()))
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub certify: CertifySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    #[serde(default = "default_plant")]
    pub name: String,
    #[serde(rename = "Ts")]
    pub ts: Option<f64>,
    /// Linear plant `x+ = A x + B u + c`, `y = C x + D u + r`.
    #[serde(rename = "A")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C")]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(rename = "D")]
    pub d: Option<Vec<Vec<f64>>>,
    pub offset: Option<Vec<f64>>,
    pub output_offset: Option<Vec<f64>>,
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection {
            name: default_plant(),
            ts: None,
            a: None,
            b: None,
            c: None,
            d: None,
            offset: None,
            output_offset: None,
        }
    }
}

fn default_plant() -> String {
    "cstr".into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    #[serde(rename = "Q")]
    pub q: Option<MatrixSpec>,
    #[serde(rename = "R")]
    pub r: Option<MatrixSpec>,
    #[serde(rename = "S")]
    pub s: Option<MatrixSpec>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub step_count: Option<usize>,
    #[serde(rename = "U")]
    pub u: Option<BoxSpec>,
    #[serde(rename = "U_s")]
    pub u_s: Option<BoxSpec>,
    pub y_r: Option<VectorSpec>,
    pub delta_u_penalty: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub x0: Option<Vec<f64>>,
    /// Initially applied input of incremental models; defaults to the
    /// input that best holds `x0` at rest.
    pub u0: Option<VectorSpec>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub csv: Option<PathBuf>,
    /// Directory for SVG plots; no plots when absent.
    pub plots: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(rename = "box")]
    pub state_box: Option<Vec<[f64; 2]>>,
    pub grid: Option<usize>,
    pub left_open: Option<bool>,
    pub input_point: Option<VectorSpec>,
    pub sigma_s_min: Option<f64>,
    pub ctrb_min: Option<f64>,
    pub sigma_underbar_min: Option<f64>,
    pub smoothness_samples: Option<usize>,
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    ProposedNStep,
    ProposedOneStep,
    Lti,
    Ltv,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::ProposedNStep, Kind::ProposedOneStep, Kind::Lti, Kind::Ltv];

    pub fn name(&self) -> &'static str {
        match self {
            Kind::ProposedNStep => "proposed-nstep",
            Kind::ProposedOneStep => "proposed-1step",
            Kind::Lti => "lti",
            Kind::Ltv => "ltv",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Plant selected by the configuration.
#[derive(Clone)]
pub enum PlantChoice {
    Cstr(CstrParams),
    Linear(SystemModel),
}

impl std::fmt::Debug for PlantChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlantChoice::Cstr(p) => f.debug_tuple("Cstr").field(p).finish(),
            PlantChoice::Linear(m) => f.debug_tuple("Linear").field(m).finish(),
        }
    }
}

/// Fully validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub plant: PlantChoice,
    pub prediction: PredictionModel,
    pub mpc: MpcConfig,
    pub kind: Kind,
    /// Initial state in prediction coordinates.
    pub x0: DVector<f64>,
    pub steps: usize,
    pub seed: u64,
    pub output: OutputSection,
    pub certify: CertifySection,
}

impl Experiment {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut exp = Self::from_str(&text)?;
        // relative output paths are taken relative to the config file
        if let Some(dir) = path.parent() {
            let rebase = |p: &mut Option<PathBuf>| {
                if let Some(q) = p.as_mut() {
                    if q.is_relative() {
                        *q = dir.join(&*q);
                    }
                }
            };
            rebase(&mut exp.output.csv);
            rebase(&mut exp.output.plots);
            rebase(&mut exp.output.summary);
            rebase(&mut exp.output.report);
            rebase(&mut exp.certify.trajectory);
        }
        Ok(exp)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_file(file: ExperimentFile) -> Result<Self, ConfigError> {
        let kind = match &file.controller.kind {
            None => Kind::ProposedNStep,
            Some(s) => Kind::parse(s).ok_or_else(|| {
                ConfigError::invalid(
                    "controller.kind",
                    format!("unknown controller `{s}` (expected proposed-nstep, proposed-1step, lti or ltv)"),
                )
            })?,
        };
        let plant = build_plant(&file.plant)?;
        let (n, m, p) = match &plant {
            PlantChoice::Cstr(_) => (2, 1, 1),
            PlantChoice::Linear(s) => (s.state_dim(), s.input_dim(), s.output_dim()),
        };
        let defaults = cstr::default_config();
        let is_cstr = matches!(plant, PlantChoice::Cstr(_));
        let pick = |spec: &Option<MatrixSpec>, key: &str, rows: usize, fallback: &DMatrix<f64>| {
            match spec {
                Some(s) => s.to_matrix(key, rows, rows),
                None if is_cstr => Ok(fallback.clone()),
                None => Ok(DMatrix::identity(rows, rows)),
            }
        };
        let q = pick(&file.mpc.q, "mpc.Q", n, &defaults.q)?;
        let r = pick(&file.mpc.r, "mpc.R", m, &defaults.r)?;
        let s = pick(&file.mpc.s, "mpc.S", p, &defaults.s)?;
        let input_set = match &file.mpc.u {
            Some(b) => b.to_box("mpc.U", m)?,
            None if is_cstr => defaults.input_set.clone(),
            None => return Err(ConfigError::invalid("mpc.U", "required for user plants")),
        };
        let equilibrium_input_set = match &file.mpc.u_s {
            Some(b) => b.to_box("mpc.U_s", m)?,
            None if is_cstr => defaults.equilibrium_input_set.clone(),
            None => return Err(ConfigError::invalid("mpc.U_s", "required for user plants")),
        };
        let y_r = match &file.mpc.y_r {
            Some(v) => v.to_vector("mpc.y_r", p)?,
            None if is_cstr => defaults.y_r.clone(),
            None => return Err(ConfigError::invalid("mpc.y_r", "required for user plants")),
        };
        let delta_u_penalty = file.mpc.delta_u_penalty.unwrap_or(defaults.delta_u_penalty);

        let prediction = match &plant {
            PlantChoice::Cstr(params) => {
                let base: Arc<dyn Plant> = Arc::new(params.plant());
                cstr::prediction_model(base, input_set.clone())
                    .map_err(|e| ConfigError::invalid("mpc.U", e.to_string()))?
            }
            PlantChoice::Linear(model) => PredictionModel::Direct(model.clone()),
        };
        let n_pred = prediction.state_dim();
        let step_count = match kind {
            Kind::ProposedNStep => file.mpc.step_count.unwrap_or(n_pred),
            _ => 1,
        };
        let mpc = MpcConfig {
            q,
            r,
            s,
            horizon: file.mpc.n.unwrap_or(defaults.horizon),
            step_count,
            input_set,
            equilibrium_input_set,
            y_r,
            delta_u_penalty,
        };
        mpc.validate(&prediction).map_err(|e| {
            let msg = e.to_string();
            let key = if msg.contains("horizon") {
                "mpc.N"
            } else if msg.contains("step_count") {
                "mpc.step_count"
            } else if msg.contains("U_s") {
                "mpc.U_s"
            } else if msg.contains("Q ") {
                "mpc.Q"
            } else if msg.contains("R ") {
                "mpc.R"
            } else if msg.contains("S ") {
                "mpc.S"
            } else if msg.contains("delta_u_penalty") {
                "mpc.delta_u_penalty"
            } else {
                "mpc"
            };
            ConfigError::invalid(key, msg)
        })?;

        let x_plant = match &file.sim.x0 {
            Some(v) => VectorSpec::List(v.clone()).to_vector("sim.x0", n)?,
            None if is_cstr => DVector::from_column_slice(&cstr::X0),
            None => DVector::zeros(n),
        };
        let x0 = match &prediction {
            PredictionModel::Incremental(aug) => {
                let u0 = match &file.sim.u0 {
                    Some(u) => {
                        let u = u.to_vector("sim.u0", m)?;
                        if !mpc.input_set.contains(&u, 0.0) {
                            return Err(ConfigError::invalid("sim.u0", "must lie in U"));
                        }
                        u
                    }
                    None => cstr::resting_input(aug.base.as_ref(), &x_plant, &mpc.input_set),
                };
                aug.join(&x_plant, &u0)
            }
            PredictionModel::Direct(_) => x_plant,
        };
        Ok(Experiment {
            plant,
            prediction,
            mpc,
            kind,
            x0,
            steps: file.sim.steps.unwrap_or(DEFAULT_STEPS),
            seed: file.sim.seed.unwrap_or(0),
            output: file.output,
            certify: file.certify,
        })
    }

    /// The same experiment with another controller.
    pub fn with_kind(&self, kind: Kind, n_step_count: usize) -> Self {
        let mut e = self.clone();
        e.kind = kind;
        e.mpc.step_count = match kind {
            Kind::ProposedNStep => n_step_count,
            _ => 1,
        };
        e
    }

    pub fn controller_kind(&self) -> Option<ControllerKind> {
        match self.kind {
            Kind::ProposedNStep | Kind::ProposedOneStep => Some(ControllerKind::Proposed),
            Kind::Ltv => Some(ControllerKind::Ltv),
            // needs the reference equilibrium, resolved by the runner
            Kind::Lti => None,
        }
    }
}

fn matrix_rows(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>, ConfigError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(ConfigError::invalid(key, "expected a nonempty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn build_plant(section: &PlantSection) -> Result<PlantChoice, ConfigError> {
    match section.name.as_str() {
        "cstr" => {
            let mut params = CstrParams::default();
            if let Some(ts) = section.ts {
                if !(ts > 0.0 && ts.is_finite()) {
                    return Err(ConfigError::invalid("plant.Ts", "must be positive"));
                }
                params.ts = ts;
            }
            for (key, v) in [("plant.A", &section.a), ("plant.B", &section.b), ("plant.C", &section.c), ("plant.D", &section.d)] {
                if v.is_some() {
                    return Err(ConfigError::invalid(key, "only used by the linear plant"));
                }
            }
            Ok(PlantChoice::Cstr(params))
        }
        "linear" => {
            let need = |v: &Option<Vec<Vec<f64>>>, key: &str| {
                v.as_ref()
                    .ok_or_else(|| ConfigError::invalid(key, "required for the linear plant"))
                    .and_then(|rows| matrix_rows(rows, key))
            };
            let a = need(&section.a, "plant.A")?;
            let b = need(&section.b, "plant.B")?;
            let c = need(&section.c, "plant.C")?;
            let n = a.nrows();
            let d = match &section.d {
                Some(rows) => matrix_rows(rows, "plant.D")?,
                None => DMatrix::zeros(c.nrows(), b.ncols()),
            };
            let offset = DVector::from_vec(section.offset.clone().unwrap_or_else(|| vec![0.0; n]));
            let out_offset = DVector::from_vec(section.output_offset.clone().unwrap_or_else(|| vec![0.0; c.nrows()]));
            let model = SystemModel::linear(a, b, offset, c, d, out_offset)
                .map_err(|e| ConfigError::invalid("plant", e.to_string()))?;
            Ok(PlantChoice::Linear(model))
        }
        other => Err(ConfigError::invalid(
            "plant.name",
            format!("unknown plant `{other}` (expected cstr or linear)"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_setup() {
        let e = Experiment::from_str("").unwrap();
        assert_eq!(e.mpc, {
            let mut c = cstr::default_config();
            c.step_count = 3;
            c
        });
        assert_eq!(e.x0.len(), 3);
        assert_eq!(e.x0[0], 0.9492);
        assert_eq!(e.steps, DEFAULT_STEPS);
    }

    #[test]
    fn scalars_expand_to_scaled_identity() {
        let spec = MatrixSpec::Scalar(2.5);
        assert_eq!(spec.to_matrix("k", 2, 2).unwrap(), DMatrix::identity(2, 2) * 2.5);
        assert!(MatrixSpec::Diagonal(vec![1.0]).to_matrix("k", 2, 2).is_err());
    }

    #[test]
    fn errors_name_the_key() {
        let err = Experiment::from_str("[mpc]\nN = 1\n").unwrap_err();
        assert!(err.to_string().contains("mpc.N"), "{err}");
        let err = Experiment::from_str("[mpc]\nU_s = [0.05, 1.0]\n").unwrap_err();
        assert!(err.to_string().contains("mpc.U_s"), "{err}");
        let err = Experiment::from_str("[controller]\nkind = \"nmpc\"\n").unwrap_err();
        assert!(err.to_string().contains("controller.kind"), "{err}");
        let err = Experiment::from_str("[mpc]\nhorizon = 3\n").unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
        let err = Experiment::from_str("[mpc]\nS = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("mpc.S"), "{err}");
    }

    #[test]
    fn linear_plant_section() {
        let text = r#"
            [plant]
            name = "linear"
            A = [[1.0, 0.1], [0.0, 1.0]]
            B = [[0.0], [0.1]]
            C = [[1.0, 0.0]]
            [mpc]
            N = 10
            U = [-1.0, 1.0]
            U_s = [-0.9, 0.9]
            y_r = 0.5
            [sim]
            x0 = [0.0, 0.0]
            steps = 5
        "#;
        let e = Experiment::from_str(text).unwrap();
        assert!(matches!(e.plant, PlantChoice::Linear(_)));
        assert_eq!(e.mpc.step_count, 2);
        assert_eq!(e.x0.len(), 2);
    }
}
