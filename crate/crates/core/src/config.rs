//! Run configuration for the `elm-mpc` binary.
//!
//! One TOML file drives every subcommand. Each command reads the sections it
//! needs and ignores the rest, so a single file can describe a whole
//! pipeline. Unknown keys anywhere are rejected.
//!
//! ```toml
//! schema_version = 1
//! seed = 42
//! out_dir = "out"
//!
//! [gen_data]
//! train_length = 16000
//!
//! [train]
//! fixed = { hidden = 20, lambda = 0.001, order = 1 }
//!
//! [simulate]
//! scenario = "step_rmax_constrained"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mpc::{self, MpcConfig};
use crate::plant::{NoiseSpec, SinusoidSpec, StepSpec, STATES};
use crate::qp::{QpOptions, StepSize};
use crate::sysid::{Candidate, Grid};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub gen_data: GenDataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default)]
    pub noise: NoiseSection,
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Msap,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Msap];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Msap => "msap",
        }
    }
}

/// Plant that produces training data or closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Synthetic,
    /// The trained model itself.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub plant: PlantKind,
    /// Model driven open-loop when `plant = "model"`.
    pub model: Option<PathBuf>,
    pub train_length: usize,
    pub test_length: usize,
    pub msap_length: usize,
    pub level_lo: Vec<f64>,
    pub level_hi: Vec<f64>,
    pub hold_min: usize,
    pub hold_max: usize,
    /// Splits whose responses carry measurement noise from `[noise]`.
    pub noisy_splits: Vec<Split>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            plant: PlantKind::Synthetic,
            model: None,
            train_length: 16_000,
            test_length: 7_000,
            msap_length: 2_400,
            level_lo: mpc::HCCI_U_MIN.to_vec(),
            level_hi: mpc::HCCI_U_MAX.to_vec(),
            hold_min: 5,
            hold_max: 30,
            noisy_splits: vec![Split::Train],
        }
    }
}

impl GenDataConfig {
    pub fn length(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_length,
            Split::Test => self.test_length,
            Split::Msap => self.msap_length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedParams {
    pub hidden: usize,
    pub lambda: f64,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub hidden: Vec<usize>,
    pub lambda: Vec<f64>,
    pub order: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = Grid::default();
        GridSection {
            hidden: g.hidden,
            lambda: g.lambda,
            order: g.order,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Directory holding `train_excitation.csv` / `train_response.csv`.
    /// Defaults to the output directory.
    pub data_dir: Option<PathBuf>,
    /// Skips the grid search when present.
    pub fixed: Option<FixedParams>,
    pub grid: GridSection,
    /// Chronological fit fraction of the training split.
    pub split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: None,
            fixed: None,
            grid: GridSection::default(),
            split: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn candidates(&self) -> Result<Vec<Candidate>> {
        if let Some(f) = self.fixed {
            let c = Candidate {
                hidden: f.hidden,
                lambda: f.lambda,
                order: f.order,
            };
            c.validate()?;
            return Ok(vec![c]);
        }
        let grid = Grid {
            hidden: self.grid.hidden.clone(),
            lambda: self.grid.lambda.clone(),
            order: self.grid.order.clone(),
        };
        let c = grid.candidates();
        if c.is_empty() {
            return Err(Error::Config("empty hyperparameter grid and no fixed parameters".into()));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub data_dir: Option<PathBuf>,
    /// Defaults to `<out_dir>/model.txt`.
    pub model: Option<PathBuf>,
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            data_dir: None,
            model: None,
            horizon: 600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Step,
    StepRmaxConstrained,
    Sinusoid,
    Custom,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Step => "step",
            Scenario::StepRmaxConstrained => "step_rmax_constrained",
            Scenario::Sinusoid => "sinusoid",
            Scenario::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub hold: usize,
    pub min_step: Vec<f64>,
}

impl Default for StepSection {
    fn default() -> Self {
        let s = StepSpec::engine(0);
        StepSection {
            lo: s.lo,
            hi: s.hi,
            hold: s.hold,
            min_step: s.min_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidSection {
    pub offset: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub period: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Default for SinusoidSection {
    fn default() -> Self {
        let s = SinusoidSpec::engine();
        SinusoidSection {
            offset: s.offset,
            amplitude: s.amplitude,
            period: s.period,
            phase: s.phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub scenario: Scenario,
    pub cycles: usize,
    pub plant: PlantKind,
    /// Defaults to `<out_dir>/model.txt`.
    pub model: Option<PathBuf>,
    /// CSV with one column per tracked output, used by `custom`.
    pub reference: Option<PathBuf>,
    pub rmax_limit: f64,
    /// Consecutive hold fallbacks tolerated before the run is aborted.
    pub fallback_budget: usize,
    pub step: StepSection,
    pub sinusoid: SinusoidSection,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            scenario: Scenario::Step,
            cycles: 400,
            plant: PlantKind::Model,
            model: None,
            reference: None,
            rmax_limit: mpc::HCCI_RMAX_LIMIT,
            fallback_budget: 25,
            step: StepSection::default(),
            sinusoid: SinusoidSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_iter: usize,
    pub tol: f64,
    /// Fixed dual step; the Lipschitz estimate is used when absent.
    pub step: Option<f64>,
    /// Re-solve on the support of the final multipliers.
    pub polish: bool,
    pub precondition: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = QpOptions::default();
        SolverSection {
            max_iter: o.max_iter,
            tol: o.tol,
            step: None,
            polish: o.polish,
            precondition: true,
        }
    }
}

/// Controller settings. Weight matrices are given by their diagonals over
/// one horizon step and repeated across the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub ny: usize,
    pub nu: usize,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub du_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub outputs: Vec<usize>,
    pub solver: SolverSection,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            ny: 3,
            nu: 3,
            q1: vec![500.0, 1.0],
            q2: vec![20.0, 1.0, 1.0],
            u_min: mpc::HCCI_U_MIN.to_vec(),
            u_max: mpc::HCCI_U_MAX.to_vec(),
            du_max: mpc::HCCI_DU_MAX.to_vec(),
            y_min: mpc::HCCI_Y_MIN.to_vec(),
            y_max: mpc::HCCI_Y_MAX.to_vec(),
            outputs: vec![0, 1],
            solver: SolverSection::default(),
        }
    }
}

impl MpcSection {
    pub fn build(&self, states: usize) -> Result<MpcConfig> {
        let p = self.outputs.len();
        let m = self.u_min.len();
        if self.q1.len() != p || self.q2.len() != m {
            return Err(Error::Config(format!(
                "q1 needs {p} entries and q2 needs {m}, got {} and {}",
                self.q1.len(),
                self.q2.len()
            )));
        }
        let diag = |w: &[f64], reps: usize| {
            DMatrix::from_diagonal(&DVector::from_iterator(
                w.len() * reps,
                (0..reps).flat_map(|_| w.iter().copied()),
            ))
        };
        let du_max = DVector::from_row_slice(&self.du_max);
        let solver = QpOptions {
            step: self.solver.step.map_or(StepSize::Auto, StepSize::Fixed),
            max_iter: self.solver.max_iter,
            tol: self.solver.tol,
            warm_start: None,
            polish: self.solver.polish,
        };
        solver.validate()?;
        let cfg = MpcConfig {
            ny: self.ny,
            nu: self.nu,
            q1: diag(&self.q1, self.ny),
            q2: diag(&self.q2, self.nu),
            u_min: DVector::from_row_slice(&self.u_min),
            u_max: DVector::from_row_slice(&self.u_max),
            du_min: -du_max.clone(),
            du_max,
            y_min: DVector::from_row_slice(&self.y_min),
            y_max: DVector::from_row_slice(&self.y_max),
            state_bounds: None,
            outputs: self.outputs.clone(),
            solver,
            precondition: self.solver.precondition,
        };
        cfg.validate(states)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub enabled: bool,
    /// One variance per state; zero leaves a channel clean.
    pub variances: Vec<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            enabled: true,
            variances: NoiseSpec::engine(0).variances,
        }
    }
}

impl NoiseSection {
    pub fn spec(&self, seed: u64) -> Result<NoiseSpec> {
        let spec = NoiseSpec {
            enabled: self.enabled,
            variances: self.variances.clone(),
            seed,
        };
        spec.validate(STATES)?;
        Ok(spec)
    }
}

impl RunConfig {
    /// Defaults for every section.
    pub fn new() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            out_dir: default_out_dir(),
            gen_data: GenDataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            simulate: SimulateConfig::default(),
            mpc: MpcSection::default(),
            noise: NoiseSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file and makes its relative paths absolute with
    /// respect to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.gen_data.model,
            &mut self.train.data_dir,
            &mut self.eval.data_dir,
            &mut self.eval.model,
            &mut self.simulate.model,
            &mut self.simulate.reference,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization with `out_dir` blanked, so
    /// moving the output does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn model_path(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join("model.txt"))
    }

    pub fn data_dir(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.clone())
    }

    pub fn step_spec(&self, seed: u64) -> StepSpec {
        let s = &self.simulate.step;
        StepSpec {
            lo: s.lo.clone(),
            hi: s.hi.clone(),
            hold: s.hold,
            min_step: s.min_step.clone(),
            seed,
        }
    }

    pub fn sinusoid_spec(&self) -> SinusoidSpec {
        let s = &self.simulate.sinusoid;
        SinusoidSpec {
            offset: s.offset.clone(),
            amplitude: s.amplitude.clone(),
            period: s.period.clone(),
            phase: s.phase.clone(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new()
    }
}

/// Independent stream seed for `label`, derived from the master seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
