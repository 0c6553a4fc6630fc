//! Surrogate engine plants, measurement noise, references and the
//! closed-loop driver.
//!
//! State ordering is `z = [IMEP, CA50, Pmax, Rmax, Tb, EAFR]` and input
//! ordering `u = [FM, EVC, SOI]`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::elm::ElmModel;
use crate::error::{ensure_finite, Error, Result};
use crate::mpc::{stack_input, Controller, Fallback, MpcConfig, StepDiagnostics, HCCI_U_MAX, HCCI_U_MIN};
use crate::qp::QpStatus;

pub const STATES: usize = 6;
pub const INPUTS: usize = 3;
pub const STATE_NAMES: [&str; STATES] = ["imep", "ca50", "pmax", "rmax", "tb", "eafr"];
pub const INPUT_NAMES: [&str; INPUTS] = ["fm", "evc", "soi"];

/// Measurement noise variances on IMEP and CA50.
pub const IMEP_NOISE_VAR: f64 = 0.0012;
pub const CA50_NOISE_VAR: f64 = 1.76;

/// Smooth saturating engine surrogate.
///
/// With `s = (z - center) / half` and `v` the inputs scaled to `[-1, 1]`:
///
/// ```text
/// s1' = a1 s1 + (1 - a1) tanh(g1 . v + k12 s2 + c1)        IMEP
/// s2' = a2 s2 + (1 - a2) tanh(g2 . v + k21 s1 + c2)        CA50
/// s3' = tanh(0.8 s1' - 0.4 s2' + 0.1)                      Pmax
/// s4' = tanh(1.2 s1' - 0.5 s2' + 0.3 v3 + 0.1)             Rmax
/// s5' = tanh(0.8 s1' - 0.2 s2' + 0.2 v1)                   Tb
/// s6' = tanh(0.3 s1' - 0.9 v1 + 0.2 v2)                    EAFR
/// ```
///
/// IMEP and CA50 carry a short first-order memory; the other channels are
/// algebraic in the new combustion state. R_max depends on SOI directly, so
/// it can be lowered without giving up IMEP/CA50 tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlant {
    pub center: [f64; STATES],
    pub half: [f64; STATES],
    pub u_lo: [f64; INPUTS],
    pub u_hi: [f64; INPUTS],
    pub memory: [f64; 2],
    pub g_imep: [f64; INPUTS],
    pub g_ca50: [f64; INPUTS],
    pub cross: [f64; 2],
    pub offset: [f64; 2],
}

impl Default for SyntheticPlant {
    fn default() -> Self {
        SyntheticPlant {
            center: [2.85, -8.0, 45.0, 3.0, 150.0, 3.0],
            half: [0.75, 7.0, 15.0, 1.5, 50.0, 0.8],
            u_lo: HCCI_U_MIN,
            u_hi: HCCI_U_MAX,
            memory: [0.1, 0.1],
            g_imep: [1.1, 0.25, -0.3],
            g_ca50: [-0.35, 0.9, -0.6],
            cross: [-0.05, 0.05],
            offset: [0.1, 0.05],
        }
    }
}

impl SyntheticPlant {
    fn scaled_input(&self, u: &DVector<f64>) -> [f64; INPUTS] {
        std::array::from_fn(|i| 2.0 * (u[i] - self.u_lo[i]) / (self.u_hi[i] - self.u_lo[i]) - 1.0)
    }

    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s: [f64; STATES] = std::array::from_fn(|i| (z[i] - self.center[i]) / self.half[i]);
        let v = self.scaled_input(u);
        let dot = |g: &[f64; INPUTS]| g.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
        let [a1, a2] = self.memory;
        let s1 = a1 * s[0] + (1.0 - a1) * (dot(&self.g_imep) + self.cross[0] * s[1] + self.offset[0]).tanh();
        let s2 = a2 * s[1] + (1.0 - a2) * (dot(&self.g_ca50) + self.cross[1] * s[0] + self.offset[1]).tanh();
        let next = [
            s1,
            s2,
            (0.8 * s1 - 0.4 * s2 + 0.1).tanh(),
            (1.2 * s1 - 0.5 * s2 + 0.3 * v[2] + 0.1).tanh(),
            (0.8 * s1 - 0.2 * s2 + 0.2 * v[0]).tanh(),
            (0.3 * s1 - 0.9 * v[0] + 0.2 * v[1]).tanh(),
        ];
        DVector::from_fn(STATES, |i, _| self.center[i] + self.half[i] * next[i])
    }

    pub fn operating_box(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_fn(STATES, |i, _| self.center[i] - self.half[i]),
            DVector::from_fn(STATES, |i, _| self.center[i] + self.half[i]),
        )
    }
}

#[derive(Debug, Clone)]
pub enum Plant {
    Synthetic(SyntheticPlant),
    /// A trained order-1 model standing in for the engine.
    Elm(ElmModel),
}

impl Plant {
    pub fn states(&self) -> usize {
        match self {
            Plant::Synthetic(_) => STATES,
            Plant::Elm(m) => m.output_dim(),
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            Plant::Synthetic(_) => INPUTS,
            Plant::Elm(m) => m.input_dim() - m.output_dim(),
        }
    }

    pub fn advance(&self, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.states() || u.len() != self.inputs() {
            return Err(Error::Dimension(format!(
                "plant takes {} states and {} inputs, got {} and {}",
                self.states(),
                self.inputs(),
                z.len(),
                u.len()
            )));
        }
        let next = match self {
            Plant::Synthetic(p) => p.step(z, u),
            Plant::Elm(m) => m.predict(&stack_input(u, z))?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("plant state diverged from {z:?} under {u:?}")));
        }
        Ok(next)
    }

    /// Iterates the plant under a constant input until it stops moving.
    pub fn steady_state(&self, z0: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut z = z0.clone();
        for _ in 0..10_000 {
            let next = self.advance(&z, u)?;
            let delta = (&next - &z).amax();
            z = next;
            if delta <= 1e-15 * (1.0 + z.amax()) {
                break;
            }
        }
        Ok(z)
    }

    /// Open-loop response: row `k` of the result is `z(k)`, with
    /// `z(0) = z0` and `z(k + 1) = plant(z(k), u(k))`.
    pub fn simulate(&self, z0: &DVector<f64>, u_seq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.states();
        let t = u_seq.nrows();
        let mut out = DMatrix::zeros(t, n);
        let mut z = z0.clone();
        for k in 0..t {
            out.set_row(k, &z.transpose());
            if k + 1 < t {
                z = self.advance(&z, &u_seq.row(k).transpose())?;
            }
        }
        Ok(out)
    }
}

/// Gaussian measurement noise, one variance per state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub variances: Vec<f64>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            enabled: false,
            variances: vec![0.0; STATES],
            seed: 0,
        }
    }

    /// Noise on IMEP and CA50 only.
    pub fn engine(seed: u64) -> Self {
        let mut variances = vec![0.0; STATES];
        variances[0] = IMEP_NOISE_VAR;
        variances[1] = CA50_NOISE_VAR;
        NoiseSpec {
            enabled: true,
            variances,
            seed,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.variances.len() != n {
            return Err(Error::Config(format!(
                "noise needs {n} variances, got {}",
                self.variances.len()
            )));
        }
        if self.variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("noise variances must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Adds one noise draw to `z`. Channels with zero variance are exact and
    /// consume no randomness.
    pub fn measure(&self, z: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
        let mut out = z.clone();
        if !self.enabled {
            return out;
        }
        for (i, &var) in self.variances.iter().enumerate() {
            if var > 0.0 {
                let normal = Normal::new(0.0, var.sqrt()).expect("validated variance");
                out[i] += normal.sample(rng);
            }
        }
        out
    }
}

/// Advances the plant and measures the new state.
pub fn plant_step(
    plant: &Plant,
    z: &DVector<f64>,
    u: &DVector<f64>,
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let next = plant.advance(z, u)?;
    let meas = noise.measure(&next, rng);
    Ok((next, meas))
}

/// Random piecewise-constant levels per channel. All channels switch
/// together every `hold` cycles; consecutive levels differ by at least
/// `min_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub hold: usize,
    pub min_step: Vec<f64>,
    pub seed: u64,
}

impl StepSpec {
    /// IMEP in [2.6, 3.2] bar and CA50 in [-10, -4] deg.
    pub fn engine(seed: u64) -> Self {
        StepSpec {
            lo: vec![2.6, -10.0],
            hi: vec![3.2, -4.0],
            hold: 50,
            min_step: vec![0.3, 2.0],
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidSpec {
    pub offset: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// Period in cycles.
    pub period: Vec<f64>,
    /// Phase in radians.
    pub phase: Vec<f64>,
}

impl SinusoidSpec {
    /// Slow swings across the same ranges as the step scenario.
    pub fn engine() -> Self {
        SinusoidSpec {
            offset: vec![2.9, -7.0],
            amplitude: vec![0.3, 3.0],
            period: vec![200.0, 300.0],
            phase: vec![0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceKind {
    Steps(StepSpec),
    Sinusoid(SinusoidSpec),
}

/// Reference sequence, `length x p`, with every value inside
/// `[out_lo, out_hi]`.
pub fn make_reference(
    kind: &ReferenceKind,
    length: usize,
    out_lo: &[f64],
    out_hi: &[f64],
) -> Result<DMatrix<f64>> {
    let p = out_lo.len();
    if out_hi.len() != p {
        return Err(Error::Dimension("output bounds differ in length".into()));
    }
    let inside = |c: usize, v: f64| v >= out_lo[c] && v <= out_hi[c];
    match kind {
        ReferenceKind::Steps(s) => {
            if s.lo.len() != p || s.hi.len() != p || s.min_step.len() != p {
                return Err(Error::Config(format!("step reference needs {p} channels")));
            }
            if s.hold == 0 {
                return Err(Error::Config("step hold must be >= 1".into()));
            }
            for c in 0..p {
                if !(s.lo[c] <= s.hi[c]) || !inside(c, s.lo[c]) || !inside(c, s.hi[c]) {
                    return Err(Error::Bounds(format!(
                        "step levels [{}, {}] leave output bounds [{}, {}]",
                        s.lo[c], s.hi[c], out_lo[c], out_hi[c]
                    )));
                }
                if !(s.min_step[c] >= 0.0) || 2.0 * s.min_step[c] > s.hi[c] - s.lo[c] {
                    return Err(Error::Config(format!(
                        "minimum step {} must lie in [0, (hi - lo) / 2]",
                        s.min_step[c]
                    )));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let mut out = DMatrix::zeros(length, p);
            let mut level: Vec<f64> = (0..p).map(|c| rng.random_range(s.lo[c]..=s.hi[c])).collect();
            for k in 0..length {
                if k > 0 && k % s.hold == 0 {
                    for c in 0..p {
                        level[c] = next_level(&mut rng, level[c], s.lo[c], s.hi[c], s.min_step[c]);
                    }
                }
                for c in 0..p {
                    out[(k, c)] = level[c];
                }
            }
            Ok(out)
        }
        ReferenceKind::Sinusoid(s) => {
            if [&s.offset, &s.amplitude, &s.period, &s.phase].iter().any(|v| v.len() != p) {
                return Err(Error::Config(format!("sinusoid reference needs {p} channels")));
            }
            for c in 0..p {
                let a = s.amplitude[c].abs();
                if !(s.period[c] > 0.0) || !inside(c, s.offset[c] - a) || !inside(c, s.offset[c] + a) {
                    return Err(Error::Bounds(format!(
                        "sinusoid {} +/- {} leaves output bounds [{}, {}]",
                        s.offset[c], a, out_lo[c], out_hi[c]
                    )));
                }
            }
            Ok(DMatrix::from_fn(length, p, |k, c| {
                let w = 2.0 * std::f64::consts::PI / s.period[c];
                s.offset[c] + s.amplitude[c] * (w * k as f64 + s.phase[c]).sin()
            }))
        }
    }
}

fn next_level(rng: &mut ChaCha8Rng, prev: f64, lo: f64, hi: f64, min_step: f64) -> f64 {
    if hi == lo {
        return lo;
    }
    let below = (prev - min_step - lo).max(0.0);
    let above = (hi - prev - min_step).max(0.0);
    if below + above <= 0.0 {
        return if prev - lo > hi - prev { lo } else { hi };
    }
    let t = rng.random_range(0.0..below + above);
    if t < below {
        lo + t
    } else {
        prev + min_step + (t - below)
    }
}

/// Preview `R(k+1|k) .. R(k+N_y|k)`, holding the last value past the end.
pub fn reference_preview(reference: &DMatrix<f64>, k: usize, ny: usize) -> DVector<f64> {
    let p = reference.ncols();
    let last = reference.nrows() - 1;
    DVector::from_fn(ny * p, |r, _| reference[((k + 1 + r / p).min(last), r % p)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub cycle: usize,
    pub reference: DVector<f64>,
    pub state: DVector<f64>,
    pub measured: DVector<f64>,
    pub input: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    PlantDiverged,
    FallbackBudgetExceeded,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::PlantDiverged => "plant_diverged",
            RunStatus::FallbackBudgetExceeded => "fallback_budget_exceeded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub rows: Vec<TraceRow>,
    pub status: RunStatus,
    pub outputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopOptions {
    pub cycles: usize,
    pub noise: NoiseSpec,
    pub initial_state: Option<DVector<f64>>,
    pub initial_input: Option<DVector<f64>>,
    /// Consecutive hold fallbacks tolerated before the run is aborted.
    pub fallback_budget: usize,
}

impl ClosedLoopOptions {
    pub fn new(cycles: usize, noise: NoiseSpec) -> Self {
        ClosedLoopOptions {
            cycles,
            noise,
            initial_state: None,
            initial_input: None,
            fallback_budget: 25,
        }
    }
}

/// Mid-range input of a controller config.
pub fn mid_input(cfg: &MpcConfig) -> DVector<f64> {
    (&cfg.u_min + &cfg.u_max) * 0.5
}

/// Closed loop: at cycle `k` the controller sees the measurement of `z(k)`,
/// applies `u(k)`, and the plant moves to `z(k+1)`. Row `k` of the trace
/// holds `r(k)`, `z(k)`, its measurement and `u(k)`.
pub fn run_closed_loop(
    plant: &Plant,
    model: &ElmModel,
    cfg: &MpcConfig,
    reference: &DMatrix<f64>,
    opts: &ClosedLoopOptions,
) -> Result<SimulationTrace> {
    let n = plant.states();
    let m = cfg.inputs();
    if plant.inputs() != m || model.output_dim() != n || model.input_dim() != n + m {
        return Err(Error::Dimension("controller model and plant are incompatible".into()));
    }
    if reference.ncols() != cfg.outputs() || reference.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "reference needs {} columns and at least one row",
            cfg.outputs()
        )));
    }
    opts.noise.validate(n)?;
    let mut controller = Controller::new(cfg.clone(), n)?;
    let mut rng = opts.noise.rng();

    let mut u_prev = opts.initial_input.clone().unwrap_or_else(|| mid_input(cfg));
    if u_prev.len() != m || (0..m).any(|i| u_prev[i] < cfg.u_min[i] || u_prev[i] > cfg.u_max[i]) {
        return Err(Error::Config("initial input must lie within the input bounds".into()));
    }
    let mut z = match &opts.initial_state {
        Some(z) => z.clone(),
        None => {
            let seed_state = match plant {
                Plant::Synthetic(p) => DVector::from_row_slice(&p.center),
                Plant::Elm(m) => (m.output_bounds().lo() + m.output_bounds().hi()) * 0.5,
            };
            plant.steady_state(&seed_state, &u_prev)?
        }
    };
    ensure_finite(z.iter(), "initial state")?;
    let mut z_meas = opts.noise.measure(&z, &mut rng);

    let mut rows = Vec::with_capacity(opts.cycles);
    let mut status = RunStatus::Completed;
    let mut holds = 0;
    for k in 0..opts.cycles {
        let preview = reference_preview(reference, k, cfg.ny);
        let (u, diagnostics) = controller.step(model, &z_meas, &u_prev, &preview)?;
        holds = if diagnostics.fallback == Fallback::Hold { holds + 1 } else { 0 };
        let r_now = reference.row(k.min(reference.nrows() - 1)).transpose();
        rows.push(TraceRow {
            cycle: k,
            reference: r_now,
            state: z.clone(),
            measured: z_meas.clone(),
            input: u.clone(),
            diagnostics,
        });
        if holds > opts.fallback_budget {
            status = RunStatus::FallbackBudgetExceeded;
            break;
        }
        match plant_step(plant, &z, &u, &opts.noise, &mut rng) {
            Ok((next, meas)) => {
                z = next;
                z_meas = meas;
            }
            Err(Error::Numerical(_)) => {
                status = RunStatus::PlantDiverged;
                break;
            }
            Err(e) => return Err(e),
        }
        u_prev = u;
    }
    Ok(SimulationTrace {
        rows,
        status,
        outputs: cfg.outputs.clone(),
    })
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn header(&self) -> Vec<String> {
        let Some(first) = self.rows.first() else {
            return vec![];
        };
        let n = first.state.len();
        let m = first.input.len();
        let mut h = vec!["cycle".to_string()];
        for &o in &self.outputs {
            h.push(format!("ref_{}", state_name(o)));
        }
        h.extend((0..n).map(|i| state_name(i).to_string()));
        h.extend((0..n).map(|i| format!("{}_meas", state_name(i))));
        h.extend((0..m).map(|i| input_name(i).to_string()));
        for c in ["status", "iterations", "fallback", "clamped", "cond_w1", "kkt_residual", "active"] {
            h.push(c.to_string());
        }
        h
    }

    /// CSV with one row per cycle, columns as in [`SimulationTrace::header`].
    pub fn write_csv<W: Write>(&self, out: W, comments: &[String]) -> Result<()> {
        let mut out = out;
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for row in &self.rows {
            let d = &row.diagnostics;
            let mut rec: Vec<String> = vec![row.cycle.to_string()];
            rec.extend(row.reference.iter().map(|v| format!("{v:?}")));
            rec.extend(row.state.iter().map(|v| format!("{v:?}")));
            rec.extend(row.measured.iter().map(|v| format!("{v:?}")));
            rec.extend(row.input.iter().map(|v| format!("{v:?}")));
            rec.push(d.status.as_str().to_string());
            rec.push(d.iterations.to_string());
            rec.push(d.fallback.as_str().to_string());
            rec.push((d.clamped as u8).to_string());
            rec.push(format!("{:?}", d.cond_w1));
            rec.push(format!("{:?}", d.kkt_residual));
            rec.push(d.active_mask());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), comments)
    }

    /// Tracked output `c` of the true state, one entry per cycle.
    pub fn output(&self, c: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.state[self.outputs[c]]).collect()
    }

    pub fn reference(&self, c: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.reference[c]).collect()
    }

    pub fn state(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.state[i]).collect()
    }
}

/// Response to one reference step on one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResponse {
    pub channel: usize,
    pub start: usize,
    pub end: usize,
    pub magnitude: f64,
    /// Cycles until the output enters the band and stays there until `end`.
    pub settling: Option<usize>,
}

/// Splits the reference on channel `c` into constant segments and measures
/// settling into `+/- band * |step|` around each new level. The band must
/// hold until `preview` cycles before the next step, when the controller
/// starts acting on it.
pub fn step_responses(trace: &SimulationTrace, c: usize, band: f64, preview: usize) -> Vec<StepResponse> {
    let r = trace.reference(c);
    let y = trace.output(c);
    let mut changes: Vec<usize> = (1..r.len()).filter(|&k| r[k] != r[k - 1]).collect();
    changes.push(r.len());
    let mut out = Vec::new();
    let total = r.len();
    for w in changes.windows(2) {
        let (start, end) = (w[0], w[1]);
        if end - start < 2 {
            continue;
        }
        let magnitude = (r[start] - r[start - 1]).abs();
        let tol = band * magnitude;
        let horizon = if end == total { end } else { end.saturating_sub(preview).max(start + 1) };
        let mut settled_from = None;
        for k in (start..horizon).rev() {
            if (y[k] - r[start]).abs() > tol {
                break;
            }
            settled_from = Some(k);
        }
        out.push(StepResponse {
            channel: c,
            start,
            end,
            magnitude,
            settling: settled_from.map(|k| k - start),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub status: RunStatus,
    pub cycles: usize,
    pub tracking_rmse: Vec<f64>,
    pub tracking_mae: Vec<f64>,
    pub steps: Vec<StepResponse>,
    pub input_violations: usize,
    pub increment_violations: usize,
    pub output_violations: usize,
    pub state_violations: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub converged: usize,
    pub iteration_cap: usize,
    pub infeasible: usize,
    pub fallback_input_rows: usize,
    pub fallback_hold: usize,
    pub clamped: usize,
    pub extrapolations: u64,
}

/// Per-run metrics; violations use a `1e-9` tolerance.
pub fn summarize(trace: &SimulationTrace, cfg: &MpcConfig, initial_input: &DVector<f64>) -> RunSummary {
    const TOL: f64 = 1e-9;
    let p = trace.outputs.len();
    let len = trace.len().max(1) as f64;
    let mut rmse = vec![0.0; p];
    let mut mae = vec![0.0; p];
    let mut s = RunSummary {
        status: trace.status,
        cycles: trace.len(),
        tracking_rmse: vec![],
        tracking_mae: vec![],
        steps: vec![],
        input_violations: 0,
        increment_violations: 0,
        output_violations: 0,
        state_violations: 0,
        mean_iterations: 0.0,
        max_iterations: 0,
        converged: 0,
        iteration_cap: 0,
        infeasible: 0,
        fallback_input_rows: 0,
        fallback_hold: 0,
        clamped: 0,
        extrapolations: 0,
    };
    let mut u_prev = initial_input.clone();
    let mut iters = 0usize;
    for row in &trace.rows {
        for c in 0..p {
            let e = row.state[trace.outputs[c]] - row.reference[c];
            rmse[c] += e * e;
            mae[c] += e.abs();
            let y = row.state[trace.outputs[c]];
            if y > cfg.y_max[c] + TOL || y < cfg.y_min[c] - TOL {
                s.output_violations += 1;
            }
        }
        let u = &row.input;
        if (0..u.len()).any(|i| u[i] > cfg.u_max[i] + TOL || u[i] < cfg.u_min[i] - TOL) {
            s.input_violations += 1;
        }
        if (0..u.len()).any(|i| {
            let du = u[i] - u_prev[i];
            du > cfg.du_max[i] + TOL || du < cfg.du_min[i] - TOL
        }) {
            s.increment_violations += 1;
        }
        if let Some((lo, hi)) = &cfg.state_bounds {
            if (0..row.state.len()).any(|i| row.state[i] > hi[i] + TOL || row.state[i] < lo[i] - TOL) {
                s.state_violations += 1;
            }
        }
        u_prev = u.clone();
        let d = &row.diagnostics;
        iters += d.iterations;
        s.max_iterations = s.max_iterations.max(d.iterations);
        match d.status {
            QpStatus::Converged => s.converged += 1,
            QpStatus::IterationCap => s.iteration_cap += 1,
            QpStatus::InfeasibleDetected => s.infeasible += 1,
        }
        match d.fallback {
            Fallback::None => {}
            Fallback::InputRowsOnly => s.fallback_input_rows += 1,
            Fallback::Hold => s.fallback_hold += 1,
        }
        s.clamped += d.clamped as usize;
    }
    s.tracking_rmse = rmse.iter().map(|v| (v / len).sqrt()).collect();
    s.tracking_mae = mae.iter().map(|v| v / len).collect();
    s.mean_iterations = iters as f64 / len;
    s.steps = (0..p).flat_map(|c| step_responses(trace, c, 0.05, cfg.ny)).collect();
    s
}

impl RunSummary {
    /// `key = value` lines.
    pub fn render(&self, outputs: &[usize]) -> String {
        let mut out = String::new();
        let mut kv = |k: String, v: String| {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("status".into(), format!("\"{}\"", self.status.as_str()));
        kv("cycles".into(), self.cycles.to_string());
        for (c, &o) in outputs.iter().enumerate() {
            kv(format!("rmse_{}", state_name(o)), format!("{:?}", self.tracking_rmse[c]));
            kv(format!("mae_{}", state_name(o)), format!("{:?}", self.tracking_mae[c]));
        }
        kv("input_violations".into(), self.input_violations.to_string());
        kv("increment_violations".into(), self.increment_violations.to_string());
        kv("output_violations".into(), self.output_violations.to_string());
        kv("state_violations".into(), self.state_violations.to_string());
        kv("mean_iterations".into(), format!("{:?}", self.mean_iterations));
        kv("max_iterations".into(), self.max_iterations.to_string());
        kv("converged".into(), self.converged.to_string());
        kv("iteration_cap".into(), self.iteration_cap.to_string());
        kv("infeasible_detected".into(), self.infeasible.to_string());
        kv("fallback_input_rows".into(), self.fallback_input_rows.to_string());
        kv("fallback_hold".into(), self.fallback_hold.to_string());
        kv("clamped".into(), self.clamped.to_string());
        for s in &self.steps {
            let settle = s.settling.map_or("-1".to_string(), |v| v.to_string());
            kv(
                format!("settling_{}_at_{}", state_name(outputs[s.channel]), s.start),
                settle,
            );
        }
        out
    }
}

/// Marks cycles at least `settle` cycles after the start of the run and
/// after the most recent reference change on any channel.
pub fn post_transient(trace: &SimulationTrace, settle: usize) -> Vec<bool> {
    let mut last = 0;
    trace
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            if k > 0 && row.reference != trace.rows[k - 1].reference {
                last = k;
            }
            k - last >= settle
        })
        .collect()
}

/// Count of post-transient cycles and how many of them have state `i`
/// above `limit`.
pub fn exceedances(trace: &SimulationTrace, i: usize, limit: f64, settle: usize) -> (usize, usize) {
    let mask = post_transient(trace, settle);
    let window = mask.iter().filter(|&&m| m).count();
    let over = trace
        .rows
        .iter()
        .zip(&mask)
        .filter(|(r, &m)| m && r.state[i] > limit)
        .count();
    (window, over)
}

pub fn state_name(i: usize) -> &'static str {
    STATE_NAMES.get(i).copied().unwrap_or("z")
}

pub fn input_name(i: usize) -> &'static str {
    INPUT_NAMES.get(i).copied().unwrap_or("u")
}
