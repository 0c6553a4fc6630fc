//! Successive-linearization MPC.
//!
//! Every cycle the trained model `z(k+1) = f(u(k), z(k))` is linearized at
//! the measured state and the previously applied input,
//!
//! ```text
//! z(k+1) = A z(k) + B u(k) + d1
//! y(k)   = C z(k) + d2
//! ```
//!
//! the horizon predictions are condensed into
//! `Y = Z z + U dU + V u(k-1) + D1 d1 + D2 d2`, and the tracking cost
//! `(R - Y)^T Q1 (R - Y) + dU^T Q2 dU` becomes the QP
//! `min 1/2 dU^T W1 dU + W2^T dU  s.t.  E dU <= F`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::elm::{split_ab, ElmModel};
use crate::error::{ensure_finite, Error, Result};
use crate::qp::{solve_fast, KktResiduals, QpOptions, QpProblem, QpStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
    pub z0: DVector<f64>,
    pub u0: DVector<f64>,
}

impl LinearizedSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d1: DVector<f64>,
        d2: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let p = c.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || d1.len() != n || d2.len() != p {
            return Err(Error::Dimension(format!(
                "inconsistent linear system: A {:?}, B {:?}, C {:?}, d1 {}, d2 {}",
                a.shape(),
                b.shape(),
                c.shape(),
                d1.len(),
                d2.len()
            )));
        }
        Ok(LinearizedSystem {
            a,
            b,
            c,
            d1,
            d2,
            z0: DVector::zeros(n),
            u0: DVector::zeros(m),
        })
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * u + &self.d1
    }

    pub fn output(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.c * z + &self.d2
    }
}

/// Rows of the identity picking the listed states.
pub fn selector(indices: &[usize], n: usize) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::zeros(indices.len(), n);
    for (r, &i) in indices.iter().enumerate() {
        if i >= n {
            return Err(Error::Dimension(format!("output index {i} out of range for {n} states")));
        }
        c[(r, i)] = 1.0;
    }
    Ok(c)
}

/// First-order expansion of `model` at `(z0, u0)`; `d1` absorbs the
/// constant so that the linear model is exact at the expansion point.
pub fn linearize(
    model: &ElmModel,
    z0: &DVector<f64>,
    u0: &DVector<f64>,
    outputs: &[usize],
) -> Result<LinearizedSystem> {
    let n = z0.len();
    let m = u0.len();
    if model.input_dim() != n + m || model.output_dim() != n {
        return Err(Error::Dimension(format!(
            "model maps {} -> {}, controller expects {} -> {n}",
            model.input_dim(),
            model.output_dim(),
            n + m
        )));
    }
    ensure_finite(z0.iter().chain(u0.iter()), "linearization point")?;
    let x0 = stack_input(u0, z0);
    let jac = model.jacobian(&x0)?;
    let (a, b) = split_ab(&jac, n, m)?;
    let f0 = model.predict(&x0)?;
    let d1 = &f0 - &a * z0 - &b * u0;
    let c = selector(outputs, n)?;
    let p = c.nrows();
    Ok(LinearizedSystem {
        a,
        b,
        c,
        d1,
        d2: DVector::zeros(p),
        z0: z0.clone(),
        u0: u0.clone(),
    })
}

/// `[u; z]`, the model's input ordering.
pub fn stack_input(u: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
    let mut x = DVector::zeros(u.len() + z.len());
    x.rows_mut(0, u.len()).copy_from(u);
    x.rows_mut(u.len(), z.len()).copy_from(z);
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    /// Lower block-triangular identity: `H dU` stacks `u(k+j) - u(k-1)`.
    pub h: DMatrix<f64>,
    pub ny: usize,
    pub nu: usize,
}

impl PredictionMatrices {
    /// Stacked outputs for the increment sequence `du`.
    pub fn predict(
        &self,
        z: &DVector<f64>,
        du: &DVector<f64>,
        u_prev: &DVector<f64>,
        d1: &DVector<f64>,
        d2: &DVector<f64>,
    ) -> DVector<f64> {
        self.free_response(z, u_prev, d1, d2) + &self.u * du
    }

    /// Stacked outputs for `dU = 0`.
    pub fn free_response(
        &self,
        z: &DVector<f64>,
        u_prev: &DVector<f64>,
        d1: &DVector<f64>,
        d2: &DVector<f64>,
    ) -> DVector<f64> {
        &self.z * z + &self.v * u_prev + &self.d1 * d1 + &self.d2 * d2
    }
}

fn check_horizons(ny: usize, nu: usize) -> Result<()> {
    if ny == 0 || nu == 0 || nu > ny {
        return Err(Error::Config(format!(
            "horizons must satisfy 1 <= N_u <= N_y, got N_y = {ny}, N_u = {nu}"
        )));
    }
    Ok(())
}

/// Condensed prediction matrices for output map `c`.
pub fn build_prediction_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    ny: usize,
    nu: usize,
) -> Result<PredictionMatrices> {
    check_horizons(ny, nu)?;
    let n = a.nrows();
    let m = b.ncols();
    let p = c.nrows();

    // s[i] = sum_{t<i} A^t B, t_acc[i] = sum_{t<i} A^t, a_pow[i] = A^i
    let mut a_pow = vec![DMatrix::identity(n, n)];
    let mut s = vec![DMatrix::zeros(n, m)];
    let mut t_acc = vec![DMatrix::zeros(n, n)];
    for i in 1..=ny {
        let prev = &a_pow[i - 1];
        s.push(&s[i - 1] + prev * b);
        t_acc.push(&t_acc[i - 1] + prev);
        a_pow.push(a * prev);
    }

    let mut zm = DMatrix::zeros(ny * p, n);
    let mut um = DMatrix::zeros(ny * p, nu * m);
    let mut vm = DMatrix::zeros(ny * p, m);
    let mut d1m = DMatrix::zeros(ny * p, n);
    let mut d2m = DMatrix::zeros(ny * p, p);
    for i in 1..=ny {
        let r = (i - 1) * p;
        zm.view_mut((r, 0), (p, n)).copy_from(&(c * &a_pow[i]));
        vm.view_mut((r, 0), (p, m)).copy_from(&(c * &s[i]));
        d1m.view_mut((r, 0), (p, n)).copy_from(&(c * &t_acc[i]));
        d2m.view_mut((r, 0), (p, p)).fill_with_identity();
        for j in 1..=i.min(nu) {
            um.view_mut((r, (j - 1) * m), (p, m)).copy_from(&(c * &s[i - j + 1]));
        }
    }

    let mut h = DMatrix::zeros(nu * m, nu * m);
    for i in 0..nu {
        for j in 0..=i {
            h.view_mut((i * m, j * m), (m, m)).fill_with_identity();
        }
    }

    Ok(PredictionMatrices {
        z: zm,
        u: um,
        v: vm,
        d1: d1m,
        d2: d2m,
        h,
        ny,
        nu,
    })
}

pub fn build_prediction(lin: &LinearizedSystem, ny: usize, nu: usize) -> Result<PredictionMatrices> {
    build_prediction_with(&lin.a, &lin.b, &lin.c, ny, nu)
}

/// Step-by-step horizon recursion of the linear model, the reference the
/// condensed form is tested against.
pub fn simulate_horizon(
    lin: &LinearizedSystem,
    z: &DVector<f64>,
    u_prev: &DVector<f64>,
    du: &DVector<f64>,
    ny: usize,
    nu: usize,
) -> DVector<f64> {
    let m = lin.inputs();
    let p = lin.outputs();
    let mut out = DVector::zeros(ny * p);
    let mut state = z.clone();
    let mut u = u_prev.clone();
    for i in 0..ny {
        if i < nu {
            u += du.rows(i * m, m);
        }
        state = lin.step(&state, &u);
        out.rows_mut(i * p, p).copy_from(&lin.output(&state));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub ny: usize,
    pub nu: usize,
    /// Tracking weights, `N_y p x N_y p`.
    pub q1: DMatrix<f64>,
    /// Move-suppression weights, `N_u m x N_u m`.
    pub q2: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub du_min: DVector<f64>,
    pub du_max: DVector<f64>,
    pub y_min: DVector<f64>,
    pub y_max: DVector<f64>,
    /// Per-state box; infinite entries leave that side unconstrained.
    pub state_bounds: Option<(DVector<f64>, DVector<f64>)>,
    /// State indices forming the tracked output.
    pub outputs: Vec<usize>,
    pub solver: QpOptions,
    /// Scale constraint rows to unit dual curvature before solving.
    pub precondition: bool,
}

pub const HCCI_U_MIN: [f64; 3] = [19.0, -121.0, 272.0];
pub const HCCI_U_MAX: [f64; 3] = [25.0, -100.0, 375.0];
pub const HCCI_DU_MAX: [f64; 3] = [6.0, 22.0, 103.0];
pub const HCCI_Y_MIN: [f64; 2] = [2.1, -14.0];
pub const HCCI_Y_MAX: [f64; 2] = [3.55, -2.0];
/// Index of the pressure-rise-rate state.
pub const RMAX_STATE: usize = 3;
pub const HCCI_RMAX_LIMIT: f64 = 3.5;

impl MpcConfig {
    /// Engine controller: 6 states, inputs (FM, EVC, SOI), tracked outputs
    /// (IMEP, CA50), `N_y = N_u = 3`.
    pub fn hcci() -> Self {
        let ny = 3;
        let nu = 3;
        let q1 = DMatrix::from_diagonal(&DVector::from_iterator(
            ny * 2,
            (0..ny).flat_map(|_| [500.0, 1.0]),
        ));
        let q2 = DMatrix::from_diagonal(&DVector::from_iterator(
            nu * 3,
            (0..nu).flat_map(|_| [20.0, 1.0, 1.0]),
        ));
        MpcConfig {
            ny,
            nu,
            q1,
            q2,
            u_min: DVector::from_row_slice(&HCCI_U_MIN),
            u_max: DVector::from_row_slice(&HCCI_U_MAX),
            du_min: -DVector::from_row_slice(&HCCI_DU_MAX),
            du_max: DVector::from_row_slice(&HCCI_DU_MAX),
            y_min: DVector::from_row_slice(&HCCI_Y_MIN),
            y_max: DVector::from_row_slice(&HCCI_Y_MAX),
            state_bounds: None,
            outputs: vec![0, 1],
            solver: QpOptions::default(),
            precondition: true,
        }
    }

    /// Adds the upper bound on R_max.
    pub fn with_rmax_limit(mut self, limit: f64, n: usize) -> Self {
        let lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        hi[RMAX_STATE] = limit;
        self.state_bounds = Some((lo, hi));
        self
    }

    pub fn inputs(&self) -> usize {
        self.u_min.len()
    }

    pub fn outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_horizons(self.ny, self.nu)?;
        let m = self.inputs();
        let p = self.outputs();
        if m == 0 || p == 0 {
            return Err(Error::Config("controller needs at least one input and one output".into()));
        }
        for (name, v, len) in [
            ("u_max", &self.u_max, m),
            ("du_min", &self.du_min, m),
            ("du_max", &self.du_max, m),
            ("y_min", &self.y_min, p),
            ("y_max", &self.y_max, p),
        ] {
            if v.len() != len {
                return Err(Error::Config(format!("{name} has {} entries, expected {len}", v.len())));
            }
        }
        if self.q1.shape() != (self.ny * p, self.ny * p) || self.q2.shape() != (self.nu * m, self.nu * m) {
            return Err(Error::Config(format!(
                "Q1 is {:?} and Q2 is {:?}; expected {}x{} and {}x{}",
                self.q1.shape(),
                self.q2.shape(),
                self.ny * p,
                self.ny * p,
                self.nu * m,
                self.nu * m
            )));
        }
        if self.outputs.iter().any(|&i| i >= n) {
            return Err(Error::Config(format!("output index out of range for {n} states")));
        }
        ensure_finite(
            self.q1
                .iter()
                .chain(self.q2.iter())
                .chain(self.u_min.iter())
                .chain(self.u_max.iter())
                .chain(self.du_min.iter())
                .chain(self.du_max.iter()),
            "controller weights or input bounds",
        )?;
        ordered("u", &self.u_min, &self.u_max)?;
        ordered("du", &self.du_min, &self.du_max)?;
        ordered("y", &self.y_min, &self.y_max)?;
        if self.du_min.iter().any(|&v| v > 0.0) || self.du_max.iter().any(|&v| v < 0.0) {
            return Err(Error::Bounds("increment bounds must contain zero".into()));
        }
        if let Some((lo, hi)) = &self.state_bounds {
            if lo.len() != n || hi.len() != n {
                return Err(Error::Config(format!("state bounds must have {n} entries")));
            }
            ordered("state", lo, hi)?;
        }
        let q1_min = SymmetricEigen::new(sym(&self.q1)).eigenvalues.min();
        let q2_min = SymmetricEigen::new(sym(&self.q2)).eigenvalues.min();
        if q1_min < -1e-12 {
            return Err(Error::Config("Q1 must be positive semidefinite".into()));
        }
        if q2_min <= 0.0 {
            return Err(Error::Config("Q2 must be positive definite".into()));
        }
        self.solver.validate()
    }
}

fn ordered(name: &str, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<()> {
    if lo.iter().zip(hi.iter()).any(|(l, h)| l.is_nan() || h.is_nan() || l > h) {
        return Err(Error::Bounds(format!("{name} bounds are not ordered")));
    }
    Ok(())
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn tile(v: &DVector<f64>, times: usize) -> DVector<f64> {
    DVector::from_iterator(v.len() * times, (0..times).flat_map(|_| v.iter().copied()))
}

/// Row-block sizes of `E`/`F` in order: increment upper/lower, input
/// upper/lower, output upper/lower, state upper/lower.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    pub increments: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub state_upper: usize,
    pub state_lower: usize,
}

impl RowLayout {
    /// Rows encoding hardware limits on `u` and `du`.
    pub fn hard_rows(&self) -> usize {
        2 * self.increments + 2 * self.inputs
    }

    pub fn total(&self) -> usize {
        self.hard_rows() + 2 * self.outputs + self.state_upper + self.state_lower
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcQp {
    pub problem: QpProblem,
    pub layout: RowLayout,
    pub ny: usize,
    pub nu: usize,
    /// Predicted outputs for `dU = 0`.
    pub free_response: DVector<f64>,
}

/// Condensed QP for one cycle.
pub fn build_qp(
    lin: &LinearizedSystem,
    pred: &PredictionMatrices,
    reference: &DVector<f64>,
    z: &DVector<f64>,
    u_prev: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<MpcQp> {
    let n = lin.states();
    let m = lin.inputs();
    let p = lin.outputs();
    let (ny, nu) = (pred.ny, pred.nu);
    if (ny, nu) != (cfg.ny, cfg.nu) || m != cfg.inputs() || p != cfg.outputs() {
        return Err(Error::Dimension("prediction matrices do not match the controller".into()));
    }
    if reference.len() != ny * p {
        return Err(Error::Dimension(format!(
            "reference stack has {} entries, expected {}",
            reference.len(),
            ny * p
        )));
    }
    if z.len() != n || u_prev.len() != m {
        return Err(Error::Dimension("state or input length mismatch".into()));
    }
    ordered("u", &cfg.u_min, &cfg.u_max)?;
    ordered("du", &cfg.du_min, &cfg.du_max)?;
    ordered("y", &cfg.y_min, &cfg.y_max)?;

    let free = pred.free_response(z, u_prev, &lin.d1, &lin.d2);
    let ut_q1 = pred.u.tr_mul(&cfg.q1);
    let mut w1 = (&ut_q1 * &pred.u + &cfg.q2) * 2.0;
    w1 = sym(&w1);
    let w2 = &ut_q1 * (reference - &free) * -2.0;

    let d = nu * m;
    let state_rows = match &cfg.state_bounds {
        Some((lo, hi)) => {
            let sp = build_prediction_with(&lin.a, &lin.b, &DMatrix::identity(n, n), ny, nu)?;
            let sfree = sp.free_response(z, u_prev, &lin.d1, &DVector::zeros(n));
            let mut upper = Vec::new();
            let mut lower = Vec::new();
            for i in 0..ny {
                for s in 0..n {
                    let r = i * n + s;
                    if hi[s].is_finite() {
                        upper.push((sp.u.row(r).into_owned(), hi[s] - sfree[r]));
                    }
                    if lo[s].is_finite() {
                        lower.push((-sp.u.row(r).into_owned(), -(lo[s] - sfree[r])));
                    }
                }
            }
            Some((upper, lower))
        }
        None => None,
    };

    let layout = RowLayout {
        increments: d,
        inputs: d,
        outputs: ny * p,
        state_upper: state_rows.as_ref().map_or(0, |(u, _)| u.len()),
        state_lower: state_rows.as_ref().map_or(0, |(_, l)| l.len()),
    };
    let q = layout.total();
    let mut e = DMatrix::zeros(q, d);
    let mut f = DVector::zeros(q);
    let eye = DMatrix::<f64>::identity(d, d);
    let u_prev_stack = tile(u_prev, nu);
    let y_min = tile(&cfg.y_min, ny);
    let y_max = tile(&cfg.y_max, ny);

    let mut r = 0;
    let mut block = |e: &mut DMatrix<f64>, f: &mut DVector<f64>, mat: &DMatrix<f64>, rhs: &DVector<f64>| {
        e.view_mut((r, 0), (mat.nrows(), d)).copy_from(mat);
        f.rows_mut(r, rhs.len()).copy_from(rhs);
        r += mat.nrows();
    };
    block(&mut e, &mut f, &eye, &tile(&cfg.du_max, nu));
    block(&mut e, &mut f, &-&eye, &-tile(&cfg.du_min, nu));
    block(&mut e, &mut f, &pred.h, &(tile(&cfg.u_max, nu) - &u_prev_stack));
    block(&mut e, &mut f, &-&pred.h, &-(tile(&cfg.u_min, nu) - &u_prev_stack));
    block(&mut e, &mut f, &pred.u, &(&y_max - &free));
    block(&mut e, &mut f, &-&pred.u, &-(&y_min - &free));
    if let Some((upper, lower)) = state_rows {
        for (row, rhs) in upper.into_iter().chain(lower) {
            e.row_mut(r).copy_from(&row);
            f[r] = rhs;
            r += 1;
        }
    }
    debug_assert_eq!(r, q);

    Ok(MpcQp {
        problem: QpProblem::new(w1, w2, e, f)?,
        layout,
        ny,
        nu,
        free_response: free,
    })
}

/// Scalar cost `(R - Y)^T Q1 (R - Y) + dU^T Q2 dU` for the condensed model.
pub fn tracking_cost(
    pred: &PredictionMatrices,
    lin: &LinearizedSystem,
    cfg: &MpcConfig,
    reference: &DVector<f64>,
    z: &DVector<f64>,
    u_prev: &DVector<f64>,
    du: &DVector<f64>,
) -> f64 {
    let err = reference - pred.predict(z, du, u_prev, &lin.d1, &lin.d2);
    err.dot(&(&cfg.q1 * &err)) + du.dot(&(&cfg.q2 * du))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    None,
    /// Output and state rows dropped.
    InputRowsOnly,
    /// No usable solution; the previous input is held.
    Hold,
}

impl Fallback {
    pub fn as_str(self) -> &'static str {
        match self {
            Fallback::None => "none",
            Fallback::InputRowsOnly => "input_rows_only",
            Fallback::Hold => "hold",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub iterations: usize,
    pub status: QpStatus,
    pub fallback: Fallback,
    /// One flag per row of the full constraint set.
    pub active: Vec<bool>,
    pub cond_w1: f64,
    /// True when the final safety clamp changed the input.
    pub clamped: bool,
    pub kkt_residual: f64,
    pub du: DVector<f64>,
}

impl StepDiagnostics {
    pub fn active_mask(&self) -> String {
        self.active.iter().map(|&a| if a { '1' } else { '0' }).collect()
    }
}

pub fn condition_number(w1: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(w1.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Receding-horizon controller; keeps the dual warm start between cycles.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: MpcConfig,
    warm: Option<DVector<f64>>,
}

impl Controller {
    pub fn new(cfg: MpcConfig, n: usize) -> Result<Self> {
        cfg.validate(n)?;
        Ok(Controller { cfg, warm: None })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Builds the QP for the current measurement without solving it.
    pub fn assemble(
        &self,
        model: &ElmModel,
        z_meas: &DVector<f64>,
        u_prev: &DVector<f64>,
        reference: &DVector<f64>,
    ) -> Result<MpcQp> {
        let lin = linearize(model, z_meas, u_prev, &self.cfg.outputs)?;
        let pred = build_prediction(&lin, self.cfg.ny, self.cfg.nu)?;
        build_qp(&lin, &pred, reference, z_meas, u_prev, &self.cfg)
    }

    /// One cycle: linearize, condense, solve, apply the first increment.
    pub fn step(
        &mut self,
        model: &ElmModel,
        z_meas: &DVector<f64>,
        u_prev: &DVector<f64>,
        reference: &DVector<f64>,
    ) -> Result<(DVector<f64>, StepDiagnostics)> {
        let m = self.cfg.inputs();
        let qp = self.assemble(model, z_meas, u_prev, reference)?;
        let q = qp.layout.total();
        let hard = qp.layout.hard_rows();
        let cond_w1 = condition_number(&qp.problem.hessian);
        let scale = if self.cfg.precondition {
            row_scaling(&qp.problem)?
        } else {
            DVector::from_element(q, 1.0)
        };
        let scaled = scale_rows(&qp.problem, &scale);

        let opts = QpOptions {
            warm_start: self.warm.clone().filter(|w| w.len() == q),
            ..self.cfg.solver.clone()
        };
        let full = solve_fast(&scaled, &opts)?;
        let mut iterations = full.iterations;
        // Unconverged iterates still carry progress into the next cycle.
        self.warm = Some(full.lambda.clone());

        let (fallback, status, x, lambda) = if full.status == QpStatus::Converged {
            (Fallback::None, full.status, Some(full.x), full.lambda)
        } else {
            let rows: Vec<usize> = (0..hard).collect();
            let reduced = scaled.select_rows(&rows);
            let opts = QpOptions {
                warm_start: Some(full.lambda.rows(0, hard).into_owned()),
                ..self.cfg.solver.clone()
            };
            let sol = solve_fast(&reduced, &opts)?;
            iterations += sol.iterations;
            let mut lambda = DVector::zeros(q);
            lambda.rows_mut(0, hard).copy_from(&sol.lambda);
            if sol.status == QpStatus::Converged {
                (Fallback::InputRowsOnly, sol.status, Some(sol.x), lambda)
            } else {
                (Fallback::Hold, sol.status, None, DVector::zeros(q))
            }
        };

        let lambda = lambda.component_mul(&scale);
        let (du, kkt_residual) = match &x {
            Some(x) => {
                let rows: Vec<usize> = match fallback {
                    Fallback::None => (0..q).collect(),
                    _ => (0..hard).collect(),
                };
                let sub = qp.problem.select_rows(&rows);
                let kkt = KktResiduals::evaluate(&sub, x, &lambda.select_rows(&rows));
                (x.rows(0, m).into_owned(), kkt.max())
            }
            None => (DVector::zeros(m), f64::NAN),
        };

        let cfg = &self.cfg;
        let mut u = u_prev + &du;
        let mut clamped = false;
        for i in 0..m {
            let lo = (u_prev[i] + cfg.du_min[i]).max(cfg.u_min[i]);
            let hi = (u_prev[i] + cfg.du_max[i]).min(cfg.u_max[i]);
            let v = u[i].max(lo).min(hi);
            if v != u[i] {
                clamped = true;
                u[i] = v;
            }
        }
        let applied_du = &u - u_prev;
        ensure_finite(u.iter(), "applied input")?;

        Ok((
            u,
            StepDiagnostics {
                iterations,
                status,
                fallback,
                active: lambda.iter().map(|&l| l > 0.0).collect(),
                cond_w1,
                clamped,
                kkt_residual,
                du: applied_du,
            },
        ))
    }
}

/// `1 / sqrt(diag(E W1^-1 E^T))`, the Jacobi scaling of the dual Hessian.
/// Rows with zero curvature keep unit scale.
pub fn row_scaling(p: &QpProblem) -> Result<DVector<f64>> {
    let chol = p.factor()?;
    let e = &p.constraints;
    let sol = chol.solve(&e.transpose());
    Ok(DVector::from_fn(e.nrows(), |i, _| {
        let g = e.row(i).dot(&sol.column(i).transpose());
        if g > 0.0 && g.is_finite() {
            1.0 / g.sqrt()
        } else {
            1.0
        }
    }))
}

/// Same feasible set and minimizer; multipliers map back as
/// `lambda = scale .* lambda_scaled`.
pub fn scale_rows(p: &QpProblem, scale: &DVector<f64>) -> QpProblem {
    let mut e = p.constraints.clone();
    for (i, mut row) in e.row_iter_mut().enumerate() {
        row *= scale[i];
    }
    QpProblem {
        hessian: p.hessian.clone(),
        linear: p.linear.clone(),
        constraints: e,
        limits: p.limits.component_mul(scale),
    }
}

/// Stateless single cycle with a cold-started solver.
pub fn mpc_step(
    model: &ElmModel,
    cfg: &MpcConfig,
    z_meas: &DVector<f64>,
    u_prev: &DVector<f64>,
    reference: &DVector<f64>,
) -> Result<(DVector<f64>, StepDiagnostics)> {
    Controller::new(cfg.clone(), z_meas.len())?.step(model, z_meas, u_prev, reference)
}
