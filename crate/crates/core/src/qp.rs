//! Strictly convex inequality-constrained QP
//!
//! ```text
//! minimize   1/2 x^T W1 x + W2^T x
//! subject to E x <= F
//! ```
//!
//! [`solve_fast`] maximizes the Lagrangian dual by projected gradient ascent.
//! With `x(lambda) = -W1^-1 (W2 + E^T lambda)` the dual is the concave
//! quadratic `1/2 lambda^T L1 lambda + lambda^T L2 - 1/2 W2^T W1^-1 W2` with
//! `L1 = -E W1^-1 E^T` and `L2 = -F - E W1^-1 W2`, and its gradient
//! `L1 lambda + L2` equals the constraint residual `E x(lambda) - F`.
//!
//! [`solve_oracle`] enumerates active sets and is only meant for small
//! problems in tests.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{ensure_finite, Error, Result};
use crate::matrix_io::MatrixDoc;

/// Added to the spectral-radius estimate before inverting it.
pub const STEP_GUARD: f64 = 1e-8;
/// Upper limit on the automatic step size.
pub const MAX_STEP: f64 = 1e6;
/// Dual iterates beyond this magnitude are taken as evidence of an empty
/// feasible set.
pub const DUAL_DIVERGENCE: f64 = 1e12;

const POWER_ITERATIONS: usize = 50;
const QP_KIND: &str = "qp-problem";

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraints: DMatrix<f64>,
    pub limits: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constraints: DMatrix<f64>,
        limits: DVector<f64>,
    ) -> Result<Self> {
        let d = linear.len();
        if hessian.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "Hessian is {:?}, expected {d}x{d}",
                hessian.shape()
            )));
        }
        if constraints.ncols() != d || constraints.nrows() != limits.len() {
            return Err(Error::Dimension(format!(
                "constraints are {:?} with {} limits for {d} variables",
                constraints.shape(),
                limits.len()
            )));
        }
        ensure_finite(
            hessian.iter().chain(linear.iter()).chain(constraints.iter()).chain(limits.iter()),
            "QP data",
        )?;
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::NotPositiveDefinite(format!(
                "Hessian is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        Ok(QpProblem {
            hessian,
            linear,
            constraints,
            limits,
        })
    }

    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let d = linear.len();
        Self::new(hessian, linear, DMatrix::zeros(0, d), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.limits.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// `E x - F`
    pub fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.constraints * x - &self.limits
    }

    /// Keeps only the listed constraint rows.
    pub fn select_rows(&self, rows: &[usize]) -> QpProblem {
        QpProblem {
            hessian: self.hessian.clone(),
            linear: self.linear.clone(),
            constraints: self.constraints.select_rows(rows),
            limits: self.limits.select_rows(rows),
        }
    }

    pub fn factor(&self) -> Result<Cholesky<f64, Dyn>> {
        self.hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("QP Hessian".into()))
    }

    pub fn to_doc(&self) -> MatrixDoc {
        let mut doc = MatrixDoc::new(QP_KIND, 1);
        doc.comment("minimize 1/2 x^T hessian x + linear^T x  subject to  constraints x <= limits")
            .matrix("hessian", &self.hessian)
            .vector("linear", &self.linear)
            .matrix("constraints", &self.constraints)
            .vector("limits", &self.limits);
        doc
    }

    pub fn from_doc(doc: &MatrixDoc) -> Result<Self> {
        if doc.kind() != QP_KIND {
            return Err(Error::Data(format!("expected a `{QP_KIND}` document, found `{}`", doc.kind())));
        }
        QpProblem::new(
            doc.get_matrix("hessian")?.clone(),
            doc.get_vector("linear")?.clone(),
            doc.get_matrix("constraints")?.clone(),
            doc.get_vector("limits")?.clone(),
        )
    }

    /// Writes the problem for offline debugging.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_doc().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_doc(&MatrixDoc::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    IterationCap,
    InfeasibleDetected,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Converged => "converged",
            QpStatus::IterationCap => "iteration_cap",
            QpStatus::InfeasibleDetected => "infeasible_detected",
        }
    }
}

/// Step-size rule for the dual ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOptions {
    pub step: StepSize,
    pub max_iter: usize,
    pub tol: f64,
    pub warm_start: Option<DVector<f64>>,
    /// Re-solve the KKT system on the support of the final multipliers.
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            step: StepSize::Auto,
            max_iter: 20_000,
            tol: 1e-8,
            warm_start: None,
            polish: true,
        }
    }
}

impl QpOptions {
    pub fn validate(&self) -> Result<()> {
        if let StepSize::Fixed(s) = self.step {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("dual step must be positive, got {s}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// First-order optimality residuals, all in absolute terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `||W1 x + W2 + E^T lambda||_inf`
    pub stationarity: f64,
    /// `max(E x - F, 0)`
    pub primal: f64,
    /// `max(-lambda, 0)`
    pub dual: f64,
    /// `max |lambda_i (E x - F)_i|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn evaluate(p: &QpProblem, x: &DVector<f64>, lambda: &DVector<f64>) -> Self {
        let grad = &p.hessian * x + &p.linear + p.constraints.tr_mul(lambda);
        let slack = p.slack(x);
        KktResiduals {
            stationarity: grad.amax(),
            primal: slack.iter().fold(0.0, |m, &s| m.max(s)),
            dual: lambda.iter().fold(0.0, |m, &l| m.max(-l)),
            complementarity: lambda
                .iter()
                .zip(slack.iter())
                .fold(0.0, |m, (l, s)| m.max((l * s).abs())),
        }
    }

    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub objective: f64,
    pub step: f64,
    /// The returned pair comes from the support re-solve.
    pub polished: bool,
}

impl QpSolution {
    pub fn kkt_residual(&self) -> f64 {
        self.kkt.max()
    }

    pub fn is_converged(&self) -> bool {
        self.status == QpStatus::Converged
    }

    /// Constraints with a strictly positive multiplier.
    pub fn active_set(&self) -> Vec<usize> {
        (0..self.lambda.len()).filter(|&i| self.lambda[i] > 0.0).collect()
    }
}

/// Dual quadratic data `(L1, L2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
}

fn assemble_dual_with(p: &QpProblem, chol: &Cholesky<f64, Dyn>) -> DualProblem {
    let et = p.constraints.transpose();
    let winv_et = chol.solve(&et);
    let mut quadratic = -(&p.constraints * winv_et);
    // Symmetrize away rounding so the ascent map stays a gradient map.
    let sym = (&quadratic + quadratic.transpose()) * 0.5;
    quadratic = sym;
    let winv_w2 = chol.solve(&p.linear);
    let linear = -(&p.limits) - &p.constraints * winv_w2;
    DualProblem { quadratic, linear }
}

/// `L1 = -E W1^-1 E^T`, `L2 = -F - E W1^-1 W2`, computed with Cholesky solves.
pub fn assemble_dual(p: &QpProblem) -> Result<DualProblem> {
    let chol = p.factor()?;
    Ok(assemble_dual_with(p, &chol))
}

/// Step `1 / (sigma_max(-L1) + STEP_GUARD)` with `sigma_max` estimated by 50
/// power iterations, capped at [`MAX_STEP`].
pub fn estimate_step(dual_quadratic: &DMatrix<f64>) -> f64 {
    let q = dual_quadratic.nrows();
    if q == 0 {
        return MAX_STEP;
    }
    let neg = -dual_quadratic;
    let mut v = DVector::from_element(q, 1.0 / (q as f64).sqrt());
    let mut sigma = 0.0;
    for it in 0..POWER_ITERATIONS {
        let w = &neg * &v;
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            if it == 0 {
                // The uniform start vector may lie in the null space; retry
                // from an uneven one before giving up.
                v = DVector::from_fn(q, |i, _| 1.0 + i as f64);
                v.normalize_mut();
                continue;
            }
            break;
        }
        sigma = v.dot(&w);
        v = w / norm;
    }
    let sigma = sigma.max(0.0);
    (1.0 / (sigma + STEP_GUARD)).min(MAX_STEP)
}

/// Dual objective `1/2 l^T L1 l + l^T L2 - 1/2 W2^T W1^-1 W2`.
pub fn dual_objective(p: &QpProblem, dual: &DualProblem, lambda: &DVector<f64>) -> Result<f64> {
    let chol = p.factor()?;
    let constant = 0.5 * p.linear.dot(&chol.solve(&p.linear));
    Ok(0.5 * lambda.dot(&(&dual.quadratic * lambda)) + lambda.dot(&dual.linear) - constant)
}

/// Projected gradient ascent on the dual:
/// `lambda <- max(lambda + step (L1 lambda + L2), 0)` until the fixed-point
/// residual drops below `tol`, then `x = -W1^-1 (W2 + E^T lambda)`.
pub fn solve_fast(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    solve_fast_traced(p, opts, |_, _| {})
}

/// [`solve_fast`] with a callback receiving `(iteration, lambda)` after
/// every update.
pub fn solve_fast_traced(
    p: &QpProblem,
    opts: &QpOptions,
    mut observe: impl FnMut(usize, &DVector<f64>),
) -> Result<QpSolution> {
    opts.validate()?;
    let chol = p.factor()?;
    let q = p.num_constraints();

    if q == 0 {
        let x = -chol.solve(&p.linear);
        let lambda = DVector::zeros(0);
        return Ok(QpSolution {
            kkt: KktResiduals::evaluate(p, &x, &lambda),
            objective: p.objective(&x),
            x,
            lambda,
            iterations: 0,
            status: QpStatus::Converged,
            step: 0.0,
            polished: false,
        });
    }

    let dual = assemble_dual_with(p, &chol);
    let step = match opts.step {
        StepSize::Auto => estimate_step(&dual.quadratic),
        StepSize::Fixed(s) => s,
    };

    let mut lambda = match &opts.warm_start {
        Some(w) if w.len() == q && w.iter().all(|v| v.is_finite()) => w.map(|v| v.max(0.0)),
        _ => DVector::zeros(q),
    };
    let mut grad = DVector::zeros(q);
    let mut status = QpStatus::IterationCap;
    let mut iterations = opts.max_iter;

    for it in 1..=opts.max_iter {
        grad.copy_from(&dual.linear);
        grad.gemv(1.0, &dual.quadratic, &lambda, 1.0);
        let mut residual = 0.0f64;
        for i in 0..q {
            let next = (lambda[i] + step * grad[i]).max(0.0);
            residual = residual.max((next - lambda[i]).abs());
            lambda[i] = next;
        }
        observe(it, &lambda);
        if !residual.is_finite() {
            return Err(Error::Numerical(format!(
                "dual ascent produced a non-finite iterate at iteration {it}"
            )));
        }
        if residual <= opts.tol {
            status = QpStatus::Converged;
            iterations = it;
            break;
        }
        if lambda.amax() > DUAL_DIVERGENCE {
            status = QpStatus::InfeasibleDetected;
            iterations = it;
            break;
        }
    }

    let mut x = -chol.solve(&(&p.linear + p.constraints.tr_mul(&lambda)));
    ensure_finite(x.iter(), "QP solution")?;
    let mut kkt = KktResiduals::evaluate(p, &x, &lambda);
    let mut polished = false;
    if opts.polish && status != QpStatus::InfeasibleDetected {
        if let Some((xp, lp)) = polish(p, &chol, &dual, &lambda) {
            let kp = KktResiduals::evaluate(p, &xp, &lp);
            if kp.max() < kkt.max() {
                (x, lambda, kkt, polished) = (xp, lp, kp, true);
                if kkt.max() <= opts.tol {
                    status = QpStatus::Converged;
                }
            }
        }
    }
    Ok(QpSolution {
        kkt,
        objective: p.objective(&x),
        x,
        lambda,
        iterations,
        status,
        step,
        polished,
    })
}

/// Solves the equality-constrained KKT system on the rows where `lambda`
/// is positive, dropping the smallest multiplier while the rows are
/// dependent or a multiplier comes out negative. Returns the candidate with
/// the smallest KKT residual.
fn polish(
    p: &QpProblem,
    chol: &Cholesky<f64, Dyn>,
    dual: &DualProblem,
    lambda: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let mut support: Vec<usize> = (0..lambda.len()).filter(|&i| lambda[i] > 0.0).collect();
    support.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]));
    support.truncate(p.dim());
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    loop {
        if let Some(full) = support_multipliers(dual, &support, lambda.len()) {
            let x = -chol.solve(&(&p.linear + p.constraints.tr_mul(&full)));
            if x.iter().all(|v| v.is_finite()) {
                let r = KktResiduals::evaluate(p, &x, &full).max();
                if best.as_ref().is_none_or(|b| r < b.0) {
                    best = Some((r, x, full));
                }
            }
        }
        if support.pop().is_none() {
            break;
        }
    }
    best.map(|(_, x, l)| (x, l))
}

fn support_multipliers(dual: &DualProblem, support: &[usize], q: usize) -> Option<DVector<f64>> {
    let mut full = DVector::zeros(q);
    if support.is_empty() {
        return Some(full);
    }
    let m = -dual.quadratic.select_rows(support).select_columns(support);
    let rhs = dual.linear.select_rows(support);
    let ls = m.cholesky()?.solve(&rhs);
    if ls.iter().any(|v| !(*v >= 0.0)) {
        return None;
    }
    for (k, &i) in support.iter().enumerate() {
        full[i] = ls[k];
    }
    Some(full)
}

/// Largest problem the enumeration oracle accepts.
pub const ORACLE_MAX_DIM: usize = 6;
pub const ORACLE_MAX_CONSTRAINTS: usize = 12;

/// Exact solution by enumerating every active set of size at most `d`,
/// solving its equality-constrained KKT system, and keeping the feasible,
/// dual-feasible candidate with the lowest objective.
pub fn solve_oracle(p: &QpProblem) -> Result<QpSolution> {
    let d = p.dim();
    let q = p.num_constraints();
    if d > ORACLE_MAX_DIM || q > ORACLE_MAX_CONSTRAINTS {
        return Err(Error::Config(format!(
            "enumeration oracle handles d <= {ORACLE_MAX_DIM}, q <= {ORACLE_MAX_CONSTRAINTS}; got d = {d}, q = {q}"
        )));
    }
    p.factor()?;

    let scale = 1.0 + p.limits.amax() + p.linear.amax();
    let feas_tol = 1e-9 * scale;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let mut examined = 0;

    for mask in 0u32..(1u32 << q) {
        let active: Vec<usize> = (0..q).filter(|&i| mask & (1 << i) != 0).collect();
        if active.len() > d {
            continue;
        }
        examined += 1;
        let k = active.len();
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(&p.hessian);
        let mut rhs = DVector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-&p.linear));
        for (r, &i) in active.iter().enumerate() {
            for c in 0..d {
                kkt[(d + r, c)] = p.constraints[(i, c)];
                kkt[(c, d + r)] = p.constraints[(i, c)];
            }
            rhs[d + r] = p.limits[i];
        }
        let lu = kkt.lu();
        let sol = match lu.solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => continue,
        };
        // Reject numerically singular systems where the solve "succeeds".
        let back = lu.solve(&rhs).unwrap();
        if (&kkt_check(p, &active, &back) - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
            continue;
        }
        let x = sol.rows(0, d).into_owned();
        let mut lambda = DVector::zeros(q);
        for (r, &i) in active.iter().enumerate() {
            lambda[i] = sol[d + r];
        }
        if lambda.iter().any(|&l| l < -feas_tol) {
            continue;
        }
        if p.slack(&x).iter().any(|&s| s > feas_tol) {
            continue;
        }
        let f = p.objective(&x);
        if best.as_ref().is_none_or(|(bf, _, _)| f < *bf) {
            lambda.apply(|l| *l = l.max(0.0));
            best = Some((f, x, lambda));
        }
    }

    match best {
        Some((objective, x, lambda)) => Ok(QpSolution {
            kkt: KktResiduals::evaluate(p, &x, &lambda),
            objective,
            x,
            lambda,
            iterations: examined,
            status: QpStatus::Converged,
            step: 0.0,
            polished: false,
        }),
        None => Ok(QpSolution {
            x: DVector::zeros(d),
            lambda: DVector::zeros(q),
            iterations: examined,
            status: QpStatus::InfeasibleDetected,
            kkt: KktResiduals::default(),
            objective: f64::NAN,
            step: 0.0,
            polished: false,
        }),
    }
}

fn kkt_check(p: &QpProblem, active: &[usize], sol: &DVector<f64>) -> DVector<f64> {
    let d = p.dim();
    let k = active.len();
    let x = sol.rows(0, d);
    let mut out = DVector::zeros(d + k);
    let mut top = &p.hessian * x;
    for (r, &i) in active.iter().enumerate() {
        top += p.constraints.row(i).transpose() * sol[d + r];
        out[d + r] = p.constraints.row(i).dot(&x.transpose());
    }
    out.rows_mut(0, d).copy_from(&top);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, d: usize, q: usize) -> QpProblem {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let mut w1 = m.transpose() * &m + DMatrix::identity(d, d);
        w1 = (&w1 + w1.transpose()) * 0.5;
        let w2 = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let e = DMatrix::from_fn(q, d, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let f = &e * &x0 + DVector::from_fn(q, |_, _| rng.random_range(0.0..0.5));
        QpProblem::new(w1, w2, e, f).unwrap()
    }

    #[test]
    fn polish_resolves_nearly_parallel_rows() {
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, -5.0),
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0 + 1e-7]),
            DVector::from_column_slice(&[1.0, 1.0 + 2e-7]),
        )
        .unwrap();
        let raw = solve_fast(&p, &QpOptions { polish: false, max_iter: 500, ..QpOptions::default() }).unwrap();
        let polished = solve_fast(&p, &QpOptions { max_iter: 500, ..QpOptions::default() }).unwrap();
        assert!(!raw.polished && polished.polished);
        assert!(polished.kkt_residual() < raw.kkt_residual());
        assert_relative_eq!(polished.x[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(polished.lambda[0], 4.0, epsilon = 1e-12);
        assert_eq!(polished.lambda[1], 0.0);
        assert!(polished.is_converged());
    }

    #[test]
    fn polish_never_raises_the_kkt_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let d = rng.random_range(1..=4);
            let q = rng.random_range(1..=10);
            let p = random_problem(&mut rng, d, q);
            let max_iter = rng.random_range(1..=60);
            let raw = solve_fast(&p, &QpOptions { polish: false, max_iter, ..QpOptions::default() }).unwrap();
            let pol = solve_fast(&p, &QpOptions { max_iter, ..QpOptions::default() }).unwrap();
            assert!(pol.kkt_residual() <= raw.kkt_residual());
            assert_eq!(pol.iterations, raw.iterations);
            assert!(pol.lambda.iter().all(|&l| l >= 0.0));
        }
    }

    #[test]
    fn dual_identity_algebra() {
        let p = QpProblem::new(
            DMatrix::identity(3, 3),
            DVector::zeros(3),
            DMatrix::identity(3, 3),
            DVector::zeros(3),
        )
        .unwrap();
        let dual = assemble_dual(&p).unwrap();
        assert_eq!(dual.quadratic, -DMatrix::identity(3, 3));
        assert_eq!(dual.linear, DVector::zeros(3));
    }

    #[test]
    fn unconstrained_problem_has_empty_dual_and_newton_solution() {
        let w1 = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let w2 = DVector::from_vec(vec![1.0, -2.0]);
        let p = QpProblem::unconstrained(w1.clone(), w2.clone()).unwrap();
        let dual = assemble_dual(&p).unwrap();
        assert_eq!(dual.quadratic.shape(), (0, 0));
        let s = solve_fast(&p, &QpOptions::default()).unwrap();
        let expect = -w1.cholesky().unwrap().solve(&w2);
        assert!(s.is_converged());
        assert!((&s.x - expect).amax() < 1e-14);
        let o = solve_oracle(&p).unwrap();
        assert!((&o.x - &s.x).amax() < 1e-12);
    }

    #[test]
    fn dual_hessian_is_negative_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_problem(&mut rng, 4, 7);
            let dual = assemble_dual(&p).unwrap();
            let eig = SymmetricEigen::new(dual.quadratic.clone());
            assert!(eig.eigenvalues.max() <= 1e-10);
        }
    }

    #[test]
    fn step_estimates() {
        let s = estimate_step(&-DMatrix::<f64>::identity(3, 3));
        assert_relative_eq!(s, 1.0 / (1.0 + STEP_GUARD), max_relative = 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert_relative_eq!(estimate_step(&-d), 0.25, max_relative = 1e-6);
        assert_eq!(estimate_step(&DMatrix::zeros(4, 4)), MAX_STEP);
    }

    #[test]
    fn power_iteration_tracks_dense_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..9);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let psd = a.transpose() * a;
            let oracle = SymmetricEigen::new(psd.clone()).eigenvalues.max();
            let est = 1.0 / estimate_step(&-psd) - STEP_GUARD;
            assert!((est - oracle).abs() <= 0.01 * oracle, "{est} vs {oracle}");
        }
    }

    #[test]
    fn scalar_clamp_problem() {
        // min 1/2 x^2 + w x  s.t.  x <= b  has x* = min(-w, b).
        for (w, b) in [(1.0, 0.5), (-2.0, 0.5), (-0.5, 3.0), (4.0, -6.0), (0.0, 0.0)] {
            let p = QpProblem::new(
                DMatrix::identity(1, 1),
                DVector::from_element(1, w),
                DMatrix::identity(1, 1),
                DVector::from_element(1, b),
            )
            .unwrap();
            let s = solve_fast(&p, &QpOptions::default()).unwrap();
            assert!(s.is_converged());
            assert!((s.x[0] - f64::min(-w, b)).abs() < 1e-8, "w={w} b={b} x={}", s.x[0]);
        }
    }

    #[test]
    fn oracle_agrees_on_box_constrained_instance() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![-4.0, 3.0]),
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]),
        )
        .unwrap();
        let fast = solve_fast(&p, &QpOptions::default()).unwrap();
        let oracle = solve_oracle(&p).unwrap();
        assert!(fast.is_converged());
        assert!((&fast.x - &oracle.x).amax() <= 1e-4);
        assert!((fast.objective - oracle.objective).abs() <= 1e-6);
    }

    #[test]
    fn oracle_detects_contradictory_constraints() {
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![0.0, -1.0]),
        )
        .unwrap();
        assert_eq!(solve_oracle(&p).unwrap().status, QpStatus::InfeasibleDetected);
        let fast = solve_fast(&p, &QpOptions::default()).unwrap();
        assert_ne!(fast.status, QpStatus::Converged);
    }

    #[test]
    fn oracle_rejects_large_problems() {
        let p = QpProblem::unconstrained(DMatrix::identity(7, 7), DVector::zeros(7)).unwrap();
        assert!(matches!(solve_oracle(&p), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_indefinite_and_asymmetric_hessians() {
        let p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DVector::zeros(2),
        )
        .unwrap();
        assert!(matches!(solve_fast(&p, &QpOptions::default()), Err(Error::NotPositiveDefinite(_))));
        assert!(QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DVector::zeros(2)
        )
        .is_err());
    }

    #[test]
    fn iteration_cap_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_problem(&mut rng, 3, 6);
        let opts = QpOptions {
            max_iter: 1,
            tol: 1e-300,
            ..QpOptions::default()
        };
        let s = solve_fast(&p, &opts).unwrap();
        assert_eq!(s.status, QpStatus::IterationCap);
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn iterates_stay_nonnegative_and_dual_ascends() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let p = random_problem(&mut rng, 4, 9);
            let dual = assemble_dual(&p).unwrap();
            let sigma = SymmetricEigen::new(-dual.quadratic.clone()).eigenvalues.max();
            let opts = QpOptions {
                step: StepSize::Fixed(1.0 / sigma),
                ..QpOptions::default()
            };
            let mut last = dual_objective(&p, &dual, &DVector::zeros(p.num_constraints())).unwrap();
            let mut ok = true;
            solve_fast_traced(&p, &opts, |it, l| {
                ok &= l.iter().all(|&v| v >= 0.0);
                if it % 7 == 0 {
                    let g = dual_objective(&p, &dual, l).unwrap();
                    ok &= g >= last - 1e-12 * (1.0 + last.abs());
                    last = g;
                }
            })
            .unwrap();
            assert!(ok);
        }
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let p = random_problem(&mut rng, 4, 8);
            let cold = solve_fast(&p, &QpOptions::default()).unwrap();
            let warm_lambda = DVector::from_fn(8, |_, _| rng.random_range(0.0..2.0));
            let warm = solve_fast(
                &p,
                &QpOptions {
                    warm_start: Some(warm_lambda),
                    ..QpOptions::default()
                },
            )
            .unwrap();
            assert!(cold.is_converged() && warm.is_converged());
            assert!((&cold.x - &warm.x).amax() <= 1e-6);
        }
    }

    #[test]
    fn converged_solutions_are_kkt_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let p = random_problem(&mut rng, 3, 6);
            let s = solve_fast(&p, &QpOptions::default()).unwrap();
            assert!(s.is_converged());
            assert!(s.kkt_residual() <= 1e-6, "{:?}", s.kkt);
        }
    }

    #[test]
    fn problem_dump_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_problem(&mut rng, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hard.qp");
        p.dump(&path).unwrap();
        assert_eq!(QpProblem::load(&path).unwrap(), p);
    }
}
