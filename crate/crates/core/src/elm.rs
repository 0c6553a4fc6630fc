//! Extreme learning machine regression.
//!
//! A single hidden layer of sigmoid units with fixed random input weights,
//! followed by a linear output layer trained in closed form by ridge
//! regression. Inputs and outputs are mapped affinely onto `[-1, +1]` with
//! bounds stored in the model, so `predict` and `jacobian` work in physical
//! units.
//!
//! Batch layout: the hidden-layer matrix `H` has one row per sample and one
//! column per neuron (`N x n_h`), so `H * W` is `N x d_out`.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::matrix_io::MatrixDoc;

/// Name of the PRNG used to draw the random layer. Stored in model files so a
/// change of generator is detectable.
pub const RNG_NAME: &str = "chacha8-rand0.9";

const MODEL_KIND: &str = "elm-model";
const MODEL_VERSION: u32 = 1;

/// Elementwise box `[lo, hi]` with `hi > lo` in every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl Bounds {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension(format!(
                "bound vectors differ in length ({} vs {})",
                lo.len(),
                hi.len()
            )));
        }
        ensure_finite(lo.iter().chain(hi.iter()), "bounds")?;
        if let Some(i) = (0..lo.len()).find(|&i| hi[i] <= lo[i]) {
            return Err(Error::Bounds(format!(
                "coordinate {i}: upper bound {} is not above lower bound {}",
                hi[i], lo[i]
            )));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn from_slices(lo: &[f64], hi: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(lo), DVector::from_column_slice(hi))
    }

    /// Column-wise min/max of `data` (one sample per row).
    pub fn from_rows(data: &DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Data("cannot derive bounds from zero samples".into()));
        }
        ensure_finite(data.iter(), "bound data")?;
        let lo = DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.min()));
        let hi = DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.max()));
        Self::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn span(&self) -> DVector<f64> {
        &self.hi - &self.lo
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim() && (0..x.len()).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    /// `2 (x - lo) / (hi - lo) - 1`. Points outside the box extrapolate.
    pub fn normalize(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            (0..x.len()).map(|i| 2.0 * (x[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0),
        )
    }

    pub fn denormalize(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            (0..v.len()).map(|i| self.lo[i] + (self.hi[i] - self.lo[i]) * 0.5 * (1.0 + v[i])),
        )
    }
}

/// Affine map onto `[-1, +1]^d`. Thin free-function form of [`Bounds::normalize`].
pub fn normalize(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<DVector<f64>> {
    let b = Bounds::new(lo.clone(), hi.clone())?;
    if x.len() != b.dim() {
        return Err(Error::Dimension(format!("x has {} entries, bounds {}", x.len(), b.dim())));
    }
    Ok(b.normalize(x))
}

pub fn denormalize(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<DVector<f64>> {
    let b = Bounds::new(lo.clone(), hi.clone())?;
    if v.len() != b.dim() {
        return Err(Error::Dimension(format!("v has {} entries, bounds {}", v.len(), b.dim())));
    }
    Ok(b.denormalize(v))
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
        }
    }
}

/// Ridge regression problem `min ||H W - Y||^2 + lambda ||W||^2`.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    pub hidden: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub lambda: f64,
}

impl RidgeProblem {
    pub fn new(hidden: DMatrix<f64>, targets: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if hidden.nrows() != targets.nrows() {
            return Err(Error::Dimension(format!(
                "H has {} rows but Y has {}",
                hidden.nrows(),
                targets.nrows()
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("regularization must be finite and >= 0, got {lambda}")));
        }
        Ok(RidgeProblem { hidden, targets, lambda })
    }

    /// `||H W - Y||^2 + lambda ||W||^2`
    pub fn objective(&self, w: &DMatrix<f64>) -> f64 {
        let r = &self.hidden * w - &self.targets;
        r.norm_squared() + self.lambda * w.norm_squared()
    }
}

/// Closed-form ridge solution `W* = (H^T H + lambda I)^-1 H^T Y` via a
/// Cholesky solve. Fails on a singular Gram matrix rather than falling back
/// to a pseudo-inverse.
pub fn train_ridge(problem: &RidgeProblem) -> Result<DMatrix<f64>> {
    let h = &problem.hidden;
    let y = &problem.targets;
    ensure_finite(h.iter(), "hidden-layer matrix")?;
    ensure_finite(y.iter(), "targets")?;

    let n_h = h.ncols();
    let mut gram = h.transpose() * h;
    for i in 0..n_h {
        gram[(i, i)] += problem.lambda;
    }
    let rhs = h.transpose() * y;

    let chol = gram.clone().cholesky().ok_or_else(|| {
        Error::Singular(format!("H^T H + {} I is not positive definite", problem.lambda))
    })?;
    // Cholesky succeeds on numerically singular matrices with tiny pivots.
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..n_h).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if n_h > 0 && dmin <= dmax * f64::EPSILON * n_h as f64 {
        return Err(Error::Singular(format!(
            "ridge system is numerically singular (pivot ratio {:.3e})",
            dmin / dmax
        )));
    }

    let mut w = chol.solve(&rhs);
    // One step of iterative refinement keeps the normal-equation residual at
    // the level the training contract promises.
    let resid = &rhs - &gram * &w;
    w += chol.solve(&resid);
    ensure_finite(w.iter(), "ridge solution")?;
    Ok(w)
}

/// `||(H^T H + lambda I) W - H^T Y||_inf` and `||H^T Y||_inf`.
pub fn ridge_residual(problem: &RidgeProblem, w: &DMatrix<f64>) -> (f64, f64) {
    let h = &problem.hidden;
    let mut gram = h.transpose() * h;
    for i in 0..gram.nrows() {
        gram[(i, i)] += problem.lambda;
    }
    let rhs = h.transpose() * &problem.targets;
    let r = &gram * w - &rhs;
    (r.amax(), rhs.amax())
}

/// Single-hidden-layer ELM with normalization bounds.
#[derive(Debug)]
pub struct ElmModel {
    input_weights: DMatrix<f64>,
    bias: DVector<f64>,
    output_weights: DMatrix<f64>,
    input_bounds: Bounds,
    output_bounds: Bounds,
    activation: Activation,
    seed: u64,
    trained: bool,
    extrapolations: AtomicU64,
}

impl Clone for ElmModel {
    fn clone(&self) -> Self {
        ElmModel {
            input_weights: self.input_weights.clone(),
            bias: self.bias.clone(),
            output_weights: self.output_weights.clone(),
            input_bounds: self.input_bounds.clone(),
            output_bounds: self.output_bounds.clone(),
            activation: self.activation,
            seed: self.seed,
            trained: self.trained,
            extrapolations: AtomicU64::new(self.extrapolations.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for ElmModel {
    fn eq(&self, other: &Self) -> bool {
        self.input_weights == other.input_weights
            && self.bias == other.bias
            && self.output_weights == other.output_weights
            && self.input_bounds == other.input_bounds
            && self.output_bounds == other.output_bounds
            && self.activation == other.activation
            && self.seed == other.seed
            && self.trained == other.trained
    }
}

/// Draws the random layer and returns an untrained model with zero output
/// weights. Input weights and biases are i.i.d. uniform on `[-1, +1]`, drawn
/// neuron by neuron (weights first, then the bias) from a ChaCha8 stream
/// seeded with `seed`.
pub fn init_elm(
    d_in: usize,
    d_out: usize,
    n_h: usize,
    seed: u64,
    x_bounds: Bounds,
    z_bounds: Bounds,
) -> Result<ElmModel> {
    if d_in == 0 || d_out == 0 || n_h == 0 {
        return Err(Error::Dimension(format!(
            "ELM dimensions must be positive (d_in={d_in}, d_out={d_out}, n_h={n_h})"
        )));
    }
    if x_bounds.dim() != d_in || z_bounds.dim() != d_out {
        return Err(Error::Dimension(format!(
            "bounds have dimensions {}/{}, expected {d_in}/{d_out}",
            x_bounds.dim(),
            z_bounds.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut input_weights = DMatrix::zeros(d_in, n_h);
    let mut bias = DVector::zeros(n_h);
    for j in 0..n_h {
        for i in 0..d_in {
            input_weights[(i, j)] = unit.sample(&mut rng);
        }
        bias[j] = unit.sample(&mut rng);
    }
    Ok(ElmModel {
        input_weights,
        bias,
        output_weights: DMatrix::zeros(n_h, d_out),
        input_bounds: x_bounds,
        output_bounds: z_bounds,
        activation: Activation::Sigmoid,
        seed,
        trained: false,
        extrapolations: AtomicU64::new(0),
    })
}

impl ElmModel {
    /// Assembles a model from explicit parameters. The model counts as
    /// trained.
    pub fn from_parts(
        input_weights: DMatrix<f64>,
        bias: DVector<f64>,
        output_weights: DMatrix<f64>,
        input_bounds: Bounds,
        output_bounds: Bounds,
        seed: u64,
    ) -> Result<Self> {
        let n_h = bias.len();
        if input_weights.ncols() != n_h || output_weights.nrows() != n_h || n_h == 0 {
            return Err(Error::Dimension(format!(
                "inconsistent hidden sizes: Wr {}x{}, b {}, W {}x{}",
                input_weights.nrows(),
                input_weights.ncols(),
                n_h,
                output_weights.nrows(),
                output_weights.ncols()
            )));
        }
        if input_weights.nrows() != input_bounds.dim() || output_weights.ncols() != output_bounds.dim() {
            return Err(Error::Dimension("bounds do not match layer sizes".into()));
        }
        ensure_finite(
            input_weights.iter().chain(bias.iter()).chain(output_weights.iter()),
            "model parameters",
        )?;
        Ok(ElmModel {
            input_weights,
            bias,
            output_weights,
            input_bounds,
            output_bounds,
            activation: Activation::Sigmoid,
            seed: 0,
            trained: true,
            extrapolations: AtomicU64::new(0),
        }
        .with_seed(seed))
    }

    fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.output_weights.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.bias.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn input_weights(&self) -> &DMatrix<f64> {
        &self.input_weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn output_weights(&self) -> &DMatrix<f64> {
        &self.output_weights
    }

    pub fn input_bounds(&self) -> &Bounds {
        &self.input_bounds
    }

    pub fn output_bounds(&self) -> &Bounds {
        &self.output_bounds
    }

    /// Number of learned and random weights: `n_h (d_in + d_out) + n_h`.
    /// Normalization bounds are not counted.
    pub fn parameter_count(&self) -> usize {
        self.input_weights.len() + self.bias.len() + self.output_weights.len()
    }

    /// How many evaluations so far received an input outside the stored
    /// input bounds.
    pub fn extrapolation_count(&self) -> u64 {
        self.extrapolations.load(Ordering::Relaxed)
    }

    pub fn reset_extrapolation_count(&self) {
        self.extrapolations.store(0, Ordering::Relaxed);
    }

    pub fn set_output_weights(&mut self, w: DMatrix<f64>) -> Result<()> {
        if w.nrows() != self.hidden_size() || w.ncols() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "output weights must be {}x{}, got {}x{}",
                self.hidden_size(),
                self.output_dim(),
                w.nrows(),
                w.ncols()
            )));
        }
        ensure_finite(w.iter(), "output weights")?;
        self.output_weights = w;
        self.trained = true;
        Ok(())
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "model expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if !self.input_bounds.contains(x) {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Hidden-layer activations `sigmoid(Wr^T normalize(x) + b)`.
    pub fn hidden(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.hidden_unchecked(x))
    }

    fn hidden_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        let xn = self.input_bounds.normalize(x);
        let mut a = self.input_weights.tr_mul(&xn);
        a += &self.bias;
        a.map(sigmoid)
    }

    /// Hidden-layer matrix for a batch of samples (one per row of `x`).
    pub fn hidden_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "model expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let lo = self.input_bounds.lo();
        let span = self.input_bounds.span();
        let mut xn = x.clone();
        for (j, mut col) in xn.column_iter_mut().enumerate() {
            col.apply(|v| *v = 2.0 * (*v - lo[j]) / span[j] - 1.0);
        }
        let mut a = xn * &self.input_weights;
        for mut row in a.row_iter_mut() {
            row += self.bias.transpose();
        }
        a.apply(|v| *v = sigmoid(*v));
        Ok(a)
    }

    /// Full prediction in physical units:
    /// `z_min + (z_max - z_min)/2 * (1 + W^T phi(x))`.
    pub fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let phi = self.hidden(x)?;
        let out = self.output_weights.tr_mul(&phi);
        Ok(self.output_bounds.denormalize(&out))
    }

    /// Analytical Jacobian `d predict / d x`, shape `d_out x d_in`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let phi = self.hidden(x)?;
        let half_out = self.output_bounds.span() * 0.5;
        let in_scale = self.input_bounds.span().map(|s| 2.0 / s);

        // d phi_i / d x_j = phi_i (1 - phi_i) Wr(j, i) * 2 / (x_max_j - x_min_j)
        let mut dphi = self.input_weights.transpose();
        for (i, mut row) in dphi.row_iter_mut().enumerate() {
            row *= phi[i] * (1.0 - phi[i]);
        }
        for (j, mut col) in dphi.column_iter_mut().enumerate() {
            col *= in_scale[j];
        }
        let mut jac = self.output_weights.tr_mul(&dphi);
        for (k, mut row) in jac.row_iter_mut().enumerate() {
            row *= half_out[k];
        }
        Ok(jac)
    }

    pub fn to_doc(&self) -> MatrixDoc {
        let mut doc = MatrixDoc::new(MODEL_KIND, MODEL_VERSION);
        doc.comment("single-hidden-layer extreme learning machine")
            .comment("predict(x) = z_min + (z_max - z_min)/2 * (1 + W^T sigmoid(Wr^T xn + b))")
            .comment("xn = 2 (x - x_min)/(x_max - x_min) - 1; matrices are row-major")
            .text("activation", self.activation.name())
            .text("rng", RNG_NAME)
            .int("seed", self.seed)
            .int("d_in", self.input_dim() as u64)
            .int("d_out", self.output_dim() as u64)
            .int("n_h", self.hidden_size() as u64)
            .int("trained", self.trained as u64)
            .matrix("input_weights", &self.input_weights)
            .vector("bias", &self.bias)
            .matrix("output_weights", &self.output_weights)
            .vector("x_min", self.input_bounds.lo())
            .vector("x_max", self.input_bounds.hi())
            .vector("z_min", self.output_bounds.lo())
            .vector("z_max", self.output_bounds.hi());
        doc
    }

    pub fn from_doc(doc: &MatrixDoc) -> Result<Self> {
        if doc.kind() != MODEL_KIND || doc.version() != MODEL_VERSION {
            return Err(Error::Data(format!(
                "expected `{MODEL_KIND} {MODEL_VERSION}`, found `{} {}`",
                doc.kind(),
                doc.version()
            )));
        }
        if doc.get_text("activation")? != Activation::Sigmoid.name() {
            return Err(Error::Data("only sigmoid activations are supported".into()));
        }
        let input_bounds = Bounds::new(doc.get_vector("x_min")?.clone(), doc.get_vector("x_max")?.clone())?;
        let output_bounds = Bounds::new(doc.get_vector("z_min")?.clone(), doc.get_vector("z_max")?.clone())?;
        let mut model = ElmModel::from_parts(
            doc.get_matrix("input_weights")?.clone(),
            doc.get_vector("bias")?.clone(),
            doc.get_matrix("output_weights")?.clone(),
            input_bounds,
            output_bounds,
            doc.get_int("seed")?,
        )?;
        let dims = (doc.get_int("d_in")?, doc.get_int("d_out")?, doc.get_int("n_h")?);
        if dims != (model.input_dim() as u64, model.output_dim() as u64, model.hidden_size() as u64) {
            return Err(Error::Data("declared dimensions disagree with stored matrices".into()));
        }
        model.trained = doc.get_int("trained")? != 0;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_doc().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_doc(&MatrixDoc::load(path)?)
    }
}

/// Splits a Jacobian taken with respect to `x = [u, z]` into the state
/// matrix `A` (last `n` columns) and the input matrix `B` (first `m`).
pub fn split_ab(jac: &DMatrix<f64>, n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if jac.ncols() != n + m || jac.nrows() != n {
        return Err(Error::Dimension(format!(
            "Jacobian is {}x{}, expected {n}x{}",
            jac.nrows(),
            jac.ncols(),
            n + m
        )));
    }
    let b = jac.columns(0, m).into_owned();
    let a = jac.columns(m, n).into_owned();
    Ok((a, b))
}
