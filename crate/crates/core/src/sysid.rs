//! NARX system identification with extreme learning machines.
//!
//! Sequences are stored as matrices with one cycle per row. For lag orders
//! `n_u`, `n_y` the regressor of target `y(k)` is
//! `[u(k-1), .., u(k-n_u), y(k-1), .., y(k-n_y)]`, flattened in that order.
//! With `n_u = n_y = 1` this is `[u(k-1), z(k-1)]`, the augmented input the
//! controller linearizes.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::elm::{init_elm, train_ridge, Bounds, ElmModel, RidgeProblem};
use crate::error::{ensure_finite, Error, Result};

/// Lag structure of a NARX model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NarxConfig {
    pub input_lags: usize,
    pub output_lags: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl NarxConfig {
    pub fn new(input_lags: usize, output_lags: usize, input_dim: usize, output_dim: usize) -> Result<Self> {
        if input_lags == 0 || output_lags == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(format!(
                "NARX orders and dimensions must be >= 1 (n_u={input_lags}, n_y={output_lags}, u_d={input_dim}, y_d={output_dim})"
            )));
        }
        Ok(NarxConfig {
            input_lags,
            output_lags,
            input_dim,
            output_dim,
        })
    }

    /// Equal input and output order.
    pub fn with_order(order: usize, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(order, order, input_dim, output_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.input_dim * self.input_lags + self.output_dim * self.output_lags
    }

    pub fn max_lag(&self) -> usize {
        self.input_lags.max(self.output_lags)
    }

    /// Regressor for target index `k`, reading lagged rows through the two
    /// accessors.
    fn regressor(
        &self,
        k: usize,
        u: impl Fn(usize, usize) -> f64,
        y: impl Fn(usize, usize) -> f64,
    ) -> DVector<f64> {
        let mut x = DVector::zeros(self.feature_dim());
        let mut c = 0;
        for lag in 1..=self.input_lags {
            for j in 0..self.input_dim {
                x[c] = u(k - lag, j);
                c += 1;
            }
        }
        for lag in 1..=self.output_lags {
            for j in 0..self.output_dim {
                x[c] = y(k - lag, j);
                c += 1;
            }
        }
        x
    }
}

/// Where a framed dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: String,
    /// Source index `k` of the first target row.
    pub first_target: usize,
    pub config: NarxConfig,
}

/// Framed regression data: `inputs` is `N x feature_dim`, `targets` is
/// `N x y_d`, and row `i` targets source index `origin.first_target + i`.
#[derive(Debug, Clone)]
pub struct NarxDataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub origin: Provenance,
}

impl NarxDataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_row(&self, i: usize) -> DVector<f64> {
        self.inputs.row(i).transpose()
    }
}

pub fn build_narx(u_seq: &DMatrix<f64>, y_seq: &DMatrix<f64>, cfg: &NarxConfig) -> Result<NarxDataset> {
    build_narx_from(u_seq, y_seq, cfg, "sequence")
}

pub fn build_narx_from(
    u_seq: &DMatrix<f64>,
    y_seq: &DMatrix<f64>,
    cfg: &NarxConfig,
    source: &str,
) -> Result<NarxDataset> {
    check_sequences(u_seq, y_seq, cfg)?;
    let t = u_seq.nrows();
    let lag = cfg.max_lag();
    if t <= lag {
        return Err(Error::Data(format!(
            "sequence of length {t} is too short for lag order {lag}"
        )));
    }
    let n = t - lag;
    let mut inputs = DMatrix::zeros(n, cfg.feature_dim());
    let mut targets = DMatrix::zeros(n, cfg.output_dim);
    for i in 0..n {
        let k = lag + i;
        let x = cfg.regressor(k, |r, c| u_seq[(r, c)], |r, c| y_seq[(r, c)]);
        inputs.set_row(i, &x.transpose());
        targets.set_row(i, &y_seq.row(k));
    }
    Ok(NarxDataset {
        inputs,
        targets,
        origin: Provenance {
            source: source.to_string(),
            first_target: lag,
            config: *cfg,
        },
    })
}

fn check_sequences(u_seq: &DMatrix<f64>, y_seq: &DMatrix<f64>, cfg: &NarxConfig) -> Result<()> {
    if u_seq.nrows() != y_seq.nrows() {
        return Err(Error::Data(format!(
            "input and output sequences differ in length ({} vs {})",
            u_seq.nrows(),
            y_seq.nrows()
        )));
    }
    if u_seq.ncols() != cfg.input_dim || y_seq.ncols() != cfg.output_dim {
        return Err(Error::Dimension(format!(
            "sequences have {}/{} channels, config expects {}/{}",
            u_seq.ncols(),
            y_seq.ncols(),
            cfg.input_dim,
            cfg.output_dim
        )));
    }
    ensure_finite(u_seq.iter().chain(y_seq.iter()), "sequence")
}

/// Amplitude-modulated PRBS: piecewise-constant levels with random holds.
#[derive(Debug, Clone, PartialEq)]
pub struct AprbsSpec {
    pub level_lo: Vec<f64>,
    pub level_hi: Vec<f64>,
    pub hold_min: usize,
    pub hold_max: usize,
    pub length: usize,
    pub seed: u64,
}

impl AprbsSpec {
    pub fn validate(&self) -> Result<()> {
        Bounds::from_slices(&self.level_lo, &self.level_hi)?;
        if self.hold_min == 0 || self.hold_min > self.hold_max {
            return Err(Error::Config(format!(
                "hold range [{}, {}] must satisfy 1 <= hold_min <= hold_max",
                self.hold_min, self.hold_max
            )));
        }
        if self.length == 0 {
            return Err(Error::Config("A-PRBS length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generates `length x u_d` excitation. Segments are shared across channels;
/// each segment draws its hold uniformly from `[hold_min, hold_max]` and then
/// one uniform level per channel. The final segment is cut at `length`.
pub fn gen_aprbs(spec: &AprbsSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let d = spec.level_lo.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hold = Uniform::new_inclusive(spec.hold_min, spec.hold_max).expect("validated hold range");
    let levels: Vec<Uniform<f64>> = (0..d)
        .map(|j| Uniform::new_inclusive(spec.level_lo[j], spec.level_hi[j]).expect("validated bounds"))
        .collect();

    let mut out = DMatrix::zeros(spec.length, d);
    let mut k = 0;
    while k < spec.length {
        let h = hold.sample(&mut rng);
        let level: Vec<f64> = levels.iter().map(|dist| dist.sample(&mut rng)).collect();
        let end = (k + h).min(spec.length);
        for r in k..end {
            for j in 0..d {
                out[(r, j)] = level[j];
            }
        }
        k = end;
    }
    Ok(out)
}

/// Multi-output RMSE `sqrt(sum_i sum_j (y_ij - yhat_ij)^2 / N)`, summing
/// over output channels inside a single `1/N`.
pub fn rmse(actual: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64> {
    if actual.shape() != predicted.shape() {
        return Err(Error::Dimension(format!(
            "RMSE operands are {:?} and {:?}",
            actual.shape(),
            predicted.shape()
        )));
    }
    if actual.nrows() == 0 {
        return Err(Error::Data("RMSE of an empty dataset".into()));
    }
    let sse: f64 = actual.iter().zip(predicted.iter()).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok((sse / actual.nrows() as f64).sqrt())
}

/// Maps physical outputs (one sample per row) onto the model's normalized
/// output scale.
pub fn normalize_outputs(model: &ElmModel, y: &DMatrix<f64>) -> DMatrix<f64> {
    let b = model.output_bounds();
    let mut out = y.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let (lo, hi) = (b.lo()[j], b.hi()[j]);
        col.apply(|v| *v = 2.0 * (*v - lo) / (hi - lo) - 1.0);
    }
    out
}

/// RMSE in the model's normalized output units.
pub fn normalized_rmse(model: &ElmModel, actual: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64> {
    if actual.ncols() != model.output_dim() {
        return Err(Error::Dimension("output channels do not match the model".into()));
    }
    rmse(&normalize_outputs(model, actual), &normalize_outputs(model, predicted))
}

fn check_model(model: &ElmModel, cfg: &NarxConfig) -> Result<()> {
    if model.input_dim() != cfg.feature_dim() || model.output_dim() != cfg.output_dim {
        return Err(Error::Dimension(format!(
            "model maps {} -> {}, NARX structure needs {} -> {}",
            model.input_dim(),
            model.output_dim(),
            cfg.feature_dim(),
            cfg.output_dim
        )));
    }
    Ok(())
}

/// One-step-ahead predictions, one per dataset row.
pub fn predict_osap(model: &ElmModel, data: &NarxDataset) -> Result<DMatrix<f64>> {
    check_model(model, &data.origin.config)?;
    let mut out = DMatrix::zeros(data.len(), model.output_dim());
    for i in 0..data.len() {
        let p = model.predict(&data.input_row(i))?;
        out.set_row(i, &p.transpose());
    }
    Ok(out)
}

/// One-step-ahead RMSE in normalized output units.
pub fn evaluate_osap(model: &ElmModel, data: &NarxDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict_osap(model, data)?;
    normalized_rmse(model, &data.targets, &pred)
}

/// Recurrent (parallel) rollout.
///
/// `u_hist` row `r` holds `u(k0 - n_u + r)`; `y_init` holds the `n_y`
/// outputs `y(k0 - n_y) .. y(k0 - 1)` in chronological order. Returns the
/// predictions of `y(k0) .. y(k0 + n_pred - 1)`, feeding each prediction
/// back as a lagged output.
pub fn rollout_msap(
    model: &ElmModel,
    cfg: &NarxConfig,
    u_hist: &DMatrix<f64>,
    y_init: &DMatrix<f64>,
    n_pred: usize,
) -> Result<DMatrix<f64>> {
    check_model(model, cfg)?;
    if y_init.nrows() < cfg.output_lags || y_init.ncols() != cfg.output_dim {
        return Err(Error::Data(format!(
            "initialization window must be at least {} x {}, got {} x {}",
            cfg.output_lags,
            cfg.output_dim,
            y_init.nrows(),
            y_init.ncols()
        )));
    }
    let needed = cfg.input_lags + n_pred.saturating_sub(1);
    if u_hist.nrows() < needed || u_hist.ncols() != cfg.input_dim {
        return Err(Error::Data(format!(
            "rollout of {n_pred} steps needs {needed} input rows of width {}, got {} x {}",
            cfg.input_dim,
            u_hist.nrows(),
            u_hist.ncols()
        )));
    }

    // Outputs in a buffer indexed like the source: buffer row b <-> y(k0 - n_y + b).
    let n_y = cfg.output_lags;
    let n_u = cfg.input_lags;
    let skip = y_init.nrows() - n_y;
    let mut ybuf = DMatrix::zeros(n_y + n_pred, cfg.output_dim);
    ybuf.rows_mut(0, n_y).copy_from(&y_init.rows(skip, n_y));

    let (u_d, y_d) = (cfg.input_dim, cfg.output_dim);
    let mut x = DVector::zeros(cfg.feature_dim());
    for step in 0..n_pred {
        // Regressor for y(k0 + step): u(k0 + step - lag) is u_hist row
        // n_u + step - lag, y(k0 + step - lag) is ybuf row n_y + step - lag.
        let mut c = 0;
        for lag in 1..=n_u {
            x.rows_mut(c, u_d).tr_copy_from(&u_hist.row(n_u + step - lag));
            c += u_d;
        }
        for lag in 1..=n_y {
            x.rows_mut(c, y_d).tr_copy_from(&ybuf.row(n_y + step - lag));
            c += y_d;
        }
        let p = model.predict(&x)?;
        ensure_finite(p.iter(), "rollout prediction")?;
        ybuf.set_row(n_y + step, &p.transpose());
    }
    Ok(ybuf.rows(n_y, n_pred).into_owned())
}

/// Rollout of `n_pred` steps starting at source index `start` of recorded
/// sequences, initialized from the measured outputs before `start`.
pub fn rollout_from_sequence(
    model: &ElmModel,
    cfg: &NarxConfig,
    u_seq: &DMatrix<f64>,
    y_seq: &DMatrix<f64>,
    start: usize,
    n_pred: usize,
) -> Result<DMatrix<f64>> {
    check_sequences(u_seq, y_seq, cfg)?;
    if start < cfg.max_lag() || start + n_pred > u_seq.nrows() {
        return Err(Error::Data(format!(
            "window [{start}, {}) does not fit a sequence of length {} with lag {}",
            start + n_pred,
            u_seq.nrows(),
            cfg.max_lag()
        )));
    }
    let u_hist = u_seq.rows(start - cfg.input_lags, cfg.input_lags + n_pred - 1).into_owned();
    let y_init = y_seq.rows(start - cfg.output_lags, cfg.output_lags).into_owned();
    rollout_msap(model, cfg, &u_hist, &y_init, n_pred)
}

/// Multi-step RMSE over consecutive non-overlapping windows of `horizon`
/// steps, each re-initialized from measured data. Normalized units.
pub fn evaluate_msap(
    model: &ElmModel,
    cfg: &NarxConfig,
    u_seq: &DMatrix<f64>,
    y_seq: &DMatrix<f64>,
    horizon: usize,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let lag = cfg.max_lag();
    let t = u_seq.nrows();
    if horizon == 0 || t < lag + horizon {
        return Err(Error::Data(format!(
            "horizon {horizon} is longer than the {} usable cycles",
            t.saturating_sub(lag)
        )));
    }
    let windows = (t - lag) / horizon;
    let mut actual = DMatrix::zeros(windows * horizon, cfg.output_dim);
    let mut predicted = DMatrix::zeros(windows * horizon, cfg.output_dim);
    for w in 0..windows {
        let start = lag + w * horizon;
        let p = rollout_from_sequence(model, cfg, u_seq, y_seq, start, horizon)?;
        predicted.rows_mut(w * horizon, horizon).copy_from(&p);
        actual.rows_mut(w * horizon, horizon).copy_from(&y_seq.rows(start, horizon));
    }
    let score = normalized_rmse(model, &actual, &predicted)?;
    Ok((score, actual, predicted))
}

/// Fits an ELM to a framed dataset. Normalization bounds come from the
/// dataset itself.
pub fn fit_elm(data: &NarxDataset, hidden: usize, lambda: f64, seed: u64) -> Result<ElmModel> {
    let xb = Bounds::from_rows(&data.inputs)?;
    let zb = Bounds::from_rows(&data.targets)?;
    let mut model = init_elm(data.inputs.ncols(), data.targets.ncols(), hidden, seed, xb, zb)?;
    let h = model.hidden_matrix(&data.inputs)?;
    let targets = normalize_outputs(&model, &data.targets);
    let w = train_ridge(&RidgeProblem::new(h, targets, lambda)?)?;
    model.set_output_weights(w)?;
    Ok(model)
}

/// Frames `u_seq`/`y_seq` with `cfg` and fits an ELM.
pub fn fit_narx(
    u_seq: &DMatrix<f64>,
    y_seq: &DMatrix<f64>,
    cfg: &NarxConfig,
    hidden: usize,
    lambda: f64,
    seed: u64,
) -> Result<ElmModel> {
    let data = build_narx(u_seq, y_seq, cfg)?;
    fit_elm(&data, hidden, lambda, seed)
}

/// One point of the hyperparameter grid. `order` sets `n_u = n_y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub hidden: usize,
    pub lambda: f64,
    pub order: usize,
}

impl Candidate {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.order == 0 || !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("invalid grid candidate {self:?}")));
        }
        Ok(())
    }

    /// Tie-break order: fewer neurons, then lower order, then stronger
    /// regularization.
    fn simpler_than(&self, other: &Candidate) -> bool {
        (self.hidden, self.order, -self.lambda) < (other.hidden, other.order, -other.lambda)
    }
}

/// Hyperparameter grid as a Cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub hidden: Vec<usize>,
    pub lambda: Vec<f64>,
    pub order: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            hidden: vec![10, 20, 40, 80],
            lambda: vec![1e-4, 1e-3, 1e-2, 1e-1],
            order: vec![1, 2],
        }
    }
}

impl Grid {
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::new();
        for &order in &self.order {
            for &hidden in &self.hidden {
                for &lambda in &self.lambda {
                    out.push(Candidate { hidden, lambda, order });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub candidate: Candidate,
    pub rmse: f64,
    /// Source rows used for fitting.
    pub fit_rows: Range<usize>,
    /// Source rows used for scoring.
    pub validation_rows: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub best: Candidate,
    pub table: Vec<ScoreRow>,
}

impl CvReport {
    pub fn best_row(&self) -> &ScoreRow {
        self.table
            .iter()
            .find(|r| r.candidate == self.best)
            .expect("best candidate is in the table")
    }
}

/// Chronological hold-out validation over `candidates`. The first
/// `split` fraction of the sequence fits each candidate; OSAP RMSE on the
/// remainder (framed separately, so no window straddles the cut) scores it.
/// Candidates are evaluated in parallel.
pub fn cross_validate(
    candidates: &[Candidate],
    u_seq: &DMatrix<f64>,
    y_seq: &DMatrix<f64>,
    split: f64,
    seed: u64,
) -> Result<CvReport> {
    if candidates.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    for c in candidates {
        c.validate()?;
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config(format!("split fraction {split} must lie in (0, 1)")));
    }
    if u_seq.nrows() != y_seq.nrows() {
        return Err(Error::Data("input and output sequences differ in length".into()));
    }
    let t = u_seq.nrows();
    let cut = (t as f64 * split).round() as usize;
    let fit_rows = 0..cut;
    let validation_rows = cut..t;
    let (u_fit, y_fit) = (u_seq.rows(0, cut).into_owned(), y_seq.rows(0, cut).into_owned());
    let (u_val, y_val) = (u_seq.rows(cut, t - cut).into_owned(), y_seq.rows(cut, t - cut).into_owned());

    let table = candidates
        .par_iter()
        .map(|c| -> Result<ScoreRow> {
            let cfg = NarxConfig::with_order(c.order, u_seq.ncols(), y_seq.ncols())?;
            let model = fit_narx(&u_fit, &y_fit, &cfg, c.hidden, c.lambda, seed)?;
            let val = build_narx_from(&u_val, &y_val, &cfg, "validation")?;
            Ok(ScoreRow {
                candidate: *c,
                rmse: evaluate_osap(&model, &val)?,
                fit_rows: fit_rows.clone(),
                validation_rows: validation_rows.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = &table[0];
    for row in &table[1..] {
        if row.rmse < best.rmse || (row.rmse == best.rmse && row.candidate.simpler_than(&best.candidate)) {
            best = row;
        }
    }
    Ok(CvReport {
        best: best.candidate,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn engine_feature_dimension() {
        let cfg = NarxConfig::with_order(1, 3, 6).unwrap();
        assert_eq!(cfg.feature_dim(), 9);
        let u = DMatrix::from_fn(5, 3, |i, j| (10 * i + j) as f64);
        let y = DMatrix::from_fn(5, 6, |i, j| (100 * i + j) as f64);
        let d = build_narx(&u, &y, &cfg).unwrap();
        // Row for k = 1: [u(0), y(0)]
        let row: Vec<f64> = d.inputs.row(0).iter().cloned().collect();
        assert_eq!(row, vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn framing_count() {
        let cfg = NarxConfig::with_order(1, 1, 1).unwrap();
        let s = DMatrix::from_fn(10, 1, |i, _| i as f64);
        assert_eq!(build_narx(&s, &s, &cfg).unwrap().len(), 9);
    }

    #[test]
    fn framing_manual_example() {
        let cfg = NarxConfig::with_order(1, 1, 1).unwrap();
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DMatrix::from_column_slice(3, 1, &[10.0, 20.0, 30.0]);
        let d = build_narx(&u, &y, &cfg).unwrap();
        assert_eq!(d.inputs, DMatrix::from_row_slice(2, 2, &[1.0, 10.0, 2.0, 20.0]));
        assert_eq!(d.targets, DMatrix::from_row_slice(2, 1, &[20.0, 30.0]));
    }

    #[test]
    fn framing_lag_order_and_short_sequences() {
        let cfg = NarxConfig::new(2, 3, 1, 1).unwrap();
        let u = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let y = DMatrix::from_fn(6, 1, |i, _| 10.0 * i as f64);
        let d = build_narx(&u, &y, &cfg).unwrap();
        assert_eq!(d.len(), 3);
        // k = 3: [u(2), u(1), y(2), y(1), y(0)]
        let row: Vec<f64> = d.inputs.row(0).iter().cloned().collect();
        assert_eq!(row, vec![2.0, 1.0, 20.0, 10.0, 0.0]);
        assert!(matches!(
            build_narx(&u.rows(0, 3).into_owned(), &y.rows(0, 3).into_owned(), &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rmse_examples() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let e = 0.3;
        let shifted = a.map(|v| v + e);
        assert_relative_eq!(rmse(&a, &shifted).unwrap(), e * 2f64.sqrt(), max_relative = 1e-12);
        let y = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
        let p = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        assert_relative_eq!(rmse(&y, &p).unwrap(), (5.0f64 / 2.0).sqrt(), max_relative = 1e-15);
        assert!(matches!(
            rmse(&DMatrix::zeros(0, 1), &DMatrix::zeros(0, 1)),
            Err(Error::Data(_))
        ));
    }

    fn spec(seed: u64) -> AprbsSpec {
        AprbsSpec {
            level_lo: vec![19.0, -121.0, 272.0],
            level_hi: vec![25.0, -100.0, 375.0],
            hold_min: 5,
            hold_max: 30,
            length: 2000,
            seed,
        }
    }

    #[test]
    fn aprbs_bounded_deterministic_and_held() {
        let s = spec(7);
        let a = gen_aprbs(&s).unwrap();
        let b = gen_aprbs(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (2000, 3));
        for j in 0..3 {
            assert!(a.column(j).iter().all(|&v| v >= s.level_lo[j] && v <= s.level_hi[j]));
        }
        // Segment lengths (all but the truncated last one) fall in the hold range.
        let mut runs = Vec::new();
        let mut start = 0;
        for k in 1..a.nrows() {
            if a.row(k) != a.row(k - 1) {
                runs.push(k - start);
                start = k;
            }
        }
        assert!(!runs.is_empty());
        assert!(runs.iter().all(|&r| (5..=30).contains(&r)), "{runs:?}");
        assert!(a.nrows() - start <= 30);
    }

    #[test]
    fn aprbs_unit_hold_changes_every_cycle() {
        let mut s = spec(3);
        s.hold_min = 1;
        s.hold_max = 1;
        s.length = 50;
        let a = gen_aprbs(&s).unwrap();
        assert!((1..50).all(|k| a.row(k) != a.row(k - 1)));
    }

    #[test]
    fn aprbs_rejects_bad_specs() {
        let mut s = spec(1);
        s.hold_min = 0;
        assert!(gen_aprbs(&s).is_err());
        let mut s = spec(1);
        s.hold_min = 10;
        s.hold_max = 5;
        assert!(gen_aprbs(&s).is_err());
        let mut s = spec(1);
        s.level_hi[0] = s.level_lo[0];
        assert!(gen_aprbs(&s).is_err());
    }

    fn linear_plant(len: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let u = gen_aprbs(&AprbsSpec {
            level_lo: vec![-1.0],
            level_hi: vec![1.0],
            hold_min: 1,
            hold_max: 8,
            length: len,
            seed,
        })
        .unwrap();
        let mut y = DMatrix::zeros(len, 1);
        for k in 1..len {
            y[(k, 0)] = 0.5 * y[(k - 1, 0)] + 0.3 * u[(k - 1, 0)];
        }
        (u, y)
    }

    #[test]
    fn msap_one_step_equals_osap_bitwise() {
        let (u, y) = linear_plant(300, 5);
        let cfg = NarxConfig::new(2, 1, 1, 1).unwrap();
        let model = fit_narx(&u, &y, &cfg, 15, 1e-6, 11).unwrap();
        let data = build_narx(&u, &y, &cfg).unwrap();
        let osap = predict_osap(&model, &data).unwrap();
        for i in [0usize, 17, 150, data.len() - 1] {
            let k = data.origin.first_target + i;
            let p = rollout_from_sequence(&model, &cfg, &u, &y, k, 1).unwrap();
            assert_eq!(p[(0, 0)].to_bits(), osap[(i, 0)].to_bits());
        }
    }

    #[test]
    fn rollout_rejects_short_windows() {
        let (u, y) = linear_plant(50, 2);
        let cfg = NarxConfig::with_order(2, 1, 1).unwrap();
        let model = fit_narx(&u, &y, &cfg, 5, 1e-3, 1).unwrap();
        let short = DMatrix::zeros(1, 1);
        assert!(rollout_msap(&model, &cfg, &u, &short, 3).is_err());
        assert!(rollout_msap(&model, &cfg, &u.rows(0, 2).into_owned(), &y.rows(0, 2).into_owned(), 5).is_err());
    }

    #[test]
    fn osap_rejects_empty_and_mismatched() {
        let (u, y) = linear_plant(40, 2);
        let cfg = NarxConfig::with_order(1, 1, 1).unwrap();
        let model = fit_narx(&u, &y, &cfg, 5, 1e-3, 1).unwrap();
        let mut data = build_narx(&u, &y, &cfg).unwrap();
        let cfg2 = NarxConfig::with_order(2, 1, 1).unwrap();
        let data2 = build_narx(&u, &y, &cfg2).unwrap();
        assert!(matches!(evaluate_osap(&model, &data2), Err(Error::Dimension(_))));
        data.inputs = DMatrix::zeros(0, 2);
        data.targets = DMatrix::zeros(0, 1);
        assert!(matches!(evaluate_osap(&model, &data), Err(Error::Data(_))));
    }

    #[test]
    fn cross_validation_single_candidate_and_disjoint_rows() {
        let (u, y) = linear_plant(400, 9);
        let c = Candidate { hidden: 10, lambda: 1e-3, order: 1 };
        let rep = cross_validate(&[c], &u, &y, 0.7, 3).unwrap();
        assert_eq!(rep.best, c);
        let row = rep.best_row();
        assert_eq!(row.fit_rows, 0..280);
        assert_eq!(row.validation_rows, 280..400);
        assert!(row.fit_rows.end <= row.validation_rows.start);
    }

    #[test]
    fn cross_validation_returns_table_argmin() {
        let (u, y) = linear_plant(600, 4);
        let grid = Grid {
            hidden: vec![3, 12],
            lambda: vec![1e-4, 1.0],
            order: vec![1, 2],
        };
        let rep = cross_validate(&grid.candidates(), &u, &y, 0.7, 1).unwrap();
        assert_eq!(rep.table.len(), 8);
        let min = rep.table.iter().map(|r| r.rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(rep.best_row().rmse, min);
    }

    #[test]
    fn cross_validation_tie_break_prefers_simpler() {
        let a = Candidate { hidden: 20, lambda: 1e-3, order: 1 };
        let b = Candidate { hidden: 20, lambda: 1e-2, order: 1 };
        let c = Candidate { hidden: 10, lambda: 1e-4, order: 2 };
        assert!(b.simpler_than(&a));
        assert!(c.simpler_than(&a));
        assert!(!a.simpler_than(&a));
    }

    #[test]
    fn cross_validation_rejects_invalid_grids() {
        let (u, y) = linear_plant(100, 4);
        assert!(matches!(cross_validate(&[], &u, &y, 0.7, 0), Err(Error::Config(_))));
        let bad = Candidate { hidden: 0, lambda: 1e-3, order: 1 };
        assert!(matches!(cross_validate(&[bad], &u, &y, 0.7, 0), Err(Error::Config(_))));
        let ok = Candidate { hidden: 4, lambda: 1e-3, order: 1 };
        assert!(matches!(cross_validate(&[ok], &u, &y, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn default_grid_contains_selected_engine_model() {
        let cands = Grid::default().candidates();
        assert_eq!(cands.len(), 32);
        assert!(cands.contains(&Candidate { hidden: 20, lambda: 0.001, order: 1 }));
    }

    proptest! {
        #[test]
        fn framing_rows_reconstruct_from_origin(
            t in 4usize..30,
            n_u in 1usize..4,
            n_y in 1usize..4,
            seed in 0u64..100,
        ) {
            prop_assume!(t > n_u.max(n_y));
            let u = DMatrix::from_fn(t, 2, |i, j| (seed as f64) + i as f64 * 1.5 + j as f64 * 0.25);
            let y = DMatrix::from_fn(t, 3, |i, j| -(i as f64) * 2.0 + j as f64 * 0.125);
            let cfg = NarxConfig::new(n_u, n_y, 2, 3).unwrap();
            let d = build_narx(&u, &y, &cfg).unwrap();
            prop_assert_eq!(d.len(), t - n_u.max(n_y));
            for i in 0..d.len() {
                let k = d.origin.first_target + i;
                let mut expect = Vec::new();
                for lag in 1..=n_u { expect.extend(u.row(k - lag).iter().cloned()); }
                for lag in 1..=n_y { expect.extend(y.row(k - lag).iter().cloned()); }
                let row: Vec<f64> = d.inputs.row(i).iter().cloned().collect();
                prop_assert_eq!(row, expect);
                prop_assert_eq!(d.targets.row(i), y.row(k));
            }
        }

        #[test]
        fn rmse_is_permutation_invariant(
            values in proptest::collection::vec(-5.0f64..5.0, 12),
            shift in 0usize..6,
        ) {
            let a = DMatrix::from_row_slice(6, 2, &values);
            let b = a.map(|v| v.sin());
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let pa = DMatrix::from_fn(6, 2, |i, j| a[(perm[i], j)]);
            let pb = DMatrix::from_fn(6, 2, |i, j| b[(perm[i], j)]);
            let r1 = rmse(&a, &b).unwrap();
            let r2 = rmse(&pa, &pb).unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-12 * (1.0 + r1));
        }
    }
}
