//! Acceptance criteria. Runs as a plain binary so every criterion prints a
//! pass/fail line; exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elm_mpc::commands::{cmd_eval, cmd_gen_data, cmd_simulate, cmd_train, SavedModel};
use elm_mpc::config::{FixedParams, RunConfig, Scenario};
use elm_mpc::elm::{init_elm, train_ridge, Bounds, ElmModel, RidgeProblem};
use elm_mpc::mpc::{build_prediction_with, HCCI_DU_MAX, HCCI_U_MAX, HCCI_U_MIN, RMAX_STATE};
use elm_mpc::plant::SimulationTrace;
use elm_mpc::qp::{solve_fast, solve_oracle, KktResiduals, QpOptions, QpProblem};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..=scale))
}

fn rand_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..=scale))
}

fn random_model(rng: &mut ChaCha8Rng) -> ElmModel {
    let d_in = rng.random_range(1..=10);
    let d_out = rng.random_range(1..=6);
    let n_h = rng.random_range(1..=80);
    let bounds = |rng: &mut ChaCha8Rng, d: usize| {
        let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..100.0)).collect();
        Bounds::from_slices(&lo, &hi).unwrap()
    };
    let xb = bounds(rng, d_in);
    let zb = bounds(rng, d_out);
    let base = init_elm(d_in, d_out, n_h, rng.random(), xb.clone(), zb.clone()).unwrap();
    let w = rand_matrix(rng, n_h, d_out, 1.0);
    ElmModel::from_parts(base.input_weights().clone(), base.bias().clone(), w, xb, zb, base.seed()).unwrap()
}

/// Central differences refined by one Richardson step.
fn fd_jacobian(model: &ElmModel, x: &DVector<f64>) -> DMatrix<f64> {
    let span = model.input_bounds().span();
    let mut j = DMatrix::zeros(model.output_dim(), x.len());
    for c in 0..x.len() {
        let central = |h: f64| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            (model.predict(&xp).unwrap() - model.predict(&xm).unwrap()) / (2.0 * h)
        };
        let h = 1e-3 * span[c];
        let d = (central(h / 2.0) * 4.0 - central(h)) / 3.0;
        j.set_column(c, &d);
    }
    j
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let b = model.input_bounds();
        let x = DVector::from_fn(model.input_dim(), |i, _| {
            let t: f64 = rng.random_range(-0.2..1.2);
            b.lo()[i] + t * (b.hi()[i] - b.lo()[i])
        });
        let analytic = model.jacobian(&x).unwrap();
        let numeric = fd_jacobian(&model, &x);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let err = if n.abs() < 1e-10 { (a - n).abs() } else { (a - n).abs() / n.abs() };
            worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("max entrywise relative error {worst:.2e} over 100 models in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst_res: f64 = 0.0;
    let mut perturb_failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(10..=500);
        let n_h = rng.random_range(1..=80);
        let d_in = rng.random_range(1..=9);
        let d_out = rng.random_range(1..=6);
        let xb = Bounds::from_slices(&vec![-1.0; d_in], &vec![1.0; d_in]).unwrap();
        let zb = Bounds::from_slices(&vec![-1.0; d_out], &vec![1.0; d_out]).unwrap();
        let model = init_elm(d_in, d_out, n_h, rng.random(), xb, zb).unwrap();
        let x = rand_matrix(&mut rng, n, d_in, 1.0);
        let h = model.hidden_matrix(&x).unwrap();
        let y = rand_matrix(&mut rng, n, d_out, 1.0);
        let lambda = 10f64.powf(rng.random_range(-4.0..=0.0));
        let w = train_ridge(&RidgeProblem::new(h.clone(), y.clone(), lambda).unwrap()).unwrap();

        let gram = h.transpose() * &h + DMatrix::identity(n_h, n_h) * lambda;
        let rhs = h.transpose() * &y;
        let res = (&gram * &w - &rhs).amax() / rhs.amax().max(1.0);
        worst_res = worst_res.max(res);

        // Exact change of ||HW - Y||^2 + lambda ||W||^2 under W_ij += d.
        let r = &h * &w - &y;
        let g = h.transpose() * &r;
        for _ in 0..10 {
            let i = rng.random_range(0..n_h);
            let j = rng.random_range(0..d_out);
            let col = h.column(i).norm_squared();
            for d in [1e-3, -1e-3] {
                let delta = 2.0 * d * g[(i, j)] + d * d * col + lambda * (2.0 * d * w[(i, j)] + d * d);
                if delta < 0.0 {
                    perturb_failures += 1;
                }
            }
        }
    }
    check(
        worst_res <= 1e-8 && perturb_failures == 0,
        format!("max normal-equation residual {worst_res:.2e}, {perturb_failures} objective decreases under +/-1e-3 perturbations"),
    )
}

fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let d = rng.random_range(1..=4);
    let q = rng.random_range(0..=10);
    let m = rand_matrix(rng, d, d, 1.0);
    let hess = m.transpose() * &m + DMatrix::identity(d, d);
    let hess = (&hess + hess.transpose()) * 0.5;
    let f = rand_vector(rng, d, 5.0);
    let a = rand_matrix(rng, q, d, 1.0);
    let x_feas = rand_vector(rng, d, 1.0);
    let slack = DVector::from_fn(q, |_, _| rng.random_range(0.0..1.0));
    let b = &a * &x_feas + slack;
    QpProblem::new(hess, f, a, b).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let (mut obj_gap, mut x_gap, mut kkt): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..1000 {
        let p = random_qp(&mut rng);
        let fast = solve_fast(&p, &QpOptions::default()).unwrap();
        let exact = solve_oracle(&p).unwrap();
        obj_gap = obj_gap.max((p.objective(&fast.x) - p.objective(&exact.x)).abs());
        x_gap = x_gap.max((&fast.x - &exact.x).amax());
        kkt = kkt.max(KktResiduals::evaluate(&p, &fast.x, &fast.lambda).max());
    }
    let elapsed = start.elapsed();
    check(
        obj_gap <= 1e-6 && x_gap <= 1e-4 && kkt <= 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "1000 QPs: objective gap {obj_gap:.2e}, x gap {x_gap:.2e}, KKT {kkt:.2e} in {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=3);
        let p = rng.random_range(1..=3);
        let ny = rng.random_range(1..=6);
        let nu = rng.random_range(1..=ny);
        let a = rand_matrix(&mut rng, n, n, 1.2 / (n as f64).sqrt());
        let b = rand_matrix(&mut rng, n, m, 1.0);
        let c = rand_matrix(&mut rng, p, n, 1.0);
        let d1 = rand_vector(&mut rng, n, 1.0);
        let d2 = rand_vector(&mut rng, p, 1.0);
        let z = rand_vector(&mut rng, n, 1.0);
        let u_prev = rand_vector(&mut rng, m, 1.0);
        let du = rand_vector(&mut rng, nu * m, 1.0);

        let pred = build_prediction_with(&a, &b, &c, ny, nu).unwrap();
        let condensed = pred.predict(&z, &du, &u_prev, &d1, &d2);

        let mut state = z.clone();
        let mut u = u_prev.clone();
        let mut recursion = DVector::zeros(ny * p);
        for i in 0..ny {
            if i < nu {
                u += du.rows(i * m, m);
            }
            state = &a * &state + &b * &u + &d1;
            recursion.rows_mut(i * p, p).copy_from(&(&c * &state + &d2));
        }
        worst = worst.max((condensed - &recursion).amax() / recursion.amax().max(1.0));
    }
    check(worst <= 1e-10, format!("max deviation {worst:.2e} over 200 systems"))
}

/// Pipeline artifacts shared by criteria 5 to 8.
struct Pipeline {
    cfg: RunConfig,
    _dir: tempfile::TempDir,
}

fn pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new();
    cfg.out_dir = dir.path().to_path_buf();
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    Pipeline { cfg, _dir: dir }
}

fn criterion_5(pl: &Pipeline) -> Outcome {
    let (m, _) = cmd_eval(&pl.cfg).map_err(|e| e.to_string())?;
    let saved = SavedModel::load(&pl.cfg.out_dir.join("model.txt")).unwrap();
    check(
        m.osap_rmse <= 0.05 && m.msap_rmse <= 1.5 * m.osap_rmse,
        format!(
            "model n_h={} order={}: OSAP {:.4}, MSAP(600) {:.4} = {:.2} x OSAP",
            saved.model.hidden_size(),
            saved.narx.input_lags,
            m.osap_rmse,
            m.msap_rmse,
            m.msap_rmse / m.osap_rmse
        ),
    )
}

fn simulate(pl: &Pipeline, scenario: Scenario) -> Result<(SimulationTrace, usize), String> {
    let mut cfg = pl.cfg.clone();
    cfg.simulate.scenario = scenario;
    let out = cmd_simulate(&cfg).map_err(|e| e.to_string())?;
    Ok((out.trace, out.controller.ny))
}

/// Input and increment violations against the engine limits, counting the
/// first move from the mid-range input.
fn input_violations(trace: &SimulationTrace) -> usize {
    let mut prev = DVector::from_fn(3, |i, _| 0.5 * (HCCI_U_MIN[i] + HCCI_U_MAX[i]));
    let mut bad = 0;
    for row in &trace.rows {
        let u = &row.input;
        let ok = (0..3).all(|i| {
            u[i] >= HCCI_U_MIN[i] - 1e-9
                && u[i] <= HCCI_U_MAX[i] + 1e-9
                && (u[i] - prev[i]).abs() <= HCCI_DU_MAX[i] + 1e-9
        });
        bad += usize::from(!ok);
        prev = u.clone();
    }
    bad
}

/// Cycles from each reference change on channel `c` until the output
/// enters and stays within 5% of the step, up to `preview` cycles before
/// the next change.
fn settling_times(trace: &SimulationTrace, c: usize, preview: usize) -> Vec<Option<usize>> {
    let r: Vec<f64> = trace.rows.iter().map(|row| row.reference[c]).collect();
    let y: Vec<f64> = trace.rows.iter().map(|row| row.state[trace.outputs[c]]).collect();
    let mut changes: Vec<usize> = (1..r.len()).filter(|&k| r[k] != r[k - 1]).collect();
    changes.push(r.len());
    changes
        .windows(2)
        .map(|w| {
            let (start, end) = (w[0], w[1]);
            let tol = 0.05 * (r[start] - r[start - 1]).abs();
            let stop = if end == r.len() { end } else { end - preview };
            (start..stop).find(|&t| (t..stop).all(|k| (y[k] - r[start]).abs() <= tol)).map(|t| t - start)
        })
        .collect()
}

fn criterion_6(pl: &Pipeline) -> Outcome {
    let (trace, ny) = simulate(pl, Scenario::Step)?;
    let settle = settling_times(&trace, 0, ny);
    let worst = settle.iter().map(|s| s.map_or(usize::MAX, |v| v)).max().unwrap_or(usize::MAX);
    let violations = input_violations(&trace);
    check(
        !settle.is_empty() && worst <= 30 && violations == 0,
        format!(
            "{} IMEP steps, settling {:?} cycles, {violations}/{} cycles violate input or rate limits",
            settle.len(),
            settle,
            trace.len()
        ),
    )
}

/// Cycles at least 30 after the latest reference change.
fn post_transient(trace: &SimulationTrace) -> Vec<usize> {
    let mut last = 0;
    let mut keep = Vec::new();
    for k in 0..trace.len() {
        if k > 0 && trace.rows[k].reference != trace.rows[k - 1].reference {
            last = k;
        }
        if k - last >= 30 {
            keep.push(k);
        }
    }
    keep
}

fn criterion_7(pl: &Pipeline) -> Outcome {
    let over = |trace: &SimulationTrace| {
        let cycles = post_transient(trace);
        let n = cycles.iter().filter(|&&k| trace.rows[k].state[RMAX_STATE] > 3.55).count();
        (n, cycles.len())
    };
    let (constrained, _) = simulate(pl, Scenario::StepRmaxConstrained)?;
    let (free, _) = simulate(pl, Scenario::Step)?;
    let (c_over, c_len) = over(&constrained);
    let (f_over, f_len) = over(&free);
    let frac = 1.0 - c_over as f64 / c_len.max(1) as f64;
    check(
        c_len > 0 && frac >= 0.99 && f_over > 0,
        format!(
            "R_max <= 3.55 in {:.1}% of {c_len} post-transient cycles (unconstrained: {f_over}/{f_len} above)",
            100.0 * frac
        ),
    )
}

fn criterion_8(pl: &Pipeline) -> Outcome {
    let (trace, _) = simulate(pl, Scenario::Sinusoid)?;
    let mae = trace.rows.iter().map(|r| (r.state[0] - r.reference[0]).abs()).sum::<f64>() / trace.len() as f64;
    let violations = input_violations(&trace);
    check(
        mae <= 0.1 && violations == 0,
        format!("IMEP MAE {mae:.4} bar, {violations} constraint violations"),
    )
}

fn criterion_9() -> Outcome {
    let count = |m: &ElmModel| m.input_weights().len() + m.bias().len() + m.output_weights().len();
    let fresh = init_elm(
        9,
        6,
        20,
        0,
        Bounds::from_slices(&[0.0; 9], &[1.0; 9]).unwrap(),
        Bounds::from_slices(&[0.0; 6], &[1.0; 6]).unwrap(),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new();
    cfg.out_dir = dir.path().to_path_buf();
    cfg.gen_data.train_length = 2000;
    cfg.train.fixed = Some(FixedParams {
        hidden: 20,
        lambda: 1e-3,
        order: 1,
    });
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let trained = SavedModel::load(&dir.path().join("model.txt")).unwrap().model;
    let formula = 20 * (9 + 6) + 20;
    check(
        formula == 320
            && [count(&fresh), fresh.parameter_count(), count(&trained), trained.parameter_count()]
                .iter()
                .all(|&c| c == 320),
        format!(
            "9 -> 6 with n_h = 20 stores {} parameters ({} after training)",
            count(&fresh),
            count(&trained)
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new();
        cfg.out_dir = dir.path().to_path_buf();
        cmd_gen_data(&cfg).unwrap();
        cmd_train(&cfg).unwrap();
        cmd_simulate(&cfg).unwrap();
        (csv_files(dir.path()), dir)
    };
    let (a, _da) = run();
    let (b, _db) = run();
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        a.len() == b.len() && a.len() >= 8 && differing.is_empty(),
        format!("{} CSV files compared ({}), {} differ", a.len(), names.join(", "), differing.len()),
    )
}

fn main() {
    let start = Instant::now();
    let pl = pipeline();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 jacobian vs finite differences", criterion_1()),
        ("2 ridge normal equations", criterion_2()),
        ("3 dual ascent vs active-set oracle", criterion_3()),
        ("4 condensed prediction vs recursion", criterion_4()),
        ("5 identification accuracy", criterion_5(&pl)),
        ("6 step tracking", criterion_6(&pl)),
        ("7 R_max constraint", criterion_7(&pl)),
        ("8 sinusoid tracking", criterion_8(&pl)),
        ("9 parameter count", criterion_9()),
        ("10 end-to-end determinism", criterion_10()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS  criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
