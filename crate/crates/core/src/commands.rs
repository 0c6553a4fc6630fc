//! The four pipeline stages behind the `elm-mpc` subcommands.
//!
//! Every command reads a [`RunConfig`], writes into `out_dir`, and returns
//! the paths it produced. Every output starts with `#` provenance lines:
//! tool version, command, config hash, seeds and the SHA-256 of each input
//! artifact.
//!
//! File layout under `out_dir`:
//!
//! | command | files |
//! |---------|-------|
//! | gen-data | `{train,test,msap}_excitation.csv`, `{train,test,msap}_response.csv` |
//! | train | `model.txt`, `scores.csv` |
//! | eval | `metrics.txt`, `osap_predictions.csv`, `msap_predictions.csv` |
//! | simulate | `trace_<scenario>.csv`, `summary_<scenario>.txt` |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, PlantKind, RunConfig, Scenario, Split};
use crate::elm::ElmModel;
use crate::error::{Error, Result};
use crate::matrix_io::MatrixDoc;
use crate::mpc::{MpcConfig, RMAX_STATE};
use crate::plant::{
    self, exceedances, make_reference, mid_input, run_closed_loop, summarize, ClosedLoopOptions, Plant,
    ReferenceKind, RunStatus, SimulationTrace, SyntheticPlant, INPUTS, INPUT_NAMES, STATES,
};
use crate::sysid::{
    build_narx, cross_validate, evaluate_msap, fit_narx, gen_aprbs, normalize_outputs, normalized_rmse,
    predict_osap, AprbsSpec, NarxConfig,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Cycles after a reference change excluded from post-transient checks.
pub const TRANSIENT_CYCLES: usize = 30;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// `key = value` provenance lines shared by all outputs of one command.
pub fn provenance(cfg: &RunConfig, command: &str, extra: &[(String, String)]) -> Vec<String> {
    let mut lines = vec![
        format!("version = elm-mpc {VERSION}"),
        format!("command = {command}"),
        format!("config_sha256 = {}", cfg.hash()),
        format!("seed = {}", cfg.seed),
    ];
    lines.extend(extra.iter().map(|(k, v)| format!("{k} = {v}")));
    lines
}

fn input_artifact(path: &Path) -> Result<(String, String)> {
    let name = path.file_name().map_or("input".into(), |n| n.to_string_lossy().into_owned());
    Ok((format!("input {name} sha256"), sha256_file(path)?))
}

fn create_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

/// Writes `data` with a leading `cycle` column.
pub fn write_table(path: &Path, comments: &[String], header: &[&str], data: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["cycle"];
    head.extend_from_slice(header);
    w.write_record(&head)?;
    for k in 0..data.nrows() {
        let mut rec = vec![k.to_string()];
        rec.extend(data.row(k).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_table`], skipping `#` lines and the
/// `cycle` column. Returns the remaining header and the data.
pub fn read_table(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let skip = usize::from(header.first().map(String::as_str) == Some("cycle"));
    let cols = header.len() - skip;
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter().skip(skip) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}: `{field}` is not a number", path.display())))?;
            values.push(v);
        }
        rows += 1;
    }
    if values.len() != rows * cols {
        return Err(Error::Data(format!("{}: ragged rows", path.display())));
    }
    Ok((header[skip..].to_vec(), DMatrix::from_row_slice(rows, cols, &values)))
}

fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}_excitation.csv", split.name())),
        dir.join(format!("{}_response.csv", split.name())),
    )
}

/// Loads a split; the excitation and response must agree in length.
pub fn read_split(dir: &Path, split: Split) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<(String, String)>)> {
    let (ue, ye) = split_paths(dir, split);
    let (_, u) = read_table(&ue)?;
    let (_, y) = read_table(&ye)?;
    if u.nrows() != y.nrows() {
        return Err(Error::Data(format!(
            "{} split: {} excitation rows but {} response rows",
            split.name(),
            u.nrows(),
            y.nrows()
        )));
    }
    Ok((u, y, vec![input_artifact(&ue)?, input_artifact(&ye)?]))
}

/// Trained model plus its NARX lags.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: ElmModel,
    pub narx: NarxConfig,
    pub lambda: f64,
}

impl SavedModel {
    pub fn to_doc(&self, comments: &[String]) -> MatrixDoc {
        let mut doc = self.model.to_doc();
        for c in comments {
            doc.comment(c.clone());
        }
        doc.int("input_lags", self.narx.input_lags as u64)
            .int("output_lags", self.narx.output_lags as u64)
            .int("input_channels", self.narx.input_dim as u64)
            .int("output_channels", self.narx.output_dim as u64)
            .scalar("lambda", self.lambda);
        doc
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = MatrixDoc::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("cannot read model {}: {io}", path.display())),
            e => e,
        })?;
        let model = ElmModel::from_doc(&doc)?;
        let narx = NarxConfig::new(
            doc.get_int("input_lags")? as usize,
            doc.get_int("output_lags")? as usize,
            doc.get_int("input_channels")? as usize,
            doc.get_int("output_channels")? as usize,
        )?;
        if narx.feature_dim() != model.input_dim() || narx.output_dim != model.output_dim() {
            return Err(Error::Data("model lags disagree with its dimensions".into()));
        }
        if !model.is_trained() {
            return Err(Error::Untrained);
        }
        Ok(SavedModel {
            model,
            narx,
            lambda: doc.get_scalar("lambda")?,
        })
    }
}

/// Drives the configured plant open-loop with one A-PRBS per split.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let g = &cfg.gen_data;
    let (plant, mut extra) = match g.plant {
        PlantKind::Synthetic => (Plant::Synthetic(SyntheticPlant::default()), vec![]),
        PlantKind::Model => {
            let path = cfg.model_path(&g.model);
            let saved = SavedModel::load(&path)?;
            require_state_space(&saved)?;
            (Plant::Elm(saved.model), vec![input_artifact(&path)?])
        }
    };
    if g.level_lo.len() != plant.inputs() {
        return Err(Error::Config(format!("A-PRBS needs {} level bounds", plant.inputs())));
    }
    for split in Split::ALL {
        AprbsSpec {
            level_lo: g.level_lo.clone(),
            level_hi: g.level_hi.clone(),
            hold_min: g.hold_min,
            hold_max: g.hold_max,
            length: g.length(split),
            seed: 0,
        }
        .validate()?;
    }
    create_out_dir(cfg)?;

    let mid = DVector::from_fn(plant.inputs(), |i, _| 0.5 * (g.level_lo[i] + g.level_hi[i]));
    let seed_state = match &plant {
        Plant::Synthetic(p) => DVector::from_row_slice(&p.center),
        Plant::Elm(m) => (m.output_bounds().lo() + m.output_bounds().hi()) * 0.5,
    };
    let z0 = plant.steady_state(&seed_state, &mid)?;
    extra.push(("plant".into(), format!("{:?}", g.plant).to_lowercase()));
    extra.push(("hold_range".into(), format!("[{}, {}]", g.hold_min, g.hold_max)));
    extra.push(("level_lo".into(), format!("{:?}", g.level_lo)));
    extra.push(("level_hi".into(), format!("{:?}", g.level_hi)));

    let mut written = Vec::new();
    for split in Split::ALL {
        let spec = AprbsSpec {
            level_lo: g.level_lo.clone(),
            level_hi: g.level_hi.clone(),
            hold_min: g.hold_min,
            hold_max: g.hold_max,
            length: g.length(split),
            seed: derive_seed(cfg.seed, &format!("aprbs-{}", split.name())),
        };
        let u = gen_aprbs(&spec)?;
        let mut y = plant.simulate(&z0, &u)?;
        let noisy = cfg.noise.enabled && g.noisy_splits.contains(&split);
        let noise_seed = derive_seed(cfg.seed, &format!("noise-{}", split.name()));
        if noisy {
            let noise = cfg.noise.spec(noise_seed)?;
            let mut rng = noise.rng();
            for k in 0..y.nrows() {
                let m = noise.measure(&y.row(k).transpose(), &mut rng);
                y.set_row(k, &m.transpose());
            }
        }
        let mut lines = extra.clone();
        lines.push(("split".into(), split.name().into()));
        lines.push(("length".into(), spec.length.to_string()));
        lines.push(("aprbs_seed".into(), spec.seed.to_string()));
        lines.push((
            "noise".into(),
            if noisy {
                format!("variances {:?} seed {noise_seed}", cfg.noise.variances)
            } else {
                "off".into()
            },
        ));
        let comments = provenance(cfg, "gen-data", &lines);
        let (ue, ye) = split_paths(&cfg.out_dir, split);
        write_table(&ue, &comments, &INPUT_NAMES, &u)?;
        let names: Vec<&str> = (0..y.ncols()).map(plant::state_name).collect();
        write_table(&ye, &comments, &names, &y)?;
        written.push(ue);
        written.push(ye);
    }
    Ok(written)
}

/// Grid search (or the fixed candidate), refit on the whole training split,
/// model file and score table.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let candidates = cfg.train.candidates()?;
    let dir = cfg.data_dir(&cfg.train.data_dir);
    let (u, y, inputs) = read_split(&dir, Split::Train)?;
    let weight_seed = derive_seed(cfg.seed, "elm-weights");
    let report = cross_validate(&candidates, &u, &y, cfg.train.split, weight_seed)?;
    let best = report.best;
    let narx = NarxConfig::with_order(best.order, u.ncols(), y.ncols())?;
    let model = fit_narx(&u, &y, &narx, best.hidden, best.lambda, weight_seed)?;
    create_out_dir(cfg)?;

    let mut extra = inputs;
    extra.push(("weight_seed".into(), weight_seed.to_string()));
    extra.push((
        "selection".into(),
        if cfg.train.fixed.is_some() { "fixed" } else { "cross-validation" }.into(),
    ));
    extra.push(("validation_fraction".into(), format!("{:?}", 1.0 - cfg.train.split)));
    let comments = provenance(cfg, "train", &extra);

    let model_path = cfg.out_dir.join("model.txt");
    let saved = SavedModel {
        model,
        narx,
        lambda: best.lambda,
    };
    saved.to_doc(&comments).save(&model_path)?;

    let scores = cfg.out_dir.join("scores.csv");
    let mut out = BufWriter::new(fs::File::create(&scores)?);
    for c in &comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_h", "lambda", "order", "rmse", "selected"])?;
    for row in &report.table {
        let c = row.candidate;
        w.write_record([
            c.hidden.to_string(),
            format!("{:?}", c.lambda),
            c.order.to_string(),
            format!("{:?}", row.rmse),
            u8::from(c == best).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![model_path, scores])
}

/// Metrics produced by [`cmd_eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub osap_rmse: f64,
    pub osap_channel_rmse: Vec<f64>,
    pub msap_rmse: f64,
    pub horizon: usize,
}

/// OSAP on the test split and windowed MSAP on the msap split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(EvalMetrics, Vec<PathBuf>)> {
    let model_path = cfg.model_path(&cfg.eval.model);
    let saved = SavedModel::load(&model_path)?;
    let dir = cfg.data_dir(&cfg.eval.data_dir);
    let (ut, yt, mut extra) = read_split(&dir, Split::Test)?;
    let (um, ym, more) = read_split(&dir, Split::Msap)?;
    extra.extend(more);
    extra.push(input_artifact(&model_path)?);
    let horizon = cfg.eval.horizon;
    if horizon == 0 || horizon + saved.narx.max_lag() > um.nrows() {
        return Err(Error::Data(format!(
            "MSAP horizon {horizon} is longer than the {} usable cycles of the msap split",
            um.nrows().saturating_sub(saved.narx.max_lag())
        )));
    }

    let test = build_narx(&ut, &yt, &saved.narx)?;
    let pred = predict_osap(&saved.model, &test)?;
    let osap = normalized_rmse(&saved.model, &test.targets, &pred)?;
    let a = normalize_outputs(&saved.model, &test.targets);
    let b = normalize_outputs(&saved.model, &pred);
    let per_channel: Vec<f64> = (0..a.ncols())
        .map(|j| ((a.column(j) - b.column(j)).norm_squared() / a.nrows() as f64).sqrt())
        .collect();
    let (msap, m_actual, m_pred) = evaluate_msap(&saved.model, &saved.narx, &um, &ym, horizon)?;
    let metrics = EvalMetrics {
        osap_rmse: osap,
        osap_channel_rmse: per_channel,
        msap_rmse: msap,
        horizon,
    };

    create_out_dir(cfg)?;
    extra.push(("horizon".into(), horizon.to_string()));
    let comments = provenance(cfg, "eval", &extra);
    let names: Vec<String> = (0..a.ncols()).map(|j| plant::state_name(j).to_string()).collect();
    let paired_header: Vec<String> = names
        .iter()
        .flat_map(|n| [n.clone(), format!("{n}_pred")])
        .collect();
    let paired_header: Vec<&str> = paired_header.iter().map(String::as_str).collect();
    let interleave = |actual: &DMatrix<f64>, predicted: &DMatrix<f64>| {
        DMatrix::from_fn(actual.nrows(), 2 * actual.ncols(), |r, c| {
            if c % 2 == 0 {
                actual[(r, c / 2)]
            } else {
                predicted[(r, c / 2)]
            }
        })
    };
    let osap_path = cfg.out_dir.join("osap_predictions.csv");
    write_table(&osap_path, &comments, &paired_header, &interleave(&test.targets, &pred))?;
    let msap_path = cfg.out_dir.join("msap_predictions.csv");
    write_table(&msap_path, &comments, &paired_header, &interleave(&m_actual, &m_pred))?;

    let metrics_path = cfg.out_dir.join("metrics.txt");
    let mut text = String::new();
    for c in &comments {
        text.push_str(&format!("# {c}\n"));
    }
    text.push_str(&format!("osap_rmse = {:?}\n", metrics.osap_rmse));
    for (n, v) in names.iter().zip(&metrics.osap_channel_rmse) {
        text.push_str(&format!("osap_rmse_{n} = {v:?}\n"));
    }
    text.push_str(&format!("msap_rmse = {:?}\n", metrics.msap_rmse));
    text.push_str(&format!("msap_horizon = {horizon}\n"));
    text.push_str(&format!("msap_windows = {}\n", m_actual.nrows() / horizon));
    text.push_str(&format!("parameters = {}\n", saved.model.parameter_count()));
    fs::write(&metrics_path, text)?;
    Ok((metrics, vec![metrics_path, osap_path, msap_path]))
}

fn require_state_space(saved: &SavedModel) -> Result<()> {
    let n = &saved.narx;
    if n.input_lags != 1 || n.output_lags != 1 || n.output_dim != STATES || n.input_dim != INPUTS {
        return Err(Error::Config(format!(
            "closed-loop use needs an order-1 model with {INPUTS} inputs and {STATES} states, got n_u={} n_y={} ({} -> {})",
            n.input_lags, n.output_lags, n.input_dim, n.output_dim
        )));
    }
    Ok(())
}

/// Result of [`cmd_simulate`].
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub trace: SimulationTrace,
    pub controller: MpcConfig,
    pub files: Vec<PathBuf>,
}

/// Controller config and reference for the configured scenario.
pub fn scenario_setup(cfg: &RunConfig) -> Result<(MpcConfig, DMatrix<f64>)> {
    let sim = &cfg.simulate;
    let mut mpc = cfg.mpc.build(STATES)?;
    if sim.scenario == Scenario::StepRmaxConstrained {
        if !sim.rmax_limit.is_finite() {
            return Err(Error::Config("rmax_limit must be finite".into()));
        }
        mpc = mpc.with_rmax_limit(sim.rmax_limit, STATES);
    }
    let lo: Vec<f64> = mpc.y_min.iter().copied().collect();
    let hi: Vec<f64> = mpc.y_max.iter().copied().collect();
    let reference = match sim.scenario {
        Scenario::Step | Scenario::StepRmaxConstrained => make_reference(
            &ReferenceKind::Steps(cfg.step_spec(derive_seed(cfg.seed, "reference"))),
            sim.cycles,
            &lo,
            &hi,
        )?,
        Scenario::Sinusoid => make_reference(&ReferenceKind::Sinusoid(cfg.sinusoid_spec()), sim.cycles, &lo, &hi)?,
        Scenario::Custom => {
            let path = sim
                .reference
                .as_ref()
                .ok_or_else(|| Error::Config("scenario `custom` needs simulate.reference".into()))?;
            let (_, r) = read_table(path)?;
            if r.ncols() != lo.len() || r.nrows() < sim.cycles {
                return Err(Error::Config(format!(
                    "custom reference must have {} columns and at least {} rows, got {}x{}",
                    lo.len(),
                    sim.cycles,
                    r.nrows(),
                    r.ncols()
                )));
            }
            for (k, row) in r.row_iter().enumerate() {
                for c in 0..lo.len() {
                    if !(row[c] >= lo[c] && row[c] <= hi[c]) {
                        return Err(Error::Bounds(format!(
                            "custom reference row {k} leaves output bounds [{}, {}]",
                            lo[c], hi[c]
                        )));
                    }
                }
            }
            r.rows(0, sim.cycles).into_owned()
        }
    };
    Ok((mpc, reference))
}

/// Closed-loop run of the configured scenario. A run that ends early is
/// still written out before the failure is reported.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulationOutput> {
    let sim = &cfg.simulate;
    if sim.cycles == 0 {
        return Err(Error::Config("simulate.cycles must be >= 1".into()));
    }
    let model_path = cfg.model_path(&sim.model);
    let saved = SavedModel::load(&model_path)?;
    require_state_space(&saved)?;
    let (mpc, reference) = scenario_setup(cfg)?;
    let plant = match sim.plant {
        PlantKind::Model => Plant::Elm(saved.model.clone()),
        PlantKind::Synthetic => Plant::Synthetic(SyntheticPlant::default()),
    };
    let noise_seed = derive_seed(cfg.seed, "closed-loop-noise");
    let mut opts = ClosedLoopOptions::new(sim.cycles, cfg.noise.spec(noise_seed)?);
    opts.fallback_budget = sim.fallback_budget;
    let trace = run_closed_loop(&plant, &saved.model, &mpc, &reference, &opts)?;

    create_out_dir(cfg)?;
    let mut extra = vec![input_artifact(&model_path)?];
    if let (Scenario::Custom, Some(r)) = (sim.scenario, &sim.reference) {
        extra.push(input_artifact(r)?);
    }
    extra.push(("scenario".into(), sim.scenario.name().into()));
    extra.push(("plant".into(), format!("{:?}", sim.plant).to_lowercase()));
    extra.push(("noise_seed".into(), noise_seed.to_string()));
    extra.push(("reference_seed".into(), derive_seed(cfg.seed, "reference").to_string()));
    let comments = provenance(cfg, "simulate", &extra);

    let name = sim.scenario.name();
    let trace_path = cfg.out_dir.join(format!("trace_{name}.csv"));
    trace.save_csv(&trace_path, &comments)?;

    let summary = summarize(&trace, &mpc, &mid_input(&mpc));
    let (window, over) = exceedances(&trace, RMAX_STATE, sim.rmax_limit + 0.05, TRANSIENT_CYCLES);
    let peak = trace.state(RMAX_STATE).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let mut text = String::new();
    for c in &comments {
        text.push_str(&format!("# {c}\n"));
    }
    text.push_str(&summary.render(&mpc.outputs));
    text.push_str(&format!("rmax_peak = {peak:?}\n"));
    text.push_str(&format!("rmax_limit = {:?}\n", sim.rmax_limit));
    text.push_str(&format!("post_transient_cycles = {window}\n"));
    text.push_str(&format!("post_transient_rmax_above_limit = {over}\n"));
    let summary_path = cfg.out_dir.join(format!("summary_{name}.txt"));
    fs::write(&summary_path, text)?;

    match trace.status {
        RunStatus::Completed => Ok(SimulationOutput {
            trace,
            controller: mpc,
            files: vec![trace_path, summary_path],
        }),
        s => Err(Error::Numerical(format!(
            "closed loop stopped after {} cycles: {}",
            trace.len(),
            s.as_str()
        ))),
    }
}
