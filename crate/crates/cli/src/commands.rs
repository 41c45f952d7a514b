use std::path::{Path, PathBuf};

use nsde_core::dataset::{Dataset, Trajectory};
use nsde_core::diffcore::{wrap_angle, ParamVector};
use nsde_core::envs::{fig2_point_clouds, generate_dataset};
use nsde_core::evaluator::{dmap, openloop_report, summarize_reports, uncertainty_grid, write_reports_csv, WindowSummary};
use nsde_core::model::{ModelSpec, NeuralSdeModel};
use nsde_core::mpc::{run_episode, ReferenceTrack};
use nsde_core::solvers::SolverConfig;
use nsde_core::trainer::{fit_feature_normalization, train_with_progress, write_history_csv};
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::manifest::Run;
use crate::{CliError, Common, ModelArgs};

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    config::load(&common.config, &common.overrides, common.seed)
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T, CliError> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("malformed {what}: {e}")))
}

fn load_dataset(run: &mut Run, path: &Path) -> Result<Dataset, CliError> {
    let ds: Dataset = parse_json(&run.input("dataset", path)?, "dataset")?;
    ds.validate()?;
    Ok(ds)
}

fn load_model(run: &mut Run, args: &ModelArgs) -> Result<NeuralSdeModel, CliError> {
    let spec_path = args
        .model
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("model.json"));
    let params_bytes = run.input("checkpoint", &args.checkpoint)?;
    let spec: ModelSpec = parse_json(&run.input("model", &spec_path)?, "model description")?;
    let params = ParamVector::from_json(&parse_json(&params_bytes, "checkpoint")?)?;
    Ok(NeuralSdeModel::with_params(spec, params)?)
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Serialize)]
struct DataStats {
    n_trajectories: usize,
    n_points: usize,
    /// Per state coordinate: the interval holding the central 95% of samples.
    p2_5: Vec<f64>,
    p97_5: Vec<f64>,
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let ds = match (&cfg.gen, &cfg.cloud) {
        (Some(gen), None) => generate_dataset(gen)?,
        (None, Some(cloud)) => fig2_point_clouds(cloud.shape, cloud.n_points, cfg.seed),
        _ => return Err(CliError::Config("gen-data needs exactly one of [gen] and [cloud]".into())),
    };
    let mut run = Run::new("gen-data", &cfg, &common.out)?;
    run.write("dataset.json", (ds.to_json_string() + "\n").as_bytes())?;
    let n = ds.state_dim;
    let pts = ds.all_points();
    let mut stats = DataStats { n_trajectories: ds.trajectories.len(), n_points: pts.rows(), p2_5: vec![], p97_5: vec![] };
    if pts.rows() == 0 {
        eprintln!("warning: the dataset is empty");
    } else {
        for d in 0..n {
            let mut col: Vec<f64> = (0..pts.rows()).map(|r| pts.get(r, d)).collect();
            col.sort_by(f64::total_cmp);
            stats.p2_5.push(percentile(&col, 2.5));
            stats.p97_5.push(percentile(&col, 97.5));
        }
    }
    println!("{} trajectories, {} points", stats.n_trajectories, stats.n_points);
    for d in 0..stats.p2_5.len() {
        println!("x_{d}: 95% of samples in [{:.6}, {:.6}]", stats.p2_5[d], stats.p97_5[d]);
    }
    run.write_json("dataset_stats.json", &stats)?;
    run.finish()
}

#[derive(Serialize)]
struct TrainSummary {
    steps_run: usize,
    best_step: usize,
    best_heldout: f64,
    diverged_steps: Vec<usize>,
    s_diag: Vec<f64>,
}

pub fn train(common: &Common, data: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let model_cfg = RunConfig::require(&cfg.model, "model")?;
    let train_cfg = RunConfig::require(&cfg.train, "train")?;
    let solver = RunConfig::require(&cfg.solver, "solver")?;
    let loss = cfg.loss.clone().unwrap_or_default();
    let mut spec = model_cfg.build()?;
    let mut run = Run::new("train", &cfg, &common.out)?;
    let ds = load_dataset(&mut run, data)?;
    if model_cfg.normalize_features && !ds.trajectories.is_empty() {
        fit_feature_normalization(&mut spec, &ds)?;
    }
    run.write_json("model.json", &spec)?;
    let model = NeuralSdeModel::new(spec, cfg.seed)?;

    let mut rows = Vec::new();
    let history_path = common.out.join("history.csv");
    let outcome = train_with_progress(&model, &ds, train_cfg, &loss, solver, |row| {
        eprintln!("step {:>6}  lr {:.2e}  total {:.6e}  heldout {:.6e}", row.step, row.lr, row.train.total, row.heldout);
        rows.push(*row);
        let mut buf = Vec::new();
        if write_history_csv(&mut buf, &rows).is_ok() {
            let _ = std::fs::write(&history_path, buf);
        }
    });
    let mut history = Vec::new();
    write_history_csv(&mut history, &rows)?;
    run.write("history.csv", &history)?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            run.finish()?;
            return Err(e.into());
        }
    };
    run.write("checkpoint.json", (outcome.model.params.to_json_string() + "\n").as_bytes())?;
    let summary = TrainSummary {
        steps_run: outcome.steps_run,
        best_step: outcome.best_step,
        best_heldout: outcome.best_heldout,
        diverged_steps: outcome.diverged_steps,
        s_diag: outcome.s_diag,
    };
    println!("trained {} steps; best held-out {:.6e} at step {}", summary.steps_run, summary.best_heldout, summary.best_step);
    run.write_json("train_summary.json", &summary)?;
    run.finish()
}

pub fn eval_grid(common: &Common, args: &ModelArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let eval = RunConfig::require(&cfg.eval, "eval")?;
    if eval.dmap_grid.is_none() && eval.uncertainty_grid.is_none() {
        return Err(CliError::Config("[eval] needs dmap_grid or uncertainty_grid".into()));
    }
    let mut run = Run::new("eval-grid", &cfg, &common.out)?;
    let model = load_model(&mut run, args)?;
    if let Some(grid) = &eval.dmap_grid {
        let mut buf = Vec::new();
        dmap(&model, grid)?.write_csv(&mut buf)?;
        run.write("dmap.csv", &buf)?;
    }
    if let Some(grid) = &eval.uncertainty_grid {
        let solver = RunConfig::require(&cfg.solver, "solver")?;
        let mut buf = Vec::new();
        uncertainty_grid(&model, grid, eval.uncertainty_horizon_s, eval.n_particles, solver)?.write_csv(&mut buf)?;
        run.write("uncertainty.csv", &buf)?;
    }
    run.finish()
}

#[derive(Serialize)]
struct OpenloopSummary {
    /// Pooled over all windows.
    rmse: f64,
    coverage_3sigma: f64,
    windows: Vec<WindowSummary>,
}

/// Noise-free ground truth under zero controls.
fn simulate_truth(
    system: &nsde_core::envs::SystemSpec,
    x0: &[f64],
    duration_s: f64,
    dt: f64,
    m: usize,
) -> Trajectory {
    let len = (duration_s / dt).round() as usize + 1;
    let mut x = vec![x0.to_vec()];
    for _ in 1..len {
        let next = system.step(x.last().expect("non-empty"), &vec![0.0; m], dt);
        x.push(next);
    }
    Trajectory { t: (0..len).map(|k| k as f64 * dt).collect(), x, u: vec![vec![0.0; m]; len] }
}

pub fn eval_openloop(common: &Common, args: &ModelArgs, data: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let eval = RunConfig::require(&cfg.eval, "eval")?;
    let solver = RunConfig::require(&cfg.solver, "solver")?;
    let mut run = Run::new("eval-openloop", &cfg, &common.out)?;
    let model = load_model(&mut run, args)?;
    let trajectory = match data {
        Some(path) => {
            let ds = load_dataset(&mut run, path)?;
            let n = ds.trajectories.len();
            ds.trajectories
                .into_iter()
                .nth(eval.trajectory)
                .ok_or_else(|| CliError::Config(format!("eval.trajectory {} out of range ({n} trajectories)", eval.trajectory)))?
        }
        None => {
            let (Some(x0), Some(duration)) = (&eval.x0, eval.duration_s) else {
                return Err(CliError::Config("eval-openloop needs --data or eval.x0 and eval.duration_s".into()));
            };
            let system = cfg.system(eval.system.as_ref(), "eval-openloop")?;
            if x0.len() != system.state_dim() {
                return Err(CliError::Config(format!("eval.x0 needs {} entries", system.state_dim())));
            }
            simulate_truth(&system, x0, duration, solver.dt, model.control_dim())
        }
    };
    let solver = SolverConfig { n_particles: eval.n_particles, ..solver.clone() };
    let reports = openloop_report(&model, &trajectory, eval.window_s, &solver)?;
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &reports)?;
    run.write("openloop.csv", &buf)?;

    let (mut sq, mut count, mut inside, mut steps) = (0.0, 0usize, 0.0, 0usize);
    for r in &reports {
        let k = r.times.len() * r.mean[0].len();
        sq += r.rmse.powi(2) * k as f64;
        count += k;
        inside += r.coverage_3sigma * r.times.len() as f64;
        steps += r.times.len();
    }
    let summary = OpenloopSummary {
        rmse: (sq / count as f64).sqrt(),
        coverage_3sigma: inside / steps as f64,
        windows: summarize_reports(&reports),
    };
    println!("rmse {:.6}  coverage(3 sigma) {:.4}  windows {}", summary.rmse, summary.coverage_3sigma, summary.windows.len());
    run.write_json("openloop_summary.json", &summary)?;
    run.finish()
}

#[derive(Serialize)]
struct EpisodeSummary {
    steps: usize,
    terminated_early: bool,
    final_state: Vec<f64>,
    tail_s: f64,
    /// Largest wrapped |state - reference| per angle coordinate over the final window.
    tail_max_abs_angle_error: Vec<f64>,
    /// Largest |state - reference| per coordinate over the final window, angles wrapped.
    tail_max_abs_error: Vec<f64>,
}

pub fn mpc(common: &Common, args: &ModelArgs, reference: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let mpc_cfg = RunConfig::require(&cfg.mpc, "mpc")?;
    let episode = RunConfig::require(&cfg.episode, "episode")?;
    let system = cfg.system(episode.system.as_ref(), "mpc")?;
    let mut run = Run::new("mpc", &cfg, &common.out)?;
    let model = load_model(&mut run, args)?;
    let n = model.state_dim();
    if system.state_dim() != n || system.control_dim() != model.control_dim() {
        return Err(CliError::Config("episode system and model dimensions differ".into()));
    }
    if episode.x0.len() != n {
        return Err(CliError::Config(format!("episode.x0 needs {n} entries")));
    }
    let file: Option<PathBuf> = reference.map(Path::to_path_buf).or(episode.reference.clone());
    let track = match file {
        Some(path) => {
            let text = String::from_utf8(run.input("reference", &path)?)
                .map_err(|_| CliError::Config("reference is not UTF-8".into()))?;
            ReferenceTrack::from_csv_str(&text)?
        }
        None => {
            let state = episode.reference_state.clone().unwrap_or(vec![0.0; n]);
            ReferenceTrack::constant(state, episode.duration_s + mpc_cfg.horizon_s())
        }
    };
    track.validate(n)?;
    let log = run_episode(&model, |x, u| system.step(x, u, mpc_cfg.dt), &episode.x0, &track, mpc_cfg, episode.duration_s)?;
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    run.write("episode.csv", &buf)?;

    let t_end = log.steps.len() as f64 * mpc_cfg.dt;
    let mut tail_err = vec![0.0f64; n];
    for step in log.steps.iter().filter(|s| s.t >= t_end - episode.tail_s - 1e-9) {
        let r = track.at(step.t);
        for d in 0..n {
            let mut e = step.state[d] - r[d];
            if mpc_cfg.angle_dims.contains(&d) {
                e = wrap_angle(e);
            }
            tail_err[d] = tail_err[d].max(e.abs());
        }
    }
    let summary = EpisodeSummary {
        steps: log.steps.len(),
        terminated_early: log.terminated_early,
        final_state: log.final_state.clone(),
        tail_s: episode.tail_s,
        tail_max_abs_angle_error: mpc_cfg.angle_dims.iter().map(|&d| tail_err[d]).collect(),
        tail_max_abs_error: tail_err,
    };
    println!(
        "{} steps; final state {:?}; tail max |error| {:?}",
        summary.steps, summary.final_state, summary.tail_max_abs_error
    );
    run.write_json("episode_summary.json", &summary)?;
    run.finish()?;
    if log.terminated_early {
        return Err(runtime("the plant diverged during the episode"));
    }
    Ok(())
}
