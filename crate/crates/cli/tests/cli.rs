use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn nsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsde")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const MASS_SPRING: &str = r#"
seed = 3

[gen]
n_trajectories = 2
duration = 0.5
dt = 0.01
noise_std = [0.005, 0.01]
init_low = [-0.1, -0.1]
init_high = [0.1, 0.1]
control_policy = "none"

[gen.system]
kind = "mass_spring"

[model]
preset = "mass_spring"

[solver]
scheme = "euler_maruyama"
dt = 0.01
horizon = 5
n_particles = 1

[train]
batch_size = 4
horizon = 5
lr_start = 0.01
lr_end = 0.001
decay_steps = 10
max_steps = 2
eval_every = 1

[eval]
x0 = [0.15, -0.15]
duration_s = 0.3
window_s = 0.1
n_particles = 5

[eval.dmap_grid]
axes = [
  { dim = 0, min = -0.2, max = 0.2, n_cells = 41 },
  { dim = 1, min = -0.2, max = 0.2, n_cells = 41 },
]
"#;

/// Config, dataset and trained model in a fresh directory.
fn trained(extra: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", MASS_SPRING);
    let out = dir.path().join("out");
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&cfg), "--out", s(&out)])), 0);
    let data = out.join("dataset.json");
    let args = [&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)][..], extra].concat();
    let o = nsde(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (dir, cfg)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&nsde(&["--help"])), 0);
    assert_eq!(code(&nsde(&["--version"])), 0);
    assert_eq!(code(&nsde(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&nsde(&[])), 1);
    assert_eq!(code(&nsde(&["frobnicate"])), 1);
    assert_eq!(code(&nsde(&["train", "--config", "x.toml"])), 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&missing), "--out", s(&out)])), 1);

    let unknown = write(dir.path(), "unknown.toml", &format!("{MASS_SPRING}\n[bogus]\nx = 1\n"));
    let o = nsde(&["gen-data", "--config", s(&unknown), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let own_seed = write(dir.path(), "seed.toml", &MASS_SPRING.replace("control_policy = \"none\"", "control_policy = \"none\"\nseed = 4"));
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&own_seed), "--out", s(&out)])), 1);

    let cfg = write(dir.path(), "ok.toml", MASS_SPRING);
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&cfg), "--set", "gen.no_such_key=1", "--out", s(&out)])), 1);
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&cfg), "--set", "gen.dt", "--out", s(&out)])), 1);
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&cfg), "--set", "gen.dt=-1", "--out", s(&out)])), 1);

    let bad_ref = write(dir.path(), "ref.toml", &format!("{MASS_SPRING}\n[episode]\nx0 = [0.0, 0.0]\nduration_s = 1.0\nreference = \"nope.csv\"\n"));
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&bad_ref), "--out", s(&out)])), 1);
}

#[test]
fn gen_data_layout_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", MASS_SPRING);
    let out = dir.path().join("out");
    let o = nsde(&["gen-data", "--config", s(&cfg), "--set", "gen.n_trajectories=5", "--set", "gen.duration=5.0", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("95% of samples"));
    let ds: Value = serde_json::from_str(&std::fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    let trs = ds["trajectories"].as_array().unwrap();
    assert_eq!(trs.len(), 5);
    assert!(trs.iter().all(|t| t["x"].as_array().unwrap().len() == 501));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest-gen-data.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["config"].as_str().unwrap().contains("n_trajectories = 5"));
    assert_eq!(manifest["artifacts"]["dataset.json"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", MASS_SPRING);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    nsde(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    nsde(&["gen-data", "--config", s(&cfg), "--seed", "9", "--out", s(&b)]);
    assert_ne!(std::fs::read(a.join("dataset.json")).unwrap(), std::fs::read(b.join("dataset.json")).unwrap());
}

#[test]
fn zero_trajectories_warns_and_writes_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", MASS_SPRING);
    let out = dir.path().join("out");
    let o = nsde(&["gen-data", "--config", s(&cfg), "--set", "gen.n_trajectories=0", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let ds: Value = serde_json::from_str(&std::fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert!(ds["trajectories"].as_array().unwrap().is_empty());
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let (dir, _) = trained(&["--set", "train.max_steps=0", "--set", "model.normalize_features=false"]);
    let out = dir.path().join("out");
    let ckpt: Value = serde_json::from_str(&std::fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    let spec = nsde_core::model::mass_spring_spec([0.001, 0.02]);
    let init = nsde_core::model::NeuralSdeModel::new(spec, 3).unwrap();
    assert_eq!(ckpt, init.params.to_json());
    for f in ["model.json", "history.csv", "train_summary.json", "manifest-train.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn training_without_data_is_config_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", MASS_SPRING);
    let out = dir.path().join("out");
    nsde(&["gen-data", "--config", s(&cfg), "--set", "gen.n_trajectories=0", "--out", s(&out)]);
    let o = nsde(&["train", "--config", s(&cfg), "--data", s(&out.join("dataset.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = nsde(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("none.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_grid_writes_full_grid() {
    let (dir, cfg) = trained(&[]);
    let out = dir.path().join("out");
    let o = nsde(&["eval-grid", "--config", s(&cfg), "--checkpoint", s(&out.join("checkpoint.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("dmap.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("cell_x,cell_y,value"));
    assert_eq!(text.lines().count(), 1 + 1681);
}

#[test]
fn missing_checkpoint_fails() {
    let (dir, cfg) = trained(&[]);
    let out = dir.path().join("out");
    let o = nsde(&["eval-grid", "--config", s(&cfg), "--checkpoint", s(&out.join("nope.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_openloop_on_dataset_and_simulation() {
    let (dir, cfg) = trained(&[]);
    let out = dir.path().join("out");
    let ckpt = out.join("checkpoint.json");
    let o = nsde(&["eval-openloop", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&out.join("dataset.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("openloop_summary.json")).unwrap()).unwrap();
    // 50 steps in windows of 10.
    assert_eq!(summary["windows"].as_array().unwrap().len(), 5);

    let sim = dir.path().join("sim");
    let o = nsde(&["eval-openloop", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&sim)]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(sim.join("openloop.csv")).unwrap();
    assert!(csv.starts_with("window,step,t,mean_0,mean_1,std_0,std_1,truth_0,truth_1\n"));
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&first[7..9], &["0.15", "-0.15"]);

    let o = nsde(&["eval-openloop", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--set", "eval.trajectory=7", "--data", s(&out.join("dataset.json")), "--out", s(&sim)]);
    assert_eq!(code(&o), 1);
}

const MPC: &str = r#"
[mpc]
q = [10.0, 1.0]
r = [0.001]
horizon_steps = 20
dt = 0.05
control_lo = [-5.0]
control_hi = [5.0]
iters = 20
lr0 = 0.5
scheme = "euler_ode"

[episode]
x0 = [0.0, 0.0]
duration_s = 1.0

[episode.system]
kind = "mass_spring"
force_max = 5.0
"#;

/// A forced mass-spring model trained for zero steps.
fn forced_model(dir: &Path) -> (PathBuf, PathBuf) {
    let base = MASS_SPRING.replace("[model]\npreset = \"mass_spring\"", "[model]\npreset = \"blackbox\"\nstate_dim = 2\ncontrol_dim = 1");
    let base = base.replace("control_policy = \"none\"", "control_policy = \"uniform_random\"");
    let base = base.replace("kind = \"mass_spring\"", "kind = \"mass_spring\"\nforce_max = 5.0");
    let cfg = write(dir, "mpc.toml", &format!("{base}{MPC}"));
    let out = dir.join("out");
    assert_eq!(code(&nsde(&["gen-data", "--config", s(&cfg), "--out", s(&out)])), 0);
    let o = nsde(&["train", "--config", s(&cfg), "--data", s(&out.join("dataset.json")), "--set", "train.max_steps=0", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (cfg, out.join("checkpoint.json"))
}

#[test]
fn mpc_episode_and_reference_handling() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = forced_model(dir.path());
    let ep = dir.path().join("ep");
    let o = nsde(&["mpc", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&ep)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(ep.join("episode.csv")).unwrap();
    assert!(csv.starts_with("t,x_0,x_1,u_0,planned_cost,solve_ms\n"));
    assert_eq!(csv.lines().count(), 21);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(ep.join("episode_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 20);
    assert_eq!(summary["tail_max_abs_angle_error"].as_array().unwrap().len(), 0);

    let good = write(dir.path(), "ref.csv", "t,x_0,x_1\n0,0.1,0\n2,0.1,0\n");
    let o = nsde(&["mpc", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--reference", s(&good), "--out", s(&ep)]);
    assert_eq!(code(&o), 0);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(ep.join("manifest-mpc.json")).unwrap()).unwrap();
    assert!(manifest["inputs"]["reference"].is_string());

    let bad = write(dir.path(), "bad.csv", "t,x_0,x_1\n0,0.1\n");
    let o = nsde(&["mpc", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--reference", s(&bad), "--out", s(&ep)]);
    assert_eq!(code(&o), 1);
    let wrong_dim = write(dir.path(), "dim.csv", "t,x_0\n0,0.1\n");
    let o = nsde(&["mpc", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--reference", s(&wrong_dim), "--out", s(&ep)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn equilibrium_reference_gives_near_zero_controls() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = forced_model(dir.path());
    // A zero-drift, zero-diffusion model at rest on its reference needs no force.
    let spec_path = ckpt.parent().unwrap().join("model.json");
    let ckpt_json: Value = serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    let mut params = nsde_core::diffcore::ParamVector::from_json(&ckpt_json).unwrap();
    params.values_mut().iter_mut().for_each(|v| *v = 0.0);
    let zero = dir.path().join("zero.json");
    params.save(&zero).unwrap();
    let ep = dir.path().join("ep");
    let o = nsde(&["mpc", "--config", s(&cfg), "--checkpoint", s(&zero), "--model", s(&spec_path), "--out", s(&ep)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(ep.join("episode.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let u: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(u.abs() < 1e-9, "{line}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", MASS_SPRING);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        nsde(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
        nsde(&["train", "--config", s(&cfg), "--data", s(&out.join("dataset.json")), "--out", s(&out)]);
        let names = ["dataset.json", "checkpoint.json", "model.json", "history.csv", "manifest-train.json"];
        let mut bytes: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(out.join(n)).unwrap()).collect();
        // The manifest embeds the input hash, not the path, so it is comparable too.
        bytes.push(std::fs::read(out.join("manifest-gen-data.json")).unwrap());
        outputs.push(bytes);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn diverging_training_exits_two_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", MASS_SPRING);
    let out = dir.path().join("out");
    nsde(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    let lr = ["--set", "train.lr_start=1e6", "--set", "train.lr_end=1e6", "--set", "train.max_steps=50"];
    let o = nsde(&[&["train", "--config", s(&cfg), "--data", s(&out.join("dataset.json")), "--out", s(&out)][..], &lr].concat());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("history.csv").is_file());
    assert!(out.join("model.json").is_file());
    assert!(out.join("manifest-train.json").is_file());
    assert!(!out.join("checkpoint.json").exists());
}
