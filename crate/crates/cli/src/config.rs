//! Run configuration: one TOML document with a global seed and a section per stage.

use std::path::{Path, PathBuf};

use nsde_core::envs::{CloudShape, GenConfig, SystemSpec};
use nsde_core::evaluator::GridSpec;
use nsde_core::losses::LossConfig;
use nsde_core::model::{blackbox_spec, cartpole_affine_spec, distance_map_spec, mass_spring_spec, ModelSpec};
use nsde_core::mpc::MpcConfig;
use nsde_core::solvers::SolverConfig;
use nsde_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

/// Sections whose core config carries its own seed; the run seed is written into them.
const SEEDED_SECTIONS: [&str; 4] = ["solver", "train", "gen", "mpc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: Option<ModelSection>,
    pub solver: Option<SolverConfig>,
    pub loss: Option<LossConfig>,
    pub train: Option<TrainConfig>,
    pub gen: Option<GenConfig>,
    pub cloud: Option<CloudSection>,
    pub eval: Option<EvalSection>,
    pub mpc: Option<MpcConfig>,
    pub episode: Option<EpisodeSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    MassSpring,
    CartpoleAffine,
    Blackbox,
    DistanceMap,
}

/// Either a built-in preset or a full model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<Preset>,
    pub sigma_max: Option<Vec<f64>>,
    /// Blackbox preset only.
    pub state_dim: Option<usize>,
    pub control_dim: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub spec: Option<ModelSpec>,
    /// Fit the distance-feature normalization to the training data before initialization.
    #[serde(default = "yes")]
    pub normalize_features: bool,
}

fn yes() -> bool {
    true
}

impl ModelSection {
    pub fn build(&self) -> Result<ModelSpec, CliError> {
        let spec = match (&self.preset, &self.spec) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(CliError::Config("model: give exactly one of `preset` and `spec`".into()))
            }
            (None, Some(spec)) => {
                if self.sigma_max.is_some() || self.state_dim.is_some() || self.control_dim.is_some() || self.hidden.is_some() {
                    return Err(CliError::Config("model: preset options cannot be combined with `spec`".into()));
                }
                spec.clone()
            }
            (Some(preset), None) => self.preset_spec(*preset)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn preset_spec(&self, preset: Preset) -> Result<ModelSpec, CliError> {
        let fixed = |n: usize| -> Result<Option<Vec<f64>>, CliError> {
            match &self.sigma_max {
                Some(s) if s.len() != n => Err(CliError::Config(format!("model: sigma_max needs {n} entries"))),
                s => Ok(s.clone()),
            }
        };
        if preset != Preset::Blackbox && (self.state_dim.is_some() || self.control_dim.is_some() || self.hidden.is_some()) {
            return Err(CliError::Config("model: state_dim, control_dim and hidden only apply to the blackbox preset".into()));
        }
        Ok(match preset {
            Preset::MassSpring => {
                let s = fixed(2)?.unwrap_or(vec![0.001, 0.02]);
                mass_spring_spec([s[0], s[1]])
            }
            Preset::CartpoleAffine => {
                let s = fixed(4)?.unwrap_or(vec![0.005, 0.05, 0.004, 0.01]);
                cartpole_affine_spec([s[0], s[1], s[2], s[3]])
            }
            Preset::DistanceMap => {
                let mut spec = distance_map_spec();
                if let Some(s) = fixed(2)? {
                    spec.diffusion.sigma_max = s;
                }
                spec
            }
            Preset::Blackbox => {
                let n = self.state_dim.ok_or_else(|| CliError::Config("model: blackbox needs state_dim".into()))?;
                let m = self.control_dim.unwrap_or(0);
                let hidden = self.hidden.clone().unwrap_or(vec![16, 16]);
                let s = fixed(n)?.unwrap_or(vec![0.01; n]);
                blackbox_spec(n, m, &hidden, &s)
            }
        })
    }
}

/// Jittered point cloud along a closed planar curve, drawn with the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSection {
    pub shape: CloudShape,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Grid over the distance-network features.
    pub dmap_grid: Option<GridSpec>,
    /// Grid over initial states.
    pub uncertainty_grid: Option<GridSpec>,
    #[serde(default = "default_uncertainty_horizon")]
    pub uncertainty_horizon_s: f64,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    /// Open-loop window length.
    #[serde(default = "default_window")]
    pub window_s: f64,
    /// Trajectory index used when a dataset is given.
    #[serde(default)]
    pub trajectory: usize,
    /// Start state for a simulated ground-truth run when no dataset is given.
    pub x0: Option<Vec<f64>>,
    pub duration_s: Option<f64>,
    /// Ground-truth system; defaults to the one in [gen].
    pub system: Option<SystemSpec>,
}

fn default_uncertainty_horizon() -> f64 {
    0.2
}

fn default_particles() -> usize {
    100
}

fn default_window() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    /// Simulated plant; defaults to the system in [gen].
    pub system: Option<SystemSpec>,
    pub x0: Vec<f64>,
    pub duration_s: f64,
    /// Reference CSV (`t,x_0,...`). Overridden by `--reference`.
    pub reference: Option<PathBuf>,
    /// Constant reference used when no file is given.
    pub reference_state: Option<Vec<f64>>,
    /// Length of the final window summarized in the episode report.
    #[serde(default = "default_tail")]
    pub tail_s: f64,
}

fn default_tail() -> f64 {
    2.0
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    match format!("v = {value}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(value.into())),
        Err(_) => Value::String(value.into()),
    }
}

/// Applies a `dotted.key=value` override to `doc`.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set: malformed key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set: `{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Loads a config file, applies overrides and the seed, and checks it.
pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: Table = text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        doc.insert("seed".into(), Value::Integer(s as i64));
    }
    let run_seed = match doc.get("seed") {
        None => 0,
        Some(Value::Integer(s)) if *s >= 0 => *s,
        Some(_) => return Err(CliError::Config("seed must be a non-negative integer".into())),
    };
    for name in SEEDED_SECTIONS {
        if let Some(section) = doc.get_mut(name).and_then(Value::as_table_mut) {
            if section.contains_key("seed") {
                return Err(CliError::Config(format!("[{name}] cannot set its own seed; use the top-level `seed`")));
            }
            section.insert("seed".into(), Value::Integer(run_seed));
        }
    }
    let mut cfg: RunConfig = Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    cfg.resolve_files(path.parent().unwrap_or(Path::new(".")))?;
    Ok(cfg)
}

impl RunConfig {
    /// Resolves relative file references against the config's directory and checks they exist.
    fn resolve_files(&mut self, base: &Path) -> Result<(), CliError> {
        if let Some(r) = self.episode.as_mut().and_then(|e| e.reference.as_mut()) {
            if r.is_relative() {
                *r = base.join(&*r);
            }
            if !r.is_file() {
                return Err(CliError::Config(format!("episode reference {} does not exist", r.display())));
            }
        }
        Ok(())
    }

    /// Canonical TOML of the resolved config, used for hashing and the manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    /// Ground-truth system from `preferred` or the [gen] section.
    pub fn system(&self, preferred: Option<&SystemSpec>, what: &str) -> Result<SystemSpec, CliError> {
        preferred
            .or(self.gen.as_ref().map(|g| &g.system))
            .cloned()
            .ok_or_else(|| CliError::Config(format!("{what} needs a `system` or a [gen] section")))
    }

    pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        section.as_ref().ok_or_else(|| CliError::Config(format!("config needs a [{name}] section")))
    }
}
