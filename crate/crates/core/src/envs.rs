//! Ground-truth simulators and dataset generation.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Trajectory};
use crate::diffcore::{derive_seed, stream_rng};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassSpringParams {
    pub m: f64,
    pub b: f64,
    pub k: f64,
}

impl Default for MassSpringParams {
    fn default() -> Self {
        MassSpringParams { m: 1.0, b: 0.5, k: 1.0 }
    }
}

impl MassSpringParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.b >= 0.0 && self.k >= 0.0) {
            return Err(Error::config("mass-spring needs m > 0, b >= 0, k >= 0"));
        }
        Ok(())
    }

    fn deriv(&self, x: &[f64], force: f64) -> [f64; 2] {
        [x[1], (-self.b * x[1] - self.k * x[0] + force) / self.m]
    }
}

/// One explicit Euler step of `x1' = x2`, `m x2' = -b x2 - k x1`.
pub fn mass_spring_step(p: &MassSpringParams, x: &[f64], dt: f64) -> Vec<f64> {
    mass_spring_step_forced(p, x, 0.0, dt)
}

/// [`mass_spring_step`] with an external force added to the spring balance.
pub fn mass_spring_step_forced(p: &MassSpringParams, x: &[f64], force: f64, dt: f64) -> Vec<f64> {
    let d = p.deriv(x, force);
    vec![x[0] + dt * d[0], x[1] + dt * d[1]]
}

/// Frictionless cartpole. `length` is the pivot-to-centre-of-mass distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub u_max: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        CartpoleParams { cart_mass: 1.0, pole_mass: 0.1, length: 0.5, gravity: 9.81, u_max: 10.0 }
    }
}

impl CartpoleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cart_mass > 0.0 && self.pole_mass > 0.0 && self.length > 0.0 && self.u_max >= 0.0) {
            return Err(Error::config("cartpole masses and length must be > 0, u_max >= 0"));
        }
        Ok(())
    }

    /// Time derivative of `[p, p_dot, theta, theta_dot]`, `theta = 0` upright.
    pub fn deriv(&self, x: &[f64], u: f64) -> [f64; 4] {
        let total = self.cart_mass + self.pole_mass;
        let pml = self.pole_mass * self.length;
        let (s, c) = x[2].sin_cos();
        let temp = (u + pml * x[3] * x[3] * s) / total;
        let th_acc = (self.gravity * s - c * temp) / (self.length * (4.0 / 3.0 - self.pole_mass * c * c / total));
        let p_acc = temp - pml * th_acc * c / total;
        [x[1], p_acc, x[3], th_acc]
    }

    /// Mechanical energy of the pole relative to the cart frame, zero when hanging at rest.
    fn pole_energy(&self, x: &[f64]) -> f64 {
        let l = self.length;
        0.5 * (4.0 / 3.0) * l * l * x[3] * x[3] + self.gravity * l * (x[2].cos() + 1.0)
    }
}

/// One explicit Euler step; `u` is clipped to `[-u_max, u_max]`.
pub fn cartpole_step(p: &CartpoleParams, x: &[f64], u: f64, dt: f64) -> Vec<f64> {
    let u = u.clamp(-p.u_max, p.u_max);
    let d = p.deriv(x, u);
    (0..4).map(|i| x[i] + dt * d[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// Mass-spring-damper; `force_max` adds a bounded force input.
    MassSpring {
        #[serde(default)]
        params: MassSpringParams,
        #[serde(default)]
        force_max: Option<f64>,
    },
    Cartpole {
        #[serde(default)]
        params: CartpoleParams,
    },
}

impl SystemSpec {
    pub fn state_dim(&self) -> usize {
        match self {
            SystemSpec::MassSpring { .. } => 2,
            SystemSpec::Cartpole { .. } => 4,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            SystemSpec::MassSpring { force_max: None, .. } => 0,
            _ => 1,
        }
    }

    pub fn u_max(&self) -> f64 {
        match self {
            SystemSpec::MassSpring { force_max, .. } => force_max.unwrap_or(0.0),
            SystemSpec::Cartpole { params } => params.u_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::MassSpring { params, force_max } => {
                params.validate()?;
                if force_max.is_some_and(|f| !(f >= 0.0)) {
                    return Err(Error::config("force_max must be >= 0"));
                }
                Ok(())
            }
            SystemSpec::Cartpole { params } => params.validate(),
        }
    }

    /// Ground-truth step with controls clipped to the actuator limits.
    pub fn step(&self, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        match self {
            SystemSpec::MassSpring { params, force_max: None } => mass_spring_step(params, x, dt),
            SystemSpec::MassSpring { params, force_max: Some(f) } => {
                mass_spring_step_forced(params, x, u[0].clamp(-f, *f), dt)
            }
            SystemSpec::Cartpole { params } => cartpole_step(params, x, u[0], dt),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPolicy {
    None,
    UniformRandom,
    /// Cartpole: energy pumping towards the upright energy with a weak cart-centring term.
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub system: SystemSpec,
    pub n_trajectories: usize,
    /// Seconds per trajectory; `round(duration / dt) + 1` samples.
    pub duration: f64,
    pub dt: f64,
    pub noise_std: Vec<f64>,
    pub init_low: Vec<f64>,
    pub init_high: Vec<f64>,
    pub control_policy: ControlPolicy,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let n = self.system.state_dim();
        if !(self.dt > 0.0) || !(self.duration >= 0.0) {
            return Err(Error::config("gen: dt must be > 0 and duration >= 0"));
        }
        for (name, v) in [("noise_std", &self.noise_std), ("init_low", &self.init_low), ("init_high", &self.init_high)] {
            if v.len() != n {
                return Err(Error::config(format!("gen: {name} needs {n} entries, got {}", v.len())));
            }
        }
        if self.noise_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::config("gen: noise_std entries must be >= 0"));
        }
        if self.init_low.iter().zip(&self.init_high).any(|(l, h)| !(l <= h)) {
            return Err(Error::config("gen: init_low must not exceed init_high"));
        }
        if self.control_policy == ControlPolicy::Scripted && !matches!(self.system, SystemSpec::Cartpole { .. }) {
            return Err(Error::config("gen: the scripted policy is defined for the cartpole only"));
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        (self.duration / self.dt).round() as usize + 1
    }

    /// Mass-spring, 5 trajectories of 5 s from the narrow first-quadrant box.
    /// The first interval is degenerate as the box is usually quoted.
    pub fn mass_spring_d1() -> Self {
        GenConfig {
            system: SystemSpec::MassSpring { params: MassSpringParams::default(), force_max: None },
            n_trajectories: 5,
            duration: 5.0,
            dt: 0.01,
            noise_std: vec![0.005, 0.01],
            init_low: vec![0.1, 0.05],
            init_high: vec![0.1, 0.15],
            control_policy: ControlPolicy::None,
            seed: 0,
        }
    }

    /// Mass-spring, 5 trajectories of 5 s from `[-0.1, 0.1]^2`.
    pub fn mass_spring_d2() -> Self {
        GenConfig { init_low: vec![-0.1, -0.1], init_high: vec![0.1, 0.1], ..Self::mass_spring_d1() }
    }

    /// Cartpole, 20 trajectories of 200 steps at 50 Hz under uniform random forces,
    /// started from any pole angle.
    pub fn cartpole_random() -> Self {
        GenConfig {
            system: SystemSpec::Cartpole { params: CartpoleParams::default() },
            n_trajectories: 20,
            duration: 4.0,
            dt: 0.02,
            noise_std: vec![0.0; 4],
            init_low: vec![-0.5, -0.5, -PI, -2.0],
            init_high: vec![0.5, 0.5, PI, 2.0],
            control_policy: ControlPolicy::UniformRandom,
            seed: 0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn policy_control(cfg: &GenConfig, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = cfg.system.control_dim();
    let u_max = cfg.system.u_max();
    match cfg.control_policy {
        ControlPolicy::None => vec![0.0; m],
        ControlPolicy::UniformRandom => (0..m).map(|_| uniform(rng, -u_max, u_max)).collect(),
        ControlPolicy::Scripted => {
            let SystemSpec::Cartpole { params } = &cfg.system else { unreachable!("validated") };
            let e_up = 2.0 * params.gravity * params.length;
            let pump = 4.0 * (e_up - params.pole_energy(x)) * x[3] * x[2].cos();
            let centre = -1.0 * x[0] - 0.5 * x[1];
            vec![(-pump + centre).clamp(-u_max, u_max)]
        }
    }
}

/// Simulates `n_trajectories` runs from uniform initial states and records
/// noisy states with the clean controls. Trajectory `i` draws only from
/// streams keyed by `(seed, i)`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.system.state_dim();
    let len = cfg.n_points();
    let noise: Vec<Normal<f64>> = cfg.noise_std.iter().map(|&s| Normal::new(0.0, s).expect("s >= 0")).collect();
    let trajectories = (0..cfg.n_trajectories)
        .map(|i| {
            let key = derive_seed(cfg.seed, &[i as u64]);
            let (mut init_rng, mut u_rng, mut obs_rng) = (stream_rng(key, 0), stream_rng(key, 1), stream_rng(key, 2));
            let mut x: Vec<f64> = (0..n).map(|d| uniform(&mut init_rng, cfg.init_low[d], cfg.init_high[d])).collect();
            let mut tr = Trajectory { t: Vec::with_capacity(len), x: Vec::with_capacity(len), u: Vec::with_capacity(len) };
            for k in 0..len {
                let u = policy_control(cfg, &x, &mut u_rng);
                tr.t.push(k as f64 * cfg.dt);
                tr.x.push(x.iter().zip(&noise).map(|(v, nd)| v + nd.sample(&mut obs_rng)).collect());
                if k + 1 < len {
                    x = cfg.system.step(&x, &u, cfg.dt);
                }
                tr.u.push(u);
            }
            tr
        })
        .collect();
    Ok(Dataset { dt: cfg.dt, state_dim: n, control_dim: cfg.system.control_dim(), trajectories })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudShape {
    Circle,
    FigureEight,
}

impl CloudShape {
    /// Point on the closed curve at parameter `s` in `[0, 1)`.
    pub fn point(self, s: f64) -> [f64; 2] {
        let t = 2.0 * PI * s;
        match self {
            CloudShape::Circle => [0.1 * t.cos(), 0.1 * t.sin()],
            CloudShape::FigureEight => [0.1 * t.sin(), 0.1 * t.sin() * t.cos()],
        }
    }
}

pub const CLOUD_JITTER: f64 = 0.002;

/// `n_points` samples at even parameter spacing along the curve plus
/// Gaussian jitter, returned as one control-free trajectory of a 2-D state.
pub fn fig2_point_clouds(shape: CloudShape, n_points: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, 0);
    let jitter = Normal::new(0.0, CLOUD_JITTER).expect("positive std");
    let x: Vec<Vec<f64>> = (0..n_points)
        .map(|i| {
            let p = shape.point(i as f64 / n_points as f64);
            vec![p[0] + jitter.sample(&mut rng), p[1] + jitter.sample(&mut rng)]
        })
        .collect();
    Dataset {
        dt: 1.0,
        state_dim: 2,
        control_dim: 0,
        trajectories: vec![Trajectory { t: (0..n_points).map(|i| i as f64).collect(), x, u: vec![vec![]; n_points] }],
    }
}
