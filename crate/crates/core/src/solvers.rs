//! Fixed-step integrators for diagonal-noise Itô SDEs.
//!
//! All schemes are written as tape operations, so a rollout is differentiable
//! with respect to the model parameters, the initial state and the controls.
//! Wiener increments are drawn up front and enter as constants.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::{stream_gaussians, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, NeuralSdeModel, SdeDynamics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Explicit Euler on the drift; diffusion ignored.
    EulerOde,
    EulerMaruyama,
    /// Derivative-free (Runge-Kutta type) Milstein scheme for diagonal noise.
    MilsteinDf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub horizon: usize,
    pub n_particles: usize,
    pub seed: u64,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("solver dt must be > 0"));
        }
        if self.horizon == 0 || self.n_particles == 0 {
            return Err(Error::config("solver horizon and n_particles must be >= 1"));
        }
        Ok(())
    }
}

/// Anything that can put an [`SdeDynamics`] on a tape.
pub trait Sde {
    type Bound<'a>: SdeDynamics
    where
        Self: 'a;

    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn bind<'a>(&'a self, tape: &mut Tape) -> Self::Bound<'a>;
}

impl Sde for NeuralSdeModel {
    type Bound<'a> = BoundModel<'a>;

    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    fn control_dim(&self) -> usize {
        self.spec.control_dim
    }

    fn bind<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        NeuralSdeModel::bind(self, tape)
    }
}

/// `dx = (A x + B u) dt + (c + s ⊙ x) ⊙ dW` with constant matrices.
///
/// Covers Ornstein-Uhlenbeck (`s = 0`) and geometric Brownian motion (`c = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSde {
    pub a: Mat,
    pub b: Mat,
    pub sigma_const: Vec<f64>,
    pub sigma_mult: Vec<f64>,
}

impl LinearSde {
    pub fn new(a: Mat, b: Mat, sigma_const: Vec<f64>, sigma_mult: Vec<f64>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n || b.rows() != n || sigma_const.len() != n || sigma_mult.len() != n {
            return Err(Error::shape("inconsistent linear SDE dimensions"));
        }
        Ok(LinearSde { a, b, sigma_const, sigma_mult })
    }

    pub fn scalar(a: f64, sigma_const: f64, sigma_mult: f64) -> Self {
        LinearSde {
            a: Mat::scalar(a),
            b: Mat::zeros(1, 0),
            sigma_const: vec![sigma_const],
            sigma_mult: vec![sigma_mult],
        }
    }

    /// Geometric Brownian motion `dx = a x dt + b x dW`.
    pub fn gbm(a: f64, b: f64) -> Self {
        Self::scalar(a, 0.0, b)
    }

    /// Ornstein-Uhlenbeck `dx = -theta x dt + sigma dW`.
    pub fn ou(theta: f64, sigma: f64) -> Self {
        Self::scalar(-theta, sigma, 0.0)
    }
}

impl SdeDynamics for &LinearSde {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn drift(&self, tape: &mut Tape, x: Var, u: Var) -> Var {
        let at = tape.constant(self.a.transpose());
        let ax = tape.matmul(x, at);
        if self.b.cols() == 0 {
            return ax;
        }
        let bt = tape.constant(self.b.transpose());
        let bu = tape.matmul(u, bt);
        tape.add(ax, bu)
    }

    fn diffusion(&self, tape: &mut Tape, x: Var, _u: Var) -> Var {
        let c = tape.constant(Mat::row_vector(&self.sigma_const));
        let s = tape.constant(Mat::row_vector(&self.sigma_mult));
        let sx = tape.mul(x, s);
        tape.add(sx, c)
    }
}

impl Sde for LinearSde {
    type Bound<'a> = &'a LinearSde;

    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn control_dim(&self) -> usize {
        self.b.cols()
    }

    fn bind<'a>(&'a self, _tape: &mut Tape) -> &'a LinearSde {
        self
    }
}

/// One integration step for a batch of states.
pub fn step<D: SdeDynamics>(tape: &mut Tape, sys: &D, x: Var, u: Var, xi: &Mat, scheme: Scheme, dt: f64) -> Var {
    let f = sys.drift(tape, x, u);
    let fdt = tape.scale(f, dt);
    let xdet = tape.add(x, fdt);
    if scheme == Scheme::EulerOde {
        return xdet;
    }
    let sqdt = dt.sqrt();
    let sigma = sys.diffusion(tape, x, u);
    let dw = tape.constant(xi.map(|v| v * sqdt));
    let noise = tape.mul(sigma, dw);
    let em = tape.add(xdet, noise);
    if scheme == Scheme::EulerMaruyama {
        return em;
    }
    // sigma(x + f dt + sigma sqrt(dt)) - sigma(x) ~ sigma' sigma sqrt(dt) per diagonal entry.
    let shift = tape.scale(sigma, sqdt);
    let support = tape.add(xdet, shift);
    let sigma_s = sys.diffusion(tape, support, u);
    let diff = tape.sub(sigma_s, sigma);
    let coef = tape.constant(xi.map(|v| (v * v - 1.0) * dt / (2.0 * sqdt)));
    let corr = tape.mul(diff, coef);
    tape.add(em, corr)
}

/// Differentiable rollout of `controls.len()` steps from the rows of `x0`.
///
/// `noise[k]` holds the standard-normal draws of step `k`, one row per sample.
/// Returns the states after each step.
pub fn rollout<D: SdeDynamics>(
    tape: &mut Tape,
    sys: &D,
    x0: Var,
    controls: &[Var],
    noise: &[Mat],
    scheme: Scheme,
    dt: f64,
) -> Result<Vec<Var>> {
    let mut x = x0;
    let mut out = Vec::with_capacity(controls.len());
    for (k, &u) in controls.iter().enumerate() {
        x = step(tape, sys, x, u, &noise[k], scheme, dt);
        if !tape.value(x).is_finite() {
            return Err(Error::Diverged { step: k });
        }
        out.push(x);
    }
    Ok(out)
}

/// Per-step noise matrices for `rows` samples drawn from streams
/// `first_stream + row` of `seed`. A row's draws depend only on `(seed, stream)`.
pub fn particle_noise(seed: u64, first_stream: u64, rows: usize, horizon: usize, state_dim: usize) -> Vec<Mat> {
    let mut out = vec![Mat::zeros(rows, state_dim); horizon];
    for r in 0..rows {
        let draws = stream_gaussians(seed, first_stream + r as u64, horizon * state_dim);
        for (k, m) in out.iter_mut().enumerate() {
            m.row_mut(r).copy_from_slice(&draws[k * state_dim..(k + 1) * state_dim]);
        }
    }
    out
}

/// Sampled paths: `n_particles x (horizon + 1) x state_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub n_particles: usize,
    pub state_dim: usize,
    pub times: Vec<f64>,
    data: Vec<f64>,
}

impl PathBundle {
    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, particle: usize, step: usize) -> &[f64] {
        let off = (particle * self.times.len() + step) * self.state_dim;
        &self.data[off..off + self.state_dim]
    }

    pub fn final_states(&self) -> Vec<&[f64]> {
        (0..self.n_particles).map(|p| self.state(p, self.times.len() - 1)).collect()
    }

    /// Across-particle mean and (n-1) standard deviation at every step.
    pub fn moments(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let np = self.n_particles as f64;
        let mut means = Vec::with_capacity(self.n_steps());
        let mut stds = Vec::with_capacity(self.n_steps());
        for k in 0..self.n_steps() {
            let mut m = vec![0.0; self.state_dim];
            for p in 0..self.n_particles {
                for (a, b) in m.iter_mut().zip(self.state(p, k)) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|v| *v /= np);
            let mut s = vec![0.0; self.state_dim];
            if self.n_particles > 1 {
                for p in 0..self.n_particles {
                    for ((a, b), mu) in s.iter_mut().zip(self.state(p, k)).zip(&m) {
                        *a += (b - mu).powi(2);
                    }
                }
                s.iter_mut().for_each(|v| *v = (*v / (np - 1.0)).sqrt());
            }
            means.push(m);
            stds.push(s);
        }
        (means, stds)
    }

    /// CSV with columns `particle,step,t,x_0..x_{n-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.state_dim).map(|i| format!("x_{i}")).collect();
        writeln!(w, "particle,step,t,{}", cols.join(","))?;
        for p in 0..self.n_particles {
            for (k, t) in self.times.iter().enumerate() {
                let vals: Vec<String> = self.state(p, k).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{p},{k},{t},{}", vals.join(","))?;
            }
        }
        Ok(())
    }
}

/// Samples `cfg.n_particles` paths from `x0` under zero-order-hold controls.
///
/// Particle `p` uses noise stream `p` of `cfg.seed`.
pub fn sdesolve<S: Sde>(sys: &S, x0: &[f64], controls: &[Vec<f64>], cfg: &SolverConfig) -> Result<PathBundle> {
    cfg.validate()?;
    let n = sys.state_dim();
    let m = sys.control_dim();
    if x0.len() != n {
        return Err(Error::shape(format!("x0 has {} entries, state has {n}", x0.len())));
    }
    if controls.len() != cfg.horizon {
        return Err(Error::shape(format!("{} controls for horizon {}", controls.len(), cfg.horizon)));
    }
    if let Some(u) = controls.iter().find(|u| u.len() != m) {
        return Err(Error::shape(format!("control of size {} for control_dim {m}", u.len())));
    }
    let np = cfg.n_particles;
    let noise = if cfg.scheme == Scheme::EulerOde {
        vec![Mat::zeros(np, n); cfg.horizon]
    } else {
        particle_noise(cfg.seed, 0, np, cfg.horizon, n)
    };
    let steps = cfg.horizon + 1;
    let mut data = vec![0.0; np * steps * n];
    let mut x = Mat::zeros(np, n);
    for p in 0..np {
        x.row_mut(p).copy_from_slice(x0);
    }
    let store = |data: &mut Vec<f64>, x: &Mat, k: usize| {
        for p in 0..np {
            let off = (p * steps + k) * n;
            data[off..off + n].copy_from_slice(x.row(p));
        }
    };
    store(&mut data, &x, 0);
    let mut tape = Tape::new();
    for k in 0..cfg.horizon {
        tape.clear();
        let bound = sys.bind(&mut tape);
        let xv = tape.constant(x);
        let mut um = Mat::zeros(np, m);
        for p in 0..np {
            um.row_mut(p).copy_from_slice(&controls[k]);
        }
        let uv = tape.constant(um);
        let next = step(&mut tape, &bound, xv, uv, &noise[k], cfg.scheme, cfg.dt);
        x = tape.value(next).clone();
        if !x.is_finite() {
            return Err(Error::Diverged { step: k });
        }
        store(&mut data, &x, k + 1);
    }
    let times = (0..steps).map(|k| k as f64 * cfg.dt).collect();
    Ok(PathBundle { n_particles: np, state_dim: n, times, data })
}

/// Geometric Brownian motion problem with a pathwise exact solution.
#[derive(Clone, Copy, Debug)]
pub struct GbmProblem {
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub t_end: f64,
}

/// Mean absolute terminal error against the exact solution driven by the same
/// Brownian increments, for each step size.
pub fn strong_error(scheme: Scheme, gbm: GbmProblem, dt_list: &[f64], n_paths: usize, seed: u64) -> Result<Vec<f64>> {
    let sys = LinearSde::gbm(gbm.a, gbm.b);
    let mut errors = Vec::with_capacity(dt_list.len());
    for &dt in dt_list {
        let steps = (gbm.t_end / dt).round() as usize;
        if steps == 0 || ((steps as f64) * dt - gbm.t_end).abs() > 1e-9 {
            return Err(Error::config(format!("dt {dt} does not divide T = {}", gbm.t_end)));
        }
        let noise = particle_noise(seed, 0, n_paths, steps, 1);
        let mut tape = Tape::new();
        let mut x = Mat::filled(n_paths, 1, gbm.x0);
        let u = Mat::zeros(n_paths, 0);
        for xi in &noise {
            tape.clear();
            let xv = tape.constant(x);
            let uv = tape.constant(u.clone());
            let next = step(&mut tape, &&sys, xv, uv, xi, scheme, dt);
            x = tape.value(next).clone();
        }
        let sq = dt.sqrt();
        let mut total = 0.0;
        for p in 0..n_paths {
            let w: f64 = noise.iter().map(|m| m.get(p, 0) * sq).sum();
            let exact = gbm.x0 * ((gbm.a - 0.5 * gbm.b * gbm.b) * gbm.t_end + gbm.b * w).exp();
            total += (x.get(p, 0) - exact).abs();
        }
        errors.push(total / n_paths as f64);
    }
    Ok(errors)
}

/// Least-squares slope of `log(err)` against `log(dt)`.
pub fn loglog_slope(dts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mass_spring_spec, NeuralSdeModel};

    fn cfg(scheme: Scheme, dt: f64, horizon: usize, n_particles: usize) -> SolverConfig {
        SolverConfig { scheme, dt, horizon, n_particles, seed: 42 }
    }

    #[test]
    fn deterministic_linear_decay() {
        let sys = LinearSde::scalar(-1.0, 0.0, 0.0);
        let b = sdesolve(&sys, &[1.0], &vec![vec![]; 100], &cfg(Scheme::EulerMaruyama, 0.01, 100, 5)).unwrap();
        let finals = b.final_states();
        assert!((finals[0][0] - (-1f64).exp()).abs() < 2e-3);
        assert!(finals.iter().all(|f| f == &finals[0]));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let sys = LinearSde::ou(1.0, 0.5);
        let c = cfg(Scheme::MilsteinDf, 0.01, 30, 7);
        let a = sdesolve(&sys, &[1.0], &vec![vec![]; 30], &c).unwrap();
        let b = sdesolve(&sys, &[1.0], &vec![vec![]; 30], &c).unwrap();
        assert_eq!(a, b);
        for p in 0..7 {
            assert_eq!(a.state(p, 0), &[1.0]);
        }
    }

    #[test]
    fn more_particles_keep_existing_paths() {
        let sys = LinearSde::ou(1.0, 0.5);
        let a = sdesolve(&sys, &[1.0], &vec![vec![]; 20], &cfg(Scheme::EulerMaruyama, 0.01, 20, 3)).unwrap();
        let b = sdesolve(&sys, &[1.0], &vec![vec![]; 20], &cfg(Scheme::EulerMaruyama, 0.01, 20, 9)).unwrap();
        for p in 0..3 {
            for k in 0..21 {
                assert_eq!(a.state(p, k), b.state(p, k));
            }
        }
    }

    #[test]
    fn zero_diffusion_schemes_agree_bitwise() {
        let model = NeuralSdeModel::new(mass_spring_spec([0.0, 0.0]), 1).unwrap();
        let us = vec![vec![]; 25];
        let ode = sdesolve(&model, &[0.1, -0.05], &us, &cfg(Scheme::EulerOde, 0.01, 25, 3)).unwrap();
        for scheme in [Scheme::EulerMaruyama, Scheme::MilsteinDf] {
            let other = sdesolve(&model, &[0.1, -0.05], &us, &cfg(scheme, 0.01, 25, 3)).unwrap();
            assert_eq!(ode, other);
        }
    }

    #[test]
    fn constant_diffusion_milstein_equals_em() {
        let sys = LinearSde::ou(0.7, 0.3);
        let us = vec![vec![]; 40];
        let em = sdesolve(&sys, &[0.5], &us, &cfg(Scheme::EulerMaruyama, 0.02, 40, 4)).unwrap();
        let mil = sdesolve(&sys, &[0.5], &us, &cfg(Scheme::MilsteinDf, 0.02, 40, 4)).unwrap();
        for p in 0..4 {
            for k in 0..41 {
                assert!((em.state(p, k)[0] - mil.state(p, k)[0]).abs() <= 1e-10 * (k as f64).max(1.0));
            }
        }
    }

    #[test]
    fn divergence_reports_step() {
        let sys = LinearSde::scalar(1e6, 0.0, 0.0);
        let err = sdesolve(&sys, &[1.0], &vec![vec![]; 200], &cfg(Scheme::EulerOde, 1.0, 200, 1)).unwrap_err();
        assert!(matches!(err, Error::Diverged { step } if step > 0));
    }

    #[test]
    fn noiseless_gbm_schemes_coincide() {
        let g = GbmProblem { a: 1.0, b: 0.0, x0: 1.0, t_end: 1.0 };
        let dts = [1.0 / 16.0, 1.0 / 32.0];
        let ode = strong_error(Scheme::EulerOde, g, &dts, 10, 1).unwrap();
        assert_eq!(strong_error(Scheme::EulerMaruyama, g, &dts, 10, 1).unwrap(), ode);
        assert_eq!(strong_error(Scheme::MilsteinDf, g, &dts, 10, 1).unwrap(), ode);
    }

    #[test]
    fn shape_errors() {
        let sys = LinearSde::ou(1.0, 0.5);
        assert!(matches!(
            sdesolve(&sys, &[1.0], &vec![vec![]; 3], &cfg(Scheme::EulerOde, 0.1, 4, 1)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            sdesolve(&sys, &[1.0], &vec![vec![]; 4], &cfg(Scheme::EulerOde, 0.0, 4, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let sys = LinearSde::ou(1.0, 0.5);
        let b = sdesolve(&sys, &[1.0], &vec![vec![]; 2], &cfg(Scheme::EulerMaruyama, 0.5, 2, 2)).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "particle,step,t,x_0");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,0,1"));
    }
}
