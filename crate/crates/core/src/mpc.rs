//! Receding-horizon stochastic MPC on a learned SDE, solved by projected
//! gradient descent with Nesterov momentum and an adaptive step.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::{derive_seed, Grads, Mat, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::solvers::{particle_noise, rollout, Scheme, Sde};

/// Cost reported when a planned rollout diverges.
pub const DIVERGED_COST: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    /// Diagonal state weights.
    pub q: Vec<f64>,
    /// Diagonal control weights.
    pub r: Vec<f64>,
    pub horizon_steps: usize,
    /// Model step and control period.
    pub dt: f64,
    #[serde(default = "one")]
    pub n_particles: usize,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
    pub iters: usize,
    pub lr0: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// State coordinates whose tracking residual is wrapped to `[-pi, pi)`.
    #[serde(default)]
    pub angle_dims: Vec<usize>,
    /// Record solve wall time in episode logs; off keeps logs reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_scheme() -> Scheme {
    Scheme::EulerMaruyama
}

impl MpcConfig {
    pub fn horizon_s(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn validate(&self, state_dim: usize, control_dim: usize) -> Result<()> {
        if self.q.len() != state_dim || self.r.len() != control_dim {
            return Err(Error::config(format!(
                "mpc: q needs {state_dim} entries and r {control_dim}, got {} and {}",
                self.q.len(),
                self.r.len()
            )));
        }
        if self.control_lo.len() != control_dim || self.control_hi.len() != control_dim {
            return Err(Error::config("mpc: control bounds must match the control dimension"));
        }
        if self.q.iter().chain(&self.r).any(|&w| !(w >= 0.0)) {
            return Err(Error::config("mpc: q and r entries must be >= 0"));
        }
        if self.control_lo.iter().zip(&self.control_hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::config("mpc: control_lo must not exceed control_hi"));
        }
        if self.iters == 0 || self.horizon_steps == 0 || self.n_particles == 0 {
            return Err(Error::config("mpc: iters, horizon_steps and n_particles must be >= 1"));
        }
        if !(self.dt > 0.0) || !(self.lr0 > 0.0) {
            return Err(Error::config("mpc: dt and lr0 must be > 0"));
        }
        if self.angle_dims.iter().any(|&d| d >= state_dim) {
            return Err(Error::config("mpc: angle_dims out of range"));
        }
        Ok(())
    }

    fn project(&self, u: &mut [f64]) {
        let m = self.control_lo.len();
        for (i, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.control_lo[i % m], self.control_hi[i % m]);
        }
    }
}

/// Reference states at increasing times, linearly interpolated and held at the ends.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrack {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl ReferenceTrack {
    pub fn constant(state: Vec<f64>, duration: f64) -> Self {
        ReferenceTrack { times: vec![0.0, duration], states: vec![state.clone(), state] }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.states.len() {
            return Err(Error::config("reference needs matching, non-empty times and states"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("reference times must increase strictly"));
        }
        if self.states.iter().any(|s| s.len() != state_dim || s.iter().any(|v| !v.is_finite())) {
            return Err(Error::config(format!("reference states must be finite with {state_dim} entries")));
        }
        Ok(())
    }

    pub fn covers(&self, duration: f64) -> bool {
        self.times.first().is_some_and(|&t| t <= 0.0) && self.times.last().is_some_and(|&t| t >= duration)
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            return self.states[0].clone();
        }
        if i == self.times.len() {
            return self.states[i - 1].clone();
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        self.states[i - 1].iter().zip(&self.states[i]).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// References for steps `1..=h` after time `t`.
    pub fn window(&self, t: f64, dt: f64, h: usize) -> Vec<Vec<f64>> {
        (1..=h).map(|k| self.at(t + k as f64 * dt)).collect()
    }

    /// CSV with a header line and rows `t,x_0,..,x_{n-1}`.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::config("reference file is empty"))?;
        let width = header.split(',').count();
        if width < 2 || header.split(',').next().map(str::trim) != Some("t") {
            return Err(Error::config("reference header must be `t,x_0,...`"));
        }
        let (mut times, mut states) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config(format!("reference row {}: {e}", i + 1)))?;
            if vals.len() != width {
                return Err(Error::config(format!("reference row {} has {} fields, expected {width}", i + 1, vals.len())));
            }
            times.push(vals[0]);
            states.push(vals[1..].to_vec());
        }
        let track = ReferenceTrack { times, states };
        track.validate(width - 1)?;
        Ok(track)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let mut s = String::from("t");
        for i in 0..n {
            s.push_str(&format!(",x_{i}"));
        }
        s.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            s.push_str(&t.to_string());
            for v in x {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Value and control gradient of the sampled tracking cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostEval {
    pub cost: f64,
    /// Same layout as the controls, `horizon_steps x control_dim` row-major.
    pub grad: Vec<f64>,
    pub diverged: bool,
}

/// Monte-Carlo tracking cost with frozen noise `noise`, one matrix per step.
fn cost_with_noise<S: Sde>(
    sys: &S,
    x0: &[f64],
    controls: &[f64],
    refs: &[Vec<f64>],
    noise: &[Mat],
    cfg: &MpcConfig,
) -> Result<CostEval> {
    let (n, m, h, np) = (sys.state_dim(), sys.control_dim(), cfg.horizon_steps, cfg.n_particles);
    let mut tape = Tape::new();
    let bound = sys.bind(&mut tape);
    let mut x0m = Mat::zeros(np, n);
    for p in 0..np {
        x0m.row_mut(p).copy_from_slice(x0);
    }
    let x0v = tape.constant(x0m);
    let mut u_leaves = Vec::with_capacity(h);
    for k in 0..h {
        let mut um = Mat::zeros(np, m);
        for p in 0..np {
            um.row_mut(p).copy_from_slice(&controls[k * m..(k + 1) * m]);
        }
        u_leaves.push(tape.leaf(um));
    }
    let path = match rollout(&mut tape, &bound, x0v, &u_leaves, noise, cfg.scheme, cfg.dt) {
        Ok(p) => p,
        Err(Error::Diverged { .. }) => return Ok(CostEval { cost: DIVERGED_COST, grad: vec![0.0; h * m], diverged: true }),
        Err(e) => return Err(e),
    };
    let q = tape.constant(Mat::row_vector(&cfg.q));
    let r = tape.constant(Mat::row_vector(&cfg.r));
    let mut terms: Vec<Var> = Vec::with_capacity(2 * h);
    for (k, &xk) in path.iter().enumerate() {
        let refk = tape.constant(Mat::row_vector(&refs[k]));
        let mut res = tape.sub(xk, refk);
        if !cfg.angle_dims.is_empty() {
            let cols: Vec<Var> = (0..n)
                .map(|d| {
                    let c = tape.col(res, d);
                    if cfg.angle_dims.contains(&d) { tape.unary(Unary::WrapAngle, c) } else { c }
                })
                .collect();
            res = tape.concat_cols(&cols);
        }
        let sq = tape.square(res);
        let w = tape.mul(sq, q);
        terms.push(tape.sum(w));
        if m > 0 {
            let uk = tape.square(u_leaves[k]);
            let wu = tape.mul(uk, r);
            terms.push(tape.sum(wu));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    let total = tape.scale(total, 1.0 / np as f64);
    let cost = tape.value(total).item();
    let grads: Grads = tape.backward(total)?;
    let mut grad = vec![0.0; h * m];
    for (k, &u) in u_leaves.iter().enumerate() {
        let g = grads.wrt(&tape, u);
        for p in 0..np {
            for (j, v) in g.row(p).iter().enumerate() {
                grad[k * m + j] += v;
            }
        }
    }
    if !cost.is_finite() {
        return Ok(CostEval { cost: DIVERGED_COST, grad: vec![0.0; h * m], diverged: true });
    }
    Ok(CostEval { cost, grad, diverged: false })
}

fn solve_noise(cfg: &MpcConfig, state_dim: usize, seed: u64) -> Vec<Mat> {
    if cfg.scheme == Scheme::EulerOde {
        vec![Mat::zeros(cfg.n_particles, state_dim); cfg.horizon_steps]
    } else {
        particle_noise(seed, 0, cfg.n_particles, cfg.horizon_steps, state_dim)
    }
}

fn check_inputs<S: Sde>(sys: &S, x0: &[f64], controls: &[f64], refs: &[Vec<f64>], cfg: &MpcConfig) -> Result<()> {
    cfg.validate(sys.state_dim(), sys.control_dim())?;
    if x0.len() != sys.state_dim() {
        return Err(Error::shape("mpc: x0 has the wrong dimension"));
    }
    if controls.len() != cfg.horizon_steps * sys.control_dim() {
        return Err(Error::shape("mpc: controls must hold horizon_steps x control_dim values"));
    }
    if refs.len() != cfg.horizon_steps || refs.iter().any(|r| r.len() != sys.state_dim()) {
        return Err(Error::shape("mpc: reference window must hold horizon_steps states"));
    }
    Ok(())
}

/// `E[sum_k (x_k - ref_k)' Q (x_k - ref_k) + u_k' R u_k]` over `n_particles`
/// paths drawn from `cfg.seed`, with its gradient in the controls.
/// A diverging rollout costs [`DIVERGED_COST`] with a zero gradient.
pub fn mpc_cost<S: Sde>(sys: &S, x0: &[f64], controls: &[f64], refs: &[Vec<f64>], cfg: &MpcConfig) -> Result<CostEval> {
    check_inputs(sys, x0, controls, refs, cfg)?;
    let noise = solve_noise(cfg, sys.state_dim(), cfg.seed);
    cost_with_noise(sys, x0, controls, refs, &noise, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgResult {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Cost of the start point followed by every accepted iterate.
    pub accepted: Vec<f64>,
}

/// Projected gradient descent with Nesterov momentum. A step that fails to
/// lower the best cost is rejected, halves the step size and restarts the
/// momentum; an accepted step grows it by 1.1. Returns the best iterate.
pub fn projected_nesterov(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    project: impl Fn(&mut [f64]),
    start: &[f64],
    iters: usize,
    lr0: f64,
) -> Result<PgResult> {
    let mut x = start.to_vec();
    project(&mut x);
    let (mut fx, mut gx) = f(&x)?;
    let mut accepted = vec![fx];
    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut t = 1.0f64;
    let mut lr = lr0;
    for _ in 0..iters {
        let mut cand: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - lr * g).collect();
        project(&mut cand);
        let (fc, gc) = f(&cand)?;
        if fc < fx {
            lr *= 1.1;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            let mut y_next: Vec<f64> = cand.iter().zip(&x).map(|(c, p)| c + beta * (c - p)).collect();
            project(&mut y_next);
            t = t_next;
            x = cand;
            fx = fc;
            gx = gc;
            accepted.push(fx);
            if beta == 0.0 {
                y = x.clone();
                gy = gx.clone();
            } else {
                let (_, g) = f(&y_next)?;
                y = y_next;
                gy = g;
            }
        } else {
            lr *= 0.5;
            t = 1.0;
            y = x.clone();
            gy = gx.clone();
        }
    }
    Ok(PgResult { x, cost: fx, accepted })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    /// `horizon_steps x control_dim`, row-major.
    pub controls: Vec<f64>,
    pub cost: f64,
    pub accepted: Vec<f64>,
    pub diverged: bool,
}

/// Optimizes the control sequence from `warm_start` with the noise frozen
/// for the whole solve.
pub fn solve_controls<S: Sde>(
    sys: &S,
    x0: &[f64],
    refs: &[Vec<f64>],
    warm_start: &[f64],
    cfg: &MpcConfig,
) -> Result<SolveResult> {
    check_inputs(sys, x0, warm_start, refs, cfg)?;
    let noise = solve_noise(cfg, sys.state_dim(), cfg.seed);
    let mut diverged = false;
    let res = projected_nesterov(
        |u| {
            let e = cost_with_noise(sys, x0, u, refs, &noise, cfg)?;
            diverged |= e.diverged;
            Ok((e.cost, e.grad))
        },
        |u| cfg.project(u),
        warm_start,
        cfg.iters,
        cfg.lr0,
    )?;
    Ok(SolveResult { controls: res.x, cost: res.cost, accepted: res.accepted, diverged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub t: f64,
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub planned_cost: f64,
    pub solve_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<EpisodeStep>,
    /// State after the last applied control.
    pub final_state: Vec<f64>,
    /// Set when the environment produced a non-finite state.
    pub terminated_early: bool,
}

impl EpisodeLog {
    /// CSV `t,x_i..,u_j..,planned_cost,solve_ms`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.final_state.len();
        let m = self.steps.first().map_or(0, |s| s.control.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        header.extend((0..m).map(|j| format!("u_{j}")));
        header.extend(["planned_cost".into(), "solve_ms".into()]);
        writeln!(w, "{}", header.join(","))?;
        for s in &self.steps {
            let fields: Vec<String> = std::iter::once(s.t)
                .chain(s.state.iter().copied())
                .chain(s.control.iter().copied())
                .chain([s.planned_cost, s.solve_ms])
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Closed loop: at every control period, solve from the true state with the
/// shifted previous plan as warm start and apply the first control to `env_step`.
pub fn run_episode<S: Sde>(
    sys: &S,
    mut env_step: impl FnMut(&[f64], &[f64]) -> Vec<f64>,
    x0: &[f64],
    reference: &ReferenceTrack,
    cfg: &MpcConfig,
    episode_s: f64,
) -> Result<EpisodeLog> {
    let (n, m, h) = (sys.state_dim(), sys.control_dim(), cfg.horizon_steps);
    cfg.validate(n, m)?;
    reference.validate(n)?;
    let steps = (episode_s / cfg.dt).round() as usize;
    let mut plan = vec![0.0; h * m];
    cfg.project(&mut plan);
    let mut x = x0.to_vec();
    let mut log = EpisodeLog::default();
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let refs = reference.window(t, cfg.dt, h);
        let step_cfg = MpcConfig { seed: derive_seed(cfg.seed, &[k as u64]), ..cfg.clone() };
        let clock = Instant::now();
        let sol = solve_controls(sys, &x, &refs, &plan, &step_cfg)?;
        let solve_ms = if cfg.record_wall_time { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let u = sol.controls[..m].to_vec();
        log.steps.push(EpisodeStep { t, state: x.clone(), control: u.clone(), planned_cost: sol.cost, solve_ms });
        x = env_step(&x, &u);
        plan = shift_plan(&sol.controls, m);
        if x.iter().any(|v| !v.is_finite()) {
            log.terminated_early = true;
            break;
        }
    }
    log.final_state = x;
    Ok(log)
}

/// `[u_1, .., u_{H-1}, u_{H-1}]` from `[u_0, .., u_{H-1}]`.
pub fn shift_plan(plan: &[f64], m: usize) -> Vec<f64> {
    if plan.len() <= m {
        return plan.to_vec();
    }
    let mut out = plan[m..].to_vec();
    out.extend_from_slice(&plan[plan.len() - m..]);
    out
}
