//! Grid maps of the distance network and of prediction spread, and open-loop
//! prediction reports against recorded trajectories.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::diffcore::Mat;
use crate::error::{Error, Result};
use crate::model::NeuralSdeModel;
use crate::solvers::{sdesolve, Sde, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    /// Coordinate of the evaluated point that this axis sweeps.
    pub dim: usize,
    pub min: f64,
    pub max: f64,
    pub n_cells: usize,
}

impl GridAxis {
    pub fn center(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * (self.max - self.min) / self.n_cells as f64
    }
}

/// Cell-centred grid. Coordinates not swept by an axis take their value from `fixed`
/// (zero when `fixed` is empty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
    #[serde(default)]
    pub fixed: Vec<f64>,
}

impl GridSpec {
    /// `n x n` cells over `[lo, hi]^2` on coordinates 0 and 1.
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        let axis = |dim| GridAxis { dim, min: lo, max: hi, n_cells: n };
        GridSpec { axes: vec![axis(0), axis(1)], fixed: Vec::new() }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::config("grid needs at least one axis"));
        }
        if !self.fixed.is_empty() && self.fixed.len() != dim {
            return Err(Error::config(format!("grid fixed point has {} entries, expected {dim}", self.fixed.len())));
        }
        for a in &self.axes {
            if a.dim >= dim {
                return Err(Error::config(format!("grid axis on coordinate {} of a {dim}-dimensional point", a.dim)));
            }
            if a.n_cells == 0 || !(a.min < a.max) {
                return Err(Error::config("grid axes need n_cells >= 1 and min < max"));
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.axes.iter().map(|a| a.n_cells).product()
    }

    /// Cell indices in row-major order: the last axis varies fastest.
    pub fn cell_index(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        let mut idx = vec![0; self.axes.len()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            idx[k] = rem % a.n_cells;
            rem /= a.n_cells;
        }
        idx
    }

    /// Full `dim`-dimensional point at every cell centre, row-major.
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        self.validate(dim)?;
        let base = if self.fixed.is_empty() { vec![0.0; dim] } else { self.fixed.clone() };
        Ok((0..self.n_cells())
            .map(|c| {
                let mut p = base.clone();
                for (a, i) in self.axes.iter().zip(self.cell_index(c)) {
                    p[a.dim] = a.center(i);
                }
                p
            })
            .collect())
    }
}

/// Scalar values at the cells of a grid. Invalid cells hold NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    /// Swept coordinates of each cell centre.
    pub coords: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl Field {
    fn from_points(grid: &GridSpec, points: &[Vec<f64>], values: Vec<f64>) -> Self {
        let coords = points.iter().map(|p| grid.axes.iter().map(|a| p[a.dim]).collect()).collect();
        Field { coords, values }
    }

    pub fn valid(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.coords.iter().zip(&self.values).filter(|(_, v)| v.is_finite()).map(|(c, &v)| (c.as_slice(), v))
    }

    /// CSV with one row per cell: `cell_x,cell_y,value` for 2-D grids.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.coords.first().map_or(0, Vec::len);
        let names: Vec<String> = match k {
            1 => vec!["cell_x".into()],
            2 => vec!["cell_x".into(), "cell_y".into()],
            _ => (0..k).map(|i| format!("cell_{i}")).collect(),
        };
        writeln!(w, "{},value", names.join(","))?;
        for (c, v) in self.coords.iter().zip(&self.values) {
            let cs: Vec<String> = c.iter().map(f64::to_string).collect();
            writeln!(w, "{},{v}", cs.join(","))?;
        }
        Ok(())
    }
}

/// `d_psi` at every cell centre of a grid over the distance-network features.
pub fn dmap(model: &NeuralSdeModel, grid: &GridSpec) -> Result<Field> {
    let k = model.spec.diffusion.features.dim();
    let points = grid.points(k)?;
    let values = model.d_psi_features(&Mat::from_rows(&points)?);
    Ok(Field::from_points(grid, &points, values))
}

/// Trace of the sample covariance of the rows of `x`.
pub fn covariance_trace(x: &[&[f64]]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let dim = x[0].len();
    (0..dim)
        .map(|d| {
            // Centred on the first row so identical rows give exactly zero.
            let dev: Vec<f64> = x.iter().map(|r| r[d] - x[0][d]).collect();
            let mean = dev.iter().sum::<f64>() / n as f64;
            dev.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .sum()
}

/// Spread of `n_particles` predictions of `horizon_s` seconds started at each
/// cell centre in state space, with zero controls. Diverged cells are NaN.
pub fn uncertainty_grid<S: Sde>(
    model: &S,
    grid: &GridSpec,
    horizon_s: f64,
    n_particles: usize,
    cfg: &SolverConfig,
) -> Result<Field> {
    let n = model.state_dim();
    let points = grid.points(n)?;
    let horizon = (horizon_s / cfg.dt).round() as usize;
    let cfg = SolverConfig { horizon, n_particles, ..*cfg };
    cfg.validate()?;
    let controls = vec![vec![0.0; model.control_dim()]; horizon];
    let values = points
        .iter()
        .map(|x0| match sdesolve(model, x0, &controls, &cfg) {
            Ok(paths) => Ok(covariance_trace(&paths.final_states())),
            Err(Error::Diverged { .. }) => Ok(f64::NAN),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Field::from_points(grid, &points, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    /// Root mean square error of the mean path over all steps and states.
    pub rmse: f64,
    pub coverage_3sigma: f64,
}

impl PredictionReport {
    /// Fraction of steps at which every state lies within `mean ± k std`.
    pub fn coverage(&self, k: f64) -> f64 {
        let inside = (0..self.times.len())
            .filter(|&s| {
                self.truth[s].iter().zip(&self.mean[s]).zip(&self.std[s]).all(|((t, m), sd)| (t - m).abs() <= k * sd)
            })
            .count();
        inside as f64 / self.times.len() as f64
    }
}

/// Open-loop predictions over consecutive windows of `window_s` seconds: each
/// starts from the window's first recorded state and replays its controls.
/// The last window may be shorter; a window longer than the trajectory is truncated.
pub fn openloop_report<S: Sde>(
    model: &S,
    trajectory: &Trajectory,
    window_s: f64,
    cfg: &SolverConfig,
) -> Result<Vec<PredictionReport>> {
    if trajectory.len() < 2 {
        return Err(Error::shape("open-loop evaluation needs at least two samples"));
    }
    let w = ((window_s / cfg.dt).round() as usize).max(1);
    let mut reports = Vec::new();
    let mut start = 0;
    while start + 1 < trajectory.len() {
        let steps = w.min(trajectory.len() - 1 - start);
        let wcfg = SolverConfig { horizon: steps, ..*cfg };
        let controls = trajectory.u[start..start + steps].to_vec();
        let paths = sdesolve(model, &trajectory.x[start], &controls, &wcfg)?;
        let (mean, std) = paths.moments();
        let truth = trajectory.x[start..=start + steps].to_vec();
        let times = trajectory.t[start..=start + steps].to_vec();
        let sq: f64 = mean.iter().zip(&truth).flat_map(|(m, t)| m.iter().zip(t).map(|(a, b)| (a - b).powi(2))).sum();
        let rmse = (sq / (mean.len() * model.state_dim()) as f64).sqrt();
        let mut rep = PredictionReport { times, mean, std, truth, rmse, coverage_3sigma: 0.0 };
        rep.coverage_3sigma = rep.coverage(3.0);
        reports.push(rep);
        start += steps;
    }
    Ok(reports)
}

/// One CSV for all windows: `window,step,t,mean_i..,std_i..,truth_i..`.
pub fn write_reports_csv<W: Write>(mut w: W, reports: &[PredictionReport]) -> Result<()> {
    let n = reports.first().map_or(0, |r| r.mean[0].len());
    let cols = |p: &str| (0..n).map(|i| format!("{p}_{i}")).collect::<Vec<_>>().join(",");
    writeln!(w, "window,step,t,{},{},{}", cols("mean"), cols("std"), cols("truth"))?;
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    for (i, r) in reports.iter().enumerate() {
        for s in 0..r.times.len() {
            writeln!(w, "{i},{s},{},{},{},{}", r.times[s], join(&r.mean[s]), join(&r.std[s]), join(&r.truth[s]))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub t0: f64,
    pub n_steps: usize,
    pub rmse: f64,
    pub coverage_3sigma: f64,
}

pub fn summarize_reports(reports: &[PredictionReport]) -> Vec<WindowSummary> {
    reports
        .iter()
        .map(|r| WindowSummary { t0: r.times[0], n_steps: r.times.len() - 1, rmse: r.rmse, coverage_3sigma: r.coverage_3sigma })
        .collect()
}
