//! Training losses: the sampled data fit, the distance-gradient penalty, the
//! local strong-convexity hinge, the `1/mu` penalty and their weighted sum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Segment;
use crate::diffcore::{derive_seed, stream_gaussians, Mat, ParamVector, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::model::{is_distance_param, BoundModel, NeuralSdeModel, SdeDynamics};
use crate::solvers::{particle_noise, rollout, Scheme, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lam: f64,
    /// Diagonal of the observation covariance. `None` means "estimate from the dataset".
    #[serde(default)]
    pub s_diag: Option<Vec<f64>>,
    pub rho: f64,
    #[serde(default = "default_pairs")]
    pub n_convex_pairs: usize,
    /// Treat the distance network as constant inside the data term, so it is
    /// shaped only by the gradient, convexity and mu losses.
    #[serde(default)]
    pub detach_distance_in_data: bool,
}

fn default_pairs() -> usize {
    8
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.01,
            gamma: 0.01,
            lam: 1.0,
            s_diag: None,
            rho: 0.05,
            n_convex_pairs: 8,
            detach_distance_in_data: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lam", self.lam)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(format!("loss weight {name} must be finite and >= 0")));
            }
        }
        if let Some(s) = &self.s_diag {
            if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::config("s_diag entries must be finite and > 0"));
            }
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::config("rho must be finite and > 0"));
        }
        if self.n_convex_pairs == 0 {
            return Err(Error::config("n_convex_pairs must be >= 1"));
        }
        Ok(())
    }

    fn s_diag_for(&self, state_dim: usize) -> Result<Vec<f64>> {
        let s = self.s_diag.clone().unwrap_or_else(|| vec![1.0; state_dim]);
        if s.len() != state_dim {
            return Err(Error::shape(format!("s_diag has {} entries for state dim {state_dim}", s.len())));
        }
        Ok(s)
    }
}

/// A scalar field `d` over feature rows with its input gradient and a
/// per-row strong-convexity constant.
pub trait DistanceField {
    /// Column of values, one per row of `feats`.
    fn d(&self, tape: &mut Tape, feats: Var) -> Var;
    /// Values and gradients with respect to `feats` (same shape as `feats`).
    fn d_with_grad(&self, tape: &mut Tape, feats: Var) -> (Var, Var);
    fn mu(&self, tape: &mut Tape, feats: Var) -> Var;
}

impl DistanceField for BoundModel<'_> {
    fn d(&self, tape: &mut Tape, feats: Var) -> Var {
        self.d_psi(tape, feats)
    }

    fn d_with_grad(&self, tape: &mut Tape, feats: Var) -> (Var, Var) {
        self.d_psi_with_grad(tape, feats)
    }

    fn mu(&self, tape: &mut Tape, feats: Var) -> Var {
        BoundModel::mu(self, tape, feats)
    }
}

/// Sum of the sampled data-fit terms of every segment.
///
/// Sample `p` of segment `b` uses noise stream `b * n_particles + p` of `seed`.
/// Each segment contributes `(1/n_p) sum_j sum_p r' S^-1 r` over its predicted steps.
#[allow(clippy::too_many_arguments)]
pub fn data_loss_on_tape<D: SdeDynamics>(
    tape: &mut Tape,
    sys: &D,
    segments: &[Segment],
    scheme: Scheme,
    dt: f64,
    n_particles: usize,
    seed: u64,
    s_diag: &[f64],
) -> Result<Var> {
    let n = sys.state_dim();
    if segments.is_empty() {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    let h = segments[0].horizon();
    let m = segments[0].u.cols();
    if s_diag.len() != n {
        return Err(Error::shape(format!("s_diag has {} entries for state dim {n}", s_diag.len())));
    }
    for s in segments {
        if s.horizon() != h || s.x.rows() != h + 1 || s.x.cols() != n || s.u.cols() != m {
            return Err(Error::shape("segments in a batch must share horizon and widths"));
        }
    }
    let rows = segments.len() * n_particles;
    let row_seg = |r: usize| &segments[r / n_particles];
    let gather = |src: &dyn Fn(&Segment) -> &[f64], width: usize| {
        let mut out = Mat::zeros(rows, width);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(src(row_seg(r)));
        }
        out
    };
    let x0 = tape.constant(gather(&|s| s.x.row(0), n));
    let controls: Vec<Var> = (0..h)
        .map(|k| {
            let u = gather(&|s| s.u.row(k), m);
            tape.constant(u)
        })
        .collect();
    let noise = if scheme == Scheme::EulerOde {
        vec![Mat::zeros(rows, n); h]
    } else {
        particle_noise(seed, 0, rows, h, n)
    };
    let path = rollout(tape, sys, x0, &controls, &noise, scheme, dt)?;
    let inv_s = tape.constant(Mat::row_vector(&s_diag.iter().map(|s| 1.0 / s).collect::<Vec<_>>()));
    let mut acc: Option<Var> = None;
    for (k, &xk) in path.iter().enumerate() {
        let target = tape.constant(gather(&|s| s.x.row(k + 1), n));
        let r = tape.sub(xk, target);
        let r2 = tape.square(r);
        let w = tape.mul(r2, inv_s);
        let term = tape.sum(w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let total = acc.expect("horizon >= 1");
    Ok(tape.scale(total, 1.0 / n_particles as f64))
}

/// `sum_i ||grad d(feats_i)||_2`.
pub fn grad_loss_on_tape<F: DistanceField>(tape: &mut Tape, field: &F, feats: Var) -> Var {
    let (_, g) = field.d_with_grad(tape, feats);
    let norms = tape.row_norm(g);
    tape.sum(norms)
}

/// Column of `d(z') - d(z) - grad d(z)'(z' - z) - mu(anchor) ||z' - z||^2`, one row per pair.
pub fn convexity_gap_on_tape<F: DistanceField>(tape: &mut Tape, field: &F, anchors: Var, z: Var, zp: Var) -> Var {
    let (dz, gz) = field.d_with_grad(tape, z);
    let dzp = field.d(tape, zp);
    let delta = tape.sub(zp, z);
    let lin = tape.mul(gz, delta);
    let lin = tape.sum_cols(lin);
    let sq = tape.square(delta);
    let sq = tape.sum_cols(sq);
    let mu = field.mu(tape, anchors);
    let quad = tape.mul(mu, sq);
    let f = tape.sub(dzp, dz);
    let f = tape.sub(f, lin);
    tape.sub(f, quad)
}

/// Sampled pairs around each anchor row, drawn from `N(anchor, diag(rho)^2)`.
///
/// The draws for an anchor are keyed by `seed` and the anchor's own bits, so
/// they do not depend on where the anchor sits in the batch.
/// Returns `(anchor rows, z, z')`, `n_pairs` consecutive rows per anchor.
pub fn sample_pairs(anchors: &Mat, rho: &[f64], n_pairs: usize, seed: u64) -> (Mat, Mat, Mat) {
    let k = anchors.cols();
    let rows = anchors.rows() * n_pairs;
    let (mut a, mut z, mut zp) = (Mat::zeros(rows, k), Mat::zeros(rows, k), Mat::zeros(rows, k));
    for i in 0..anchors.rows() {
        let anchor = anchors.row(i);
        let keys: Vec<u64> = anchor.iter().map(|v| v.to_bits()).collect();
        let draws = stream_gaussians(derive_seed(seed, &keys), 0, 2 * n_pairs * k);
        for j in 0..n_pairs {
            let r = i * n_pairs + j;
            a.row_mut(r).copy_from_slice(anchor);
            for c in 0..k {
                z.set(r, c, anchor[c] + rho[c] * draws[(2 * j) * k + c]);
                zp.set(r, c, anchor[c] + rho[c] * draws[(2 * j + 1) * k + c]);
            }
        }
    }
    (a, z, zp)
}

/// `sum hinge^2(F)` over `n_pairs` sampled pairs per anchor feature row.
pub fn convex_loss_on_tape<F: DistanceField>(
    tape: &mut Tape,
    field: &F,
    anchors: &Mat,
    rho: &[f64],
    n_pairs: usize,
    seed: u64,
) -> Var {
    let (a, z, zp) = sample_pairs(anchors, rho, n_pairs, seed);
    let (a, z, zp) = (tape.constant(a), tape.constant(z), tape.constant(zp));
    let f = convexity_gap_on_tape(tape, field, a, z, zp);
    let h = tape.unary(Unary::HingeSq, f);
    tape.sum(h)
}

/// `sum_i 1 / mu(feats_i)`.
pub fn mu_loss_on_tape<F: DistanceField>(tape: &mut Tape, field: &F, feats: Var) -> Result<Var> {
    let mu = field.mu(tape, feats);
    if tape.value(mu).as_slice().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Contract("strong-convexity constant must be positive".into()));
    }
    let inv = tape.unary(Unary::Recip, mu);
    Ok(tape.sum(inv))
}

fn feature_rows(model: &NeuralSdeModel, z: &Mat) -> Result<Mat> {
    model.spec.feature_rows(z)
}

/// Data loss of one segment under the model, with the solver's seed, scheme and horizon.
pub fn data_loss(model: &NeuralSdeModel, segment: &Segment, cfg: &SolverConfig, s_diag: &[f64]) -> Result<f64> {
    cfg.validate()?;
    if segment.horizon() < cfg.horizon {
        return Err(Error::shape(format!(
            "segment has {} steps, solver horizon is {}",
            segment.horizon(),
            cfg.horizon
        )));
    }
    let seg = truncate(segment, cfg.horizon)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v = data_loss_on_tape(&mut tape, &bound, &[seg], cfg.scheme, cfg.dt, cfg.n_particles, cfg.seed, s_diag)?;
    Ok(tape.value(v).item())
}

fn truncate(segment: &Segment, horizon: usize) -> Result<Segment> {
    if segment.horizon() == horizon {
        return Ok(segment.clone());
    }
    let x: Vec<Vec<f64>> = (0..=horizon).map(|k| segment.x.row(k).to_vec()).collect();
    let u: Vec<Vec<f64>> = (0..horizon).map(|k| segment.u.row(k).to_vec()).collect();
    let u = if u.is_empty() || segment.u.cols() == 0 { Mat::zeros(horizon, segment.u.cols()) } else { Mat::from_rows(&u)? };
    Ok(Segment { x: Mat::from_rows(&x)?, u })
}

fn with_features(model: &NeuralSdeModel, z: &Mat, f: impl FnOnce(&mut Tape, &BoundModel, Var) -> Result<Var>) -> Result<f64> {
    let feats = feature_rows(model, z)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fv = tape.constant(feats);
    let out = f(&mut tape, &bound, fv)?;
    Ok(tape.value(out).item())
}

/// `sum_i ||grad_z d_psi(z_i)||` over the rows of `z` (`[x, u]` per row).
pub fn grad_loss(model: &NeuralSdeModel, z: &Mat) -> Result<f64> {
    with_features(model, z, |t, b, f| Ok(grad_loss_on_tape(t, b, f)))
}

/// Strong-convexity gap of the pair `(z, z')` with `mu` taken at `anchor`.
pub fn convexity_gap(model: &NeuralSdeModel, anchor: &[f64], z: &[f64], zp: &[f64]) -> Result<f64> {
    let pts = Mat::from_rows(&[anchor.to_vec(), z.to_vec(), zp.to_vec()])?;
    let feats = feature_rows(model, &pts)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let row = |i: usize| Mat::row_vector(feats.row(i));
    let (a, zv, zpv) = (tape.constant(row(0)), tape.constant(row(1)), tape.constant(row(2)));
    let f = convexity_gap_on_tape(&mut tape, &bound, a, zv, zpv);
    Ok(tape.value(f).item())
}

/// Convexity loss with pairs drawn in a ball of radius `rho` in selected-feature units.
pub fn convex_loss(model: &NeuralSdeModel, z: &Mat, rho: f64, n_pairs: usize, seed: u64) -> Result<f64> {
    let feats = feature_rows(model, z)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let rho = model.spec.diffusion.feature_rho(rho);
    let v = convex_loss_on_tape(&mut tape, &bound, &feats, &rho, n_pairs, seed);
    Ok(tape.value(v).item())
}

pub fn mu_loss(model: &NeuralSdeModel, z: &Mat) -> Result<f64> {
    with_features(model, z, |t, b, f| mu_loss_on_tape(t, b, f))
}

/// Segments for the data term and the anchor points `[x, u]` for the
/// distance terms.
#[derive(Clone, Debug)]
pub struct Batch {
    pub segments: Vec<Segment>,
    pub points: Mat,
}

/// Unweighted terms and the weighted total. Terms with zero weight are not
/// evaluated and read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub grad: f64,
    pub convex: f64,
    pub mu: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_data,l_grad,l_convex,l_mu,total";

    pub fn write_csv_row<W: Write>(&self, mut w: W, step: usize) -> Result<()> {
        writeln!(w, "{step},{},{},{},{},{}", self.data, self.grad, self.convex, self.mu, self.total)?;
        Ok(())
    }
}

fn total_on_tape(
    tape: &mut Tape,
    model: &NeuralSdeModel,
    bound: &BoundModel,
    batch: &Batch,
    loss: &LossConfig,
    solver: &SolverConfig,
) -> Result<(Var, [Option<Var>; 4])> {
    loss.validate()?;
    solver.validate()?;
    let mut terms = [None; 4];
    if loss.alpha > 0.0 {
        let s_diag = loss.s_diag_for(model.state_dim())?;
        let segs = batch
            .segments
            .iter()
            .map(|s| {
                if s.horizon() < solver.horizon {
                    Err(Error::shape(format!("segment has {} steps, solver horizon is {}", s.horizon(), solver.horizon)))
                } else {
                    truncate(s, solver.horizon)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let frozen;
        let sys = if loss.detach_distance_in_data {
            frozen = BoundModel { model, vars: bound.vars.frozen(tape, is_distance_param) };
            &frozen
        } else {
            bound
        };
        terms[0] = Some(data_loss_on_tape(
            tape,
            sys,
            &segs,
            solver.scheme,
            solver.dt,
            solver.n_particles,
            solver.seed,
            &s_diag,
        )?);
    }
    let needs_points = loss.beta > 0.0 || loss.gamma > 0.0 || loss.lam > 0.0;
    if needs_points && batch.points.rows() > 0 {
        let feats = feature_rows(model, &batch.points)?;
        let fv = tape.constant(feats.clone());
        if loss.beta > 0.0 {
            terms[1] = Some(grad_loss_on_tape(tape, bound, fv));
        }
        if loss.gamma > 0.0 {
            let seed = derive_seed(solver.seed, &[0xC0_4E_E5]);
            let rho = model.spec.diffusion.feature_rho(loss.rho);
            terms[2] = Some(convex_loss_on_tape(tape, bound, &feats, &rho, loss.n_convex_pairs, seed));
        }
        if loss.lam > 0.0 {
            terms[3] = Some(mu_loss_on_tape(tape, bound, fv)?);
        }
    }
    let weights = [loss.alpha, loss.beta, loss.gamma, loss.lam];
    let mut total: Option<Var> = None;
    for (t, w) in terms.iter().zip(weights) {
        if let Some(v) = *t {
            let wv = tape.scale(v, w);
            total = Some(match total {
                Some(a) => tape.add(a, wv),
                None => wv,
            });
        }
    }
    let total = total.unwrap_or_else(|| tape.constant(Mat::scalar(0.0)));
    Ok((total, terms))
}

fn breakdown(tape: &Tape, total: Var, terms: &[Option<Var>; 4]) -> LossBreakdown {
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    LossBreakdown {
        data: val(terms[0]),
        grad: val(terms[1]),
        convex: val(terms[2]),
        mu: val(terms[3]),
        total: tape.value(total).item(),
    }
}

/// `alpha L_data + beta L_grad + gamma L_convex + lam L_mu` on a batch.
///
/// Data noise uses `solver.seed`; convexity samples use a seed derived from it.
pub fn total_loss(model: &NeuralSdeModel, batch: &Batch, loss: &LossConfig, solver: &SolverConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (total, terms) = total_on_tape(&mut tape, model, &bound, batch, loss, solver)?;
    Ok(breakdown(&tape, total, &terms))
}

/// [`total_loss`] and its gradient with respect to every model parameter.
pub fn total_loss_grad(
    model: &NeuralSdeModel,
    batch: &Batch,
    loss: &LossConfig,
    solver: &SolverConfig,
) -> Result<(LossBreakdown, ParamVector)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (total, terms) = total_on_tape(&mut tape, model, &bound, batch, loss, solver)?;
    let grads = tape.backward(total)?;
    Ok((breakdown(&tape, total, &terms), bound.vars.gradient(&tape, &grads)))
}
