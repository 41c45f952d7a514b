//! Neural SDE models: a physics-structured drift built from small networks and
//! a diagonal, distance-aware diffusion
//! `sigma(x, u) = sigma_max ⊙ sigmoid(NN_d(x, u) * W + b)` with every entry of
//! `W` at least one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Mat, MlpSpec, ParamVars, ParamVector, Tape, Unary, Var};
use crate::error::{Error, Result};

/// Picks the inputs of a network out of `z = [x; u]`: the listed entries,
/// followed by `sin` and `cos` of each listed angle entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSelector {
    #[serde(default)]
    pub indices: Vec<usize>,
    #[serde(default)]
    pub angles: Vec<usize>,
}

impl InputSelector {
    pub fn indices(indices: &[usize]) -> Self {
        InputSelector { indices: indices.to_vec(), angles: Vec::new() }
    }

    /// Every entry of a `dim`-dimensional `z`.
    pub fn all(dim: usize) -> Self {
        Self::indices(&(0..dim).collect::<Vec<_>>())
    }

    pub fn dim(&self) -> usize {
        self.indices.len() + 2 * self.angles.len()
    }

    pub fn validate(&self, z_dim: usize, what: &str) -> Result<()> {
        if let Some(&i) = self.indices.iter().chain(&self.angles).find(|&&i| i >= z_dim) {
            return Err(Error::config(format!("{what}: selector index {i} out of range for z of size {z_dim}")));
        }
        if self.dim() == 0 {
            return Err(Error::config(format!("{what}: selector picks no inputs")));
        }
        Ok(())
    }

    /// True when the features are an affine copy of `z` entries.
    pub fn is_plain(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn apply(&self, tape: &mut Tape, z: Var) -> Var {
        let mut parts = Vec::with_capacity(3);
        if !self.indices.is_empty() {
            parts.push(tape.select_cols(z, &self.indices));
        }
        if !self.angles.is_empty() {
            let a = tape.select_cols(z, &self.angles);
            parts.push(tape.unary(Unary::Sin, a));
            parts.push(tape.unary(Unary::Cos, a));
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)
        }
    }

    pub fn apply_values(&self, z: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.indices.iter().map(|&i| z[i]).collect();
        out.extend(self.angles.iter().map(|&i| z[i].sin()));
        out.extend(self.angles.iter().map(|&i| z[i].cos()));
        out
    }
}

/// Known structure the drift networks are plugged into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composer {
    /// `f = g1(z)`.
    Blackbox,
    /// State laid out as `(position, velocity)` pairs; `f = [v_i, g_i(z)]`.
    VelocityPassthrough,
    /// Pairs as above with control-affine accelerations
    /// `f = [v_i, a_i(z) + b_i(z) · u]`.
    CartpoleAffine,
}

impl Composer {
    /// Output width of every unknown term.
    pub fn term_outputs(self, state_dim: usize, control_dim: usize) -> Result<Vec<usize>> {
        match self {
            Composer::Blackbox => Ok(vec![state_dim]),
            Composer::VelocityPassthrough => {
                if state_dim % 2 != 0 {
                    return Err(Error::config("velocity-passthrough needs (position, velocity) pairs"));
                }
                Ok(vec![1; state_dim / 2])
            }
            Composer::CartpoleAffine => {
                if state_dim % 2 != 0 || control_dim == 0 {
                    return Err(Error::config(
                        "cartpole-affine needs (position, velocity) pairs and at least one control",
                    ));
                }
                Ok((0..state_dim / 2).flat_map(|_| [1, control_dim]).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub inputs: InputSelector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub composer: Composer,
    pub terms: Vec<TermSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub sigma_max: Vec<f64>,
    pub features: InputSelector,
    pub d_net: NetShape,
    pub mu_net: NetShape,
    /// Affine normalization `(f - center) / scale` of the selected features.
    /// The distance network, its gradient and the convexity gap live in the
    /// normalized coordinates. Empty means identity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_center: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_scale: Vec<f64>,
}

impl DiffusionSpec {
    pub fn normalize_row(&self, f: &mut [f64]) {
        for ((v, c), s) in f.iter_mut().zip(&self.feature_center).zip(&self.feature_scale) {
            *v = (*v - c) / s;
        }
    }

    /// Per-coordinate standard deviation in normalized features of a ball of radius `rho` in selected-feature units.
    pub fn feature_rho(&self, rho: f64) -> Vec<f64> {
        if self.feature_scale.is_empty() {
            vec![rho; self.features.dim()]
        } else {
            self.feature_scale.iter().map(|s| rho / s).collect()
        }
    }

    /// Sets the feature normalization to the per-column mean and standard
    /// deviation of `feats`, with the scale floored at `min_scale`.
    pub fn normalize_to(&mut self, feats: &Mat, min_scale: f64) {
        let (n, k) = (feats.rows(), feats.cols());
        if n == 0 {
            return;
        }
        self.feature_center = (0..k).map(|c| (0..n).map(|r| feats.get(r, c)).sum::<f64>() / n as f64).collect();
        self.feature_scale = (0..k)
            .map(|c| {
                let m = self.feature_center[c];
                let var = (0..n).map(|r| (feats.get(r, c) - m).powi(2)).sum::<f64>() / n as f64;
                var.sqrt().max(min_scale)
            })
            .collect();
    }
}

/// Declarative description of a model; parameters live in [`NeuralSdeModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
}

const D_NET: &str = "diff.d";
const MU_NET: &str = "diff.mu";
const PHI_W: &str = "diff.phi.w_raw";
const PHI_B: &str = "diff.phi.b";

/// True for parameter segments of the distance network `d_psi`.
pub fn is_distance_param(name: &str) -> bool {
    name.strip_prefix(D_NET).is_some_and(|rest| rest.starts_with('.'))
}

fn term_prefix(i: usize) -> String {
    format!("drift.g{i}")
}

impl ModelSpec {
    pub fn z_dim(&self) -> usize {
        self.state_dim + self.control_dim
    }

    pub fn term_mlps(&self) -> Result<Vec<MlpSpec>> {
        let outs = self.drift.composer.term_outputs(self.state_dim, self.control_dim)?;
        if outs.len() != self.drift.terms.len() {
            return Err(Error::config(format!(
                "composer {:?} needs {} unknown terms, {} given",
                self.drift.composer,
                outs.len(),
                self.drift.terms.len()
            )));
        }
        Ok(self
            .drift
            .terms
            .iter()
            .zip(outs)
            .map(|(t, out)| MlpSpec::new(t.inputs.dim(), &t.hidden, out, t.activation))
            .collect())
    }

    /// Normalized distance-network features for `[x, u]` rows of `z`.
    pub fn feature_rows(&self, z: &Mat) -> Result<Mat> {
        let mut f = self.raw_feature_rows(z)?;
        for r in 0..f.rows() {
            self.diffusion.normalize_row(f.row_mut(r));
        }
        Ok(f)
    }

    /// Selected features for `[x, u]` rows of `z`, before normalization.
    pub fn raw_feature_rows(&self, z: &Mat) -> Result<Mat> {
        let zd = self.z_dim();
        if z.cols() != zd {
            return Err(Error::shape(format!("points have {} columns, model expects {zd}", z.cols())));
        }
        let sel = &self.diffusion.features;
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|r| sel.apply_values(z.row(r))).collect();
        if rows.is_empty() {
            return Ok(Mat::zeros(0, sel.dim()));
        }
        Mat::from_rows(&rows)
    }

    pub fn d_mlp(&self) -> MlpSpec {
        let d = &self.diffusion;
        MlpSpec::new(d.features.dim(), &d.d_net.hidden, 1, d.d_net.activation)
    }

    pub fn mu_mlp(&self) -> MlpSpec {
        let d = &self.diffusion;
        MlpSpec::new(d.features.dim(), &d.mu_net.hidden, 1, d.mu_net.activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim must be >= 1"));
        }
        let zd = self.z_dim();
        for (i, (t, m)) in self.drift.terms.iter().zip(self.term_mlps()?).enumerate() {
            t.inputs.validate(zd, &format!("drift term {i}"))?;
            m.validate()?;
        }
        let d = &self.diffusion;
        if d.sigma_max.len() != self.state_dim {
            return Err(Error::config(format!(
                "sigma_max has {} entries for a {}-dimensional state",
                d.sigma_max.len(),
                self.state_dim
            )));
        }
        if d.sigma_max.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::config("sigma_max entries must be finite and >= 0"));
        }
        d.features.validate(zd, "diffusion features")?;
        let k = d.features.dim();
        if d.feature_center.len() != d.feature_scale.len() || !(d.feature_center.is_empty() || d.feature_center.len() == k) {
            return Err(Error::config(format!("feature_center and feature_scale need 0 or {k} entries each")));
        }
        if d.feature_scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || d.feature_center.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("feature_scale entries must be finite and > 0"));
        }
        self.d_mlp().validate()?;
        self.mu_mlp().validate()
    }

    /// Parameter layout with every segment zeroed.
    pub fn empty_params(&self) -> Result<ParamVector> {
        self.validate()?;
        let mut p = ParamVector::new();
        for (i, m) in self.term_mlps()?.iter().enumerate() {
            m.register(&term_prefix(i), &mut p)?;
        }
        self.d_mlp().register(D_NET, &mut p)?;
        p.push_segment(PHI_W, 1, self.state_dim)?;
        p.push_segment(PHI_B, 1, self.state_dim)?;
        self.mu_mlp().register(MU_NET, &mut p)?;
        Ok(p)
    }
}

/// A model description together with its trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSdeModel {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl NeuralSdeModel {
    /// Seeded initialization. The monotone map starts at `W = 1 + softplus(0)`, `b = 0`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut params = spec.empty_params()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, m) in spec.term_mlps()?.iter().enumerate() {
            m.initialize(&term_prefix(i), &mut params, &mut rng)?;
        }
        spec.d_mlp().initialize(D_NET, &mut params, &mut rng)?;
        spec.mu_mlp().initialize(MU_NET, &mut params, &mut rng)?;
        Ok(NeuralSdeModel { spec, params })
    }

    /// Wraps existing parameters after checking they fit the description.
    pub fn with_params(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        let mut fresh = spec.empty_params()?;
        fresh.assign_from(&params)?;
        Ok(NeuralSdeModel { spec, params: fresh })
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.spec.control_dim
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        BoundModel { model: self, vars: self.params.bind(tape) }
    }

    /// Mutable access to the raw monotone-map weights (before `1 + softplus`).
    pub fn phi_raw_mut(&mut self) -> &mut [f64] {
        self.params.get_mut(PHI_W).expect("layout")
    }

    pub fn phi_bias_mut(&mut self) -> &mut [f64] {
        self.params.get_mut(PHI_B).expect("layout")
    }

    /// Effective monotone-map weights, each `>= 1`.
    pub fn phi_weights(&self) -> Vec<f64> {
        self.params.get(PHI_W).expect("layout").iter().map(|&r| 1.0 + crate::diffcore::softplus(r)).collect()
    }

    fn check_point(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.control_dim() {
            return Err(Error::config(format!(
                "expected state/control of size {}/{}, got {}/{}",
                self.state_dim(),
                self.control_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    fn eval_point(&self, x: &[f64], u: &[f64], f: impl FnOnce(&BoundModel, &mut Tape, Var, Var) -> Var) -> Result<Vec<f64>> {
        self.check_point(x, u)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(Mat::row_vector(x));
        let uv = tape.constant(Mat::row_vector(u));
        let out = f(&bound, &mut tape, xv, uv);
        Ok(tape.value(out).as_slice().to_vec())
    }

    pub fn drift_eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.eval_point(x, u, |b, t, x, u| b.drift(t, x, u))
    }

    pub fn d_psi(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        self.eval_point(x, u, |b, t, x, u| {
            let f = b.features(t, x, u);
            b.d_psi(t, f)
        })
        .map(|v| v[0])
    }

    pub fn diffusion_eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.eval_point(x, u, |b, t, x, u| b.diffusion(t, x, u))
    }

    pub fn mu_eval(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        self.eval_point(x, u, |b, t, x, u| {
            let f = b.features(t, x, u);
            b.mu(t, f)
        })
        .map(|v| v[0])
    }

    /// `d_psi` on a batch of selected, not yet normalized, feature rows.
    pub fn d_psi_features(&self, feats: &Mat) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut feats = feats.clone();
        for r in 0..feats.rows() {
            self.spec.diffusion.normalize_row(feats.row_mut(r));
        }
        let f = tape.constant(feats);
        let d = bound.d_psi(&mut tape, f);
        tape.value(d).as_slice().to_vec()
    }
}

/// Drift and diffusion of an SDE evaluated on a tape, one sample per row.
pub trait SdeDynamics {
    fn state_dim(&self) -> usize;
    fn drift(&self, tape: &mut Tape, x: Var, u: Var) -> Var;
    /// Diagonal diffusion, same shape as `x`.
    fn diffusion(&self, tape: &mut Tape, x: Var, u: Var) -> Var;
}

/// A model whose parameters are leaves on a particular tape.
pub struct BoundModel<'a> {
    pub model: &'a NeuralSdeModel,
    pub vars: ParamVars,
}

impl BoundModel<'_> {
    fn spec(&self) -> &ModelSpec {
        &self.model.spec
    }

    fn z(&self, tape: &mut Tape, x: Var, u: Var) -> Var {
        if self.spec().control_dim == 0 {
            x
        } else {
            tape.concat_cols(&[x, u])
        }
    }

    /// Normalized inputs of the distance and convexity networks.
    pub fn features(&self, tape: &mut Tape, x: Var, u: Var) -> Var {
        let z = self.z(tape, x, u);
        let f = self.spec().diffusion.features.apply(tape, z);
        self.normalize(tape, f)
    }

    pub fn normalize(&self, tape: &mut Tape, feats: Var) -> Var {
        let d = &self.spec().diffusion;
        if d.feature_center.is_empty() {
            return feats;
        }
        let c = tape.constant(Mat::row_vector(&d.feature_center));
        let inv = tape.constant(Mat::row_vector(&d.feature_scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>()));
        let shifted = tape.sub(feats, c);
        tape.mul(shifted, inv)
    }

    pub fn d_raw(&self, tape: &mut Tape, feats: Var) -> Var {
        self.spec().d_mlp().forward(tape, D_NET, &self.vars, feats)
    }

    pub fn d_psi(&self, tape: &mut Tape, feats: Var) -> Var {
        let raw = self.d_raw(tape, feats);
        tape.sigmoid(raw)
    }

    /// `d_psi` and its gradient with respect to the feature rows.
    pub fn d_psi_with_grad(&self, tape: &mut Tape, feats: Var) -> (Var, Var) {
        let (raw, graw) = self.spec().d_mlp().forward_with_input_grad(tape, D_NET, &self.vars, feats);
        let d = tape.sigmoid(raw);
        let ds = tape.unary_deriv(Unary::Sigmoid, 1, raw);
        let g = tape.mul(graw, ds);
        (d, g)
    }

    pub fn mu(&self, tape: &mut Tape, feats: Var) -> Var {
        let out = self.spec().mu_mlp().forward(tape, MU_NET, &self.vars, feats);
        tape.softplus(out)
    }

    /// `sigma_max ⊙ sigmoid(raw * W + b)` for a column of raw distance outputs.
    pub fn diffusion_from_raw(&self, tape: &mut Tape, raw: Var) -> Var {
        let w_raw = self.vars.get(PHI_W);
        let sp = tape.softplus(w_raw);
        let w = tape.offset(sp, 1.0);
        let b = self.vars.get(PHI_B);
        let a = tape.mul(raw, w);
        let a = tape.add(a, b);
        let h = tape.sigmoid(a);
        let smax = tape.constant(Mat::row_vector(&self.spec().diffusion.sigma_max));
        tape.mul(h, smax)
    }
}

impl SdeDynamics for BoundModel<'_> {
    fn state_dim(&self) -> usize {
        self.spec().state_dim
    }

    fn drift(&self, tape: &mut Tape, x: Var, u: Var) -> Var {
        let spec = self.spec();
        let z = self.z(tape, x, u);
        let mlps = spec.term_mlps().expect("validated spec");
        let mut outs = Vec::with_capacity(mlps.len());
        for (i, (term, mlp)) in spec.drift.terms.iter().zip(&mlps).enumerate() {
            let inp = term.inputs.apply(tape, z);
            outs.push(mlp.forward(tape, &term_prefix(i), &self.vars, inp));
        }
        let n = spec.state_dim;
        match spec.drift.composer {
            Composer::Blackbox => outs[0],
            Composer::VelocityPassthrough => {
                let mut cols = Vec::with_capacity(n);
                for (i, g) in outs.into_iter().enumerate() {
                    cols.push(tape.col(x, 2 * i + 1));
                    cols.push(g);
                }
                tape.concat_cols(&cols)
            }
            Composer::CartpoleAffine => {
                let mut cols = Vec::with_capacity(n);
                for i in 0..n / 2 {
                    let (a, b) = (outs[2 * i], outs[2 * i + 1]);
                    let bu = tape.mul(b, u);
                    let bu = tape.sum_cols(bu);
                    cols.push(tape.col(x, 2 * i + 1));
                    cols.push(tape.add(a, bu));
                }
                tape.concat_cols(&cols)
            }
        }
    }

    fn diffusion(&self, tape: &mut Tape, x: Var, u: Var) -> Var {
        let f = self.features(tape, x, u);
        let raw = self.d_raw(tape, f);
        self.diffusion_from_raw(tape, raw)
    }
}

/// Unstructured drift `f = g(x, u)` from one tanh network; distance features on all of `z`.
pub fn blackbox_spec(state_dim: usize, control_dim: usize, hidden: &[usize], sigma_max: &[f64]) -> ModelSpec {
    let z = state_dim + control_dim;
    ModelSpec {
        state_dim,
        control_dim,
        drift: DriftSpec {
            composer: Composer::Blackbox,
            terms: vec![TermSpec { hidden: hidden.to_vec(), activation: Activation::Tanh, inputs: InputSelector::all(z) }],
        },
        diffusion: DiffusionSpec {
            sigma_max: sigma_max.to_vec(),
            features: InputSelector::all(z),
            d_net: NetShape { hidden: vec![32, 32], activation: Activation::Swish },
            mu_net: NetShape { hidden: vec![8, 8], activation: Activation::Tanh },
            feature_center: Vec::new(),
            feature_scale: Vec::new(),
        },
    }
}

/// Distance-map model over a 2-D point cloud: swish networks for both `d_psi`
/// and `mu`, unit `sigma_max`. The drift is unused when the data term is off.
pub fn distance_map_spec() -> ModelSpec {
    let mut spec = blackbox_spec(2, 0, &[4], &[1.0, 1.0]);
    spec.diffusion.mu_net.activation = Activation::Swish;
    spec
}

/// Mass-spring model: `f = [x2, g(x)]`, distance features on the state.
pub fn mass_spring_spec(sigma_max: [f64; 2]) -> ModelSpec {
    ModelSpec {
        state_dim: 2,
        control_dim: 0,
        drift: DriftSpec {
            composer: Composer::VelocityPassthrough,
            terms: vec![TermSpec {
                hidden: vec![4, 16],
                activation: Activation::Tanh,
                inputs: InputSelector::all(2),
            }],
        },
        diffusion: DiffusionSpec {
            sigma_max: sigma_max.to_vec(),
            features: InputSelector::all(2),
            d_net: NetShape { hidden: vec![32, 32], activation: Activation::Swish },
            mu_net: NetShape { hidden: vec![8, 8], activation: Activation::Tanh },
            feature_center: Vec::new(),
            feature_scale: Vec::new(),
        },
    }
}

/// Control-affine cartpole model over `x = [p, p_dot, theta, theta_dot]`.
/// Angle inputs enter the networks through `sin`/`cos`.
pub fn cartpole_affine_spec(sigma_max: [f64; 4]) -> ModelSpec {
    let full = InputSelector { indices: vec![1, 3], angles: vec![2] };
    let pole = InputSelector { indices: vec![3], angles: vec![2] };
    let big = |inputs: &InputSelector| TermSpec { hidden: vec![8, 24], activation: Activation::Tanh, inputs: inputs.clone() };
    let small = |inputs: &InputSelector| TermSpec { hidden: vec![6, 8], activation: Activation::Tanh, inputs: inputs.clone() };
    ModelSpec {
        state_dim: 4,
        control_dim: 1,
        drift: DriftSpec {
            composer: Composer::CartpoleAffine,
            terms: vec![big(&full), small(&pole), big(&full), small(&pole)],
        },
        diffusion: DiffusionSpec {
            sigma_max: sigma_max.to_vec(),
            features: InputSelector { indices: vec![1, 3], angles: vec![2] },
            d_net: NetShape { hidden: vec![32, 32], activation: Activation::Swish },
            mu_net: NetShape { hidden: vec![8, 8], activation: Activation::Tanh },
            feature_center: Vec::new(),
            feature_scale: Vec::new(),
        },
    }
}
