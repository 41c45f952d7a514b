//! Fully connected networks evaluated on a [`Tape`], one sample per row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::params::{ParamVars, ParamVector};
use super::tape::{Tape, Unary, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    #[serde(alias = "silu")]
    Swish,
    Sigmoid,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Tanh => Unary::Tanh,
            Activation::Swish => Unary::Swish,
            Activation::Sigmoid => Unary::Sigmoid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        MlpSpec { input_dim, hidden: hidden.to_vec(), output_dim, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Adds this network's weight and bias segments under `prefix`.
    pub fn register(&self, prefix: &str, params: &mut ParamVector) -> Result<()> {
        self.validate()?;
        for (l, (fan_in, fan_out)) in self.layers().into_iter().enumerate() {
            params.push_segment(format!("{prefix}.w{l}"), fan_in, fan_out)?;
            params.push_segment(format!("{prefix}.b{l}"), 1, fan_out)?;
        }
        Ok(())
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn initialize<R: Rng>(&self, prefix: &str, params: &mut ParamVector, rng: &mut R) -> Result<()> {
        for (l, (fan_in, fan_out)) in self.layers().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params.get_mut(&format!("{prefix}.w{l}"))? {
                *w = rng.gen_range(-bound..bound);
            }
            params.get_mut(&format!("{prefix}.b{l}"))?.fill(0.0);
        }
        Ok(())
    }

    fn layer_vars(&self, prefix: &str, vars: &ParamVars) -> Vec<(Var, Var)> {
        (0..self.layers().len())
            .map(|l| (vars.get(&format!("{prefix}.w{l}")), vars.get(&format!("{prefix}.b{l}"))))
            .collect()
    }

    /// Batched forward pass: `input` is `batch x input_dim`.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, vars: &ParamVars, input: Var) -> Var {
        assert_eq!(tape.shape(input).1, self.input_dim, "network {prefix} input width");
        let layers = self.layer_vars(prefix, vars);
        let last = layers.len() - 1;
        let mut h = input;
        for (l, (w, b)) in layers.into_iter().enumerate() {
            let a = tape.matmul(h, w);
            let a = tape.add(a, b);
            h = if l == last { a } else { tape.unary(self.activation.unary(), a) };
        }
        h
    }

    /// Forward pass of a scalar-output network together with the gradient of
    /// the output with respect to each input row. Both are tape nodes, so the
    /// input gradient can itself be differentiated with respect to the weights.
    pub fn forward_with_input_grad(
        &self,
        tape: &mut Tape,
        prefix: &str,
        vars: &ParamVars,
        input: Var,
    ) -> (Var, Var) {
        assert_eq!(self.output_dim, 1, "input gradients need a scalar network");
        assert_eq!(tape.shape(input).1, self.input_dim, "network {prefix} input width");
        let layers = self.layer_vars(prefix, vars);
        let last = layers.len() - 1;
        let mut h = input;
        let mut pre = Vec::with_capacity(last);
        for (l, &(w, b)) in layers.iter().enumerate() {
            let a = tape.matmul(h, w);
            let a = tape.add(a, b);
            if l == last {
                h = a;
            } else {
                pre.push(a);
                h = tape.unary(self.activation.unary(), a);
            }
        }
        let out = h;

        // g starts as d out / d h_{last} = W_last^T (one row, broadcast over the batch).
        let mut g = tape.transpose(layers[last].0);
        for l in (0..last).rev() {
            let d = tape.unary_deriv(self.activation.unary(), 1, pre[l]);
            let gd = tape.mul(d, g);
            let wt = tape.transpose(layers[l].0);
            g = tape.matmul(gd, wt);
        }
        if tape.shape(g).0 != tape.shape(out).0 {
            // No hidden layer: the gradient is the same row for every sample.
            let zeros = tape.constant(Mat::zeros(tape.shape(out).0, self.input_dim));
            g = tape.add(zeros, g);
        }
        (out, g)
    }
}

/// Evaluates a network on one input vector.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, prefix: &str, input: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if input.len() != spec.input_dim {
        return Err(Error::config(format!(
            "network {prefix} expects {} inputs, got {}",
            spec.input_dim,
            input.len()
        )));
    }
    for (l, (fan_in, fan_out)) in spec.layers().into_iter().enumerate() {
        for (name, rows, cols) in [(format!("{prefix}.w{l}"), fan_in, fan_out), (format!("{prefix}.b{l}"), 1, fan_out)] {
            match params.segment(&name) {
                Some(s) if (s.rows, s.cols) == (rows, cols) => {}
                _ => return Err(Error::config(format!("segment {name} missing or mis-shaped"))),
            }
        }
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(Mat::row_vector(input));
    let y = spec.forward(&mut tape, prefix, &vars, x);
    Ok(tape.value(y).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::params::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(spec: &MlpSpec, seed: u64) -> ParamVector {
        let mut p = ParamVector::new();
        spec.register("n", &mut p).unwrap();
        spec.initialize("n", &mut p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p
    }

    #[test]
    fn param_count_formula() {
        let spec = MlpSpec::new(2, &[32, 32], 1, Activation::Swish);
        assert_eq!(spec.param_count(), 3 * 32 + 33 * 32 + 33);
        assert_eq!(net(&spec, 0).len(), spec.param_count());
    }

    #[test]
    fn zero_width_rejected() {
        assert!(MlpSpec::new(2, &[0], 1, Activation::Tanh).validate().is_err());
        assert!(MlpSpec::new(0, &[3], 1, Activation::Tanh).validate().is_err());
    }

    #[test]
    fn zero_tanh_network_outputs_zero() {
        let spec = MlpSpec::new(3, &[5, 4], 2, Activation::Tanh);
        let mut p = ParamVector::new();
        spec.register("n", &mut p).unwrap();
        assert_eq!(mlp_forward(&spec, &p, "n", &[0.3, -7.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let spec = MlpSpec::new(3, &[], 3, Activation::Tanh);
        let mut p = ParamVector::new();
        spec.register("n", &mut p).unwrap();
        p.get_mut("n.w0").unwrap().copy_from_slice(Mat::identity(3).as_slice());
        assert_eq!(mlp_forward(&spec, &p, "n", &[0.3, -7.0, 2.0]).unwrap(), vec![0.3, -7.0, 2.0]);
    }

    #[test]
    fn wrong_input_width_is_config_error() {
        let spec = MlpSpec::new(2, &[3], 1, Activation::Tanh);
        let p = net(&spec, 1);
        assert!(matches!(mlp_forward(&spec, &p, "n", &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn matches_hand_rolled_evaluation() {
        let spec = MlpSpec::new(2, &[3], 1, Activation::Tanh);
        let p = net(&spec, 11);
        let w0 = p.get("n.w0").unwrap();
        let b0 = p.get("n.b0").unwrap();
        let w1 = p.get("n.w1").unwrap();
        let b1 = p.get("n.b1").unwrap();
        let x = [0.4, -1.3];
        let mut expect = b1[0];
        for j in 0..3 {
            let a = x[0] * w0[j] + x[1] * w0[3 + j] + b0[j];
            expect += a.tanh() * w1[j];
        }
        let got = mlp_forward(&spec, &p, "n", &x).unwrap()[0];
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn two_layer_loss_gradient_matches_differences() {
        let spec = MlpSpec::new(3, &[6, 5], 2, Activation::Tanh);
        let p = net(&spec, 5);
        let x = Mat::from_vec(1, 3, vec![0.2, -0.4, 0.9]).unwrap();
        let target = [0.5, -0.25];
        let loss = |params: &ParamVector| {
            let y = mlp_forward(&spec, params, "n", x.as_slice()).unwrap();
            y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let (_, g) = grad(&p, |t, vars| {
            let xv = t.constant(x.clone());
            let y = spec.forward(t, "n", vars, xv);
            let tv = t.constant(Mat::row_vector(&target));
            let r = t.sub(y, tv);
            let r2 = t.square(r);
            Ok(t.sum(r2))
        })
        .unwrap();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut pp = p.clone();
            pp.values_mut()[k] += h;
            let mut pm = p.clone();
            pm.values_mut()[k] -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let an = g.values()[k];
            if fd.abs() > 1e-8 {
                assert!(((fd - an) / fd).abs() <= 1e-5, "param {k}: fd {fd} ad {an}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_differences() {
        for act in [Activation::Tanh, Activation::Swish, Activation::Sigmoid] {
            for hidden in [vec![], vec![4], vec![5, 3]] {
                let spec = MlpSpec::new(2, &hidden, 1, act);
                let p = net(&spec, 3);
                let x = Mat::from_vec(2, 2, vec![0.3, -0.2, 1.1, 0.5]).unwrap();
                let mut t = Tape::new();
                let vars = p.bind(&mut t);
                let xv = t.constant(x.clone());
                let (_, g) = spec.forward_with_input_grad(&mut t, "n", &vars, xv);
                let g = t.value(g).clone();
                let h = 1e-6;
                for r in 0..2 {
                    for c in 0..2 {
                        let mut xp = x.row(r).to_vec();
                        xp[c] += h;
                        let mut xm = x.row(r).to_vec();
                        xm[c] -= h;
                        let fd = (mlp_forward(&spec, &p, "n", &xp).unwrap()[0]
                            - mlp_forward(&spec, &p, "n", &xm).unwrap()[0])
                            / (2.0 * h);
                        assert!((fd - g.get(r, c)).abs() < 1e-8, "{act:?} {hidden:?}");
                    }
                }
            }
        }
    }
}
