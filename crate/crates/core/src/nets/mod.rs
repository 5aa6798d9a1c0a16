//! Gaussian-output MLPs, the gradient tape they are differentiated on, and
//! first-order optimizers.

mod optim;
pub mod tape;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::DiagGaussian;
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng;

pub use optim::{Optimizer, OptimizerKind};
pub use tape::{GradientTape, Gradients, Var};

/// Log-variance heads are clamped to this range before exponentiation.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// Initial bias of the log-variance head.
pub const LOGVAR_INIT_BIAS: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    /// `out × in`
    weight: Matrix,
    bias: Vec<f64>,
}

/// MLP mapping an input vector to a diagonal Gaussian.
///
/// Hidden layers use tanh; the last layer is affine with `2·d` outputs, the
/// first `d` being the mean and the rest the log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGaussianNet {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

/// Tape handles for one net's parameters.
#[derive(Clone, Debug)]
pub struct NetVars {
    layers: Vec<(Var, Var)>,
}

/// Tape handles for a net's output distribution. `logvar` is post-clamp.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "bad layer widths {widths:?}"
        )));
    }
    if widths.last().copied().unwrap_or(0) % 2 != 0 {
        return Err(Error::InvalidArgument(
            "output width must be even (mean and log-variance heads)".into(),
        ));
    }
    Ok(())
}

impl MlpGaussianNet {
    /// Glorot-uniform weights, zero biases, log-variance head bias −1.
    pub fn new(input: usize, hidden: &[usize], output: usize, seed: u64) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(2 * output);
        check_widths(&widths)?;
        let mut rng = rng::stream(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit));
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        let mut net = Self { widths, layers };
        let last = net.layers.last_mut().expect("at least one layer");
        for b in &mut last.bias[output..] {
            *b = LOGVAR_INIT_BIAS;
        }
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    /// Rebuilds a net from widths and a flat parameter vector.
    pub fn from_params(widths: &[usize], params: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1] / 2
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return dim_err(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.weight.as_slice().len();
            layer
                .weight
                .as_mut_slice()
                .copy_from_slice(&params[offset..offset + n]);
            offset += n;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Raw head outputs for a batch: `(mean, clamped logvar)`, one row per input.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.input_dim() {
            return dim_err(format!(
                "net input width {}, got {} columns",
                self.input_dim(),
                x.cols()
            ));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.matmul(&layer.weight.transpose())?;
            for r in 0..next.rows() {
                for (v, b) in next.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                    if i < last {
                        *v = v.tanh();
                    }
                }
            }
            h = next;
        }
        let d = self.output_dim();
        let (lo, hi) = LOGVAR_CLAMP;
        let mean = Matrix::from_fn(h.rows(), d, |r, c| h[(r, c)]);
        let logvar = Matrix::from_fn(h.rows(), d, |r, c| h[(r, d + c)].clamp(lo, hi));
        Ok((mean, logvar))
    }

    /// Output distribution for one input.
    pub fn forward(&self, x: &[f64]) -> Result<DiagGaussian> {
        let xm = Matrix::new(1, x.len(), x.to_vec())?;
        let (mean, logvar) = self.forward_batch(&xm)?;
        DiagGaussian::new(
            mean.into_vec(),
            logvar.as_slice().iter().map(|l| l.exp()).collect(),
        )
    }

    /// Places the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut GradientTape) -> NetVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weight.clone());
                let b = tape.leaf(Matrix::from_fn(1, l.bias.len(), |_, c| l.bias[c]));
                (w, b)
            })
            .collect();
        NetVars { layers }
    }

    /// Records the forward pass of a batch `x` (one row per input).
    pub fn forward_tape(
        &self,
        tape: &mut GradientTape,
        vars: &NetVars,
        x: Var,
    ) -> Result<GaussianVars> {
        if tape.value(x).cols() != self.input_dim() {
            return dim_err(format!(
                "net input width {}, got {} columns",
                self.input_dim(),
                tape.value(x).cols()
            ));
        }
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        let d = self.output_dim();
        let mean = tape.slice_cols(h, 0, d)?;
        let raw = tape.slice_cols(h, d, d)?;
        let logvar = tape.clamp(raw, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
        Ok(GaussianVars { mean, logvar })
    }

    /// Flattened gradient in the order of [`MlpGaussianNet::params`].
    pub fn flat_grads(&self, grads: &Gradients, vars: &NetVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (layer, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            match grads.get(w) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, layer.weight.as_slice().len())),
            }
            match grads.get(b) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, layer.bias.len())),
            }
        }
        out
    }

    pub fn to_state(&self, role: &str) -> NetState {
        NetState {
            role: role.to_string(),
            widths: self.widths.clone(),
            params: self.params(),
        }
    }
}

/// Serialized form of one net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetState {
    pub role: String,
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

impl NetState {
    pub fn to_net(&self) -> Result<MlpGaussianNet> {
        MlpGaussianNet::from_params(&self.widths, &self.params)
    }
}

/// Training checkpoint: every net, the optimizer state and the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub nets: Vec<NetState>,
    pub optimizer: Optimizer,
    pub step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| crate::io::with_path(e, path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::io::with_path(e, path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn net(&self, role: &str) -> Option<Result<MlpGaussianNet>> {
        self.nets
            .iter()
            .find(|n| n.role == role)
            .map(NetState::to_net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_gives_standard_normal() {
        let net = MlpGaussianNet::zeros(&[3, 5, 4]).unwrap();
        let g = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(g.mean(), &[0.0, 0.0]);
        assert_eq!(g.variance(), &[1.0, 1.0]);
    }

    #[test]
    fn affine_net_is_exact() {
        let mut net = MlpGaussianNet::zeros(&[2, 2]).unwrap();
        // mean = 2·x0 − x1 + 0.5, logvar = 0.1
        net.set_params(&[2.0, -1.0, 0.0, 0.0, 0.5, 0.1]).unwrap();
        let g = net.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(g.mean(), &[2.5]);
        assert!((g.variance()[0] - 0.1f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn param_count_matches_widths() {
        let net = MlpGaussianNet::new(6, &[8, 5], 2, 1).unwrap();
        assert_eq!(net.param_count(), 6 * 8 + 8 + 8 * 5 + 5 + 5 * 4 + 4);
        assert_eq!(net.params().len(), net.param_count());
    }

    #[test]
    fn init_sets_logvar_bias() {
        let net = MlpGaussianNet::new(4, &[7], 3, 9).unwrap();
        let p = net.params();
        let bias = &p[p.len() - 6..];
        assert_eq!(bias, &[0.0, 0.0, 0.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn large_inputs_stay_finite() {
        let net = MlpGaussianNet::new(5, &[16], 3, 4).unwrap();
        let g = net.forward(&[1e3, -1e3, 5e2, 0.0, -7e2]).unwrap();
        assert!(g.mean().iter().chain(g.variance()).all(|v| v.is_finite()));
        assert!(g.variance().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = MlpGaussianNet::new(3, &[4], 2, 11).unwrap();
        let x = Matrix::new(2, 3, vec![0.1, 0.2, -0.3, 1.0, -1.0, 0.5]).unwrap();
        let (mean, logvar) = net.forward_batch(&x).unwrap();
        let mut tape = GradientTape::new();
        let vars = net.bind(&mut tape);
        let xv = tape.leaf(x);
        let out = net.forward_tape(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(out.mean), &mean);
        assert_eq!(tape.value(out.logvar), &logvar);
    }

    #[test]
    fn params_round_trip() {
        let net = MlpGaussianNet::new(3, &[4], 2, 5).unwrap();
        let back = MlpGaussianNet::from_params(net.widths(), &net.params()).unwrap();
        assert_eq!(net, back);
        assert!(MlpGaussianNet::from_params(net.widths(), &[0.0; 3]).is_err());
    }

    #[test]
    fn wrong_input_width_is_error() {
        let net = MlpGaussianNet::zeros(&[3, 2]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
    }
}
