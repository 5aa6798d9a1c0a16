//! The five bound objectives as differentiable minibatch scalars.
//!
//! Every objective is recorded on a [`GradientTape`] with the same layout:
//! per-row reconstruction log-likelihoods over `B·S` reparameterized samples,
//! per-point regularizer, extra term and encoder gap. `value` is always
//! assembled as `(recon − regu) + extra`.
//!
//! | kind     | regu          | extra               | gap          | direction |
//! |----------|---------------|---------------------|--------------|-----------|
//! | ELBO     | `D[V‖q]`      | 0                   | 0            | lower     |
//! | VAE_A    | `D[V‖q]`      | `D[V‖W] − D[V‖Y]`   | `D[V‖Y]`     | lower     |
//! | EUBO     | `D[V‖q]`      | `D[V‖U]`            | `D[V‖U]`     | upper     |
//! | VAE_C    | `D[V‖q]`      | 0                   | `D[V‖U]`     | lower     |
//! | JSD_EUBO | `D[M‖q]` (MC) | 0                   | `J[V‖U]`     | upper     |
//!
//! `q = N(0, I)` is the latent prior. Divergences between diagonal Gaussians
//! are analytic; only the reconstruction and `D[M‖q]` are sampled.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::{kl_diag, DiagGaussian};
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::nets::{GaussianVars, GradientTape, MlpGaussianNet, NetVars, Var};
use crate::ppca::PpcaModel;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "ELBO")]
    Elbo,
    #[serde(rename = "VAE_A")]
    VaeA,
    #[serde(rename = "EUBO")]
    Eubo,
    #[serde(rename = "VAE_C")]
    VaeC,
    #[serde(rename = "JSD_EUBO")]
    JsdEubo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Elbo,
        ObjectiveKind::VaeA,
        ObjectiveKind::Eubo,
        ObjectiveKind::VaeC,
        ObjectiveKind::JsdEubo,
    ];

    pub fn direction(self) -> Direction {
        match self {
            Self::Eubo | Self::JsdEubo => Direction::Upper,
            Self::Elbo | Self::VaeA | Self::VaeC => Direction::Lower,
        }
    }

    /// Whether the objective uses a second encoder (`Y` or `U`).
    pub fn needs_aux_encoder(self) -> bool {
        !matches!(self, Self::Elbo)
    }

    pub fn needs_aux_decoder(self) -> bool {
        matches!(self, Self::JsdEubo)
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Self::VaeA)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Elbo => "ELBO",
            Self::VaeA => "VAE_A",
            Self::Eubo => "EUBO",
            Self::VaeC => "VAE_C",
            Self::JsdEubo => "JSD_EUBO",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        match norm.as_str() {
            "ELBO" => Ok(Self::Elbo),
            "VAE_A" => Ok(Self::VaeA),
            "EUBO" | "VAE_B" => Ok(Self::Eubo),
            "VAE_C" => Ok(Self::VaeC),
            "JSD_EUBO" | "JSD" => Ok(Self::JsdEubo),
            _ => Err(Error::Parse(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Upper,
}

/// A minibatch bound estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundEstimate {
    pub kind: ObjectiveKind,
    /// Per-point average bound, `recon − regu + extra`.
    pub value: f64,
    pub recon: f64,
    pub regu: f64,
    pub extra: f64,
    /// Encoder-pair divergence (`D[V‖Y]`, `D[V‖U]` or `J[V‖U]`).
    pub gap: f64,
    /// Standard error of `value` across the points of the batch.
    pub std_error: f64,
    pub mc_samples: usize,
    pub direction: Direction,
    /// Per-point bound values.
    pub per_point: Vec<f64>,
}

impl BoundEstimate {
    /// `|value − (recon − regu + extra)|`.
    pub fn recomposition_error(&self) -> f64 {
        (self.value - (self.recon - self.regu + self.extra)).abs()
    }
}

/// The networks an objective reads. Unused slots may be `None`.
#[derive(Clone, Copy, Debug)]
pub struct NetRefs<'a> {
    /// `V`, the primary encoder.
    pub enc_v: &'a MlpGaussianNet,
    /// `Y` for VAE_A, `U` for EUBO, VAE_C and JSD_EUBO.
    pub enc_aux: Option<&'a MlpGaussianNet>,
    pub dec: &'a MlpGaussianNet,
    /// `U`'s decoder for JSD_EUBO.
    pub dec_aux: Option<&'a MlpGaussianNet>,
}

/// An objective bound to its networks (and the P-PCA model for VAE_A).
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub kind: ObjectiveKind,
    pub nets: NetRefs<'a>,
    pub model: Option<&'a PpcaModel>,
}

/// Flat gradients for each network slot.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub enc_v: Vec<f64>,
    pub enc_aux: Option<Vec<f64>>,
    pub dec: Vec<f64>,
    pub dec_aux: Option<Vec<f64>>,
}

/// Which scalar to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// The bound value itself.
    Value,
    /// The quantity minimized during training (see [`Problem::training_loss_sign`]).
    Loss,
}

#[derive(Clone, Debug)]
pub struct Differentiated {
    pub estimate: BoundEstimate,
    pub loss: f64,
    pub grads: NetGrads,
}

struct Assembled {
    tape: GradientTape,
    value: Var,
    loss: Var,
    recon: Var,
    regu: Var,
    extra: Var,
    gap: Var,
    /// `B·S × 1` per-sample reconstruction contributions.
    recon_rows: Var,
    /// `B·S × 1` (JSD) or `B × 1` regularizer rows.
    regu_rows: Var,
    extra_rows: Var,
    vars: [Option<NetVars>; 4],
    batch: usize,
    samples: usize,
}

impl<'a> Problem<'a> {
    pub fn new(
        kind: ObjectiveKind,
        nets: NetRefs<'a>,
        model: Option<&'a PpcaModel>,
    ) -> Result<Self> {
        let p = Self { kind, nets, model };
        p.validate()?;
        Ok(p)
    }

    fn aux_enc(&self) -> Result<&'a MlpGaussianNet> {
        self.nets
            .enc_aux
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs a second encoder", self.kind)))
    }

    fn aux_dec(&self) -> Result<&'a MlpGaussianNet> {
        self.nets
            .dec_aux
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs a second decoder", self.kind)))
    }

    fn validate(&self) -> Result<()> {
        let v = self.nets.enc_v;
        let nz = v.output_dim();
        let nx = v.input_dim();
        let check_dec = |d: &MlpGaussianNet| -> Result<()> {
            if d.input_dim() != nz || d.output_dim() != nx {
                return dim_err(format!(
                    "decoder maps {} -> {}, encoder maps {nx} -> {nz}",
                    d.input_dim(),
                    d.output_dim()
                ));
            }
            Ok(())
        };
        check_dec(self.nets.dec)?;
        if self.kind.needs_aux_encoder() {
            let a = self.aux_enc()?;
            if a.input_dim() != nx || a.output_dim() != nz {
                return dim_err("second encoder shape differs from the first");
            }
        }
        if self.kind.needs_aux_decoder() {
            check_dec(self.aux_dec()?)?;
        }
        if self.kind.needs_model() {
            let m = self
                .model
                .ok_or_else(|| Error::InvalidArgument("VAE_A needs a P-PCA model".into()))?;
            if m.n_z() != nz || m.n_x() != nx {
                return dim_err(format!(
                    "model is {}x{}, nets are {nx}x{nz}",
                    m.n_x(),
                    m.n_z()
                ));
            }
            m.require_full_rank()?;
        }
        Ok(())
    }

    /// Evaluates the bound on `batch` (one point per row).
    pub fn evaluate(&self, batch: &Matrix, mc_samples: usize, seed: u64) -> Result<BoundEstimate> {
        let a = self.assemble(batch, mc_samples, seed)?;
        Ok(self.estimate(&a))
    }

    /// Evaluates over many points in chunks of `chunk` rows, so memory stays
    /// bounded; chunk `i` uses the seed `derive(seed, [i])`.
    pub fn evaluate_chunked(
        &self,
        data: &Matrix,
        mc_samples: usize,
        seed: u64,
        chunk: usize,
    ) -> Result<BoundEstimate> {
        let chunk = chunk.max(1);
        let n = data.rows();
        if n == 0 {
            return Err(Error::InsufficientData("empty evaluation set".into()));
        }
        let mut sums = [0.0; 4];
        let mut per_point = Vec::with_capacity(n);
        let mut start = 0;
        let mut idx = 0u64;
        while start < n {
            let end = (start + chunk).min(n);
            let rows = Matrix::from_fn(end - start, data.cols(), |r, c| data[(start + r, c)]);
            let est = self.evaluate(&rows, mc_samples, rng::derive(seed, &[idx]))?;
            let w = (end - start) as f64;
            for (s, v) in sums
                .iter_mut()
                .zip([est.recon, est.regu, est.extra, est.gap])
            {
                *s += w * v;
            }
            per_point.extend(est.per_point);
            start = end;
            idx += 1;
        }
        let nf = n as f64;
        let [recon, regu, extra, gap] = sums.map(|s| s / nf);
        Ok(BoundEstimate {
            kind: self.kind,
            value: recon - regu + extra,
            recon,
            regu,
            extra,
            gap,
            std_error: std_error(&per_point),
            mc_samples,
            direction: self.kind.direction(),
            per_point,
        })
    }

    /// Bound estimate, training loss and gradients of `target`.
    pub fn differentiate(
        &self,
        batch: &Matrix,
        mc_samples: usize,
        seed: u64,
        target: Target,
    ) -> Result<Differentiated> {
        let a = self.assemble(batch, mc_samples, seed)?;
        let root = match target {
            Target::Value => a.value,
            Target::Loss => a.loss,
        };
        let g = a.tape.backward(root)?;
        let flat = |net: Option<&MlpGaussianNet>, vars: &Option<NetVars>| -> Option<Vec<f64>> {
            match (net, vars) {
                (Some(n), Some(v)) => Some(n.flat_grads(&g, v)),
                _ => None,
            }
        };
        let grads = NetGrads {
            enc_v: flat(Some(self.nets.enc_v), &a.vars[0]).expect("primary encoder bound"),
            enc_aux: flat(self.nets.enc_aux, &a.vars[1]),
            dec: flat(Some(self.nets.dec), &a.vars[2]).expect("decoder bound"),
            dec_aux: flat(self.nets.dec_aux, &a.vars[3]),
        };
        Ok(Differentiated {
            estimate: self.estimate(&a),
            loss: a.tape.scalar(a.loss),
            grads,
        })
    }

    /// Training loss only (no gradients).
    pub fn loss(&self, batch: &Matrix, mc_samples: usize, seed: u64) -> Result<f64> {
        let a = self.assemble(batch, mc_samples, seed)?;
        Ok(a.tape.scalar(a.loss))
    }

    /// Replays the recorded graph and returns `|replayed − recorded|` for the loss.
    pub fn replay_error(&self, batch: &Matrix, mc_samples: usize, seed: u64) -> Result<f64> {
        let a = self.assemble(batch, mc_samples, seed)?;
        let vals = a.tape.replay();
        Ok((vals[a.loss.index()].as_slice()[0] - a.tape.scalar(a.loss)).abs())
    }

    fn estimate(&self, a: &Assembled) -> BoundEstimate {
        let t = &a.tape;
        let (b, s) = (a.batch, a.samples);
        let recon_rows = t.value(a.recon_rows).as_slice();
        let regu_rows = t.value(a.regu_rows).as_slice();
        let extra_rows = t.value(a.extra_rows).as_slice();
        let regu_per_sample = regu_rows.len() != b;
        let per_point: Vec<f64> = (0..b)
            .map(|i| {
                let group = |rows: &[f64]| rows[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64;
                let regu = if regu_per_sample {
                    group(regu_rows)
                } else {
                    regu_rows[i]
                };
                group(recon_rows) - regu + extra_rows[i]
            })
            .collect();
        BoundEstimate {
            kind: self.kind,
            value: t.scalar(a.value),
            recon: t.scalar(a.recon),
            regu: t.scalar(a.regu),
            extra: t.scalar(a.extra),
            gap: t.scalar(a.gap),
            std_error: std_error(&per_point),
            mc_samples: s,
            direction: self.kind.direction(),
            per_point,
        }
    }

    fn assemble(&self, batch: &Matrix, mc_samples: usize, seed: u64) -> Result<Assembled> {
        if mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be >= 1".into()));
        }
        let (b, s) = (batch.rows(), mc_samples);
        if b == 0 {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let enc_v = self.nets.enc_v;
        if batch.cols() != enc_v.input_dim() {
            return dim_err(format!(
                "batch has {} columns, encoder expects {}",
                batch.cols(),
                enc_v.input_dim()
            ));
        }
        let nz = enc_v.output_dim();
        let mut stream = rng::stream(seed);
        let eps_v = Matrix::new(b * s, nz, rng::normals(&mut stream, b * s * nz))?;

        let mut t = GradientTape::new();
        let vars_v = enc_v.bind(&mut t);
        let vars_dec = self.nets.dec.bind(&mut t);
        let x = t.leaf(batch.clone());
        let x_rep = t.repeat_rows(x, s);
        let v = enc_v.forward_tape(&mut t, &vars_v, x)?;
        let v_rep = repeat(&mut t, v, s);
        let eps_v = t.leaf(eps_v);
        let z_v = reparam(&mut t, v_rep, eps_v)?;
        let recon_v = decode_log_lik(&mut t, self.nets.dec, &vars_dec, z_v, x_rep)?;
        let regu_v = kl_standard_rows(&mut t, v)?;

        let mut vars: [Option<NetVars>; 4] = [Some(vars_v), None, Some(vars_dec), None];

        let zero_rows = t.leaf(Matrix::zeros(b, 1));
        let (recon_rows, regu_rows, extra_rows, gap_rows, loss_terms) = match self.kind {
            ObjectiveKind::Elbo => (recon_v, regu_v, zero_rows, zero_rows, LossTerms::NegValue),
            ObjectiveKind::VaeA => {
                let enc_y = self.aux_enc()?;
                let model = self.model.expect("validated");
                let vy = enc_y.bind(&mut t);
                let y = enc_y.forward_tape(&mut t, &vy, x)?;
                vars[1] = Some(vy);
                let d_vw = kl_ppca_rows(&mut t, v, model, batch)?;
                let d_vy = kl_diag_rows(&mut t, v, y)?;
                let extra = t.sub(d_vw, d_vy)?;
                (recon_v, regu_v, extra, d_vy, LossTerms::NegValue)
            }
            ObjectiveKind::Eubo | ObjectiveKind::VaeC => {
                let enc_u = self.aux_enc()?;
                let vu = enc_u.bind(&mut t);
                let u = enc_u.forward_tape(&mut t, &vu, x)?;
                vars[1] = Some(vu);
                let d_vu = kl_diag_rows(&mut t, v, u)?;
                let extra = if self.kind == ObjectiveKind::Eubo {
                    d_vu
                } else {
                    zero_rows
                };
                (recon_v, regu_v, extra, d_vu, LossTerms::Gap)
            }
            ObjectiveKind::JsdEubo => {
                let enc_u = self.aux_enc()?;
                let dec_u = self.aux_dec()?;
                let vu = enc_u.bind(&mut t);
                let vdu = dec_u.bind(&mut t);
                let u = enc_u.forward_tape(&mut t, &vu, x)?;
                vars[1] = Some(vu);
                let eps_u = Matrix::new(b * s, nz, rng::normals(&mut stream, b * s * nz))?;
                let eps_u = t.leaf(eps_u);
                let u_rep = repeat(&mut t, u, s);
                let z_u = reparam(&mut t, u_rep, eps_u)?;
                let recon_u = decode_log_lik(&mut t, dec_u, &vdu, z_u, x_rep)?;
                vars[3] = Some(vdu);

                // ½(recon_V + recon_U) per sample row
                let both = t.add(recon_v, recon_u)?;
                let recon = t.scale(both, 0.5);

                // D[M‖q], stratified: half the mass sampled from each component
                let m_at_v = log_mixture_minus_prior(&mut t, v_rep, u_rep, z_v)?;
                let m_at_u = log_mixture_minus_prior(&mut t, v_rep, u_rep, z_u)?;
                let sum_m = t.add(m_at_v, m_at_u)?;
                let d_mq = t.scale(sum_m, 0.5);

                // J = ½D[V‖q] + ½D[U‖q] − D[M‖q], per point
                let regu_u = kl_standard_rows(&mut t, u)?;
                let d_mq_point = t.group_mean_rows(d_mq, s)?;
                let kls = t.add(regu_v, regu_u)?;
                let half_kls = t.scale(kls, 0.5);
                let jsd = t.sub(half_kls, d_mq_point)?;
                (
                    recon,
                    d_mq,
                    zero_rows,
                    jsd,
                    LossTerms::Jsd {
                        regu_v,
                        regu_u,
                        recon_v,
                        recon_u,
                    },
                )
            }
        };

        let recon = t.mean_all(recon_rows);
        let regu = t.mean_all(regu_rows);
        let extra = t.mean_all(extra_rows);
        let gap = t.mean_all(gap_rows);

        let bound = t.sub(recon, regu)?;
        let value = t.add(bound, extra)?;
        let loss = match loss_terms {
            LossTerms::NegValue => t.neg(value),
            LossTerms::Gap => {
                let neg = t.neg(bound);
                t.add(neg, gap)?
            }
            LossTerms::Jsd {
                regu_v,
                regu_u,
                recon_v,
                recon_u,
            } => {
                // −½(ELBO_V + ELBO_U) + J
                let rv = t.mean_all(recon_v);
                let ru = t.mean_all(recon_u);
                let kv = t.mean_all(regu_v);
                let ku = t.mean_all(regu_u);
                let r = t.add(rv, ru)?;
                let k = t.add(kv, ku)?;
                let e = t.sub(r, k)?;
                let half = t.scale(e, -0.5);
                t.add(half, gap)?
            }
        };
        Ok(Assembled {
            tape: t,
            value,
            loss,
            recon,
            regu,
            extra,
            gap,
            recon_rows,
            regu_rows,
            extra_rows,
            vars,
            batch: b,
            samples: s,
        })
    }

    /// Sign convention of the training loss, for documentation and reports.
    ///
    /// ELBO and VAE_A minimize `−value`. EUBO and VAE_C minimize
    /// `−(recon − regu) + D[V‖U]`: the decoder and `V` climb the evidence
    /// from below while `U` is pulled onto `V`, which closes the bracket from
    /// above. JSD_EUBO minimizes `−½(ELBO_V + ELBO_U) + J[V‖U]`.
    pub fn training_loss_sign(&self) -> &'static str {
        match self.kind {
            ObjectiveKind::Elbo | ObjectiveKind::VaeA => "-value",
            ObjectiveKind::Eubo | ObjectiveKind::VaeC => "-(recon - regu) + gap",
            ObjectiveKind::JsdEubo => "-(elbo_v + elbo_u)/2 + gap",
        }
    }
}

enum LossTerms {
    NegValue,
    Gap,
    Jsd {
        regu_v: Var,
        regu_u: Var,
        recon_v: Var,
        recon_u: Var,
    },
}

fn std_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

fn repeat(t: &mut GradientTape, g: GaussianVars, s: usize) -> GaussianVars {
    GaussianVars {
        mean: t.repeat_rows(g.mean, s),
        logvar: t.repeat_rows(g.logvar, s),
    }
}

/// `z = μ + exp(½·logvar) ⊙ ε`.
fn reparam(t: &mut GradientTape, g: GaussianVars, eps: Var) -> Result<Var> {
    let half = t.scale(g.logvar, 0.5);
    let sd = t.exp(half);
    let noise = t.mul(sd, eps)?;
    t.add(g.mean, noise)
}

/// Row-wise `log N(x; mean, diag(exp(logvar)))`, `rows × 1`.
fn log_normal_rows(t: &mut GradientTape, x: Var, g: GaussianVars) -> Result<Var> {
    let diff = t.sub(x, g.mean)?;
    let sq = t.square(diff);
    let neg_lv = t.neg(g.logvar);
    let prec = t.exp(neg_lv);
    let maha = t.mul(sq, prec)?;
    let inner = t.add(maha, g.logvar)?;
    let inner = t.add_scalar(inner, LN_2PI);
    let sum = t.sum_cols(inner);
    Ok(t.scale(sum, -0.5))
}

/// Row-wise `log N(z; 0, I)`.
fn log_prior_rows(t: &mut GradientTape, z: Var) -> Var {
    let sq = t.square(z);
    let inner = t.add_scalar(sq, LN_2PI);
    let sum = t.sum_cols(inner);
    t.scale(sum, -0.5)
}

fn decode_log_lik(
    t: &mut GradientTape,
    dec: &MlpGaussianNet,
    vars: &NetVars,
    z: Var,
    x_rep: Var,
) -> Result<Var> {
    let out = dec.forward_tape(t, vars, z)?;
    log_normal_rows(t, x_rep, out)
}

/// Row-wise `D[a‖N(0, I)]`.
fn kl_standard_rows(t: &mut GradientTape, a: GaussianVars) -> Result<Var> {
    let var = t.exp(a.logvar);
    let msq = t.square(a.mean);
    let s = t.add(var, msq)?;
    let s = t.sub(s, a.logvar)?;
    let s = t.add_scalar(s, -1.0);
    let sum = t.sum_cols(s);
    Ok(t.scale(sum, 0.5))
}

/// Row-wise `D[a‖b]` for diagonal Gaussians given as (mean, logvar).
fn kl_diag_rows(t: &mut GradientTape, a: GaussianVars, b: GaussianVars) -> Result<Var> {
    let dlv = t.sub(a.logvar, b.logvar)?;
    let ratio = t.exp(dlv);
    let dm = t.sub(b.mean, a.mean)?;
    let dm2 = t.square(dm);
    let neg_lvb = t.neg(b.logvar);
    let prec_b = t.exp(neg_lvb);
    let maha = t.mul(dm2, prec_b)?;
    let s = t.sub(ratio, dlv)?;
    let s = t.add(s, maha)?;
    let s = t.add_scalar(s, -1.0);
    let sum = t.sum_cols(s);
    Ok(t.scale(sum, 0.5))
}

/// Row-wise `D[V‖W]` against the P-PCA posterior, through the SVD of `C/σ`.
fn kl_ppca_rows(
    t: &mut GradientTape,
    v: GaussianVars,
    model: &PpcaModel,
    batch: &Matrix,
) -> Result<Var> {
    let svd = model.svd();
    let nz = model.n_z();
    let lam = &svd.singular_values;
    let sigma = model.sigma();

    // trace weights Σ_j (1+λ_j²) V_lj²
    let tw: Vec<f64> = (0..nz)
        .map(|l| {
            (0..nz)
                .map(|j| (1.0 + lam[j] * lam[j]) * svd.v[(l, j)] * svd.v[(l, j)])
                .sum()
        })
        .collect();
    let log_det_w: f64 = lam.iter().map(|l| (l * l).ln_1p()).sum();
    let h: Vec<f64> = lam.iter().map(|l| l * l / (1.0 + l * l)).collect();
    let c: Vec<f64> = lam.iter().map(|l| (1.0 + l * l) / l).collect();
    // a_l = u_l·x / σ per point
    let ux = batch.matmul(&svd.u)?.scale(1.0 / sigma);

    let tw = t.leaf(Matrix::new(1, nz, tw)?);
    let h = t.leaf(Matrix::new(1, nz, h)?);
    let c = t.leaf(Matrix::new(1, nz, c)?);
    let a = t.leaf(ux);
    let vt = t.leaf(svd.v.transpose());
    let zero_b = t.leaf(Matrix::zeros(1, nz));

    let var = t.exp(v.logvar);
    let trace = t.mul(var, tw)?;
    let trace = t.sub(trace, v.logvar)?;
    let trace = t.sum_cols(trace);
    let trace = t.add_scalar(trace, -log_det_w - nz as f64);

    let proj = t.affine(v.mean, vt, zero_b)?;
    let lifted = t.mul(proj, c)?;
    let diff = t.sub(a, lifted)?;
    let sq = t.square(diff);
    let weighted = t.mul(sq, h)?;
    let quad = t.sum_cols(weighted);

    let total = t.add(trace, quad)?;
    Ok(t.scale(total, 0.5))
}

/// Row-wise `log M(z) − log q(z)` with `M = ½(V + U)`.
fn log_mixture_minus_prior(
    t: &mut GradientTape,
    v: GaussianVars,
    u: GaussianVars,
    z: Var,
) -> Result<Var> {
    let lv = log_normal_rows(t, z, v)?;
    let lu = log_normal_rows(t, z, u)?;
    let lm = t.log_add_exp(lv, lu)?;
    let lm = t.add_scalar(lm, -LN_2);
    let lq = log_prior_rows(t, z);
    t.sub(lm, lq)
}

/// ELBO: `recon − D[V‖q]`.
pub fn elbo(
    enc_v: &MlpGaussianNet,
    dec: &MlpGaussianNet,
    batch: &Matrix,
    mc_samples: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let nets = NetRefs {
        enc_v,
        enc_aux: None,
        dec,
        dec_aux: None,
    };
    Problem::new(ObjectiveKind::Elbo, nets, None)?.evaluate(batch, mc_samples, seed)
}

/// VAE_A: ELBO plus `D[V‖W] − D[V‖Y]`, with `W` the posterior of `model`.
pub fn vae_a(
    enc_v: &MlpGaussianNet,
    enc_y: &MlpGaussianNet,
    dec: &MlpGaussianNet,
    model: &PpcaModel,
    batch: &Matrix,
    mc_samples: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let nets = NetRefs {
        enc_v,
        enc_aux: Some(enc_y),
        dec,
        dec_aux: None,
    };
    Problem::new(ObjectiveKind::VaeA, nets, Some(model))?.evaluate(batch, mc_samples, seed)
}

/// EUBO: ELBO plus `D[V‖U]`.
pub fn eubo(
    enc_v: &MlpGaussianNet,
    enc_u: &MlpGaussianNet,
    dec: &MlpGaussianNet,
    batch: &Matrix,
    mc_samples: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let nets = NetRefs {
        enc_v,
        enc_aux: Some(enc_u),
        dec,
        dec_aux: None,
    };
    Problem::new(ObjectiveKind::Eubo, nets, None)?.evaluate(batch, mc_samples, seed)
}

/// VAE_C: `recon − D[V‖q]`, reporting `D[V‖U]` as the gap.
pub fn vae_c(
    enc_v: &MlpGaussianNet,
    enc_u: &MlpGaussianNet,
    dec: &MlpGaussianNet,
    batch: &Matrix,
    mc_samples: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let nets = NetRefs {
        enc_v,
        enc_aux: Some(enc_u),
        dec,
        dec_aux: None,
    };
    Problem::new(ObjectiveKind::VaeC, nets, None)?.evaluate(batch, mc_samples, seed)
}

/// Symmetric EUBO: `½(recon_V + recon_U) − D[M‖q]`, `M = ½(V + U)`.
pub fn jsd_eubo(
    enc_v: &MlpGaussianNet,
    enc_u: &MlpGaussianNet,
    dec_v: &MlpGaussianNet,
    dec_u: &MlpGaussianNet,
    batch: &Matrix,
    mc_samples: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let nets = NetRefs {
        enc_v,
        enc_aux: Some(enc_u),
        dec: dec_v,
        dec_aux: Some(dec_u),
    };
    Problem::new(ObjectiveKind::JsdEubo, nets, None)?.evaluate(batch, mc_samples, seed)
}

fn check_log_variance(lv: f64) -> Result<()> {
    let (lo, hi) = crate::nets::LOGVAR_CLAMP;
    if lv < lo || lv > hi {
        return Err(Error::InvalidArgument(format!(
            "log-variance {lv} lies outside the head clamp [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Affine decoder net reproducing the P-PCA likelihood `N(C·z, σ²I)`.
pub fn ppca_decoder_net(model: &PpcaModel) -> Result<MlpGaussianNet> {
    let (nx, nz) = (model.n_x(), model.n_z());
    let lv = 2.0 * model.sigma().ln();
    check_log_variance(lv)?;
    let mut params = Vec::with_capacity(2 * nx * nz + 2 * nx);
    params.extend_from_slice(model.c_r().as_slice());
    params.extend(std::iter::repeat_n(0.0, nx * nz));
    params.extend(std::iter::repeat_n(0.0, nx));
    params.extend(std::iter::repeat_n(lv, nx));
    MlpGaussianNet::from_params(&[nz, 2 * nx], &params)
}

/// Affine encoder net giving the diagonal part of the exact posterior `W`:
/// mean `β·x`, variances `diag(I − βC)`. Exact when `C` has orthogonal columns.
pub fn ppca_encoder_net(model: &PpcaModel) -> Result<MlpGaussianNet> {
    let (nx, nz) = (model.n_x(), model.n_z());
    let svd = model.svd();
    let lam = &svd.singular_values;
    let sigma = model.sigma();
    // β = V·diag(λ/(1+λ²))·Uᵀ/σ
    let beta = Matrix::from_fn(nz, nx, |i, j| {
        (0..nz)
            .map(|l| svd.v[(i, l)] * lam[l] / (1.0 + lam[l] * lam[l]) * svd.u[(j, l)])
            .sum::<f64>()
            / sigma
    });
    let diag_cov: Vec<f64> = (0..nz)
        .map(|i| {
            (0..nz)
                .map(|l| svd.v[(i, l)] * svd.v[(i, l)] / (1.0 + lam[l] * lam[l]))
                .sum()
        })
        .collect();
    let mut params = Vec::with_capacity(2 * nz * nx + 2 * nz);
    params.extend_from_slice(beta.as_slice());
    params.extend(std::iter::repeat_n(0.0, nz * nx));
    params.extend(std::iter::repeat_n(0.0, nz));
    for c in &diag_cov {
        let lv = c.ln();
        check_log_variance(lv)?;
        params.push(lv);
    }
    MlpGaussianNet::from_params(&[nx, 2 * nz], &params)
}

const QUAD_HALF_WIDTH: f64 = 14.0;
const QUAD_STEP: f64 = 2e-3;

/// `∫(Y_k − V_k)²/V_k dz` for one coordinate by the trapezoidal rule in the
/// standardized variable of `V_k`; the integrand is smooth and decays like a
/// Gaussian, so the rule converges geometrically.
fn chi_square_coordinate(mv: f64, sv: f64, my: f64, sy: f64) -> Result<f64> {
    let prec = 2.0 / sy - 1.0 / sv;
    if prec <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "second-order term diverges: variance ratio {} >= 2",
            sy / sv
        )));
    }
    if mv == my && sv == sy {
        return Ok(0.0);
    }
    let sd_v = sv.sqrt();
    // Y²/V is Gaussian-shaped with this centre and width
    let centre = ((2.0 * my / sy - mv / sv) / prec - mv) / sd_v;
    let width = 1.0 / (prec.sqrt() * sd_v);
    let lo = (-QUAD_HALF_WIDTH).min(centre - QUAD_HALF_WIDTH * width);
    let hi = QUAD_HALF_WIDTH.max(centre + QUAD_HALF_WIDTH * width);
    let n = ((hi - lo) / QUAD_STEP).ceil() as usize;
    let h = (hi - lo) / n as f64;
    let ln_sd_ratio = 0.5 * (sv / sy).ln();
    let f = |t: f64| {
        let z = mv + sd_v * t;
        let log_r = ln_sd_ratio - 0.5 * (z - my) * (z - my) / sy + 0.5 * t * t;
        let log_phi = -0.5 * t * t - 0.5 * LN_2PI;
        if log_r > 1.0 {
            // (e^r − 1)²·φ = e^{2r + log φ}·(1 − e^{−r})², finite where e^r is not
            let tail = -(-log_r).exp_m1();
            (2.0 * log_r + log_phi).exp() * tail * tail
        } else {
            let d = log_r.exp_m1();
            d * d * log_phi.exp()
        }
    };
    let mut acc = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        acc += f(lo + i as f64 * h);
    }
    Ok(acc * h)
}

/// `(D[V‖Y], ½∫(Y − V)²/V)`: the exact divergence and its second-order
/// expansion about `Y = V`.
///
/// The integral factorizes over coordinates as `Π_k (1 + b_k) − 1` with
/// `b_k = ∫(Y_k − V_k)²/V_k`, each computed by quadrature.
pub fn second_order_gap(v: &DiagGaussian, y: &DiagGaussian) -> Result<(f64, f64)> {
    if v.dim() != y.dim() {
        return dim_err(format!("{}-d vs {}-d gaussians", v.dim(), y.dim()));
    }
    let exact = kl_diag(v, y)?;
    let mut log_prod = 0.0;
    for k in 0..v.dim() {
        let b = chi_square_coordinate(v.mean()[k], v.variance()[k], y.mean()[k], y.variance()[k])?;
        log_prod += b.ln_1p();
    }
    Ok((exact, 0.5 * log_prod.exp_m1()))
}

/// Owned networks for one objective, in slot order `enc_v, enc_aux, dec, dec_aux`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSet {
    pub enc_v: MlpGaussianNet,
    pub enc_aux: Option<MlpGaussianNet>,
    pub dec: MlpGaussianNet,
    pub dec_aux: Option<MlpGaussianNet>,
}

impl NetSet {
    /// Freshly initialized nets for `kind`; each slot gets its own derived seed.
    pub fn init(
        kind: ObjectiveKind,
        n_x: usize,
        n_z: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let enc = |slot: u64| MlpGaussianNet::new(n_x, hidden, n_z, rng::derive(seed, &[slot]));
        let dec = |slot: u64| MlpGaussianNet::new(n_z, hidden, n_x, rng::derive(seed, &[slot]));
        Ok(Self {
            enc_v: enc(0)?,
            enc_aux: if kind.needs_aux_encoder() {
                Some(enc(1)?)
            } else {
                None
            },
            dec: dec(2)?,
            dec_aux: if kind.needs_aux_decoder() {
                Some(dec(3)?)
            } else {
                None
            },
        })
    }

    pub fn refs(&self) -> NetRefs<'_> {
        NetRefs {
            enc_v: &self.enc_v,
            enc_aux: self.enc_aux.as_ref(),
            dec: &self.dec,
            dec_aux: self.dec_aux.as_ref(),
        }
    }

    fn slots(&self) -> [Option<&MlpGaussianNet>; 4] {
        [
            Some(&self.enc_v),
            self.enc_aux.as_ref(),
            Some(&self.dec),
            self.dec_aux.as_ref(),
        ]
    }

    fn slots_mut(&mut self) -> [Option<&mut MlpGaussianNet>; 4] {
        [
            Some(&mut self.enc_v),
            self.enc_aux.as_mut(),
            Some(&mut self.dec),
            self.dec_aux.as_mut(),
        ]
    }

    /// Slot names, matching [`NetSet::params`] order.
    pub fn roles(&self) -> Vec<&'static str> {
        ["enc_v", "enc_aux", "dec", "dec_aux"]
            .into_iter()
            .zip(self.slots())
            .filter_map(|(name, n)| n.map(|_| name))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.slots().iter().flatten().map(|n| n.param_count()).sum()
    }

    /// All parameters, concatenated slot by slot.
    pub fn params(&self) -> Vec<f64> {
        self.slots()
            .iter()
            .flatten()
            .flat_map(|n| n.params())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return dim_err(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            ));
        }
        let mut offset = 0;
        for net in self.slots_mut().into_iter().flatten() {
            let n = net.param_count();
            net.set_params(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    /// Concatenates per-slot gradients in [`NetSet::params`] order.
    pub fn flatten_grads(&self, grads: &NetGrads) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.param_count());
        let parts = [
            Some(&grads.enc_v),
            grads.enc_aux.as_ref(),
            Some(&grads.dec),
            grads.dec_aux.as_ref(),
        ];
        for (net, g) in self.slots().into_iter().zip(parts) {
            match (net, g) {
                (Some(n), Some(g)) if g.len() == n.param_count() => out.extend_from_slice(g),
                (Some(n), None) => out.extend(std::iter::repeat_n(0.0, n.param_count())),
                (None, _) => {}
                (Some(_), Some(_)) => return dim_err("gradient length differs from net"),
            }
        }
        Ok(out)
    }

    pub fn states(&self) -> Vec<crate::nets::NetState> {
        ["enc_v", "enc_aux", "dec", "dec_aux"]
            .into_iter()
            .zip(self.slots())
            .filter_map(|(name, n)| n.map(|n| n.to_state(name)))
            .collect()
    }
}
