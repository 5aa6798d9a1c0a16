//! Gaussian divergences.
//!
//! `kl_v_w_svd` is the production path for `D[V‖W]` between a diagonal
//! encoder and the probabilistic-PCA posterior: it touches only the thin SVD
//! factors of `Λ = C/σ` and never forms an `N_x × N_x` matrix. `kl_dense` is
//! the textbook closed form and is kept as its oracle.

use std::f64::consts::LN_2;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{sym_eig, Cholesky, Matrix};
use crate::ppca::PpcaModel;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Product of independent univariate normals.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return dim_err(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            ));
        }
        if mean.iter().chain(&variance).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        if variance.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("variances must be > 0".into()));
        }
        Ok(Self { mean, variance })
    }

    /// `N(0, I_n)`.
    pub fn standard(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            variance: vec![1.0; n],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return dim_err(format!(
                "point of length {} for {}-d gaussian",
                z.len(),
                self.dim()
            ));
        }
        Ok(self.log_pdf_unchecked(z))
    }

    pub(crate) fn log_pdf_unchecked(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((zi, m), s)| -0.5 * (LN_2PI + s.ln() + (zi - m) * (zi - m) / s))
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.variance
            .iter()
            .map(|s| 0.5 * (1.0 + LN_2PI + s.ln()))
            .sum()
    }

    /// Reparameterized draw `μ + √Σ ⊙ ε`.
    pub fn reparam(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return dim_err(format!(
                "noise of length {} for {}-d gaussian",
                eps.len(),
                self.dim()
            ));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.variance)
            .zip(eps)
            .map(|((m, s), e)| m + s.sqrt() * e)
            .collect())
    }

    pub fn to_full(&self) -> FullGaussian {
        FullGaussian::new(self.mean.clone(), Matrix::from_diag(&self.variance))
            .expect("positive diagonal is SPD")
    }
}

/// Gaussian with a dense symmetric positive-definite covariance.
#[derive(Clone, Debug)]
pub struct FullGaussian {
    mean: Vec<f64>,
    covariance: Matrix,
    chol: Cholesky,
}

impl FullGaussian {
    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        covariance.check_symmetric(1e-12)?;
        if covariance.rows() != mean.len() {
            return dim_err(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                covariance.rows(),
                covariance.cols()
            ));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian mean"));
        }
        let chol = covariance.cholesky()?;
        Ok(Self {
            mean,
            covariance,
            chol,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return dim_err("point dimension");
        }
        let d: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let q = self.chol.quad_form_inv(&d)?;
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.chol.log_det() + q))
    }

    /// Draws `μ + L·ε`.
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return dim_err("noise dimension");
        }
        let l = self.chol.factor();
        Ok((0..self.dim())
            .map(|i| self.mean[i] + (0..=i).map(|k| l[(i, k)] * eps[k]).sum::<f64>())
            .collect())
    }
}

/// `D[v‖y]` between diagonal Gaussians, summed over coordinates.
pub fn kl_diag(v: &DiagGaussian, y: &DiagGaussian) -> Result<f64> {
    if v.dim() != y.dim() {
        return dim_err(format!(
            "kl between {}-d and {}-d gaussians",
            v.dim(),
            y.dim()
        ));
    }
    Ok(v.mean
        .iter()
        .zip(&v.variance)
        .zip(y.mean.iter().zip(&y.variance))
        .map(|((mv, sv), (my, sy))| {
            let r = sv / sy;
            0.5 * (-r.ln() + r - 1.0 + (my - mv) * (my - mv) / sy)
        })
        .sum())
}

/// Closed-form `D[v‖w]` for dense Gaussians (quadratic term halved).
pub fn kl_dense(v: &FullGaussian, w: &FullGaussian) -> Result<f64> {
    let n = v.dim();
    if w.dim() != n {
        return dim_err(format!("kl between {n}-d and {}-d gaussians", w.dim()));
    }
    let w_inv = w.chol.inverse();
    let tr: f64 = (0..n)
        .map(|i| {
            (0..n)
                .map(|k| w_inv[(i, k)] * v.covariance[(k, i)])
                .sum::<f64>()
        })
        .sum();
    let d: Vec<f64> = w.mean.iter().zip(&v.mean).map(|(a, b)| a - b).collect();
    let quad = w.chol.quad_form_inv(&d)?;
    Ok(0.5 * (w.chol.log_det() - v.chol.log_det() + tr - n as f64 + quad))
}

/// The two halves of `D[V‖W]` as assembled on the SVD path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvdDivergenceParts {
    /// Trace + log-determinant − N_z.
    pub trace_logdet: f64,
    /// Mean-difference quadratic form.
    pub quadratic: f64,
}

impl SvdDivergenceParts {
    pub fn total(&self) -> f64 {
        0.5 * (self.trace_logdet + self.quadratic)
    }
}

/// Diagonal weights `λ_l² / (1 + λ_l²)` of the projected quadratic form.
pub fn h_diagonal(singular_values: &[f64]) -> Vec<f64> {
    singular_values
        .iter()
        .map(|l| {
            let l2 = l * l;
            l2 / (1.0 + l2)
        })
        .collect()
}

/// `Σ_l [Σ_j (1+λ_j²) V_lj²] s_l`, i.e. `Tr[(I + ΛᵀΛ)·diag(s)]`.
pub fn svd_trace_term(model: &PpcaModel, variance: &[f64]) -> Result<f64> {
    let svd = model.svd();
    let nz = model.n_z();
    if variance.len() != nz {
        return dim_err("variance length must equal N_z");
    }
    let lam = &svd.singular_values;
    Ok((0..nz)
        .map(|l| {
            let weight: f64 = (0..nz)
                .map(|j| (1.0 + lam[j] * lam[j]) * svd.v[(l, j)] * svd.v[(l, j)])
                .sum();
            weight * variance[l]
        })
        .sum())
}

/// `μ̄ = β̄⁻¹·μ` with `β̄⁻¹ = [I_x + UL(UL)ᵀ]·U·L⁻¹·Vᵀ`, the right inverse of `β̄ = βσ`.
pub fn lifted_latent_mean(model: &PpcaModel, mu: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != model.n_z() {
        return dim_err("latent mean length must equal N_z");
    }
    model.require_full_rank()?;
    let svd = model.svd();
    let vt_mu = svd.v.t_mat_vec(mu)?;
    // U·(I + L²)·L⁻¹·Vᵀμ, because Uᵀ U = I collapses [I + UL²Uᵀ]·U.
    let coeffs: Vec<f64> = vt_mu
        .iter()
        .zip(&svd.singular_values)
        .map(|(c, l)| c * (1.0 + l * l) / l)
        .collect();
    svd.u.mat_vec(&coeffs)
}

/// `D[V‖W]` decomposed, evaluated purely from the SVD of `C/σ`.
pub fn kl_v_w_svd_parts(
    v: &DiagGaussian,
    model: &PpcaModel,
    x: &[f64],
) -> Result<SvdDivergenceParts> {
    let nz = model.n_z();
    if v.dim() != nz {
        return dim_err(format!("encoder has {} latents, model N_z = {nz}", v.dim()));
    }
    if x.len() != model.n_x() {
        return dim_err(format!(
            "x has length {}, model N_x = {}",
            x.len(),
            model.n_x()
        ));
    }
    model.require_full_rank()?;
    let svd = model.svd();
    let lam = &svd.singular_values;

    let trace = svd_trace_term(model, v.variance())?;
    let log_det: f64 = lam.iter().map(|l| (l * l).ln_1p()).sum::<f64>()
        + v.variance().iter().map(|s| s.ln()).sum::<f64>();
    let trace_logdet = trace - log_det - nz as f64;

    // projections of x̄ − μ̄ onto u_l
    let sigma = model.sigma();
    let ux = svd.u.t_mat_vec(x)?;
    let vt_mu = svd.v.t_mat_vec(v.mean())?;
    let h = h_diagonal(lam);
    let quadratic = (0..nz)
        .map(|l| {
            let mu_bar_l = vt_mu[l] * (1.0 + lam[l] * lam[l]) / lam[l];
            let p = ux[l] / sigma - mu_bar_l;
            p * h[l] * p
        })
        .sum();
    Ok(SvdDivergenceParts {
        trace_logdet,
        quadratic,
    })
}

/// `D[V‖W]` from the SVD factors only.
pub fn kl_v_w_svd(v: &DiagGaussian, model: &PpcaModel, x: &[f64]) -> Result<f64> {
    Ok(kl_v_w_svd_parts(v, model, x)?.total())
}

/// `E_V[log Y − log W] = D[V‖W] − D[V‖Y]`.
pub fn vae_a_new_term(
    v: &DiagGaussian,
    y: &DiagGaussian,
    model: &PpcaModel,
    x: &[f64],
) -> Result<f64> {
    if y.dim() != v.dim() {
        return dim_err("encoders disagree on latent dimension");
    }
    Ok(kl_v_w_svd(v, model, x)? - kl_diag(v, y)?)
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_terms(terms: &[f64]) -> Self {
        let n = terms.len();
        // shifted sum: identical terms average exactly
        let shift = terms.first().copied().unwrap_or(0.0);
        let mean = shift + terms.iter().map(|t| t - shift).sum::<f64>() / n as f64;
        let var = if n > 1 {
            terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            value: mean,
            std_error: (var / n as f64).sqrt(),
            samples: n,
        }
    }
}

/// `log g(z) − log M(z)` for `M = ½(U + V)`, where `log g` is one of the
/// two component log-densities. Formed from differences so that equal
/// components give exactly zero.
fn log_ratio_to_mixture(log_g: f64, a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    (log_g - hi) - (lo - hi).exp().ln_1p() + LN_2
}

/// Jensen–Shannon divergence `½D[U‖M] + ½D[V‖M]`, `M = ½(U+V)`, by Monte
/// Carlo with antithetic pairs drawn from each component.
///
/// Both components reuse the same standard-normal draws, which makes the
/// estimate exactly symmetric in its arguments.
pub fn jsd_mc(
    u: &DiagGaussian,
    v: &DiagGaussian,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if u.dim() != v.dim() {
        return dim_err("jsd between gaussians of different dimension");
    }
    if n_samples < 100 {
        return Err(Error::InvalidArgument(format!(
            "jsd_mc needs at least 100 samples, got {n_samples}"
        )));
    }
    let mut rng = rng::stream(seed);
    let d = u.dim();
    let mut eps = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut terms = Vec::with_capacity(n_samples);
    let half_term = |g: &DiagGaussian, eps: &[f64], z: &mut [f64]| -> f64 {
        let mut acc = 0.0;
        for sign in [1.0, -1.0] {
            for k in 0..d {
                z[k] = g.mean[k] + sign * g.variance[k].sqrt() * eps[k];
            }
            let (a, b) = (u.log_pdf_unchecked(z), v.log_pdf_unchecked(z));
            acc += log_ratio_to_mixture(g.log_pdf_unchecked(z), a, b);
        }
        0.5 * acc
    };
    for _ in 0..n_samples {
        eps.iter_mut()
            .for_each(|e| *e = StandardNormal.sample(&mut rng));
        let tu = half_term(u, &eps, &mut z);
        let tv = half_term(v, &eps, &mut z);
        terms.push(0.5 * (tu + tv));
    }
    Ok(McEstimate::from_terms(&terms))
}

/// `Σ_l (λ_l − 1 − log λ_l)` over the eigenvalues of `Σ_I^{1/2} Σ_J⁻¹ Σ_I^{1/2}`.
///
/// Equals `log|Σ_J| − log|Σ_I| + Tr(Σ_J⁻¹Σ_I) − N`, twice the covariance part
/// of `D[N(·,Σ_I) ‖ N(·,Σ_J)]`.
pub fn positivity_residual(sigma_i: &Matrix, sigma_j: &Matrix) -> Result<f64> {
    sigma_i.check_symmetric(1e-12)?;
    sigma_j.check_symmetric(1e-12)?;
    if sigma_i.rows() != sigma_j.rows() {
        return dim_err("covariances of different dimension");
    }
    let chol_j = sigma_j.cholesky()?;
    sigma_i.cholesky()?;
    let eig_i = sym_eig(sigma_i)?;
    let root_i = eig_i.map_spectrum(|v| v.max(0.0).sqrt());
    let d = root_i
        .matmul(&chol_j.inverse())?
        .matmul(&root_i)?
        .symmetrized();
    let eig = sym_eig(&d)?;
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(eig.eigenvalues.iter().map(|&l| l - 1.0 - l.ln()).sum())
}

/// Direct trace/log-det form `log|Σ_J| − log|Σ_I| + Tr(Σ_J⁻¹Σ_I) − N`.
pub fn trace_logdet_form(sigma_i: &Matrix, sigma_j: &Matrix) -> Result<f64> {
    let ci = sigma_i.cholesky()?;
    let cj = sigma_j.cholesky()?;
    let tr = cj.inverse().matmul(sigma_i)?.trace();
    Ok(cj.log_det() - ci.log_det() + tr - sigma_i.rows() as f64)
}

#[cfg(test)]
fn normal_pdf(z: f64, mean: f64, var: f64) -> f64 {
    (-(z - mean) * (z - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Expected `log g(z)` for `z ~ v`, closed form for diagonal Gaussians.
pub fn expected_log_pdf(v: &DiagGaussian, g: &DiagGaussian) -> Result<f64> {
    if v.dim() != g.dim() {
        return dim_err("dimension mismatch");
    }
    Ok(v.mean
        .iter()
        .zip(&v.variance)
        .zip(g.mean.iter().zip(&g.variance))
        .map(|((mv, sv), (mg, sg))| -0.5 * (LN_2PI + sg.ln() + ((mv - mg).powi(2) + sv) / sg))
        .sum())
}
