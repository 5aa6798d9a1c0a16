//! Probabilistic PCA with an explicit projection matrix.
//!
//! The generative model is `x = C·z + v` with `z ~ N(0, I_z)` and
//! `v ~ N(0, σ² I_x)`. Every query that would naively need an `N_x × N_x`
//! inverse goes through the thin SVD `C/σ = Λ = U·diag(λ)·Vᵀ` instead:
//!
//! * posterior mean `βx = V·diag(λ/(1+λ²))·Uᵀx / σ`
//! * posterior covariance `(I + ΛᵀΛ)⁻¹ = V·diag(1/(1+λ²))·Vᵀ`
//! * evidence covariance `σ²(I + U·diag(λ²)·Uᵀ)`, whose inverse and
//!   log-determinant are diagonal in the `u_l` basis.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::divergence::{DiagGaussian, FullGaussian};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{dot, sym_eig, thin_svd, Matrix, ThinSvd};
use crate::rng;

/// A collection of observations, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    points: Matrix,
    centered: bool,
}

impl Dataset {
    /// Wraps raw points; they are treated as uncentered.
    pub fn new(points: Matrix) -> Self {
        Self {
            points,
            centered: false,
        }
    }

    /// Wraps points that are already zero-mean (e.g. drawn from a zero-mean model).
    pub fn assume_centered(points: Matrix) -> Self {
        Self {
            points,
            centered: true,
        }
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn into_points(self) -> Matrix {
        self.points
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut means = vec![0.0; self.dim()];
        for r in 0..self.len() {
            for (m, x) in means.iter_mut().zip(self.points.row(r)) {
                *m += x;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Returns a copy with column means subtracted.
    pub fn centered(&self) -> Dataset {
        if self.centered {
            return self.clone();
        }
        let means = self.column_means();
        let mut points = self.points.clone();
        for r in 0..points.rows() {
            for (x, m) in points.row_mut(r).iter_mut().zip(&means) {
                *x -= m;
            }
        }
        Dataset {
            points,
            centered: true,
        }
    }

    /// Splits off the trailing `fraction` of rows as a held-out set.
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let n_tail = ((n as f64) * fraction).round() as usize;
        let n_head = n - n_tail.min(n);
        let cols = self.dim();
        let data = self.points.as_slice();
        let head = Matrix::new(n_head, cols, data[..n_head * cols].to_vec())
            .expect("slice of a valid matrix");
        let tail = Matrix::new(n - n_head, cols, data[n_head * cols..].to_vec())
            .expect("slice of a valid matrix");
        (
            Dataset {
                points: head,
                centered: self.centered,
            },
            Dataset {
                points: tail,
                centered: self.centered,
            },
        )
    }
}

/// Sample covariance `(1/N) Σ xᵢxᵢᵀ` of the centered data.
pub fn data_covariance(data: &Dataset) -> Result<Matrix> {
    if data.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 points, got {}",
            data.len()
        )));
    }
    let centered = data.centered();
    let x = centered.points();
    let c = x.t_matmul(x)?.scale(1.0 / data.len() as f64);
    Ok(c.symmetrized())
}

/// How the noise scale is chosen when fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    Fixed(f64),
    /// σ² = mean of the discarded covariance eigenvalues.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub sigma: SigmaChoice,
    /// Use unit-norm eigenvectors as columns instead of the variance-matched
    /// `√max(μ_k − σ², 0)` scaling.
    pub raw_eigenvectors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            sigma: SigmaChoice::Auto,
            raw_eigenvectors: false,
        }
    }
}

/// A fitted (or given) probabilistic-PCA model.
#[derive(Clone, Debug)]
pub struct PpcaModel {
    c_r: Matrix,
    sigma: f64,
    svd: ThinSvd,
}

impl PpcaModel {
    pub fn new(c_r: Matrix, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be > 0, got {sigma}"
            )));
        }
        if c_r.cols() == 0 || c_r.cols() > c_r.rows() {
            return dim_err(format!(
                "projection must be N_x x N_z with 1 <= N_z <= N_x, got {}x{}",
                c_r.rows(),
                c_r.cols()
            ));
        }
        let svd = thin_svd(&c_r.scale(1.0 / sigma))?;
        Ok(Self { c_r, sigma, svd })
    }

    pub fn n_x(&self) -> usize {
        self.c_r.rows()
    }

    pub fn n_z(&self) -> usize {
        self.c_r.cols()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn c_r(&self) -> &Matrix {
        &self.c_r
    }

    /// Thin SVD of `Λ = C/σ`.
    pub fn svd(&self) -> &ThinSvd {
        &self.svd
    }

    /// `Λ = C/σ`.
    pub fn lambda(&self) -> Matrix {
        self.c_r.scale(1.0 / self.sigma)
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_x() {
            return dim_err(format!(
                "x has length {}, model N_x = {}",
                x.len(),
                self.n_x()
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("x"));
        }
        Ok(())
    }

    /// Projections `u_lᵀ x` for all l.
    fn project(&self, x: &[f64]) -> Vec<f64> {
        self.svd.u.t_mat_vec(x).expect("checked length")
    }

    /// Exact posterior `W(z|x) = N(βx, I − βC)`.
    pub fn posterior_w(&self, x: &[f64]) -> Result<FullGaussian> {
        self.check_x(x)?;
        let proj = self.project(x);
        let lam = &self.svd.singular_values;
        let scaled: Vec<f64> = proj
            .iter()
            .zip(lam)
            .map(|(p, l)| p * l / (1.0 + l * l) / self.sigma)
            .collect();
        let mean = self.svd.v.mat_vec(&scaled)?;
        let nz = self.n_z();
        let v = &self.svd.v;
        let cov = Matrix::from_fn(nz, nz, |i, j| {
            (0..nz)
                .map(|l| v[(i, l)] * v[(j, l)] / (1.0 + lam[l] * lam[l]))
                .sum()
        })
        .symmetrized();
        FullGaussian::new(mean, cov)
    }

    /// Likelihood `p(x|z) = N(C·z, σ² I)`.
    pub fn likelihood(&self, z: &[f64]) -> Result<DiagGaussian> {
        if z.len() != self.n_z() {
            return dim_err(format!(
                "z has length {}, model N_z = {}",
                z.len(),
                self.n_z()
            ));
        }
        let mean = self.c_r.mat_vec(z)?;
        DiagGaussian::new(mean, vec![self.sigma * self.sigma; self.n_x()])
    }

    /// Log-determinant of the evidence covariance `C·Cᵀ + σ² I`.
    pub fn evidence_log_det(&self) -> f64 {
        let n_x = self.n_x() as f64;
        n_x * (self.sigma * self.sigma).ln()
            + self
                .svd
                .singular_values
                .iter()
                .map(|l| (l * l).ln_1p())
                .sum::<f64>()
    }

    /// Exact `log N(x; 0, C·Cᵀ + σ² I)`.
    pub fn evidence_logpdf(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        let proj = self.project(x);
        let shrink: f64 = proj
            .iter()
            .zip(&self.svd.singular_values)
            .map(|(p, l)| p * p * l * l / (1.0 + l * l))
            .sum();
        let quad = (dot(x, x) - shrink) / (self.sigma * self.sigma);
        let n_x = self.n_x() as f64;
        Ok(-0.5 * (n_x * (2.0 * PI).ln() + self.evidence_log_det() + quad))
    }

    /// Mean exact evidence over the rows of `data`.
    pub fn mean_evidence(&self, data: &Matrix) -> Result<f64> {
        let mut total = 0.0;
        for r in 0..data.rows() {
            total += self.evidence_logpdf(data.row(r))?;
        }
        Ok(total / data.rows().max(1) as f64)
    }

    /// Noise-free posterior point `(CᵀC)⁻¹Cᵀx` through the SVD pseudo-inverse.
    pub fn noiseless_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        self.require_full_rank()?;
        let proj = self.project(x);
        let scaled: Vec<f64> = proj
            .iter()
            .zip(&self.svd.singular_values)
            .map(|(p, l)| p / (l * self.sigma))
            .collect();
        self.svd.v.mat_vec(&scaled)
    }

    /// Fails unless every singular value of `Λ` is clearly nonzero.
    pub fn require_full_rank(&self) -> Result<()> {
        let lam = &self.svd.singular_values;
        let lmax = lam.first().copied().unwrap_or(0.0);
        let tol = lmax * self.n_x() as f64 * f64::EPSILON;
        if let Some((l, s)) = lam.iter().enumerate().find(|(_, &s)| s <= tol || s == 0.0) {
            return Err(Error::Singular(format!(
                "projection is rank deficient (singular value {l} = {s:e})"
            )));
        }
        Ok(())
    }

    /// Draws `n` points `C·z + v`; deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = rng::stream(seed);
        let (nx, nz) = (self.n_x(), self.n_z());
        let mut data = Vec::with_capacity(n * nx);
        for _ in 0..n {
            let z: Vec<f64> = (0..nz).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mean = self.c_r.mat_vec(&z).expect("z has N_z entries");
            for m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(m + self.sigma * noise);
            }
        }
        Dataset::assume_centered(Matrix::new(n, nx, data).expect("finite samples"))
    }
}

/// Fits the projection from the top `n_z` covariance eigenvectors.
pub fn fit_ppca(data: &Dataset, n_z: usize, sigma: f64) -> Result<PpcaModel> {
    fit_ppca_with(
        data,
        n_z,
        &FitOptions {
            sigma: SigmaChoice::Fixed(sigma),
            raw_eigenvectors: false,
        },
    )
}

pub fn fit_ppca_with(data: &Dataset, n_z: usize, opts: &FitOptions) -> Result<PpcaModel> {
    let n_x = data.dim();
    if n_z == 0 || n_z > n_x {
        return dim_err(format!("n_z must be in 1..={n_x}, got {n_z}"));
    }
    let cov = data_covariance(data)?;
    let eig = sym_eig(&cov)?;
    let sigma = match opts.sigma {
        SigmaChoice::Fixed(s) => s,
        SigmaChoice::Auto => {
            if n_z == n_x {
                return Err(Error::InvalidArgument(
                    "automatic sigma needs at least one discarded direction".into(),
                ));
            }
            let rest = &eig.eigenvalues[n_z..];
            let var = rest.iter().sum::<f64>() / rest.len() as f64;
            var.max(0.0).sqrt()
        }
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let s2 = sigma * sigma;
    let c_r = Matrix::from_fn(n_x, n_z, |r, k| {
        let scale = if opts.raw_eigenvectors {
            1.0
        } else {
            (eig.eigenvalues[k] - s2).max(0.0).sqrt()
        };
        eig.eigenvectors[(r, k)] * scale
    });
    PpcaModel::new(c_r, sigma)
}
