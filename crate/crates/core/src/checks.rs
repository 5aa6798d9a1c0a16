//! Self-check suites: each fast path against a dense or finite-difference
//! reference on seeded random instances. Backs the `check` subcommand.

use rand::Rng;
use serde::Serialize;

use crate::divergence::{kl_dense, kl_v_w_svd, positivity_residual, DiagGaussian, FullGaussian};
use crate::error::{Error, Result};
use crate::linalg::{woodbury_latent_inverse, Matrix};
use crate::objectives::{NetSet, ObjectiveKind, Problem, Target};
use crate::ppca::PpcaModel;
use crate::rng::{self, Stream};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    /// Fraction of coordinates with relative error ≤ 1e-4.
    pub fraction_within: f64,
    pub worst_relative_error: f64,
}

impl GradCheckReport {
    /// At least 95% of coordinates within 1e-4 and none above 1e-2.
    pub fn passed(&self) -> bool {
        self.fraction_within >= 0.95 && self.worst_relative_error <= 1e-2
    }
}

/// Gradients below this magnitude on both sides are compared absolutely.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR)
}

/// Compares tape gradients with central differences of step `h` on every
/// parameter, using common random numbers (fixed `seed`).
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    kind: ObjectiveKind,
    nets: &NetSet,
    model: Option<&PpcaModel>,
    batch: &Matrix,
    mc_samples: usize,
    seed: u64,
    h: f64,
    target: Target,
) -> Result<GradCheckReport> {
    let problem = Problem::new(kind, nets.refs(), model)?;
    let diff = problem.differentiate(batch, mc_samples, seed, target)?;
    let analytic = nets.flatten_grads(&diff.grads)?;
    let base = nets.params();
    let mut probe = nets.clone();
    let eval = |probe: &NetSet| -> Result<f64> {
        let p = Problem::new(kind, probe.refs(), model)?;
        match target {
            Target::Value => Ok(p.evaluate(batch, mc_samples, seed)?.value),
            Target::Loss => p.loss(batch, mc_samples, seed),
        }
    };
    let mut within = 0usize;
    let mut worst = 0.0f64;
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + h;
        probe.set_params(&params)?;
        let up = eval(&probe)?;
        params[i] = base[i] - h;
        probe.set_params(&params)?;
        let dn = eval(&probe)?;
        params[i] = base[i];
        let numeric = (up - dn) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        if rel <= 1e-4 {
            within += 1;
        }
        worst = worst.max(rel);
    }
    Ok(GradCheckReport {
        coordinates: base.len(),
        fraction_within: within as f64 / base.len().max(1) as f64,
        worst_relative_error: worst,
    })
}

/// Dense posterior `N(β·x, I − β·C)` with `β = Cᵀ(C·Cᵀ + σ²I)⁻¹`.
pub fn dense_posterior(model: &PpcaModel, x: &[f64]) -> Result<FullGaussian> {
    let c = model.c_r();
    let mut s = c.matmul(&c.transpose())?;
    for i in 0..model.n_x() {
        s[(i, i)] += model.sigma() * model.sigma();
    }
    let beta = c.transpose().matmul(&s.cholesky()?.inverse())?;
    let cov = Matrix::identity(model.n_z())
        .sub(&beta.matmul(c)?)?
        .symmetrized();
    FullGaussian::new(beta.mat_vec(x)?, cov)
}

/// `(I − Λᵀ(I + ΛΛᵀ)⁻¹Λ)⁻¹` through an `N_x × N_x` inverse.
pub fn dense_latent_inverse(lambda: &Matrix) -> Result<Matrix> {
    let nx = lambda.rows();
    let big = Matrix::identity(nx).add(&lambda.matmul(&lambda.transpose())?)?;
    let inner = lambda
        .transpose()
        .matmul(&big.cholesky()?.inverse())?
        .matmul(lambda)?;
    let m = Matrix::identity(lambda.cols()).sub(&inner)?.symmetrized();
    Ok(m.cholesky()?.inverse())
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Stream) -> Matrix {
    Matrix::new(rows, cols, rng::normals(rng, rows * cols)).expect("finite normals")
}

/// Random SPD matrix `B·Bᵀ/n + δI`.
pub fn random_spd(n: usize, rng: &mut Stream) -> Matrix {
    let b = gaussian_matrix(n, n, rng);
    let mut a = b
        .matmul(&b.transpose())
        .expect("square")
        .scale(1.0 / n as f64);
    let delta = rng.random_range(0.05..1.0);
    for i in 0..n {
        a[(i, i)] += delta;
    }
    a.symmetrized()
}

/// One random divergence instance: `N_x ∈ {8,16,32}`, `N_z ∈ 1..=8`, `σ ∈ [0.05, 2]`.
pub struct SvdInstance {
    pub model: PpcaModel,
    pub v: DiagGaussian,
    pub x: Vec<f64>,
}

pub fn random_svd_instance(rng: &mut Stream) -> Result<SvdInstance> {
    let nx = [8, 16, 32][rng.random_range(0..3)];
    let nz = rng.random_range(1..=8usize);
    let sigma = rng.random_range(0.05..=2.0);
    let c = gaussian_matrix(nx, nz, rng);
    let model = PpcaModel::new(c, sigma)?;
    let x = model.sample(1, rng.random()).into_points().into_vec();
    let mean = (0..nz).map(|_| rng.random_range(-1.5..1.5)).collect();
    let var = (0..nz).map(|_| rng.random_range(0.05..2.0)).collect();
    Ok(SvdInstance {
        model,
        v: DiagGaussian::new(mean, var)?,
        x,
    })
}

/// Pass/fail tally of one suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    /// Largest observed error statistic (suite-specific).
    pub worst: f64,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            failed: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, ok: bool, stat: f64) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        if stat.is_nan() || stat > self.worst {
            self.worst = stat;
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

/// SVD-path `D[V‖W]` against the dense closed form; relative error ≤ 1e-8.
pub fn svd_divergence_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng::stream(rng::derive(seed, &[1]));
    let mut rep = SuiteReport::new("svd-divergence");
    for _ in 0..trials {
        let inst = random_svd_instance(&mut rng)?;
        let fast = kl_v_w_svd(&inst.v, &inst.model, &inst.x)?;
        let dense = kl_dense(&inst.v.to_full(), &dense_posterior(&inst.model, &inst.x)?)?;
        let rel = (fast - dense).abs() / dense.abs().max(f64::MIN_POSITIVE);
        rep.record(rel <= 1e-8, rel);
    }
    Ok(rep)
}

/// Positivity residual ≥ −1e-10 on random SPD pairs with `N_z ≤ 8`.
pub fn positivity_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng::stream(rng::derive(seed, &[2]));
    let mut rep = SuiteReport::new("positivity");
    for _ in 0..trials {
        let n = rng.random_range(1..=8usize);
        let a = random_spd(n, &mut rng);
        let b = random_spd(n, &mut rng);
        let r = positivity_residual(&a, &b)?;
        rep.record(r >= -1e-10, -r);
    }
    Ok(rep)
}

/// `I + ΛᵀΛ` against the dense `N_x × N_x` route; relative Frobenius ≤ 1e-8.
pub fn woodbury_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng::stream(rng::derive(seed, &[3]));
    let mut rep = SuiteReport::new("woodbury");
    for _ in 0..trials {
        let nx = [8, 16, 32][rng.random_range(0..3)];
        let nz = rng.random_range(1..=8usize);
        let scale = rng.random_range(0.1..3.0);
        let lambda = gaussian_matrix(nx, nz, &mut rng).scale(scale);
        let fast = woodbury_latent_inverse(&lambda);
        let dense = dense_latent_inverse(&lambda)?;
        let rel = fast.sub(&dense)?.frobenius_norm() / dense.frobenius_norm();
        rep.record(rel <= 1e-8, rel);
    }
    Ok(rep)
}

/// The tiny gradient-check instance: `N_x = 6`, `N_z = 2`, hidden width 8, batch 4.
pub struct TinyInstance {
    pub model: PpcaModel,
    pub batch: Matrix,
}

pub fn tiny_instance(seed: u64) -> Result<TinyInstance> {
    let mut rng = rng::stream(rng::derive(seed, &[4]));
    let c = gaussian_matrix(6, 2, &mut rng);
    let model = PpcaModel::new(c, 0.5)?;
    let batch = model.sample(4, rng.random()).into_points();
    Ok(TinyInstance { model, batch })
}

/// Finite-difference gradient checks over all five objectives, both for the
/// bound value and the training loss. `trials` independent nets per kind.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("gradients");
    for t in 0..trials as u64 {
        let inst = tiny_instance(rng::derive(seed, &[t]))?;
        for (k, kind) in ObjectiveKind::ALL.into_iter().enumerate() {
            let nets = NetSet::init(kind, 6, 2, &[8], rng::derive(seed, &[t, k as u64]))?;
            for target in [Target::Value, Target::Loss] {
                let r = gradient_check(
                    kind,
                    &nets,
                    Some(&inst.model),
                    &inst.batch,
                    2,
                    t,
                    1e-5,
                    target,
                )?;
                rep.record(r.passed(), r.worst_relative_error);
            }
        }
    }
    Ok(rep)
}

/// Runs every suite; gradient checks are costlier, so they get a tenth of
/// the trials (at least one).
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    Ok(vec![
        svd_divergence_suite(trials, seed)?,
        positivity_suite(trials, seed)?,
        woodbury_suite(trials, seed)?,
        gradient_suite(trials.div_ceil(10), seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
    }

    #[test]
    fn suites_pass_briefly() {
        for rep in run_all(5, 42).unwrap() {
            assert!(rep.ok(), "{rep:?}");
        }
    }

    #[test]
    fn gradient_check_flags_wrong_gradients() {
        // a huge step ruins the central difference
        let inst = tiny_instance(1).unwrap();
        let nets = NetSet::init(ObjectiveKind::Elbo, 6, 2, &[8], 3).unwrap();
        let coarse = gradient_check(
            ObjectiveKind::Elbo,
            &nets,
            None,
            &inst.batch,
            2,
            0,
            0.5,
            Target::Value,
        )
        .unwrap();
        assert!(!coarse.passed());
        let fine = gradient_check(
            ObjectiveKind::Elbo,
            &nets,
            None,
            &inst.batch,
            2,
            0,
            1e-5,
            Target::Value,
        )
        .unwrap();
        assert!(fine.passed(), "{fine:?}");
    }
}
