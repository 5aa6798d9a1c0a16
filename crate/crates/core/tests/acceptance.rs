//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;

use common::*;
use evbracket::checks::gradient_check;
use evbracket::divergence::{jsd_mc, kl_v_w_svd, positivity_residual, DiagGaussian};
use evbracket::linalg::{woodbury_latent_inverse, Matrix};
use evbracket::objectives::{eubo, jsd_eubo, second_order_gap, NetSet, ObjectiveKind, Target};
use evbracket::ppca::PpcaModel;
use evbracket::rng::{self, Stream};
use evbracket::trainer::{bracket_monitor, prepare_data, train_on, LrSchedule, TrainConfig};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rows: usize, cols: usize, rng: &mut Stream) -> Matrix {
    Matrix::new(rows, cols, rng::normals(rng, rows * cols)).unwrap()
}

fn spd(n: usize, rng: &mut Stream) -> Dense {
    let b = from_matrix(&gaussian(n, n, rng));
    let mut a = scale(&matmul(&b, &transpose(&b)), 1.0 / n as f64);
    let delta = rng.random_range(0.05..1.0);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += delta;
    }
    a
}

fn to_matrix(a: &Dense) -> Matrix {
    Matrix::from_rows(a).unwrap()
}

fn svd_divergence() -> Outcome {
    let mut rng = rng::stream(101);
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let nx = [8, 16, 32][rng.random_range(0..3)];
        let nz = rng.random_range(1..=8usize);
        let sigma = rng.random_range(0.05..=2.0);
        let c = gaussian(nx, nz, &mut rng);
        let model = PpcaModel::new(c.clone(), sigma).unwrap();
        let x = model.sample(1, rng.random()).into_points().into_vec();
        let mean: Vec<f64> = (0..nz).map(|_| rng.random_range(-1.5..1.5)).collect();
        let var: Vec<f64> = (0..nz).map(|_| rng.random_range(0.05..2.0)).collect();
        let v = DiagGaussian::new(mean.clone(), var.clone()).unwrap();
        let fast = kl_v_w_svd(&v, &model, &x).unwrap();
        let (wm, wc) = ppca_posterior(&from_matrix(&c), sigma, &x);
        let oracle = kl_gauss(&mean, &diag(&var), &wm, &wc);
        worst = worst.max((fast - oracle).abs() / oracle.abs());
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 5.0,
        format!("100 instances, worst relative error {worst:.2e} (<= 1e-8), {secs:.3}s (< 5s)"),
    )
}

fn positivity() -> Outcome {
    let mut rng = rng::stream(202);
    let started = Instant::now();
    let mut min_residual = f64::INFINITY;
    let mut oracle_gap: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8usize);
        let (a, b) = (spd(n, &mut rng), spd(n, &mut rng));
        let r = positivity_residual(&to_matrix(&a), &to_matrix(&b)).unwrap();
        min_residual = min_residual.min(r);
        let (b_inv, ld_b) = inverse_logdet(&b);
        let (_, ld_a) = inverse_logdet(&a);
        let tr: f64 = matmul(&b_inv, &a)
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .sum();
        let direct = ld_b - ld_a + tr - n as f64;
        oracle_gap = oracle_gap.max((r - direct).abs() / direct.abs().max(1.0));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        min_residual >= -1e-10 && secs < 2.0,
        format!(
            "1000 pairs, min residual {min_residual:.3e} (>= -1e-10), trace/log-det agreement {oracle_gap:.1e}, {secs:.3}s (< 2s)"
        ),
    )
}

fn woodbury() -> Outcome {
    let mut rng = rng::stream(303);
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let nx = [8, 16, 32][rng.random_range(0..3)];
        let nz = rng.random_range(1..=8usize);
        let lambda = gaussian(nx, nz, &mut rng).scale(rng.random_range(0.1..3.0));
        let fast = from_matrix(&woodbury_latent_inverse(&lambda));
        let l = from_matrix(&lambda);
        let big = add(&identity(nx), &matmul(&l, &transpose(&l)), 1.0);
        let inner = matmul(&matmul(&transpose(&l), &inverse(&big)), &l);
        let dense = inverse(&add(&identity(nz), &inner, -1.0));
        worst = worst.max(frobenius(&add(&fast, &dense, -1.0)) / frobenius(&dense));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 2.0,
        format!(
            "100 matrices, worst relative Frobenius error {worst:.2e} (<= 1e-8), {secs:.3}s (< 2s)"
        ),
    )
}

fn gradients() -> Outcome {
    let mut rng = rng::stream(404);
    let model = PpcaModel::new(gaussian(6, 2, &mut rng), 0.5).unwrap();
    let batch = model.sample(4, 17).into_points();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, kind) in ObjectiveKind::ALL.into_iter().enumerate() {
        let nets = NetSet::init(kind, 6, 2, &[8], 500 + k as u64).unwrap();
        let mut frac: f64 = 1.0;
        let mut worst: f64 = 0.0;
        for target in [Target::Value, Target::Loss] {
            let r = gradient_check(kind, &nets, Some(&model), &batch, 2, 9, 1e-5, target).unwrap();
            frac = frac.min(r.fraction_within);
            worst = worst.max(r.worst_relative_error);
        }
        pass &= frac >= 0.95 && worst <= 1e-2;
        parts.push(format!("{kind} {:.0}%/{worst:.1e}", 100.0 * frac));
    }
    outcome(
        pass,
        format!(
            "within 1e-4 / worst (need >= 95% / <= 1e-2): {}",
            parts.join(", ")
        ),
    )
}

fn bracket_config() -> TrainConfig {
    let mut cfg = TrainConfig::synthetic(ObjectiveKind::Elbo, 7);
    cfg.partner = Some(ObjectiveKind::Eubo);
    cfg.hidden = vec![];
    cfg.batch_size = 32;
    cfg.learning_rate = 0.01;
    cfg.lr_schedule = LrSchedule::Cosine;
    cfg.eval_every = 20;
    cfg
}

fn evidence_bracket() -> Outcome {
    let cfg = bracket_config();
    assert!(cfg.epochs <= 200 && cfg.eval_mc_samples >= 256);
    let started = Instant::now();
    let data = prepare_data(&cfg).unwrap();
    // one core: the two runs go back to back
    let lower = train_on(&cfg, ObjectiveKind::Elbo, &data, None).unwrap();
    let upper = train_on(&cfg, ObjectiveKind::Eubo, &data, None).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let status = bracket_monitor(&lower.rows, &upper.rows).unwrap();

    let truth = data.truth.as_ref().unwrap();
    let c = from_matrix(truth.c_r());
    let ev: Vec<f64> = (0..data.eval.len())
        .map(|i| ppca_logpdf(&c, truth.sigma(), data.eval.row(i)))
        .collect();
    let (exact, _) = mean_se(&ev);
    let (lo, hi) = (lower.last().unwrap(), upper.last().unwrap());
    let reported = lo.exact_evidence.unwrap();
    let se = status.combined_std_error;
    let pass = !lower.aborted
        && !upper.aborted
        && (reported - exact).abs() < 1e-9
        && lo.value <= exact + 3.0 * se
        && hi.value >= exact - 3.0 * se
        && status.width <= 1.0
        && secs <= 300.0;
    outcome(
        pass,
        format!(
            "ELBO {:.4} <= exact {exact:.4} <= EUBO {:.4} within 3 x combined SE {se:.4}; width {:.4} (<= 1.0, trend {:?}); {secs:.1}s",
            lo.value, hi.value, status.width, status.trend
        ),
    )
}

fn second_order() -> Outcome {
    let v = DiagGaussian::new(vec![0.3, -0.2], vec![0.8, 1.3]).unwrap();
    let remainder = |y: &DiagGaussian| {
        let (d, d2) = second_order_gap(&v, y).unwrap();
        let oracle = kl_gauss(v.mean(), &diag(v.variance()), y.mean(), &diag(y.variance()));
        assert!((d - oracle).abs() < 1e-12);
        (d - d2).abs()
    };
    let eps = [0.04, 0.02, 0.01];
    let shifted: Vec<f64> = eps
        .iter()
        .map(|e| {
            let m: Vec<f64> = v.mean().iter().map(|x| x + e).collect();
            remainder(&DiagGaussian::new(m, v.variance().to_vec()).unwrap())
        })
        .collect();
    let ratios = [shifted[0] / shifted[1], shifted[1] / shifted[2]];
    let pass = ratios.iter().all(|r| (4.0..=16.0).contains(r));
    let scaled: Vec<f64> = eps
        .iter()
        .map(|e| {
            let s: Vec<f64> = v.variance().iter().map(|x| x * (1.0 + e)).collect();
            remainder(&DiagGaussian::new(v.mean().to_vec(), s).unwrap())
        })
        .collect();
    outcome(
        pass,
        format!(
            "mean shift: remainders {:.3e} {:.3e} {:.3e}, ratios {:.4} {:.4} (need [4, 16]); variance scaling ratios {:.3} {:.3}",
            shifted[0],
            shifted[1],
            shifted[2],
            ratios[0],
            ratios[1],
            scaled[0] / scaled[1],
            scaled[1] / scaled[2]
        ),
    )
}

fn noiseless() -> Outcome {
    let mut rng = rng::stream(707);
    let (nx, nz) = (8, 3);
    let c = gaussian(nx, nz, &mut rng);
    let tight = PpcaModel::new(c.clone(), 1e-6).unwrap();
    let unit = PpcaModel::new(c.clone(), 1.0).unwrap();
    let x = tight.sample(1, 3).into_points().into_vec();
    let post = tight.posterior_w(&x).unwrap();
    let point = tight.noiseless_posterior(&x).unwrap();
    let cd = from_matrix(&c);
    let ct = transpose(&cd);
    let pinv = mat_vec(&inverse(&matmul(&ct, &cd)), &mat_vec(&ct, &x));
    let rel = |a: &[f64], b: &[f64]| {
        let d: f64 = a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        d / b.iter().map(|q| q * q).sum::<f64>().sqrt()
    };
    let mean_err = rel(post.mean(), &point);
    let oracle_err = rel(&point, &pinv);
    let ratio = post.covariance().trace() / unit.posterior_w(&x).unwrap().covariance().trace();
    outcome(
        mean_err <= 1e-4 && oracle_err <= 1e-8 && ratio <= 1e-6 * nz as f64,
        format!(
            "mean vs noise-free point {mean_err:.2e} (<= 1e-4), point vs pseudo-inverse {oracle_err:.1e}, trace ratio {ratio:.2e} (<= {:.0e})",
            1e-6 * nz as f64
        ),
    )
}

fn jsd() -> Outcome {
    let u = DiagGaussian::new(vec![0.5, -1.0], vec![1.0, 0.5]).unwrap();
    let far = DiagGaussian::new(vec![8.5, 7.0], vec![1.0, 0.5]).unwrap();
    let near = DiagGaussian::new(vec![1.0, -0.5], vec![1.5, 0.4]).unwrap();
    let n = 100_000;
    let same = jsd_mc(&u, &u, n, 1).unwrap();
    let sep = jsd_mc(&u, &far, n, 2).unwrap();
    let (ab, ba) = (
        jsd_mc(&u, &near, n, 3).unwrap(),
        jsd_mc(&near, &u, n, 3).unwrap(),
    );
    let ln2 = std::f64::consts::LN_2;
    let ok_same = same.value.abs() <= 3.0 * same.std_error;
    let ok_sep = (sep.value - ln2).abs() <= 3.0 * sep.std_error;
    let ok_sym = (ab.value - ba.value).abs() <= ab.std_error.hypot(ba.std_error);

    // tied encoders and decoders
    let mut rng = rng::stream(808);
    let model = PpcaModel::new(gaussian(6, 2, &mut rng), 0.5).unwrap();
    let batch = model.sample(200, 5).into_points();
    let nets = NetSet::init(ObjectiveKind::Elbo, 6, 2, &[8], 9).unwrap();
    let (enc, dec) = (&nets.enc_v, &nets.dec);
    let e = eubo(enc, enc, dec, &batch, 64, 11).unwrap();
    let j = jsd_eubo(enc, enc, dec, dec, &batch, 64, 11).unwrap();
    let diffs: Vec<f64> = j
        .per_point
        .iter()
        .zip(&e.per_point)
        .map(|(a, b)| a - b)
        .collect();
    let (md, sd) = mean_se(&diffs);
    let ok_tied = md.abs() <= 3.0 * sd;
    outcome(
        ok_same && ok_sep && ok_sym && ok_tied,
        format!(
            "J(u,u) {:.1e}±{:.1e}; separated ln2 {:+.1e}±{:.1e}; swap diff {:.1e} (SE {:.1e}); tied JSD_EUBO - EUBO {md:.4}±{sd:.4} (J gap {:.1e})",
            same.value,
            same.std_error,
            sep.value - ln2,
            sep.std_error,
            (ab.value - ba.value).abs(),
            ab.std_error.hypot(ba.std_error),
            j.gap
        ),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "objective = \"EUBO\"\nn_x = 8\nn_z = 2\nhidden = [16]\nepochs = 4\nbatch_size = 25\n\
         learning_rate = 0.005\nseed = 99\neval_every = 2\neval_mc_samples = 32\n\
         [data]\nsource = \"synthetic\"\nsigma = 0.2\nn_points = 300\n",
    )
    .unwrap();
    let run = |name: &str| {
        let metrics = dir.path().join(name);
        let args = [
            "evbracket",
            "train",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "99",
            "--metrics",
            metrics.to_str().unwrap(),
        ];
        assert_eq!(evbracket::cli::run(args), 0);
        std::fs::read(metrics).unwrap()
    };
    let (a, b) = (run("a.jsonl"), run("b.jsonl"));
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    outcome(
        a == b && rows > 0,
        format!("{rows} rows, {} bytes, identical: {}", a.len(), a == b),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("svd-path divergence equivalence", svd_divergence),
        ("positivity residual", positivity),
        ("woodbury latent inverse", woodbury),
        ("gradient fidelity", gradients),
        ("evidence bracket", evidence_bracket),
        ("second-order collapse", second_order),
        ("noiseless limit", noiseless),
        ("jsd estimator sanity", jsd),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
