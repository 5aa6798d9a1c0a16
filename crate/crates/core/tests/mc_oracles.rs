//! Monte Carlo checks against closed forms.

mod common;

use common::*;
use evbracket::divergence::{expected_log_pdf, kl_diag, DiagGaussian};
use evbracket::linalg::{sym_eig, thin_svd};
use evbracket::objectives::{ppca_decoder_net, ppca_encoder_net, NetRefs, ObjectiveKind, Problem};
use evbracket::ppca::data_covariance;
use evbracket::rng;
use evbracket::trainer::generate_synthetic;

#[test]
fn reparameterized_draws_have_the_right_moments() {
    let g = DiagGaussian::new(vec![1.5, -0.5, 0.0], vec![0.25, 4.0, 1.0]).unwrap();
    let n = 100_000;
    let mut stream = rng::stream(11);
    let mut sums = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let z = g.reparam(&rng::normals(&mut stream, 3)).unwrap();
        for k in 0..3 {
            sums[k] += z[k];
            sq[k] += z[k] * z[k];
        }
    }
    for k in 0..3 {
        let m = sums[k] / n as f64;
        let v = sq[k] / n as f64 - m * m;
        let (mt, vt) = (g.mean()[k], g.variance()[k]);
        // 5 standard errors of each moment
        assert!(
            (m - mt).abs() < 5.0 * (vt / n as f64).sqrt(),
            "mean {k}: {m} vs {mt}"
        );
        assert!(
            (v - vt).abs() < 5.0 * vt * (2.0 / n as f64).sqrt(),
            "var {k}: {v} vs {vt}"
        );
    }
}

#[test]
fn kl_matches_sampled_log_ratio() {
    let v = DiagGaussian::new(vec![0.2, -1.0], vec![0.5, 1.5]).unwrap();
    let y = DiagGaussian::new(vec![-0.3, 0.4], vec![1.2, 0.7]).unwrap();
    let mut stream = rng::stream(12);
    let terms: Vec<f64> = (0..100_000)
        .map(|_| {
            let z = v.reparam(&rng::normals(&mut stream, 2)).unwrap();
            v.log_pdf(&z).unwrap() - y.log_pdf(&z).unwrap()
        })
        .collect();
    let (m, se) = mean_se(&terms);
    let exact = kl_diag(&v, &y).unwrap();
    assert!((m - exact).abs() < 4.0 * se, "{m} ± {se} vs {exact}");
    let cross = expected_log_pdf(&v, &y).unwrap();
    assert!((cross + exact + v.entropy()).abs() < 1e-12);
}

#[test]
fn synthetic_covariance_matches_model() {
    let (data, model) = generate_synthetic(16, 3, 0.1, 100_000, 5).unwrap();
    let emp = from_matrix(&data_covariance(&data).unwrap());
    let c = from_matrix(model.c_r());
    let mut truth = matmul(&c, &transpose(&c));
    for (i, row) in truth.iter_mut().enumerate() {
        row[i] += 0.01;
    }
    let rel = frobenius(&add(&emp, &truth, -1.0)) / frobenius(&truth);
    assert!(rel < 0.05, "relative covariance error {rel}");
}

#[test]
fn noiseless_synthetic_data_is_rank_one() {
    let (data, _) = generate_synthetic(8, 1, 1e-8, 500, 6).unwrap();
    let s = thin_svd(data.points()).unwrap().singular_values;
    assert!(s[1] <= 1e-4 * s[0], "{s:?}");
    let gram = data.points().t_matmul(data.points()).unwrap();
    let eig = sym_eig(&gram).unwrap();
    let mut ev = eig.eigenvalues.clone();
    ev.sort_by(|a, b| b.total_cmp(a));
    assert!(ev[1] <= 1e-8 * ev[0]);
}

#[test]
fn evidence_matches_dense_density() {
    let (data, model) = generate_synthetic(10, 4, 0.3, 50, 8).unwrap();
    let c = from_matrix(model.c_r());
    for i in 0..data.len() {
        let x = data.row(i);
        let a = model.evidence_logpdf(x).unwrap();
        let b = ppca_logpdf(&c, 0.3, x);
        assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        let post = model.posterior_w(x).unwrap();
        let (m, s) = ppca_posterior(&c, 0.3, x);
        for k in 0..4 {
            assert!((post.mean()[k] - m[k]).abs() < 1e-10);
            for (l, want) in s[k].iter().enumerate() {
                assert!((post.covariance()[(k, l)] - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn exact_encoder_and_decoder_average_to_the_evidence() {
    // orthogonal columns make the posterior diagonal, so the elbo is tight
    let (data, model) = generate_synthetic(8, 2, 0.2, 400, 9).unwrap();
    let enc = ppca_encoder_net(&model).unwrap();
    let dec = ppca_decoder_net(&model).unwrap();
    let nets = NetRefs {
        enc_v: &enc,
        enc_aux: None,
        dec: &dec,
        dec_aux: None,
    };
    let est = Problem::new(ObjectiveKind::Elbo, nets, None)
        .unwrap()
        .evaluate(data.points(), 64, 3)
        .unwrap();
    let diffs: Vec<f64> = (0..data.len())
        .map(|i| est.per_point[i] - model.evidence_logpdf(data.row(i)).unwrap())
        .collect();
    let (m, se) = mean_se(&diffs);
    assert!(m.abs() < 4.0 * se + 1e-9, "{m} ± {se}");
}
