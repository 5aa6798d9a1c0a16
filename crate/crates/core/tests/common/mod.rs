//! Reference computations for the integration tests, written against plain
//! `Vec<Vec<f64>>` with Gauss–Jordan elimination so they share no code with
//! the library's Cholesky, eigen and SVD routines.

#![allow(dead_code)]

pub type Dense = Vec<Vec<f64>>;

pub fn from_matrix(m: &evbracket::linalg::Matrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn identity(n: usize) -> Dense {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

pub fn transpose(a: &Dense) -> Dense {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn mat_vec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn add(a: &Dense, b: &Dense, sb: f64) -> Dense {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + sb * y).collect())
        .collect()
}

pub fn scale(a: &Dense, s: f64) -> Dense {
    a.iter()
        .map(|r| r.iter().map(|x| x * s).collect())
        .collect()
}

pub fn frobenius(a: &Dense) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// Inverse and `ln|det|` by Gauss–Jordan with partial pivoting.
pub fn inverse_logdet(a: &Dense) -> (Dense, f64) {
    let n = a.len();
    let mut m: Dense = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            r
        })
        .collect();
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p != 0.0, "singular matrix in oracle");
        logdet += p.abs().ln();
        for v in m[col].iter_mut() {
            *v /= p;
        }
        let pivot_row = m[col].clone();
        for (r, row) in m.iter_mut().enumerate() {
            let f = row[col];
            if r != col && f != 0.0 {
                for (x, p) in row.iter_mut().zip(&pivot_row) {
                    *x -= f * p;
                }
            }
        }
    }
    (m.into_iter().map(|r| r[n..].to_vec()).collect(), logdet)
}

pub fn inverse(a: &Dense) -> Dense {
    inverse_logdet(a).0
}

/// `KL(N(m0, S0) ‖ N(m1, S1))`.
pub fn kl_gauss(m0: &[f64], s0: &Dense, m1: &[f64], s1: &Dense) -> f64 {
    let n = m0.len() as f64;
    let (s1_inv, ld1) = inverse_logdet(s1);
    let (_, ld0) = inverse_logdet(s0);
    let tr: f64 = matmul(&s1_inv, s0)
        .iter()
        .enumerate()
        .map(|(i, r)| r[i])
        .sum();
    let d: Vec<f64> = m1.iter().zip(m0).map(|(a, b)| a - b).collect();
    let quad: f64 = d.iter().zip(mat_vec(&s1_inv, &d)).map(|(a, b)| a * b).sum();
    0.5 * (tr + quad - n + ld1 - ld0)
}

pub fn diag(v: &[f64]) -> Dense {
    (0..v.len())
        .map(|i| {
            (0..v.len())
                .map(|j| if i == j { v[i] } else { 0.0 })
                .collect()
        })
        .collect()
}

/// P-PCA posterior in latent form: `Σ = (I + CᵀC/σ²)⁻¹`, `μ = Σ·Cᵀx/σ²`.
pub fn ppca_posterior(c: &Dense, sigma: f64, x: &[f64]) -> (Vec<f64>, Dense) {
    let s2 = sigma * sigma;
    let ct = transpose(c);
    let prec = add(
        &identity(c[0].len()),
        &scale(&matmul(&ct, c), 1.0 / s2),
        1.0,
    );
    let cov = inverse(&prec);
    let mean = mat_vec(&cov, &mat_vec(&ct, x))
        .iter()
        .map(|v| v / s2)
        .collect();
    (mean, cov)
}

/// Log-density of `N(0, CCᵀ + σ²I)` at `x`.
pub fn ppca_logpdf(c: &Dense, sigma: f64, x: &[f64]) -> f64 {
    let n = x.len();
    let cov = add(
        &matmul(c, &transpose(c)),
        &scale(&identity(n), sigma * sigma),
        1.0,
    );
    let (inv, ld) = inverse_logdet(&cov);
    let quad: f64 = x.iter().zip(mat_vec(&inv, x)).map(|(a, b)| a * b).sum();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + ld + quad)
}

pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}
