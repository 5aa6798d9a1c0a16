//! The SVD-path divergence `D[V‖W]` and the Woodbury latent inverse,
//! checked against dense computations.

use evbracket::checks::{dense_latent_inverse, dense_posterior};
use evbracket::divergence::{kl_dense, kl_v_w_svd, kl_v_w_svd_parts, DiagGaussian};
use evbracket::linalg::woodbury_latent_inverse;
use evbracket::trainer::generate_synthetic;

fn main() -> evbracket::Result<()> {
    let (data, model) = generate_synthetic(32, 4, 0.2, 1, 3)?;
    let x = data.row(0);
    let v = DiagGaussian::new(vec![0.1, -0.3, 0.0, 0.4], vec![0.5, 0.2, 1.0, 0.05])?;

    let parts = kl_v_w_svd_parts(&v, &model, x)?;
    let fast = kl_v_w_svd(&v, &model, x)?;
    let dense = kl_dense(&v.to_full(), &dense_posterior(&model, x)?)?;
    println!("D[V|W] via SVD  {fast:.12}");
    println!("D[V|W] dense    {dense:.12}");
    println!("parts           {parts:?}");

    let lambda = model.lambda();
    let fast = woodbury_latent_inverse(&lambda);
    let dense = dense_latent_inverse(&lambda)?;
    let err = fast.sub(&dense)?.frobenius_norm() / dense.frobenius_norm();
    println!("Woodbury vs 32x32 route: relative error {err:.2e}");
    Ok(())
}
