//! Closed-form and Monte Carlo divergences between diagonal Gaussians.

use evbracket::divergence::{jsd_mc, kl_diag, positivity_residual, DiagGaussian};
use evbracket::linalg::Matrix;
use evbracket::objectives::second_order_gap;

fn main() -> evbracket::Result<()> {
    let v = DiagGaussian::new(vec![0.0, 1.0], vec![1.0, 0.5])?;
    let u = DiagGaussian::new(vec![0.5, 0.5], vec![0.8, 0.9])?;
    println!(
        "D[V|U] = {:.6}, D[U|V] = {:.6}",
        kl_diag(&v, &u)?,
        kl_diag(&u, &v)?
    );

    let j = jsd_mc(&v, &u, 20_000, 1)?;
    println!(
        "J[V|U] = {:.5} ± {:.5} (bounded by ln 2 = {:.5})",
        j.value,
        j.std_error,
        std::f64::consts::LN_2
    );

    let a = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]])?;
    let b = Matrix::from_rows(&[vec![1.0, -0.2], vec![-0.2, 0.5]])?;
    println!("positivity residual {:.6}", positivity_residual(&a, &b)?);

    println!("   eps      D[V|Y]     second order");
    for eps in [0.2, 0.1, 0.05] {
        let y = DiagGaussian::new(vec![eps, 1.0 + eps], vec![1.0 * (1.0 + eps), 0.5])?;
        let (exact, quad) = second_order_gap(&v, &y)?;
        println!("{eps:6.3} {exact:11.3e} {quad:11.3e}");
    }
    Ok(())
}
