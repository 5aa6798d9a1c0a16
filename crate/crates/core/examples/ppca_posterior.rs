//! Fit P-PCA to sampled data and inspect the exact posterior and evidence.

use evbracket::ppca::{fit_ppca_with, FitOptions};
use evbracket::trainer::generate_synthetic;

fn main() -> evbracket::Result<()> {
    let (data, truth) = generate_synthetic(10, 2, 0.1, 5000, 1)?;
    let fitted = fit_ppca_with(&data, 2, &FitOptions::default())?;
    println!(
        "true sigma {:.4}, fitted sigma {:.4}",
        truth.sigma(),
        fitted.sigma()
    );
    println!(
        "mean log-evidence: truth {:.4}, fitted {:.4}",
        truth.mean_evidence(data.points())?,
        fitted.mean_evidence(data.points())?
    );

    let x = data.row(0);
    let post = truth.posterior_w(x)?;
    println!("posterior mean {:?}", post.mean());
    println!("posterior covariance diag {:?}", post.covariance().diag());

    // shrinking the noise collapses the posterior onto the pseudo-inverse point
    for sigma in [1e-1, 1e-3, 1e-6] {
        let m = evbracket::ppca::PpcaModel::new(truth.c_r().clone(), sigma)?;
        let p = m.posterior_w(x)?;
        println!(
            "sigma {sigma:.0e}: mean {:?}, trace {:.3e}, noise-free point {:?}",
            p.mean(),
            p.covariance().trace(),
            m.noiseless_posterior(x)?
        );
    }
    Ok(())
}
