//! Calibrate an SVI smile to noisy variance observations and read the
//! fitted curve back on a return grid.

use bitcoin_premia::grid::ReturnGrid;
use bitcoin_premia::vol_surface::{fit_svi, svi_total_variance, IvCurve, SviParams};
use bitcoin_premia::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Largest absolute error of the fitted variance over the quoted range.
pub fn run() -> Result<f64> {
    let truth = SviParams::new(0.35, 0.6, -0.3, 0.05, 0.25)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.002).expect("valid sd");
    let points: Vec<(f64, f64)> = (0..41)
        .map(|i| {
            let r = -0.6 + 0.04 * i as f64;
            (r, svi_total_variance(r, &truth) + noise.sample(&mut rng))
        })
        .collect();

    let curve = fit_svi(&points, 27)?;
    let p = curve.params;
    println!("true   a={:.4} b={:.4} rho={:.4} m={:.4} sigma={:.4}", truth.a, truth.b, truth.rho, truth.m, truth.sigma);
    println!("fitted a={:.4} b={:.4} rho={:.4} m={:.4} sigma={:.4}  rmse={:.2e}", p.a, p.b, p.rho, p.m, p.sigma, curve.fit_rmse);

    let max_err = points
        .iter()
        .map(|(r, _)| (curve.variance(*r) - svi_total_variance(*r, &truth)).abs())
        .fold(0.0, f64::max);
    let grid = ReturnGrid::new(-0.6, 1.0, 0.01)?;
    let iv = IvCurve::from_svi(&curve, &grid);
    println!("IV at r=-0.5, 0, 0.5: {:.3} {:.3} {:.3}", iv.vol_at(-0.5), iv.vol_at(0.0), iv.vol_at(0.5));
    println!("max variance error {max_err:.2e}");
    Ok(max_err)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
