//! Turn an implied-volatility curve into a risk-neutral return density and
//! its centered log-ratio transform. A flat smile must give back the
//! lognormal density.

use bitcoin_premia::bs::lognormal_return_pdf;
use bitcoin_premia::grid::ReturnGrid;
use bitcoin_premia::rnd::{clr_inverse, clr_transform, density_moments, extract_rnd};
use bitcoin_premia::vol_surface::IvCurve;
use bitcoin_premia::Result;

/// Sup-norm distance between the extracted and the lognormal density.
pub fn run() -> Result<f64> {
    let (vol, rf, tenor, spot) = (0.8, 0.02, 27.0, 40_000.0);
    let grid = ReturnGrid::new(-0.99, 4.0, 1e-3)?;
    let q = extract_rnd(&IvCurve::flat(vol, tenor, &grid), spot, rf, tenor)?;

    let tau = tenor / 365.0;
    let mu = rf - 0.5 * vol * vol;
    let sup = q
        .points()
        .iter()
        .zip(&q.values)
        .map(|(&r, &v)| (v - lognormal_return_pdf(r, mu, vol, tau)).abs())
        .fold(0.0, f64::max);

    let m = density_moments(&q, true);
    println!("mass {:.6}, clipped {:.2e}, truncated {:.2e}", q.mass(), q.clipped_mass, q.truncated_mass);
    println!("annualized mean {:.4} (rf {rf}), variance {:.4} (vol^2 {:.4})", m.mean, m.variance, vol * vol);
    println!("skewness {:.3}, excess kurtosis {:.3}", m.skewness, m.excess_kurtosis);

    let clr = clr_transform(&q);
    let back = clr_inverse(&clr, tenor)?;
    let round_trip = q.values.iter().zip(&back.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("CLR integrates to {:.2e}; inverse round trip error {:.2e}", clr.riemann_integral(), round_trip);
    println!("sup |q - lognormal| = {sup:.2e}");
    Ok(sup)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
