//! First-moment premium, its decomposition across return states, the
//! pricing kernel and the variance lower bounds for a pair of densities.

use bitcoin_premia::bs::lognormal_return_pdf;
use bitcoin_premia::grid::ReturnGrid;
use bitcoin_premia::premia::{bp_decomposition, lower_bounds, mean_p, pricing_kernel, segment_stats, PK_FLOOR};
use bitcoin_premia::rnd::{density_moments, DensityGrid};
use bitcoin_premia::Result;

fn lognormal(grid: &ReturnGrid, drift: f64, vol: f64, tenor: f64) -> Result<DensityGrid> {
    let tau = tenor / 365.0;
    let values = grid
        .points()
        .iter()
        .map(|&r| lognormal_return_pdf(r, drift - 0.5 * vol * vol, vol, tau))
        .collect();
    DensityGrid::from_values(*grid, values, tenor)
}

/// Per-period premium `∫x(p − q)`.
pub fn run() -> Result<f64> {
    let (rf, tenor) = (0.02, 27.0);
    let grid = ReturnGrid::new(-0.99, 4.0, 1e-3)?;
    let p = lognormal(&grid, 0.6, 0.8, tenor)?;
    let q = lognormal(&grid, rf, 0.9, tenor)?;

    let curve = bp_decomposition(&p, &q)?;
    let mu_q = density_moments(&q, false).mean;
    println!("E_P[r] {:.4}, E_Q[r] {:.4}, premium {:.4}", mean_p(&p), mu_q, curve.bp);
    for r in [-0.4, -0.2, 0.0, 0.2, 0.4] {
        println!("share of premium below {r:>5.2}: {:>7.3}", curve.value_at(r));
    }
    for (lo, hi) in [(-0.6, -0.2), (-0.2, 0.2), (0.2, 0.6)] {
        let s = segment_stats(&p, &q, &curve, lo, hi)?;
        let price = s.risk_price.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        println!("[{lo:>5.2}, {hi:>5.2}]  P {:.3}  Q {:.3}  risk price {price}  share {:.3}", s.p_probability, s.q_probability, s.bp_share);
    }

    let pk = pricing_kernel(&p, &q, PK_FLOOR)?;
    let masked = pk.mask().iter().filter(|m| !**m).count();
    println!("pricing kernel: E_P[M] = {:.4}, {masked} grid points masked", pk.change_of_measure(&p));

    let lb = lower_bounds(&q, rf)?;
    println!("annualized lower bounds: Martin {:.4}, CYL {:.4}", lb.martin, lb.cyl);
    Ok(curve.bp)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
