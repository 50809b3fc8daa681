//! Group dates into volatility regimes by the distance between their
//! multi-tenor CLR densities, then check the split with an embedding and a
//! logistic fit on density moments.

use bitcoin_premia::grid::ReturnGrid;
use bitcoin_premia::regimes::{
    logistic_diagnostics, multivariate_distance, pca_embedding, rand_index, ward_cluster, ClrPanel, TenorWeighting, DEFAULT_TENORS,
};
use bitcoin_premia::rnd::{clr_transform, density_moments, extract_rnd};
use bitcoin_premia::vol_surface::IvCurve;
use bitcoin_premia::Result;
use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Rand index between recovered and planted regimes.
pub fn run() -> Result<f64> {
    let grid = ReturnGrid::new(-0.99, 4.0, 2e-3)?;
    let start = NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date");
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // 20 turbulent days followed by 20 calm ones.
    let planted: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
    let mut panel = ClrPanel::new();
    let mut moments = Vec::new();
    for (i, &regime) in planted.iter().enumerate() {
        let date = start + Duration::days(i as i64);
        let base = if regime == 0 { 0.9 } else { 0.5 };
        for &t in &DEFAULT_TENORS {
            let z: f64 = StandardNormal.sample(&mut rng);
            let q = extract_rnd(&IvCurve::flat(base * (1.0 + 0.02 * z), t as f64, &grid), 100.0, 0.01, t as f64)?;
            if t == 27 {
                let m = density_moments(&q, false);
                moments.push([m.mean, m.variance, m.skewness, m.excess_kurtosis]);
            }
            panel.entry(date).or_default().insert(t, clr_transform(&q));
        }
    }

    let (d, excluded) = multivariate_distance(&panel, &DEFAULT_TENORS, TenorWeighting::Trapezoid)?;
    assert!(excluded.is_empty());
    let variance27: Vec<f64> = moments.iter().map(|m| m[1]).collect();
    let model = ward_cluster(&d, 2, &variance27)?;
    for c in 0..model.k {
        println!("{}: {} dates", model.names[c], model.members(c).len());
    }
    let last = model.merges.last().expect("n > 1");
    println!("final merge height {:.3}", last.cost);

    let ri = rand_index(&model.labels, &planted);
    let emb = pca_embedding(&d)?;
    println!("embedding explains {:.1}% + {:.1}%", 100.0 * emb.explained[0], 100.0 * emb.explained[1]);
    match logistic_diagnostics(&model, &moments) {
        Ok(fit) => println!(
            "logistic: pseudo R^2 {:.3}, {} iterations, separation {}",
            fit.pseudo_r2, fit.iterations, fit.separation
        ),
        Err(e) => println!("logistic fit unavailable: {e}"),
    }
    println!("Rand index vs planted regimes: {ri:.3}");
    Ok(ri)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
