//! Lognormal (Black–Scholes) prices with no dividend or convenience yield,
//! so the forward is `S·e^{rτ}`.

use libm::erfc;

use crate::market_data::Side;

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// European option price; `tau` in years, `vol` annualized.
pub fn price(side: Side, spot: f64, strike: f64, rf: f64, tau: f64, vol: f64) -> f64 {
    let df = (-rf * tau).exp();
    let sd = vol * tau.sqrt();
    if sd <= 0.0 {
        let fwd = spot / df;
        return match side {
            Side::Call => df * (fwd - strike).max(0.0),
            Side::Put => df * (strike - fwd).max(0.0),
        };
    }
    let d1 = ((spot / strike).ln() + (rf + 0.5 * vol * vol) * tau) / sd;
    let d2 = d1 - sd;
    match side {
        Side::Call => spot * norm_cdf(d1) - strike * df * norm_cdf(d2),
        Side::Put => strike * df * norm_cdf(-d2) - spot * norm_cdf(-d1),
    }
}

pub fn call(spot: f64, strike: f64, rf: f64, tau: f64, vol: f64) -> f64 {
    price(Side::Call, spot, strike, rf, tau, vol)
}

/// Density of the simple return `S_T/S − 1` when `ln S_T` is normal with
/// mean `ln S + mu·tau` and standard deviation `vol·√tau`.
pub fn lognormal_return_pdf(r: f64, mu: f64, vol: f64, tau: f64) -> f64 {
    let g = 1.0 + r;
    if g <= 0.0 {
        return 0.0;
    }
    let sd = vol * tau.sqrt();
    let z = (g.ln() - mu * tau) / sd;
    norm_pdf(z) / (g * sd)
}
