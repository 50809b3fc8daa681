//! Model-free implied volatility index from two expiry chains bracketing
//! the target maturity.

use bitcoin_premia::bs;
use bitcoin_premia::market_data::Side;
use bitcoin_premia::premia::{bvix, expiry_variance, ExpiryChain, StrikeQuote};
use bitcoin_premia::Result;

fn chain(spot: f64, vol: f64, rf: f64, tenor_days: f64, spacing: f64) -> ExpiryChain {
    let tau = tenor_days / 365.0;
    let n = (8.0 * spot / spacing) as usize;
    let strikes = (1..=n)
        .map(|i| {
            let k = spacing * i as f64;
            StrikeQuote {
                strike: k,
                call: Some(bs::price(Side::Call, spot, k, rf, tau, vol)),
                put: Some(bs::price(Side::Put, spot, k, rf, tau, vol)),
            }
        })
        .collect();
    ExpiryChain {
        tenor_days,
        spot,
        strikes,
    }
}

/// Index value in percentage points for a flat 80% smile.
pub fn run() -> Result<f64> {
    let (spot, vol, rf) = (100.0, 0.8, 0.01);
    let chains = [chain(spot, vol, rf, 21.0, 2.5), chain(spot, vol, rf, 35.0, 2.5)];
    for c in &chains {
        let ev = expiry_variance(c, rf)?;
        println!(
            "{:>4} days: sigma^2 {:.5}, forward {:.4}, K0 {}, {} strikes",
            c.tenor_days, ev.sigma_sq, ev.forward, ev.k0, ev.strikes_used
        );
    }
    let idx = bvix(&chains, 27.0, rf)?;
    println!("27-day index {:.3} (flat vol {:.1}), near weight {:.3}", idx.index, vol * 100.0, idx.weight_near);
    Ok(idx.index)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
