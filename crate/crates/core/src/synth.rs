//! Synthetic market fixtures priced under a lognormal model, so densities,
//! index values and regime labels have closed-form truths.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, TimeZone, Utc, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bs;
use crate::error::{Error, Result};
use crate::market_data::{write_transactions, OptionQuote, RatesSeries, Side, SpotSeries};

/// A block of consecutive quote dates sharing one volatility level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub days: usize,
    /// Annualized lognormal volatility.
    pub vol: f64,
    /// Annualized drift of the spot path.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub start: NaiveDate,
    pub spot0: f64,
    /// Annual decimal rate, quoted on weekdays only.
    pub rf: f64,
    pub seed: u64,
    pub regimes: Vec<RegimeSpec>,
    /// Expiries quoted each day, in days to expiry.
    pub expiries: Vec<u32>,
    /// Strikes as multiples of the day's spot.
    pub moneyness: Vec<f64>,
    /// Multiplicative noise on each (date, expiry) volatility.
    pub vol_noise: f64,
    /// Spot history before the first quote date.
    pub history_days: usize,
    /// Spot history after the last quote date.
    pub lookahead_days: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2021, 1, 4).expect("valid date"),
            spot0: 30_000.0,
            rf: 0.01,
            seed: 11,
            regimes: vec![RegimeSpec {
                days: 30,
                vol: 0.8,
                drift: 0.5,
            }],
            expiries: vec![7, 14, 21, 35, 49, 63],
            moneyness: (0..=54).map(|i| 0.3 + 0.05 * i as f64).collect(),
            vol_noise: 0.0,
            history_days: 400,
            lookahead_days: 30,
        }
    }
}

impl SynthConfig {
    /// Two alternating blocks with volatilities 0.9 and 0.5.
    pub fn two_regimes(days_each: usize, noise: f64) -> Self {
        Self {
            regimes: vec![
                RegimeSpec {
                    days: days_each,
                    vol: 0.9,
                    drift: 0.6,
                },
                RegimeSpec {
                    days: days_each,
                    vol: 0.5,
                    drift: 0.3,
                },
            ],
            vol_noise: noise,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::Validation("at least one regime is required".into()));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if !(r.vol > 0.0) || !r.vol.is_finite() {
                return Err(Error::Validation(format!("regime {i}: volatility must be positive")));
            }
            if r.days == 0 || !r.drift.is_finite() {
                return Err(Error::Validation(format!("regime {i}: needs days > 0 and a finite drift")));
            }
        }
        if self.expiries.is_empty() || self.expiries.contains(&0) {
            return Err(Error::Validation("expiries must be nonempty and positive".into()));
        }
        if self.moneyness.len() < 5 || self.moneyness.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Validation("need at least five positive moneyness levels".into()));
        }
        if !(self.spot0 > 0.0) || !self.rf.is_finite() || !(self.vol_noise >= 0.0) {
            return Err(Error::Validation("spot0 > 0, finite rf and nonnegative noise required".into()));
        }
        Ok(())
    }

    pub fn quote_days(&self) -> usize {
        self.regimes.iter().map(|r| r.days).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMarket {
    pub quotes: Vec<OptionQuote>,
    pub spots: SpotSeries,
    pub rates: RatesSeries,
    /// Quote dates and the regime index in force on each.
    pub regime_dates: Vec<(NaiveDate, usize)>,
}

impl SynthMarket {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_transactions(&self.quotes, std::fs::File::create(dir.join("quotes.csv"))?)?;
        self.spots.write_csv(std::fs::File::create(dir.join("spots.csv"))?)?;
        self.rates.write_csv(std::fs::File::create(dir.join("rates.csv"))?)?;
        let mut wtr = csv::Writer::from_path(dir.join("regimes.csv"))?;
        wtr.write_record(["date", "regime"])?;
        for (d, r) in &self.regime_dates {
            wtr.write_record([d.format("%Y-%m-%d").to_string(), r.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Generate spot path, quotes and rates for `cfg`.
pub fn synth_market(cfg: &SynthConfig) -> Result<SynthMarket> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_quote = cfg.quote_days();
    let first_quote = cfg.start + Duration::days(cfg.history_days as i64);
    let total = cfg.history_days + n_quote + cfg.lookahead_days;

    let mut regime_of_day = Vec::with_capacity(total);
    regime_of_day.extend(std::iter::repeat_n(0, cfg.history_days));
    for (i, r) in cfg.regimes.iter().enumerate() {
        regime_of_day.extend(std::iter::repeat_n(i, r.days));
    }
    regime_of_day.extend(std::iter::repeat_n(cfg.regimes.len() - 1, cfg.lookahead_days));

    let mut dates = Vec::with_capacity(total);
    let mut prices = Vec::with_capacity(total);
    let mut s = cfg.spot0;
    for (t, &reg) in regime_of_day.iter().enumerate() {
        dates.push(cfg.start + Duration::days(t as i64));
        prices.push(s);
        let RegimeSpec { vol, drift, .. } = cfg.regimes[reg];
        let z: f64 = StandardNormal.sample(&mut rng);
        let dt = 1.0 / 365.0;
        s *= ((drift - 0.5 * vol * vol) * dt + vol * dt.sqrt() * z).exp();
    }
    let spots = SpotSeries::new(dates.clone(), prices.clone())?;

    let mut quotes = Vec::new();
    let mut regime_dates = Vec::with_capacity(n_quote);
    for q in 0..n_quote {
        let t = cfg.history_days + q;
        let date = dates[t];
        let reg = regime_of_day[t];
        regime_dates.push((date, reg));
        let spot = prices[t];
        let ts = Utc.from_utc_datetime(&date.and_hms_opt(12, 0, 0).expect("valid time"));
        for &tenor in &cfg.expiries {
            let z: f64 = StandardNormal.sample(&mut rng);
            let vol = cfg.regimes[reg].vol * (1.0 + cfg.vol_noise * z);
            let tau = tenor as f64 / 365.0;
            for &m in &cfg.moneyness {
                let strike = (spot * m).round();
                for side in [Side::Call, Side::Put] {
                    let price = bs::price(side, spot, strike, cfg.rf, tau, vol);
                    quotes.push(OptionQuote {
                        timestamp: ts,
                        side,
                        strike,
                        spot,
                        price,
                        iv: vol,
                        quantity: 1.0,
                        expiry: date + Duration::days(tenor as i64),
                        tenor_days: tenor,
                    });
                }
            }
        }
    }
    debug_assert_eq!(regime_dates.first().map(|d| d.0), Some(first_quote));

    let weekdays = dates
        .iter()
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .map(|d| (*d, cfg.rf));
    let rates = RatesSeries::new(weekdays)?;
    Ok(SynthMarket {
        quotes,
        spots,
        rates,
        regime_dates,
    })
}
