//! Option-transaction ingestion, static no-arbitrage filtering, spot returns
//! and realized variance.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns the transaction CSV must carry, in this order.
pub const QUOTE_HEADER: [&str; 8] = [
    "timestamp", "side", "strike", "spot", "price", "iv", "quantity", "expiry",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Call,
    Put,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Call => "call",
            Side::Put => "put",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "call" | "c" => Ok(Side::Call),
            "put" | "p" => Ok(Side::Put),
            _ => Err(()),
        }
    }
}

/// One filtered option transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub timestamp: DateTime<Utc>,
    pub side: Side,
    pub strike: f64,
    pub spot: f64,
    pub price: f64,
    /// Annualized implied volatility as a fraction.
    pub iv: f64,
    pub quantity: f64,
    pub expiry: NaiveDate,
    pub tenor_days: u32,
}

impl OptionQuote {
    pub fn moneyness(&self) -> f64 {
        self.strike / self.spot
    }

    /// Simple return state `K/S − 1` the strike corresponds to.
    pub fn return_state(&self) -> f64 {
        self.strike / self.spot - 1.0
    }

    /// UTC calendar day of the trade.
    pub fn trade_date(&self) -> NaiveDate {
        self.timestamp.date_naive()
    }

    pub fn tau_years(&self) -> f64 {
        self.tenor_days as f64 / 365.0
    }
}

/// Why a raw row did not become an [`OptionQuote`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// IV missing, zero or negative.
    NonpositiveIv,
    NonpositiveQuantity,
    /// Wrong field count or an unparseable value.
    MalformedRow,
    NonpositiveStrike,
    NonpositiveSpot,
    NegativePrice,
    /// Expiry on or before the trade date.
    NonpositiveTenor,
    /// Price outside the static no-arbitrage bounds.
    ArbitrageBound,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::NonpositiveIv => "nonpositive_iv",
            RejectReason::NonpositiveQuantity => "nonpositive_quantity",
            RejectReason::MalformedRow => "malformed_row",
            RejectReason::NonpositiveStrike => "nonpositive_strike",
            RejectReason::NonpositiveSpot => "nonpositive_spot",
            RejectReason::NegativePrice => "negative_price",
            RejectReason::NonpositiveTenor => "nonpositive_tenor",
            RejectReason::ArbitrageBound => "arbitrage_bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Zero-based index of the data row (header excluded).
    pub row_index: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedQuotes {
    pub quotes: Vec<OptionQuote>,
    pub rejections: Vec<Rejection>,
    /// Data-row index of each accepted quote, parallel to `quotes`.
    pub accepted_rows: Vec<usize>,
}

impl ParsedQuotes {
    pub fn total_rows(&self) -> usize {
        self.quotes.len() + self.rejections.len()
    }

    /// Move quotes violating the price bounds into the rejection log, using
    /// the rate in force on each trade date.
    pub fn apply_no_arbitrage(&mut self, rate_on: impl Fn(NaiveDate) -> f64) {
        let mut quotes = Vec::with_capacity(self.quotes.len());
        let mut rows = Vec::with_capacity(self.quotes.len());
        for (q, row) in self.quotes.drain(..).zip(self.accepted_rows.drain(..)) {
            if satisfies_bounds(&q, rate_on(q.trade_date())) {
                quotes.push(q);
                rows.push(row);
            } else {
                self.rejections.push(Rejection {
                    row_index: row,
                    reason: RejectReason::ArbitrageBound,
                });
            }
        }
        self.quotes = quotes;
        self.accepted_rows = rows;
        self.rejections.sort_by_key(|r| r.row_index);
    }

    pub fn write_rejections<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["row_index", "reason"])?;
        for r in &self.rejections {
            wtr.write_record([r.row_index.to_string(), r.reason.as_str().to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
}

pub(crate) fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| parse_timestamp(s).map(|t| t.date_naive()))
}

fn parse_num(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| !v.is_nan())
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<String> = found.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    if got.len() != expected.len() || got.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::MalformedHeader(format!(
            "expected `{}`, found `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<OptionQuote, RejectReason> {
    use RejectReason::*;
    if rec.len() != QUOTE_HEADER.len() {
        return Err(MalformedRow);
    }
    let timestamp = parse_timestamp(&rec[0]).ok_or(MalformedRow)?;
    let side: Side = rec[1].parse().map_err(|_| MalformedRow)?;
    let strike = parse_num(&rec[2]).ok_or(MalformedRow)?;
    let spot = parse_num(&rec[3]).ok_or(MalformedRow)?;
    let price = parse_num(&rec[4]).ok_or(MalformedRow)?;
    // A missing IV is folded into the non-positive rule.
    let iv = match rec[5].trim() {
        "" => return Err(NonpositiveIv),
        s => s.parse::<f64>().map_err(|_| MalformedRow)?,
    };
    let quantity = parse_num(&rec[6]).ok_or(MalformedRow)?;
    let expiry = parse_date(&rec[7]).ok_or(MalformedRow)?;

    if !(iv > 0.0) || !iv.is_finite() {
        return Err(NonpositiveIv);
    }
    if !(quantity > 0.0) || !quantity.is_finite() {
        return Err(NonpositiveQuantity);
    }
    if !(strike > 0.0) || !strike.is_finite() {
        return Err(NonpositiveStrike);
    }
    if !(spot > 0.0) || !spot.is_finite() {
        return Err(NonpositiveSpot);
    }
    if price < 0.0 || !price.is_finite() {
        return Err(NegativePrice);
    }
    let days = (expiry - timestamp.date_naive()).num_days();
    if days < 1 {
        return Err(NonpositiveTenor);
    }
    Ok(OptionQuote {
        timestamp,
        side,
        strike,
        spot,
        price,
        iv,
        quantity,
        expiry,
        tenor_days: days as u32,
    })
}

/// Parse the transaction CSV.
///
/// A bad header is fatal; every bad data row lands in the rejection log and
/// parsing continues.
pub fn parse_transactions<R: Read>(reader: R) -> Result<ParsedQuotes> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    check_header(&header, &QUOTE_HEADER)?;

    let mut out = ParsedQuotes::default();
    for (row_index, rec) in rdr.records().enumerate() {
        let parsed = match rec {
            Ok(rec) => parse_row(&rec),
            Err(_) => Err(RejectReason::MalformedRow),
        };
        match parsed {
            Ok(q) => {
                out.quotes.push(q);
                out.accepted_rows.push(row_index);
            }
            Err(reason) => out.rejections.push(Rejection { row_index, reason }),
        }
    }
    log::debug!(
        "parsed {} quotes, rejected {} rows",
        out.quotes.len(),
        out.rejections.len()
    );
    Ok(out)
}

pub fn write_transactions<W: Write>(quotes: &[OptionQuote], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(QUOTE_HEADER)?;
    for q in quotes {
        wtr.write_record([
            q.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            q.side.as_str().to_string(),
            format!("{}", q.strike),
            format!("{}", q.spot),
            format!("{}", q.price),
            format!("{}", q.iv),
            format!("{}", q.quantity),
            q.expiry.format("%Y-%m-%d").to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Static price bounds `(lower, upper)` for a European option.
pub fn price_bounds(side: Side, spot: f64, strike: f64, rf: f64, tau_years: f64) -> (f64, f64) {
    let pv_strike = strike * (-rf * tau_years).exp();
    match side {
        Side::Call => ((spot - pv_strike).max(0.0), spot),
        Side::Put => ((pv_strike - spot).max(0.0), pv_strike),
    }
}

/// Bounds are checked with a slack of `1e-10·(S + K)` so prices sitting
/// exactly on a bound are not lost to rounding.
pub fn satisfies_bounds(q: &OptionQuote, rf: f64) -> bool {
    let (lo, hi) = price_bounds(q.side, q.spot, q.strike, rf, q.tau_years());
    let slack = 1e-10 * (q.spot + q.strike);
    q.price >= lo - slack && q.price <= hi + slack
}

/// Drop quotes whose price breaks the static no-arbitrage bounds.
pub fn filter_no_arbitrage(quotes: &[OptionQuote], rf: f64) -> Vec<OptionQuote> {
    quotes.iter().filter(|q| satisfies_bounds(q, rf)).cloned().collect()
}

/// Daily spot closes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotSeries {
    dates: Vec<NaiveDate>,
    prices: Vec<f64>,
}

impl SpotSeries {
    /// Dates must be consecutive calendar days and prices positive.
    pub fn new(dates: Vec<NaiveDate>, prices: Vec<f64>) -> Result<Self> {
        if dates.len() != prices.len() {
            return Err(Error::InvalidInput("dates and prices differ in length".into()));
        }
        for w in dates.windows(2) {
            let gap = (w[1] - w[0]).num_days();
            if gap <= 0 {
                return Err(Error::InvalidInput(format!("dates not increasing at {}", w[1])));
            }
            if gap > 1 {
                return Err(Error::InvalidInput(format!("missing spot price between {} and {}", w[0], w[1])));
            }
        }
        if let Some(p) = prices.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput(format!("non-positive spot price {p}")));
        }
        Ok(Self { dates, prices })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn price_on(&self, date: NaiveDate) -> Option<f64> {
        self.dates.binary_search(&date).ok().map(|i| self.prices[i])
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        check_header(rdr.headers()?, &["date", "price"])?;
        let mut dates = Vec::new();
        let mut prices = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let d = rec.get(0).and_then(parse_date);
            let p = rec.get(1).and_then(parse_num);
            match (d, p) {
                (Some(d), Some(p)) => {
                    dates.push(d);
                    prices.push(p);
                }
                _ => return Err(Error::InvalidInput(format!("spot row {i} unparseable"))),
            }
        }
        Self::new(dates, prices)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "price"])?;
        for (d, p) in self.dates.iter().zip(&self.prices) {
            wtr.write_record([d.format("%Y-%m-%d").to_string(), format!("{p}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Overlapping simple returns over a fixed horizon plus daily log returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub dates: Vec<NaiveDate>,
    pub horizon_days: usize,
    /// `simple_returns[t] = S[t+h]/S[t] − 1`, aligned with `dates[..len − h]`.
    pub simple_returns: Vec<f64>,
    /// `daily_log_returns[t−1] = ln(S[t]/S[t−1])`, aligned with `dates[1..]`.
    pub daily_log_returns: Vec<f64>,
}

impl ReturnSeries {
    pub fn simple_return_on(&self, date: NaiveDate) -> Option<f64> {
        let i = self.dates.binary_search(&date).ok()?;
        self.simple_returns.get(i).copied()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "simple_return", "daily_log_return"])?;
        for (i, d) in self.dates.iter().enumerate() {
            let sr = self.simple_returns.get(i).map(|v| format!("{v}")).unwrap_or_default();
            let lr = if i == 0 {
                String::new()
            } else {
                format!("{}", self.daily_log_returns[i - 1])
            };
            wtr.write_record([d.format("%Y-%m-%d").to_string(), sr, lr])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Inverse of [`ReturnSeries::write_csv`]; the horizon is the number of
    /// trailing rows without a simple return.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != ["date", "simple_return", "daily_log_return"] {
            return Err(Error::MalformedHeader(header.join(",")));
        }
        let mut out = ReturnSeries {
            dates: Vec::new(),
            horizon_days: 0,
            simple_returns: Vec::new(),
            daily_log_returns: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Validation(format!("returns row {i} unparseable"));
            out.dates.push(parse_date(&rec[0]).ok_or_else(bad)?);
            if rec[1].is_empty() {
                out.horizon_days += 1;
            } else if out.horizon_days == 0 {
                out.simple_returns.push(rec[1].parse().map_err(|_| bad())?);
            } else {
                return Err(bad());
            }
            if i > 0 {
                out.daily_log_returns.push(rec[2].parse().map_err(|_| bad())?);
            }
        }
        Ok(out)
    }
}

pub fn compute_returns(spots: &SpotSeries, horizon_days: usize) -> Result<ReturnSeries> {
    let n = spots.len();
    if horizon_days == 0 {
        return Err(Error::InvalidInput("horizon must be at least one day".into()));
    }
    if n < horizon_days + 1 {
        return Err(Error::SeriesTooShort {
            needed: horizon_days + 1,
            got: n,
        });
    }
    let p = spots.prices();
    let simple_returns = (0..n - horizon_days)
        .map(|t| p[t + horizon_days] / p[t] - 1.0)
        .collect();
    let daily_log_returns = p.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    Ok(ReturnSeries {
        dates: spots.dates().to_vec(),
        horizon_days,
        simple_returns,
        daily_log_returns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedVariance {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    /// Dates without a full trailing window.
    pub skipped: Vec<NaiveDate>,
}

impl RealizedVariance {
    pub fn value_on(&self, date: NaiveDate) -> Option<f64> {
        self.dates.binary_search(&date).ok().map(|i| self.values[i])
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "rv"])?;
        for (d, v) in self.dates.iter().zip(&self.values) {
            wtr.write_record([d.format("%Y-%m-%d").to_string(), format!("{v}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != ["date", "rv"] {
            return Err(Error::MalformedHeader(header.join(",")));
        }
        let mut out = RealizedVariance {
            dates: Vec::new(),
            values: Vec::new(),
            skipped: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Validation(format!("realized variance row {i} unparseable"));
            out.dates.push(parse_date(&rec[0]).ok_or_else(bad)?);
            out.values.push(rec[1].parse().map_err(|_| bad())?);
        }
        Ok(out)
    }
}

/// Annualized trailing realized variance
/// `RV_t = (365/window)·Σ_{l=1..window} r²_{t−l}` over daily log returns.
pub fn realized_variance(returns: &ReturnSeries, window_days: usize) -> Result<RealizedVariance> {
    if window_days == 0 {
        return Err(Error::InvalidInput("window must be at least one day".into()));
    }
    let lr = &returns.daily_log_returns;
    let scale = 365.0 / window_days as f64;
    let mut out = RealizedVariance {
        dates: Vec::new(),
        values: Vec::new(),
        skipped: Vec::new(),
    };
    // dates[t] has log returns r_{t-1}, ..., r_{t-window} available at
    // indices t-2 ..= t-1-window of `lr`.
    for (t, date) in returns.dates.iter().enumerate() {
        if t < window_days + 1 {
            out.skipped.push(*date);
            continue;
        }
        let sum: f64 = lr[t - 1 - window_days..t - 1].iter().map(|r| r * r).sum();
        out.dates.push(*date);
        out.values.push(scale * sum);
    }
    if !out.skipped.is_empty() {
        log::debug!("realized variance: {} dates lack a full window", out.skipped.len());
    }
    Ok(out)
}

/// Annualized risk-free rate, forward-filled to every calendar day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesSeries {
    observed: BTreeMap<NaiveDate, f64>,
}

impl RatesSeries {
    pub fn new(points: impl IntoIterator<Item = (NaiveDate, f64)>) -> Result<Self> {
        let mut observed = BTreeMap::new();
        for (d, r) in points {
            if !r.is_finite() {
                return Err(Error::NonFinite(format!("rate on {d}")));
            }
            observed.insert(d, r);
        }
        if observed.is_empty() {
            return Err(Error::InvalidInput("empty rates series".into()));
        }
        Ok(Self { observed })
    }

    pub fn constant(date: NaiveDate, rate: f64) -> Result<Self> {
        Self::new([(date, rate)])
    }

    /// Latest observed rate on or before `date`; before the first
    /// observation the first rate is used.
    pub fn rate_on(&self, date: NaiveDate) -> f64 {
        self.observed
            .range(..=date)
            .next_back()
            .or_else(|| self.observed.iter().next())
            .map(|(_, r)| *r)
            .expect("non-empty by construction")
    }

    /// Daily series from the first observation through `until`.
    pub fn forward_filled(&self, until: NaiveDate) -> Vec<(NaiveDate, f64)> {
        let first = *self.observed.keys().next().expect("non-empty");
        first
            .iter_days()
            .take_while(|d| *d <= until)
            .map(|d| (d, self.rate_on(d)))
            .collect()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        check_header(rdr.headers()?, &["date", "rate"])?;
        let mut pts = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            match (rec.get(0).and_then(parse_date), rec.get(1).and_then(parse_num)) {
                (Some(d), Some(r)) => pts.push((d, r)),
                _ => return Err(Error::InvalidInput(format!("rates row {i} unparseable"))),
            }
        }
        Self::new(pts)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "rate"])?;
        for (d, r) in &self.observed {
            wtr.write_record([d.format("%Y-%m-%d").to_string(), format!("{r}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "timestamp,side,strike,spot,price,iv,quantity,expiry\n";

    fn parse(body: &str) -> ParsedQuotes {
        parse_transactions(format!("{HEADER}{body}").as_bytes()).unwrap()
    }

    #[test]
    fn returns_and_rv_round_trip() {
        let d0 = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let dates: Vec<NaiveDate> = (0..40).map(|i| d0 + chrono::Duration::days(i)).collect();
        let prices: Vec<f64> = (0..40).map(|i| 100.0 * (1.0 + 0.01 * (i as f64).sin())).collect();
        let rs = compute_returns(&SpotSeries::new(dates, prices).unwrap(), 5).unwrap();
        let mut buf = Vec::new();
        rs.write_csv(&mut buf).unwrap();
        assert_eq!(ReturnSeries::read_csv(buf.as_slice()).unwrap(), rs);
        let rv = realized_variance(&rs, 7).unwrap();
        let mut buf = Vec::new();
        rv.write_csv(&mut buf).unwrap();
        let back = RealizedVariance::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.dates, rv.dates);
        assert_eq!(back.values, rv.values);
    }

    #[test]
    fn zero_iv_rejected() {
        let p = parse("2021-03-01T10:00:00Z,call,30000,28000,2500,0,1,2021-03-28\n");
        assert!(p.quotes.is_empty());
        assert_eq!(p.rejections[0].reason, RejectReason::NonpositiveIv);
        assert_eq!(p.rejections[0].reason.as_str(), "nonpositive_iv");
    }

    #[test]
    fn missing_iv_is_the_same_rule() {
        let p = parse("2021-03-01T10:00:00Z,call,30000,28000,2500,,1,2021-03-28\n");
        assert_eq!(p.rejections[0].reason, RejectReason::NonpositiveIv);
    }

    #[test]
    fn negative_quantity_rejected() {
        let p = parse("2021-03-01T10:00:00Z,put,30000,28000,2500,0.8,-1,2021-03-28\n");
        assert_eq!(p.rejections[0].reason.as_str(), "nonpositive_quantity");
    }

    #[test]
    fn valid_row_passes_through() {
        let p = parse("2021-03-01T10:00:00Z,call,30000,28000,2500,0.8,1,2021-03-28\n");
        assert_eq!(p.quotes.len(), 1);
        let q = &p.quotes[0];
        assert_eq!(q.side, Side::Call);
        assert_eq!(q.strike, 30000.0);
        assert_eq!(q.spot, 28000.0);
        assert_eq!(q.iv, 0.8);
        assert_eq!(q.quantity, 1.0);
        assert_eq!(q.tenor_days, 27);
        assert!((q.moneyness() - 30000.0 / 28000.0).abs() < 1e-15);
    }

    #[test]
    fn garbage_row_is_logged_not_fatal() {
        let p = parse("not a date,call,1,1,1,1,1,2021-01-01\n2021-03-01T10:00:00Z,call,30000,28000,2500,0.8,1,2021-03-28\nshort,row\n");
        assert_eq!(p.quotes.len(), 1);
        assert_eq!(p.rejections.len(), 2);
        assert!(p.rejections.iter().all(|r| r.reason == RejectReason::MalformedRow));
        assert_eq!(p.rejections[1].row_index, 2);
    }

    #[test]
    fn bad_header_is_fatal() {
        let err = parse_transactions("a,b,c\n1,2,3\n".as_bytes()).unwrap_err();
        assert_eq!(err.code(), "malformed_header");
    }

    #[test]
    fn duplicates_are_kept() {
        let row = "2021-03-01T10:00:00Z,call,30000,28000,2500,0.8,1,2021-03-28\n";
        let p = parse(&format!("{row}{row}"));
        assert_eq!(p.quotes.len(), 2);
    }

    #[test]
    fn rejection_log_csv() {
        let p = parse("2021-03-01T10:00:00Z,call,30000,28000,2500,0,1,2021-03-28\n");
        let mut buf = Vec::new();
        p.write_rejections(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "row_index,reason\n0,nonpositive_iv\n");
    }

    fn quote(side: Side, strike: f64, price: f64) -> OptionQuote {
        OptionQuote {
            timestamp: parse_timestamp("2021-03-01T10:00:00Z").unwrap(),
            side,
            strike,
            spot: 100.0,
            price,
            iv: 0.8,
            quantity: 1.0,
            expiry: NaiveDate::from_ymd_opt(2021, 3, 28).unwrap(),
            tenor_days: 27,
        }
    }

    #[test]
    fn call_above_spot_rejected() {
        let kept = filter_no_arbitrage(&[quote(Side::Call, 100.0, 110.0)], 0.01);
        assert!(kept.is_empty());
    }

    #[test]
    fn call_below_intrinsic_rejected() {
        let lower = 100.0 - 80.0 * (-0.01f64 * 27.0 / 365.0).exp();
        let kept = filter_no_arbitrage(&[quote(Side::Call, 80.0, lower - 0.01)], 0.01);
        assert!(kept.is_empty());
        let kept = filter_no_arbitrage(&[quote(Side::Call, 80.0, lower + 0.01)], 0.01);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn put_inside_bounds_kept() {
        let kept = filter_no_arbitrage(&[quote(Side::Put, 110.0, 12.0)], 0.01);
        assert_eq!(kept.len(), 1);
        let kept = filter_no_arbitrage(&[quote(Side::Put, 110.0, 111.0)], 0.01);
        assert!(kept.is_empty());
    }

    fn spots(prices: &[f64]) -> SpotSeries {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let dates = start.iter_days().take(prices.len()).collect();
        SpotSeries::new(dates, prices.to_vec()).unwrap()
    }

    #[test]
    fn constant_prices_give_zero_returns() {
        let r = compute_returns(&spots(&[50.0; 40]), 27).unwrap();
        assert_eq!(r.simple_returns.len(), 13);
        assert!(r.simple_returns.iter().all(|v| *v == 0.0));
        assert!(r.daily_log_returns.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn horizon_return_arithmetic() {
        let mut p = vec![100.0; 28];
        p[27] = 110.0;
        let r = compute_returns(&spots(&p), 27).unwrap();
        assert!((r.simple_returns[0] - 0.10).abs() < 1e-12);
    }

    #[test]
    fn too_short_series_errors() {
        let err = compute_returns(&spots(&[1.0; 27]), 27).unwrap_err();
        assert_eq!(err.code(), "series_too_short");
    }

    #[test]
    fn spot_series_rejects_gaps() {
        let d0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let d2 = NaiveDate::from_ymd_opt(2020, 1, 3).unwrap();
        assert!(SpotSeries::new(vec![d0, d2], vec![1.0, 1.0]).is_err());
        assert!(SpotSeries::new(vec![d2, d0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn realized_variance_constant_log_returns() {
        let p: Vec<f64> = (0..60).map(|i| (0.04 * i as f64).exp()).collect();
        let r = compute_returns(&spots(&p), 27).unwrap();
        let rv = realized_variance(&r, 27).unwrap();
        assert_eq!(rv.skipped.len(), 28);
        for v in &rv.values {
            assert!((v - 0.584).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn realized_variance_zero_returns() {
        let r = compute_returns(&spots(&[7.0; 60]), 27).unwrap();
        let rv = realized_variance(&r, 27).unwrap();
        assert!(rv.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rates_forward_fill() {
        let d = |m, day| NaiveDate::from_ymd_opt(2021, m, day).unwrap();
        let rs = RatesSeries::new([(d(1, 1), 0.01), (d(1, 4), 0.02)]).unwrap();
        assert_eq!(rs.rate_on(d(1, 2)), 0.01);
        assert_eq!(rs.rate_on(d(1, 3)), 0.01);
        assert_eq!(rs.rate_on(d(1, 9)), 0.02);
        assert_eq!(rs.forward_filled(d(1, 5)).len(), 5);
    }
}
