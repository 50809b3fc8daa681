//! Risk premia: first- and second-moment premia, the state decomposition of
//! the first-moment premium, pricing kernel, volatility index, lower bounds,
//! Sharpe ratios and one-way ANOVA.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::grid::ReturnGrid;
use crate::market_data::{OptionQuote, Side};
use crate::rnd::DensityGrid;

pub const PK_FLOOR: f64 = 1e-4;
pub const DEGENERATE_DENOMINATOR: f64 = 1e-6;
pub const MIN_SEGMENT_PROBABILITY: f64 = 1e-9;
pub const MIN_OTM_STRIKES: usize = 4;
pub const DEFAULT_INTERVALS: [(f64, f64); 2] = [(-0.6, -0.2), (0.2, 0.6)];

/// Annualized physical mean `(365/τ)·∫_{-1}^{1} x p(x) dx`.
pub fn mean_p(p: &DensityGrid) -> f64 {
    let xp: Vec<f64> = p.points().iter().zip(&p.values).map(|(x, v)| x * v).collect();
    365.0 / p.tenor_days * p.grid.integrate_between(&xp, -1.0, 1.0)
}

pub fn bitcoin_premium(mu_p: f64, mu_q: f64) -> f64 {
    mu_p - mu_q
}

pub fn variance_risk_premium(sigma2_q: f64, sigma2_p: f64) -> f64 {
    sigma2_q - sigma2_p
}

fn ensure_pair(p: &DensityGrid, q: &DensityGrid) -> Result<ReturnGrid> {
    p.grid.ensure_matches(&q.grid)?;
    Ok(p.grid)
}

/// Cumulative share of the first-moment premium below each return state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCurve {
    pub grid: ReturnGrid,
    pub values: Vec<f64>,
    /// Per-period `∫ x (p − q) dx` over the whole grid.
    pub bp: f64,
}

impl DecompositionCurve {
    pub fn value_at(&self, r: f64) -> f64 {
        let g = &self.grid;
        let r = r.clamp(g.min(), g.max());
        let i = g.floor_index(r).min(g.len() - 2);
        let t = (r - g.at(i)) / g.step();
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }
}

pub fn bp_decomposition(p: &DensityGrid, q: &DensityGrid) -> Result<DecompositionCurve> {
    let grid = ensure_pair(p, q)?;
    let integrand: Vec<f64> = grid
        .points()
        .iter()
        .zip(p.values.iter().zip(&q.values))
        .map(|(x, (pv, qv))| x * (pv - qv))
        .collect();
    let cum = grid.cumulative(&integrand);
    let bp = *cum.last().expect("grid has points");
    if !(bp.abs() >= DEGENERATE_DENOMINATOR) {
        return Err(Error::DegeneratePremium(bp.abs()));
    }
    Ok(DecompositionCurve {
        grid,
        values: cum.iter().map(|c| c / bp).collect(),
        bp,
    })
}

/// `q/p` where `p` clears the floor, `None` elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingKernelCurve {
    pub grid: ReturnGrid,
    pub values: Vec<Option<f64>>,
}

impl PricingKernelCurve {
    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_some).collect()
    }

    /// `∫ PK·p` over the valid region.
    pub fn change_of_measure(&self, p: &DensityGrid) -> f64 {
        let v: Vec<f64> = self
            .values
            .iter()
            .zip(&p.values)
            .map(|(k, pv)| k.map_or(0.0, |k| k * pv))
            .collect();
        self.grid.integrate(&v)
    }
}

pub fn pricing_kernel(p: &DensityGrid, q: &DensityGrid, floor: f64) -> Result<PricingKernelCurve> {
    let grid = ensure_pair(p, q)?;
    let values = p
        .values
        .iter()
        .zip(&q.values)
        .map(|(&pv, &qv)| (pv >= floor && pv > 0.0).then(|| qv / pv))
        .collect();
    Ok(PricingKernelCurve { grid, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub lo: f64,
    pub hi: f64,
    pub p_probability: f64,
    pub q_probability: f64,
    /// `∫q/∫p`, `None` when `∫p` is below [`MIN_SEGMENT_PROBABILITY`].
    pub risk_price: Option<f64>,
    pub bp_share: f64,
}

pub fn segment_stats(p: &DensityGrid, q: &DensityGrid, curve: &DecompositionCurve, lo: f64, hi: f64) -> Result<SegmentStats> {
    let grid = ensure_pair(p, q)?;
    if !(lo < hi) || lo < grid.min() || hi > grid.max() {
        return Err(Error::InvalidInput(format!(
            "interval [{lo}, {hi}] must be increasing and inside [{}, {}]",
            grid.min(),
            grid.max()
        )));
    }
    let p_probability = grid.integrate_between(&p.values, lo, hi);
    let q_probability = grid.integrate_between(&q.values, lo, hi);
    let risk_price = (p_probability >= MIN_SEGMENT_PROBABILITY).then(|| q_probability / p_probability);
    if risk_price.is_none() {
        log::warn!("segment [{lo}, {hi}]: physical probability {p_probability:e} too small for a risk price");
    }
    Ok(SegmentStats {
        lo,
        hi,
        p_probability,
        q_probability,
        risk_price,
        bp_share: curve.value_at(hi) - curve.value_at(lo),
    })
}

/// Parse `"-0.6:-0.2,0.2:0.6"`.
pub fn parse_intervals(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .filter(|part| !part.trim().is_empty())
        .map(|part| {
            let (a, b) = part
                .split_once(':')
                .ok_or_else(|| Error::Validation(format!("interval '{part}' is not lo:hi")))?;
            let lo: f64 = a.trim().parse().map_err(|_| Error::Validation(format!("bad bound '{a}'")))?;
            let hi: f64 = b.trim().parse().map_err(|_| Error::Validation(format!("bad bound '{b}'")))?;
            if !(lo < hi) {
                return Err(Error::Validation(format!("interval '{part}' is empty")));
            }
            Ok((lo, hi))
        })
        .collect()
}

pub fn interval_key(lo: f64, hi: f64) -> String {
    format!("[{lo}, {hi}]")
}

// ---------------------------------------------------------------------------
// Volatility index

/// Option prices at one strike of one expiry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrikeQuote {
    pub strike: f64,
    pub call: Option<f64>,
    pub put: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpiryChain {
    pub tenor_days: f64,
    pub spot: f64,
    pub strikes: Vec<StrikeQuote>,
}

impl ExpiryChain {
    /// Average traded price per strike and side.
    pub fn from_quotes(quotes: &[OptionQuote], tenor_days: f64, spot: f64) -> Self {
        let mut acc: BTreeMap<u64, (f64, [f64; 2], [usize; 2])> = BTreeMap::new();
        for q in quotes {
            let e = acc.entry(q.strike.to_bits()).or_insert((q.strike, [0.0; 2], [0; 2]));
            let k = match q.side {
                Side::Call => 0,
                Side::Put => 1,
            };
            e.1[k] += q.price;
            e.2[k] += 1;
        }
        let mut strikes: Vec<StrikeQuote> = acc
            .into_values()
            .map(|(strike, sum, n)| StrikeQuote {
                strike,
                call: (n[0] > 0).then(|| sum[0] / n[0] as f64),
                put: (n[1] > 0).then(|| sum[1] / n[1] as f64),
            })
            .collect();
        strikes.sort_by(|a, b| a.strike.total_cmp(&b.strike));
        Self {
            tenor_days,
            spot,
            strikes,
        }
    }
}

/// Annualized per-expiry variance from the discrete variance-swap formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpiryVariance {
    pub tenor_days: f64,
    pub sigma_sq: f64,
    pub forward: f64,
    pub k0: f64,
    pub strikes_used: usize,
}

/// `σ² = (2/T) Σ ΔK/K² e^{rT} Q(K) − (1/T)(F/K₀ − 1)²` with OTM quotes,
/// midpoint strike spacing and wing truncation after two zero prices.
pub fn expiry_variance(chain: &ExpiryChain, rf: f64) -> Result<ExpiryVariance> {
    if !(chain.tenor_days > 0.0) || !(chain.spot > 0.0) {
        return Err(Error::InvalidInput("chain needs positive tenor and spot".into()));
    }
    let t = chain.tenor_days / 365.0;
    let growth = (rf * t).exp();
    let forward = chain.spot * growth;
    let mut strikes = chain.strikes.clone();
    strikes.sort_by(|a, b| a.strike.total_cmp(&b.strike));
    let i0 = strikes
        .iter()
        .rposition(|s| s.strike <= forward)
        .ok_or(Error::TooFewStrikes {
            needed: MIN_OTM_STRIKES,
            got: 0,
        })?;
    let k0 = strikes[i0].strike;
    // Price at K0 averages call and put; a missing side comes from parity.
    let parity_call = |p: f64, k: f64| p + (forward - k) / growth;
    let parity_put = |c: f64, k: f64| c - (forward - k) / growth;
    let s0 = strikes[i0];
    let q0 = match (s0.call, s0.put) {
        (Some(c), Some(p)) => 0.5 * (c + p),
        (Some(c), None) => 0.5 * (c + parity_put(c, k0)),
        (None, Some(p)) => 0.5 * (p + parity_call(p, k0)),
        (None, None) => {
            return Err(Error::InvalidInput(format!("no price at K0 = {k0}")));
        }
    };

    let walk = |idx: &mut dyn Iterator<Item = usize>, pick: &dyn Fn(&StrikeQuote) -> Option<f64>| {
        let mut out = Vec::new();
        let mut zeros = 0;
        for i in idx {
            match pick(&strikes[i]) {
                Some(v) if v > 0.0 => {
                    zeros = 0;
                    out.push((strikes[i].strike, v));
                }
                Some(_) => {
                    zeros += 1;
                    if zeros == 2 {
                        break;
                    }
                }
                None => {}
            }
        }
        out
    };
    let mut puts = walk(&mut (0..i0).rev(), &|s| s.put);
    let calls = walk(&mut (i0 + 1..strikes.len()), &|s| s.call);
    puts.reverse();
    let mut used: Vec<(f64, f64)> = puts;
    used.push((k0, q0));
    used.extend(calls);
    if used.len() < MIN_OTM_STRIKES {
        return Err(Error::TooFewStrikes {
            needed: MIN_OTM_STRIKES,
            got: used.len(),
        });
    }
    let n = used.len();
    let mut sum = 0.0;
    for i in 0..n {
        let dk = if i == 0 {
            used[1].0 - used[0].0
        } else if i == n - 1 {
            used[n - 1].0 - used[n - 2].0
        } else {
            0.5 * (used[i + 1].0 - used[i - 1].0)
        };
        let (k, q) = used[i];
        sum += dk / (k * k) * growth * q;
    }
    let sigma_sq = 2.0 / t * sum - (forward / k0 - 1.0).powi(2) / t;
    Ok(ExpiryVariance {
        tenor_days: chain.tenor_days,
        sigma_sq,
        forward,
        k0,
        strikes_used: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvixQuote {
    pub date: Option<NaiveDate>,
    pub tenor_days: f64,
    pub near_tenor: f64,
    pub next_tenor: Option<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: Option<f64>,
    pub weight_near: f64,
    /// Percentage points.
    pub index: f64,
}

impl BvixQuote {
    /// Annualized variance, `(index/100)²`.
    pub fn variance(&self) -> f64 {
        (self.index / 100.0).powi(2)
    }
}

/// Blend the near and next expiry variances to a constant target tenor.
pub fn bvix(chains: &[ExpiryChain], target_days: f64, rf: f64) -> Result<BvixQuote> {
    let near = chains
        .iter()
        .filter(|c| c.tenor_days <= target_days)
        .max_by(|a, b| a.tenor_days.total_cmp(&b.tenor_days));
    let near = near.ok_or_else(|| Error::MissingBracket(format!("no expiry at or before {target_days} days")))?;
    let n_target = target_days / 365.0;
    let v1 = expiry_variance(near, rf)?;
    let n1 = near.tenor_days / 365.0;
    if near.tenor_days == target_days {
        let index = 100.0 * (n1 * v1.sigma_sq * 365.0 / target_days).max(0.0).sqrt();
        return Ok(BvixQuote {
            date: None,
            tenor_days: target_days,
            near_tenor: near.tenor_days,
            next_tenor: None,
            sigma1_sq: v1.sigma_sq,
            sigma2_sq: None,
            weight_near: 1.0,
            index,
        });
    }
    let next = chains
        .iter()
        .filter(|c| c.tenor_days > target_days)
        .min_by(|a, b| a.tenor_days.total_cmp(&b.tenor_days))
        .ok_or_else(|| Error::MissingBracket(format!("no expiry after {target_days} days")))?;
    let v2 = expiry_variance(next, rf)?;
    let n2 = next.tenor_days / 365.0;
    let w1 = (n2 - n_target) / (n2 - n1);
    let w2 = (n_target - n1) / (n2 - n1);
    let blended = n1 * v1.sigma_sq * w1 + n2 * v2.sigma_sq * w2;
    Ok(BvixQuote {
        date: None,
        tenor_days: target_days,
        near_tenor: near.tenor_days,
        next_tenor: Some(next.tenor_days),
        sigma1_sq: v1.sigma_sq,
        sigma2_sq: Some(v2.sigma_sq),
        weight_near: w1,
        index: 100.0 * (blended * 365.0 / target_days).max(0.0).sqrt(),
    })
}

pub fn write_bvix<W: Write>(quotes: &[BvixQuote], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "tenor_days", "near_tenor", "next_tenor", "sigma1_sq", "sigma2_sq", "weight_near", "index"])?;
    for q in quotes {
        wtr.write_record([
            q.date.map(|d| d.to_string()).unwrap_or_default(),
            q.tenor_days.to_string(),
            q.near_tenor.to_string(),
            q.next_tenor.map(|t| t.to_string()).unwrap_or_default(),
            format!("{:e}", q.sigma1_sq),
            q.sigma2_sq.map(|v| format!("{v:e}")).unwrap_or_default(),
            q.weight_near.to_string(),
            format!("{:e}", q.index),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_bvix<R: std::io::Read>(r: R) -> Result<Vec<BvixQuote>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Validation(format!("bad number '{s}'")))
        }
    };
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(Error::Validation(format!("bvix row has {} fields", rec.len())));
        }
        let num = |i: usize| -> Result<f64> { opt(&rec[i])?.ok_or_else(|| Error::Validation(format!("missing field {i}"))) };
        out.push(BvixQuote {
            date: if rec[0].is_empty() {
                None
            } else {
                Some(crate::market_data::parse_date(&rec[0]).ok_or_else(|| Error::Validation(format!("bad date '{}'", &rec[0])))?)
            },
            tenor_days: num(1)?,
            near_tenor: num(2)?,
            next_tenor: opt(&rec[3])?,
            sigma1_sq: num(4)?,
            sigma2_sq: opt(&rec[5])?,
            weight_near: num(6)?,
            index: num(7)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Lower bounds

/// `(365/τ)·σ²_Q/R_f` with per-period variance and gross per-period rate.
pub fn martin_lower_bound(sigma2_q: f64, rf_gross: f64, tenor_days: f64) -> f64 {
    365.0 / tenor_days * sigma2_q / rf_gross
}

fn check_finite(vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("lower-bound inputs {vals:?}")))
    }
}

/// Chabi-Yo–Loudis restricted bound from risk-neutral central moments of
/// the gross return (`M2`, `M3`, `M4`), annualized by `365/τ`.
pub fn cyl_lower_bound(m2: f64, m3: f64, m4: f64, rf_gross: f64, tenor_days: f64) -> Result<f64> {
    check_finite(&[m2, m3, m4, rf_gross, tenor_days])?;
    let r = rf_gross;
    let num = m2 / r - m3 / (r * r) + m4 / (r * r * r);
    let den = 1.0 - m2 / (r * r) + m3 / (r * r * r);
    if !(den > 0.0) {
        return Err(Error::NonFinite(format!("lower-bound denominator {den}")));
    }
    Ok(365.0 / tenor_days * num / den)
}

/// The bound above with `M3 = M4 = 0`.
pub fn cyl_second_moment_bound(m2: f64, rf_gross: f64, tenor_days: f64) -> Result<f64> {
    check_finite(&[m2, rf_gross, tenor_days])?;
    let r = rf_gross;
    let den = 1.0 - m2 / (r * r);
    if !(den > 0.0) {
        return Err(Error::NonFinite(format!("lower-bound denominator {den}")));
    }
    Ok(365.0 / tenor_days * (m2 / r) / den)
}

/// Central moments `E_Q[(R − R_f)^k]`, `k = 2, 3, 4`, with `R = 1 + r`.
pub fn excess_moments(q: &DensityGrid, rf_gross: f64) -> (f64, f64, f64) {
    let pts = q.points();
    let mass = q.mass();
    let m = |k: i32| -> f64 {
        let v: Vec<f64> = pts.iter().zip(&q.values).map(|(r, d)| (1.0 + r - rf_gross).powi(k) * d).collect();
        q.grid.integrate(&v) / mass
    };
    (m(2), m(3), m(4))
}

/// Per-day lower bounds for one risk-neutral density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBounds {
    pub martin: f64,
    pub cyl: f64,
}

/// `rf` is the annual rate; the gross per-period rate is `e^{rf·τ/365}`.
pub fn lower_bounds(q: &DensityGrid, rf: f64) -> Result<LowerBounds> {
    let rf_gross = (rf * q.tenor_days / 365.0).exp();
    let (m2, m3, m4) = excess_moments(q, rf_gross);
    Ok(LowerBounds {
        martin: martin_lower_bound(m2, rf_gross, q.tenor_days),
        cyl: cyl_lower_bound(m2, m3, m4, rf_gross, q.tenor_days)?,
    })
}

// ---------------------------------------------------------------------------
// Sharpe ratio and ANOVA

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeRatio {
    pub per_period: f64,
    pub annualized: f64,
}

/// `(mean − rf)/sd` with the sample standard deviation; `rf` per period.
pub fn sharpe_ratio(returns: &[f64], rf: f64, periods_per_year: f64) -> Result<SharpeRatio> {
    if returns.len() < 2 {
        return Err(Error::SeriesTooShort {
            needed: 2,
            got: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 1e-15 * mean.abs().max(1.0)) {
        return Err(Error::ZeroStd);
    }
    let per_period = (mean - rf) / sd;
    Ok(SharpeRatio {
        per_period,
        annualized: per_period * periods_per_year.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ss_between: f64,
    pub ss_within: f64,
    /// Within-group variance is zero while group means differ.
    pub zero_within_variance: bool,
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::DegenerateGroups(format!("need at least 2 groups, got {}", groups.len())));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::DegenerateGroups(format!("group with {} observations", g.len())));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = n - groups.len();
    let scale = groups.iter().flatten().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    let tiny = 1e-24 * scale;
    if ss_within <= tiny {
        if ss_between <= tiny {
            return Err(Error::DegenerateGroups("all observations are equal".into()));
        }
        return Ok(AnovaResult {
            f: f64::INFINITY,
            p_value: 0.0,
            df_between,
            df_within,
            ss_between,
            ss_within,
            zero_within_variance: true,
        });
    }
    let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
    let dist = FisherSnedecor::new(df_between as f64, df_within as f64)
        .map_err(|e| Error::DegenerateGroups(e.to_string()))?;
    Ok(AnovaResult {
        f,
        p_value: dist.sf(f),
        df_between,
        df_within,
        ss_between,
        ss_within,
        zero_within_variance: false,
    })
}

// ---------------------------------------------------------------------------
// Reports

/// Time-series inputs averaged into one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiaInputs {
    /// Annual decimal rates, one per day.
    pub rates: Vec<f64>,
    /// Volatility index values in percentage points, one per day.
    pub bvix: Vec<f64>,
    /// Annualized realized variances, one per day.
    pub realized_variance: Vec<f64>,
    /// Daily lower bounds.
    pub bounds: Vec<LowerBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiaReport {
    pub label: String,
    pub mu_p: f64,
    pub mu_q: f64,
    pub bp: f64,
    pub sigma2_q: f64,
    pub sigma2_p: f64,
    pub bvrp: f64,
    pub lb_martin: f64,
    pub lb_cyl: f64,
    pub shares: BTreeMap<String, f64>,
    pub risk_prices: BTreeMap<String, Option<f64>>,
    pub p_probabilities: BTreeMap<String, f64>,
    pub n_days: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Full premia suite for one conditioning set.
pub fn premia_report(
    label: &str,
    p: &DensityGrid,
    q: &DensityGrid,
    inputs: &PremiaInputs,
    intervals: &[(f64, f64)],
) -> Result<(PremiaReport, DecompositionCurve, PricingKernelCurve)> {
    let curve = bp_decomposition(p, q)?;
    let pk = pricing_kernel(p, q, PK_FLOOR)?;
    let mu_p = mean_p(p);
    let mu_q = mean(&inputs.rates);
    let sigma2_q = mean(&inputs.bvix.iter().map(|b| (b / 100.0).powi(2)).collect::<Vec<_>>());
    let sigma2_p = mean(&inputs.realized_variance);
    let mut shares = BTreeMap::new();
    let mut risk_prices = BTreeMap::new();
    let mut p_probabilities = BTreeMap::new();
    for &(lo, hi) in intervals {
        let s = segment_stats(p, q, &curve, lo, hi)?;
        let key = interval_key(lo, hi);
        shares.insert(key.clone(), s.bp_share);
        risk_prices.insert(key.clone(), s.risk_price);
        p_probabilities.insert(key, s.p_probability);
    }
    let report = PremiaReport {
        label: label.to_string(),
        mu_p,
        mu_q,
        bp: bitcoin_premium(mu_p, mu_q),
        sigma2_q,
        sigma2_p,
        bvrp: variance_risk_premium(sigma2_q, sigma2_p),
        lb_martin: mean(&inputs.bounds.iter().map(|b| b.martin).collect::<Vec<_>>()),
        lb_cyl: mean(&inputs.bounds.iter().map(|b| b.cyl).collect::<Vec<_>>()),
        shares,
        risk_prices,
        p_probabilities,
        n_days: inputs.rates.len(),
    };
    Ok((report, curve, pk))
}

/// Columns `r, bp_r, pk, p, q`; masked kernel values are left empty.
pub fn write_curves<W: Write>(curve: &DecompositionCurve, pk: &PricingKernelCurve, p: &DensityGrid, q: &DensityGrid, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["r", "bp_r", "pk", "p", "q"])?;
    for i in 0..curve.grid.len() {
        wtr.write_record([
            format!("{}", curve.grid.at(i)),
            format!("{:e}", curve.values[i]),
            pk.values[i].map(|v| format!("{v:e}")).unwrap_or_default(),
            format!("{:e}", p.values[i]),
            format!("{:e}", q.values[i]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bs::{lognormal_return_pdf, norm_cdf, norm_pdf};

    fn grid() -> ReturnGrid {
        ReturnGrid::default()
    }

    fn lognormal(mu: f64, vol: f64, tenor: f64) -> DensityGrid {
        let g = grid();
        let tau = tenor / 365.0;
        let v = g.points().iter().map(|&r| lognormal_return_pdf(r, mu, vol, tau)).collect();
        DensityGrid::from_values(g, v, tenor).unwrap()
    }

    fn normal(m: f64, s: f64, tenor: f64) -> DensityGrid {
        let g = grid();
        let v = g.points().iter().map(|&r| norm_pdf((r - m) / s) / s).collect();
        DensityGrid::from_values(g, v, tenor).unwrap()
    }

    #[test]
    fn mean_p_of_symmetric_density_is_zero() {
        let m = mean_p(&normal(0.0, 0.15, 27.0));
        assert!(m.abs() < 1e-9, "{m}");
    }

    #[test]
    fn mean_p_of_narrow_density() {
        let mu = mean_p(&normal(0.05, 0.002, 27.0));
        assert!((mu - 365.0 / 27.0 * 0.05).abs() < 1e-6);
        assert!((mu - 0.676).abs() < 1e-3);
    }

    #[test]
    fn mean_p_truncated_normal() {
        let (m, s) = (0.0496, 0.22);
        let d = normal(m, s, 27.0);
        // Renormalization over the grid approximates truncation at its ends.
        let (a, b) = ((d.grid.min() - m) / s, (1.0 - m) / s);
        let z = norm_cdf(b) - norm_cdf(a);
        let partial = (m * z + s * (norm_pdf(a) - norm_pdf(b))) / (norm_cdf((d.grid.max() - m) / s) - norm_cdf(a));
        let oracle = 365.0 / 27.0 * partial;
        assert!((mean_p(&d) - oracle).abs() < 1e-3, "{} vs {oracle}", mean_p(&d));
    }

    #[test]
    fn premium_arithmetic() {
        assert!((bitcoin_premium(0.67, 0.01) - 0.66).abs() < 1e-12);
        assert!((bitcoin_premium(0.70, 0.01) - 0.69).abs() < 1e-12);
        assert!((variance_risk_premium(0.72, 0.58) - 0.14).abs() < 1e-12);
        assert!((variance_risk_premium(0.46, 0.29) - 0.17).abs() < 1e-12);
        assert_eq!(variance_risk_premium(0.3, 0.3), 0.0);
    }

    #[test]
    fn decomposition_endpoints() {
        let c = bp_decomposition(&lognormal(0.6, 0.8, 27.0), &lognormal(0.0, 0.8, 27.0)).unwrap();
        assert_eq!(c.values[0], 0.0);
        assert!((c.values.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_densities_are_degenerate() {
        let q = lognormal(0.0, 0.8, 27.0);
        let err = bp_decomposition(&q, &q).unwrap_err();
        assert_eq!(err.code(), "degenerate_premium");
        let pk = pricing_kernel(&q, &q, PK_FLOOR).unwrap();
        assert!(pk.values.iter().flatten().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn lognormal_kernel_matches_closed_form() {
        let (p, q) = (lognormal(0.05 * 365.0 / 27.0, 0.2, 27.0), lognormal(0.0, 0.2, 27.0));
        let pk = pricing_kernel(&p, &q, PK_FLOOR).unwrap();
        let tau = 27.0 / 365.0;
        let mut prev = f64::INFINITY;
        for (i, v) in pk.values.iter().enumerate() {
            if let Some(v) = v {
                let r = pk.grid.at(i);
                let exact = lognormal_return_pdf(r, 0.0, 0.2, tau) / lognormal_return_pdf(r, 0.05 * 365.0 / 27.0, 0.2, tau);
                // Both densities are renormalized by nearly identical masses.
                assert!((v - exact).abs() < 1e-6 * exact.max(1.0), "{r}: {v} vs {exact}");
                assert!(*v < prev);
                prev = *v;
            }
        }
        assert!((pk.change_of_measure(&p) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn segment_with_equal_densities() {
        let p = lognormal(0.3, 0.8, 27.0);
        let q = lognormal(0.0, 0.8, 27.0);
        let c = bp_decomposition(&p, &q).unwrap();
        let s = segment_stats(&q, &q, &c, -0.6, -0.2).unwrap();
        assert!((s.risk_price.unwrap() - 1.0).abs() < 1e-12);
        let s = segment_stats(&p, &q, &c, 0.2, 0.6).unwrap();
        assert!((s.bp_share - (c.value_at(0.6) - c.value_at(0.2))).abs() < 1e-15);
        assert!(segment_stats(&p, &q, &c, 0.6, 0.2).is_err());
    }

    #[test]
    fn intervals_parse() {
        assert_eq!(parse_intervals("-0.6:-0.2,0.2:0.6").unwrap(), DEFAULT_INTERVALS.to_vec());
        assert!(parse_intervals("0.2-0.6").is_err());
    }

    #[test]
    fn martin_bound_cases() {
        assert_eq!(martin_lower_bound(0.0, 1.01, 27.0), 0.0);
        let v = 0.05;
        assert!((martin_lower_bound(v, 1.0, 27.0) - 365.0 / 27.0 * v).abs() < 1e-15);
        assert!((martin_lower_bound(2.0 * v, 1.0, 27.0) - 2.0 * martin_lower_bound(v, 1.0, 27.0)).abs() < 1e-15);
    }

    #[test]
    fn cyl_reduces_without_higher_moments() {
        let a = cyl_lower_bound(0.05, 0.0, 0.0, 1.002, 27.0).unwrap();
        let b = cyl_second_moment_bound(0.05, 1.002, 27.0).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(cyl_lower_bound(f64::NAN, 0.0, 0.0, 1.0, 27.0).is_err());
    }

    fn flat_chain(vol: f64, tenor: f64, spot: f64, rf: f64, spacing: f64) -> ExpiryChain {
        let tau = tenor / 365.0;
        let mut strikes = Vec::new();
        let mut k = spacing;
        while k <= 6.0 * spot {
            strikes.push(StrikeQuote {
                strike: k,
                call: Some(crate::bs::price(Side::Call, spot, k, rf, tau, vol)),
                put: Some(crate::bs::price(Side::Put, spot, k, rf, tau, vol)),
            });
            k += spacing;
        }
        ExpiryChain {
            tenor_days: tenor,
            spot,
            strikes,
        }
    }

    #[test]
    fn bvix_flat_vol() {
        let chains = [flat_chain(0.8, 21.0, 100.0, 0.02, 1.0), flat_chain(0.8, 35.0, 100.0, 0.02, 1.0)];
        let q = bvix(&chains, 27.0, 0.02).unwrap();
        assert!((q.index - 80.0).abs() < 1.0, "{}", q.index);
        assert!((q.weight_near - (35.0 - 27.0) / 14.0).abs() < 1e-12);
    }

    #[test]
    fn bvix_exact_near_tenor() {
        let chains = [flat_chain(0.8, 27.0, 100.0, 0.0, 1.0), flat_chain(0.5, 35.0, 100.0, 0.0, 1.0)];
        let q = bvix(&chains, 27.0, 0.0).unwrap();
        assert_eq!(q.weight_near, 1.0);
        assert!(q.next_tenor.is_none());
        assert!((q.index - 100.0 * q.sigma1_sq.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn bvix_errors() {
        let chains = [flat_chain(0.8, 30.0, 100.0, 0.0, 1.0)];
        assert!(matches!(bvix(&chains, 27.0, 0.0), Err(Error::MissingBracket(_))));
        let sparse = ExpiryChain {
            tenor_days: 27.0,
            spot: 100.0,
            strikes: vec![
                StrikeQuote { strike: 90.0, call: None, put: Some(3.0) },
                StrikeQuote { strike: 100.0, call: Some(5.0), put: Some(5.0) },
                StrikeQuote { strike: 110.0, call: Some(2.0), put: None },
            ],
        };
        assert!(matches!(bvix(&[sparse], 27.0, 0.0), Err(Error::TooFewStrikes { .. })));
    }

    #[test]
    fn wing_truncation_after_two_zeros() {
        let mut chain = flat_chain(0.8, 27.0, 100.0, 0.0, 5.0);
        let full = expiry_variance(&chain, 0.0).unwrap();
        for s in chain.strikes.iter_mut().filter(|s| s.strike >= 200.0 && s.strike <= 205.0) {
            s.call = Some(0.0);
        }
        let cut = expiry_variance(&chain, 0.0).unwrap();
        assert!(cut.strikes_used < full.strikes_used);
        assert!(cut.sigma_sq < full.sigma_sq);
    }

    #[test]
    fn sharpe_cases() {
        assert!(matches!(sharpe_ratio(&[0.01; 5], 0.0, 12.0), Err(Error::ZeroStd)));
        let s = sharpe_ratio(&[0.1, -0.1, 0.2, 0.0], 0.0, 12.0).unwrap();
        let sd = (0.05f64 / 3.0 * 1.0).sqrt();
        assert!((s.per_period - 0.05 / sd).abs() < 1e-12);
        assert!((s.annualized - s.per_period * 12f64.sqrt()).abs() < 1e-12);
        // Reported monthly moments 5.40% and 23.33%.
        assert!((0.0540f64 / 0.2333 - 0.23).abs() < 5e-3);
        assert!((0.0540f64 / 0.2333 * 12f64.sqrt() - 0.80).abs() < 5e-3);
    }

    #[test]
    fn anova_hand_example() {
        let r = anova_oneway(&[vec![0.0, 0.0, 6.0], vec![6.0, 6.0, 12.0]]).unwrap();
        assert_eq!(r.ss_between, 54.0);
        assert_eq!(r.ss_within, 48.0);
        assert_eq!(r.f, 4.5);
        assert_eq!((r.df_between, r.df_within), (1, 4));
    }

    #[test]
    fn anova_zero_within_variance() {
        let r = anova_oneway(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(r.zero_within_variance);
        assert_eq!(r.p_value, 0.0);
        assert!(anova_oneway(&[vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
        assert!(anova_oneway(&[vec![1.0, 2.0]]).is_err());
        assert!(anova_oneway(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
