//! Risk-neutral densities in return space.
//!
//! An IV curve is turned into call prices, differentiated twice in strike
//! and mapped to the simple-return variable `r = K/S − 1`:
//!
//! ```text
//! q(r) = e^{r_f τ} · S · ∂²C/∂K²
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::bs;
use crate::error::{Error, Result};
use crate::grid::ReturnGrid;
use crate::vol_surface::IvCurve;

/// Densities with more clipped negative mass than this carry a warning.
pub const CLIP_WARNING_FRACTION: f64 = 0.01;

/// Values below this are raised to it before taking logs.
pub const CLR_FLOOR: f64 = 1e-12;

/// A probability density sampled on a uniform return grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub grid: ReturnGrid,
    pub values: Vec<f64>,
    pub tenor_days: f64,
    pub date: Option<NaiveDate>,
    /// Share of absolute mass removed by clipping negative values.
    pub clipped_mass: f64,
    /// Mass outside the grid before renormalization (`1 − ∫q`).
    pub truncated_mass: f64,
    pub clip_warning: bool,
}

impl DensityGrid {
    /// Wrap nonnegative samples and renormalize them to unit mass.
    pub fn from_values(grid: ReturnGrid, values: Vec<f64>, tenor_days: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("density value {v} is not a finite nonnegative number")));
        }
        let mass = grid.integrate(&values);
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("density has zero mass".into()));
        }
        Ok(Self {
            grid,
            values: values.iter().map(|v| v / mass).collect(),
            tenor_days,
            date: None,
            clipped_mass: 0.0,
            truncated_mass: 1.0 - mass,
            clip_warning: false,
        })
    }

    pub fn with_date(mut self, date: NaiveDate) -> Self {
        self.date = Some(date);
        self
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn points(&self) -> Vec<f64> {
        self.grid.points()
    }

    /// Linear interpolation, zero off the grid.
    pub fn value_at(&self, r: f64) -> f64 {
        let g = &self.grid;
        if r < g.min() || r > g.max() {
            return 0.0;
        }
        let i = g.floor_index(r).min(g.len() - 2);
        let t = (r - g.at(i)) / g.step();
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }
}

/// Breeden–Litzenberger extraction from an IV curve on the density grid.
///
/// Strikes are `K = S(1 + r)` on the IV curve's grid; the second derivative
/// uses central differences with step `h·S`. Negative values are clipped and
/// the result renormalized.
pub fn extract_rnd(iv: &IvCurve, spot: f64, rf: f64, tenor_days: f64) -> Result<DensityGrid> {
    if !(spot > 0.0) || !spot.is_finite() {
        return Err(Error::InvalidInput(format!("spot {spot} must be positive")));
    }
    if !(tenor_days > 0.0) {
        return Err(Error::InvalidInput(format!("tenor {tenor_days} must be positive")));
    }
    if let Some(v) = iv.iv.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("iv {v} must be positive and finite")));
    }
    let grid = iv.grid;
    let n = grid.len();
    let h = grid.step();
    let tau = tenor_days / 365.0;

    // Prices at r_{-1} .. r_n; the two outer points use the flat-extended IV.
    let price_at = |r: f64, vol: f64| bs::call(spot, spot * (1.0 + r), rf, tau, vol);
    let mut calls = Vec::with_capacity(n + 2);
    calls.push(price_at(grid.min() - h, iv.iv[0]));
    for i in 0..n {
        calls.push(price_at(grid.at(i), iv.iv[i]));
    }
    calls.push(price_at(grid.max() + h, iv.iv[n - 1]));

    let growth = (rf * tau).exp();
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let d2 = (calls[i + 2] - 2.0 * calls[i + 1] + calls[i]) / (h * h * spot);
        let q = growth * d2;
        if !q.is_finite() {
            return Err(Error::NonFinite(format!("density at r = {}", grid.at(i))));
        }
        raw.push(q);
    }
    finish_density(grid, raw, tenor_days)
}

fn finish_density(grid: ReturnGrid, raw: Vec<f64>, tenor_days: f64) -> Result<DensityGrid> {
    let abs_mass = grid.integrate(&raw.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let negative: Vec<f64> = raw.iter().map(|v| (-v).max(0.0)).collect();
    let clipped = if abs_mass > 0.0 { grid.integrate(&negative) / abs_mass } else { 0.0 };
    let clipped_values: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let mut d = DensityGrid::from_values(grid, clipped_values, tenor_days)?;
    d.clipped_mass = clipped;
    d.clip_warning = clipped > CLIP_WARNING_FRACTION;
    if d.clip_warning {
        log::warn!("density clipped {:.3}% of its mass", 100.0 * clipped);
    }
    if d.truncated_mass.abs() > 1e-3 {
        log::debug!("density truncated mass {:.2e}", d.truncated_mass);
    }
    Ok(d)
}

/// Pointwise average of densities sharing a grid and maturity.
pub fn average_density(densities: &[DensityGrid]) -> Result<DensityGrid> {
    let first = densities
        .first()
        .ok_or_else(|| Error::InvalidInput("no densities to average".into()))?;
    for d in &densities[1..] {
        first.grid.ensure_matches(&d.grid)?;
        if (d.tenor_days - first.tenor_days).abs() > 1e-12 {
            return Err(Error::GridMismatch(format!(
                "tenor {} vs {}",
                d.tenor_days, first.tenor_days
            )));
        }
    }
    let k = densities.len() as f64;
    let mut acc = vec![0.0; first.grid.len()];
    for d in densities {
        for (a, v) in acc.iter_mut().zip(&d.values) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= k;
    }
    let mut out = DensityGrid::from_values(first.grid, acc, first.tenor_days)?;
    out.clipped_mass = densities.iter().map(|d| d.clipped_mass).sum::<f64>() / k;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Mean, variance, skewness and excess kurtosis by trapezoidal quadrature.
///
/// With `annualize`, mean and variance are scaled by `365/τ`; the shape
/// statistics are never scaled.
pub fn density_moments(q: &DensityGrid, annualize: bool) -> Moments {
    let r = q.grid.points();
    let mass = q.grid.integrate(&q.values);
    let weighted = |f: &dyn Fn(f64) -> f64| -> f64 {
        let v: Vec<f64> = r.iter().zip(&q.values).map(|(&x, &d)| f(x) * d).collect();
        q.grid.integrate(&v) / mass
    };
    let mean = weighted(&|x| x);
    let m2 = weighted(&|x| (x - mean).powi(2));
    let m3 = weighted(&|x| (x - mean).powi(3));
    let m4 = weighted(&|x| (x - mean).powi(4));
    let scale = if annualize { 365.0 / q.tenor_days } else { 1.0 };
    Moments {
        mean: mean * scale,
        variance: m2 * scale,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    }
}

/// Centered log-ratio transform of a density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClrFunction {
    pub grid: ReturnGrid,
    pub values: Vec<f64>,
}

impl ClrFunction {
    /// Riemann integral `h·Σ clr`, the measure the centering uses.
    pub fn riemann_integral(&self) -> f64 {
        self.grid.step() * self.values.iter().sum::<f64>()
    }
}

/// `log q − mean(log q)` with the mean taken under uniform grid weights;
/// values are floored at [`CLR_FLOOR`] first.
pub fn clr_transform(q: &DensityGrid) -> ClrFunction {
    let logs: Vec<f64> = q.values.iter().map(|v| v.max(CLR_FLOOR).ln()).collect();
    let log_geo_mean = logs.iter().sum::<f64>() / logs.len() as f64;
    ClrFunction {
        grid: q.grid,
        values: logs.iter().map(|l| l - log_geo_mean).collect(),
    }
}

fn fmt_date(d: Option<NaiveDate>) -> String {
    d.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default()
}

pub fn write_densities<W: Write>(densities: &[DensityGrid], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "tenor_days", "r", "q"])?;
    for d in densities {
        let date = fmt_date(d.date);
        for (i, v) in d.values.iter().enumerate() {
            wtr.write_record([date.clone(), format!("{}", d.tenor_days), format!("{}", d.grid.at(i)), format!("{v:e}")])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_clr<W: Write>(rows: &[(Option<NaiveDate>, f64, &ClrFunction)], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "tenor_days", "r", "clr"])?;
    for (date, tenor, c) in rows {
        let date = fmt_date(*date);
        for (i, v) in c.values.iter().enumerate() {
            wtr.write_record([date.clone(), format!("{tenor}"), format!("{}", c.grid.at(i)), format!("{v:e}")])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

type Block = (Option<NaiveDate>, f64, ReturnGrid, Vec<f64>);

/// Rows grouped by `(date, tenor)` in first-seen order, each on a uniform grid.
fn read_blocks<R: Read>(r: R, value_column: &str) -> Result<Vec<Block>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["date", "tenor_days", "r", value_column] {
        return Err(Error::MalformedHeader(header.join(",")));
    }
    let mut blocks: BTreeMap<(Option<NaiveDate>, u64), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Validation(format!("{value_column} row {i} unparseable"));
        let date = if rec[0].is_empty() {
            None
        } else {
            Some(crate::market_data::parse_date(&rec[0]).ok_or_else(bad)?)
        };
        let tenor: f64 = rec[1].parse().map_err(|_| bad())?;
        let r: f64 = rec[2].parse().map_err(|_| bad())?;
        let v: f64 = rec[3].parse().map_err(|_| bad())?;
        let key = (date, tenor.to_bits());
        let e = blocks.entry(key).or_insert_with(|| {
            order.push(key);
            (tenor, Vec::new(), Vec::new())
        });
        e.1.push(r);
        e.2.push(v);
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let (tenor, rs, vs) = blocks.remove(&key).expect("present");
        if rs.len() < 3 {
            return Err(Error::Validation(format!("{value_column} block shorter than three points")));
        }
        let step = (rs[rs.len() - 1] - rs[0]) / (rs.len() - 1) as f64;
        let grid = ReturnGrid::with_len(rs[0], step, rs.len())?;
        out.push((key.0, tenor, grid, vs));
    }
    Ok(out)
}

/// Read densities written by [`write_densities`]. Each `(date, tenor)` block
/// must sit on a uniform grid.
pub fn read_densities<R: Read>(r: R) -> Result<Vec<DensityGrid>> {
    read_blocks(r, "q")?
        .into_iter()
        .map(|(date, tenor, grid, vs)| {
            let mut d = DensityGrid::from_values(grid, vs, tenor)?;
            d.date = date;
            Ok(d)
        })
        .collect()
}

/// Read CLR functions written by [`write_clr`].
pub fn read_clr<R: Read>(r: R) -> Result<Vec<(Option<NaiveDate>, f64, ClrFunction)>> {
    Ok(read_blocks(r, "clr")?
        .into_iter()
        .map(|(date, tenor, grid, values)| (date, tenor, ClrFunction { grid, values }))
        .collect())
}

/// Density recovered from a CLR function: `exp(clr)` renormalized.
pub fn clr_inverse(c: &ClrFunction, tenor_days: f64) -> Result<DensityGrid> {
    DensityGrid::from_values(c.grid, c.values.iter().map(|v| v.exp()).collect(), tenor_days)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_density(grid: ReturnGrid, mu: f64, sd: f64) -> DensityGrid {
        let v = grid
            .points()
            .iter()
            .map(|r| bs::norm_pdf((r - mu) / sd) / sd)
            .collect();
        DensityGrid::from_values(grid, v, 27.0).unwrap()
    }

    #[test]
    fn flat_iv_matches_lognormal() {
        let grid = ReturnGrid::default();
        let iv = IvCurve::flat(0.8, 27.0, &grid);
        let q = extract_rnd(&iv, 100.0, 0.0, 27.0).unwrap();
        let tau = 27.0 / 365.0;
        let err = grid
            .points()
            .iter()
            .zip(&q.values)
            .map(|(&r, &v)| (v - bs::lognormal_return_pdf(r, -0.32, 0.8, tau)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "sup error {err}");
        assert!((q.mass() - 1.0).abs() < 1e-12);
        assert!(!q.clip_warning);
    }

    #[test]
    fn martingale_mean() {
        let grid = ReturnGrid::default();
        let tau_days = 27.0;
        let iv = IvCurve::flat(0.8, tau_days, &grid);
        let q = extract_rnd(&iv, 100.0, 0.01, tau_days).unwrap();
        let m = density_moments(&q, false);
        let expected = (0.01f64 * tau_days / 365.0).exp() - 1.0;
        assert!((m.mean - expected).abs() < 1e-3, "{} vs {expected}", m.mean);
    }

    #[test]
    fn doubling_spot_leaves_density_unchanged() {
        let grid = ReturnGrid::new(-0.9, 2.0, 1e-3).unwrap();
        let iv = IvCurve::flat(0.6, 9.0, &grid);
        let a = extract_rnd(&iv, 100.0, 0.02, 9.0).unwrap();
        let b = extract_rnd(&iv, 200.0, 0.02, 9.0).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_nonpositive_iv() {
        let grid = ReturnGrid::new(-0.5, 0.5, 0.01).unwrap();
        let mut iv = IvCurve::flat(0.6, 9.0, &grid);
        iv.iv[3] = 0.0;
        assert!(extract_rnd(&iv, 100.0, 0.0, 9.0).is_err());
    }

    #[test]
    fn average_identities() {
        let grid = ReturnGrid::new(-1.0, 1.0, 0.01).unwrap();
        let a = normal_density(grid, 0.0, 0.2);
        let b = normal_density(grid, 0.1, 0.3);
        let single = average_density(std::slice::from_ref(&a)).unwrap();
        for (x, y) in single.values.iter().zip(&a.values) {
            assert!((x - y).abs() < 1e-14);
        }
        let aa = average_density(&[a.clone(), a.clone()]).unwrap();
        for (x, y) in aa.values.iter().zip(&a.values) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!((average_density(&[a, b]).unwrap().mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_rejects_mismatched_grids() {
        let a = normal_density(ReturnGrid::new(-1.0, 1.0, 0.01).unwrap(), 0.0, 0.2);
        let b = normal_density(ReturnGrid::new(-1.0, 1.0, 0.02).unwrap(), 0.0, 0.2);
        assert_eq!(average_density(&[a, b]).unwrap_err().code(), "grid_mismatch");
    }

    #[test]
    fn standard_normal_moments() {
        let q = normal_density(ReturnGrid::new(-8.0, 8.0, 1e-3).unwrap(), 0.0, 1.0);
        let m = density_moments(&q, false);
        assert!(m.mean.abs() < 1e-3);
        assert!((m.variance - 1.0).abs() < 1e-3);
        assert!(m.skewness.abs() < 1e-3);
        assert!(m.excess_kurtosis.abs() < 1e-3);
    }

    #[test]
    fn symmetric_density_has_zero_skew() {
        let q = normal_density(ReturnGrid::new(-0.5, 0.5, 1e-3).unwrap(), 0.0, 0.1);
        assert!(density_moments(&q, false).skewness.abs() < 1e-10);
    }

    #[test]
    fn annualization_scales_mean_and_variance_only() {
        let q = normal_density(ReturnGrid::new(-1.0, 1.0, 1e-3).unwrap(), 0.02, 0.1);
        let raw = density_moments(&q, false);
        let ann = density_moments(&q, true);
        assert!((ann.mean - raw.mean * 365.0 / 27.0).abs() < 1e-12);
        assert!((ann.variance - raw.variance * 365.0 / 27.0).abs() < 1e-12);
        assert_eq!(ann.skewness, raw.skewness);
        assert_eq!(ann.excess_kurtosis, raw.excess_kurtosis);
    }

    #[test]
    fn clr_of_uniform_is_zero() {
        let grid = ReturnGrid::new(0.0, 1.0, 0.01).unwrap();
        let q = DensityGrid::from_values(grid, vec![1.0; grid.len()], 27.0).unwrap();
        assert!(clr_transform(&q).values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn clr_of_exponential_shape() {
        let grid = ReturnGrid::new(0.0, 1.0, 1e-3).unwrap();
        let v = grid.points().iter().map(|r| (-r).exp()).collect();
        let c = clr_transform(&DensityGrid::from_values(grid, v, 27.0).unwrap());
        for (r, v) in grid.points().iter().zip(&c.values) {
            assert!((v - (0.5 - r)).abs() < 1e-6);
        }
    }

    #[test]
    fn clr_centers_to_zero() {
        let q = normal_density(ReturnGrid::default(), 0.0, 0.2);
        let c = clr_transform(&q);
        assert!(c.riemann_integral().abs() < 1e-6 * q.grid.range());
    }

    #[test]
    fn density_csv_roundtrip() {
        let q = normal_density(ReturnGrid::new(-1.0, 1.0, 0.05).unwrap(), 0.0, 0.3)
            .with_date(NaiveDate::from_ymd_opt(2020, 5, 1).unwrap());
        let mut buf = Vec::new();
        write_densities(std::slice::from_ref(&q), &mut buf).unwrap();
        let back = read_densities(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back[0].grid.matches(&q.grid));
        for (x, y) in back[0].values.iter().zip(&q.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
