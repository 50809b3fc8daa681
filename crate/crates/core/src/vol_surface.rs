//! Daily SVI implied-variance curves per maturity and linear-in-total-variance
//! interpolation across maturities.
//!
//! A curve maps the simple return state `r = K/S − 1` to the annualized
//! implied variance
//!
//! ```text
//! ω(r) = a + b·[ρ(r − m) + √((r − m)² + σ²)]
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ReturnGrid;
use crate::market_data::OptionQuote;
use crate::optim::{levenberg_marquardt, nelder_mead, LevenbergMarquardtOptions, NelderMeadOptions};

/// Five SVI parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SviParams {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub m: f64,
    pub sigma: f64,
}

impl SviParams {
    /// Build parameters, rejecting any that break the no-arbitrage constraints.
    pub fn new(a: f64, b: f64, rho: f64, m: f64, sigma: f64) -> Result<Self> {
        let p = Self { a, b, rho, m, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.b, self.rho, self.m, self.sigma];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("svi parameters {self:?}")));
        }
        if !(self.b > 0.0) {
            return Err(Error::Validation(format!("svi b must be > 0, got {}", self.b)));
        }
        if !(1.0 - self.rho.abs() > 0.0) {
            return Err(Error::Validation(format!("svi |rho| must be < 1, got {}", self.rho)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Validation(format!("svi sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.min_variance() > 0.0) {
            return Err(Error::Validation(format!(
                "svi minimum variance a + b·σ·√(1−ρ²) = {} must be > 0",
                self.min_variance()
            )));
        }
        Ok(())
    }

    /// `a + b·σ·√(1 − ρ²)`, the smallest value the curve attains.
    pub fn min_variance(&self) -> f64 {
        self.a + self.b * self.sigma * (1.0 - self.rho * self.rho).max(0.0).sqrt()
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.a, self.b, self.rho, self.m, self.sigma]
    }

    pub fn total_variance(&self, r: f64) -> f64 {
        svi_total_variance(r, self)
    }
}

/// Implied variance of the SVI curve at return state `r`.
#[inline]
pub fn svi_total_variance(r: f64, p: &SviParams) -> f64 {
    let x = r - p.m;
    p.a + p.b * (p.rho * x + (x * x + p.sigma * p.sigma).sqrt())
}

/// A calibrated SVI curve for one maturity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SviCurve {
    pub params: SviParams,
    pub tenor_days: u32,
    /// Root mean squared error of the fit, in variance units.
    pub fit_rmse: f64,
    pub n_points: usize,
}

impl SviCurve {
    pub fn variance(&self, r: f64) -> f64 {
        svi_total_variance(r, &self.params)
    }

    pub fn vol(&self, r: f64) -> f64 {
        self.variance(r).sqrt()
    }

    /// Total variance `ω·τ/365`.
    pub fn total_variance(&self, r: f64) -> f64 {
        self.variance(r) * self.tenor_days as f64 / 365.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SviFitOptions {
    /// Number of deterministic multi-starts (at least 8 are always run).
    pub starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SviFitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 7,
            max_iter: 2000,
            tol: 1e-8,
        }
    }
}

/// Fit output plus the per-start objective values the search began from.
#[derive(Debug, Clone)]
pub struct SviFitReport {
    pub curve: SviCurve,
    pub start_objectives: Vec<f64>,
}

const MIN_POINTS: usize = 5;
const RHO_CAP: f64 = 1.0 - 1e-9;
const B_FLOOR: f64 = 1e-12;

fn rmse(points: &[(f64, f64)], p: &SviParams) -> f64 {
    let sse: f64 = points
        .iter()
        .map(|&(r, w)| {
            let e = svi_total_variance(r, p) - w;
            e * e
        })
        .sum();
    (sse / points.len() as f64).sqrt()
}

/// For fixed `(m, σ)` the curve is linear in `(a, bρ, b)`; solve that least
/// squares problem and push the result into the feasible set.
fn project_linear(points: &[(f64, f64)], m: f64, sigma: f64) -> Option<SviParams> {
    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for &(r, w) in points {
        let x = r - m;
        let row = Vector3::new(1.0, x, (x * x + sigma * sigma).sqrt());
        ata += row * row.transpose();
        aty += row * w;
    }
    let sol = ata.svd(true, true).solve(&aty, 1e-13).ok()?;
    let (a, c, d) = (sol[0], sol[1], sol[2]);
    if !(a.is_finite() && c.is_finite() && d.is_finite()) {
        return None;
    }
    Some(make_feasible(a, c, d, m, sigma))
}

fn make_feasible(a: f64, c: f64, d: f64, m: f64, sigma: f64) -> SviParams {
    let b = d.max(B_FLOOR);
    let rho = (c / b).clamp(-RHO_CAP, RHO_CAP);
    let floor = -b * sigma * (1.0 - rho * rho).sqrt();
    let a = if a - floor > 1e-12 { a } else { floor + 1e-12 };
    SviParams { a, b, rho, m, sigma }
}

fn projected_objective(points: &[(f64, f64)], m: f64, log_sigma: f64) -> f64 {
    let sigma = log_sigma.exp();
    if !sigma.is_finite() || sigma <= 0.0 {
        return f64::INFINITY;
    }
    match project_linear(points, m, sigma) {
        Some(p) => rmse(points, &p),
        None => f64::INFINITY,
    }
}

fn to_unconstrained(p: &SviParams) -> [f64; 5] {
    [p.a, p.b.ln(), p.rho.atanh(), p.m, p.sigma.ln()]
}

fn from_unconstrained(x: &[f64]) -> SviParams {
    SviParams {
        a: x[0],
        b: x[1].exp(),
        rho: x[2].tanh(),
        m: x[3],
        sigma: x[4].exp(),
    }
}

/// Quasi-explicit starting values read off the data shape.
fn heuristic_start(points: &[(f64, f64)]) -> (f64, f64) {
    let (i_min, _) = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .expect("non-empty");
    let m0 = points[i_min].0;
    let a0 = points[i_min].1;
    let n = points.len();
    let k = (n / 4).max(2).min(n - 1);
    let slope = |lo: usize, hi: usize| {
        let (r0, w0) = points[lo];
        let (r1, w1) = points[hi];
        if (r1 - r0).abs() > 1e-12 {
            (w1 - w0) / (r1 - r0)
        } else {
            0.0
        }
    };
    let left = slope(0, k);
    let right = slope(n - 1 - k, n - 1);
    let b0 = ((right - left) / 2.0).abs().max(1e-4);
    let rho0 = ((right + left) / (right - left + 1e-12)).clamp(-0.9, 0.9);
    // Near the vertex ω − a ≈ b·σ·√(1−ρ²); read σ off the neighbours' lift.
    let lift = points
        .iter()
        .map(|&(_, w)| w - a0)
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let span = points[n - 1].0 - points[0].0;
    let sigma0 = if lift.is_finite() {
        (lift / (b0 * (1.0 - rho0 * rho0).sqrt())).clamp(1e-3 * span.max(1e-3), span.max(1e-3))
    } else {
        0.1 * span.max(1e-3)
    };
    (m0, sigma0)
}

/// Calibrate one SVI curve to `(return state, squared IV)` points by
/// minimizing RMSE subject to the parameter constraints.
pub fn fit_svi(points: &[(f64, f64)], tenor_days: u32) -> Result<SviCurve> {
    fit_svi_with(points, tenor_days, &SviFitOptions::default()).map(|r| r.curve)
}

pub fn fit_svi_with(points: &[(f64, f64)], tenor_days: u32, opts: &SviFitOptions) -> Result<SviFitReport> {
    if points.iter().any(|(r, w)| !r.is_finite() || !w.is_finite()) {
        return Err(Error::NonFinite("svi input points".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut distinct = 1;
    for w in pts.windows(2) {
        if w[1].0 != w[0].0 {
            distinct += 1;
        }
    }
    if pts.is_empty() || distinct < MIN_POINTS {
        return Err(Error::InsufficientPoints {
            needed: MIN_POINTS,
            got: if pts.is_empty() { 0 } else { distinct },
        });
    }

    let (m0, sigma0) = heuristic_start(&pts);
    let r_lo = pts[0].0;
    let r_hi = pts[pts.len() - 1].0;
    let span = (r_hi - r_lo).max(1e-3);
    let mut starts = vec![(m0, sigma0)];
    for &(dm, fs) in &[(0.0, 0.25), (0.0, 4.0), (-0.25, 1.0), (0.25, 1.0), (0.0, 0.05), (0.0, 1.0 / span)] {
        starts.push((m0 + dm * span, (sigma0 * fs).clamp(1e-4, 10.0 * span)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    while starts.len() < opts.starts.max(8) {
        let m = r_lo + rng.random::<f64>() * span;
        let s = span * 10f64.powf(-2.5 + 2.5 * rng.random::<f64>());
        starts.push((m, s));
    }

    let nm_opts = NelderMeadOptions {
        f_tol: opts.tol,
        x_tol: 1e-10,
        max_iter: opts.max_iter,
        initial_step: 0.1,
    };
    let lm_opts = LevenbergMarquardtOptions {
        max_iter: 200,
        tol: 1e-16,
    };

    let mut start_objectives = Vec::with_capacity(starts.len());
    let mut best: Option<(f64, SviParams)> = None;
    for &(m_start, s_start) in &starts {
        let x0 = [m_start, s_start.ln()];
        let f0 = projected_objective(&pts, x0[0], x0[1]);
        start_objectives.push(f0);
        let found = nelder_mead(|x| projected_objective(&pts, x[0], x[1]), &x0, &nm_opts);
        let Some(mut params) = project_linear(&pts, found.x[0], found.x[1].exp()) else {
            continue;
        };
        let mut err = rmse(&pts, &params);

        // Full five-parameter polish in the interior parameterization.
        let polish = levenberg_marquardt(
            |x| {
                let p = from_unconstrained(x);
                let mut res: Vec<f64> = pts.iter().map(|&(r, w)| svi_total_variance(r, &p) - w).collect();
                let mv = p.min_variance();
                res.push(if mv > 0.0 { 0.0 } else { 1e3 * (1e-12 - mv) });
                res
            },
            &to_unconstrained(&params),
            &lm_opts,
        );
        let polished = from_unconstrained(&polish.x);
        if polished.validate().is_ok() {
            let e = rmse(&pts, &polished);
            if e < err {
                params = polished;
                err = e;
            }
        }
        if params.validate().is_err() || !err.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((be, bp)) => {
                err < *be
                    || (err == *be
                        && params
                            .as_array()
                            .iter()
                            .zip(bp.as_array().iter())
                            .find(|(x, y)| x != y)
                            .is_some_and(|(x, y)| x < y))
            }
        };
        if better {
            best = Some((err, params));
        }
    }

    match best {
        Some((fit_rmse, params)) => Ok(SviFitReport {
            curve: SviCurve {
                params,
                tenor_days,
                fit_rmse,
                n_points: pts.len(),
            },
            start_objectives,
        }),
        None => Err(Error::NoConvergence {
            best_objective: start_objectives.iter().copied().fold(f64::INFINITY, f64::min),
            restarts: starts.len(),
            best_params: Vec::new(),
        }),
    }
}

/// All calibrated maturities of one trading day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySurface {
    pub date: NaiveDate,
    pub curves: BTreeMap<u32, SviCurve>,
}

impl DailySurface {
    pub fn new(date: NaiveDate) -> Self {
        Self {
            date,
            curves: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, curve: SviCurve) -> Result<()> {
        if curve.tenor_days == 0 {
            return Err(Error::Validation("tenor must be positive".into()));
        }
        curve.params.validate()?;
        self.curves.insert(curve.tenor_days, curve);
        Ok(())
    }

    pub fn tenors(&self) -> Vec<u32> {
        self.curves.keys().copied().collect()
    }
}

/// Pool calls and puts of one day by maturity and fit a curve per maturity.
///
/// Maturities with fewer than five distinct strikes are skipped; failed fits
/// are logged and skipped.
pub fn fit_daily_surface(date: NaiveDate, quotes: &[OptionQuote], opts: &SviFitOptions) -> DailySurface {
    let mut by_tenor: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for q in quotes.iter().filter(|q| q.trade_date() == date) {
        by_tenor.entry(q.tenor_days).or_default().push((q.return_state(), q.iv * q.iv));
    }
    let mut surface = DailySurface::new(date);
    for (tenor, pts) in by_tenor {
        match fit_svi_with(&pts, tenor, opts) {
            Ok(rep) => {
                let _ = surface.insert(rep.curve);
            }
            Err(e) => log::debug!("{date} tenor {tenor}: {e}"),
        }
    }
    surface
}

/// An implied-volatility curve sampled on a return grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvCurve {
    pub grid: ReturnGrid,
    pub tenor_days: f64,
    pub iv: Vec<f64>,
}

impl IvCurve {
    pub fn from_svi(curve: &SviCurve, grid: &ReturnGrid) -> Self {
        Self {
            grid: *grid,
            tenor_days: curve.tenor_days as f64,
            iv: grid.points().iter().map(|&r| curve.vol(r)).collect(),
        }
    }

    pub fn flat(vol: f64, tenor_days: f64, grid: &ReturnGrid) -> Self {
        Self {
            grid: *grid,
            tenor_days,
            iv: vec![vol; grid.len()],
        }
    }

    /// Linear interpolation of IV between grid points, flat beyond the ends.
    pub fn vol_at(&self, r: f64) -> f64 {
        let g = &self.grid;
        if r <= g.min() {
            return self.iv[0];
        }
        if r >= g.max() {
            return self.iv[g.len() - 1];
        }
        let i = g.floor_index(r).min(g.len() - 2);
        let t = (r - g.at(i)) / g.step();
        self.iv[i] * (1.0 - t) + self.iv[i + 1] * t
    }
}

/// IV curve at `target_tenor_days`, linear in total variance `ω·τ/365`
/// between the nearest observed maturities below and above.
///
/// With `carry_nearest`, targets outside the observed range reuse the IV of
/// the closest maturity instead of failing.
pub fn interpolate_tenor(
    surface: &DailySurface,
    target_tenor_days: f64,
    grid: &ReturnGrid,
    carry_nearest: bool,
) -> Result<IvCurve> {
    let tenors = surface.tenors();
    let (Some(&lo), Some(&hi)) = (tenors.first(), tenors.last()) else {
        return Err(Error::MissingBracket(format!("no curves on {}", surface.date)));
    };
    let target = target_tenor_days;
    if let Some(c) = surface.curves.get(&(target.round() as u32)).filter(|_| target.fract() == 0.0) {
        let mut out = IvCurve::from_svi(c, grid);
        out.tenor_days = target;
        return Ok(out);
    }
    if target < lo as f64 || target > hi as f64 {
        if !carry_nearest {
            return Err(Error::ExtrapolationRefused {
                target,
                min: lo as f64,
                max: hi as f64,
            });
        }
        let nearest = if target < lo as f64 { lo } else { hi };
        let mut out = IvCurve::from_svi(&surface.curves[&nearest], grid);
        out.tenor_days = target;
        return Ok(out);
    }
    let below = *tenors.iter().rev().find(|&&t| (t as f64) < target).expect("bracketed");
    let above = *tenors.iter().find(|&&t| (t as f64) > target).expect("bracketed");
    let (c1, c2) = (&surface.curves[&below], &surface.curves[&above]);
    let iv = grid
        .points()
        .iter()
        .map(|&r| interpolate_total_variance(c1.total_variance(r), below as f64, c2.total_variance(r), above as f64, target))
        .map(|w| (w * 365.0 / target).sqrt())
        .collect();
    Ok(IvCurve {
        grid: *grid,
        tenor_days: target,
        iv,
    })
}

/// Linear map of total variance in maturity.
#[inline]
pub fn interpolate_total_variance(w1: f64, tau1: f64, w2: f64, tau2: f64, target: f64) -> f64 {
    let t = (target - tau1) / (tau2 - tau1);
    w1 + t * (w2 - w1)
}

pub const SURFACE_HEADER: [&str; 9] = ["date", "tenor_days", "a", "b", "rho", "m", "sigma", "rmse", "n_points"];

pub fn write_surfaces<W: Write>(surfaces: &[DailySurface], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SURFACE_HEADER)?;
    for s in surfaces {
        for c in s.curves.values() {
            let p = &c.params;
            wtr.write_record([
                s.date.format("%Y-%m-%d").to_string(),
                c.tenor_days.to_string(),
                format!("{:e}", p.a),
                format!("{:e}", p.b),
                format!("{:e}", p.rho),
                format!("{:e}", p.m),
                format!("{:e}", p.sigma),
                format!("{:e}", c.fit_rmse),
                c.n_points.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_surfaces<R: Read>(r: R) -> Result<Vec<DailySurface>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != SURFACE_HEADER {
        return Err(Error::MalformedHeader(header.join(",")));
    }
    let mut by_date: BTreeMap<NaiveDate, DailySurface> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::InvalidInput(format!("surface row {i} unparseable"));
        let date = crate::market_data::parse_date(&rec[0]).ok_or_else(bad)?;
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad());
        let params = SviParams::new(num(2)?, num(3)?, num(4)?, num(5)?, num(6)?)?;
        let curve = SviCurve {
            params,
            tenor_days: rec[1].parse().map_err(|_| bad())?,
            fit_rmse: num(7)?,
            n_points: rec[8].parse().map_err(|_| bad())?,
        };
        by_date.entry(date).or_insert_with(|| DailySurface::new(date)).insert(curve)?;
    }
    Ok(by_date.into_values().collect())
}
