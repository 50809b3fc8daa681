//! Physical return density: a histogram smoothed by a degree-10 polynomial
//! between the 10th and 90th percentiles, with GEV tails outside.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ReturnGrid;
use crate::optim::{levenberg_marquardt, nelder_mead, LevenbergMarquardtOptions, NelderMeadOptions};
use crate::rnd::DensityGrid;

pub const DEFAULT_BINS: usize = 12;
pub const BODY_DEGREE: usize = 10;
pub const MIN_OBSERVATIONS: usize = 100;
/// Quantile levels of the left-tail anchors (outer, knot).
pub const LEFT_ANCHORS: (f64, f64) = (0.05, 0.10);
/// Quantile levels of the right-tail anchors (knot, outer).
pub const RIGHT_ANCHORS: (f64, f64) = (0.90, 0.95);
const RIDGE_LAMBDA: f64 = 1e-8;

/// Equal-width histogram normalized to unit area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub heights: Vec<f64>,
}

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.heights.len()
    }

    pub fn support(&self) -> (f64, f64) {
        (self.edges[0], self.edges[self.edges.len() - 1])
    }

    pub fn width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return 0.0;
        }
        let k = (((x - lo) / self.width()) as usize).min(self.n_bins() - 1);
        self.heights[k]
    }

    pub fn area(&self) -> f64 {
        self.heights.iter().sum::<f64>() * self.width()
    }
}

pub fn histogram_density(returns: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    if returns.len() < MIN_OBSERVATIONS {
        return Err(Error::SeriesTooShort {
            needed: MIN_OBSERVATIONS,
            got: returns.len(),
        });
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("return sample".into()));
    }
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateSample("all observations are equal".into()));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &r in returns {
        let k = (((r - lo) / width) as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    let n = returns.len() as f64;
    let edges = (0..=n_bins)
        .map(|k| if k == n_bins { hi } else { lo + width * k as f64 })
        .collect();
    let heights = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    Ok(Histogram { edges, heights })
}

/// Polynomial in the Legendre basis over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyPolynomial {
    /// Legendre coefficients, degree 0 first.
    pub coeffs: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    /// Set when the least-squares system was rank deficient.
    pub ill_conditioned: bool,
}

impl BodyPolynomial {
    fn to_unit(&self, x: f64) -> f64 {
        (2.0 * x - self.lo - self.hi) / (self.hi - self.lo)
    }

    /// Raw polynomial value (may be negative).
    pub fn eval(&self, x: f64) -> f64 {
        legendre_series(&self.coeffs, self.to_unit(x))
    }

    /// Polynomial value clipped at zero.
    pub fn pdf(&self, x: f64) -> f64 {
        self.eval(x).max(0.0)
    }
}

fn legendre_values(t: f64, degree: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(degree + 2);
    p.push(1.0);
    if degree >= 1 {
        p.push(t);
    }
    for k in 1..degree {
        let k_f = k as f64;
        let next = ((2.0 * k_f + 1.0) * t * p[k] - k_f * p[k - 1]) / (k_f + 1.0);
        p.push(next);
    }
    p
}

fn legendre_series(coeffs: &[f64], t: f64) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    legendre_values(t, coeffs.len() - 1)
        .iter()
        .zip(coeffs)
        .map(|(p, c)| p * c)
        .sum()
}

/// Antiderivative of `P_k` on `[-1, 1]`, zero at `t = -1`.
fn legendre_integral(t: f64, k: usize) -> f64 {
    if k == 0 {
        return t + 1.0;
    }
    let p = legendre_values(t, k + 1);
    (p[k + 1] - p[k - 1]) / (2.0 * k as f64 + 1.0)
}

/// Degree-10 smoothing polynomial of the histogram.
///
/// Coefficients are chosen so that the polynomial's mass over each bin
/// matches the bin's histogram mass in the least-squares sense, solved by
/// SVD (minimum-norm when there are fewer bins than coefficients) with a
/// ridge fallback. The knots must lie strictly inside the histogram support;
/// only the body between them is used downstream.
pub fn fit_body_polynomial(hist: &Histogram, knots: (f64, f64)) -> Result<BodyPolynomial> {
    let (lo, hi) = hist.support();
    if !(knots.0 > lo && knots.1 < hi && knots.0 < knots.1) {
        return Err(Error::InvalidInput(format!(
            "knots ({}, {}) must lie strictly inside ({lo}, {hi})",
            knots.0, knots.1
        )));
    }
    let nb = hist.n_bins();
    let ncoef = BODY_DEGREE + 1;
    let half = 0.5 * (hi - lo);
    let unit = |x: f64| ((2.0 * x - lo - hi) / (hi - lo)).clamp(-1.0, 1.0);
    let mut a = DMatrix::<f64>::zeros(nb, ncoef);
    let mut b = DVector::<f64>::zeros(nb);
    for j in 0..nb {
        let (t0, t1) = (unit(hist.edges[j]), unit(hist.edges[j + 1]));
        for k in 0..ncoef {
            a[(j, k)] = half * (legendre_integral(t1, k) - legendre_integral(t0, k));
        }
        b[j] = hist.heights[j] * (hist.edges[j + 1] - hist.edges[j]);
    }

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * smax).count();
    let ill_conditioned = rank < ncoef;
    let coeffs = match svd.solve(&b, 1e-12 * smax) {
        Ok(c) if c.iter().all(|v| v.is_finite()) => c,
        _ => {
            log::warn!("body polynomial: SVD solve failed, using ridge fallback");
            let mut ata = a.transpose() * &a;
            for d in 0..ncoef {
                ata[(d, d)] += RIDGE_LAMBDA;
            }
            ata.cholesky()
                .map(|ch| ch.solve(&(a.transpose() * &b)))
                .ok_or_else(|| Error::NonFinite("body polynomial normal equations".into()))?
        }
    };
    if ill_conditioned && nb >= ncoef {
        log::warn!("body polynomial: rank {rank} < {ncoef}");
    }
    Ok(BodyPolynomial {
        coeffs: coeffs.iter().copied().collect(),
        lo,
        hi,
        ill_conditioned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSide {
    Left,
    Right,
}

/// GEV parameters. Left tails are fitted to reflected returns `x = −r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub xi: f64,
    pub a: f64,
    pub b: f64,
    pub side: TailSide,
}

const GUMBEL_XI: f64 = 1e-12;

/// `F(x) = exp{−(1 + ξ(x − a)/b)^(−1/ξ)}`, Gumbel when ξ → 0.
pub fn gev_cdf(x: f64, xi: f64, a: f64, b: f64) -> f64 {
    let z = (x - a) / b;
    if xi.abs() < GUMBEL_XI {
        return (-(-z).exp()).exp();
    }
    let s = 1.0 + xi * z;
    if s <= 0.0 {
        return if xi > 0.0 { 0.0 } else { 1.0 };
    }
    (-((-(xi * z).ln_1p() / xi).exp())).exp()
}

pub fn gev_pdf(x: f64, xi: f64, a: f64, b: f64) -> f64 {
    let z = (x - a) / b;
    if xi.abs() < GUMBEL_XI {
        let t = (-z).exp();
        return t * (-t).exp() / b;
    }
    let s = 1.0 + xi * z;
    if s <= 0.0 {
        return 0.0;
    }
    let t = (-(xi * z).ln_1p() / xi).exp();
    t.powf(xi + 1.0) * (-t).exp() / b
}

impl GevParams {
    /// Density at return `r` on this tail's side, before any rescaling.
    pub fn pdf(&self, r: f64) -> f64 {
        match self.side {
            TailSide::Right => gev_pdf(r, self.xi, self.a, self.b),
            TailSide::Left => gev_pdf(-r, self.xi, self.a, self.b),
        }
    }

    /// Probability of a return at or below `r`.
    pub fn cdf(&self, r: f64) -> f64 {
        match self.side {
            TailSide::Right => gev_cdf(r, self.xi, self.a, self.b),
            TailSide::Left => 1.0 - gev_cdf(-r, self.xi, self.a, self.b),
        }
    }
}

/// Target density and cumulative probability at a return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailAnchor {
    pub r: f64,
    pub pdf: f64,
    pub cdf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevFit {
    pub params: GevParams,
    /// Euclidean norm of the four relative residuals.
    pub residual_norm: f64,
}

fn gev_residuals(anchors: &[TailAnchor; 2], side: TailSide, x: &[f64]) -> Vec<f64> {
    let p = GevParams {
        xi: x[0],
        a: x[1],
        b: x[2].exp(),
        side,
    };
    let mut out = Vec::with_capacity(4);
    for an in anchors {
        out.push((p.pdf(an.r) - an.pdf) / an.pdf);
        out.push((p.cdf(an.r) - an.cdf) / an.cdf);
    }
    out
}

/// Fit a GEV tail so its pdf and cdf match two anchors (four relative
/// residuals, three parameters).
///
/// Anchors are given in return coordinates with cdf in the usual
/// orientation; for the left tail the fit runs on reflected returns, where
/// the targets become `1 − cdf`.
pub fn fit_gev_tail(anchors: [TailAnchor; 2], side: TailSide) -> Result<GevFit> {
    for an in &anchors {
        if !(an.pdf > 0.0 && an.cdf > 0.0 && an.cdf < 1.0) || !an.r.is_finite() {
            return Err(Error::InvalidInput(format!("invalid tail anchor {an:?}")));
        }
    }
    // Gumbel starting point from the two reflected cdf levels.
    let refl = |an: &TailAnchor| match side {
        TailSide::Right => (an.r, an.cdf),
        TailSide::Left => (-an.r, 1.0 - an.cdf),
    };
    let (x1, c1) = refl(&anchors[0]);
    let (x2, c2) = refl(&anchors[1]);
    let z = |c: f64| -(-c.ln()).ln();
    let (z1, z2) = (z(c1), z(c2));
    let b0 = if (z2 - z1).abs() > 1e-12 && (x2 - x1) / (z2 - z1) > 0.0 {
        (x2 - x1) / (z2 - z1)
    } else {
        (x2 - x1).abs().max(1e-3)
    };
    let a0 = x1 - b0 * z1;

    let obj = |x: &[f64]| -> f64 { gev_residuals(&anchors, side, x).iter().map(|r| r * r).sum() };
    let nm_opts = NelderMeadOptions {
        f_tol: 1e-16,
        x_tol: 1e-12,
        max_iter: 4000,
        initial_step: 0.1,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &xi0 in &[0.0, 0.2, -0.2, 0.5] {
        let start = [xi0, a0, b0.ln()];
        let nm = nelder_mead(obj, &start, &nm_opts);
        let lm = levenberg_marquardt(
            |x| gev_residuals(&anchors, side, x),
            &nm.x,
            &LevenbergMarquardtOptions::default(),
        );
        let cand = if lm.value < nm.value { (lm.value, lm.x) } else { (nm.value, nm.x) };
        if cand.0.is_finite() && best.as_ref().is_none_or(|b| cand.0 < b.0) {
            best = Some(cand);
        }
    }
    let (value, x) = best.ok_or_else(|| Error::NoConvergence {
        best_objective: f64::INFINITY,
        restarts: 4,
        best_params: Vec::new(),
    })?;
    let params = GevParams {
        xi: x[0],
        a: x[1],
        b: x[2].exp(),
        side,
    };
    if !(params.b > 0.0) || !params.xi.is_finite() || !params.a.is_finite() {
        return Err(Error::NoConvergence {
            best_objective: value,
            restarts: 4,
            best_params: x,
        });
    }
    Ok(GevFit {
        params,
        residual_norm: value.sqrt(),
    })
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let i = h.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

/// The assembled piecewise physical density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalDensity {
    pub body: BodyPolynomial,
    pub left: GevFit,
    pub right: GevFit,
    /// `(r_0.1, r_0.9)`.
    pub knots: (f64, f64),
    /// Multipliers that make each GEV tail meet the body at its knot.
    pub tail_scales: (f64, f64),
    /// Global constant the three branches are divided by.
    pub normalizer: f64,
    pub n_bins: usize,
    pub grid: ReturnGrid,
    pub values: Vec<f64>,
    pub tenor_days: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    LeftTail,
    Body,
    RightTail,
}

impl PhysicalDensity {
    pub fn branch(&self, r: f64) -> Branch {
        if r <= self.knots.0 {
            Branch::LeftTail
        } else if r < self.knots.1 {
            Branch::Body
        } else {
            Branch::RightTail
        }
    }

    /// Left-tail branch value at `r`, normalized.
    pub fn left_pdf(&self, r: f64) -> f64 {
        self.tail_scales.0 * self.left.params.pdf(r) / self.normalizer
    }

    pub fn right_pdf(&self, r: f64) -> f64 {
        self.tail_scales.1 * self.right.params.pdf(r) / self.normalizer
    }

    pub fn body_pdf(&self, r: f64) -> f64 {
        self.body.pdf(r) / self.normalizer
    }

    pub fn pdf(&self, r: f64) -> f64 {
        match self.branch(r) {
            Branch::LeftTail => self.left_pdf(r),
            Branch::Body => self.body_pdf(r),
            Branch::RightTail => self.right_pdf(r),
        }
    }

    /// Largest gap between branches at the two knots.
    pub fn knot_gap(&self) -> f64 {
        let (k0, k1) = self.knots;
        (self.left_pdf(k0) - self.body_pdf(k0))
            .abs()
            .max((self.right_pdf(k1) - self.body_pdf(k1)).abs())
    }

    pub fn density_grid(&self) -> DensityGrid {
        DensityGrid {
            grid: self.grid,
            values: self.values.clone(),
            tenor_days: self.tenor_days,
            date: None,
            clipped_mass: 0.0,
            truncated_mass: 0.0,
            clip_warning: false,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["r", "p"])?;
        for (i, v) in self.values.iter().enumerate() {
            wtr.write_record([format!("{}", self.grid.at(i)), format!("{v:e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// JSON sidecar with knots, tail parameters, body coefficients and bins.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "knots": [self.knots.0, self.knots.1],
            "n_bins": self.n_bins,
            "body": {
                "basis": "legendre",
                "domain": [self.body.lo, self.body.hi],
                "coeffs": self.body.coeffs,
            },
            "left_tail": {
                "xi": self.left.params.xi,
                "a": self.left.params.a,
                "b": self.left.params.b,
                "reflected": true,
                "scale": self.tail_scales.0,
                "residual_norm": self.left.residual_norm,
            },
            "right_tail": {
                "xi": self.right.params.xi,
                "a": self.right.params.a,
                "b": self.right.params.b,
                "reflected": false,
                "scale": self.tail_scales.1,
                "residual_norm": self.right.residual_norm,
            },
            "normalizer": self.normalizer,
            "tenor_days": self.tenor_days,
        })
    }
}

/// Histogram → polynomial body → GEV tails, renormalized on `grid`.
pub fn assemble_physical(returns: &[f64], n_bins: usize, grid: &ReturnGrid, tenor_days: f64) -> Result<PhysicalDensity> {
    let hist = histogram_density(returns, n_bins)?;
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| quantile(&sorted, p);
    let knots = (q(LEFT_ANCHORS.1), q(RIGHT_ANCHORS.0));
    let body = fit_body_polynomial(&hist, knots)?;

    let anchor = |level: f64| -> Result<TailAnchor> {
        let r = q(level);
        let pdf = body.pdf(r);
        if !(pdf > 0.0) {
            return Err(Error::DegenerateSample(format!("smoothed density vanishes at quantile {level}")));
        }
        Ok(TailAnchor { r, pdf, cdf: level })
    };
    let left = fit_gev_tail([anchor(LEFT_ANCHORS.1)?, anchor(LEFT_ANCHORS.0)?], TailSide::Left)?;
    let right = fit_gev_tail([anchor(RIGHT_ANCHORS.0)?, anchor(RIGHT_ANCHORS.1)?], TailSide::Right)?;

    let scale_at = |fit: &GevFit, knot: f64| -> Result<f64> {
        let g = fit.params.pdf(knot);
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::NonFinite(format!("GEV tail density at knot {knot}")));
        }
        Ok(body.pdf(knot) / g)
    };
    let tail_scales = (scale_at(&left, knots.0)?, scale_at(&right, knots.1)?);

    let mut pd = PhysicalDensity {
        body,
        left,
        right,
        knots,
        tail_scales,
        normalizer: 1.0,
        n_bins,
        grid: *grid,
        values: Vec::new(),
        tenor_days,
    };
    let raw: Vec<f64> = grid.points().iter().map(|&r| pd.pdf(r)).collect();
    let mass = grid.integrate(&raw);
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::NonFinite("physical density mass".into()));
    }
    pd.normalizer = mass;
    pd.values = raw.iter().map(|v| v / mass).collect();
    Ok(pd)
}

/// Rescale returns so their variance moves from `overall_rv` to `cluster_rv`.
pub fn conditional_rescaled_returns(returns: &[f64], cluster_rv: f64, overall_rv: f64) -> Result<Vec<f64>> {
    if !(cluster_rv > 0.0) || !(overall_rv > 0.0) {
        return Err(Error::InvalidInput(format!(
            "variances must be positive, got cluster {cluster_rv}, overall {overall_rv}"
        )));
    }
    let s = (cluster_rv / overall_rv).sqrt();
    Ok(returns.iter().map(|r| s * r).collect())
}
