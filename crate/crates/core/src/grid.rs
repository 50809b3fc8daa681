//! Uniform return-state grids and trapezoidal quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower end of the default return grid (a −99% return).
pub const DEFAULT_R_MIN: f64 = -0.99;
/// Upper end of the default return grid.
pub const DEFAULT_R_MAX: f64 = 4.0;
/// Default grid step in return units.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Uniform grid `r_i = min + i·step`, `i = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnGrid {
    min: f64,
    step: f64,
    len: usize,
}

impl ReturnGrid {
    /// Grid covering `[min, max]`; `max` is snapped to the nearest whole step.
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && step.is_finite()) {
            return Err(Error::NonFinite("grid bounds".into()));
        }
        if step <= 0.0 {
            return Err(Error::Validation(format!("grid step must be > 0, got {step}")));
        }
        if max <= min {
            return Err(Error::Validation(format!("grid max {max} must exceed min {min}")));
        }
        let intervals = ((max - min) / step).round() as usize;
        if intervals < 2 {
            return Err(Error::Validation("grid needs at least three points".into()));
        }
        Ok(Self {
            min,
            step,
            len: intervals + 1,
        })
    }

    pub fn with_len(min: f64, step: f64, len: usize) -> Result<Self> {
        if len < 3 {
            return Err(Error::Validation("grid needs at least three points".into()));
        }
        Self::new(min, min + step * (len - 1) as f64, step)
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.at(self.len - 1)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> f64 {
        self.max() - self.min
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        self.min + self.step * i as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.at(i)).collect()
    }

    /// Index of the largest grid point `<= r`, clamped to the grid.
    pub fn floor_index(&self, r: f64) -> usize {
        let k = ((r - self.min) / self.step + 1e-9).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.len - 1)
        }
    }

    /// True when two grids describe the same points up to round-off.
    pub fn matches(&self, other: &ReturnGrid) -> bool {
        self.len == other.len
            && (self.min - other.min).abs() <= 1e-12 * (1.0 + self.min.abs())
            && (self.step - other.step).abs() <= 1e-12 * self.step
    }

    pub fn ensure_matches(&self, other: &ReturnGrid) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "[{}, {}; {}] vs [{}, {}; {}]",
                self.min,
                self.max(),
                self.step,
                other.min,
                other.max(),
                other.step
            )))
        }
    }

    /// Trapezoidal integral of `values` sampled on this grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        trapezoid(values, self.step)
    }

    /// Trapezoidal integral restricted to grid points inside `[lo, hi]`.
    ///
    /// Interval ends falling between grid points are handled by linear
    /// interpolation so the result is continuous in `lo` and `hi`.
    pub fn integrate_between(&self, values: &[f64], lo: f64, hi: f64) -> f64 {
        debug_assert_eq!(values.len(), self.len);
        let lo = lo.max(self.min);
        let hi = hi.min(self.max());
        if hi <= lo {
            return 0.0;
        }
        let interp = |r: f64| -> f64 {
            let i = self.floor_index(r).min(self.len - 2);
            let t = (r - self.at(i)) / self.step;
            values[i] * (1.0 - t) + values[i + 1] * t
        };
        let i_lo = self.floor_index(lo);
        let i_hi = self.floor_index(hi);
        if i_lo == i_hi {
            return 0.5 * (interp(lo) + interp(hi)) * (hi - lo);
        }
        let mut total = 0.0;
        let first = self.at(i_lo + 1);
        total += 0.5 * (interp(lo) + values[i_lo + 1]) * (first - lo);
        for i in (i_lo + 1)..i_hi {
            total += 0.5 * (values[i] + values[i + 1]) * self.step;
        }
        let last = self.at(i_hi);
        if hi > last {
            total += 0.5 * (values[i_hi] + interp(hi)) * (hi - last);
        }
        total
    }

    /// Running trapezoidal integral, `out[0] = 0`.
    pub fn cumulative(&self, values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in values.windows(2) {
            acc += 0.5 * (w[0] + w[1]) * self.step;
            out.push(acc);
        }
        out
    }
}

impl Default for ReturnGrid {
    fn default() -> Self {
        Self::new(DEFAULT_R_MIN, DEFAULT_R_MAX, DEFAULT_STEP).expect("default grid is valid")
    }
}

pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = values[1..n - 1].iter().sum();
            step * (inner + 0.5 * (values[0] + values[n - 1]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = ReturnGrid::default();
        assert_eq!(g.len(), 4991);
        assert!((g.max() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_is_exact_for_linear() {
        let g = ReturnGrid::new(-1.0, 1.0, 0.01).unwrap();
        let v: Vec<f64> = g.points().iter().map(|r| 3.0 * r + 2.0).collect();
        assert!((g.integrate(&v) - 4.0).abs() < 1e-12);
        assert!((g.integrate_between(&v, -0.333, 0.517) - (1.5 * (0.517f64.powi(2) - 0.333f64.powi(2)) + 2.0 * 0.85)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(ReturnGrid::new(0.0, 1.0, 0.0).is_err());
        assert!(ReturnGrid::new(1.0, 0.0, 0.1).is_err());
    }
}
