//! Slowly varying truncation functions for the moment bounds.
//!
//! The pair works like this: `ell(x) = exp(integral of eps from 0 to log x)`
//! where `eps(u) = delta/u0` on `|u| <= u0` and `delta/|u|` beyond, and
//! `phi(x) = |x|^alpha * ell(|x|)` extended to complex arguments by
//! `phi(z) = phi(Re z) + phi(Im z)`. Because `eps` is piecewise elementary,
//! `ell` has a closed form and the defining properties hold exactly:
//!
//! * `ell(1/x) = 1/ell(x)`,
//! * `ell(x) = c * log^delta(x)` for `x > e^{u0}` with `c = e^delta u0^{-delta}`,
//! * `ell(xy) <= ell(x)^2 ell(y)` for `x >= 1`.
//!
//! For `u0` large enough, `phi` is convex with a concave derivative away from
//! the kink at `e^{u0}`; [`select_u0`] finds such a `u0` by doubling until the
//! grid checks pass.

use num_complex::Complex64;
use thiserror::Error;

/// Points in the shape-check grid.
pub const SHAPE_GRID_POINTS: usize = 1000;

/// Tolerance for the scaled second-difference shape checks.
pub const SHAPE_TOL: f64 = 1e-9;

/// Largest `u0` the doubling search will try.
pub const U0_SEARCH_MAX: f64 = (1u32 << 20) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum TvError {
    #[error("alpha must lie in (1, 2), got {0}")]
    AlphaRange(f64),
    #[error("delta must be positive and finite, got {0}")]
    DeltaRange(f64),
    #[error("u0 must be positive and finite, got {0}")]
    U0Range(f64),
    #[error("ell is undefined for nonpositive argument {0}")]
    Domain(f64),
    #[error("no u0 up to 2^20 satisfies the shape checks")]
    SearchExhausted,
}

/// The truncation pair `(phi, ell)` for fixed `alpha`, `delta`, `u0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TVFunction {
    alpha: f64,
    delta: f64,
    u0: f64,
}

/// Outcome of the convexity / concave-derivative grid checks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ShapeReport {
    pub convex: bool,
    pub derivative_concave: bool,
    /// Most negative scaled second difference of `phi` (want `>= -tol`).
    pub worst_convexity: f64,
    /// Most positive scaled second difference of the numeric `phi'`
    /// (want `<= tol`).
    pub worst_concavity: f64,
}

impl ShapeReport {
    pub fn passes(&self) -> bool {
        self.convex && self.derivative_concave
    }
}

impl TVFunction {
    pub fn new(alpha: f64, delta: f64, u0: f64) -> Result<Self, TvError> {
        if !(alpha > 1.0 && alpha < 2.0) {
            return Err(TvError::AlphaRange(alpha));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(TvError::DeltaRange(delta));
        }
        if !(u0 > 0.0 && u0.is_finite()) {
            return Err(TvError::U0Range(u0));
        }
        Ok(TVFunction { alpha, delta, u0 })
    }

    /// Constructs with the smallest power-of-two `u0` passing [`Self::check_shape`].
    pub fn with_auto_u0(alpha: f64, delta: f64) -> Result<Self, TvError> {
        let u0 = select_u0(alpha, delta)?;
        TVFunction::new(alpha, delta, u0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn u0(&self) -> f64 {
        self.u0
    }

    /// The constant `c` in `ell(x) = c log^delta(x)` for `x > e^{u0}`.
    pub fn slow_variation_constant(&self) -> f64 {
        self.delta.exp() * self.u0.powf(-self.delta)
    }

    /// The slowly varying factor, in closed form.
    pub fn ell(&self, x: f64) -> Result<f64, TvError> {
        if !(x > 0.0) {
            return Err(TvError::Domain(x));
        }
        Ok(self.ell_unchecked(x))
    }

    fn ell_unchecked(&self, x: f64) -> f64 {
        self.ell_log(x.ln())
    }

    /// `ell(e^lx)` from the log argument, usable where `e^lx` itself would
    /// overflow or underflow.
    pub fn ell_log(&self, lx: f64) -> f64 {
        let u = lx.abs();
        let grown = if u <= self.u0 {
            (self.delta * u / self.u0).exp()
        } else {
            self.delta.exp() * (u / self.u0).powf(self.delta)
        };
        if lx >= 0.0 {
            grown
        } else {
            grown.recip()
        }
    }

    /// `phi` on the real line: `|x|^alpha * ell(|x|)`, with `phi(0) = 0`.
    pub fn phi_real(&self, x: f64) -> f64 {
        let a = x.abs();
        if a == 0.0 {
            return 0.0;
        }
        a.powf(self.alpha) * self.ell_unchecked(a)
    }

    /// `phi` on the complex plane: the sum over components.
    pub fn phi(&self, z: Complex64) -> f64 {
        self.phi_real(z.re) + self.phi_real(z.im)
    }

    /// Grid check of convexity of `phi` and concavity of `phi'`.
    ///
    /// The grid is log-spaced over `[e^{-3 u0}, e^{3 u0}]`, so both checks use
    /// divided (not plain) differences; each scaled difference is compared
    /// against [`SHAPE_TOL`] relative to the local slope magnitude. Stencils
    /// touching the two grid cells around the kink at `e^{u0}` are skipped;
    /// `phi''` genuinely jumps there.
    pub fn check_shape(&self) -> ShapeReport {
        let n = SHAPE_GRID_POINTS;
        let xs: Vec<f64> = (0..n)
            .map(|i| (-3.0 * self.u0 + 6.0 * self.u0 * i as f64 / (n - 1) as f64).exp())
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.phi_real(x)).collect();
        let kink = self.u0.exp();
        // Index of the first grid point at or beyond the kink.
        let k = xs.partition_point(|&x| x < kink);
        let clear_of_kink =
            |lo: usize, hi: usize| (hi as isize) < k as isize - 1 || lo > k + 1;

        let slope = |i: usize, j: usize| (ys[j] - ys[i]) / (xs[j] - xs[i]);

        let mut worst_convexity: f64 = 0.0;
        for i in 0..n - 2 {
            if !clear_of_kink(i, i + 2) {
                continue;
            }
            let s0 = slope(i, i + 1);
            let s1 = slope(i + 1, i + 2);
            let scale = s0.abs().max(s1.abs()).max(1.0);
            worst_convexity = worst_convexity.min((s1 - s0) / scale);
        }

        // Centered-difference phi', then its slopes, which must not increase.
        let d: Vec<f64> = (1..n - 1)
            .map(|i| (ys[i + 1] - ys[i - 1]) / (xs[i + 1] - xs[i - 1]))
            .collect();
        let dslope = |i: usize, j: usize| (d[j] - d[i]) / (xs[j + 1] - xs[i + 1]);
        let mut worst_concavity: f64 = 0.0;
        for i in 0..d.len() - 2 {
            // d[i] spans phi indices i..i+2, so the stencil covers i..i+4.
            if !clear_of_kink(i, i + 4) {
                continue;
            }
            let t0 = dslope(i, i + 1);
            let t1 = dslope(i + 1, i + 2);
            let scale = t0.abs().max(t1.abs()).max(1.0);
            worst_concavity = worst_concavity.max((t1 - t0) / scale);
        }

        ShapeReport {
            convex: worst_convexity >= -SHAPE_TOL,
            derivative_concave: worst_concavity <= SHAPE_TOL,
            worst_convexity,
            worst_concavity,
        }
    }
}

/// Doubling search for the smallest `u0` in `{1, 2, 4, ...}` whose shape
/// checks pass.
pub fn select_u0(alpha: f64, delta: f64) -> Result<f64, TvError> {
    if !(alpha > 1.0 && alpha < 2.0) {
        return Err(TvError::AlphaRange(alpha));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(TvError::DeltaRange(delta));
    }
    let mut u0 = 1.0;
    while u0 <= U0_SEARCH_MAX {
        let tv = TVFunction::new(alpha, delta, u0)?;
        if tv.check_shape().passes() {
            return Ok(u0);
        }
        u0 *= 2.0;
    }
    Err(TvError::SearchExhausted)
}
