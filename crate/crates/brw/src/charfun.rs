//! The moment ratio `f(p) = m(p*theta) / |m(lambda)|^p` and its minimal root.
//!
//! For one-generation weights `L(u) = e^{-lambda X_u} / m(lambda)` the ratio
//! satisfies `f(p) = E[sum_u |L(u)|^p]`, so the equation `f(alpha) = 1`
//! normalizes the modulus process, and
//!
//! ```text
//! d/dp log f(p) |_{p=alpha} = E[sum_u |L(u)|^alpha * log|L(u)|]
//! ```
//!
//! whenever `f(alpha) = 1`. The pair `(alpha, derivative)` drives the phase
//! classification: a root with nonpositive derivative is the normalization
//! condition on the boundary of the convergence region.
//!
//! `log f` is convex in `p` (Hoelder), which the root finder exploits: after a
//! uniform grid scan it refines transversal crossings by bisection on `log f`
//! and tangencies by bisection on the closed-form derivative `d/dp log f`.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::models::{LogTransform, OffspringModel, ZERO_TRANSFORM_FLOOR};
use crate::sums::NeumaierSum;
use crate::Estimate;

/// Number of grid points used to scan `[1, 2]`.
pub const ALPHA_GRID_POINTS: usize = 257;

/// Bisection stops when the bracket is narrower than this.
pub const BISECT_P_TOL: f64 = 1e-13;

#[derive(Debug, Error, PartialEq)]
pub enum CharFunError {
    #[error("lambda lies outside the transform domain")]
    OutsideDomain,
    #[error("|m(lambda)| vanishes; weights are undefined")]
    ZeroTransform,
}

/// Minimal root of `f(p) = 1` in `[1, 2]` and the log-moment derivative there.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AlphaRoot {
    pub alpha: f64,
    pub derivative: f64,
}

/// Sampled ratio curve, mainly for reporting.
#[derive(Debug, Clone)]
pub struct RatioCurve {
    pub lambda: Complex64,
    /// `(p, f(p))` pairs; `f` can be `+inf` where `m(p*theta)` diverges.
    pub samples: Vec<(f64, f64)>,
    pub root: Option<AlphaRoot>,
}

/// Result of the weight-moment finiteness scan below `alpha`.
#[derive(Debug, Clone, Copy)]
pub struct C3Report {
    pub holds: bool,
    /// Largest grid exponent `vartheta < alpha` with `E[sum |L|^vartheta]`
    /// finite.
    pub witness: Option<f64>,
}

fn transform(model: &OffspringModel, lambda: Complex64) -> Result<LogTransform, CharFunError> {
    let lt = model
        .log_transform(lambda)
        .ok_or(CharFunError::OutsideDomain)?;
    // NaN and -inf both fail the comparison; +inf cannot occur for a
    // convergent transform.
    if !(lt.log_abs > ZERO_TRANSFORM_FLOOR.ln()) {
        return Err(CharFunError::ZeroTransform);
    }
    Ok(lt)
}

/// `log f(p)`; `+inf` where the numerator diverges.
pub fn log_f_ratio(model: &OffspringModel, lambda: Complex64, p: f64) -> Result<f64, CharFunError> {
    let lt = transform(model, lambda)?;
    Ok(log_f_with(model, lambda.re, lt.log_abs, p))
}

/// `f(p) = m(p*theta)/|m(lambda)|^p` as an extended real.
pub fn f_ratio(model: &OffspringModel, lambda: Complex64, p: f64) -> Result<f64, CharFunError> {
    Ok(log_f_ratio(model, lambda, p)?.exp())
}

fn log_f_with(model: &OffspringModel, theta: f64, log_abs_m: f64, p: f64) -> f64 {
    match model.log_m_real(p * theta) {
        Some(lm) => lm - p * log_abs_m,
        None => f64::INFINITY,
    }
}

/// `E[sum_{|u|=1} |L(u)|^alpha log|L(u)|]`, by closed-form differentiation.
///
/// Equals `d/dp log f(p)` at `p = alpha` when `f(alpha) = 1`; in general it is
/// `f(alpha)` times that derivative.
pub fn log_moment_functional(
    model: &OffspringModel,
    lambda: Complex64,
    alpha: f64,
) -> Result<f64, CharFunError> {
    let lt = transform(model, lambda)?;
    let theta = lambda.re;
    let f = log_f_with(model, theta, lt.log_abs, alpha).exp();
    if !f.is_finite() {
        return Ok(f64::INFINITY);
    }
    let dlog = theta * model.dlog_m_real(alpha * theta).unwrap_or(f64::NAN) - lt.log_abs;
    Ok(f * dlog)
}

/// `E[sum_{|u|=1} |L(u)|^alpha log^2|L(u)|]`, again in closed form.
///
/// This is the second `p`-derivative of `f`, i.e. `f * ((log f)'' + ((log f)')^2)`.
pub fn log_moment2_functional(
    model: &OffspringModel,
    lambda: Complex64,
    alpha: f64,
) -> Result<f64, CharFunError> {
    let lt = transform(model, lambda)?;
    let theta = lambda.re;
    let f = log_f_with(model, theta, lt.log_abs, alpha).exp();
    if !f.is_finite() {
        return Ok(f64::INFINITY);
    }
    let g1 = theta * model.dlog_m_real(alpha * theta).unwrap_or(f64::NAN) - lt.log_abs;
    let g2 = theta * theta * model.d2log_m_real(alpha * theta).unwrap_or(f64::NAN);
    Ok(f * (g2 + g1 * g1))
}

/// Weighted Monte Carlo estimate of [`log_moment_functional`]; a cross-check
/// path that never touches the closed-form derivatives.
pub fn log_moment_functional_mc(
    model: &OffspringModel,
    lambda: Complex64,
    alpha: f64,
    reps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Estimate, CharFunError> {
    let lt = transform(model, lambda)?;
    let theta = lambda.re;
    let mut vals = Vec::with_capacity(reps as usize);
    let mut buf = Vec::new();
    for _ in 0..reps {
        model.sample_groups_into(rng, &mut buf);
        let mut acc = NeumaierSum::new();
        for &(x, c) in &buf {
            let log_l = -theta * x - lt.log_abs;
            acc.add(c as f64 * (alpha * log_l).exp() * log_l);
        }
        vals.push(acc.value());
    }
    let (mean, se) = crate::mean_stderr(&vals);
    Ok(Estimate::sampled(mean, se))
}

/// Evaluates `f` on a uniform grid and the root/derivative summary.
pub fn ratio_curve(
    model: &OffspringModel,
    lambda: Complex64,
    points: usize,
    tol: f64,
) -> Result<RatioCurve, CharFunError> {
    let lt = transform(model, lambda)?;
    let n = points.max(3);
    let samples = (0..n)
        .map(|i| {
            let p = 1.0 + i as f64 / (n - 1) as f64;
            (p, log_f_with(model, lambda.re, lt.log_abs, p).exp())
        })
        .collect();
    Ok(RatioCurve {
        lambda,
        samples,
        root: alpha_root(model, lambda, tol)?,
    })
}

/// Grid scan of `log f` over `[1, 2]` with the convex minimum refined.
///
/// `pmin`/`gmin` hold the true minimum location and value: the grid argmin is
/// sharpened by bisecting the closed-form derivative `d/dp log f` wherever it
/// changes sign (golden-section search on `f` itself cannot place a quadratic
/// minimum to better than ~1e-8, because `f` is flat to machine precision
/// there; near a tangency the grid alone is off by ~1e-6 in value, far too
/// coarse to gate on).
pub(crate) struct GridScan {
    pub grid: Vec<f64>,
    pub gv: Vec<f64>,
    pub pmin: f64,
    pub gmin: f64,
}

pub(crate) fn scan_log_f(
    model: &OffspringModel,
    lambda: Complex64,
) -> Result<(LogTransform, GridScan), CharFunError> {
    let lt = transform(model, lambda)?;
    let theta = lambda.re;
    let g = |p: f64| log_f_with(model, theta, lt.log_abs, p);
    let dg = |p: f64| theta * model.dlog_m_real(p * theta).unwrap_or(f64::INFINITY) - lt.log_abs;

    let n = ALPHA_GRID_POINTS;
    let grid: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / (n - 1) as f64).collect();
    let gv: Vec<f64> = grid.iter().map(|&p| g(p)).collect();

    let imin = gv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid nonempty");
    let (mut pmin, mut gmin) = (grid[imin], gv[imin]);
    // log f is convex in p, so its minimum is the derivative's sign change.
    for i in 0..n - 1 {
        if dg(grid[i]) < 0.0 && dg(grid[i + 1]) >= 0.0 {
            let (mut lo, mut hi) = (grid[i], grid[i + 1]);
            while hi - lo > BISECT_P_TOL {
                let mid = 0.5 * (lo + hi);
                if dg(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let p = 0.5 * (lo + hi);
            let v = g(p);
            if v <= gmin {
                pmin = p;
                gmin = v;
            }
            break;
        }
    }
    Ok((lt, GridScan { grid, gv, pmin, gmin }))
}

/// Finds the minimal root of `f(p) = 1` on `[1, 2]`.
///
/// Strategy: scan [`ALPHA_GRID_POINTS`] uniform points. A sign change of
/// `log f` beyond `tol` brackets a transversal crossing, refined by bisection
/// on `log f`. Otherwise, if the refined minimum of `f` sits within `tol` of
/// 1, the root is a tangency at that minimum.
///
/// Returns `None` when the curve stays above `1 + tol`, and also when `f(1)=1`
/// is the only grid root while `f < 1 - tol` on all of `(1, 2]` (the real-axis
/// artifact root with nothing else to report).
pub fn alpha_root(
    model: &OffspringModel,
    lambda: Complex64,
    tol: f64,
) -> Result<Option<AlphaRoot>, CharFunError> {
    let (lt, s) = scan_log_f(model, lambda)?;
    let theta = lambda.re;
    let g = |p: f64| log_f_with(model, theta, lt.log_abs, p);
    let dg = |p: f64| theta * model.dlog_m_real(p * theta).unwrap_or(f64::INFINITY) - lt.log_abs;

    let root_at = |p: f64| -> Result<Option<AlphaRoot>, CharFunError> {
        Ok(Some(AlphaRoot {
            alpha: p,
            derivative: log_moment_functional(model, lambda, p)?,
        }))
    };

    // Root pinned at the left endpoint (always the case on the real axis).
    if s.gv[0] <= tol {
        let d1 = dg(1.0);
        let tail_below = s.gv[1..].iter().all(|&v| v < -tol);
        if d1 <= tol && tail_below {
            return Ok(None);
        }
        return root_at(1.0);
    }

    // Transversal crossing: first cell where log f passes from > tol to < -tol.
    let n = s.grid.len();
    for i in 0..n - 1 {
        if s.gv[i] > tol && s.gv[i + 1] < -tol {
            let (mut lo, mut hi) = (s.grid[i], s.grid[i + 1]);
            while hi - lo > BISECT_P_TOL {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return root_at(0.5 * (lo + hi));
        }
    }

    // Tangency: the refined minimum touches 1 within tol.
    if s.gmin.abs() <= tol {
        return root_at(s.pmin);
    }
    // Narrow dip the grid stepped over entirely: log f is decreasing on
    // [1, pmin], so the minimal root brackets between the endpoint and pmin.
    if s.gmin < -tol {
        let (mut lo, mut hi) = (1.0, s.pmin);
        while hi - lo > BISECT_P_TOL {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return root_at(0.5 * (lo + hi));
    }

    Ok(None)
}

/// Scans `E[sum |L|^vartheta]` for finiteness on a dyadic grid below `alpha`.
///
/// The grid is `alpha/2, alpha/4, ..., 0`; the witness is the largest finite
/// grid point, scanning downward. For transforms finite at `alpha/2` the
/// witness is `alpha/2` itself (so 1 when `alpha = 2`); the zero exponent is
/// only admissible when `m(0) = E[N]` converges.
pub fn c3_check(
    model: &OffspringModel,
    lambda: Complex64,
    alpha: f64,
) -> Result<C3Report, CharFunError> {
    let lt = transform(model, lambda)?;
    let mut candidates: Vec<f64> = (1..=20).map(|k| alpha / f64::powi(2.0, k)).collect();
    candidates.push(0.0);
    for v in candidates {
        if log_f_with(model, lambda.re, lt.log_abs, v).is_finite() {
            return Ok(C3Report {
                holds: true,
                witness: Some(v),
            });
        }
    }
    Ok(C3Report {
        holds: false,
        witness: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::OffspringModel;
    use crate::rngutil::substream;

    const LN_2: f64 = std::f64::consts::LN_2;
    const SQRT_2LOG2: f64 = 1.1774100225154747;
    /// Positive-quadrant corner where the circular and linear boundary pieces
    /// meet: theta = eta = sqrt(log 2 / 2).
    const CORNER: f64 = 0.5887050112577373;

    fn gauss() -> OffspringModel {
        OffspringModel::gaussian_binary()
    }

    fn lam(theta: f64, eta: f64) -> Complex64 {
        Complex64::new(theta, eta)
    }

    #[test]
    fn f_at_one_is_exactly_one_on_real_axis() {
        let lattice = OffspringModel::lattice_pathological();
        let table = OffspringModel::table(vec![(0.5, vec![0.3]), (0.5, vec![-0.2, 0.4])]).unwrap();
        for (model, thetas) in [
            (gauss(), vec![-1.2, 0.0, 0.4, 2.0]),
            (lattice, vec![0.1, 0.9, 2.5]),
            (table, vec![-0.8, 0.2, 1.5]),
        ] {
            for theta in thetas {
                assert_eq!(f_ratio(&model, lam(theta, 0.0), 1.0).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn f_at_one_dominates_one_everywhere() {
        let mut rng = substream(21, &[0]);
        use rand::Rng;
        for _ in 0..2000 {
            let l = lam(rng.random_range(-2.0..2.0), rng.random_range(-4.0..4.0));
            let f1 = f_ratio(&gauss(), l, 1.0).unwrap();
            assert!(f1 >= 1.0 - 1e-12, "f(1) = {f1} at {l}");
        }
    }

    #[test]
    fn tangency_point_on_linear_boundary() {
        // lambda = 1 + i(sqrt(2 log 2) - 1) makes log f(p) = (sqrt(2log2) - p)^2/2.
        let l = lam(1.0, SQRT_2LOG2 - 1.0);
        let f = f_ratio(&gauss(), l, SQRT_2LOG2).unwrap();
        assert!((f - 1.0).abs() <= 1e-10);
        let root = alpha_root(&gauss(), l, 1e-9).unwrap().unwrap();
        assert!((root.alpha - SQRT_2LOG2).abs() <= 1e-9, "alpha = {}", root.alpha);
        assert!(root.derivative.abs() <= 1e-9);
    }

    #[test]
    fn circle_boundary_crosses_at_two() {
        // theta^2 + eta^2 = log 2 with |theta| <= corner: root at p = 2 with
        // derivative theta^2 - (log 2)/2.
        for &theta in &[0.0, 0.2, 0.4, 0.55] {
            let eta = (LN_2 - theta * theta).sqrt();
            let root = alpha_root(&gauss(), lam(theta, eta), 1e-9)
                .unwrap()
                .unwrap();
            assert!((root.alpha - 2.0).abs() <= 1e-9, "alpha = {}", root.alpha);
            let expected = theta * theta - 0.5 * LN_2;
            assert!(
                (root.derivative - expected).abs() <= 1e-9,
                "derivative {} vs {}",
                root.derivative,
                expected
            );
        }
    }

    #[test]
    fn derivative_at_circle_reference_point() {
        let theta = 0.4;
        let eta = (LN_2 - theta * theta).sqrt();
        let d = log_moment_functional(&gauss(), lam(theta, eta), 2.0).unwrap();
        assert!((d - (-0.18657359027997264)).abs() <= 1e-9);
    }

    #[test]
    fn real_black_dot_is_alpha_one_tangency() {
        let root = alpha_root(&gauss(), lam(SQRT_2LOG2, 0.0), 1e-9)
            .unwrap()
            .unwrap();
        assert_eq!(root.alpha, 1.0);
        assert!(root.derivative.abs() <= 1e-9);
    }

    #[test]
    fn deep_real_interior_reports_no_root() {
        // f(1) = 1 with f < 1 on all of (1, 2]: nothing beyond the artifact
        // root at the endpoint.
        assert!(alpha_root(&gauss(), lam(0.3, 0.0), 1e-9).unwrap().is_none());
        assert!(alpha_root(&gauss(), lam(0.0, 0.0), 1e-9).unwrap().is_none());
    }

    #[test]
    fn exterior_reports_no_root_or_positive_slope() {
        // Clearly outside: min f > 1.
        assert!(alpha_root(&gauss(), lam(0.9, 0.9), 1e-9).unwrap().is_none());
        // Real axis beyond the tangency dot: root pinned at 1, rising slope.
        let root = alpha_root(&gauss(), lam(1.5, 0.0), 1e-9).unwrap().unwrap();
        assert_eq!(root.alpha, 1.0);
        assert!(root.derivative > 1e-9);
    }

    #[test]
    fn corner_is_double_root_at_two() {
        let root = alpha_root(&gauss(), lam(CORNER, CORNER), 1e-9)
            .unwrap()
            .unwrap();
        assert!((root.alpha - 2.0).abs() <= 1e-6);
        assert!(root.derivative.abs() <= 1e-9);
    }

    #[test]
    fn lattice_boundary_point_roots_at_two() {
        let m = OffspringModel::lattice_pathological();
        let eta = (-1.0_f64).exp().acos();
        let f2 = f_ratio(&m, lam(1.0, eta), 2.0).unwrap();
        assert!((f2 - 1.0).abs() <= 1e-12);
        let root = alpha_root(&m, lam(1.0, eta), 1e-9).unwrap().unwrap();
        assert!((root.alpha - 2.0).abs() <= 1e-8);
        assert!(root.derivative < 0.0);
    }

    #[test]
    fn derivative_matches_centered_difference() {
        let cases = [
            (gauss(), lam(0.7, 0.3), 1.4),
            (gauss(), lam(1.0, SQRT_2LOG2 - 1.0), SQRT_2LOG2),
            (OffspringModel::lattice_pathological(), lam(1.2, 0.8), 1.6),
            (
                OffspringModel::table(vec![(0.25, vec![0.0, -1.0]), (0.75, vec![0.5, 1.5])])
                    .unwrap(),
                lam(0.5, 0.6),
                1.3,
            ),
        ];
        for (model, l, alpha) in cases {
            let h = 1e-5;
            let fd = (log_f_ratio(&model, l, alpha + h).unwrap()
                - log_f_ratio(&model, l, alpha - h).unwrap())
                / (2.0 * h);
            let f = f_ratio(&model, l, alpha).unwrap();
            let exact = log_moment_functional(&model, l, alpha).unwrap();
            // The functional is f * (log f)'; divide out f for the comparison.
            assert!(
                (exact / f - fd).abs() <= 1e-6,
                "{}: {} vs {}",
                model.name(),
                exact / f,
                fd
            );
        }
    }

    #[test]
    fn functional_matches_weighted_monte_carlo() {
        let mut rng = substream(33, &[7]);
        let cases = [
            (gauss(), lam(1.0, SQRT_2LOG2 - 1.0), SQRT_2LOG2),
            (gauss(), lam(0.4, 0.74), 2.0),
            (OffspringModel::lattice_pathological(), lam(1.0, 0.9), 1.5),
        ];
        for (model, l, alpha) in cases {
            let exact = log_moment_functional(&model, l, alpha).unwrap();
            let mc = log_moment_functional_mc(&model, l, alpha, 200_000, &mut rng).unwrap();
            let se = mc.stderr.unwrap();
            assert!(
                (mc.value - exact).abs() <= 5.0 * se,
                "{}: mc {} vs exact {} (se {})",
                model.name(),
                mc.value,
                exact,
                se
            );
        }
    }

    #[test]
    fn second_log_moment_matches_difference_of_first() {
        let l = lam(0.6, 0.5);
        let h = 1e-5;
        // d/dalpha E[sum |L|^a log|L|] = E[sum |L|^a log^2 |L|].
        let fd = (log_moment_functional(&gauss(), l, 1.7 + h).unwrap()
            - log_moment_functional(&gauss(), l, 1.7 - h).unwrap())
            / (2.0 * h);
        let exact = log_moment2_functional(&gauss(), l, 1.7).unwrap();
        assert!((fd - exact).abs() <= 1e-6);
    }

    #[test]
    fn c3_witness_is_half_alpha() {
        let report = c3_check(&gauss(), lam(0.4, 0.74), 2.0).unwrap();
        assert!(report.holds);
        assert_eq!(report.witness, Some(1.0));
        let lattice = OffspringModel::lattice_pathological();
        let report = c3_check(&lattice, lam(1.0, 0.9), 2.0).unwrap();
        assert!(report.holds);
        assert_eq!(report.witness, Some(1.0));
    }

    #[test]
    fn c3_never_admits_zero_exponent_for_lattice() {
        // m(0) = E[N] diverges, so vartheta = 0 must not be the witness even
        // at tiny theta where every positive grid point is admissible.
        let lattice = OffspringModel::lattice_pathological();
        let report = c3_check(&lattice, lam(0.01, 0.0), 2.0).unwrap();
        assert!(report.holds);
        assert!(report.witness.unwrap() > 0.0);
        assert_eq!(
            f_ratio(&lattice, lam(0.01, 0.0), 0.0).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn zero_transform_is_reported() {
        // m(lambda) = 1 + e^{-i pi} = 0 for the unit-displacement pair at
        // lambda = i pi.
        let table = OffspringModel::table(vec![(1.0, vec![0.0, 1.0])]).unwrap();
        let err = f_ratio(&table, lam(0.0, std::f64::consts::PI), 1.5).unwrap_err();
        assert_eq!(err, CharFunError::ZeroTransform);
    }

    #[test]
    fn outside_domain_is_reported() {
        let lattice = OffspringModel::lattice_pathological();
        assert_eq!(
            f_ratio(&lattice, lam(0.0, 1.0), 1.5).unwrap_err(),
            CharFunError::OutsideDomain
        );
    }

    #[test]
    fn blue_segment_alpha_formula() {
        // Along eta = sqrt(2 log 2) - theta the minimal root is
        // alpha = sqrt(2 log 2)/theta, a tangency.
        for k in 0..10 {
            let theta = CORNER + (SQRT_2LOG2 - CORNER) * (0.08 + 0.84 * k as f64 / 9.0);
            let l = lam(theta, SQRT_2LOG2 - theta);
            let root = alpha_root(&gauss(), l, 1e-9).unwrap().unwrap();
            assert!(
                (root.alpha - SQRT_2LOG2 / theta).abs() <= 1e-9,
                "theta={theta} alpha={} expected={}",
                root.alpha,
                SQRT_2LOG2 / theta
            );
            assert!(root.derivative.abs() <= 1e-9);
        }
    }
}
