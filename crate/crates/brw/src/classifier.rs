//! Phase classification of the complex parameter `lambda = theta + i eta`.
//!
//! The convergence region `Lambda` of the additive martingale `Z_n(lambda)`
//! is carved out by the moment ratio `f(p) = m(p theta)/|m(lambda)|^p`:
//! `lambda` is interior when `f` dips strictly below 1 somewhere on `(1, 2]`,
//! and sits on the boundary when `f` has a minimal root `alpha` in `[1, 2]`
//! with nonpositive log-derivative there. The boundary splits into buckets by
//! where that root lands: at 1, strictly inside `(1, 2)`, or at 2. Separately,
//! parameters whose one-generation martingale has no finite moment of any
//! order above 1 form their own bucket, and real parameters outside the
//! transform domain another.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::charfun::{self, alpha_root, AlphaRoot, CharFunError};
use crate::complex_as_pair;
use crate::models::OffspringModel;
use crate::sums::{NeumaierComplex, NeumaierSum};
use crate::Estimate;

/// Default root/region tolerance for closed-form models.
pub const DEFAULT_CLASSIFY_TOL: f64 = 1e-10;

/// Half-width of the alpha buckets at the endpoints 1 and 2.
pub const ALPHA_BUCKET_TOL: f64 = 1e-6;

/// Probe exponents for the all-moments-infinite predicate.
const GAMMA_PROBES: [f64; 4] = [1.000001, 1.01, 1.5, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionTag {
    OutsideDomain,
    Interior,
    Boundary1,
    Boundary12,
    Boundary2,
    MomentBlowup,
    Exterior,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DerivativeSign {
    Negative,
    Zero,
}

/// Classification of one parameter, with the boundary payload when it applies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionVerdict {
    #[serde(serialize_with = "complex_as_pair")]
    pub lambda: Complex64,
    pub tag: RegionTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative_sign: Option<DerivativeSign>,
    /// Exponent witnessing `f(p) < 1 - tol` for Interior verdicts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl RegionVerdict {
    fn bare(lambda: Complex64, tag: RegionTag) -> Self {
        RegionVerdict {
            lambda,
            tag,
            alpha: None,
            derivative: None,
            derivative_sign: None,
            witness_p: None,
            reason: None,
        }
    }

    pub fn is_boundary(&self) -> bool {
        matches!(
            self.tag,
            RegionTag::Boundary1 | RegionTag::Boundary12 | RegionTag::Boundary2
        )
    }

    pub fn to_ndjson(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

/// Maps `lambda` to its region.
///
/// Decision order (each step only runs if the previous did not decide):
/// 1. real part outside the transform domain: `OutsideDomain`;
/// 2. model certifies `E[|Z_1(theta)|^gamma]` infinite for every `gamma > 1`:
///    `MomentBlowup`;
/// 3. `f` dips below `1 - tol` somewhere on `(1, 2]`: `Interior` (tested
///    before the boundary buckets because `f(1) = 1` identically on the real
///    axis, which would otherwise misfile real interior points);
/// 4. minimal root `alpha` of `f(p) = 1` exists with derivative `<= tol`:
///    `Boundary1` / `Boundary12` / `Boundary2` by where `alpha` lands;
/// 5. `f > 1 + tol` on all of `(1, 2]`: `Exterior`;
/// 6. otherwise `Indeterminate`.
pub fn classify(model: &OffspringModel, lambda: Complex64, tol: f64) -> RegionVerdict {
    let theta = lambda.re;
    if !model.domain().contains(theta) {
        return RegionVerdict::bare(lambda, RegionTag::OutsideDomain);
    }

    if GAMMA_PROBES
        .iter()
        .all(|&gamma| model.gamma_moment_finite(theta, gamma) == Some(false))
    {
        return RegionVerdict::bare(lambda, RegionTag::MomentBlowup);
    }

    let (_, s) = match charfun::scan_log_f(model, lambda) {
        Ok(v) => v,
        Err(CharFunError::OutsideDomain) => {
            return RegionVerdict::bare(lambda, RegionTag::OutsideDomain)
        }
        Err(e @ CharFunError::ZeroTransform) => {
            let mut v = RegionVerdict::bare(lambda, RegionTag::Indeterminate);
            v.reason = Some(e.to_string());
            return v;
        }
    };

    // Minimum of log f over the half-open (1, 2]: grid points past the first,
    // plus the refined valley when it lies strictly right of 1.
    let mut open_min = f64::INFINITY;
    let mut open_argmin = 2.0;
    for (p, v) in s.grid.iter().zip(&s.gv).skip(1) {
        if *v < open_min {
            open_min = *v;
            open_argmin = *p;
        }
    }
    if s.pmin > 1.0 && s.gmin < open_min {
        open_min = s.gmin;
        open_argmin = s.pmin;
    }

    if open_min < (1.0 - tol).ln() {
        let mut v = RegionVerdict::bare(lambda, RegionTag::Interior);
        v.witness_p = Some(open_argmin);
        return v;
    }

    match alpha_root(model, lambda, tol) {
        Ok(Some(AlphaRoot { alpha, derivative })) if derivative <= tol => {
            let tag = if (alpha - 1.0).abs() <= ALPHA_BUCKET_TOL {
                RegionTag::Boundary1
            } else if (alpha - 2.0).abs() <= ALPHA_BUCKET_TOL {
                RegionTag::Boundary2
            } else {
                RegionTag::Boundary12
            };
            let mut v = RegionVerdict::bare(lambda, tag);
            v.alpha = Some(alpha);
            v.derivative = Some(derivative);
            v.derivative_sign = Some(if derivative.abs() <= tol {
                DerivativeSign::Zero
            } else {
                DerivativeSign::Negative
            });
            return v;
        }
        Ok(_) => {}
        Err(e) => {
            let mut v = RegionVerdict::bare(lambda, RegionTag::Indeterminate);
            v.reason = Some(e.to_string());
            return v;
        }
    }

    if open_min > (1.0 + tol).ln() {
        return RegionVerdict::bare(lambda, RegionTag::Exterior);
    }

    RegionVerdict::bare(lambda, RegionTag::Indeterminate)
}

/// One moment functional, by whatever route the model admits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum C2Value {
    /// Finite for every order by a closed-form moment bound.
    AnalyticFinite,
    /// Exact expectation over a finite-support one-generation law.
    Exact(f64),
    /// Sample mean with stderr; a finite sample witnesses the size of the
    /// functional but cannot certify that the expectation is finite.
    MonteCarloUnprovable(Estimate),
}

/// Which sufficient divergence condition applies at an `alpha = 2` point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DivergenceCase {
    /// Drift `E[sum |L|^2 log|L|]` strictly negative.
    NegativeDrift,
    /// Drift zero (within tolerance); the second-moment conditions apply.
    ZeroDrift,
}

/// The five functionals behind the divergence conditions at `alpha = 2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftFunctionals {
    /// `E[sum |L|^2 log |L|]`
    pub weighted_log: Estimate,
    /// `E[W_1 log_+ W_1]`
    pub w_logplus: Estimate,
    /// `E[sum |L|^2 log^2 |L|]`
    pub weighted_log2: Estimate,
    /// `E[W_1 log_+^2 W_1]`
    pub w_logplus2: Estimate,
    /// `E[Wt_1 log_+ Wt_1]` with `Wt_1 = sum |L|^2 log_-(|L|)`
    pub wneg_logplus: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c2: Option<C2Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftFunctionals>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<DivergenceCase>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConditionError {
    #[error(transparent)]
    CharFun(#[from] CharFunError),
}

/// Evaluates `E[|Z_1|^alpha log_+^{2+eps}|Z_1|]`, the extra moment condition
/// attached to boundary verdicts.
///
/// Gaussian binary admits every real moment of `|Z_1|` in closed-form bounds,
/// so the answer is a flag rather than a number. Finite-support tables are
/// enumerated exactly. Everything else is sampled.
pub fn check_c2(
    model: &OffspringModel,
    lambda: Complex64,
    alpha: f64,
    eps: f64,
    reps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<C2Value, ConditionError> {
    let lt = model
        .log_transform(lambda)
        .ok_or(CharFunError::OutsideDomain)?;
    if !lt.log_abs.is_finite() {
        return Err(CharFunError::ZeroTransform.into());
    }
    let functional = |z: Complex64| -> f64 {
        let a = z.norm();
        if a <= 1.0 {
            0.0
        } else {
            a.powf(alpha) * a.ln().powf(2.0 + eps)
        }
    };
    match model {
        OffspringModel::GaussianBinary => Ok(C2Value::AnalyticFinite),
        OffspringModel::Table(t) => {
            let mut acc = NeumaierSum::new();
            for (prob, xs) in t.rows() {
                let mut z = NeumaierComplex::new();
                for &x in xs {
                    let log_abs = -lambda.re * x - lt.log_abs;
                    let phase = -lambda.im * x - lt.arg;
                    z.add(Complex64::from_polar(log_abs.exp(), phase));
                }
                acc.add(prob * functional(z.value()));
            }
            Ok(C2Value::Exact(acc.value()))
        }
        OffspringModel::LatticePathological => {
            let mut vals = Vec::with_capacity(reps as usize);
            let mut buf = Vec::new();
            for _ in 0..reps {
                model.sample_groups_into(rng, &mut buf);
                let mut z = NeumaierComplex::new();
                for &(x, c) in &buf {
                    let log_abs = -lambda.re * x - lt.log_abs;
                    let phase = -lambda.im * x - lt.arg;
                    z.add(c as f64 * Complex64::from_polar(log_abs.exp(), phase));
                }
                vals.push(functional(z.value()));
            }
            let (mean, se) = crate::mean_stderr(&vals);
            Ok(C2Value::MonteCarloUnprovable(Estimate::sampled(mean, se)))
        }
    }
}

/// Evaluates the divergence-condition functionals at an `alpha = 2` point and
/// reports which sufficient case the drift sign selects.
///
/// The two pure weight moments come from the closed-form transform
/// derivatives; the three compound functionals (of `W_1` and of the
/// log-negative-weighted sum) are enumerated exactly for finite tables and
/// sampled otherwise.
pub fn prop1_conditions(
    model: &OffspringModel,
    lambda: Complex64,
    reps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ConditionReport, ConditionError> {
    const ALPHA: f64 = 2.0;
    let lt = model
        .log_transform(lambda)
        .ok_or(CharFunError::OutsideDomain)?;
    if !lt.log_abs.is_finite() {
        return Err(CharFunError::ZeroTransform.into());
    }
    let drift = charfun::log_moment_functional(model, lambda, ALPHA)?;
    let second = charfun::log_moment2_functional(model, lambda, ALPHA)?;

    // Per-realization W_1 = sum |L|^2 and Wt_1 = sum |L|^2 log_-(|L|).
    let compounds = |groups: &[(f64, u64)]| -> (f64, f64) {
        let mut w = NeumaierSum::new();
        let mut wneg = NeumaierSum::new();
        for &(x, c) in groups {
            let log_l = -lambda.re * x - lt.log_abs;
            let l2 = c as f64 * (ALPHA * log_l).exp();
            w.add(l2);
            wneg.add(l2 * (-log_l).max(0.0));
        }
        (w.value(), wneg.value())
    };
    let logplus = |w: f64| if w > 1.0 { w * w.ln() } else { 0.0 };
    let logplus2 = |w: f64| {
        if w > 1.0 {
            let l = w.ln();
            w * l * l
        } else {
            0.0
        }
    };

    let (w_logplus, w_logplus2, wneg_logplus) = match model {
        OffspringModel::Table(t) => {
            let mut a = NeumaierSum::new();
            let mut b = NeumaierSum::new();
            let mut c = NeumaierSum::new();
            for (prob, xs) in t.rows() {
                let groups: Vec<(f64, u64)> = xs.iter().map(|&x| (x, 1)).collect();
                let (w, wneg) = compounds(&groups);
                a.add(prob * logplus(w));
                b.add(prob * logplus2(w));
                c.add(prob * logplus(wneg));
            }
            (
                Estimate::exact(a.value()),
                Estimate::exact(b.value()),
                Estimate::exact(c.value()),
            )
        }
        _ => {
            let mut va = Vec::with_capacity(reps as usize);
            let mut vb = Vec::with_capacity(reps as usize);
            let mut vc = Vec::with_capacity(reps as usize);
            let mut buf = Vec::new();
            for _ in 0..reps {
                model.sample_groups_into(rng, &mut buf);
                let (w, wneg) = compounds(&buf);
                va.push(logplus(w));
                vb.push(logplus2(w));
                vc.push(logplus(wneg));
            }
            let (ma, sa) = crate::mean_stderr(&va);
            let (mb, sb) = crate::mean_stderr(&vb);
            let (mc, sc) = crate::mean_stderr(&vc);
            (
                Estimate::sampled(ma, sa),
                Estimate::sampled(mb, sb),
                Estimate::sampled(mc, sc),
            )
        }
    };

    let case = if drift.abs() <= DEFAULT_CLASSIFY_TOL.max(1e-9) {
        DivergenceCase::ZeroDrift
    } else {
        DivergenceCase::NegativeDrift
    };
    Ok(ConditionReport {
        c2: None,
        drift: Some(DriftFunctionals {
            weighted_log: Estimate::exact(drift),
            w_logplus,
            weighted_log2: Estimate::exact(second),
            w_logplus2,
            wneg_logplus,
        }),
        case: Some(case),
    })
}
