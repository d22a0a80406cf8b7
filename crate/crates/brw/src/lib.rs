//! Supercritical branching random walks and their complex additive martingales.
//!
//! A branching random walk starts from a single ancestor at the origin. Every
//! particle `u` independently throws an offspring point process: children are
//! born at the parent's position shifted by the displacements of one
//! [`models::OffspringSample`]. Writing `S(u)` for the position of `u` and
//! `m(lambda) = E[sum_j exp(-lambda X_j)]` for the Laplace transform of the
//! offspring law, the normalized sum
//!
//! ```text
//! Z_n(lambda) = m(lambda)^{-n} * sum_{|u|=n} exp(-lambda * S(u))
//! ```
//!
//! is a mean-one martingale for every complex parameter `lambda = theta + i*eta`
//! with `m(theta)` finite. Whether `Z_n` converges to a nondegenerate limit
//! depends on where `lambda` sits in the complex plane; the crate classifies
//! that phase portrait, simulates the martingales, and checks the convergence
//! and divergence behaviour empirically:
//!
//! * [`models`] - offspring laws and their Laplace transforms,
//! * [`charfun`] - the moment ratio `f(p) = m(p*theta)/|m(lambda)|^p`, its
//!   minimal root `alpha` in `[1, 2]`, and related log-moment functionals,
//! * [`classifier`] - region verdicts (interior, boundary pieces, exterior),
//! * [`simulator`] - population-based simulation of `Z_n`, its truncated
//!   companion, and the weight-tail estimator,
//! * [`spine`] - size-biased single-lineage samplers, ladder epochs, and
//!   direct Riemann integrability checks,
//! * [`tvfun`] - the slowly-varying truncation functions `ell` and `phi`,
//! * [`similarity`] - the matrix-valued reformulation via similarity maps,
//! * [`diagnostics`] - convergence/divergence verdicts from trace ensembles,
//! * [`phase`] - phase-portrait rasters and their renderings.

pub mod charfun;
pub mod classifier;
pub mod diagnostics;
pub mod models;
pub mod phase;
pub mod rngutil;
pub mod similarity;
pub mod simulator;
pub mod spine;
pub mod sums;
pub mod tvfun;

/// Serializes a complex number as the two-element array `[re, im]`.
pub(crate) fn complex_as_pair<S: serde::Serializer>(
    z: &num_complex::Complex64,
    ser: S,
) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = ser.serialize_seq(Some(2))?;
    seq.serialize_element(&z.re)?;
    seq.serialize_element(&z.im)?;
    seq.end()
}

/// Serializes an optional complex number as `[re, im]` or `null`.
pub(crate) fn complex_opt_as_pair<S: serde::Serializer>(
    z: &Option<num_complex::Complex64>,
    ser: S,
) -> Result<S::Ok, S::Error> {
    match z {
        Some(z) => complex_as_pair(z, ser),
        None => ser.serialize_none(),
    }
}

pub(crate) fn pair_as_complex<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> Result<num_complex::Complex64, D::Error> {
    let [re, im] = <[f64; 2] as serde::Deserialize>::deserialize(d)?;
    Ok(num_complex::Complex64::new(re, im))
}

pub(crate) fn pair_as_complex_opt<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> Result<Option<num_complex::Complex64>, D::Error> {
    let v = <Option<[f64; 2]> as serde::Deserialize>::deserialize(d)?;
    Ok(v.map(|[re, im]| num_complex::Complex64::new(re, im)))
}

/// A Monte Carlo estimate together with its standard error.
///
/// `stderr` is `None` for exact (closed-form or enumerated) values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: Option<f64>,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            stderr: None,
        }
    }

    pub fn sampled(value: f64, stderr: f64) -> Self {
        Estimate {
            value,
            stderr: Some(stderr),
        }
    }

    /// Whether `self` and `other` agree within `k` combined standard errors.
    ///
    /// Exact values contribute zero variance; two exact values must agree to
    /// `1e-12` absolutely.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        let var = self.stderr.map_or(0.0, |s| s * s) + other.stderr.map_or(0.0, |s| s * s);
        let band = if var > 0.0 { k * var.sqrt() } else { 1e-12 };
        (self.value - other.value).abs() <= band
    }
}

/// Mean and standard error of a sample.
pub(crate) fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 2, "need at least two samples");
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
