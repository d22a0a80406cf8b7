//! Offspring point processes and their Laplace transforms.
//!
//! Three offspring laws are built in:
//!
//! * [`OffspringModel::gaussian_binary`]: two children, displacements i.i.d.
//!   standard normal; `m(lambda) = 2 exp(lambda^2 / 2)` everywhere.
//! * [`OffspringModel::lattice_pathological`]: with probability `1/(n(n+1))`
//!   the particle has `n(n+1)` children, all displaced by `n` (`n >= 1`).
//!   Then `m(lambda) = e^{-lambda} / (1 - e^{-lambda})` for `Re lambda > 0`,
//!   `m(0) = E[N] = infinity`, and `m` is `2 pi i`-periodic.
//! * [`OffspringModel::table`]: a finite mixture of fixed displacement lists,
//!   handy for exhaustive enumeration in tests.
//!
//! Family sizes of the lattice law have infinite mean, so a single draw can
//! ask for billions of identical children. [`OffspringSample`] therefore
//! stores `(displacement, multiplicity)` groups; consumers that genuinely
//! need one entry per child must check [`OffspringSample::count`] first.

use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::sums::NeumaierSum;

/// Largest lattice displacement the sampler resolves; the residual tail mass
/// `1/(cap+1)` is assigned to the cap itself.
pub const LATTICE_N_CAP: u64 = 1_000_000;

/// Row-probability budget for table models.
pub const TABLE_PROB_TOL: f64 = 1e-12;

/// `|m(lambda)|` below this is treated as a vanishing transform.
pub const ZERO_TRANSFORM_FLOOR: f64 = 1e-300;

/// Relative cancellation threshold for declaring a summed transform zero.
pub const ZERO_TRANSFORM_REL: f64 = 1e-13;

const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("table row probabilities must be nonnegative, got {0}")]
    NegativeProbability(f64),
    #[error("table row probabilities sum to {0}, expected 1")]
    ProbabilityMass(f64),
    #[error("table displacement is not finite")]
    NonFiniteDisplacement,
    #[error("table model needs at least one row")]
    EmptyTable,
}

/// One realization of the offspring point process, as multiplicity groups.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringSample {
    groups: Vec<(f64, u64)>,
}

impl OffspringSample {
    pub fn from_groups(groups: Vec<(f64, u64)>) -> Self {
        OffspringSample { groups }
    }

    /// `(displacement, multiplicity)` pairs; multiplicities are >= 1.
    pub fn groups(&self) -> &[(f64, u64)] {
        &self.groups
    }

    /// Total number of children `N`.
    pub fn count(&self) -> u64 {
        self.groups.iter().map(|&(_, c)| c).sum()
    }

    /// Expands to one displacement per child. Unsafe for lattice draws near
    /// the cap in the memory sense; prefer [`Self::groups`].
    pub fn displacements(&self) -> impl Iterator<Item = f64> + '_ {
        self.groups
            .iter()
            .flat_map(|&(x, c)| std::iter::repeat(x).take(c as usize))
    }
}

/// Laplace transform value at a point of the complex plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaplaceValue {
    Divergent,
    Finite(Complex64),
}

impl LaplaceValue {
    pub fn finite(self) -> Option<Complex64> {
        match self {
            LaplaceValue::Finite(z) => Some(z),
            LaplaceValue::Divergent => None,
        }
    }
}

/// Modulus (as a log) and argument of `m(lambda)`.
#[derive(Debug, Clone, Copy)]
pub struct LogTransform {
    pub log_abs: f64,
    pub arg: f64,
}

/// Real-axis domain on which `m(theta)` is finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaDomain {
    /// All of the real line.
    All,
    /// The open half-line `theta > 0`.
    PositiveHalfLine,
}

impl ThetaDomain {
    pub fn contains(self, theta: f64) -> bool {
        match self {
            ThetaDomain::All => theta.is_finite(),
            ThetaDomain::PositiveHalfLine => theta > 0.0,
        }
    }
}

/// Monte Carlo estimate of a complex mean with componentwise standard errors.
#[derive(Debug, Clone, Copy)]
pub struct ComplexEstimate {
    pub mean: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    pub reps: u64,
}

impl ComplexEstimate {
    /// Componentwise agreement with `z` within `k` standard errors. Exact
    /// components (zero stderr) must match to 1e-12.
    pub fn agrees_with(&self, z: Complex64, k: f64) -> bool {
        let ok = |m: f64, target: f64, se: f64| {
            if se > 0.0 {
                (m - target).abs() <= k * se
            } else {
                (m - target).abs() <= 1e-12
            }
        };
        ok(self.mean.re, z.re, self.stderr_re) && ok(self.mean.im, z.im, self.stderr_im)
    }
}

#[derive(Debug, Clone)]
struct TableData {
    rows: Vec<(f64, Vec<f64>)>,
    /// Flattened `(prob, displacement)` atoms over nonzero-probability rows.
    atoms: Vec<(f64, f64)>,
    picker: WeightedIndex<f64>,
    mean_offspring: f64,
}

/// An offspring law.
#[derive(Debug, Clone)]
pub enum OffspringModel {
    GaussianBinary,
    LatticePathological,
    Table(Box<TableModel>),
}

#[derive(Debug, Clone)]
pub struct TableModel {
    data: TableData,
}

impl TableModel {
    pub fn rows(&self) -> &[(f64, Vec<f64>)] {
        &self.data.rows
    }
}

impl OffspringModel {
    pub fn gaussian_binary() -> Self {
        OffspringModel::GaussianBinary
    }

    pub fn lattice_pathological() -> Self {
        OffspringModel::LatticePathological
    }

    /// Builds a table model from `(probability, displacements)` rows.
    pub fn table(rows: Vec<(f64, Vec<f64>)>) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyTable);
        }
        let mut mass = NeumaierSum::new();
        for &(p, ref xs) in &rows {
            if !(p >= 0.0) {
                return Err(ModelError::NegativeProbability(p));
            }
            if xs.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFiniteDisplacement);
            }
            mass.add(p);
        }
        if (mass.value() - 1.0).abs() > TABLE_PROB_TOL {
            return Err(ModelError::ProbabilityMass(mass.value()));
        }
        let atoms = rows
            .iter()
            .filter(|&&(p, _)| p > 0.0)
            .flat_map(|&(p, ref xs)| xs.iter().map(move |&x| (p, x)))
            .collect();
        let picker = WeightedIndex::new(rows.iter().map(|&(p, _)| p))
            .expect("validated weights are admissible");
        let mean_offspring = rows.iter().map(|(p, xs)| p * xs.len() as f64).sum();
        Ok(OffspringModel::Table(Box::new(TableModel {
            data: TableData {
                rows,
                atoms,
                picker,
                mean_offspring,
            },
        })))
    }

    pub fn name(&self) -> &'static str {
        match self {
            OffspringModel::GaussianBinary => "gaussian-binary",
            OffspringModel::LatticePathological => "lattice",
            OffspringModel::Table(_) => "table",
        }
    }

    pub fn domain(&self) -> ThetaDomain {
        match self {
            OffspringModel::GaussianBinary | OffspringModel::Table(_) => ThetaDomain::All,
            OffspringModel::LatticePathological => ThetaDomain::PositiveHalfLine,
        }
    }

    /// Mean family size `E[N]`; infinite for the lattice law.
    pub fn mean_offspring(&self) -> f64 {
        match self {
            OffspringModel::GaussianBinary => 2.0,
            OffspringModel::LatticePathological => f64::INFINITY,
            OffspringModel::Table(t) => t.data.mean_offspring,
        }
    }

    /// Supercriticality predicate `E[N] > 1`.
    pub fn is_supercritical(&self) -> bool {
        self.mean_offspring() > 1.0
    }

    /// Whether `E[Z_1(theta)^gamma]` is finite, when that is known.
    ///
    /// The Gaussian law has all positive moments; the lattice law has a finite
    /// second moment (hence all `gamma <= 2`) for every `theta > 0`; finite
    /// tables are bounded. `None` would signal an undecided law.
    pub fn gamma_moment_finite(&self, theta: f64, gamma: f64) -> Option<bool> {
        debug_assert!(gamma > 1.0);
        match self {
            OffspringModel::GaussianBinary => Some(true),
            OffspringModel::LatticePathological => {
                Some(self.domain().contains(theta) && gamma <= 2.0)
            }
            OffspringModel::Table(_) => Some(true),
        }
    }

    /// Whether the `W`/`Z` log-moment conditions behind the divergence
    /// regime are finite, when that is known.
    pub fn log_moments_finite(&self, theta: f64) -> Option<bool> {
        match self {
            OffspringModel::GaussianBinary | OffspringModel::Table(_) => Some(true),
            OffspringModel::LatticePathological => Some(self.domain().contains(theta)),
        }
    }

    /// Draws one offspring sample.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> OffspringSample {
        let mut groups = Vec::new();
        self.sample_groups_into(rng, &mut groups);
        OffspringSample::from_groups(groups)
    }

    /// Buffer-reusing sampler for hot loops; clears `buf` first.
    pub fn sample_groups_into(&self, rng: &mut ChaCha8Rng, buf: &mut Vec<(f64, u64)>) {
        buf.clear();
        match self {
            OffspringModel::GaussianBinary => {
                let x1: f64 = rng.sample(StandardNormal);
                let x2: f64 = rng.sample(StandardNormal);
                buf.push((x1, 1));
                buf.push((x2, 1));
            }
            OffspringModel::LatticePathological => {
                // P(n) = 1/(n(n+1)) has CDF 1 - 1/(n+1); inverse sampling
                // gives n = floor(u/(1-u)) + 1, clamped at the cap.
                let u: f64 = rng.random();
                let n = ((u / (1.0 - u)).floor() as u64 + 1).min(LATTICE_N_CAP);
                buf.push((n as f64, n * (n + 1)));
            }
            OffspringModel::Table(t) => {
                let row = t.data.picker.sample(rng);
                for &x in &t.data.rows[row].1 {
                    buf.push((x, 1));
                }
            }
        }
    }

    /// `log m(s)` for real `s`; `None` where the transform diverges.
    pub fn log_m_real(&self, s: f64) -> Option<f64> {
        match self {
            OffspringModel::GaussianBinary => Some(std::f64::consts::LN_2 + 0.5 * s * s),
            OffspringModel::LatticePathological => {
                if s > 0.0 {
                    // m(s) = e^{-s} / (1 - e^{-s}); 1 - e^{-s} = -expm1(-s).
                    Some(-s - (-(-s).exp_m1()).ln())
                } else {
                    None
                }
            }
            OffspringModel::Table(t) => Some(log_sum_exp(
                t.data.atoms.iter().map(|&(p, x)| p.ln() - s * x),
            )),
        }
    }

    /// `d/ds log m(s)` for real `s` in the domain.
    pub fn dlog_m_real(&self, s: f64) -> Option<f64> {
        match self {
            OffspringModel::GaussianBinary => Some(s),
            OffspringModel::LatticePathological => {
                if s > 0.0 {
                    // log m = -s - log(1 - e^{-s}) so the derivative is
                    // -1/(1 - e^{-s}) = 1/expm1(-s).
                    Some(1.0 / (-s).exp_m1())
                } else {
                    None
                }
            }
            OffspringModel::Table(t) => {
                let (num, den) = tilted_sums(&t.data.atoms, s);
                Some(num / den)
            }
        }
    }

    /// `d^2/ds^2 log m(s)`, the variance of the `s`-tilted displacement.
    pub fn d2log_m_real(&self, s: f64) -> Option<f64> {
        match self {
            OffspringModel::GaussianBinary => Some(1.0),
            OffspringModel::LatticePathological => {
                if s > 0.0 {
                    // d/ds [1/expm1(-s)] = e^{-s}/expm1(-s)^2.
                    let e = (-s).exp_m1();
                    Some((-s).exp() / (e * e))
                } else {
                    None
                }
            }
            OffspringModel::Table(t) => {
                let atoms = &t.data.atoms;
                let shift = atoms
                    .iter()
                    .map(|&(p, x)| p.ln() - s * x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut w = NeumaierSum::new();
                let mut wx = NeumaierSum::new();
                let mut wxx = NeumaierSum::new();
                for &(p, x) in atoms {
                    let t = (p.ln() - s * x - shift).exp();
                    w.add(t);
                    wx.add(t * x);
                    wxx.add(t * x * x);
                }
                let mean = wx.value() / w.value();
                Some(wxx.value() / w.value() - mean * mean)
            }
        }
    }

    /// Log-modulus and argument of `m(lambda)`; `None` where it diverges.
    ///
    /// Real parameters take the same code path as [`Self::log_m_real`], so
    /// `f(1) = 1` holds exactly on the real axis. The lattice transform
    /// reduces `eta` modulo `2 pi` first, making its periodicity exact.
    pub fn log_transform(&self, lambda: Complex64) -> Option<LogTransform> {
        let (theta, eta) = (lambda.re, lambda.im);
        if !self.domain().contains(theta) {
            return None;
        }
        match self {
            OffspringModel::GaussianBinary => Some(LogTransform {
                log_abs: std::f64::consts::LN_2 + 0.5 * (theta * theta - eta * eta),
                arg: wrap_angle(theta * eta),
            }),
            OffspringModel::LatticePathological => {
                let eta_r = eta.rem_euclid(TAU);
                if eta_r == 0.0 {
                    return Some(LogTransform {
                        log_abs: self.log_m_real(theta)?,
                        arg: 0.0,
                    });
                }
                // 1 - e^{-lambda} written without cancellation:
                // Re = -expm1(-theta) + 2 e^{-theta} sin^2(eta/2).
                let emt = (-theta).exp();
                let s = (0.5 * eta_r).sin();
                let re = -(-theta).exp_m1() + 2.0 * emt * s * s;
                let im = emt * eta_r.sin();
                let denom_sq = (-theta).exp_m1().powi(2) + 4.0 * emt * s * s;
                Some(LogTransform {
                    log_abs: -theta - 0.5 * denom_sq.ln(),
                    arg: wrap_angle(-eta_r - im.atan2(re)),
                })
            }
            OffspringModel::Table(t) => {
                if eta == 0.0 {
                    return Some(LogTransform {
                        log_abs: self.log_m_real(theta)?,
                        arg: 0.0,
                    });
                }
                let atoms = &t.data.atoms;
                let shift = atoms
                    .iter()
                    .map(|&(p, x)| p.ln() - theta * x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut re = NeumaierSum::new();
                let mut im = NeumaierSum::new();
                let mut mass = 0.0;
                for &(p, x) in atoms {
                    let mag = (p.ln() - theta * x - shift).exp();
                    let (sin, cos) = (-eta * x).sin_cos();
                    re.add(mag * cos);
                    im.add(mag * sin);
                    mass += mag;
                }
                let z = Complex64::new(re.value(), im.value());
                // A sum at rounding level relative to its absolute mass is a
                // cancelled (mathematically zero) transform.
                if z.norm() <= ZERO_TRANSFORM_REL * mass {
                    return Some(LogTransform {
                        log_abs: f64::NEG_INFINITY,
                        arg: 0.0,
                    });
                }
                Some(LogTransform {
                    log_abs: shift + z.norm().ln(),
                    arg: z.arg(),
                })
            }
        }
    }

    /// `m(lambda)` itself.
    pub fn laplace(&self, lambda: Complex64) -> LaplaceValue {
        if !self.domain().contains(lambda.re) {
            return LaplaceValue::Divergent;
        }
        let z = match self {
            OffspringModel::GaussianBinary => 2.0 * (lambda * lambda * 0.5).exp(),
            OffspringModel::LatticePathological => {
                let reduced = Complex64::new(lambda.re, lambda.im.rem_euclid(TAU));
                let e = (-reduced).exp();
                e / (1.0 - e)
            }
            OffspringModel::Table(t) => {
                let mut acc = crate::sums::NeumaierComplex::new();
                for &(p, x) in &t.data.atoms {
                    acc.add(p * (-lambda * x).exp());
                }
                acc.value()
            }
        };
        LaplaceValue::Finite(z)
    }

    /// Monte Carlo estimate of `m(lambda)` over `reps` fresh samples.
    pub fn laplace_mc(&self, lambda: Complex64, reps: u64, rng: &mut ChaCha8Rng) -> ComplexEstimate {
        let mut sum = crate::sums::NeumaierComplex::new();
        let mut sq_re = NeumaierSum::new();
        let mut sq_im = NeumaierSum::new();
        let mut buf = Vec::new();
        for _ in 0..reps {
            self.sample_groups_into(rng, &mut buf);
            let mut draw = Complex64::new(0.0, 0.0);
            for &(x, c) in &buf {
                draw += c as f64 * (-lambda * x).exp();
            }
            sum.add(draw);
            sq_re.add(draw.re * draw.re);
            sq_im.add(draw.im * draw.im);
        }
        let n = reps as f64;
        let mean = sum.value() / n;
        let var = |sq: f64, m: f64| ((sq / n - m * m).max(0.0)) * n / (n - 1.0);
        ComplexEstimate {
            mean,
            stderr_re: (var(sq_re.value(), mean.re) / n).sqrt(),
            stderr_im: (var(sq_im.value(), mean.im) / n).sqrt(),
            reps,
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut r = x.rem_euclid(TAU);
    if r > std::f64::consts::PI {
        r -= TAU;
    }
    // rem_euclid can return TAU itself when x is a tiny negative number.
    if r <= -std::f64::consts::PI {
        r += TAU;
    }
    r
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let shift = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = NeumaierSum::new();
    for t in terms {
        acc.add((t - shift).exp());
    }
    shift + acc.value().ln()
}

/// Returns `(sum w*(-x), sum w)` for tilt weights `w = p e^{-s x}`, scaled to
/// avoid overflow; the ratio is `m'(s)/m(s)`.
fn tilted_sums(atoms: &[(f64, f64)], s: f64) -> (f64, f64) {
    let shift = atoms
        .iter()
        .map(|&(p, x)| p.ln() - s * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = NeumaierSum::new();
    let mut den = NeumaierSum::new();
    for &(p, x) in atoms {
        let w = (p.ln() - s * x - shift).exp();
        num.add(w * (-x));
        den.add(w);
    }
    (num.value(), den.value())
}
