//! Verdicts over trace ensembles.
//!
//! Almost-sure convergence is not observable from finitely many finite
//! traces. The `Converged` verdict is an operational surrogate: replicate
//! medians of the increments `|Z_n - Z_{n-k}|` must trend downward
//! (one-sided Mann-Kendall at the 5% level) while the fitted growth of
//! `E|Z_n - 1|^p` over the final half of the generations stays flat. The
//! `Diverged` verdict needs only provable growth: the slope's confidence
//! interval must sit above a positive floor. The gates are separated
//! (0.05 vs 0.1) so noise cannot flip a run between verdicts.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::models::{wrap_angle, OffspringModel};
use crate::rngutil::substream;
use crate::simulator::{martingale, BrwEngine, Generation, MartingaleTrace, SimError};
use crate::sums::{NeumaierComplex, NeumaierSum};

/// Minimum ensemble shape for a verdict.
pub const MIN_REPS: usize = 100;
pub const MIN_GENS: usize = 12;

/// One-sided 5% gate on the Mann-Kendall statistic.
pub const MK_Z_5PCT: f64 = 1.645;

/// `Converged` requires the slope CI to stay below this.
pub const SLOPE_FLAT_MAX: f64 = 0.05;

/// `Diverged` requires the slope CI to stay above this.
pub const SLOPE_GROWTH_MIN: f64 = 0.1;

/// Moment level below which the ensemble counts as the constant martingale.
const DEGENERATE_MOMENT_EPS: f64 = 1e-12;

/// Default threshold for the tail-mass column `E[|Z_n|^p 1{|Z_n|^p > T}]`.
pub const UI_TAIL_THRESHOLD: f64 = 10.0;

/// Permutations used for the energy-distance p-value; the smallest
/// reportable p is `1 / (ENERGY_PERMUTATIONS + 1)`.
pub const ENERGY_PERMUTATIONS: usize = 199;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("need at least {MIN_REPS} replicates and {MIN_GENS} generations, got {reps} x {gens}")]
    InsufficientData { reps: usize, gens: usize },
    #[error("moment order must exceed 1, got {0}")]
    MomentOrder(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Converged,
    Diverged,
    Indeterminate,
}

/// Tie-corrected Mann-Kendall trend statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannKendall {
    /// `sum_{i<j} sign(x_j - x_i)`.
    pub s: i64,
    /// Continuity-corrected normal score; positive means upward trend.
    pub z: f64,
}

pub fn mann_kendall(values: &[f64]) -> MannKendall {
    let n = values.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match values[j].partial_cmp(&values[i]).unwrap() {
                core::cmp::Ordering::Greater => 1,
                core::cmp::Ordering::Less => -1,
                core::cmp::Ordering::Equal => 0,
            };
        }
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut var = (n * (n - 1) * (2 * n + 5)) as f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = j - i;
        var -= (t * (t - 1) * (2 * t + 5)) as f64;
        i = j;
    }
    var /= 18.0;
    let z = if var <= 0.0 || s == 0 {
        0.0
    } else if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else {
        (s as f64 + 1.0) / var.sqrt()
    };
    MannKendall { s, z }
}

/// Least-squares slope of `y` on `x` with a t-based 95% confidence interval.
fn slope_with_ci(x: &[f64], y: &[f64]) -> (f64, (f64, f64)) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let df = x.len() as f64 - 2.0;
    if df <= 0.0 {
        return (slope, (f64::NEG_INFINITY, f64::INFINITY));
    }
    let se = (ss_res / df / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, df)
        .expect("valid dof")
        .inverse_cdf(0.975);
    (slope, (slope - t * se, slope + t * se))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub verdict: Verdict,
    pub p: f64,
    /// Lag used for the increment column.
    pub lag: usize,
    /// Median over replicates of `|Z_n - Z_{n-lag}|`, for `n = lag..=N`.
    pub increment_medians: Vec<f64>,
    /// Mean over replicates of `|Z_n - 1|^p`, for `n = 0..=N`.
    pub moment_curve: Vec<f64>,
    /// Mann-Kendall score of the increment medians.
    pub increment_trend: MannKendall,
    /// Fitted log-log growth of the moment curve over the final half.
    pub growth_slope: f64,
    pub slope_ci: (f64, f64),
    /// `E[|Z_N|^p 1{|Z_N|^p > t}]` at `t = `[`UI_TAIL_THRESHOLD`].
    pub tail_mass: f64,
    /// The ensemble is the constant martingale up to rounding.
    pub degenerate: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Scores an ensemble of equal-length traces against the convergence and
/// divergence gates at moment order `p`.
pub fn convergence_verdict(
    traces: &[MartingaleTrace],
    p: f64,
) -> Result<ConvergenceReport, DiagError> {
    convergence_verdict_lag(traces, p, 1)
}

pub fn convergence_verdict_lag(
    traces: &[MartingaleTrace],
    p: f64,
    lag: usize,
) -> Result<ConvergenceReport, DiagError> {
    if !(p > 1.0) {
        return Err(DiagError::MomentOrder(p));
    }
    let reps = traces.len();
    let gens = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    let gens = gens.saturating_sub(1);
    if reps < MIN_REPS || gens < MIN_GENS.max(lag) {
        return Err(DiagError::InsufficientData { reps, gens });
    }

    let mut increment_medians = Vec::with_capacity(gens + 1 - lag);
    for n in lag..=gens {
        let mut v: Vec<f64> = traces
            .iter()
            .map(|t| (t.rows[n].z - t.rows[n - lag].z).norm())
            .collect();
        increment_medians.push(median(&mut v));
    }
    let moment_curve: Vec<f64> = (0..=gens)
        .map(|n| {
            traces
                .iter()
                .map(|t| (t.rows[n].z - Complex64::new(1.0, 0.0)).norm().powf(p))
                .sum::<f64>()
                / reps as f64
        })
        .collect();
    let tail_mass = traces
        .iter()
        .map(|t| {
            let v = t.rows[gens].z.norm().powf(p);
            if v > UI_TAIL_THRESHOLD {
                v
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / reps as f64;

    let degenerate = moment_curve.iter().all(|&m| m <= DEGENERATE_MOMENT_EPS);
    if degenerate {
        return Ok(ConvergenceReport {
            verdict: Verdict::Converged,
            p,
            lag,
            increment_medians,
            moment_curve,
            increment_trend: MannKendall { s: 0, z: 0.0 },
            growth_slope: 0.0,
            slope_ci: (0.0, 0.0),
            tail_mass,
            degenerate,
        });
    }

    let trend = mann_kendall(&increment_medians);
    let half = gens / 2;
    let (x, y): (Vec<f64>, Vec<f64>) = (half..=gens)
        .filter(|&n| moment_curve[n] > 0.0)
        .map(|n| ((n as f64).ln(), moment_curve[n].ln()))
        .unzip();
    let (slope, ci) = slope_with_ci(&x, &y);

    let verdict = if ci.0 >= SLOPE_GROWTH_MIN {
        Verdict::Diverged
    } else if trend.z <= -MK_Z_5PCT && ci.1 <= SLOPE_FLAT_MAX {
        Verdict::Converged
    } else {
        Verdict::Indeterminate
    };
    Ok(ConvergenceReport {
        verdict,
        p,
        lag,
        increment_medians,
        moment_curve,
        increment_trend: trend,
        growth_slope: slope,
        slope_ci: ci,
        tail_mass,
        degenerate,
    })
}

/// Empirical survival table of `|Z_n|` over replicates.
#[derive(Debug, Clone, Serialize)]
pub struct TailSurvey {
    pub t_grid: Vec<f64>,
    /// `survival[n][i] = P(|Z_n| > t_grid[i])`.
    pub survival: Vec<Vec<f64>>,
    /// Log-log slope over the final generation's positive survival values;
    /// absent when fewer than two grid points survive.
    pub tail_slope: Option<f64>,
    /// Slope shallower than -1, i.e. heavier than the bound the limit law
    /// satisfies. Informational, not a gate.
    pub heavy_tail: bool,
}

pub fn tail_survey(traces: &[MartingaleTrace], t_grid: &[f64]) -> TailSurvey {
    let reps = traces.len();
    let gens = traces
        .iter()
        .map(|t| t.rows.len())
        .min()
        .unwrap_or(0)
        .saturating_sub(1);
    let mut survival = Vec::with_capacity(gens + 1);
    for n in 0..=gens {
        let row: Vec<f64> = t_grid
            .iter()
            .map(|&t| {
                traces.iter().filter(|tr| tr.rows[n].z.norm() > t).count() as f64 / reps as f64
            })
            .collect();
        survival.push(row);
    }
    let tail_slope = survival.last().and_then(|row| {
        let (x, y): (Vec<f64>, Vec<f64>) = t_grid
            .iter()
            .zip(row)
            .filter(|&(_, &s)| s > 0.0)
            .map(|(&t, &s)| (t.ln(), s.ln()))
            .unzip();
        if x.len() < 2 {
            None
        } else {
            Some(slope_with_ci(&x, &y).0)
        }
    });
    TailSurvey {
        t_grid: t_grid.to_vec(),
        survival,
        tail_slope,
        heavy_tail: tail_slope.is_some_and(|s| s > -1.0),
    }
}

/// Energy-distance two-sample comparison of complex samples, with a
/// permutation p-value.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FixedPointReport {
    /// U-statistic energy distance `2 E d(A,B) - E d(A,A') - E d(B,B')`.
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Independent replicates of `Z_n`, one sequential engine pass per
/// replicate, parallel over replicates.
pub fn martingale_samples(
    model: &OffspringModel,
    lambda: Complex64,
    n: u32,
    reps: usize,
    seed: u64,
    branch: u64,
) -> Result<Vec<Complex64>, DiagError> {
    let engine = BrwEngine::new(model.clone(), lambda)?;
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, &[branch, r as u64]);
            let mut gen = Generation::root();
            for _ in 0..n {
                gen = engine.step(&gen, &mut rng)?;
            }
            Ok(martingale(&gen))
        })
        .collect()
}

/// Replicates of the one-step composition `sum_{|u|=1} L(u) [Z_{n-1}]_u`:
/// a fresh first generation, then an independent depth-`n-1` run per child.
fn composed_samples(
    model: &OffspringModel,
    lambda: Complex64,
    n: u32,
    reps: usize,
    seed: u64,
    branch: u64,
) -> Result<Vec<Complex64>, DiagError> {
    let engine = BrwEngine::new(model.clone(), lambda)?;
    let lt = model.log_transform(lambda).expect("engine checked domain");
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, &[branch, r as u64]);
            let mut groups = Vec::new();
            model.sample_groups_into(&mut rng, &mut groups);
            let mut total = NeumaierComplex::new();
            let mut child = 0u64;
            for &(x, c) in &groups {
                let l = Complex64::from_polar(
                    (-lambda.re * x - lt.log_abs).exp(),
                    wrap_angle(-lambda.im * x - lt.arg),
                );
                for _ in 0..c {
                    child += 1;
                    let mut sub = substream(seed, &[branch, r as u64, child]);
                    let mut gen = Generation::root();
                    for _ in 0..n.saturating_sub(1) {
                        gen = engine.step(&gen, &mut sub)?;
                    }
                    total.add(l * martingale(&gen));
                }
            }
            Ok(total.value())
        })
        .collect()
}

/// Pairwise-distance U-statistic sums for a label split at `na`.
fn energy_statistic(dist: &[f64], n: usize, labels: &[usize], na: usize) -> f64 {
    let mut s_aa = NeumaierSum::new();
    let mut s_bb = NeumaierSum::new();
    let mut s_ab = NeumaierSum::new();
    for i in 0..n {
        let ai = labels[i] < na;
        for j in i + 1..n {
            let d = dist[i * n + j];
            match (ai, labels[j] < na) {
                (true, true) => s_aa.add(d),
                (false, false) => s_bb.add(d),
                _ => s_ab.add(d),
            }
        }
    }
    let na = na as f64;
    let nb = labels.len() as f64 - na;
    2.0 * s_ab.value() / (na * nb)
        - s_aa.value() / (na * (na - 1.0) / 2.0)
        - s_bb.value() / (nb * (nb - 1.0) / 2.0)
}

/// Two-sample energy test of equality in distribution over the plane.
pub fn energy_two_sample(
    a: &[Complex64],
    b: &[Complex64],
    seed: u64,
) -> Result<FixedPointReport, DiagError> {
    if a.len() < MIN_REPS || b.len() < MIN_REPS {
        return Err(DiagError::InsufficientData {
            reps: a.len().min(b.len()),
            gens: 0,
        });
    }
    let pooled: Vec<Complex64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (pooled[i] - pooled[j]).norm();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let identity: Vec<usize> = (0..n).collect();
    let observed = energy_statistic(&dist, n, &identity, a.len());
    let exceed: usize = (0..ENERGY_PERMUTATIONS)
        .into_par_iter()
        .map(|k| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut substream(seed, &[k as u64]));
            let stat = energy_statistic(&dist, n, &perm, a.len());
            usize::from(stat >= observed)
        })
        .sum();
    Ok(FixedPointReport {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (ENERGY_PERMUTATIONS + 1) as f64,
        permutations: ENERGY_PERMUTATIONS,
    })
}

/// Distributional self-consistency of the martingale at depth `n`: `Z_n`
/// against one branching step composed with independent depth-`n-1` copies.
pub fn fixed_point_selfconsistency(
    model: &OffspringModel,
    lambda: Complex64,
    n: u32,
    reps: usize,
    seed: u64,
) -> Result<FixedPointReport, DiagError> {
    let a = martingale_samples(model, lambda, n, reps, seed, 0)?;
    let b = composed_samples(model, lambda, n, reps, seed, 1)?;
    energy_two_sample(&a, &b, seed)
}
