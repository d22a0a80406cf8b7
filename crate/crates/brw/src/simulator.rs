//! Forward particle engine for the branching random walk.
//!
//! A [`Generation`] holds one synchronous generation as flat arrays. Lineage
//! weights are tracked as log-magnitude and phase separately, updated
//! incrementally per step by `(-theta*X - log|m|, -eta*X - arg m)`; near the
//! phase boundary the magnitudes span many decades, and a complex
//! representation would lose them to cancellation.
//!
//! The truncated companion martingale kills a lineage (for the truncated
//! stream only; the particles keep breeding for the plain one) at the first
//! generation its weight exceeds `t`. Writing `A_n` for the still-unkilled
//! particles and `C_k` for the sum of `L(v)` over children killed at step `k`,
//!
//! ```text
//! Z_n^{(t)} = sum_{v in A_n} L(v) + sum_{k<=n} C_k,
//! ```
//!
//! which telescopes the truncated martingale differences started from
//! `Z_0^{(t)} = 1`. On a run where no weight ever exceeds `t` the kill sums
//! are empty and the alive sum visits exactly the same terms in the same
//! array order as `Z_n`, so the two are equal bit for bit, not just within
//! rounding.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{wrap_angle, LogTransform, OffspringModel};
use crate::rngutil::substream;
use crate::sums::{NeumaierComplex, NeumaierSum};
use crate::{complex_as_pair, complex_opt_as_pair, pair_as_complex, pair_as_complex_opt, Estimate};

/// Default hard bound on a generation's population.
pub const DEFAULT_POP_CAP: u64 = 20_000_000;

/// Lineages below `SUP_FLOOR_FRAC * t` are abandoned by the tail estimator.
pub const SUP_FLOOR_FRAC: f64 = 1e-6;

/// Parents per parallel sampling chunk.
const STEP_CHUNK: usize = 8192;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("lambda lies outside the transform domain")]
    OutsideDomain,
    #[error("|m(lambda)| vanishes; weights are undefined")]
    ZeroTransform,
    #[error("population {population} exceeds the cap {cap} at generation {generation}")]
    PopulationCapExceeded {
        generation: u32,
        population: u64,
        cap: u64,
    },
    #[error("truncation threshold must be >= 1, got {0}")]
    TruncationBelowOne(f64),
    #[error("the truncated stream is exact only in unbiased mode; disable thinning")]
    ThinnedTruncation,
    #[error("abandonment floor must satisfy 0 < floor < t, got {floor} at t = {t}")]
    FloorOutOfRange { floor: f64, t: f64 },
}

/// One synchronous generation of the particle system.
///
/// All arrays share one length. In unbiased runs the accumulated log-weight
/// reconstructs from the position: `logweights[i] = -theta*positions[i] -
/// n*log|m(lambda)|` up to accumulated rounding (thinning adds compensating
/// multipliers on top, breaking that identity on purpose).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub n: u32,
    pub positions: Vec<f64>,
    pub logweights: Vec<f64>,
    pub phases: Vec<f64>,
    /// Not yet killed by the truncation rule; all true when not truncating.
    pub alive: Vec<bool>,
}

impl Generation {
    /// The single ancestor at the origin with unit weight.
    pub fn root() -> Self {
        Generation {
            n: 0,
            positions: vec![0.0],
            logweights: vec![0.0],
            phases: vec![0.0],
            alive: vec![true],
        }
    }

    pub fn population(&self) -> u64 {
        self.positions.len() as u64
    }
}

/// `Z_n`: compensated sum of `exp(logweight) * (cos phase, sin phase)`.
pub fn martingale(gen: &Generation) -> Complex64 {
    let mut acc = NeumaierComplex::new();
    for (lw, ph) in gen.logweights.iter().zip(&gen.phases) {
        acc.add(Complex64::from_polar(lw.exp(), *ph));
    }
    acc.value()
}

/// `W_n = sum |L(u)|^alpha`, compensated.
pub fn w_martingale(gen: &Generation, alpha: f64) -> f64 {
    let mut acc = NeumaierSum::new();
    for lw in &gen.logweights {
        acc.add((alpha * lw).exp());
    }
    acc.value()
}

/// Alive-only part of the truncated martingale, in array order.
fn truncated_partial(gen: &Generation) -> Complex64 {
    let mut acc = NeumaierComplex::new();
    for i in 0..gen.positions.len() {
        if gen.alive[i] {
            acc.add(Complex64::from_polar(gen.logweights[i].exp(), gen.phases[i]));
        }
    }
    acc.value()
}

/// Largest discrepancy between accumulated and position-reconstructed
/// log-weights; meaningful for unbiased runs only.
pub fn weight_reconstruction_error(gen: &Generation, lambda: Complex64, log_abs_m: f64) -> f64 {
    gen.positions
        .iter()
        .zip(&gen.logweights)
        .map(|(&s, &lw)| (lw - (-lambda.re * s - gen.n as f64 * log_abs_m)).abs())
        .fold(0.0, f64::max)
}

/// One per-generation record of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub rep: u64,
    pub n: u32,
    #[serde(serialize_with = "complex_as_pair", deserialize_with = "pair_as_complex")]
    pub z: Complex64,
    pub w: f64,
    #[serde(
        serialize_with = "complex_opt_as_pair",
        deserialize_with = "pair_as_complex_opt"
    )]
    pub zt: Option<Complex64>,
    pub pop: u64,
}

/// One replicate's martingale history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleTrace {
    pub rep: u64,
    pub seed: u64,
    /// Thinning fired at least once: weights carry compensating multipliers
    /// and the trace is only suitable for coarse diagnostics.
    pub biased: bool,
    pub rows: Vec<TraceRow>,
}

impl MartingaleTrace {
    /// One JSON object per row, newline separated.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gens: u32,
    pub reps: u64,
    /// Exponent for the companion `W_n` column.
    pub alpha: f64,
    /// Truncation threshold `t`; enables the `zt` column.
    pub truncate: Option<f64>,
    pub cap: u64,
    /// Subsample overfull generations with compensating weight multipliers
    /// instead of failing at the cap.
    pub thinning: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gens: 10,
            reps: 1,
            alpha: 2.0,
            truncate: None,
            cap: DEFAULT_POP_CAP,
            thinning: false,
            seed: 0,
        }
    }
}

/// The engine binds a model and a parameter after checking the transform.
#[derive(Debug, Clone)]
pub struct BrwEngine {
    model: OffspringModel,
    lambda: Complex64,
    lt: LogTransform,
    cap: u64,
}

struct ChunkDraw {
    /// `(parent index, displacement, count)` in draw order.
    groups: Vec<(u32, f64, u64)>,
    children: u64,
}

struct ChunkChildren {
    positions: Vec<f64>,
    logweights: Vec<f64>,
    phases: Vec<f64>,
    alive: Vec<bool>,
    killed: Complex64,
}

impl BrwEngine {
    pub fn new(model: OffspringModel, lambda: Complex64) -> Result<Self, SimError> {
        let lt = model.log_transform(lambda).ok_or(SimError::OutsideDomain)?;
        if !lt.log_abs.is_finite() {
            return Err(SimError::ZeroTransform);
        }
        Ok(BrwEngine {
            model,
            lambda,
            lt,
            cap: DEFAULT_POP_CAP,
        })
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.cap = cap;
        self
    }

    pub fn model(&self) -> &OffspringModel {
        &self.model
    }

    pub fn lambda(&self) -> Complex64 {
        self.lambda
    }

    pub fn log_abs_m(&self) -> f64 {
        self.lt.log_abs
    }

    /// One generation step drawing from the caller's stream.
    ///
    /// Kill flags are inherited but no new kills happen; truncated stepping is
    /// a run-level concern.
    pub fn step(&self, gen: &Generation, rng: &mut ChaCha8Rng) -> Result<Generation, SimError> {
        let mut buf = Vec::new();
        let mut out = Generation {
            n: gen.n + 1,
            positions: Vec::new(),
            logweights: Vec::new(),
            phases: Vec::new(),
            alive: Vec::new(),
        };
        for i in 0..gen.positions.len() {
            self.model.sample_groups_into(rng, &mut buf);
            for &(x, c) in &buf {
                if out.population() + c > self.cap {
                    return Err(SimError::PopulationCapExceeded {
                        generation: gen.n + 1,
                        population: out.population() + c,
                        cap: self.cap,
                    });
                }
                self.push_children(gen, i, x, c, None, 0.0, &mut out, &mut NeumaierComplex::new());
            }
        }
        Ok(out)
    }

    /// Appends `c` identical children of parent `i` at displacement `x`.
    #[allow(clippy::too_many_arguments)]
    fn push_children(
        &self,
        gen: &Generation,
        i: usize,
        x: f64,
        c: u64,
        log_t: Option<f64>,
        extra_logweight: f64,
        out: &mut Generation,
        kills: &mut NeumaierComplex,
    ) {
        let pos = gen.positions[i] + x;
        let lw = gen.logweights[i] + (-self.lambda.re * x - self.lt.log_abs) + extra_logweight;
        let ph = wrap_angle(gen.phases[i] + (-self.lambda.im * x - self.lt.arg));
        let parent_alive = gen.alive[i];
        let alive = match log_t {
            Some(log_t) => parent_alive && lw <= log_t,
            None => parent_alive,
        };
        if parent_alive && !alive {
            let contribution = Complex64::from_polar(lw.exp(), ph);
            for _ in 0..c {
                kills.add(contribution);
            }
        }
        for _ in 0..c {
            out.positions.push(pos);
            out.logweights.push(lw);
            out.phases.push(ph);
            out.alive.push(alive);
        }
    }

    /// Deterministic parallel step: phase A samples offspring group counts in
    /// parent chunks with per-chunk substreams, phase B materializes children
    /// (after the cap/thinning decision, so an overfull generation is never
    /// allocated).
    fn step_chunked(
        &self,
        gen: &Generation,
        seed: u64,
        rep: u64,
        g: u32,
        log_t: Option<f64>,
        thinning: bool,
    ) -> Result<(Generation, Complex64, bool), SimError> {
        let parents = gen.positions.len();
        let chunks = parents.div_ceil(STEP_CHUNK);
        let draws: Vec<ChunkDraw> = (0..chunks)
            .into_par_iter()
            .map(|ci| {
                let mut rng = substream(seed, &[rep, g as u64, ci as u64, 0]);
                let lo = ci * STEP_CHUNK;
                let hi = ((ci + 1) * STEP_CHUNK).min(parents);
                let mut groups = Vec::with_capacity(2 * (hi - lo));
                let mut children = 0u64;
                let mut buf = Vec::new();
                for i in lo..hi {
                    self.model.sample_groups_into(&mut rng, &mut buf);
                    for &(x, c) in &buf {
                        groups.push((i as u32, x, c));
                        children += c;
                    }
                }
                ChunkDraw { groups, children }
            })
            .collect();

        let total: u64 = draws.iter().map(|d| d.children).sum();
        let thin_q = if total > self.cap {
            if !thinning {
                return Err(SimError::PopulationCapExceeded {
                    generation: g,
                    population: total,
                    cap: self.cap,
                });
            }
            Some((self.cap / 2) as f64 / total as f64)
        } else {
            None
        };

        let built: Vec<ChunkChildren> = draws
            .into_par_iter()
            .enumerate()
            .map(|(ci, draw)| {
                let mut out = Generation {
                    n: g,
                    positions: Vec::new(),
                    logweights: Vec::new(),
                    phases: Vec::new(),
                    alive: Vec::new(),
                };
                let mut kills = NeumaierComplex::new();
                let mut thin_rng = substream(seed, &[rep, g as u64, ci as u64, 1]);
                for &(pi, x, c) in &draw.groups {
                    let (kept, extra) = match thin_q {
                        Some(q) => {
                            let kept = Binomial::new(c, q)
                                .expect("q in (0,1)")
                                .sample(&mut thin_rng);
                            (kept, -q.ln())
                        }
                        None => (c, 0.0),
                    };
                    if kept > 0 {
                        self.push_children(
                            gen, pi as usize, x, kept, log_t, extra, &mut out, &mut kills,
                        );
                    }
                }
                ChunkChildren {
                    positions: out.positions,
                    logweights: out.logweights,
                    phases: out.phases,
                    alive: out.alive,
                    killed: kills.value(),
                }
            })
            .collect();

        let size: usize = built.iter().map(|c| c.positions.len()).sum();
        let mut next = Generation {
            n: g,
            positions: Vec::with_capacity(size),
            logweights: Vec::with_capacity(size),
            phases: Vec::with_capacity(size),
            alive: Vec::with_capacity(size),
        };
        let mut killed = NeumaierComplex::new();
        for c in built {
            next.positions.extend_from_slice(&c.positions);
            next.logweights.extend_from_slice(&c.logweights);
            next.phases.extend_from_slice(&c.phases);
            next.alive.extend_from_slice(&c.alive);
            killed.add(c.killed);
        }
        Ok((next, killed.value(), thin_q.is_some()))
    }

    fn replicate(&self, rep: u64, cfg: &RunConfig) -> Result<MartingaleTrace, SimError> {
        let log_t = cfg.truncate.map(f64::ln);
        let mut gen = Generation::root();
        let mut kill_acc = NeumaierComplex::new();
        let mut biased = false;
        let mut rows = Vec::with_capacity(cfg.gens as usize + 1);
        let record = |gen: &Generation, kill_acc: &NeumaierComplex, rep: u64| TraceRow {
            rep,
            n: gen.n,
            z: martingale(gen),
            w: w_martingale(gen, cfg.alpha),
            zt: log_t.map(|_| truncated_partial(gen) + kill_acc.value()),
            pop: gen.population(),
        };
        rows.push(record(&gen, &kill_acc, rep));
        for g in 1..=cfg.gens {
            let (next, killed, thinned) =
                self.step_chunked(&gen, cfg.seed, rep, g, log_t, cfg.thinning)?;
            kill_acc.add(killed);
            biased |= thinned;
            gen = next;
            rows.push(record(&gen, &kill_acc, rep));
        }
        Ok(MartingaleTrace {
            rep,
            seed: cfg.seed,
            biased,
            rows,
        })
    }
}

/// Simulates `cfg.reps` independent replicates, parallel over replicates,
/// deterministically in `cfg.seed` regardless of thread count.
pub fn run(
    model: &OffspringModel,
    lambda: Complex64,
    cfg: &RunConfig,
) -> Result<Vec<MartingaleTrace>, SimError> {
    if let Some(t) = cfg.truncate {
        if !(t >= 1.0) {
            return Err(SimError::TruncationBelowOne(t));
        }
        if cfg.thinning {
            return Err(SimError::ThinnedTruncation);
        }
    }
    let engine = BrwEngine::new(model.clone(), lambda)?.with_cap(cfg.cap);
    (0..cfg.reps)
        .into_par_iter()
        .map(|rep| engine.replicate(rep, cfg))
        .collect()
}

/// Single-replicate run with the truncated column enabled.
pub fn truncated_run(
    model: &OffspringModel,
    lambda: Complex64,
    t: f64,
    n_max: u32,
    seed: u64,
) -> Result<MartingaleTrace, SimError> {
    let cfg = RunConfig {
        gens: n_max,
        reps: 1,
        truncate: Some(t),
        seed,
        ..RunConfig::default()
    };
    Ok(run(model, lambda, &cfg)?.pop().expect("one replicate"))
}

/// Estimates `P(sup_u |L(u)| > t)` by depth-first exploration.
///
/// Lineages are abandoned below [`SUP_FLOOR_FRAC`]` * t` or at depth `n_max`,
/// so the estimate is a lower bound of the true probability.
pub fn sup_weight_tail(
    model: &OffspringModel,
    lambda: Complex64,
    t: f64,
    reps: u64,
    n_max: u32,
    seed: u64,
) -> Result<Estimate, SimError> {
    sup_weight_tail_floored(model, lambda, t, SUP_FLOOR_FRAC * t, reps, n_max, seed)
}

/// As [`sup_weight_tail`] with an explicit abandonment floor.
///
/// Exploration cost grows exponentially in `log(t / floor)` near tangency
/// points, so a coarser floor trades a slightly smaller lower bound for a
/// bounded search: a lineage abandoned at the floor re-exceeds `t` with
/// probability on the order of `(floor / t)^alpha`.
pub fn sup_weight_tail_floored(
    model: &OffspringModel,
    lambda: Complex64,
    t: f64,
    floor: f64,
    reps: u64,
    n_max: u32,
    seed: u64,
) -> Result<Estimate, SimError> {
    let lt = model.log_transform(lambda).ok_or(SimError::OutsideDomain)?;
    if !lt.log_abs.is_finite() {
        return Err(SimError::ZeroTransform);
    }
    if !(floor > 0.0 && floor < t) {
        return Err(SimError::FloorOutOfRange { floor, t });
    }
    let log_t = t.ln();
    let log_floor = floor.ln();
    let hits: u64 = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, &[rep]);
            let mut buf = Vec::new();
            // (depth, log-weight, pending instances of this node value)
            let mut stack: Vec<(u32, f64, u64)> = vec![(0, 0.0, 1)];
            while let Some((d, lw, count)) = stack.pop() {
                if count > 1 {
                    stack.push((d, lw, count - 1));
                }
                if lw > log_t {
                    return 1u64;
                }
                if d == n_max || lw < log_floor {
                    continue;
                }
                model.sample_groups_into(&mut rng, &mut buf);
                for &(x, c) in &buf {
                    let clw = lw - lambda.re * x - lt.log_abs;
                    stack.push((d + 1, clw, c));
                }
            }
            0u64
        })
        .sum();
    let p = hits as f64 / reps as f64;
    let se = (p * (1.0 - p) / reps as f64).sqrt();
    Ok(Estimate::sampled(p, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::substream;

    const SQRT_2LOG2: f64 = 1.1774100225154747;

    fn lam(theta: f64, eta: f64) -> Complex64 {
        Complex64::new(theta, eta)
    }

    #[test]
    fn root_row_is_exact() {
        let gen = Generation::root();
        assert_eq!(martingale(&gen), Complex64::new(1.0, 0.0));
        assert_eq!(w_martingale(&gen, 1.7), 1.0);
        assert_eq!(gen.population(), 1);
    }

    #[test]
    fn unary_table_keeps_z_at_one() {
        let m = OffspringModel::table(vec![(1.0, vec![0.4])]).unwrap();
        let cfg = RunConfig {
            gens: 6,
            reps: 1,
            alpha: 1.5,
            seed: 9,
            ..RunConfig::default()
        };
        let trace = &run(&m, lam(0.8, 1.3), &cfg).unwrap()[0];
        for row in &trace.rows {
            assert_eq!(row.pop, 1);
            assert!((row.z - Complex64::new(1.0, 0.0)).norm() <= 1e-12, "{row:?}");
            assert!((row.w - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gaussian_first_step_population_is_two() {
        let e = BrwEngine::new(OffspringModel::gaussian_binary(), lam(0.5, 0.2)).unwrap();
        let mut rng = substream(1, &[0]);
        let gen = e.step(&Generation::root(), &mut rng).unwrap();
        assert_eq!(gen.population(), 2);
        assert_eq!(gen.n, 1);
    }

    #[test]
    fn two_row_table_population_matches_row() {
        let m = OffspringModel::table(vec![(0.5, vec![0.0]), (0.5, vec![0.0, 0.0])]).unwrap();
        let e = BrwEngine::new(m, lam(0.3, 0.0)).unwrap();
        for s in 0..20 {
            let mut rng = substream(s, &[0]);
            let gen = e.step(&Generation::root(), &mut rng).unwrap();
            assert!(gen.population() == 1 || gen.population() == 2);
        }
    }

    #[test]
    fn binary_at_zero_stays_within_rounding_of_one() {
        let m = OffspringModel::gaussian_binary();
        let cfg = RunConfig {
            gens: 10,
            reps: 1,
            alpha: 1.0,
            seed: 3,
            ..RunConfig::default()
        };
        let trace = &run(&m, lam(0.0, 0.0), &cfg).unwrap()[0];
        for row in &trace.rows {
            assert_eq!(row.pop, 1 << row.n);
            assert!((row.z - Complex64::new(1.0, 0.0)).norm() <= 1e-12, "{row:?}");
        }
    }

    #[test]
    fn one_step_means_match_martingale_property() {
        // Boundary point on the linear piece: E[Z_1] = 1 and E[W_1] = 1.
        let m = OffspringModel::gaussian_binary();
        let l = lam(1.0, SQRT_2LOG2 - 1.0);
        let cfg = RunConfig {
            gens: 1,
            reps: 10_000,
            alpha: SQRT_2LOG2,
            seed: 17,
            ..RunConfig::default()
        };
        let traces = run(&m, l, &cfg).unwrap();
        let re: Vec<f64> = traces.iter().map(|t| t.rows[1].z.re).collect();
        let im: Vec<f64> = traces.iter().map(|t| t.rows[1].z.im).collect();
        let w: Vec<f64> = traces.iter().map(|t| t.rows[1].w).collect();
        let (mre, sre) = crate::mean_stderr(&re);
        let (mim, sim) = crate::mean_stderr(&im);
        let (mw, sw) = crate::mean_stderr(&w);
        assert!((mre - 1.0).abs() <= 5.0 * sre, "Re mean {mre} (se {sre})");
        assert!(mim.abs() <= 5.0 * sim, "Im mean {mim} (se {sim})");
        assert!((mw - 1.0).abs() <= 5.0 * sw, "W mean {mw} (se {sw})");
    }

    #[test]
    fn accumulated_weights_match_position_reconstruction() {
        let m = OffspringModel::gaussian_binary();
        let l = lam(0.7, 0.4);
        let e = BrwEngine::new(m.clone(), l).unwrap();
        let cfg = RunConfig {
            gens: 20,
            reps: 1,
            alpha: 1.5,
            seed: 41,
            ..RunConfig::default()
        };
        let trace = &run(&m, l, &cfg).unwrap()[0];
        assert_eq!(trace.rows[20].pop, 1 << 20);
        // Rebuild the final generation through the public single-rng path to
        // get positions, then compare both stored representations.
        let mut rng = substream(41, &[99]);
        let mut gen = Generation::root();
        for _ in 0..20 {
            gen = e.step(&gen, &mut rng).unwrap();
        }
        let err = weight_reconstruction_error(&gen, l, e.log_abs_m());
        assert!(err <= 1e-9 * 20.0, "max discrepancy {err}");
    }

    #[test]
    fn truncation_with_huge_threshold_is_bitwise_equal() {
        let m = OffspringModel::gaussian_binary();
        let trace = truncated_run(&m, lam(1.0, SQRT_2LOG2 - 1.0), 1e12, 10, 7).unwrap();
        for row in &trace.rows {
            assert_eq!(row.zt.unwrap(), row.z, "generation {}", row.n);
        }
    }

    #[test]
    fn truncation_kill_accounting_matches_hand_computation() {
        // Two rows, one child each at 0 or 1; theta = 3 makes the child at 0
        // carry weight 2/(1+e^{-3}) > 1.5 and the child at 1 a small weight.
        let m = OffspringModel::table(vec![(0.5, vec![0.0]), (0.5, vec![1.0])]).unwrap();
        let l = lam(3.0, 0.0);
        let w_heavy = 2.0 / (1.0 + (-3.0_f64).exp());
        let mut seen_kill = false;
        let mut seen_pass = false;
        for seed in 0..40 {
            let trace = truncated_run(&m, l, 1.5, 2, seed).unwrap();
            let first_child_at_zero = trace.rows[1].z.re > 1.0;
            let zt1 = trace.rows[1].zt.unwrap();
            let zt2 = trace.rows[2].zt.unwrap();
            if first_child_at_zero {
                // Lineage killed at generation 1: the truncated stream keeps
                // the killed contribution and never moves again.
                seen_kill = true;
                assert!((zt1.re - w_heavy).abs() <= 1e-12);
                assert_eq!(zt1.im, 0.0);
                assert_eq!(zt2, zt1);
            } else {
                seen_pass = true;
                assert_eq!(zt1, trace.rows[1].z);
            }
        }
        assert!(seen_kill && seen_pass);
    }

    #[test]
    fn cap_fails_unbiased_and_thins_biased() {
        let m = OffspringModel::table(vec![(1.0, vec![0.1, -0.1])]).unwrap();
        let l = lam(0.2, 0.0);
        let cfg = RunConfig {
            gens: 8,
            reps: 1,
            alpha: 1.5,
            cap: 40,
            seed: 1,
            ..RunConfig::default()
        };
        match run(&m, l, &cfg) {
            Err(SimError::PopulationCapExceeded { generation, .. }) => {
                assert_eq!(generation, 6, "first generation beyond 40 particles")
            }
            other => panic!("expected cap error, got {other:?}"),
        }
        let thinned = RunConfig {
            thinning: true,
            ..cfg
        };
        let trace = &run(&m, l, &thinned).unwrap()[0];
        assert!(trace.biased);
        for row in &trace.rows {
            assert!(row.pop <= 40, "{row:?}");
        }
    }

    #[test]
    fn truncation_rejects_invalid_configs() {
        let m = OffspringModel::gaussian_binary();
        let bad_t = RunConfig {
            truncate: Some(0.5),
            ..RunConfig::default()
        };
        assert_eq!(
            run(&m, lam(0.3, 0.0), &bad_t).unwrap_err(),
            SimError::TruncationBelowOne(0.5)
        );
        let both = RunConfig {
            truncate: Some(2.0),
            thinning: true,
            ..RunConfig::default()
        };
        assert_eq!(
            run(&m, lam(0.3, 0.0), &both).unwrap_err(),
            SimError::ThinnedTruncation
        );
    }

    #[test]
    fn run_is_deterministic_and_order_stable() {
        let m = OffspringModel::gaussian_binary();
        let cfg = RunConfig {
            gens: 5,
            reps: 16,
            alpha: 1.3,
            seed: 77,
            ..RunConfig::default()
        };
        let a = run(&m, lam(0.6, 0.3), &cfg).unwrap();
        let b = run(&m, lam(0.6, 0.3), &cfg).unwrap();
        assert_eq!(a, b);
        for (k, t) in a.iter().enumerate() {
            assert_eq!(t.rep, k as u64);
        }
    }

    #[test]
    fn sup_tail_is_zero_when_weights_cannot_exceed_one() {
        let m = OffspringModel::table(vec![(1.0, vec![0.25])]).unwrap();
        let est = sup_weight_tail(&m, lam(1.0, 0.0), 1.5, 500, 30, 5).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn sup_tail_respects_the_alpha_bound_at_a_boundary_point() {
        let l = lam(1.0, SQRT_2LOG2 - 1.0);
        let m = OffspringModel::gaussian_binary();
        let est = sup_weight_tail(&m, l, 10.0, 1500, 40, 23).unwrap();
        let bound = 10f64.powf(-SQRT_2LOG2);
        assert!(
            est.value <= bound + 3.0 * est.stderr.unwrap(),
            "estimate {} vs bound {bound}",
            est.value
        );
        assert!(est.value > 0.0, "tail event should occur at t = 10");
    }

    #[test]
    fn ndjson_rows_have_the_documented_shape() {
        let m = OffspringModel::gaussian_binary();
        let trace = truncated_run(&m, lam(0.4, 0.3), 100.0, 2, 11).unwrap();
        let text = trace.to_ndjson();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"rep\":0,\"n\":0,\"z\":[1.0,"));
        assert!(first.contains("\"pop\":1"));
        let row: TraceRow = serde_json::from_str(first).unwrap();
        assert_eq!(row, trace.rows[0]);

        let cfg = RunConfig {
            gens: 1,
            reps: 1,
            seed: 2,
            ..RunConfig::default()
        };
        let plain = &run(&m, lam(0.4, 0.3), &cfg).unwrap()[0];
        let line = serde_json::to_string(&plain.rows[0]).unwrap();
        assert!(line.contains("\"zt\":null"), "{line}");
        let row: TraceRow = serde_json::from_str(&line).unwrap();
        assert_eq!(row.zt, None);
    }

    #[test]
    fn three_generation_table_law_matches_enumeration() {
        // Exhaustive tree enumeration of Z_3 for a two-row table, compared in
        // total variation against the simulated law.
        let rows = vec![(0.5, vec![0.0]), (0.5, vec![0.0, 0.0])];
        let m = OffspringModel::table(rows.clone()).unwrap();
        let l = lam(0.3, 0.7);
        let lt = m.log_transform(l).unwrap();

        // Per-child weight factors e^{-lambda x} / m(lambda).
        let factor = |x: f64| {
            Complex64::from_polar(
                (-l.re * x - lt.log_abs).exp(),
                wrap_angle(-l.im * x - lt.arg),
            )
        };
        // Distribution of the subtree sum after d more generations, starting
        // from a unit-weight particle.
        fn dist(
            d: u32,
            rows: &[(f64, Vec<f64>)],
            factor: &dyn Fn(f64) -> Complex64,
        ) -> Vec<(f64, Complex64)> {
            if d == 0 {
                return vec![(1.0, Complex64::new(1.0, 0.0))];
            }
            let sub = dist(d - 1, rows, factor);
            let mut out: Vec<(f64, Complex64)> = Vec::new();
            for (p, xs) in rows {
                // All combinations of independent child subtrees.
                let mut partial: Vec<(f64, Complex64)> =
                    vec![(*p, Complex64::new(0.0, 0.0))];
                for &x in xs {
                    let f = factor(x);
                    let mut nextp = Vec::with_capacity(partial.len() * sub.len());
                    for &(q, z) in &partial {
                        for &(qs, zs) in &sub {
                            nextp.push((q * qs, z + f * zs));
                        }
                    }
                    partial = nextp;
                }
                out.extend(partial);
            }
            // Merge identical outcomes; complex values from the same tree
            // algebra coincide bitwise.
            out.sort_by(|a, b| (a.1.re, a.1.im).partial_cmp(&(b.1.re, b.1.im)).unwrap());
            let mut merged: Vec<(f64, Complex64)> = Vec::new();
            for (p, z) in out {
                match merged.last_mut() {
                    Some((mp, mz)) if (*mz - z).norm() <= 1e-9 => *mp += p,
                    _ => merged.push((p, z)),
                }
            }
            merged
        }
        let exact = dist(3, &rows, &factor);
        let total: f64 = exact.iter().map(|e| e.0).sum();
        assert!((total - 1.0).abs() <= 1e-12);

        let cfg = RunConfig {
            gens: 3,
            reps: 100_000,
            alpha: 1.5,
            seed: 12345,
            ..RunConfig::default()
        };
        let traces = run(&m, l, &cfg).unwrap();
        let mut counts = vec![0u64; exact.len()];
        let mut unmatched = 0u64;
        for t in &traces {
            let z = t.rows[3].z;
            match exact
                .iter()
                .position(|&(_, ze)| (ze - z).norm() <= 1e-9)
            {
                Some(i) => counts[i] += 1,
                None => unmatched += 1,
            }
        }
        assert_eq!(unmatched, 0);
        let tv: f64 = exact
            .iter()
            .zip(&counts)
            .map(|(&(p, _), &c)| (p - c as f64 / cfg.reps as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.02, "total variation {tv}");
    }
}
