//! Matrix-weighted branching: similarity weights, the vector martingale
//! `Z_n w`, and the correspondence with the complex engine.
//!
//! A similarity is a positive scale times an orthogonal factor. In dimension
//! two the orthogonal factor is a rotation, optionally followed by the
//! reflection `diag(1, -1)`, so the group law stays in parameter form and
//! never loses the exact operator norm to rounding. The complex case embeds
//! via `a + bi -> [[a, -b], [b, a]]`; that map is a ring homomorphism, so a
//! similarity engine driven by the same random stream as the complex engine
//! reproduces `(Re Z_n, Im Z_n)` as `Z_n w` with `w = (1, 0)`.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::models::{wrap_angle, LogTransform, OffspringModel};
use crate::sums::NeumaierSum;

/// Residual `|M w - w|` below which `w` counts as a unit eigenvector.
pub const EIG_RESIDUAL_TOL: f64 = 1e-8;

/// Iteration cap per power-iteration start.
pub const EIG_MAX_ITERS: usize = 10_000;

/// Pivot threshold for the rank scan of `M - I`, relative to the largest
/// entry.
const RANK_PIVOT_REL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("no real eigenvector for eigenvalue 1; best residual {residual}")]
    NoUnitEigenvalue { residual: f64 },
    #[error("lambda lies outside the transform domain")]
    OutsideDomain,
    #[error("|m(lambda)| vanishes; child weights are undefined")]
    ZeroTransform,
    #[error("the model declares a mean matrix only and has no offspring law")]
    NoOffspringLaw,
}

/// A plane similarity in parameter form: `scale * R(rotation) * F^reflect`
/// with `F = diag(1, -1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Similarity {
    pub scale: f64,
    /// Wrapped to `(-pi, pi]`.
    pub rotation: f64,
    pub reflect: bool,
}

impl Similarity {
    pub fn new(scale: f64, rotation: f64, reflect: bool) -> Result<Self, SimilarityError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(SimilarityError::NonPositiveScale(scale));
        }
        Ok(Similarity {
            scale,
            rotation: wrap_angle(rotation),
            reflect,
        })
    }

    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: 0.0,
            reflect: false,
        }
    }

    /// `self * other` as maps, i.e. `self` applied after `other`.
    ///
    /// `F R(b) = R(-b) F` gives the four sign cases in one expression.
    pub fn compose(&self, other: &Similarity) -> Similarity {
        let b = if self.reflect {
            -other.rotation
        } else {
            other.rotation
        };
        Similarity {
            scale: self.scale * other.scale,
            rotation: wrap_angle(self.rotation + b),
            reflect: self.reflect != other.reflect,
        }
    }

    /// The operator norm; the orthogonal factor is an isometry.
    pub fn operator_norm(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let y = if self.reflect { -v[1] } else { v[1] };
        [
            self.scale * (c * v[0] - s * y),
            self.scale * (s * v[0] + c * y),
        ]
    }

    /// Dense row-major form, for cross-checks against matrix arithmetic.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let f = if self.reflect { -1.0 } else { 1.0 };
        [
            [self.scale * c, self.scale * -s * f],
            [self.scale * s, self.scale * c * f],
        ]
    }
}

/// General-dimension similarity kept as a dense orthogonal factor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatSimilarity {
    pub scale: f64,
    /// Row-major `dim x dim` orthogonal matrix.
    pub ortho: Vec<f64>,
    pub dim: usize,
}

impl MatSimilarity {
    pub fn new(scale: f64, ortho: Vec<f64>, dim: usize) -> Result<Self, SimilarityError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(SimilarityError::NonPositiveScale(scale));
        }
        if ortho.len() != dim * dim {
            return Err(SimilarityError::DimensionMismatch {
                left: ortho.len(),
                right: dim * dim,
            });
        }
        Ok(MatSimilarity { scale, ortho, dim })
    }

    pub fn identity(dim: usize) -> Self {
        let mut ortho = vec![0.0; dim * dim];
        for i in 0..dim {
            ortho[i * dim + i] = 1.0;
        }
        MatSimilarity {
            scale: 1.0,
            ortho,
            dim,
        }
    }

    pub fn compose(&self, other: &MatSimilarity) -> Result<MatSimilarity, SimilarityError> {
        if self.dim != other.dim {
            return Err(SimilarityError::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        let d = self.dim;
        let mut ortho = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.ortho[i * d + k];
                for j in 0..d {
                    ortho[i * d + j] += a * other.ortho[k * d + j];
                }
            }
        }
        Ok(MatSimilarity {
            scale: self.scale * other.scale,
            ortho,
            dim: d,
        })
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, SimilarityError> {
        if v.len() != self.dim {
            return Err(SimilarityError::DimensionMismatch {
                left: self.dim,
                right: v.len(),
            });
        }
        let d = self.dim;
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.ortho[i * d + j] * v[j];
            }
            out[i] = self.scale * acc;
        }
        Ok(out)
    }

    pub fn operator_norm(&self) -> f64 {
        self.scale
    }
}

/// Offspring law over similarities plus its analytic mean matrix
/// `M = E[sum_u L(u)]`.
#[derive(Debug, Clone)]
pub struct SimilarityModel {
    sampler: Option<(OffspringModel, Complex64, LogTransform)>,
    dim: usize,
    mean: Vec<f64>,
}

impl SimilarityModel {
    /// Mean-matrix-only model; supports eigenvector work but not sampling.
    pub fn with_mean_matrix(mean: Vec<f64>, dim: usize) -> Result<Self, SimilarityError> {
        if mean.len() != dim * dim {
            return Err(SimilarityError::DimensionMismatch {
                left: mean.len(),
                right: dim * dim,
            });
        }
        Ok(SimilarityModel {
            sampler: None,
            dim,
            mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `dim x dim` mean matrix.
    pub fn mean_matrix(&self) -> &[f64] {
        &self.mean
    }

    /// Offspring in `(similarity, count)` groups; `false` for mean-only
    /// models. Consumes exactly the draws of the underlying displacement
    /// sampler, so a stream shared with the complex engine stays aligned.
    pub fn sample_children_into(
        &self,
        rng: &mut ChaCha8Rng,
        buf: &mut Vec<(Similarity, u64)>,
    ) -> bool {
        let Some((base, lambda, lt)) = &self.sampler else {
            return false;
        };
        let mut groups = Vec::new();
        base.sample_groups_into(rng, &mut groups);
        buf.clear();
        for &(x, c) in &groups {
            let sim = Similarity {
                scale: (-lambda.re * x - lt.log_abs).exp(),
                rotation: wrap_angle(-lambda.im * x - lt.arg),
                reflect: false,
            };
            buf.push((sim, c));
        }
        true
    }

    /// Dimension of the eigenspace for eigenvalue 1, as `dim - rank(M - I)`
    /// under a relative pivot threshold.
    pub fn unit_eigenspace_dim(&self) -> usize {
        let d = self.dim;
        let mut a: Vec<f64> = self.mean.clone();
        for i in 0..d {
            a[i * d + i] -= 1.0;
        }
        let largest = a.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let tol = RANK_PIVOT_REL * largest.max(1.0);
        let mut rank = 0;
        for col in 0..d {
            let pivot = (rank..d).max_by(|&r, &s| {
                a[r * d + col]
                    .abs()
                    .partial_cmp(&a[s * d + col].abs())
                    .unwrap()
            });
            let Some(p) = pivot else { break };
            if a[p * d + col].abs() <= tol {
                continue;
            }
            for j in 0..d {
                a.swap(p * d + j, rank * d + j);
            }
            for r in rank + 1..d {
                let factor = a[r * d + col] / a[rank * d + col];
                for j in 0..d {
                    a[r * d + j] -= factor * a[rank * d + j];
                }
            }
            rank += 1;
        }
        d - rank
    }
}

/// Realizes a complex parameter as a plane-similarity model: each child
/// weight `e^{-lambda x} / m(lambda)` becomes a rotation-scaling. The mean of
/// the child weights is exactly 1, so `M` is declared as the identity.
pub fn complex_to_similarity(
    model: &OffspringModel,
    lambda: Complex64,
) -> Result<SimilarityModel, SimilarityError> {
    let lt = model
        .log_transform(lambda)
        .ok_or(SimilarityError::OutsideDomain)?;
    if !lt.log_abs.is_finite() {
        return Err(SimilarityError::ZeroTransform);
    }
    Ok(SimilarityModel {
        sampler: Some((model.clone(), lambda, lt)),
        dim: 2,
        mean: vec![1.0, 0.0, 0.0, 1.0],
    })
}

/// Unit vector `w` with `|M w - w| <=` [`EIG_RESIDUAL_TOL`].
///
/// Power iteration on `sigma I - (M-I)^T (M-I)` drives the iterate toward
/// the smallest singular direction of `M - I`. Starts are deterministic:
/// `e_1`, then the normalized all-ones vector, then the remaining basis
/// vectors, so a start orthogonal to the eigenspace cannot trap the search.
pub fn mean_matrix_eigvec(model: &SimilarityModel) -> Result<Vec<f64>, SimilarityError> {
    let d = model.dim;
    let m = &model.mean;
    let residual = |v: &[f64]| -> f64 {
        let mut r2 = 0.0;
        for i in 0..d {
            let mut mv = 0.0;
            for j in 0..d {
                mv += m[i * d + j] * v[j];
            }
            let diff = mv - v[i];
            r2 += diff * diff;
        }
        r2.sqrt()
    };
    // K = (M-I)^T (M-I), symmetric positive semidefinite.
    let mut shifted = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut k = 0.0;
            for r in 0..d {
                let ri = m[r * d + i] - if r == i { 1.0 } else { 0.0 };
                let rj = m[r * d + j] - if r == j { 1.0 } else { 0.0 };
                k += ri * rj;
            }
            shifted[i * d + j] = -k;
        }
    }
    let sigma = 1.0
        + (0..d)
            .map(|i| (0..d).map(|j| shifted[i * d + j].abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
    for i in 0..d {
        shifted[i * d + i] += sigma;
    }

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    for s in 0..=d {
        let mut v = vec![0.0; d];
        if s == 1 {
            v.fill(1.0 / (d as f64).sqrt());
        } else {
            v[if s == 0 { 0 } else { s - 1 }] = 1.0;
        }
        starts.push(v);
    }
    starts.dedup();

    let mut best = f64::INFINITY;
    for start in starts {
        let mut v = start;
        for _ in 0..EIG_MAX_ITERS {
            let r = residual(&v);
            best = best.min(r);
            if r <= EIG_RESIDUAL_TOL {
                // Fix the sign so repeated calls agree: largest component
                // positive.
                let lead = v
                    .iter()
                    .cloned()
                    .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if lead < 0.0 {
                    for x in &mut v {
                        *x = -*x;
                    }
                }
                return Ok(v);
            }
            let mut next = vec![0.0; d];
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += shifted[i * d + j] * v[j];
                }
                next[i] = acc;
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut next {
                *x /= norm;
            }
            v = next;
        }
    }
    Err(SimilarityError::NoUnitEigenvalue { residual: best })
}

/// One generation of accumulated similarity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SimGeneration {
    pub n: u32,
    pub weights: Vec<Similarity>,
}

impl SimGeneration {
    pub fn root() -> Self {
        SimGeneration {
            n: 0,
            weights: vec![Similarity::identity()],
        }
    }

    pub fn population(&self) -> u64 {
        self.weights.len() as u64
    }
}

/// `Z_n w = sum_u L(u) w`, compensated per component.
pub fn vector_martingale(gen: &SimGeneration, w: [f64; 2]) -> [f64; 2] {
    let mut acc = [NeumaierSum::new(), NeumaierSum::new()];
    for sim in &gen.weights {
        let lw = sim.apply(w);
        acc[0].add(lw[0]);
        acc[1].add(lw[1]);
    }
    [acc[0].value(), acc[1].value()]
}

/// `sum_u scale(u)^alpha`; matches the complex engine's `W_n` because the
/// operator norm of a similarity is its scale.
pub fn scale_moment(gen: &SimGeneration, alpha: f64) -> f64 {
    let mut acc = NeumaierSum::new();
    for sim in &gen.weights {
        acc.add(sim.scale.powf(alpha));
    }
    acc.value()
}

/// Forward stepper for sampled similarity models.
#[derive(Debug, Clone)]
pub struct SimilarityEngine {
    model: SimilarityModel,
}

impl SimilarityEngine {
    pub fn new(model: SimilarityModel) -> Result<Self, SimilarityError> {
        if model.sampler.is_none() {
            return Err(SimilarityError::NoOffspringLaw);
        }
        Ok(SimilarityEngine { model })
    }

    pub fn model(&self) -> &SimilarityModel {
        &self.model
    }

    /// Per-parent draw order matches the complex engine's sequential step,
    /// so cloned streams keep both engines on the same tree.
    pub fn step(&self, gen: &SimGeneration, rng: &mut ChaCha8Rng) -> SimGeneration {
        let mut buf = Vec::new();
        let mut out = SimGeneration {
            n: gen.n + 1,
            weights: Vec::new(),
        };
        for parent in &gen.weights {
            self.model.sample_children_into(rng, &mut buf);
            for &(child, c) in &buf {
                let acc = parent.compose(&child);
                for _ in 0..c {
                    out.weights.push(acc);
                }
            }
        }
        out
    }
}
