//! Phase-portrait rasterization and rendering.
//!
//! A raster classifies every cell center of a rectangular `lambda` grid and,
//! for the built-in models, draws the closed-form boundary curves on top:
//! the Gaussian binary model gets the circular arc `theta^2 + eta^2 = log 2`
//! (restricted to `|theta| <= sqrt(log(2)/2)`), the four tangent segments
//! `|eta| = sqrt(2 log 2) - |theta|`, and the two real tangency points; the
//! lattice model gets the curves `eta = +-arccos(e^{-theta}) + 2 pi k` and
//! the points `2 pi i k`. Cells the overlay passes through are re-tagged by
//! classifying a point on the curve itself, so boundary buckets appear in the
//! raster even though cell centers almost never sit exactly on the boundary.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use thiserror::Error;

use crate::classifier::{classify, RegionTag, RegionVerdict};
use crate::models::OffspringModel;

/// Vertex count for curved overlay polylines.
const CURVE_SAMPLES: usize = 513;

/// Pixel width of rendered SVGs; height follows the grid aspect ratio.
const SVG_WIDTH: f64 = 800.0;

#[derive(Debug, Error, PartialEq)]
pub enum PhaseError {
    #[error("grid resolution {n_theta}x{n_eta} is below the 2x2 minimum")]
    Resolution { n_theta: usize, n_eta: usize },
    #[error("{axis} range [{lo}, {hi}] is not a proper interval")]
    Range {
        axis: &'static str,
        lo: f64,
        hi: f64,
    },
}

/// A rectangular grid in the `(theta, eta)` plane, addressed by cell.
///
/// Cell `(i, j)` covers `[theta_min + i w, theta_min + (i+1) w] x
/// [eta_min + j h, eta_min + (j+1) h]` with `w`, `h` the cell extents; its
/// center is the classification point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub theta_min: f64,
    pub theta_max: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub n_theta: usize,
    pub n_eta: usize,
}

impl GridSpec {
    pub fn new(
        theta: (f64, f64),
        eta: (f64, f64),
        n_theta: usize,
        n_eta: usize,
    ) -> Result<Self, PhaseError> {
        if n_theta < 2 || n_eta < 2 {
            return Err(PhaseError::Resolution { n_theta, n_eta });
        }
        if !(theta.0.is_finite() && theta.1.is_finite() && theta.0 < theta.1) {
            return Err(PhaseError::Range {
                axis: "theta",
                lo: theta.0,
                hi: theta.1,
            });
        }
        if !(eta.0.is_finite() && eta.1.is_finite() && eta.0 < eta.1) {
            return Err(PhaseError::Range {
                axis: "eta",
                lo: eta.0,
                hi: eta.1,
            });
        }
        Ok(GridSpec {
            theta_min: theta.0,
            theta_max: theta.1,
            eta_min: eta.0,
            eta_max: eta.1,
            n_theta,
            n_eta,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_theta * self.n_eta
    }

    pub fn cell_width(&self) -> f64 {
        (self.theta_max - self.theta_min) / self.n_theta as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.eta_max - self.eta_min) / self.n_eta as f64
    }

    /// Center of cell `(i, j)`; `i` indexes `theta`, `j` indexes `eta`.
    pub fn center(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(
            self.theta_min + (i as f64 + 0.5) * self.cell_width(),
            self.eta_min + (j as f64 + 0.5) * self.cell_height(),
        )
    }

    /// Cell containing `(theta, eta)`; points on the outer edge clamp inward.
    fn cell_of(&self, theta: f64, eta: f64) -> Option<(usize, usize)> {
        if theta < self.theta_min
            || theta > self.theta_max
            || eta < self.eta_min
            || eta > self.eta_max
        {
            return None;
        }
        let i = (((theta - self.theta_min) / self.cell_width()) as usize).min(self.n_theta - 1);
        let j = (((eta - self.eta_min) / self.cell_height()) as usize).min(self.n_eta - 1);
        Some((i, j))
    }

    fn contains(&self, theta: f64, eta: f64) -> bool {
        self.cell_of(theta, eta).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OverlayKind {
    /// Curved boundary piece, rendered as a stroked polyline.
    Arc,
    /// Straight boundary piece.
    Segment,
    /// Isolated boundary point.
    Dot,
}

/// One analytic boundary piece in grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overlay {
    pub kind: OverlayKind,
    pub points: Vec<(f64, f64)>,
}

/// A classified raster with its boundary overlays.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseGrid {
    spec: GridSpec,
    /// Row-major by `eta`: cell `(i, j)` lives at `j * n_theta + i`.
    cells: Vec<RegionVerdict>,
    overlays: Vec<Overlay>,
}

/// Rasterizes the phase portrait of `model` over `spec`.
///
/// Cell centers are classified with tolerance `tol`. For built-in models the
/// closed-form boundary overlays are emitted, and every cell the overlay
/// passes through is re-classified at an on-curve point (curve endpoints and
/// isolated boundary points take precedence over interior curve samples, so
/// the cells nearest the arc corners and the real tangency points carry the
/// exact-endpoint verdicts).
pub fn phase_raster(
    model: &OffspringModel,
    spec: GridSpec,
    tol: f64,
) -> Result<PhaseGrid, PhaseError> {
    let cells: Vec<RegionVerdict> = (0..spec.n_eta)
        .into_par_iter()
        .flat_map_iter(|j| (0..spec.n_theta).map(move |i| (i, j)))
        .map(|(i, j)| classify(model, spec.center(i, j), tol))
        .collect();
    let mut grid = PhaseGrid {
        spec,
        cells,
        overlays: overlays_for(model, &spec),
    };
    snap_overlay_cells(model, &mut grid, tol);
    Ok(grid)
}

impl PhaseGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[RegionVerdict] {
        &self.cells
    }

    pub fn overlays(&self) -> &[Overlay] {
        &self.overlays
    }

    pub fn cell(&self, i: usize, j: usize) -> &RegionVerdict {
        &self.cells[j * self.spec.n_theta + i]
    }

    /// CSV with header `theta,eta,tag,alpha,derivative`, one row per cell,
    /// `eta` rows ascending and `theta` ascending within each row. Optional
    /// fields render empty when absent.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("theta,eta,tag,alpha,derivative\n");
        for (idx, v) in self.cells.iter().enumerate() {
            let c = self.spec.center(idx % self.spec.n_theta, idx / self.spec.n_theta);
            let _ = write!(out, "{},{},{}", c.re, c.im, tag_label(v.tag));
            match v.alpha {
                Some(a) => {
                    let _ = write!(out, ",{a}");
                }
                None => out.push(','),
            }
            match v.derivative {
                Some(d) => {
                    let _ = write!(out, ",{d}");
                }
                None => out.push(','),
            }
            out.push('\n');
        }
        out
    }

    /// One verdict JSON object per line, in CSV cell order.
    pub fn render_ndjson(&self) -> String {
        let mut out = String::new();
        for v in &self.cells {
            out.push_str(&v.to_ndjson());
            out.push('\n');
        }
        out
    }

    /// Binary PGM (`P5`), one pixel per cell, a fixed gray level per tag.
    /// The top pixel row is the highest `eta` row.
    pub fn render_pgm(&self) -> Vec<u8> {
        let (w, h) = (self.spec.n_theta, self.spec.n_eta);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for j in (0..h).rev() {
            for i in 0..w {
                out.push(tag_gray(self.cell(i, j).tag));
            }
        }
        out
    }

    /// SVG with one `rect` per cell and the overlays as stroked polylines
    /// (`class="arc"` / `class="segment"`) and circles (`class="dot"`).
    pub fn render_svg(&self) -> String {
        let spec = &self.spec;
        let scale = SVG_WIDTH / (spec.theta_max - spec.theta_min);
        let height = (spec.eta_max - spec.eta_min) * scale;
        let px = |theta: f64| (theta - spec.theta_min) * scale;
        let py = |eta: f64| (spec.eta_max - eta) * scale;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {:.2} {:.2}\">\n",
            SVG_WIDTH, height
        );
        let (cw, ch) = (spec.cell_width() * scale, spec.cell_height() * scale);
        for (idx, v) in self.cells.iter().enumerate() {
            let (i, j) = (idx % spec.n_theta, idx / spec.n_theta);
            let _ = writeln!(
                out,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
                i as f64 * cw,
                height - (j + 1) as f64 * ch,
                cw,
                ch,
                tag_color(v.tag),
            );
        }
        for ov in &self.overlays {
            match ov.kind {
                OverlayKind::Dot => {
                    let (t, e) = ov.points[0];
                    let _ = writeln!(
                        out,
                        "<circle class=\"dot\" cx=\"{:.3}\" cy=\"{:.3}\" r=\"4\" fill=\"#000000\"/>",
                        px(t),
                        py(e),
                    );
                }
                OverlayKind::Arc | OverlayKind::Segment => {
                    let (class, stroke) = match ov.kind {
                        OverlayKind::Arc => ("arc", "#d82f2f"),
                        _ => ("segment", "#1f4fd8"),
                    };
                    let pts: Vec<String> = ov
                        .points
                        .iter()
                        .map(|&(t, e)| format!("{:.3},{:.3}", px(t), py(e)))
                        .collect();
                    let _ = writeln!(
                        out,
                        "<polyline class=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
                        class,
                        stroke,
                        pts.join(" "),
                    );
                }
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Stable text name of a tag, shared by the CSV renderers.
pub fn tag_label(tag: RegionTag) -> &'static str {
    match tag {
        RegionTag::OutsideDomain => "OutsideDomain",
        RegionTag::Interior => "Interior",
        RegionTag::Boundary1 => "Boundary1",
        RegionTag::Boundary12 => "Boundary12",
        RegionTag::Boundary2 => "Boundary2",
        RegionTag::MomentBlowup => "MomentBlowup",
        RegionTag::Exterior => "Exterior",
        RegionTag::Indeterminate => "Indeterminate",
    }
}

fn tag_gray(tag: RegionTag) -> u8 {
    match tag {
        RegionTag::OutsideDomain => 16,
        RegionTag::MomentBlowup => 64,
        RegionTag::Indeterminate => 128,
        RegionTag::Interior => 208,
        RegionTag::Exterior => 255,
        RegionTag::Boundary1 => 0,
        RegionTag::Boundary12 => 32,
        RegionTag::Boundary2 => 80,
    }
}

fn tag_color(tag: RegionTag) -> &'static str {
    match tag {
        RegionTag::OutsideDomain => "#4a4a4a",
        RegionTag::MomentBlowup => "#9b9b9b",
        RegionTag::Indeterminate => "#b455c8",
        RegionTag::Interior => "#f5d547",
        RegionTag::Exterior => "#ffffff",
        RegionTag::Boundary1 => "#000000",
        RegionTag::Boundary12 => "#1f4fd8",
        RegionTag::Boundary2 => "#d82f2f",
    }
}

/// Closed-form boundary overlays for built-in models, clipped to pieces that
/// intersect the grid window. Table models have no closed form and get none.
fn overlays_for(model: &OffspringModel, spec: &GridSpec) -> Vec<Overlay> {
    match model {
        OffspringModel::GaussianBinary => gaussian_overlays(spec),
        OffspringModel::LatticePathological => lattice_overlays(spec),
        OffspringModel::Table(_) => Vec::new(),
    }
}

fn keep_if_visible(spec: &GridSpec, overlay: Overlay, out: &mut Vec<Overlay>) {
    if overlay.points.iter().any(|&(t, e)| spec.contains(t, e)) {
        out.push(overlay);
    }
}

fn gaussian_overlays(spec: &GridSpec) -> Vec<Overlay> {
    let ln2 = std::f64::consts::LN_2;
    let r = ln2.sqrt();
    let corner = (ln2 / 2.0).sqrt();
    let reach = (2.0 * ln2).sqrt();
    let mut out = Vec::new();
    // Circle arcs with |theta| <= corner, one per sign of eta. Endpoints are
    // pinned to the exact corner values so corner cells snap to the exact
    // tangency parameter.
    for sign in [1.0, -1.0] {
        let pts: Vec<(f64, f64)> = (0..CURVE_SAMPLES)
            .map(|k| {
                if k == 0 {
                    (-corner, sign * corner)
                } else if k == CURVE_SAMPLES - 1 {
                    (corner, sign * corner)
                } else {
                    let t = k as f64 / (CURVE_SAMPLES - 1) as f64;
                    let theta = -corner + 2.0 * corner * t;
                    (theta, sign * (ln2 - theta * theta).max(0.0).sqrt())
                }
            })
            .collect();
        debug_assert!(pts.iter().all(|&(t, e)| (t * t + e * e - r * r).abs() < 1e-12));
        keep_if_visible(spec, Overlay { kind: OverlayKind::Arc, points: pts }, &mut out);
    }
    // Tangent segments from each corner down to the real axis.
    for ts in [1.0, -1.0] {
        for es in [1.0, -1.0] {
            let seg = Overlay {
                kind: OverlayKind::Segment,
                points: vec![(ts * corner, es * corner), (ts * reach, 0.0)],
            };
            keep_if_visible(spec, seg, &mut out);
        }
    }
    for ts in [1.0, -1.0] {
        let dot = Overlay {
            kind: OverlayKind::Dot,
            points: vec![(ts * reach, 0.0)],
        };
        keep_if_visible(spec, dot, &mut out);
    }
    out
}

fn lattice_overlays(spec: &GridSpec) -> Vec<Overlay> {
    let mut out = Vec::new();
    if spec.theta_max <= 0.0 {
        return out;
    }
    // Branch k contributes eta in [2 pi k - pi/2, 2 pi k + pi/2].
    let k_lo = ((spec.eta_min - std::f64::consts::FRAC_PI_2) / TAU).floor() as i64;
    let k_hi = ((spec.eta_max + std::f64::consts::FRAC_PI_2) / TAU).ceil() as i64;
    let theta_hi = spec.theta_max;
    for k in k_lo..=k_hi {
        let base = TAU * k as f64;
        for sign in [1.0, -1.0] {
            // eta = base + sign * arccos(e^{-theta}), theta > 0; the curve
            // tip (0, base) is prepended exactly.
            let mut pts = Vec::with_capacity(CURVE_SAMPLES + 1);
            pts.push((0.0, base));
            for s in 1..=CURVE_SAMPLES {
                let theta = theta_hi * s as f64 / CURVE_SAMPLES as f64;
                pts.push((theta, base + sign * (-theta).exp().acos()));
            }
            keep_if_visible(spec, Overlay { kind: OverlayKind::Arc, points: pts }, &mut out);
        }
        let dot = Overlay {
            kind: OverlayKind::Dot,
            points: vec![(0.0, base)],
        };
        keep_if_visible(spec, dot, &mut out);
    }
    out
}

/// Re-tags every cell an overlay passes through with the verdict of a point
/// on the curve. Candidate points are ranked: isolated boundary dots win over
/// polyline endpoint vertices, which win over interior curve samples; ties
/// keep the earliest candidate in overlay order, so the result does not
/// depend on traversal details.
fn snap_overlay_cells(model: &OffspringModel, grid: &mut PhaseGrid, tol: f64) {
    let spec = grid.spec;
    let mut chosen: Vec<Option<(u8, f64, f64)>> = vec![None; spec.n_cells()];
    let mut offer = |cell: Option<(usize, usize)>, prio: u8, t: f64, e: f64| {
        if let Some((i, j)) = cell {
            let slot = &mut chosen[j * spec.n_theta + i];
            if slot.map_or(true, |(p, _, _)| prio < p) {
                *slot = Some((prio, t, e));
            }
        }
    };
    for ov in &grid.overlays {
        match ov.kind {
            OverlayKind::Dot => {
                let (t, e) = ov.points[0];
                offer(spec.cell_of(t, e), 0, t, e);
            }
            OverlayKind::Arc | OverlayKind::Segment => {
                let last = ov.points.len() - 1;
                for (k, &(t, e)) in ov.points.iter().enumerate() {
                    let prio = if k == 0 || k == last { 1 } else { 2 };
                    offer(spec.cell_of(t, e), prio, t, e);
                }
                // Subdivide edges so no crossed cell is skipped.
                for w in ov.points.windows(2) {
                    let ((t0, e0), (t1, e1)) = (w[0], w[1]);
                    let steps = ((t1 - t0).abs() / spec.cell_width())
                        .max((e1 - e0).abs() / spec.cell_height())
                        .ceil() as usize
                        * 2
                        + 1;
                    for s in 1..steps {
                        let u = s as f64 / steps as f64;
                        let (t, e) = (t0 + u * (t1 - t0), e0 + u * (e1 - e0));
                        offer(spec.cell_of(t, e), 2, t, e);
                    }
                }
            }
        }
    }
    let snapped: Vec<(usize, RegionVerdict)> = chosen
        .into_par_iter()
        .enumerate()
        .filter_map(|(idx, c)| {
            c.map(|(_, t, e)| (idx, classify(model, Complex64::new(t, e), tol)))
        })
        .collect();
    for (idx, v) in snapped {
        grid.cells[idx] = v;
    }
}
