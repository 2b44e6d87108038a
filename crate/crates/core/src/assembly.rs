//! Lag-indexed Galerkin blocks of the retarded layer operators.
//!
//! Kernels (unit wave speed), with `a = (x−y)·n_x`, `b = (x−y)·n_y`:
//!
//! * `V φ  = (1/2π) ∫ φ(t−r)/r`
//! * `K φ  = (1/2π) ∫ (b/r) [φ(t−r)/r² + φ̇(t−r)/r]`
//! * `K'φ  = −(1/2π) ∫ (a/r) [φ(t−r)/r² + φ̇(t−r)/r]`
//! * `⟨W u, v⟩ = −(1/2π) ∫∫ [n_x·n_y ü(t−r) v + curl u(t−r) · curl v] / r`
//!
//! Trial functions are `β^m ξ^i`; `V` and `K` rows are tested with `γ̇^n ξ^j`,
//! `W` and `K'` rows with `γ^n ξ^j`. The time integrals are done in closed
//! form: for `ρ = r/Δt = k + f`, `f ∈ [0, 1)`, the lags `k, k+1, k+2` carry
//!
//! * `g0 = Δt·((1−f)²/2, (1+2f−2f²)/2, f²/2)` (trial value, test `γ`),
//! * `g1 = (1−f, 2f−1, −f)` (trial derivative, test `γ`),
//! * `g2 = (1, −2, 1)/Δt` (second derivative, test `γ`),
//!
//! and testing with `γ̇` instead of `γ` shifts the derivative order by one
//! with a sign flip. Only the spatial double integral is numerical.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{mesh_stats, Point, SurfaceMesh};
use crate::quadrature::{gauss_legendre, TriangleRule};
use crate::timebasis::{hat, hat_integral, hat_slope, mass_matrix, BasisSet, SpatialBasis, TemporalCoupling, TimeGrid};

const INV_2PI: f64 = 0.5 / PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    SingleLayer,
    DoubleLayer,
    AdjointDoubleLayer,
    Hypersingular,
    /// Single layer with piecewise constant trial functions `γ^m ξ^i`,
    /// tested with `γ̇^n ξ^j`.
    SingleLayerConstant,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::SingleLayer,
        OperatorKind::DoubleLayer,
        OperatorKind::AdjointDoubleLayer,
        OperatorKind::Hypersingular,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            OperatorKind::SingleLayer => "V",
            OperatorKind::DoubleLayer => "K",
            OperatorKind::AdjointDoubleLayer => "Kp",
            OperatorKind::Hypersingular => "W",
            OperatorKind::SingleLayerConstant => "Vc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerRule {
    /// Polar coordinates about the projected outer point, split at the
    /// light-cone radii `r = kΔt`.
    LightCone,
    /// Collapsed Gauss rule on `4^depth` sub-triangles, no splitting.
    Uniform { depth: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureConfig {
    /// Points of the symmetric rule on the test triangle (1, 3, 6, 7 or 12).
    pub outer_order: usize,
    /// Gauss points per radial and per angular panel.
    pub inner_order: usize,
    /// Uniform subdivision depth of the test triangle for near-field pairs.
    pub subdivision_depth: usize,
    /// Pairs closer than this multiple of the larger panel diameter are near-field.
    pub nearfield_threshold: f64,
    pub inner_rule: InnerRule,
    /// Reuse results for pairs that coincide up to translation.
    pub reuse_congruent_pairs: bool,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            outer_order: 7,
            inner_order: 4,
            subdivision_depth: 1,
            nearfield_threshold: 1.0,
            inner_rule: InnerRule::LightCone,
            reuse_congruent_pairs: true,
        }
    }
}

impl QuadratureConfig {
    /// High-order settings for cross-checks against the brute-force oracle.
    pub fn reference() -> Self {
        QuadratureConfig { outer_order: 36, inner_order: 8, subdivision_depth: 2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_order == 0 || self.inner_order == 0 {
            return Err(Error::InvalidArgument("quadrature orders must be at least 1".into()));
        }
        if let InnerRule::Uniform { .. } = self.inner_rule {
            if self.inner_order == 0 {
                return Err(Error::InvalidArgument("uniform rule needs inner_order ≥ 1".into()));
            }
        }
        if !(self.nearfield_threshold >= 0.0) {
            return Err(Error::InvalidArgument("near-field threshold must be nonnegative".into()));
        }
        Ok(())
    }

    /// Stable textual key used for cache file names.
    pub fn cache_key(&self) -> String {
        let rule = match self.inner_rule {
            InnerRule::LightCone => "lc".to_string(),
            InnerRule::Uniform { depth } => format!("u{depth}"),
        };
        format!(
            "o{}-i{}-s{}-n{}-{}",
            self.outer_order, self.inner_order, self.subdivision_depth, self.nearfield_threshold, rule
        )
    }
}

/// Dense per-lag matrices; lags beyond `blocks.len() − 1` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSeries {
    pub label: String,
    pub blocks: Vec<DMatrix<f64>>,
    /// Mesh entity (vertex) behind every row and column.
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl BlockSeries {
    pub fn zeros(label: &str, rows: Vec<usize>, cols: Vec<usize>, n_lags: usize) -> Self {
        let blocks = (0..n_lags).map(|_| DMatrix::zeros(rows.len(), cols.len())).collect();
        BlockSeries { label: label.to_string(), blocks, rows, cols }
    }

    /// Largest lag with a stored block.
    pub fn lag_bound(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }

    pub fn block(&self, j: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(j)
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    /// Drops trailing all-zero blocks (keeps at least one).
    pub fn trim(&mut self) {
        while self.blocks.len() > 1 && self.blocks.last().is_some_and(|b| b.iter().all(|&v| v == 0.0)) {
            self.blocks.pop();
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(|b| b.amax()).fold(0.0, f64::max)
    }
}

/// The coupled lag blocks of the Dirichlet-to-Neumann system over the
/// unknowns `[c; d]` (trace at the free vertices of G, density at all vertices).
///
/// Stored rows are scaled by `diag(−1, −Δt/2)` relative to the textbook block
/// `[[W, K' − (Δt/2)I], [K − Î, V]]`. The first row then carries the positive
/// Dirichlet-to-Neumann map and the mass couplings become skew, which makes the
/// symmetric part of the lag-0 block positive definite.
#[derive(Clone, Debug)]
pub struct CoupledSeries {
    pub series: BlockSeries,
    pub n_trace: usize,
    pub trace_vertices: Vec<usize>,
    pub n_vertices: usize,
    pub grid: TimeGrid,
    /// P1 mass matrix over the trace vertices.
    pub trace_mass: DMatrix<f64>,
}

impl CoupledSeries {
    pub fn dim(&self) -> usize {
        self.series.nrows()
    }

    pub fn n_density(&self) -> usize {
        self.dim() - self.n_trace
    }

    /// Scale of row `i` relative to the textbook block.
    pub fn row_scale(&self, i: usize) -> f64 {
        if i < self.n_trace {
            -1.0
        } else {
            -0.5 * self.grid.dt()
        }
    }

    /// The textbook block `M^j` (undoing the row scaling).
    pub fn textbook_block(&self, j: usize) -> DMatrix<f64> {
        let mut m = match self.series.block(j) {
            Some(b) => b.clone(),
            None => DMatrix::zeros(self.dim(), self.dim()),
        };
        for i in 0..self.dim() {
            let s = 1.0 / self.row_scale(i);
            m.row_mut(i).scale_mut(s);
        }
        m
    }
}

/// Per-triangle geometry.
#[derive(Clone, Debug)]
struct Panel {
    corners: [Point; 3],
    centroid: Point,
    normal: Point,
    area: f64,
    radius: f64,
    diameter: f64,
    e1: Point,
    e2: Point,
    /// Corners in the local frame (origin at corner 0).
    q: [[f64; 2]; 3],
    /// Barycentric coordinate `k` is `grad[k]·y + offset[k]` in the local frame.
    grad: [[f64; 2]; 3],
    offset: [f64; 3],
    curl: [Point; 3],
}

impl Panel {
    fn new(corners: [Point; 3], normal: Point, area: f64) -> Self {
        let centroid = (corners[0] + corners[1] + corners[2]) / 3.0;
        let radius = corners.iter().map(|c| (c - centroid).norm()).fold(0.0, f64::max);
        let diameter = (0..3).map(|k| (corners[(k + 1) % 3] - corners[k]).norm()).fold(0.0, f64::max);
        let e1 = (corners[1] - corners[0]).normalize();
        let e2 = normal.cross(&e1);
        let local = |p: &Point| {
            let w = p - corners[0];
            [w.dot(&e1), w.dot(&e2)]
        };
        let q = [[0.0, 0.0], local(&corners[1]), local(&corners[2])];
        let twice = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[1][1] - q[0][1]) * (q[2][0] - q[0][0]);
        let mut grad = [[0.0; 2]; 3];
        let mut offset = [0.0; 3];
        let mut curl = [Point::zeros(); 3];
        for k in 0..3 {
            let a = q[(k + 1) % 3];
            let b = q[(k + 2) % 3];
            let e = [b[0] - a[0], b[1] - a[1]];
            grad[k] = [-e[1] / twice, e[0] / twice];
            offset[k] = -(grad[k][0] * a[0] + grad[k][1] * a[1]);
            curl[k] = -(corners[(k + 2) % 3] - corners[(k + 1) % 3]) / (2.0 * area);
        }
        Panel { corners, centroid, normal, area, radius, diameter, e1, e2, q, grad, offset, curl }
    }

    fn bary(&self, y: [f64; 2]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = self.grad[k][0] * y[0] + self.grad[k][1] * y[1] + self.offset[k];
        }
        out
    }

    fn point(&self, lam: &[f64; 3]) -> Point {
        self.corners[0] * lam[0] + self.corners[1] * lam[1] + self.corners[2] * lam[2]
    }
}

/// Number of moment slots per lag accumulated by the inner integral.
const MOMENTS: usize = 22;
/// Longest angular panel in the sinh-substituted variable.
const MAX_V_PANEL: f64 = 1.0;
/// Number of local 3×3 blocks per lag produced for a panel pair.
const PAIR_KINDS: usize = 7;
const PK_V: usize = 0;
const PK_W: usize = 1;
const PK_KP_AB: usize = 2;
const PK_K_AB: usize = 3;
const PK_K_BA: usize = 4;
const PK_KP_BA: usize = 5;
const PK_VC: usize = 6;

/// Local blocks of one unordered panel pair `(a, b)` for lags
/// `lag0..lag0 + n_lags`. Layout: `[lag][kind][i][j]` with `i` a vertex of
/// `a`, `j` a vertex of `b`; the `*_BA` kinds are stored transposed.
#[derive(Clone, Debug)]
struct PairBlocks {
    lag0: usize,
    n_lags: usize,
    data: Vec<f64>,
}

impl PairBlocks {
    fn get(&self, lag: usize, kind: usize, i: usize, j: usize) -> f64 {
        self.data[((lag * PAIR_KINDS + kind) * 3 + i) * 3 + j]
    }
}

/// Time weights `(g0, g1, g2)` for lags `k, k+1, k+2` at fractional part `f`.
#[inline]
fn lag_weights(f: f64, dt: f64) -> [[f64; 3]; 3] {
    let g0 = [0.5 * dt * (1.0 - f) * (1.0 - f), 0.5 * dt * (1.0 + 2.0 * f - 2.0 * f * f), 0.5 * dt * f * f];
    let g1 = [1.0 - f, 2.0 * f - 1.0, -f];
    let inv = 1.0 / dt;
    let g2 = [inv, -2.0 * inv, inv];
    [g0, g1, g2]
}

struct PairGeometry {
    nn: f64,
    c1: f64,
    c2: f64,
    need_k: bool,
}

/// Workspace for inner integrals.
struct Inner<'r> {
    dt: f64,
    ang: &'r [(f64, f64)],
    rad: &'r [(f64, f64)],
    lag0: usize,
    n_lags: usize,
    moments: Vec<f64>,
    cones: Vec<f64>,
    angles: Vec<f64>,
    panels: Vec<(f64, f64)>,
}

impl Inner<'_> {
    #[inline]
    fn add_point(&mut self, w: f64, r: f64, k: usize, f: f64, phi: &[f64; 3], ax: f64, geo: &PairGeometry) {
        let weights = lag_weights(f, self.dt);
        let wr = w / r;
        let inv_r = 1.0 / r;
        for m in 0..3 {
            let lag = k + m;
            if lag < self.lag0 || lag >= self.lag0 + self.n_lags {
                continue;
            }
            let (g0, g1, g2) = (weights[0][m], weights[1][m], weights[2][m]);
            let base = (lag - self.lag0) * MOMENTS;
            let mo = &mut self.moments[base..base + MOMENTS];
            let tv = -g1 * wr;
            let tw = g2 * wr;
            mo[6] += g0 * wr;
            let tc = match m {
                0 => -wr,
                1 => wr,
                _ => 0.0,
            };
            for j in 0..3 {
                mo[j] += tv * phi[j];
                mo[3 + j] += tw * phi[j];
                mo[19 + j] += tc * phi[j];
            }
            if geo.need_k {
                let t0 = (g0 * inv_r + g1) * inv_r;
                let t1 = (g1 * inv_r + g2) * inv_r;
                let kp = wr * ax * t0;
                let kb = wr * ax * t1;
                let ka = wr * t1;
                let kpb = wr * t0;
                for j in 0..3 {
                    mo[7 + j] += kp * phi[j];
                    mo[10 + j] += kb * phi[j];
                    mo[13 + j] += ka * phi[j];
                    mo[16 + j] += kpb * phi[j];
                }
            }
        }
    }

    /// Radial integral along the ray `p + s·u`, `s ∈ [s_in, s_out]`.
    #[allow(clippy::too_many_arguments)]
    fn ray(&mut self, b: &Panel, p: [f64; 2], u: [f64; 2], d: f64, s_in: f64, s_out: f64, w_ang: f64, geo: &PairGeometry) {
        if !(s_out > s_in) {
            return;
        }
        let d2 = d * d;
        let mut s0 = s_in;
        let mut cone = self.cones.partition_point(|&c| c <= s_in);
        let dt = self.dt;
        let rad = self.rad;
        loop {
            let s1 = if cone < self.cones.len() && self.cones[cone] < s_out { self.cones[cone] } else { s_out };
            // Fixed lag index on (s0, s1).
            let sm = 0.5 * (s0 + s1);
            let k = ((sm * sm + d2).sqrt() / dt).floor() as usize;
            // Geometric grading towards the nearest complex singularity s = ±i d.
            let mut a = s0;
            while a < s1 {
                let reach = (a * a + d2).sqrt();
                let bnd = if d > 0.0 && s1 - a > reach { a + reach } else { s1 };
                let len = bnd - a;
                for &(t, wt) in rad {
                    let s = a + len * t;
                    let r = (s * s + d2).sqrt();
                    let f = (r / dt - k as f64).clamp(0.0, 1.0);
                    let y = [p[0] + s * u[0], p[1] + s * u[1]];
                    let phi = b.bary(y);
                    let ax = d * geo.nn - s * (u[0] * geo.c1 + u[1] * geo.c2);
                    self.add_point(w_ang * wt * len * s, r, k, f, &phi, ax, geo);
                }
                a = bnd;
            }
            if s1 >= s_out {
                break;
            }
            s0 = s1;
            cone += 1;
        }
    }

    /// Inner integral over panel `b` for the outer point `x`.
    fn polar(&mut self, b: &Panel, x: &Point, geo: &PairGeometry) {
        let w = x - b.corners[0];
        let d = w.dot(&b.normal);
        let p = [w.dot(&b.e1), w.dot(&b.e2)];
        let q: [[f64; 2]; 3] = std::array::from_fn(|k| [b.q[k][0] - p[0], b.q[k][1] - p[1]]);
        let size = b.diameter;
        let tiny = 1e-13 * size;

        // Edge lines: signed distance (positive inside) and foot direction.
        let mut sigma = [0.0; 3];
        let mut foot = [0.0; 3];
        for k in 0..3 {
            let (a, c) = (q[k], q[(k + 1) % 3]);
            let ev = [c[0] - a[0], c[1] - a[1]];
            let len = (ev[0] * ev[0] + ev[1] * ev[1]).sqrt();
            let n_in = [-ev[1] / len, ev[0] / len];
            let s = -(a[0] * n_in[0] + a[1] * n_in[1]);
            sigma[k] = s;
            foot[k] = if s >= 0.0 { (-n_in[1]).atan2(-n_in[0]) } else { n_in[1].atan2(n_in[0]) };
        }
        let inside = sigma.iter().all(|&s| s >= -tiny);
        let norms: [f64; 3] = std::array::from_fn(|k| (q[k][0] * q[k][0] + q[k][1] * q[k][1]).sqrt());
        let s_max = norms.iter().cloned().fold(0.0, f64::max);
        let s_min = if inside {
            0.0
        } else {
            (0..3).map(|k| point_segment_distance(q[k], q[(k + 1) % 3])).fold(f64::INFINITY, f64::min)
        };
        let d2 = d * d;
        let (r_lo, r_hi) = ((s_min * s_min + d2).sqrt(), (s_max * s_max + d2).sqrt());
        self.cones.clear();
        let k_lo = (r_lo / self.dt).floor() as usize + 1;
        let mut kc = k_lo;
        while (kc as f64) * self.dt < r_hi {
            let r = kc as f64 * self.dt;
            if r > r_lo {
                self.cones.push((r * r - d2).max(0.0).sqrt());
            }
            kc += 1;
        }

        // Angular pieces: (start, end, entry edge, exit edge).
        let mut pieces: Vec<(f64, f64, Option<usize>, usize)> = Vec::with_capacity(3);
        if inside {
            for k in 0..3 {
                let (a, c) = (q[k], q[(k + 1) % 3]);
                if sigma[k] <= tiny || norms[k] <= tiny || norms[(k + 1) % 3] <= tiny {
                    continue;
                }
                let t0 = a[1].atan2(a[0]);
                let span = (a[0] * c[1] - a[1] * c[0]).atan2(a[0] * c[0] + a[1] * c[1]);
                if span > 0.0 {
                    pieces.push((t0, t0 + span, None, k));
                }
            }
        } else {
            let cen = [(q[0][0] + q[1][0] + q[2][0]) / 3.0, (q[0][1] + q[1][1] + q[2][1]) / 3.0];
            let base = cen[1].atan2(cen[0]);
            let mut rel: [f64; 3] = std::array::from_fn(|k| wrap_pi(q[k][1].atan2(q[k][0]) - base));
            rel.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (lo, hi) in [(rel[0], rel[1]), (rel[1], rel[2])] {
                if hi - lo <= 1e-14 {
                    continue;
                }
                let mid = base + 0.5 * (lo + hi);
                let u = [mid.cos(), mid.sin()];
                let mut hits: Vec<(f64, usize)> = Vec::with_capacity(3);
                for k in 0..3 {
                    let (a, c) = (q[k], q[(k + 1) % 3]);
                    let ev = [c[0] - a[0], c[1] - a[1]];
                    let den = u[0] * ev[1] - u[1] * ev[0];
                    if den.abs() < 1e-300 {
                        continue;
                    }
                    let s = (a[0] * ev[1] - a[1] * ev[0]) / den;
                    let tau = (a[0] * u[1] - a[1] * u[0]) / den;
                    if (-1e-9..=1.0 + 1e-9).contains(&tau) && s >= 0.0 {
                        hits.push((s, k));
                    }
                }
                hits.sort_by(|x, y| x.partial_cmp(y).unwrap());
                hits.dedup_by(|x, y| x.1 == y.1);
                if hits.len() < 2 {
                    continue;
                }
                let entry = hits[0].1;
                let exit = hits[hits.len() - 1].1;
                if entry == exit {
                    continue;
                }
                pieces.push((base + lo, base + hi, Some(entry), exit));
            }
        }

        for (ta, tb, entry, exit) in pieces {
            // Light-cone crossings with the entry and exit lines.
            self.angles.clear();
            self.angles.push(0.0);
            self.angles.push(tb - ta);
            for &line in entry.iter().chain(std::iter::once(&exit)) {
                let h = sigma[line].abs();
                for &c in &self.cones {
                    if c > h {
                        let delta = (h / c).acos();
                        for cand in [foot[line] - delta, foot[line] + delta] {
                            let r = (cand - ta).rem_euclid(2.0 * PI);
                            if r > 1e-12 && r < tb - ta - 1e-12 {
                                self.angles.push(r);
                            }
                        }
                    }
                }
            }
            self.angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let reference = entry.unwrap_or(exit);
            let theta_ref = foot[reference];
            let angles = std::mem::take(&mut self.angles);
            for win in angles.windows(2) {
                let (a0, a1) = (ta + win[0], ta + win[1]);
                if a1 - a0 <= 1e-15 {
                    continue;
                }
                let rel0 = wrap_pi(a0 - theta_ref);
                let rel1 = rel0 + (a1 - a0);
                let use_sub = rel0 > -0.5 * PI + 1e-9 && rel1 < 0.5 * PI - 1e-9;
                let (v0, v1) = if use_sub { (rel0.tan().asinh(), rel1.tan().asinh()) } else { (rel0, rel1) };
                // Poles of the exit distance (rays parallel to the exit line).
                let mut poles = [f64::NAN; 2];
                for (slot, sign) in [-0.5 * PI, 0.5 * PI].into_iter().enumerate() {
                    let rel = wrap_pi(foot[exit] + sign - theta_ref);
                    poles[slot] = if !use_sub {
                        rel
                    } else if rel.abs() < 0.5 * PI {
                        rel.tan().asinh()
                    } else {
                        f64::NAN
                    };
                }
                self.panels.clear();
                graded_panels(v0, v1, &poles, 0, &mut self.panels);
                let ang = self.ang;
                let panels = std::mem::take(&mut self.panels);
                for (&(pa, pb), &(t, wt)) in panels.iter().flat_map(|pan| ang.iter().map(move |g| (pan, g))) {
                    let dv = pb - pa;
                    let v = pa + dv * t;
                    let (rel, jac) = if use_sub { (v.sinh().atan(), 1.0 / v.cosh()) } else { (v, 1.0) };
                    let theta = theta_ref + rel;
                    let u = [theta.cos(), theta.sin()];
                    let s_out = sigma[exit].abs() / (theta - foot[exit]).cos();
                    let s_in = match entry {
                        Some(e) => sigma[e].abs() / (theta - foot[e]).cos(),
                        None => 0.0,
                    };
                    self.ray(b, p, u, d, s_in.max(0.0), s_out, wt * dv * jac, geo);
                }
                self.panels = panels;
            }
            self.angles = angles;
        }
    }

    /// Inner integral by a plain collapsed rule (no light-cone splitting).
    fn uniform(&mut self, b: &Panel, x: &Point, rule: &TriangleRule, normal_a: &Point, geo: &PairGeometry) {
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let y = b.point(lam);
            let diff = x - y;
            let r = diff.norm();
            if r == 0.0 {
                continue;
            }
            let rho = r / self.dt;
            let k = rho.floor();
            let ax = diff.dot(normal_a);
            self.add_point(w * b.area, r, k as usize, rho - k, lam, ax, geo);
        }
    }
}

/// Splits `[a, b]` until every panel is at most `MAX_V_PANEL` long and no
/// longer than its distance to the nearest pole.
fn graded_panels(a: f64, b: f64, poles: &[f64], depth: usize, out: &mut Vec<(f64, f64)>) {
    let len = b - a;
    let gap = poles
        .iter()
        .filter(|p| p.is_finite())
        .map(|&p| if p < a { a - p } else if p > b { p - b } else { 0.0 })
        .fold(f64::INFINITY, f64::min);
    if depth >= 40 || (len <= MAX_V_PANEL && len <= gap) {
        out.push((a, b));
        return;
    }
    let m = 0.5 * (a + b);
    graded_panels(a, m, poles, depth + 1, out);
    graded_panels(m, b, poles, depth + 1, out);
}

fn wrap_pi(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Distance from the origin to the segment `[a, c]`.
fn point_segment_distance(a: [f64; 2], c: [f64; 2]) -> f64 {
    let ev = [c[0] - a[0], c[1] - a[1]];
    let len2 = ev[0] * ev[0] + ev[1] * ev[1];
    let t = (-(a[0] * ev[0] + a[1] * ev[1]) / len2).clamp(0.0, 1.0);
    let px = a[0] + t * ev[0];
    let py = a[1] + t * ev[1];
    (px * px + py * py).sqrt()
}

/// Computes the panel-pair blocks of all four operators.
pub struct Assembler<'m> {
    mesh: &'m SurfaceMesh,
    grid: TimeGrid,
    cfg: QuadratureConfig,
    panels: Vec<Panel>,
    planar: bool,
    far_rule: TriangleRule,
    near_rule: TriangleRule,
    ang: Vec<(f64, f64)>,
    rad: Vec<(f64, f64)>,
    near_ang: Vec<(f64, f64)>,
    near_rad: Vec<(f64, f64)>,
    uniform_rule: Option<TriangleRule>,
}

impl<'m> Assembler<'m> {
    pub fn new(mesh: &'m SurfaceMesh, grid: &TimeGrid, cfg: &QuadratureConfig) -> Result<Self> {
        cfg.validate()?;
        let panels = (0..mesh.n_triangles())
            .map(|t| Panel::new(mesh.corners(t), mesh.normals()[t], mesh.areas()[t]))
            .collect();
        let far_rule = TriangleRule::dunavant(cfg.outer_order);
        let near_base = TriangleRule::dunavant(cfg.outer_order.max(7));
        let near_rule = near_base.subdivided(cfg.subdivision_depth);
        let uniform_rule = match cfg.inner_rule {
            InnerRule::LightCone => None,
            InnerRule::Uniform { depth } => Some(TriangleRule::collapsed(cfg.inner_order).subdivided(depth)),
        };
        Ok(Assembler {
            mesh,
            grid: *grid,
            cfg: cfg.clone(),
            panels,
            planar: mesh.is_planar(),
            far_rule,
            near_rule,
            ang: gauss_legendre(cfg.inner_order),
            rad: gauss_legendre(cfg.inner_order),
            near_ang: gauss_legendre(cfg.inner_order + 2),
            near_rad: gauss_legendre(cfg.inner_order + 2),
            uniform_rule,
        })
    }

    fn lag_range(&self, a: usize, b: usize) -> (usize, usize) {
        let (pa, pb) = (&self.panels[a], &self.panels[b]);
        let mut r_hi: f64 = 0.0;
        for x in &pa.corners {
            for y in &pb.corners {
                r_hi = r_hi.max((x - y).norm());
            }
        }
        let r_lo = ((pa.centroid - pb.centroid).norm() - pa.radius - pb.radius).max(0.0);
        let dt = self.grid.dt();
        let lag0 = (r_lo / dt).floor() as usize;
        let last = (r_hi / dt).floor() as usize + 2;
        (lag0, last - lag0 + 1)
    }

    fn is_near(&self, a: usize, b: usize) -> bool {
        let (pa, pb) = (&self.panels[a], &self.panels[b]);
        let gap = (pa.centroid - pb.centroid).norm() - pa.radius - pb.radius;
        gap < self.cfg.nearfield_threshold * pa.diameter.max(pb.diameter)
    }

    fn pair(&self, a: usize, b: usize) -> PairBlocks {
        let (pa, pb) = (&self.panels[a], &self.panels[b]);
        let (lag0, n_lags) = self.lag_range(a, b);
        let near = self.is_near(a, b);
        let rule = if near { &self.near_rule } else { &self.far_rule };
        let geo = PairGeometry {
            nn: pa.normal.dot(&pb.normal),
            c1: pb.e1.dot(&pa.normal),
            c2: pb.e2.dot(&pa.normal),
            need_k: a != b && !self.planar,
        };
        let mut inner = Inner {
            dt: self.grid.dt(),
            ang: if near { &self.near_ang } else { &self.ang },
            rad: if near { &self.near_rad } else { &self.rad },
            lag0,
            n_lags,
            moments: vec![0.0; n_lags * MOMENTS],
            cones: Vec::new(),
            angles: Vec::new(),
            panels: Vec::new(),
        };
        let mut out = PairBlocks { lag0, n_lags, data: vec![0.0; n_lags * PAIR_KINDS * 9] };
        let mut curlcurl = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                curlcurl[i][j] = pa.curl[i].dot(&pb.curl[j]);
            }
        }
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let x = pa.point(lam);
            inner.moments.iter_mut().for_each(|m| *m = 0.0);
            match &self.uniform_rule {
                Some(u) if a != b => inner.uniform(pb, &x, u, &pa.normal, &geo),
                _ => inner.polar(pb, &x, &geo),
            }
            let d = (x - pb.corners[0]).dot(&pb.normal);
            let c = w * pa.area * INV_2PI;
            for l in 0..n_lags {
                let mo = &inner.moments[l * MOMENTS..(l + 1) * MOMENTS];
                let blk = &mut out.data[l * PAIR_KINDS * 9..(l + 1) * PAIR_KINDS * 9];
                for i in 0..3 {
                    let ci = c * lam[i];
                    for j in 0..3 {
                        let ij = i * 3 + j;
                        blk[PK_V * 9 + ij] += ci * mo[j];
                        blk[PK_VC * 9 + ij] += ci * mo[19 + j];
                        blk[PK_W * 9 + ij] -= ci * geo.nn * mo[3 + j] + c * curlcurl[i][j] * mo[6];
                        if geo.need_k {
                            blk[PK_KP_AB * 9 + ij] -= ci * mo[7 + j];
                            blk[PK_K_BA * 9 + ij] += ci * mo[10 + j];
                            blk[PK_K_AB * 9 + ij] -= ci * d * mo[13 + j];
                            blk[PK_KP_BA * 9 + ij] += ci * d * mo[16 + j];
                        }
                    }
                }
            }
        }
        out
    }

    /// Quantized relative geometry of a pair; equal keys mean the pairs
    /// coincide up to a translation.
    fn pair_key(&self, a: usize, b: usize, unit: f64) -> [i64; 15] {
        let (pa, pb) = (&self.panels[a], &self.panels[b]);
        let o = pa.corners[0];
        let mut key = [0i64; 15];
        let pts = [pa.corners[1], pa.corners[2], pb.corners[0], pb.corners[1], pb.corners[2]];
        for (k, p) in pts.iter().enumerate() {
            for c in 0..3 {
                key[3 * k + c] = ((p[c] - o[c]) / unit).round() as i64;
            }
        }
        key
    }

    fn translation_classes(&self, unit: f64) -> usize {
        let mut classes = std::collections::HashSet::new();
        for p in &self.panels {
            let mut key = [0i64; 6];
            for (k, v) in [p.corners[1], p.corners[2]].iter().enumerate() {
                for c in 0..3 {
                    key[3 * k + c] = ((v[c] - p.corners[0][c]) / unit).round() as i64;
                }
            }
            classes.insert(key);
        }
        classes.len()
    }

    /// Assembles the requested operators. Each request names the operator and
    /// the vertex sets indexing rows and columns.
    pub fn assemble(&self, requests: &[(OperatorKind, Vec<usize>, Vec<usize>)]) -> Vec<BlockSeries> {
        let nv = self.mesh.n_vertices();
        let nt = self.mesh.n_triangles();
        let stats = mesh_stats(self.mesh);
        let max_lag = (stats.diameter / self.grid.dt()).floor() as usize + 3;
        let mut outputs: Vec<BlockSeries> = requests
            .iter()
            .map(|(kind, rows, cols)| BlockSeries::zeros(kind.short_name(), rows.clone(), cols.clone(), max_lag + 1))
            .collect();
        let maps: Vec<(Vec<Option<usize>>, Vec<Option<usize>>)> = requests
            .iter()
            .map(|(_, rows, cols)| (local_map(rows, nv), local_map(cols, nv)))
            .collect();
        // Skip pairs whose vertices touch no requested row/column at all.
        let touched = |t: usize, map: &Vec<Option<usize>>| self.mesh.triangles()[t].iter().any(|&v| map[v].is_some());
        let mut relevant_a = vec![false; nt];
        let mut relevant_b = vec![false; nt];
        for (rows, cols) in &maps {
            for t in 0..nt {
                let tr = touched(t, rows);
                let tc = touched(t, cols);
                relevant_a[t] |= tr || tc;
                relevant_b[t] |= tr || tc;
            }
        }
        let mut scatter = |a: usize, b: usize, pb: &PairBlocks| {
            for (out, ((kind, _, _), (rows, cols))) in outputs.iter_mut().zip(requests.iter().zip(&maps)) {
                scatter_pair(self.mesh, a, b, pb, *kind, rows, cols, out);
            }
        };

        let unit = 1e-9 * stats.h_min;
        let structured = self.cfg.reuse_congruent_pairs && self.translation_classes(unit) * 8 <= nt;
        if structured {
            let mut ids: HashMap<[i64; 15], usize> = HashMap::new();
            let mut cache: Vec<PairBlocks> = Vec::new();
            let mut batch: Vec<(usize, usize, usize)> = Vec::new();
            let mut pending: Vec<(usize, usize)> = Vec::new();
            let flush = |batch: &mut Vec<(usize, usize, usize)>,
                         pending: &mut Vec<(usize, usize)>,
                         cache: &mut Vec<PairBlocks>,
                         scatter: &mut dyn FnMut(usize, usize, &PairBlocks)| {
                let fresh: Vec<PairBlocks> = pending.par_iter().map(|&(a, b)| self.pair(a, b)).collect();
                cache.extend(fresh);
                pending.clear();
                for &(a, b, id) in batch.iter() {
                    scatter(a, b, &cache[id]);
                }
                batch.clear();
            };
            for a in 0..nt {
                for b in a..nt {
                    if !(relevant_a[a] || relevant_b[b]) {
                        continue;
                    }
                    let key = self.pair_key(a, b, unit);
                    let next = cache.len() + pending.len();
                    let id = *ids.entry(key).or_insert_with(|| {
                        pending.push((a, b));
                        next
                    });
                    batch.push((a, b, id));
                    if pending.len() >= 2048 || batch.len() >= 1 << 16 {
                        flush(&mut batch, &mut pending, &mut cache, &mut scatter);
                    }
                }
            }
            flush(&mut batch, &mut pending, &mut cache, &mut scatter);
        } else {
            let chunk = 16usize;
            let mut start = 0;
            while start < nt {
                let end = (start + chunk).min(nt);
                let results: Vec<Vec<PairBlocks>> = (start..end)
                    .into_par_iter()
                    .map(|a| (a..nt).map(|b| self.pair(a, b)).collect())
                    .collect();
                for (a, row) in (start..end).zip(results) {
                    for (b, pb) in (a..nt).zip(row) {
                        scatter(a, b, &pb);
                    }
                }
                start = end;
            }
        }
        for out in outputs.iter_mut() {
            out.trim();
        }
        outputs
    }
}

fn local_map(entities: &[usize], n: usize) -> Vec<Option<usize>> {
    let mut map = vec![None; n];
    for (k, &e) in entities.iter().enumerate() {
        map[e] = Some(k);
    }
    map
}

#[allow(clippy::too_many_arguments)]
fn scatter_pair(
    mesh: &SurfaceMesh,
    a: usize,
    b: usize,
    pb: &PairBlocks,
    kind: OperatorKind,
    rows: &[Option<usize>],
    cols: &[Option<usize>],
    out: &mut BlockSeries,
) {
    let ta = mesh.triangles()[a];
    let tb = mesh.triangles()[b];
    let same = a == b;
    for l in 0..pb.n_lags {
        let lag = pb.lag0 + l;
        if lag >= out.blocks.len() {
            break;
        }
        let m = &mut out.blocks[lag];
        for i in 0..3 {
            for j in 0..3 {
                let (va, vb) = (ta[i], tb[j]);
                match kind {
                    OperatorKind::SingleLayer | OperatorKind::Hypersingular | OperatorKind::SingleLayerConstant => {
                        let k = match kind {
                            OperatorKind::SingleLayer => PK_V,
                            OperatorKind::Hypersingular => PK_W,
                            _ => PK_VC,
                        };
                        if same {
                            let v = 0.5 * (pb.get(l, k, i, j) + pb.get(l, k, j, i));
                            if let (Some(r), Some(c)) = (rows[va], cols[vb]) {
                                m[(r, c)] += v;
                            }
                        } else {
                            let v = pb.get(l, k, i, j);
                            if let (Some(r), Some(c)) = (rows[va], cols[vb]) {
                                m[(r, c)] += v;
                            }
                            if let (Some(r), Some(c)) = (rows[vb], cols[va]) {
                                m[(r, c)] += v;
                            }
                        }
                    }
                    OperatorKind::DoubleLayer | OperatorKind::AdjointDoubleLayer => {
                        if same {
                            continue;
                        }
                        let (kab, kba) = if kind == OperatorKind::DoubleLayer {
                            (PK_K_AB, PK_K_BA)
                        } else {
                            (PK_KP_AB, PK_KP_BA)
                        };
                        if let (Some(r), Some(c)) = (rows[va], cols[vb]) {
                            m[(r, c)] += pb.get(l, kab, i, j);
                        }
                        if let (Some(r), Some(c)) = (rows[vb], cols[va]) {
                            m[(r, c)] += pb.get(l, kba, i, j);
                        }
                    }
                }
            }
        }
    }
}

/// All lags of one operator over all mesh vertices.
pub fn assemble_series(mesh: &SurfaceMesh, grid: &TimeGrid, kind: OperatorKind, quad: &QuadratureConfig) -> Result<BlockSeries> {
    let all: Vec<usize> = (0..mesh.n_vertices()).collect();
    let asm = Assembler::new(mesh, grid, quad)?;
    Ok(asm.assemble(&[(kind, all.clone(), all)]).pop().expect("one request"))
}

/// One lag of one operator over all mesh vertices.
pub fn assemble_block(
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    kind: OperatorKind,
    j: u64,
    quad: &QuadratureConfig,
) -> Result<DMatrix<f64>> {
    let j = usize::try_from(j).map_err(|_| Error::InvalidArgument(format!("lag {j} out of range")))?;
    let series = assemble_series(mesh, grid, kind, quad)?;
    Ok(match series.block(j) {
        Some(b) => b.clone(),
        None => DMatrix::zeros(mesh.n_vertices(), mesh.n_vertices()),
    })
}

/// Coupled lag blocks for the Dirichlet-to-Neumann system (row scaled, see
/// [`CoupledSeries`]).
pub fn assemble_coupled(mesh: &SurfaceMesh, grid: &TimeGrid, quad: &QuadratureConfig) -> Result<CoupledSeries> {
    let trace = mesh.trace_vertices();
    if trace.is_empty() {
        return Err(Error::InvalidArgument("no free trace vertices: every vertex of G is pinned".into()));
    }
    let all: Vec<usize> = (0..mesh.n_vertices()).collect();
    let asm = Assembler::new(mesh, grid, quad)?;
    let mut series = asm.assemble(&[
        (OperatorKind::Hypersingular, trace.clone(), trace.clone()),
        (OperatorKind::AdjointDoubleLayer, trace.clone(), all.clone()),
        (OperatorKind::DoubleLayer, all.clone(), trace.clone()),
        (OperatorKind::SingleLayer, all.clone(), all.clone()),
    ]);
    let v = series.pop().expect("V");
    let k = series.pop().expect("K");
    let kp = series.pop().expect("K'");
    let w = series.pop().expect("W");
    drop(series);

    let nc = trace.len();
    let nd = all.len();
    let dt = grid.dt();
    let mass = mass_matrix(mesh, &BasisSet::linear(trace.clone()), &BasisSet::all(mesh, SpatialBasis::Linear));
    let n_lags = [w.blocks.len(), kp.blocks.len(), k.blocks.len(), v.blocks.len(), 2].into_iter().max().unwrap();
    let mut rows = trace.clone();
    rows.extend(all.iter().copied());
    let mut blocks = Vec::with_capacity(n_lags);
    for j in 0..n_lags {
        let mut m = DMatrix::zeros(nc + nd, nc + nd);
        if let Some(b) = w.block(j) {
            m.view_mut((0, 0), (nc, nc)).copy_from(&(-b));
        }
        let mut upper = match kp.block(j) {
            Some(b) => -b,
            None => DMatrix::zeros(nc, nd),
        };
        upper += &mass * (0.5 * dt * TemporalCoupling::identity(j));
        m.view_mut((0, nc), (nc, nd)).copy_from(&upper);
        let mut lower = match k.block(j) {
            Some(b) => b.clone(),
            None => DMatrix::zeros(nd, nc),
        };
        lower -= mass.transpose() * TemporalCoupling::difference(j);
        m.view_mut((nc, 0), (nd, nc)).copy_from(&(lower * (-0.5 * dt)));
        if let Some(b) = v.block(j) {
            m.view_mut((nc, nc), (nd, nd)).copy_from(&(b * (-0.5 * dt)));
        }
        blocks.push(m);
    }
    let series = BlockSeries { label: "M".into(), blocks, rows: rows.clone(), cols: rows };
    let trace_mass = mass_matrix(mesh, &BasisSet::linear(trace.clone()), &BasisSet::linear(trace.clone()));
    Ok(CoupledSeries { series, n_trace: nc, trace_vertices: trace, n_vertices: nd, grid: *grid, trace_mass })
}

/// Collocated single-layer blocks `C^ℓ = −Σ_{k≤ℓ} V^k`: row `i` of
/// `Σ_m C^{n−m} d^m` is `⟨V u(t_n), ξ^i⟩`. Consumes the series to avoid a
/// second copy of the blocks.
pub fn cumulative_single_layer(mut v: BlockSeries) -> BlockSeries {
    let mut acc = DMatrix::zeros(v.nrows(), v.ncols());
    for b in v.blocks.iter_mut() {
        acc -= &*b;
        b.copy_from(&acc);
    }
    drop(acc);
    // The exact sum telescopes to zero beyond the light cone; drop round-off tails.
    let scale = v.max_abs();
    for b in v.blocks.iter_mut() {
        if b.amax() <= 1e-13 * scale {
            b.fill(0.0);
        }
    }
    v.label = "C".into();
    v.trim();
    v
}

/// `⟨γ^m(t − r), γ̇^n⟩` at lag `j = n − m`: the indicator of the light-cone
/// shell `[j−1, j)` minus that of `[j, j+1)`, in units of `Δt`.
fn shell_weight(j: usize, rho: f64) -> f64 {
    let inside = |lo: f64| if rho >= lo && rho < lo + 1.0 { 1.0 } else { 0.0 };
    inside(j as f64 - 1.0) - inside(j as f64)
}

/// Time weights evaluated from the hat functions directly, lag `j` at `ρ`.
fn oracle_weights(j: usize, rho: f64, dt: f64) -> (f64, f64, f64) {
    let l = j as f64;
    let g0 = dt * (hat_integral(l - rho) - hat_integral(l - 1.0 - rho));
    let g1 = hat(l - rho) - hat(l - 1.0 - rho);
    let g2 = (hat_slope(l - rho) - hat_slope(l - 1.0 - rho)) / dt;
    (g0, g1, g2)
}

/// Brute-force value of the lag-`j` entry coupling test vertex `test` and
/// trial vertex `trial`: tensor Gauss rules of `dense_order²` points on every
/// triangle pair of the two vertex patches, no light-cone splitting.
pub fn oracle_entry(
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    kind: OperatorKind,
    j: usize,
    test: usize,
    trial: usize,
    dense_order: usize,
) -> f64 {
    let rule = TriangleRule::collapsed(dense_order.max(1));
    let dt = grid.dt();
    let mut total = 0.0;
    for (ta, tri_a) in mesh.triangles().iter().enumerate() {
        let Some(ia) = tri_a.iter().position(|&v| v == test) else { continue };
        let pa = Panel::new(mesh.corners(ta), mesh.normals()[ta], mesh.areas()[ta]);
        for (tb, tri_b) in mesh.triangles().iter().enumerate() {
            let Some(ib) = tri_b.iter().position(|&v| v == trial) else { continue };
            let pb = Panel::new(mesh.corners(tb), mesh.normals()[tb], mesh.areas()[tb]);
            let nn = pa.normal.dot(&pb.normal);
            let cc = pa.curl[ia].dot(&pb.curl[ib]);
            for (la, wa) in rule.points.iter().zip(&rule.weights) {
                let x = pa.point(la);
                for (lb, wb) in rule.points.iter().zip(&rule.weights) {
                    let y = pb.point(lb);
                    let diff = x - y;
                    let r = diff.norm();
                    if r == 0.0 {
                        continue;
                    }
                    let (g0, g1, g2) = oracle_weights(j, r / dt, dt);
                    let a = diff.dot(&pa.normal);
                    let b = diff.dot(&pb.normal);
                    let phi = la[ia] * lb[ib];
                    let kernel = match kind {
                        OperatorKind::SingleLayer => phi * (-g1) / r,
                        OperatorKind::SingleLayerConstant => phi * shell_weight(j, r / dt) / r,
                        OperatorKind::Hypersingular => -(nn * phi * g2 + cc * g0) / r,
                        OperatorKind::AdjointDoubleLayer => -phi * (a / r) * (g0 / (r * r) + g1 / r),
                        OperatorKind::DoubleLayer => -phi * (b / r) * (g1 / (r * r) + g2 / r),
                    };
                    total += wa * wb * pa.area * pb.area * INV_2PI * kernel;
                }
            }
        }
    }
    total
}

/// Hypersingular entry from the second normal derivative of the retarded
/// fundamental solution, without integration by parts. Only meaningful for
/// vertex patches that are well separated.
pub fn hypersingular_direct_entry(
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    j: usize,
    test: usize,
    trial: usize,
    dense_order: usize,
) -> f64 {
    let rule = TriangleRule::collapsed(dense_order.max(1));
    let dt = grid.dt();
    let mut total = 0.0;
    for (ta, tri_a) in mesh.triangles().iter().enumerate() {
        let Some(ia) = tri_a.iter().position(|&v| v == test) else { continue };
        let pa = Panel::new(mesh.corners(ta), mesh.normals()[ta], mesh.areas()[ta]);
        for (tb, tri_b) in mesh.triangles().iter().enumerate() {
            let Some(ib) = tri_b.iter().position(|&v| v == trial) else { continue };
            let pb = Panel::new(mesh.corners(tb), mesh.normals()[tb], mesh.areas()[tb]);
            let nn = pa.normal.dot(&pb.normal);
            for (la, wa) in rule.points.iter().zip(&rule.weights) {
                let x = pa.point(la);
                for (lb, wb) in rule.points.iter().zip(&rule.weights) {
                    let diff = x - pb.point(lb);
                    let r = diff.norm();
                    let (g0, g1, g2) = oracle_weights(j, r / dt, dt);
                    let a = diff.dot(&pa.normal);
                    let b = diff.dot(&pb.normal);
                    let r2 = r * r;
                    let kernel = -a * b * g2 / (r2 * r)
                        + (nn / r2 - 3.0 * a * b / (r2 * r2)) * g1
                        + (nn / (r2 * r) - 3.0 * a * b / (r2 * r2 * r)) * g0;
                    total += wa * wb * pa.area * pb.area * 2.0 / (4.0 * PI) * la[ia] * lb[ib] * kernel;
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{gen_icosphere, gen_screen};

    fn two_panels(a: [Point; 3], b: [Point; 3]) -> SurfaceMesh {
        let mut v = a.to_vec();
        v.extend_from_slice(&b);
        SurfaceMesh::new(v, vec![[0, 1, 2], [3, 4, 5]], vec![true, true]).unwrap()
    }

    #[test]
    fn lag_weights_match_hat_formulas() {
        let dt = 0.37;
        for &rho in &[0.1, 1.5, 2.93, 7.25] {
            let k = (rho as f64).floor();
            let w = lag_weights(rho - k, dt);
            for m in 0..3 {
                let (g0, g1, g2) = oracle_weights(k as usize + m, rho, dt);
                assert!((w[0][m] - g0).abs() < 1e-14);
                assert!((w[1][m] - g1).abs() < 1e-14);
                assert!((w[2][m] - g2).abs() < 1e-12);
            }
            for lag in 0..20usize {
                if lag < k as usize || lag > k as usize + 2 {
                    let (g0, g1, g2) = oracle_weights(lag, rho, dt);
                    assert_eq!((g0, g1, g2), (0.0, 0.0, 0.0));
                }
            }
        }
    }

    /// `∫_b 1/|x−y| dy` by Duffy rules on the three triangles joining the
    /// projection of `x` to the edges (signed for exterior projections).
    fn inverse_distance_oracle(b: &Panel, x: &Point) -> f64 {
        let p = x - b.normal * (x - b.corners[0]).dot(&b.normal);
        let rule = TriangleRule::collapsed(30);
        let mut total = 0.0;
        for k in 0..3 {
            let (u, v) = (b.corners[k], b.corners[(k + 1) % 3]);
            let signed = 0.5 * (u - p).cross(&(v - p)).dot(&b.normal);
            for (l, w) in rule.points.iter().zip(&rule.weights) {
                // Collapse at p: the Duffy factor removes the 1/r singularity.
                let y = u * l[0] + p * l[1] + v * l[2];
                total += w * signed / (x - y).norm();
            }
        }
        total
    }

    #[test]
    fn polar_rule_integrates_area() {
        // Sum of g0 over lags is Δt, so Σ_lag Wcc-moment·r/Δt integrates 1.
        let mesh = gen_icosphere(0).unwrap();
        let asm = Assembler::new(&mesh, &TimeGrid::new(0.3, 4).unwrap(), &QuadratureConfig::default()).unwrap();
        let b = &asm.panels[3];
        for x in [b.centroid, b.centroid + 0.2 * b.normal, b.corners[0] * 1.3, asm.panels[9].centroid] {
            let geo = PairGeometry { nn: 1.0, c1: 0.0, c2: 0.0, need_k: false };
            let mut inner = Inner {
                dt: 0.3,
                ang: &asm.near_ang,
                rad: &asm.near_rad,
                lag0: 0,
                n_lags: 40,
                moments: vec![0.0; 40 * MOMENTS],
                cones: vec![],
                angles: vec![],
                panels: vec![],
            };
            inner.polar(b, &x, &geo);
            // Σ_lag V moments (Σ −g1 = 0) vanish; Σ φ_j-weighted g0 moments give ∫ Δt/r.
            let total_v: f64 = (0..40).map(|l| inner.moments[l * MOMENTS] + inner.moments[l * MOMENTS + 1] + inner.moments[l * MOMENTS + 2]).sum();
            assert!(total_v.abs() < 1e-12);
            let wcc: f64 = (0..40).map(|l| inner.moments[l * MOMENTS + 6]).sum::<f64>() / 0.3;
            let oracle = inverse_distance_oracle(b, &x);
            assert!((wcc - oracle).abs() < 1e-6 * oracle, "{wcc} vs {oracle}");
        }
    }

    #[test]
    fn separated_pair_matches_oracle() {
        let a = [Point::new(0.0, 0.0, 0.0), Point::new(0.4, 0.05, 0.1), Point::new(0.1, 0.35, -0.05)];
        let b = [Point::new(1.5, 0.2, 0.3), Point::new(1.7, 0.6, 0.1), Point::new(1.45, 0.5, 0.65)];
        let mesh = two_panels(a, b);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let cfg = QuadratureConfig::reference();
        for kind in OperatorKind::ALL {
            let s = assemble_series(&mesh, &grid, kind, &cfg).unwrap();
            for j in 0..5 {
                for (t, u) in [(0, 3), (1, 5), (4, 2)] {
                    let got = s.block(j).map(|m| m[(t, u)]).unwrap_or(0.0);
                    let want = oracle_entry(&mesh, &grid, kind, j, t, u, 14);
                    assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "{kind:?} j={j} ({t},{u}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn hypersingular_regularization_matches_direct_form() {
        let sphere = gen_icosphere(1).unwrap();
        let grid = TimeGrid::new(2.5, 3).unwrap();
        let v = sphere.vertices();
        let mut checked = 0;
        for i in 0..4 {
            // Antipodal vertex: patches are far apart, so r stays in one shell.
            let j = (0..v.len()).min_by(|&a, &b| (v[a] + v[i]).norm().partial_cmp(&(v[b] + v[i]).norm()).unwrap()).unwrap();
            let tris: Vec<usize> =
                (0..sphere.n_triangles()).filter(|&t| sphere.triangles()[t].iter().any(|&k| k == i || k == j)).collect();
            let (mesh, map) = sphere.submesh(&tris).unwrap();
            let (li, lj) = (map.binary_search(&i).unwrap(), map.binary_search(&j).unwrap());
            let w = assemble_series(&mesh, &grid, OperatorKind::Hypersingular, &QuadratureConfig::reference()).unwrap();
            for lag in 0..3 {
                let direct = hypersingular_direct_entry(&mesh, &grid, lag, li, lj, 16);
                let got = w.block(lag).unwrap()[(li, lj)];
                assert!((got - direct).abs() <= 1e-5 * direct.abs(), "lag {lag} ({i},{j}): {got} vs {direct}");
                checked += 1;
            }
        }
        assert_eq!(checked, 12);
    }

    #[test]
    fn flat_screen_has_no_double_layer() {
        let mesh = gen_screen(2.0, 4, 1.0).unwrap();
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let cfg = QuadratureConfig::default();
        let k = assemble_series(&mesh, &grid, OperatorKind::DoubleLayer, &cfg).unwrap();
        assert_eq!(k.max_abs(), 0.0);
    }

    #[test]
    fn causality_bound() {
        let mesh = gen_icosphere(0).unwrap();
        let grid = TimeGrid::new(2.5, 3).unwrap();
        let v = assemble_series(&mesh, &grid, OperatorKind::SingleLayer, &QuadratureConfig::default()).unwrap();
        assert!(v.lag_bound() <= 2);
        assert!(v.block(0).unwrap().amax() > 0.0);
    }
}
