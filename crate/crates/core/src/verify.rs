//! Diagnostics of a computed map: Hopf differential, edge balancing, the
//! harmonic map equations, degree and gradient bounds.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyOptions, SimplicialMap};
use crate::error::VerifyError;
use crate::hyperbolic::{IdealTriangle, Membership, UHPoint};
use crate::mesh::NodeTag;
use crate::metric::MetricCharts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Compact region: vertex heights at most this in every cusp chart.
    pub y_interior: f64,
    pub degree_samples: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            y_interior: 1.5,
            degree_samples: 32,
            seed: 20240917,
        }
    }
}

/// Per-triangle Hopf differential of one face in its face chart.
#[derive(Debug, Clone)]
pub struct HopfField {
    pub face: usize,
    pub nodes: Vec<UHPoint>,
    pub triangles: Vec<[usize; 3]>,
    pub values: Vec<Complex64>,
    /// Triangles inside the compact region and off the cusp cuts.
    pub interior: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holomorphy {
    pub norm: f64,
    /// Mean `|∂̄φ|` over the interior triangles at each node, `None` elsewhere.
    pub node_field: Vec<Option<f64>>,
}

/// Balance data at one sampled point `i y` of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceSample {
    pub y: f64,
    /// `Σ_j ∂f_j²/∂x`.
    pub flux: f64,
    /// `Im Σ_j φ_j`.
    pub hopf_im: f64,
    /// Sample lies in the middle half of the edge's truncated range.
    pub central: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeBalance {
    pub edge: usize,
    pub hopf_imbalance: f64,
    pub strong_balance: f64,
    pub weak_balance: f64,
    /// The same weak form read off the discrete energy gradient.
    pub weak_variational: f64,
    pub samples: Vec<BalanceSample>,
}

/// Energy density of `u` in the hyperbolic metrics, averaged onto nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProfile {
    pub y_interior: f64,
    pub sup_density: f64,
    pub energy: f64,
    pub ratio: f64,
    /// Largest `|∂f/∂y|² / (2 E / π r²)` over the tested edge points.
    pub edge_y_ratio: f64,
    /// Largest `|∂f/∂x|² / ((2N + 2) E / π r²)` over the tested edge points.
    pub edge_x_ratio: f64,
    pub edge_points: usize,
    pub node_density: Vec<Vec<Option<f64>>>,
}

impl LipschitzProfile {
    pub fn edge_bound_holds(&self) -> bool {
        self.edge_y_ratio <= 1.0 && self.edge_x_ratio <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeEstimate {
    pub degree: i64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config: VerifyConfig,
    pub hopf_max_abs: f64,
    pub hopf_dbar_norm: f64,
    pub hopf_dbar_per_face: Vec<f64>,
    pub edge_hopf_imbalance: Vec<f64>,
    pub strong_balance_residual: Vec<f64>,
    pub weak_balance: Vec<f64>,
    pub weak_variational: Vec<f64>,
    pub pde_residual: Vec<f64>,
    pub degree: DegreeEstimate,
    pub min_jacobian: Vec<f64>,
    pub lipschitz: LipschitzProfile,
}

fn vertex_heights(charts: &MetricCharts, t: usize, p: UHPoint) -> [f64; 3] {
    [0, 1, 2].map(|c| charts.corner(t, c).scale * charts.to_cusp(t, c).apply(p).y)
}

fn in_compact(charts: &MetricCharts, t: usize, p: UHPoint, y_max: f64) -> bool {
    vertex_heights(charts, t, p).iter().all(|&h| h <= y_max)
}

fn centroid(p: [UHPoint; 3]) -> UHPoint {
    UHPoint::new((p[0].x + p[1].x + p[2].x) / 3.0, (p[0].y + p[1].y + p[2].y) / 3.0)
}

/// `φ = |a|² − |b|² − 2i⟨a, b⟩` for the columns `a = ∂f/∂x`, `b = ∂f/∂y`
/// measured at target height `v`.
pub fn hopf_value(f: &Matrix2<f64>, v: f64) -> Complex64 {
    let (a, b) = ([f[(0, 0)], f[(1, 0)]], [f[(0, 1)], f[(1, 1)]]);
    let w = 1.0 / (v * v);
    Complex64::new(
        (a[0] * a[0] + a[1] * a[1] - b[0] * b[0] - b[1] * b[1]) * w,
        -2.0 * (a[0] * b[0] + a[1] * b[1]) * w,
    )
}

pub fn hopf(u: &SimplicialMap, t: usize, cfg: &VerifyConfig) -> HopfField {
    let face = &u.mesh.faces[t];
    let sigma = &u.mesh.charts;
    let mut values = Vec::with_capacity(face.triangles.len());
    let mut interior = Vec::with_capacity(face.triangles.len());
    for (k, g) in u.layout.triangles[t].iter().enumerate() {
        let q = u.triangle_images(t, k);
        let v = (q[0].y + q[1].y + q[2].y) / 3.0;
        values.push(hopf_value(&g.differential(q), v));
        let c = centroid(g.nodes.map(|i| face.nodes[i]));
        let off_cut = g.nodes.iter().all(|&i| !matches!(face.tags[i], NodeTag::Cut { .. }));
        interior.push(off_cut && in_compact(sigma, t, c, cfg.y_interior));
    }
    HopfField {
        face: t,
        nodes: face.nodes.clone(),
        triangles: face.triangles.clone(),
        values,
        interior,
    }
}

fn node_triangles(num_nodes: usize, triangles: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_nodes];
    for (k, tri) in triangles.iter().enumerate() {
        for &i in tri {
            out[i].push(k);
        }
    }
    out
}

/// Discrete `L²` norm of `∂̄φ`: at each interior triangle `φ` is fitted by
/// `c₀ + c₁ dz + c₂ dz̄` over the triangles sharing a vertex with it, and
/// `c₂` is taken as `∂̄φ` there.
pub fn holomorphy_residual(h: &HopfField) -> Holomorphy {
    let node_tris = node_triangles(h.nodes.len(), &h.triangles);
    let centroids: Vec<Complex64> = h
        .triangles
        .iter()
        .map(|tri| centroid(tri.map(|i| h.nodes[i])).to_complex())
        .collect();
    let area = |k: usize| {
        let [a, b, c] = h.triangles[k].map(|i| h.nodes[i]);
        0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
    };
    let mut dbar = vec![None; h.triangles.len()];
    for k in (0..h.triangles.len()).filter(|&k| h.interior[k]) {
        let mut stencil: Vec<usize> = h.triangles[k].iter().flat_map(|&i| node_tris[i].iter().copied()).collect();
        stencil.sort_unstable();
        stencil.dedup();
        let z0 = centroids[k];
        let scale = stencil.iter().map(|&j| (centroids[j] - z0).norm()).fold(0.0, f64::max);
        let mut a = DMatrix::<Complex64>::zeros(stencil.len(), 3);
        let mut rhs = DVector::<Complex64>::zeros(stencil.len());
        for (row, &j) in stencil.iter().enumerate() {
            let dz = (centroids[j] - z0) / scale;
            a[(row, 0)] = Complex64::new(1.0, 0.0);
            a[(row, 1)] = dz;
            a[(row, 2)] = dz.conj();
            rhs[row] = h.values[j];
        }
        let ah = a.adjoint();
        if let Some(c) = (&ah * &a).lu().solve(&(&ah * &rhs)) {
            dbar[k] = Some(c[2].norm() / scale);
        }
    }
    let norm = dbar
        .iter()
        .enumerate()
        .filter_map(|(k, d)| d.map(|d| area(k) * d * d))
        .sum::<f64>()
        .sqrt();
    let node_field = node_tris
        .iter()
        .map(|tris| {
            let vals: Vec<f64> = tris.iter().filter_map(|&k| dbar[k]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    Holomorphy { norm, node_field }
}

/// Differential of the local model `f_j` on triangle `k` of face `t`, seen
/// through slot `side`: σ edge chart on the domain, τ edge chart on the target.
/// Returns the differential, the image height and the domain centroid.
fn local_model(u: &SimplicialMap, t: usize, side: usize, k: usize) -> (Matrix2<f64>, f64, UHPoint) {
    let g = &u.layout.triangles[t][k];
    let face = &u.mesh.faces[t];
    let q = u.triangle_images(t, k);
    let p = centroid(g.nodes.map(|i| face.nodes[i]));
    let qc = centroid(q);
    let s = u.mesh.charts.to_slot(t, side);
    let tt = u.tau.to_slot(t, side);
    let dom = s.jacobian(p).try_inverse().expect("isometries are invertible");
    let f = tt.jacobian(qc) * g.differential(q) * dom;
    (f, tt.apply(qc).y, s.apply(p))
}

/// One-sided differential at the edge for the boundary triangle `k`: its own
/// differential extrapolated linearly in `x` with the triangles across its
/// two inner sides.
fn edge_differential(u: &SimplicialMap, t: usize, side: usize, k: usize, seg: (usize, usize)) -> Matrix2<f64> {
    let (f0, _, p0) = local_model(u, t, side, k);
    let tri = u.layout.triangles[t][k].nodes;
    let node_tris = &u.layout.node_triangles[t];
    let mut f1 = Matrix2::zeros();
    let mut x1 = 0.0;
    let mut n = 0.0;
    for a in 0..3 {
        let (i, j) = (tri[a], tri[(a + 1) % 3]);
        if (i == seg.0 && j == seg.1) || (i == seg.1 && j == seg.0) {
            continue;
        }
        if let Some(&m) = node_tris[i].iter().find(|&&m| m != k && node_tris[j].contains(&m)) {
            let (f, _, p) = local_model(u, t, side, m);
            f1 += f;
            x1 += p.x;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return f0;
    }
    let (f1, x1) = (f1 / n, x1 / n);
    if x1 <= p0.x * (1.0 + 1e-9) {
        return f0;
    }
    f0 - (f1 - f0) * (p0.x / (x1 - p0.x))
}

/// Boundary triangle of face `t` on each segment of side `side`, keyed by the
/// lower class id of the segment.
fn boundary_triangles(u: &SimplicialMap, t: usize, side: usize) -> Vec<(usize, usize, usize, usize)> {
    let face = &u.mesh.faces[t];
    let mut out = Vec::new();
    for (k, g) in u.layout.triangles[t].iter().enumerate() {
        let n = g.nodes;
        for a in 0..3 {
            let (i, j) = (n[a], n[(a + 1) % 3]);
            if let (NodeTag::Edge { side: si, class: ci }, NodeTag::Edge { side: sj, class: cj }) =
                (face.tags[i], face.tags[j])
            {
                if si == side && sj == side && ci.abs_diff(cj) == 1 {
                    let (lo, ni, nj) = if ci < cj { (ci, i, j) } else { (cj, j, i) };
                    out.push((lo, k, ni, nj));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

fn bump_integral(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    // ∫ sin²(π (y − a) / (b − a)) dy over [lo, hi] ∩ [a, b]
    let (lo, hi) = (lo.max(a), hi.min(b));
    if hi <= lo {
        return 0.0;
    }
    let l = b - a;
    let prim = |y: f64| 0.5 * (y - a) - l / (4.0 * std::f64::consts::PI) * (2.0 * std::f64::consts::PI * (y - a) / l).sin();
    prim(hi) - prim(lo)
}

fn bump(a: f64, b: f64, y: f64) -> f64 {
    if y <= a || y >= b {
        0.0
    } else {
        (std::f64::consts::PI * (y - a) / (b - a)).sin().powi(2)
    }
}

/// Support `[a, b]` of the weak-balance test function: the middle half of
/// the truncated edge in `ln y`.
pub fn bump_support(u: &SimplicialMap, e: usize) -> (f64, f64) {
    let s = u.mesh.edge_samples(e);
    let (l0, l1) = (s[0].y.ln(), s[s.len() - 1].y.ln());
    let d = 0.25 * (l1 - l0);
    ((l0 + d).exp(), (l1 - d).exp())
}

pub fn edge_balance(u: &SimplicialMap, e: usize, opts: &EnergyOptions) -> EdgeBalance {
    let edge = u.complex().edge(e);
    let samples = u.mesh.edge_samples(e);
    let offset = u.mesh.edge_class_offset[e];
    let (a, b) = bump_support(u, e);
    let mut flux = vec![0.0; samples.len() - 1];
    let mut hopf_sum = vec![Complex64::new(0.0, 0.0); samples.len() - 1];
    for slot in &edge.slots {
        let (t, side) = (slot.triangle, slot.side);
        for (lo, k, _, _) in boundary_triangles(u, t, side) {
            let s = lo - offset;
            let f = edge_differential(u, t, side, k, segment_nodes(u, t, k, lo));
            let v = 0.5 * (u.edge_log_y[lo].exp() + u.edge_log_y[lo + 1].exp());
            flux[s] += f[(1, 0)];
            hopf_sum[s] += hopf_value(&f, v);
        }
    }
    let mut out = Vec::with_capacity(flux.len());
    let (mut strong, mut imbalance, mut weak) = (0.0f64, 0.0f64, 0.0);
    for s in 0..flux.len() {
        let (y0, y1) = (samples[s].y, samples[s + 1].y);
        let y = 0.5 * (y0 + y1);
        let central = y >= a && y <= b;
        if central {
            strong = strong.max(flux[s].abs());
            imbalance = imbalance.max(hopf_sum[s].im.abs());
        }
        weak += bump_integral(a, b, y0, y1) * flux[s];
        out.push(BalanceSample {
            y,
            flux: flux[s],
            hopf_im: hopf_sum[s].im,
            central,
        });
    }
    EdgeBalance {
        edge: e,
        hopf_imbalance: imbalance,
        strong_balance: strong,
        weak_balance: weak,
        weak_variational: weak_variational(u, e, opts),
        samples: out,
    }
}

fn segment_nodes(u: &SimplicialMap, t: usize, k: usize, lo: usize) -> (usize, usize) {
    let face = &u.mesh.faces[t];
    let n = u.layout.triangles[t][k].nodes;
    let find = |c: usize| {
        *n.iter()
            .find(|&&i| matches!(face.tags[i], NodeTag::Edge { class, .. } if class == c))
            .expect("boundary triangle carries both segment ends")
    };
    (find(lo), find(lo + 1))
}

/// `−½ Σ_c ψ(y_c) y'_c ∂E/∂ln y'_c`: the first variation of the discrete
/// energy when the edge images slide by `ψ`, normalised like the weak form.
pub fn weak_variational(u: &SimplicialMap, e: usize, opts: &EnergyOptions) -> f64 {
    let (a, b) = bump_support(u, e);
    let offset = u.mesh.edge_class_offset[e];
    let mut total = 0.0;
    for (s, class) in u.mesh.edge_samples(e).iter().enumerate() {
        let w = bump(a, b, class.y);
        if w == 0.0 || class.fixed {
            continue;
        }
        let c = offset + s;
        let mut faces: Vec<usize> = class.members.iter().map(|m| m.face).collect();
        faces.sort_unstable();
        faces.dedup();
        let d: f64 = faces.iter().map(|&t| u.edge_face_derivative(c, t, opts)).sum();
        total += w * u.edge_log_y[c].exp() * d;
    }
    -0.5 * total
}

/// Residuals of the harmonic map equations at the interior nodes of face `t`,
/// from a least-squares quadratic fit of the image over the node's 2-ring.
pub fn pde_residual_field(u: &SimplicialMap, t: usize) -> Vec<Option<[f64; 2]>> {
    let face = &u.mesh.faces[t];
    let node_tris = &u.layout.node_triangles[t];
    let tris = &u.layout.triangles[t];
    let ring = |i: usize| -> Vec<usize> {
        let mut r: Vec<usize> = node_tris[i].iter().flat_map(|&k| tris[k].nodes).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    (0..face.nodes.len())
        .map(|i| {
            if face.tags[i] != NodeTag::Interior {
                return None;
            }
            let mut stencil: Vec<usize> = ring(i).into_iter().flat_map(ring).collect();
            stencil.sort_unstable();
            stencil.dedup();
            if stencil.len() < 8 {
                return None;
            }
            let p0 = face.nodes[i];
            let s = stencil
                .iter()
                .map(|&j| (face.nodes[j].x - p0.x).hypot(face.nodes[j].y - p0.y))
                .fold(0.0, f64::max);
            let mut a = DMatrix::<f64>::zeros(stencil.len(), 6);
            let mut b = DMatrix::<f64>::zeros(stencil.len(), 2);
            for (row, &j) in stencil.iter().enumerate() {
                let (x, y) = ((face.nodes[j].x - p0.x) / s, (face.nodes[j].y - p0.y) / s);
                for (col, val) in [1.0, x, y, x * x, x * y, y * y].into_iter().enumerate() {
                    a[(row, col)] = val;
                }
                b[(row, 0)] = u.targets[t][j].x;
                b[(row, 1)] = u.targets[t][j].y;
            }
            let c = a.svd(true, true).solve(&b, 1e-12).ok()?;
            let d = |k: usize| {
                let (fx, fy) = (c[(1, k)] / s, c[(2, k)] / s);
                let lap = 2.0 * (c[(3, k)] + c[(5, k)]) / (s * s);
                (fx, fy, lap)
            };
            let ((x1, y1, l1), (x2, y2, l2)) = (d(0), d(1));
            let v = c[(0, 1)];
            let r1 = l1 - 2.0 / v * (x1 * x2 + y1 * y2);
            let r2 = l2 + (x1 * x1 + y1 * y1 - x2 * x2 - y2 * y2) / v;
            Some([r1, r2])
        })
        .collect()
}

/// `(∫ |τ(u)|² dA)^½` with the tension `τ(u) = y² (r₁, r₂)` measured in the
/// target metric, so the value does not depend on the charts.
pub fn pde_residual(u: &SimplicialMap, t: usize) -> f64 {
    let face = &u.mesh.faces[t];
    let mut node_area = vec![0.0; face.nodes.len()];
    for g in &u.layout.triangles[t] {
        for &i in &g.nodes {
            node_area[i] += g.area / 3.0;
        }
    }
    pde_residual_field(u, t)
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let r = (*r)?;
            let (y, v) = (face.nodes[i].y, u.targets[t][i].y);
            Some(node_area[i] * (y * y / v).powi(2) * (r[0] * r[0] + r[1] * r[1]))
        })
        .sum::<f64>()
        .sqrt()
}

/// Random point of target face `t` below vertex height 1 at every corner.
fn sample_target_point(tau: &MetricCharts, t: usize, rng: &mut ChaCha8Rng) -> UHPoint {
    let tri = IdealTriangle::new(tau.face_scale(t));
    loop {
        let c = rng.gen_range(0..3);
        let y_max = 1.0 / tau.corner(t, c).scale;
        let p = UHPoint::new(rng.gen_range(0.02..0.98), y_max * rng.gen_range(0.05f64..1.0));
        let q = tau.to_cusp(t, c).inverse().apply(p);
        if tri.membership(q) == Membership::Interior && in_compact(tau, t, q, 1.0) {
            return q;
        }
    }
}

/// Signed number of image triangles of face `t` covering `p`; `None` when `p`
/// is too close to an image triangle edge.
fn covering_count(u: &SimplicialMap, t: usize, p: UHPoint) -> Option<i64> {
    let mut count = 0;
    for k in 0..u.layout.triangles[t].len() {
        let q = u.triangle_images(t, k);
        let det = (q[1].x - q[0].x) * (q[2].y - q[0].y) - (q[2].x - q[0].x) * (q[1].y - q[0].y);
        let w = |a: UHPoint, b: UHPoint| (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
        let l = [w(q[1], q[2]), w(q[2], q[0]), w(q[0], q[1])];
        let size = [0, 1, 2]
            .map(|i| (q[(i + 1) % 3].x - q[i].x).hypot(q[(i + 1) % 3].y - q[i].y))
            .into_iter()
            .fold(0.0, f64::max);
        let tol = 1e-9 * size * size;
        let inside = if det > 0.0 {
            l.iter().all(|&x| x > -tol)
        } else {
            l.iter().all(|&x| x < tol)
        };
        if !inside {
            continue;
        }
        if det.abs() <= tol || l.iter().any(|&x| x.abs() <= tol) {
            return None;
        }
        count += if det > 0.0 { 1 } else { -1 };
    }
    Some(count)
}

pub fn degree_estimate(u: &SimplicialMap, samples: usize, seed: u64) -> Result<DegreeEstimate, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let faces = u.targets.len();
    let mut counts = Vec::with_capacity(samples);
    while counts.len() < samples {
        let t = rng.gen_range(0..faces);
        let p = sample_target_point(&u.tau, t, &mut rng);
        if let Some(c) = covering_count(u, t, p) {
            counts.push(c);
        }
    }
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(VerifyError::DegreeInconsistent { counts });
    }
    Ok(DegreeEstimate {
        degree: counts[0],
        samples,
        seed,
    })
}

/// Hyperbolic energy density per triangle, `y² |du|² / v²` at the centroids.
fn triangle_densities(u: &SimplicialMap, t: usize) -> Vec<f64> {
    u.layout.triangles[t]
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let q = u.triangle_images(t, k);
            let yc = (g.dom_y[0] + g.dom_y[1] + g.dom_y[2]) / 3.0;
            let vc = (q[0].y + q[1].y + q[2].y) / 3.0;
            let d = g.differential(q);
            (yc / vc).powi(2) * d.norm_squared()
        })
        .collect()
}

pub fn lipschitz_profile(u: &SimplicialMap, y_interior: f64, opts: &EnergyOptions) -> LipschitzProfile {
    let sigma = &u.mesh.charts;
    let energy = u.evaluate(opts, None).map_or(f64::NAN, |e| e.energy);
    let mut sup = 0.0f64;
    let node_density: Vec<Vec<Option<f64>>> = (0..u.targets.len())
        .map(|t| {
            let dens = triangle_densities(u, t);
            let face = &u.mesh.faces[t];
            let tris = &u.layout.triangles[t];
            (0..face.nodes.len())
                .map(|i| {
                    if !in_compact(sigma, t, face.nodes[i], y_interior) {
                        return None;
                    }
                    let ks = &u.layout.node_triangles[t][i];
                    let area: f64 = ks.iter().map(|&k| tris[k].area).sum();
                    let d = ks.iter().map(|&k| tris[k].area * dens[k]).sum::<f64>() / area;
                    sup = sup.max(d);
                    Some(d)
                })
                .collect()
        })
        .collect();
    let y_cut = u.mesh.cut_level();
    let (mut ry, mut rx, mut points) = (0.0f64, 0.0f64, 0);
    for edge in u.complex().edges() {
        let (a, b) = sigma.edge_height_factors(edge.id);
        let n = edge.slots.len() as f64;
        let offset = u.mesh.edge_class_offset[edge.id];
        let samples = u.mesh.edge_samples(edge.id);
        for slot in &edge.slots {
            let (t, side) = (slot.triangle, slot.side);
            for (lo, k, _, _) in boundary_triangles(u, t, side) {
                let s = lo - offset;
                let y = 0.5 * (samples[s].y + samples[s + 1].y);
                let mut dist = (y_cut / a - y).min(y - b / y_cut);
                for other in &edge.slots {
                    let r = sigma.slot_scale(other.triangle, other.side);
                    dist = dist.min(r).min((y * y + 0.25 * r * r).sqrt() - 0.5 * r);
                }
                let r = 0.5 * dist;
                if r <= 0.0 {
                    continue;
                }
                let f = edge_differential(u, t, side, k, segment_nodes(u, t, k, lo));
                let v = 0.5 * (u.edge_log_y[lo].exp() + u.edge_log_y[lo + 1].exp());
                let fy = (f[(0, 1)].powi(2) + f[(1, 1)].powi(2)) / (v * v);
                let fx = (f[(0, 0)].powi(2) + f[(1, 0)].powi(2)) / (v * v);
                let base = energy / (std::f64::consts::PI * r * r);
                ry = ry.max(fy / (2.0 * base));
                rx = rx.max(fx / ((2.0 * n + 2.0) * base));
                points += 1;
            }
        }
    }
    LipschitzProfile {
        y_interior,
        sup_density: sup,
        energy,
        ratio: sup / energy,
        edge_y_ratio: ry,
        edge_x_ratio: rx,
        edge_points: points,
        node_density,
    }
}

pub fn diagnose(u: &SimplicialMap, cfg: &VerifyConfig, opts: &EnergyOptions) -> Result<DiagnosticsReport, VerifyError> {
    let faces: Vec<usize> = (0..u.targets.len()).collect();
    let per_face: Vec<(f64, f64, f64)> = faces
        .par_iter()
        .map(|&t| {
            let h = hopf(u, t, cfg);
            let max = h.values.iter().map(|z| z.norm()).fold(0.0, f64::max);
            (max, holomorphy_residual(&h).norm, pde_residual(u, t))
        })
        .collect();
    let edges: Vec<EdgeBalance> = (0..u.complex().edges().len())
        .into_par_iter()
        .map(|e| edge_balance(u, e, opts))
        .collect();
    let degree = degree_estimate(u, cfg.degree_samples, cfg.seed)?;
    let dbar: Vec<f64> = per_face.iter().map(|p| p.1).collect();
    Ok(DiagnosticsReport {
        config: *cfg,
        hopf_max_abs: per_face.iter().map(|p| p.0).fold(0.0, f64::max),
        hopf_dbar_norm: dbar.iter().map(|d| d * d).sum::<f64>().sqrt(),
        hopf_dbar_per_face: dbar,
        edge_hopf_imbalance: edges.iter().map(|e| e.hopf_imbalance).collect(),
        strong_balance_residual: edges.iter().map(|e| e.strong_balance).collect(),
        weak_balance: edges.iter().map(|e| e.weak_balance).collect(),
        weak_variational: edges.iter().map(|e| e.weak_variational).collect(),
        pde_residual: per_face.iter().map(|p| p.2).collect(),
        degree,
        min_jacobian: faces.iter().map(|&t| u.face_min_jacobian(t)).collect(),
        lipschitz: lipschitz_profile(u, cfg.y_interior, opts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::{samples, Complex, ComplexSpec};
    use crate::energy::{initial_map, InitialMapOptions};
    use crate::mesh::{ComplexMesh, MeshConfig};
    use crate::metric::IdealMetric;
    use crate::solver::{face_sweep, minimize, solve_with_exhaustion, SolverConfig};
    use std::sync::Arc;

    fn setup(spec: ComplexSpec, seed: Option<u64>, h: f64, stretch: f64) -> SimplicialMap {
        let c = Arc::new(Complex::build(&spec).unwrap());
        let (s, t) = match seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (IdealMetric::random_complete(c.clone(), &mut rng), IdealMetric::random_complete(c.clone(), &mut rng))
            }
            None => (IdealMetric::zero(c.clone()), IdealMetric::zero(c.clone())),
        };
        let mesh = Arc::new(ComplexMesh::build(&s, MeshConfig::new(h, 2.0)).unwrap());
        let opts = InitialMapOptions {
            cusp_stretch: vec![stretch; c.vertices().len()],
        };
        initial_map(mesh, &t, &opts).unwrap()
    }

    fn slope(hs: &[f64], rs: &[f64]) -> f64 {
        let n = hs.len() as f64;
        let (x, y): (Vec<f64>, Vec<f64>) = hs.iter().zip(rs).map(|(h, r)| (h.ln(), r.ln())).unzip();
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn identity_diagnostics_vanish() {
        let u = setup(samples::double_triangle(), None, 0.1, 1.0);
        let opts = EnergyOptions::default();
        let d = diagnose(&u, &VerifyConfig::default(), &opts).unwrap();
        assert!(d.hopf_max_abs <= 1e-12, "{}", d.hopf_max_abs);
        for v in [&d.edge_hopf_imbalance, &d.strong_balance_residual, &d.weak_balance] {
            assert!(v.iter().all(|x| x.abs() <= 1e-10), "{v:?}");
        }
        assert!(d.pde_residual.iter().all(|&r| r <= 1e-8), "{:?}", d.pde_residual);
        assert_eq!(d.degree.degree, 1);
        let dens: Vec<f64> = d.lipschitz.node_density.iter().flatten().flatten().copied().collect();
        assert!(!dens.is_empty() && dens.iter().all(|x| (x - 2.0).abs() <= 1e-12));
        assert!(d.lipschitz.edge_bound_holds() && d.lipschitz.edge_points > 0);
    }

    #[test]
    fn vertical_stretch_matches_closed_forms() {
        let c = Arc::new(Complex::build(&samples::double_triangle()).unwrap());
        let z = IdealMetric::zero(c);
        let mesh = Arc::new(ComplexMesh::build(&z, MeshConfig::new(0.05, 2.0)).unwrap());
        let tau = Arc::new(MetricCharts::new(&z, 1e-12).unwrap());
        let lam = 1.7;
        let u = SimplicialMap::from_fn(mesh.clone(), tau, |_, _, p| UHPoint::new(p.x, lam * p.y));
        let exact = |t: usize, i: usize| {
            let (p, q) = (mesh.faces[t].nodes[i], u.targets[t][i]);
            (q.x - p.x).abs() <= 1e-13 && (q.y - lam * p.y).abs() <= 1e-13 * p.y
        };
        let mut checked = (0, 0);
        for t in 0..2 {
            let h = hopf(&u, t, &VerifyConfig::default());
            for (k, g) in u.layout.triangles[t].iter().enumerate() {
                if g.nodes.iter().all(|&i| exact(t, i)) {
                    let y = (g.dom_y[0] + g.dom_y[1] + g.dom_y[2]) / 3.0;
                    let want = (1.0 - lam * lam) / (lam * y).powi(2);
                    assert!((h.values[k].re - want).abs() <= 1e-10 * want.abs(), "{} {want}", h.values[k]);
                    assert!(h.values[k].im.abs() <= 1e-10 * want.abs());
                    checked.0 += 1;
                }
            }
            let field = pde_residual_field(&u, t);
            for (i, r) in field.iter().enumerate() {
                let Some(r) = r else { continue };
                let ring_exact = u.layout.node_triangles[t][i]
                    .iter()
                    .flat_map(|&k| u.layout.triangles[t][k].nodes)
                    .flat_map(|j| u.layout.node_triangles[t][j].iter().flat_map(|&k| u.layout.triangles[t][k].nodes))
                    .all(|j| exact(t, j));
                if ring_exact {
                    let want = (1.0 - lam * lam) / (lam * mesh.faces[t].nodes[i].y);
                    assert!((r[1] - want).abs() <= 0.05 * want.abs(), "{r:?} {want}");
                    assert!(r[0].abs() <= 0.05 * want.abs());
                    checked.1 += 1;
                }
            }
        }
        assert!(checked.0 > 100 && checked.1 > 100, "{checked:?}");
    }

    #[test]
    fn hopf_ignores_horizontal_translation_of_the_target() {
        let u = setup(samples::book(), Some(5), 0.2, 1.3);
        let mut shifted = u.clone();
        for q in shifted.targets.iter_mut().flatten() {
            q.x += 0.37;
        }
        let cfg = VerifyConfig::default();
        for t in 0..3 {
            let (a, b) = (hopf(&u, t, &cfg), hopf(&shifted, t, &cfg));
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).norm() <= 1e-12 * (1.0 + x.norm()));
            }
        }
    }

    fn synthetic(h: f64, f: impl Fn(Complex64) -> Complex64) -> (Holomorphy, f64) {
        let c = Arc::new(Complex::build(&samples::double_triangle()).unwrap());
        let mesh = ComplexMesh::build(&IdealMetric::zero(c), MeshConfig::new(h, 2.0)).unwrap();
        let face = &mesh.faces[0];
        let mut values = Vec::new();
        let mut interior = Vec::new();
        let mut area = 0.0;
        for tri in &face.triangles {
            let p = tri.map(|i| face.nodes[i]);
            let c = centroid(p);
            values.push(f(c.to_complex()));
            let inside = in_compact(&mesh.charts, 0, c, 1.5);
            if inside {
                area += 0.5 * ((p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (p[1].y - p[0].y));
            }
            interior.push(inside);
        }
        let field = HopfField {
            face: 0,
            nodes: face.nodes.clone(),
            triangles: face.triangles.clone(),
            values,
            interior,
        };
        (holomorphy_residual(&field), area)
    }

    #[test]
    fn holomorphy_residual_separates_holomorphic_fields() {
        let hs = [0.2, 0.1, 0.05];
        let zero = synthetic(0.1, |_| Complex64::new(0.0, 0.0)).0;
        assert_eq!(zero.norm, 0.0);
        let sq: Vec<f64> = hs.iter().map(|&h| synthetic(h, |z| z * z).0.norm).collect();
        assert!(slope(&hs, &sq) >= 0.8, "{sq:?}");
        for &h in &hs {
            let (r, area) = synthetic(h, |z| z.conj());
            let rel = r.norm / area.sqrt();
            assert!((rel - 1.0).abs() <= 1e-6, "{rel}");
            assert!(r.node_field.iter().flatten().all(|&x| (x - 1.0).abs() <= 1e-6));
        }
    }

    #[test]
    fn degree_is_stable_under_refinement_and_exhaustion() {
        for h in [0.2, 0.1, 0.05] {
            let (u, _) = minimize(setup(samples::book(), Some(5), h, 1.3), &SolverConfig::default()).unwrap();
            assert_eq!(degree_estimate(&u, 32, 1).unwrap().degree, 1, "h = {h}");
        }
        let c = Arc::new(Complex::build(&samples::book()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = IdealMetric::random_complete(c.clone(), &mut rng);
        let t = IdealMetric::random_complete(c.clone(), &mut rng);
        let init = InitialMapOptions {
            cusp_stretch: vec![1.3; c.vertices().len()],
        };
        for schedule in [vec![2.0], vec![2.0, 4.0], vec![2.0, 4.0, 8.0]] {
            let cfg = SolverConfig {
                schedule,
                ..SolverConfig::default()
            };
            let run = solve_with_exhaustion(&s, &t, &MeshConfig::new(0.1, 2.0), &init, &cfg).unwrap();
            assert_eq!(degree_estimate(&run.map, 32, 1).unwrap().degree, 1);
        }
    }

    #[test]
    fn identity_has_degree_one_and_reflection_minus_one() {
        let u = setup(samples::isolated_triangle(), None, 0.1, 1.0);
        assert_eq!(degree_estimate(&u, 25, 1).unwrap().degree, 1);
        let r = u.tau.face_scale(0);
        let mut flipped = u.clone();
        for (q, p) in flipped.targets[0].iter_mut().zip(&u.mesh.faces[0].nodes) {
            *q = UHPoint::new(r - p.x, p.y);
        }
        let d = degree_estimate(&flipped, 25, 1).unwrap();
        assert_eq!((d.degree, d.samples, d.seed), (-1, 25, 1));
    }

    #[test]
    fn degree_flags_inconsistent_counts() {
        let mut u = setup(samples::isolated_triangle(), None, 0.2, 1.0);
        // collapse half of the face onto a point so some samples are not covered
        let r = u.tau.face_scale(0);
        for q in u.targets[0].iter_mut().filter(|q| q.x < 0.5 * r) {
            *q = UHPoint::new(0.75 * r, 1.0);
        }
        assert!(matches!(
            degree_estimate(&u, 40, 3),
            Err(VerifyError::DegreeInconsistent { .. })
        ));
    }

    #[test]
    fn strong_balance_detects_non_minimizers() {
        let u0 = setup(samples::book(), Some(5), 0.1, 1.3);
        let opts = EnergyOptions::default();
        let before: f64 = (0..4).map(|e| edge_balance(&u0, e, &opts).strong_balance).fold(0.0, f64::max);
        let (u, _) = minimize(u0, &SolverConfig::default()).unwrap();
        let after: f64 = (0..4).map(|e| edge_balance(&u, e, &opts).strong_balance).fold(0.0, f64::max);
        assert!(before >= 0.5, "{before}");
        assert!(after <= 0.2 * before, "{after} vs {before}");
    }

    #[test]
    fn weak_variational_is_the_energy_derivative_along_the_bump() {
        let u = setup(samples::book(), Some(5), 0.1, 1.3);
        let opts = EnergyOptions::default();
        let grad = u.gradient(&opts, None).unwrap();
        for e in 0..4 {
            let (a, b) = bump_support(&u, e);
            let offset = u.mesh.edge_class_offset[e];
            let mut dir = vec![0.0; grad.len()];
            for (s, class) in u.mesh.edge_samples(e).iter().enumerate() {
                if let Some(d) = u.layout.class_dof[offset + s] {
                    dir[d] = bump(a, b, class.y) * u.edge_log_y[offset + s].exp();
                }
            }
            let from_grad = -0.5 * grad.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>();
            let energy_at = |s: f64| {
                let mut w = u.clone();
                let x: Vec<f64> = u.dofs().iter().zip(&dir).map(|(x, d)| x + s * d).collect();
                w.set_dofs(&x);
                w.energy(&opts).unwrap().energy
            };
            let s = 1e-5;
            let fd = -0.5 * (energy_at(s) - energy_at(-s)) / (2.0 * s);
            let wv = weak_variational(&u, e, &opts);
            assert!((wv - from_grad).abs() <= 1e-8 * (1.0 + wv.abs()), "{wv} {from_grad}");
            assert!((wv - fd).abs() <= 1e-6 * (1.0 + wv.abs()), "{wv} {fd}");
        }
    }

    #[test]
    fn one_sided_weak_balance_approaches_the_variational_form() {
        let gap = |h: f64| {
            let u = setup(samples::book(), Some(5), h, 1.3);
            let opts = EnergyOptions::default();
            (0..4)
                .map(|e| {
                    let b = edge_balance(&u, e, &opts);
                    (b.weak_balance - b.weak_variational).abs()
                })
                .sum::<f64>()
        };
        let (coarse, fine) = (gap(0.1), gap(0.025));
        assert!(fine <= 0.25 * coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn pde_residual_is_stationary_under_a_repeated_sweep() {
        let (mut u, _) = minimize(setup(samples::book(), Some(5), 0.1, 1.3), &SolverConfig::default()).unwrap();
        let before: Vec<f64> = (0..3).map(|t| pde_residual(&u, t)).collect();
        face_sweep(&mut u, &SolverConfig::default(), None);
        for t in 0..3 {
            let after = pde_residual(&u, t);
            assert!(after <= before[t] * (1.0 + 1e-6) + 1e-12, "{after} vs {}", before[t]);
        }
    }

    #[test]
    fn diagnostics_are_deterministic() {
        let u = setup(samples::book(), Some(3), 0.2, 1.0);
        let cfg = VerifyConfig::default();
        let opts = EnergyOptions::default();
        let a = diagnose(&u, &cfg, &opts).unwrap();
        let b = diagnose(&u, &cfg, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.degree.seed, cfg.seed);
    }
}
