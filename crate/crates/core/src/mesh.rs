//! Triangulations of the cusp-truncated faces.
//!
//! Every face is cut along horocycles at a common height `Y_cut` in the
//! vertex local models, so the cuts agree around each vertex. Edge nodes are
//! placed at heights shared by all slots of the edge, which makes the
//! identification across gluings exact. Interior points are laid out in rows
//! of the unit cusp charts and connected by a constrained Delaunay
//! triangulation of the face chart.

use std::f64::consts::LN_2;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spade::{AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation};

use crate::complex::Complex;
use crate::error::MeshError;
use crate::hyperbolic::{geodesic_samples, hyp_distance, Ideal, IdealTriangle, Membership, UHPoint};
use crate::metric::{slot_corner_positions, IdealMetric, MetricCharts, COMPLETENESS_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    /// Target edge length in hyperbolic units.
    pub h: f64,
    /// Height of the cusp cuts in the vertex local models.
    pub y_cut: f64,
    /// Smallest admissible triangle angle, in degrees.
    pub min_angle_deg: f64,
    /// Anchor of the dyadic height bands; meshes whose cut levels differ by a
    /// power of two from this value are nested. Defaults to `y_cut`.
    pub y_base: Option<f64>,
    /// Largest Euclidean row spacing high in a cusp, where faces have unit width.
    pub cusp_row_spacing: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            h: 0.1,
            y_cut: 2.0,
            min_angle_deg: 20.0,
            y_base: None,
            cusp_row_spacing: 1.0,
        }
    }
}

impl MeshConfig {
    pub fn new(h: f64, y_cut: f64) -> Self {
        Self {
            h,
            y_cut,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), MeshError> {
        if !(self.h > 0.0 && self.h <= 1.0) {
            return Err(MeshError::InvalidConfig(format!("h = {} not in (0, 1]", self.h)));
        }
        if !(self.y_cut >= 2.0) || !self.y_cut.is_finite() {
            return Err(MeshError::InvalidConfig(format!("Y_cut = {} < 2", self.y_cut)));
        }
        if !(self.min_angle_deg >= 0.0 && self.min_angle_deg < 60.0) {
            return Err(MeshError::InvalidConfig("min angle must be in [0, 60)".into()));
        }
        if let Some(base) = self.y_base {
            if !(base >= 2.0 && base <= self.y_cut) {
                return Err(MeshError::InvalidConfig(format!(
                    "y_base = {base} must lie in [2, Y_cut]"
                )));
            }
        }
        if !(self.cusp_row_spacing > 0.0) {
            return Err(MeshError::InvalidConfig("cusp row spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn base(&self) -> f64 {
        self.y_base.unwrap_or(self.y_cut)
    }

    /// Steps per doubling of height in the lower part of the lattice (even).
    pub fn steps_per_octave(&self) -> usize {
        (2.0 * (LN_2 / (2.0 * self.h)).round()).max(2.0) as usize
    }

    /// Log-height spacing of edge samples away from the cusps.
    pub fn delta(&self) -> f64 {
        LN_2 / self.steps_per_octave() as f64
    }
}

/// Smallest Euclidean triangle area accepted in a face chart.
pub const MIN_TRIANGLE_AREA: f64 = 1e-14;
/// Interior points closer than `clearance · h` to the face boundary or a spoke
/// are discarded. Each face tries these values in turn until the angle bound holds.
/// Steiner points aim this many degrees above the required minimum angle.
const REFINE_MARGIN_DEG: f64 = 2.0;
const CLEARANCES: [f64; 5] = [0.6, 0.75, 0.5, 0.9, 0.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeTag {
    Interior,
    /// On side `side` of the face, member of the global edge-node class `class`.
    Edge { side: usize, class: usize },
    /// On the cusp cut of `corner`, strictly between the two sides.
    Cut { corner: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceMesh {
    pub face: usize,
    /// Node positions in the face chart of the domain metric.
    pub nodes: Vec<UHPoint>,
    pub tags: Vec<NodeTag>,
    /// Counterclockwise node triples.
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeNodeMember {
    pub face: usize,
    pub node: usize,
    /// Position of the slot in the edge's incidence list.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeNodeClass {
    pub edge: usize,
    /// Sample index along the edge, from the tail cut upwards.
    pub index: usize,
    /// Shared height in the edge chart.
    pub y: f64,
    pub members: Vec<EdgeNodeMember>,
    /// End samples on the cusp cuts carry Dirichlet data.
    pub fixed: bool,
}

#[derive(Debug, Clone)]
pub struct ComplexMesh {
    pub complex: Arc<Complex>,
    pub charts: Arc<MetricCharts>,
    pub config: MeshConfig,
    pub faces: Vec<FaceMesh>,
    pub edge_classes: Vec<EdgeNodeClass>,
    /// First class id of each edge.
    pub edge_class_offset: Vec<usize>,
    /// Cut height in the unit cusp chart of corner `3 t + c`.
    pub corner_cut: Vec<f64>,
}

/// Serializable snapshot of a mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshDump {
    pub config: MeshConfig,
    pub faces: Vec<FaceMesh>,
    pub edge_classes: Vec<EdgeNodeClass>,
}

/// Heights `Y_base · 2^k · 2^{-j/N_k}` with `N_k` refined near the cusp so
/// that rows of a unit-width cusp strip stay at most `cusp_row_spacing` apart.
struct Lattice {
    base: f64,
    steps: usize,
    row_spacing: f64,
    /// Smallest corner scale at the vertex.
    s_min: f64,
}

impl Lattice {
    fn band_steps(&self, k: i32) -> usize {
        let top = self.base * 2f64.powi(k);
        let mut n = self.steps;
        while LN_2 / n as f64 * top / self.s_min > self.row_spacing {
            n *= 2;
        }
        n
    }

    /// Log-height step of the band `(top / 2, top]` containing `y`.
    fn step_at(&self, y: f64) -> f64 {
        let k = (y / self.base).log2().ceil() as i32;
        let k = if self.base * 2f64.powi(k - 1) >= y { k - 1 } else { k };
        LN_2 / self.band_steps(k) as f64
    }

    /// Lattice heights in `(lo, hi]` in decreasing order, each with its row parity.
    /// `hi` itself is always the first entry.
    fn heights(&self, hi: f64, lo: f64) -> Vec<(f64, usize)> {
        let mut out = vec![(hi, 0)];
        let mut k = (hi / self.base).log2().ceil() as i32 + 1;
        loop {
            let top = self.base * 2f64.powi(k);
            if top <= lo {
                break;
            }
            let n = self.band_steps(k);
            for j in 0..n {
                let y = top * 2f64.powf(-(j as f64) / n as f64);
                if y <= lo {
                    return out;
                }
                if y < hi * (1.0 - 1e-12) {
                    out.push((y, j % 2));
                } else if (y - hi).abs() <= 1e-12 * hi {
                    out[0].1 = j % 2;
                }
            }
            k -= 1;
        }
        out
    }
}

fn lattice_for_vertex(charts: &MetricCharts, cfg: &MeshConfig, v: usize) -> Lattice {
    let c = charts.complex();
    let s_min = c.vertices()[v]
        .corners
        .iter()
        .map(|&(t, k)| charts.corner(t, k).scale)
        .fold(f64::INFINITY, f64::min);
    Lattice {
        base: cfg.base(),
        steps: cfg.steps_per_octave(),
        row_spacing: cfg.cusp_row_spacing,
        s_min,
    }
}

/// Shared sample heights of edge `e` in its edge chart, ascending from the
/// tail cut to the head cut.
fn edge_samples(charts: &MetricCharts, cfg: &MeshConfig, lattices: &[Lattice], e: usize) -> Vec<f64> {
    let edge = charts.complex().edge(e);
    let (a, b) = charts.edge_height_factors(e);
    let y_cut = cfg.y_cut;
    let meet = (b / a).sqrt();
    let half = (cfg.delta() / 2.0).exp();
    let mut ys: Vec<f64> = lattices[edge.tail]
        .heights(y_cut, 0.0_f64.max(b / (meet / half)))
        .into_iter()
        .map(|(t, _)| b / t)
        .filter(|&y| y < meet / half)
        .collect();
    ys.push(meet);
    let mut top: Vec<f64> = lattices[edge.head]
        .heights(y_cut, a * meet * half)
        .into_iter()
        .map(|(t, _)| t / a)
        .filter(|&y| y > meet * half)
        .collect();
    top.reverse();
    ys.extend(top);
    ys
}

/// Face-chart position of the point `i y` of the edge chart of slot `(t, k)`.
pub(crate) fn side_point(charts: &MetricCharts, t: usize, k: usize, y: f64) -> UHPoint {
    let mut p = charts.to_slot(t, k).inverse().apply(UHPoint::new(0.0, y));
    // sides ending at the cusp at infinity are vertical lines in the face chart
    let corners = slot_corner_positions(&charts.complex().slot(t, 0), charts.face_scale(t));
    match (corners[k], corners[(k + 1) % 3]) {
        (Ideal::Infinity, Ideal::Finite(x)) | (Ideal::Finite(x), Ideal::Infinity) => p.x = x,
        _ => {}
    }
    p
}

struct FaceInput<'a> {
    t: usize,
    charts: &'a MetricCharts,
    cfg: &'a MeshConfig,
    lattices: &'a [Lattice],
    samples: &'a [Vec<f64>],
    class_offset: &'a [usize],
    corner_cut: [f64; 3],
    clearance: f64,
}

fn orient(a: UHPoint, b: UHPoint, c: UHPoint) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn min_angle(p: [UHPoint; 3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..3 {
        let (a, b, c) = (p[i], p[(i + 1) % 3], p[(i + 2) % 3]);
        let (ux, uy) = (b.x - a.x, b.y - a.y);
        let (vx, vy) = (c.x - a.x, c.y - a.y);
        let ang = (ux * vy - uy * vx).abs().atan2(ux * vx + uy * vy);
        best = best.min(ang);
    }
    best.to_degrees()
}

fn point_in_polygon(p: UHPoint, poly: &[UHPoint]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn mesh_face(input: &FaceInput) -> Result<FaceMesh, MeshError> {
    let FaceInput {
        t,
        charts,
        cfg,
        lattices,
        samples,
        class_offset,
        corner_cut,
        clearance,
    } = *input;
    let complex = charts.complex();
    let h = cfg.h;
    let mut nodes: Vec<UHPoint> = Vec::new();
    let mut tags: Vec<NodeTag> = Vec::new();
    // boundary polygon: for each side k, its samples from corner k to corner k+1,
    // then the interior nodes of the cut at corner k+1
    let mut boundary: Vec<usize> = Vec::new();
    for k in 0..3 {
        let slot = complex.slot(t, k);
        let (e, _) = complex.slot_edge(t, k);
        let ys = &samples[e];
        let ascending = slot.tail_corner() == k;
        let order: Vec<usize> = if ascending {
            (0..ys.len()).collect()
        } else {
            (0..ys.len()).rev().collect()
        };
        for &j in &order {
            nodes.push(side_point(charts, t, k, ys[j]));
            tags.push(NodeTag::Edge {
                side: k,
                class: class_offset[e] + j,
            });
            boundary.push(nodes.len() - 1);
        }
        // cut at corner k+1 runs in its cusp chart from x = 1 (side k) to x = 0 (side k+1)
        let c = (k + 1) % 3;
        let y_c = corner_cut[c];
        let v = complex.corner_vertex(t, c);
        let m = (1.0 / (y_c * lattices[v].step_at(cfg.y_cut))).ceil().max(1.0) as usize;
        let from_cusp = charts.to_cusp(t, c).inverse();
        for i in (1..m).rev() {
            nodes.push(from_cusp.apply(UHPoint::new(i as f64 / m as f64, y_c)));
            tags.push(NodeTag::Cut { corner: c });
            boundary.push(nodes.len() - 1);
        }
    }

    // spokes from the centre to the three feet
    let r = charts.face_scale(t);
    let center = UHPoint::new(0.5 * r, 0.5 * 3f64.sqrt() * r);
    nodes.push(center);
    tags.push(NodeTag::Interior);
    let feet = [
        UHPoint::new(0.0, r),
        UHPoint::new(r, r),
        UHPoint::new(0.5 * r, 0.5 * r),
    ];
    let spoke_len = hyp_distance(center, feet[0]);
    let n_spoke = (spoke_len / h).round().max(1.0) as usize;
    for foot in feet {
        let pts = geodesic_samples(center, foot, n_spoke);
        for p in &pts[1..n_spoke] {
            nodes.push(*p);
            tags.push(NodeTag::Interior);
        }
    }

    // rows in each unit cusp chart
    let clear = clearance * h;
    for c in 0..3 {
        let v = complex.corner_vertex(t, c);
        let s_c = charts.corner(t, c).scale;
        let y_c = corner_cut[c];
        let from_cusp = charts.to_cusp(t, c).inverse();
        let low = 0.5 * 3f64.sqrt();
        for (hv, parity) in lattices[v].heights(y_c * s_c, low * s_c).into_iter().skip(1) {
            let y = hv / s_c;
            if (y_c / y).ln() < clear {
                continue;
            }
            let m = (1.0 / (y * lattices[v].step_at(hv))).ceil().max(1.0) as usize;
            let offset = if parity == 1 { 0.5 } else { 0.0 };
            for i in 0..=m {
                let x = (i as f64 + offset) / m as f64;
                if x <= 0.0 || x >= 1.0 {
                    continue;
                }
                let d_side = (x.min(1.0 - x) / y).asinh();
                let d_left_spoke = ((x * x + y * y - 1.0) / (2.0 * y)).asinh();
                let d_right_spoke = (((1.0 - x).powi(2) + y * y - 1.0) / (2.0 * y)).asinh();
                if d_side < clear || d_left_spoke < clear || d_right_spoke < clear {
                    continue;
                }
                nodes.push(from_cusp.apply(UHPoint::new(x, y)));
                tags.push(NodeTag::Interior);
            }
        }
    }

    // constrained Delaunay triangulation in the face chart
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::new();
    let mut handles = Vec::with_capacity(nodes.len());
    for p in &nodes {
        let hnd = cdt
            .insert(Point2::new(p.x, p.y))
            .map_err(|e| MeshError::MeshQualityFailure {
                face: t,
                reason: format!("cannot insert node: {e:?}"),
            })?;
        handles.push(hnd);
    }
    if cdt.num_vertices() != nodes.len() {
        return Err(MeshError::MeshQualityFailure {
            face: t,
            reason: "coincident mesh nodes".into(),
        });
    }
    for i in 0..boundary.len() {
        let (a, b) = (boundary[i], boundary[(i + 1) % boundary.len()]);
        cdt.add_constraint(handles[a], handles[b]);
    }
    if cdt.num_vertices() != nodes.len() {
        return Err(MeshError::MeshQualityFailure {
            face: t,
            reason: "boundary constraints intersect".into(),
        });
    }
    let refinement = cdt.refine(
        RefinementParameters::new()
            .with_angle_limit(AngleLimit::from_deg(cfg.min_angle_deg + REFINE_MARGIN_DEG))
            .keep_constraint_edges()
            .exclude_outer_faces(true)
            .with_max_additional_vertices(nodes.len()),
    );
    if !refinement.refinement_complete {
        return Err(MeshError::MeshQualityFailure {
            face: t,
            reason: "angle refinement did not terminate".into(),
        });
    }
    let mut index_of = vec![usize::MAX; cdt.num_vertices()];
    for (i, hnd) in handles.iter().enumerate() {
        index_of[hnd.index()] = i;
    }
    let tri = IdealTriangle { scale: r };
    for v in cdt.fixed_vertices() {
        if index_of[v.index()] != usize::MAX {
            continue;
        }
        let q = cdt.vertex(v).position();
        let p = UHPoint::new(q.x, q.y);
        let inside = tri.membership(p) == Membership::Interior
            && (0..3).all(|c| charts.to_cusp(t, c).apply(p).y < corner_cut[c]);
        if !inside {
            return Err(MeshError::MeshQualityFailure {
                face: t,
                reason: format!("refinement point {p:?} outside the truncated face"),
            });
        }
        index_of[v.index()] = nodes.len();
        nodes.push(p);
        tags.push(NodeTag::Interior);
    }
    // bit k: on side k; bit 3 + c: on the cut of corner c
    let mut curves = vec![0u8; nodes.len()];
    for (i, tag) in tags.iter().enumerate() {
        curves[i] = match *tag {
            NodeTag::Interior => 0,
            NodeTag::Edge { side, .. } => 1 << side,
            NodeTag::Cut { corner } => 1 << (3 + corner),
        };
    }
    for k in 0..3 {
        let on_side: Vec<usize> = (0..nodes.len())
            .filter(|&i| matches!(tags[i], NodeTag::Edge { side, .. } if side == k))
            .collect();
        curves[on_side[0]] |= 1 << (3 + k);
        curves[on_side[on_side.len() - 1]] |= 1 << (3 + (k + 1) % 3);
    }
    let polygon: Vec<UHPoint> = boundary.iter().map(|&i| nodes[i]).collect();
    let mut triangles = Vec::new();
    for f in cdt.inner_faces() {
        let vs = f.vertices().map(|v| index_of[v.fix().index()]);
        let p = vs.map(|i| nodes[i]);
        let centroid = UHPoint::new((p[0].x + p[1].x + p[2].x) / 3.0, (p[0].y + p[1].y + p[2].y) / 3.0);
        let same_curve = curves[vs[0]] & curves[vs[1]] & curves[vs[2]] != 0;
        if same_curve || !point_in_polygon(centroid, &polygon) {
            continue;
        }
        let tri = if orient(p[0], p[1], p[2]) > 0.0 {
            vs
        } else {
            [vs[0], vs[2], vs[1]]
        };
        triangles.push(tri);
    }
    let mesh = FaceMesh {
        face: t,
        nodes,
        tags,
        triangles,
    };
    check_quality(&mesh, cfg.min_angle_deg)?;
    Ok(mesh)
}

fn class_offsets(samples: &[Vec<f64>]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(samples.len());
    let mut total = 0;
    for ys in samples {
        offsets.push(total);
        total += ys.len();
    }
    offsets
}

fn corner_cuts(charts: &MetricCharts, y_cut: f64) -> Vec<f64> {
    charts.corner.iter().map(|cm| y_cut / cm.scale).collect()
}

fn assemble_classes(complex: &Complex, samples: &[Vec<f64>], faces: &[FaceMesh]) -> Vec<EdgeNodeClass> {
    let mut classes: Vec<EdgeNodeClass> = Vec::new();
    for (e, ys) in samples.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            classes.push(EdgeNodeClass {
                edge: e,
                index: j,
                y,
                members: Vec::new(),
                fixed: j == 0 || j + 1 == ys.len(),
            });
        }
    }
    for fm in faces {
        for (node, tag) in fm.tags.iter().enumerate() {
            if let NodeTag::Edge { side, class } = *tag {
                let (_, slot) = complex.slot_edge(fm.face, side);
                classes[class].members.push(EdgeNodeMember {
                    face: fm.face,
                    node,
                    slot,
                });
            }
        }
    }
    for class in &mut classes {
        class.members.sort_by_key(|m| m.slot);
    }
    classes
}

struct BandInput<'a> {
    charts: &'a MetricCharts,
    cfg: &'a MeshConfig,
    lattices: &'a [Lattice],
    /// New lattice heights per vertex, decreasing, starting at the new cut.
    band_heights: &'a [Vec<(f64, usize)>],
    old_y: f64,
    old_len: &'a [usize],
    shift: &'a [usize],
    class_offset: &'a [usize],
}

/// Meshes the band of corner `c` between the old cut and the new one. In the
/// unit cusp chart the band is the rectangle `[0, 1] × [Y_old, Y_new] / s_c`
/// whose sides carry the lattice heights of the vertex.
fn mesh_band(ctx: &BandInput, old: &FaceMesh, face: &mut FaceMesh, c: usize) -> Result<(), MeshError> {
    let t = face.face;
    let charts = ctx.charts;
    let complex = charts.complex();
    let v = complex.corner_vertex(t, c);
    let s = charts.corner(t, c).scale;
    let to_cusp = charts.to_cusp(t, c);
    let from_cusp = to_cusp.inverse();
    let heights = &ctx.band_heights[v];
    let y_lo = ctx.old_y / s;
    let y_hi = heights[0].0 / s;
    let failure = |reason: String| MeshError::MeshQualityFailure { face: t, reason };

    let mut bottom: Vec<(UHPoint, usize)> = old
        .nodes
        .iter()
        .enumerate()
        .filter(|&(i, _)| match old.tags[i] {
            NodeTag::Cut { corner } => corner == c,
            NodeTag::Edge { side, .. } => side == c || side == (c + 2) % 3,
            NodeTag::Interior => false,
        })
        .map(|(i, p)| (to_cusp.apply(*p), i))
        .filter(|(q, _)| (q.y - y_lo).abs() <= 1e-9 * y_lo)
        .collect();
    bottom.sort_by(|a, b| a.0.x.total_cmp(&b.0.x));
    if bottom.len() < 2 {
        return Err(failure(format!("cut of corner {c} not found")));
    }
    // exact collinearity keeps the triangulation from closing the cut with slivers
    let last = bottom.len() - 1;
    for (j, (q, _)) in bottom.iter_mut().enumerate() {
        q.y = y_lo;
        if j == 0 {
            q.x = 0.0;
        } else if j == last {
            q.x = 1.0;
        }
    }

    // (cusp chart position, face node index) in boundary order
    let mut ring: Vec<(UHPoint, usize)> = bottom;
    let push = |face: &mut FaceMesh, p: UHPoint, tag: NodeTag| {
        face.nodes.push(p);
        face.tags.push(tag);
        face.nodes.len() - 1
    };
    let side_nodes = |face: &mut FaceMesh, k: usize, x: f64| -> Vec<(UHPoint, usize)> {
        let (e, _) = complex.slot_edge(t, k);
        let (a, b) = charts.edge_height_factors(e);
        let at_head = complex.slot(t, k).head_corner() == c;
        let n = heights.len();
        heights
            .iter()
            .enumerate()
            .map(|(i, &(y, _))| {
                let (ye, class) = if at_head {
                    (y / a, ctx.class_offset[e] + ctx.shift[e] + ctx.old_len[e] + (n - 1 - i))
                } else {
                    (b / y, ctx.class_offset[e] + i)
                };
                face.nodes.push(side_point(charts, t, k, ye));
                face.tags.push(NodeTag::Edge { side: k, class });
                (UHPoint::new(x, y / s), face.nodes.len() - 1)
            })
            .collect()
    };
    // side c + 2 lies on x = 1, side c on x = 0
    let mut right = side_nodes(face, (c + 2) % 3, 1.0);
    right.reverse();
    let left = side_nodes(face, c, 0.0);
    ring.extend(right);
    let m = (1.0 / (y_hi * ctx.lattices[v].step_at(heights[0].0))).ceil().max(1.0) as usize;
    for i in (1..m).rev() {
        let q = UHPoint::new(i as f64 / m as f64, y_hi);
        let id = push(face, from_cusp.apply(q), NodeTag::Cut { corner: c });
        ring.push((q, id));
    }
    ring.extend(left);

    let mut inner: Vec<(UHPoint, usize)> = Vec::new();
    for &(hv, parity) in &heights[1..] {
        let y = hv / s;
        let step = ctx.lattices[v].step_at(hv);
        let m = (1.0 / (y * step)).ceil().max(1.0) as usize;
        let offset = if parity == 1 { 0.5 } else { 0.0 };
        for i in 0..=m {
            let x = (i as f64 + offset) / m as f64;
            if x <= 0.0 || x >= 1.0 || (x.min(1.0 - x) / y).asinh() < CLEARANCES[0] * step {
                continue;
            }
            let q = UHPoint::new(x, y);
            let id = push(face, from_cusp.apply(q), NodeTag::Interior);
            inner.push((q, id));
        }
    }

    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> = ConstrainedDelaunayTriangulation::new();
    let mut handles = Vec::with_capacity(ring.len() + inner.len());
    for (q, _) in ring.iter().chain(&inner) {
        let hnd = cdt
            .insert(Point2::new(q.x, q.y))
            .map_err(|e| failure(format!("cannot insert node: {e:?}")))?;
        handles.push(hnd);
    }
    if cdt.num_vertices() != handles.len() {
        return Err(failure(format!("coincident nodes in the band of corner {c}")));
    }
    for i in 0..ring.len() {
        cdt.add_constraint(handles[i], handles[(i + 1) % ring.len()]);
    }
    let refinement = cdt.refine(
        RefinementParameters::new()
            .with_angle_limit(AngleLimit::from_deg(ctx.cfg.min_angle_deg + REFINE_MARGIN_DEG))
            .keep_constraint_edges()
            .exclude_outer_faces(true)
            .with_max_additional_vertices(handles.len()),
    );
    if !refinement.refinement_complete {
        return Err(failure("angle refinement did not terminate".into()));
    }
    let mut index_of = vec![usize::MAX; cdt.num_vertices()];
    for (hnd, (_, id)) in handles.iter().zip(ring.iter().chain(&inner)) {
        index_of[hnd.index()] = *id;
    }
    for vh in cdt.fixed_vertices() {
        if index_of[vh.index()] != usize::MAX {
            continue;
        }
        let q = cdt.vertex(vh).position();
        if !(q.x > 0.0 && q.x < 1.0 && q.y > y_lo && q.y < y_hi) {
            return Err(failure(format!("refinement point {q:?} outside the band")));
        }
        index_of[vh.index()] = push(face, from_cusp.apply(UHPoint::new(q.x, q.y)), NodeTag::Interior);
    }
    for f in cdt.inner_faces() {
        let vs = f.vertices().map(|vh| index_of[vh.fix().index()]);
        let p = vs.map(|i| face.nodes[i]);
        face.triangles.push(if orient(p[0], p[1], p[2]) > 0.0 {
            vs
        } else {
            [vs[0], vs[2], vs[1]]
        });
    }
    Ok(())
}

fn check_quality(mesh: &FaceMesh, min_angle_deg: f64) -> Result<(), MeshError> {
    let mut used = vec![false; mesh.nodes.len()];
    for tri in &mesh.triangles {
        let p = tri.map(|i| mesh.nodes[i]);
        let area = 0.5 * orient(p[0], p[1], p[2]);
        if area < MIN_TRIANGLE_AREA {
            return Err(MeshError::MeshQualityFailure {
                face: mesh.face,
                reason: format!("triangle {tri:?} has area {area:.3e}"),
            });
        }
        let angle = min_angle(p);
        if angle < min_angle_deg {
            return Err(MeshError::MeshQualityFailure {
                face: mesh.face,
                reason: format!("triangle {tri:?} has an angle of {angle:.2}°"),
            });
        }
        for i in tri {
            used[*i] = true;
        }
    }
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(MeshError::MeshQualityFailure {
            face: mesh.face,
            reason: format!("node {i} is not in any triangle"),
        });
    }
    Ok(())
}

impl ComplexMesh {
    /// Builds the mesh of the region above the cusp cuts for the domain metric `sigma`.
    pub fn build(sigma: &IdealMetric, cfg: MeshConfig) -> Result<Self, MeshError> {
        cfg.validate()?;
        let charts = MetricCharts::new(sigma, COMPLETENESS_TOL).map_err(MeshError::IncompleteMetric)?;
        Self::build_with_charts(Arc::new(charts), cfg)
    }

    pub fn build_with_charts(charts: Arc<MetricCharts>, cfg: MeshConfig) -> Result<Self, MeshError> {
        cfg.validate()?;
        let core_cfg = MeshConfig {
            y_cut: cfg.base(),
            ..cfg
        };
        let mut mesh = Self::build_core(charts, core_cfg)?;
        // one band per doubling, so that building directly and exhausting agree
        while mesh.config.y_cut < cfg.y_cut {
            mesh = mesh.extend((2.0 * mesh.config.y_cut).min(cfg.y_cut))?;
        }
        mesh.config = cfg;
        Ok(mesh)
    }

    fn build_core(charts: Arc<MetricCharts>, cfg: MeshConfig) -> Result<Self, MeshError> {
        let complex = charts.complex().clone();
        let lattices: Vec<Lattice> = (0..complex.vertices().len())
            .map(|v| lattice_for_vertex(&charts, &cfg, v))
            .collect();
        let samples: Vec<Vec<f64>> = (0..complex.edges().len())
            .map(|e| edge_samples(&charts, &cfg, &lattices, e))
            .collect();
        let edge_class_offset = class_offsets(&samples);
        let f = complex.num_triangles();
        let corner_cut = corner_cuts(&charts, cfg.y_cut);
        let faces: Vec<FaceMesh> = (0..f)
            .into_par_iter()
            .map(|t| {
                let mut result = Err(MeshError::InvalidConfig("no attempts".into()));
                for clearance in CLEARANCES {
                    result = mesh_face(&FaceInput {
                        t,
                        charts: &charts,
                        cfg: &cfg,
                        lattices: &lattices,
                        samples: &samples,
                        class_offset: &edge_class_offset,
                        corner_cut: [corner_cut[3 * t], corner_cut[3 * t + 1], corner_cut[3 * t + 2]],
                        clearance,
                    });
                    if !matches!(result, Err(MeshError::MeshQualityFailure { .. })) {
                        break;
                    }
                }
                result
            })
            .collect::<Result<_, _>>()?;
        let edge_classes = assemble_classes(&complex, &samples, &faces);
        Ok(Self {
            complex,
            charts,
            config: cfg,
            faces,
            edge_classes,
            edge_class_offset,
            corner_cut,
        })
    }

    /// Shared heights of the samples on edge `e`, ascending.
    pub fn edge_samples(&self, e: usize) -> &[EdgeNodeClass] {
        let lo = self.edge_class_offset[e];
        let hi = self
            .edge_class_offset
            .get(e + 1)
            .copied()
            .unwrap_or(self.edge_classes.len());
        &self.edge_classes[lo..hi]
    }

    /// Keeps every face mesh and adds, at each corner, a mesh of the band
    /// between the current cut and the horocycle at `next_y`.
    fn extend(&self, next_y: f64) -> Result<Self, MeshError> {
        let old_y = self.config.y_cut;
        let cfg = MeshConfig {
            y_cut: next_y,
            y_base: Some(self.config.base()),
            ..self.config
        };
        let charts = &self.charts;
        let complex = self.complex.clone();
        let lattices: Vec<Lattice> = (0..complex.vertices().len())
            .map(|v| lattice_for_vertex(charts, &cfg, v))
            .collect();
        // new vertex heights at each end, in decreasing order
        let band_heights: Vec<Vec<(f64, usize)>> = lattices
            .iter()
            .map(|l| l.heights(next_y, old_y * (1.0 + 1e-12)))
            .collect();
        let mut samples = Vec::with_capacity(complex.edges().len());
        let mut shift = Vec::with_capacity(complex.edges().len());
        for edge in complex.edges() {
            let (a, b) = charts.edge_height_factors(edge.id);
            let mut ys: Vec<f64> = band_heights[edge.tail].iter().map(|&(y, _)| b / y).collect();
            shift.push(ys.len());
            ys.extend(self.edge_samples(edge.id).iter().map(|c| c.y));
            ys.extend(band_heights[edge.head].iter().rev().map(|&(y, _)| y / a));
            samples.push(ys);
        }
        let edge_class_offset = class_offsets(&samples);
        let corner_cut = corner_cuts(charts, next_y);
        let ctx = BandInput {
            charts,
            cfg: &cfg,
            lattices: &lattices,
            band_heights: &band_heights,
            old_y,
            old_len: &self
                .complex
                .edges()
                .iter()
                .map(|e| self.edge_samples(e.id).len())
                .collect::<Vec<_>>(),
            shift: &shift,
            class_offset: &edge_class_offset,
        };
        let faces: Vec<FaceMesh> = self
            .faces
            .par_iter()
            .map(|old| {
                let mut face = old.clone();
                for tag in &mut face.tags {
                    *tag = match *tag {
                        NodeTag::Edge { side, class } => {
                            let c = &self.edge_classes[class];
                            NodeTag::Edge {
                                side,
                                class: edge_class_offset[c.edge] + shift[c.edge] + c.index,
                            }
                        }
                        NodeTag::Cut { .. } => NodeTag::Interior,
                        NodeTag::Interior => NodeTag::Interior,
                    };
                }
                for c in 0..3 {
                    mesh_band(&ctx, old, &mut face, c)?;
                }
                check_quality(&face, cfg.min_angle_deg)?;
                Ok(face)
            })
            .collect::<Result<_, MeshError>>()?;
        let edge_classes = assemble_classes(&complex, &samples, &faces);
        Ok(Self {
            complex,
            charts: charts.clone(),
            config: cfg,
            faces,
            edge_classes,
            edge_class_offset,
            corner_cut,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.faces.iter().map(|f| f.nodes.len()).sum()
    }

    pub fn num_triangles(&self) -> usize {
        self.faces.iter().map(|f| f.triangles.len()).sum()
    }

    pub fn cut_level(&self) -> f64 {
        self.config.y_cut
    }

    /// Area of the truncated face `t`: `π − Σ_c 1 / Y_c` in unit cusp charts.
    pub fn truncated_face_area(&self, t: usize) -> f64 {
        std::f64::consts::PI - (0..3).map(|c| 1.0 / self.corner_cut[3 * t + c]).sum::<f64>()
    }

    pub fn truncated_area(&self) -> f64 {
        (0..self.complex.num_triangles())
            .map(|t| self.truncated_face_area(t))
            .sum()
    }

    /// Hyperbolic area of the meshed polygon, one-point quadrature per triangle.
    pub fn mesh_area(&self) -> f64 {
        self.faces
            .iter()
            .flat_map(|f| {
                f.triangles.iter().map(move |tri| {
                    let p = tri.map(|i| f.nodes[i]);
                    let yc = (p[0].y + p[1].y + p[2].y) / 3.0;
                    0.5 * orient(p[0], p[1], p[2]) / (yc * yc)
                })
            })
            .sum()
    }

    pub fn min_angle_deg(&self) -> f64 {
        self.faces
            .iter()
            .flat_map(|f| f.triangles.iter().map(move |tri| min_angle(tri.map(|i| f.nodes[i]))))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn dump(&self) -> MeshDump {
        MeshDump {
            config: self.config,
            faces: self.faces.clone(),
            edge_classes: self.edge_classes.clone(),
        }
    }

    /// Restores a dumped mesh over the charts of its domain metric.
    pub fn from_dump(charts: Arc<MetricCharts>, dump: MeshDump) -> Result<Self, MeshError> {
        dump.config.validate()?;
        let complex = charts.complex().clone();
        let bad = |reason: String| MeshError::InvalidConfig(format!("mesh dump: {reason}"));
        if dump.faces.len() != complex.num_triangles() {
            return Err(bad(format!("{} faces for {} triangles", dump.faces.len(), complex.num_triangles())));
        }
        let mut edge_class_offset = vec![usize::MAX; complex.edges().len()];
        for (k, c) in dump.edge_classes.iter().enumerate() {
            let first = edge_class_offset
                .get_mut(c.edge)
                .ok_or_else(|| bad(format!("class {k} names edge {}", c.edge)))?;
            if *first == usize::MAX {
                *first = k;
            }
            if k - *first != c.index {
                return Err(bad(format!("classes of edge {} are not contiguous", c.edge)));
            }
        }
        if edge_class_offset.contains(&usize::MAX) || !edge_class_offset.windows(2).all(|w| w[0] < w[1]) {
            return Err(bad("every edge needs its own run of classes".into()));
        }
        for (t, f) in dump.faces.iter().enumerate() {
            if f.face != t || f.tags.len() != f.nodes.len() {
                return Err(bad(format!("face {t} is malformed")));
            }
            if f.triangles.iter().flatten().any(|&i| i >= f.nodes.len()) {
                return Err(bad(format!("face {t} has a triangle with a missing node")));
            }
            for tag in &f.tags {
                if let NodeTag::Edge { class, .. } = tag {
                    if *class >= dump.edge_classes.len() {
                        return Err(bad(format!("face {t} names class {class}")));
                    }
                }
            }
        }
        Ok(Self {
            complex,
            corner_cut: corner_cuts(&charts, dump.config.y_cut),
            charts,
            config: dump.config,
            faces: dump.faces,
            edge_classes: dump.edge_classes,
            edge_class_offset,
        })
    }

    /// Mesh with the cut moved up to `next_y`. The old face meshes are kept
    /// as they are, so every old node keeps its index.
    pub fn exhaust(&self, next_y: f64) -> Result<Exhaustion, MeshError> {
        if !(next_y >= self.config.y_cut) {
            return Err(MeshError::InvalidConfig(format!(
                "next cut level {next_y} is below the current level {}",
                self.config.y_cut
            )));
        }
        let mesh = if next_y == self.config.y_cut {
            self.clone()
        } else {
            self.extend(next_y)?
        };
        let old_to_new = self
            .faces
            .iter()
            .map(|f| (0..f.nodes.len()).map(Some).collect())
            .collect();
        Ok(Exhaustion { mesh, old_to_new })
    }
}

#[derive(Debug, Clone)]
pub struct Exhaustion {
    pub mesh: ComplexMesh,
    /// `old_to_new[t][i]`: index in the new face mesh of old node `i`.
    pub old_to_new: Vec<Vec<Option<usize>>>,
}
