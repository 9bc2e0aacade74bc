//! Discrete simplicial maps and their harmonic energy.
//!
//! A map is piecewise linear on the domain mesh. Each face is drawn in its
//! σ face chart, and each image lies in the τ face chart of the same face.
//! Edge nodes carry one shared parameter per class, `log y'`, the height of the
//! image on the edge in the τ edge local model, so images of edges stay on edges.

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2};
use nalgebra_sparse::{factorization::CscCholesky, CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::SolveError;
use crate::hyperbolic::{IdealTriangle, Isometry, Membership, UHPoint};
use crate::mesh::{side_point, ComplexMesh, NodeTag};
use crate::metric::{IdealMetric, MetricCharts, COMPLETENESS_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Unconstrained minimization.
    W,
    /// Minimization with an orientation barrier on every image triangle.
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Quadrature {
    /// Exact integral of the target density over each affine image.
    #[default]
    Exact,
    /// Target density evaluated at the image of the centroid.
    Centroid,
    /// Degree-5 seven point rule for the target density.
    SevenPoint,
}

/// Density used to integrate over the domain. The energy of a surface map is
/// conformally invariant, so both give the same value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DomainDensity {
    #[default]
    Euclidean,
    Hyperbolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyOptions {
    pub quadrature: Quadrature,
    pub density: DomainDensity,
}

const CENTROID_RULE: [([f64; 3], f64); 1] = [([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1.0)];

const SEVEN_POINT_RULE: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059_715_871_789_770;
    const B1: f64 = 0.470_142_064_105_115;
    const W1: f64 = 0.132_394_152_788_506;
    const A2: f64 = 0.797_426_985_353_087;
    const B2: f64 = 0.101_286_507_323_456;
    const W2: f64 = 0.125_939_180_544_827;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

impl Quadrature {
    fn rule(self) -> &'static [([f64; 3], f64)] {
        match self {
            Quadrature::Centroid => &CENTROID_RULE,
            Quadrature::SevenPoint => &SEVEN_POINT_RULE,
            Quadrature::Exact => &[],
        }
    }
}

/// Fixed data of one domain triangle.
#[derive(Debug, Clone, Copy)]
pub struct TriangleGeom {
    pub nodes: [usize; 3],
    /// Inverse of the edge matrix `[p1 − p0, p2 − p0]`.
    pub pinv: Matrix2<f64>,
    /// Euclidean area in the σ face chart.
    pub area: f64,
    /// Heights of the corners in the σ face chart.
    pub dom_y: [f64; 3],
}

impl TriangleGeom {
    fn new(nodes: [usize; 3], p: [UHPoint; 3]) -> Self {
        let m = Matrix2::new(p[1].x - p[0].x, p[2].x - p[0].x, p[1].y - p[0].y, p[2].y - p[0].y);
        let det = m.determinant();
        let pinv = m.try_inverse().expect("mesh triangles are non-degenerate");
        Self {
            nodes,
            pinv,
            area: 0.5 * det,
            dom_y: [p[0].y, p[1].y, p[2].y],
        }
    }

    /// Hyperbolic area of the triangle by the centroid rule.
    pub fn hyperbolic_area(&self) -> f64 {
        let yc = (self.dom_y[0] + self.dom_y[1] + self.dom_y[2]) / 3.0;
        self.area / (yc * yc)
    }

    /// Euclidean differential of the affine map with images `q`.
    pub fn differential(&self, q: [UHPoint; 3]) -> Matrix2<f64> {
        let qm = Matrix2::new(q[1].x - q[0].x, q[2].x - q[0].x, q[1].y - q[0].y, q[2].y - q[0].y);
        qm * self.pinv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeDof {
    /// Two coordinates starting at this index of the DOF vector.
    Free(usize),
    /// Shared parameter of an edge-node class.
    Edge { class: usize, side: usize },
    /// Dirichlet node.
    Fixed,
}

/// DOF numbering and per-triangle data shared by all maps on one mesh.
#[derive(Debug, Clone)]
pub struct MapLayout {
    pub node_dof: Vec<Vec<NodeDof>>,
    /// `(face, node)` of each free node, in DOF order.
    pub free_nodes: Vec<(usize, usize)>,
    /// Edge class of each edge DOF, in DOF order after the node coordinates.
    pub edge_dofs: Vec<usize>,
    /// DOF index of each edge class, `None` for fixed classes.
    pub class_dof: Vec<Option<usize>>,
    pub triangles: Vec<Vec<TriangleGeom>>,
    /// Triangles incident to each node.
    pub node_triangles: Vec<Vec<Vec<usize>>>,
    pub num_dofs: usize,
}

impl MapLayout {
    pub fn new(mesh: &ComplexMesh) -> Self {
        let mut node_dof = Vec::with_capacity(mesh.faces.len());
        let mut free_nodes = Vec::new();
        for face in &mesh.faces {
            let dofs: Vec<NodeDof> = face
                .tags
                .iter()
                .enumerate()
                .map(|(i, tag)| match *tag {
                    NodeTag::Interior => {
                        free_nodes.push((face.face, i));
                        NodeDof::Free(2 * (free_nodes.len() - 1))
                    }
                    NodeTag::Edge { class, side } => NodeDof::Edge { class, side },
                    NodeTag::Cut { .. } => NodeDof::Fixed,
                })
                .collect();
            node_dof.push(dofs);
        }
        let mut edge_dofs = Vec::new();
        let mut class_dof = vec![None; mesh.edge_classes.len()];
        for (k, class) in mesh.edge_classes.iter().enumerate() {
            if !class.fixed {
                class_dof[k] = Some(2 * free_nodes.len() + edge_dofs.len());
                edge_dofs.push(k);
            }
        }
        for dofs in &mut node_dof {
            for d in dofs.iter_mut() {
                if let NodeDof::Edge { class, .. } = *d {
                    if class_dof[class].is_none() {
                        *d = NodeDof::Fixed;
                    }
                }
            }
        }
        let triangles: Vec<Vec<TriangleGeom>> = mesh
            .faces
            .iter()
            .map(|f| {
                f.triangles
                    .iter()
                    .map(|tri| TriangleGeom::new(*tri, tri.map(|i| f.nodes[i])))
                    .collect()
            })
            .collect();
        let node_triangles = mesh
            .faces
            .iter()
            .zip(&triangles)
            .map(|(f, tris)| {
                let mut adj = vec![Vec::new(); f.nodes.len()];
                for (k, tri) in tris.iter().enumerate() {
                    for &i in &tri.nodes {
                        adj[i].push(k);
                    }
                }
                adj
            })
            .collect();
        let num_dofs = 2 * free_nodes.len() + edge_dofs.len();
        Self {
            node_dof,
            free_nodes,
            edge_dofs,
            class_dof,
            triangles,
            node_triangles,
            num_dofs,
        }
    }

    pub fn num_node_dofs(&self) -> usize {
        2 * self.free_nodes.len()
    }
}

/// Relative node spread below which divided differences use the power series.
const SERIES_SPREAD: f64 = 0.25;
const SERIES_TERMS: usize = 48;

/// Divided difference of `−ln` over at most four positive nodes, repeated
/// nodes allowed. The order is the number of nodes minus one, at least 1.
pub fn neg_log_divided_difference(nodes: &[f64]) -> f64 {
    let mut x = [0.0; 4];
    let x = &mut x[..nodes.len()];
    x.copy_from_slice(nodes);
    x.sort_by(f64::total_cmp);
    divided_difference(x)
}

fn divided_difference(x: &[f64]) -> f64 {
    let n = x.len() - 1;
    let (lo, hi) = (x[0], x[n]);
    let m = x.iter().sum::<f64>() / x.len() as f64;
    if hi - lo <= SERIES_SPREAD * m {
        // −ln(m (1 + e)) = −ln m + Σ_k (−1)^k e^k / k, and the divided
        // difference of e^k is the complete homogeneous polynomial h_{k−n}
        let mut h = [0.0; SERIES_TERMS];
        h[0] = 1.0;
        for &xi in x {
            let e = (xi - m) / m;
            for j in 1..SERIES_TERMS {
                h[j] += e * h[j - 1];
            }
        }
        let mut sum = 0.0;
        for (j, hj) in h.iter().enumerate().rev() {
            let k = n + j;
            let term = hj / k as f64;
            sum += if k % 2 == 0 { term } else { -term };
        }
        sum / m.powi(n as i32)
    } else if n == 1 {
        -(hi / lo).ln() / (hi - lo)
    } else {
        (divided_difference(&x[1..]) - divided_difference(&x[..n])) / (hi - lo)
    }
}

/// Energy of one triangle and, optionally, its gradient with respect to the
/// three image points. Returns `None` when an image height is not positive or,
/// with a barrier, when the image is not positively oriented.
pub fn triangle_energy(
    g: &TriangleGeom,
    q: [UHPoint; 3],
    opts: &EnergyOptions,
    barrier: Option<f64>,
    grad: Option<&mut [[f64; 2]; 3]>,
) -> Option<(f64, f64)> {
    let gm = g.differential(q);
    let n = gm.norm_squared();
    let mut energy = 0.0;
    // Σ_k c_k / v_k², and the height derivative per corner
    let mut k_sum = 0.0;
    let mut dv = [0.0; 3];
    if opts.quadrature == Quadrature::Exact {
        // ∫_T dA / v² = 2A · (−ln)[v0, v1, v2] for affine v; the domain density
        // cancels pointwise in the integrand
        let v = [q[0].y, q[1].y, q[2].y];
        if !v.iter().all(|&y| y > 0.0) {
            return None;
        }
        let two_a = 2.0 * g.area;
        k_sum = two_a * neg_log_divided_difference(&v);
        energy = k_sum * n;
        for i in 0..3 {
            dv[i] = two_a * n * neg_log_divided_difference(&[v[0], v[1], v[2], v[i]]);
        }
    }
    for &(lam, w) in opts.quadrature.rule() {
        let v = lam[0] * q[0].y + lam[1] * q[1].y + lam[2] * q[2].y;
        if !(v > 0.0) {
            return None;
        }
        let c = match opts.density {
            DomainDensity::Euclidean => g.area * w,
            DomainDensity::Hyperbolic => {
                let yd = lam[0] * g.dom_y[0] + lam[1] * g.dom_y[1] + lam[2] * g.dom_y[2];
                // hyperbolic measure times the hyperbolic domain norm of the differential
                (g.area * w / (yd * yd)) * (yd * yd)
            }
        };
        energy += c * n / (v * v);
        k_sum += c / (v * v);
        let d = -2.0 * c * n / (v * v * v);
        for i in 0..3 {
            dv[i] += d * lam[i];
        }
    }
    let mut barrier_value = 0.0;
    let mut dg = gm * (2.0 * k_sum);
    if let Some(mu) = barrier {
        let det = gm.determinant();
        if !(det > 0.0) {
            return None;
        }
        let t = 2.0 * det / n;
        let weight = mu * g.hyperbolic_area();
        barrier_value = -weight * t.ln();
        let cof = Matrix2::new(gm[(1, 1)], -gm[(1, 0)], -gm[(0, 1)], gm[(0, 0)]);
        let dt = (cof * n - gm * (2.0 * det)) * (2.0 / (n * n));
        dg -= dt * (weight / t);
    }
    if let Some(out) = grad {
        let dq = dg * g.pinv.transpose();
        out[1] = [dq[(0, 0)], dq[(1, 0)]];
        out[2] = [dq[(0, 1)], dq[(1, 1)]];
        out[0] = [-dq[(0, 0)] - dq[(0, 1)], -dq[(1, 0)] - dq[(1, 1)]];
        for i in 0..3 {
            out[i][1] += dv[i];
        }
    }
    Some((energy, barrier_value))
}

/// Coefficient `K` with `E_T = K |G|²` for the images `q`; the Hessian of the
/// energy in the image coordinates at fixed `K` is a weighted cotangent matrix.
pub fn triangle_weight(g: &TriangleGeom, q: [UHPoint; 3], opts: &EnergyOptions) -> Option<f64> {
    if opts.quadrature == Quadrature::Exact {
        let v = [q[0].y, q[1].y, q[2].y];
        if !v.iter().all(|&y| y > 0.0) {
            return None;
        }
        return Some(2.0 * g.area * neg_log_divided_difference(&v));
    }
    let mut k = 0.0;
    for &(lam, w) in opts.quadrature.rule() {
        let v = lam[0] * q[0].y + lam[1] * q[1].y + lam[2] * q[2].y;
        if !(v > 0.0) {
            return None;
        }
        k += g.area * w / (v * v);
    }
    Some(k)
}

/// Objective of face `t` with the given node images; node gradients are added
/// to `grad` when present.
pub fn face_objective(
    layout: &MapLayout,
    t: usize,
    targets: &[UHPoint],
    opts: &EnergyOptions,
    barrier: Option<f64>,
    mut grad: Option<&mut [[f64; 2]]>,
) -> Option<(f64, f64)> {
    let mut e = 0.0;
    let mut b = 0.0;
    for g in &layout.triangles[t] {
        let q = g.nodes.map(|i| targets[i]);
        let mut gr = [[0.0; 2]; 3];
        let want = grad.is_some();
        let (ek, bk) = triangle_energy(g, q, opts, barrier, want.then_some(&mut gr))?;
        e += ek;
        b += bk;
        if let Some(out) = grad.as_deref_mut() {
            for (j, &i) in g.nodes.iter().enumerate() {
                out[i][0] += gr[j][0];
                out[i][1] += gr[j][1];
            }
        }
    }
    Some((e, b))
}

/// A piecewise linear simplicial map from the meshed σ complex to the τ complex.
#[derive(Debug, Clone)]
pub struct SimplicialMap {
    pub mesh: Arc<ComplexMesh>,
    pub tau: Arc<MetricCharts>,
    pub layout: Arc<MapLayout>,
    /// Image of every node in the τ face chart of its face.
    pub targets: Vec<Vec<UHPoint>>,
    /// `log y'` of each edge-node class.
    pub edge_log_y: Vec<f64>,
    /// τ face chart to τ edge chart of slot `(t, k)`, inverted, at `3 t + k`.
    from_slot: Arc<Vec<Isometry>>,
}

/// Energy and its parts for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyValue {
    pub energy: f64,
    pub barrier: f64,
    pub per_face: Vec<f64>,
}

impl EnergyValue {
    pub fn objective(&self) -> f64 {
        self.energy + self.barrier
    }
}

impl SimplicialMap {
    /// Map with the given edge parameters; free and fixed node images are
    /// taken from `targets`, edge node images are recomputed.
    pub fn new(
        mesh: Arc<ComplexMesh>,
        tau: Arc<MetricCharts>,
        targets: Vec<Vec<UHPoint>>,
        edge_log_y: Vec<f64>,
    ) -> Self {
        let layout = Arc::new(MapLayout::new(&mesh));
        let f = mesh.complex.num_triangles();
        let from_slot = (0..3 * f)
            .map(|k| tau.to_slot(k / 3, k % 3).inverse())
            .collect();
        let mut map = Self {
            mesh,
            tau,
            layout,
            targets,
            edge_log_y,
            from_slot: Arc::new(from_slot),
        };
        map.refresh_edge_targets();
        map
    }

    /// Builds a map from a rule giving the image of every node; edge nodes are
    /// projected to their edge by keeping the height in the τ edge chart.
    pub fn from_fn(
        mesh: Arc<ComplexMesh>,
        tau: Arc<MetricCharts>,
        mut f: impl FnMut(usize, usize, UHPoint) -> UHPoint,
    ) -> Self {
        let targets: Vec<Vec<UHPoint>> = mesh
            .faces
            .iter()
            .map(|face| {
                face.nodes
                    .iter()
                    .enumerate()
                    .map(|(i, p)| f(face.face, i, *p))
                    .collect()
            })
            .collect();
        let mut edge_log_y = vec![0.0; mesh.edge_classes.len()];
        for (k, class) in mesh.edge_classes.iter().enumerate() {
            let m = &class.members[0];
            let side = match mesh.faces[m.face].tags[m.node] {
                NodeTag::Edge { side, .. } => side,
                _ => unreachable!("edge class members are edge nodes"),
            };
            let q = tau.to_slot(m.face, side).apply(targets[m.face][m.node]);
            edge_log_y[k] = q.y.ln();
        }
        Self::new(mesh, tau, targets, edge_log_y)
    }

    pub fn complex(&self) -> &Arc<crate::complex::Complex> {
        &self.mesh.complex
    }

    /// Image of `i y'` of the τ edge chart of slot `(t, k)` in the τ face chart.
    pub fn edge_point(&self, t: usize, k: usize, log_y: f64) -> UHPoint {
        side_point(&self.tau, t, k, log_y.exp())
    }

    fn refresh_edge_targets(&mut self) {
        for (t, face) in self.mesh.faces.iter().enumerate() {
            for (i, tag) in face.tags.iter().enumerate() {
                if let NodeTag::Edge { class, side } = *tag {
                    self.targets[t][i] = side_point(&self.tau, t, side, self.edge_log_y[class].exp());
                }
            }
        }
    }

    pub fn set_edge_param(&mut self, class: usize, log_y: f64) {
        self.edge_log_y[class] = log_y;
        for m in &self.mesh.edge_classes[class].members {
            if let NodeTag::Edge { side, .. } = self.mesh.faces[m.face].tags[m.node] {
                self.targets[m.face][m.node] = side_point(&self.tau, m.face, side, log_y.exp());
            }
        }
    }

    pub fn dofs(&self) -> Vec<f64> {
        let l = &self.layout;
        let mut x = Vec::with_capacity(l.num_dofs);
        for &(t, i) in &l.free_nodes {
            x.push(self.targets[t][i].x);
            x.push(self.targets[t][i].y);
        }
        for &c in &l.edge_dofs {
            x.push(self.edge_log_y[c]);
        }
        x
    }

    pub fn set_dofs(&mut self, x: &[f64]) {
        let layout = self.layout.clone();
        for (k, &(t, i)) in layout.free_nodes.iter().enumerate() {
            self.targets[t][i] = UHPoint::new(x[2 * k], x[2 * k + 1]);
        }
        let base = layout.num_node_dofs();
        for (k, &c) in layout.edge_dofs.iter().enumerate() {
            if self.edge_log_y[c] != x[base + k] {
                self.set_edge_param(c, x[base + k]);
            }
        }
    }

    /// Checks that every image has positive height.
    pub fn validate(&self) -> Result<(), SolveError> {
        for (t, nodes) in self.targets.iter().enumerate() {
            for (i, q) in nodes.iter().enumerate() {
                if !(q.y > 0.0) || !q.x.is_finite() {
                    return Err(SolveError::InvalidTarget {
                        face: t,
                        node: i,
                        v: q.y,
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether every free node image lies in its closed target face.
    pub fn images_in_faces(&self) -> bool {
        self.layout.free_nodes.iter().all(|&(t, i)| self.in_target_face(t, self.targets[t][i]))
    }

    pub fn in_target_face(&self, t: usize, q: UHPoint) -> bool {
        IdealTriangle::new(self.tau.face_scale(t)).membership(q) != Membership::Outside
    }

    pub fn triangle_images(&self, t: usize, k: usize) -> [UHPoint; 3] {
        self.layout.triangles[t][k].nodes.map(|i| self.targets[t][i])
    }

    /// Energy of face `t`, with the barrier part when `barrier` is set.
    pub fn face_energy(&self, t: usize, opts: &EnergyOptions, barrier: Option<f64>) -> Option<(f64, f64)> {
        let mut e = 0.0;
        let mut b = 0.0;
        for (k, g) in self.layout.triangles[t].iter().enumerate() {
            let (ek, bk) = triangle_energy(g, self.triangle_images(t, k), opts, barrier, None)?;
            e += ek;
            b += bk;
        }
        Some((e, b))
    }

    pub fn evaluate(&self, opts: &EnergyOptions, barrier: Option<f64>) -> Option<EnergyValue> {
        let mut per_face = Vec::with_capacity(self.targets.len());
        let mut energy = 0.0;
        let mut barrier_sum = 0.0;
        for t in 0..self.targets.len() {
            let (e, b) = self.face_energy(t, opts, barrier)?;
            per_face.push(e);
            energy += e;
            barrier_sum += b;
        }
        Some(EnergyValue {
            energy,
            barrier: barrier_sum,
            per_face,
        })
    }

    /// Harmonic energy of the map.
    pub fn energy(&self, opts: &EnergyOptions) -> Result<EnergyValue, SolveError> {
        self.validate()?;
        Ok(self.evaluate(opts, None).expect("validated targets have positive heights"))
    }

    /// Gradients with respect to every node image, per face.
    pub fn node_gradients(&self, opts: &EnergyOptions, barrier: Option<f64>) -> Option<Vec<Vec<[f64; 2]>>> {
        let mut out: Vec<Vec<[f64; 2]>> = self.targets.iter().map(|n| vec![[0.0; 2]; n.len()]).collect();
        for (t, tris) in self.layout.triangles.iter().enumerate() {
            for (k, g) in tris.iter().enumerate() {
                let mut gr = [[0.0; 2]; 3];
                triangle_energy(g, self.triangle_images(t, k), opts, barrier, Some(&mut gr))?;
                for (j, &i) in g.nodes.iter().enumerate() {
                    out[t][i][0] += gr[j][0];
                    out[t][i][1] += gr[j][1];
                }
            }
        }
        Some(out)
    }

    /// Derivative of an edge node image with respect to its class parameter.
    pub fn edge_node_velocity(&self, t: usize, side: usize, log_y: f64) -> [f64; 2] {
        let y = log_y.exp();
        let j = self.from_slot[3 * t + side].jacobian(UHPoint::new(0.0, y));
        [j[(0, 1)] * y, j[(1, 1)] * y]
    }

    /// Chain rule from node-image gradients to the DOF vector.
    pub fn assemble_gradient(&self, node_grad: &[Vec<[f64; 2]>]) -> Vec<f64> {
        let l = &self.layout;
        let mut g = vec![0.0; l.num_dofs];
        for (k, &(t, i)) in l.free_nodes.iter().enumerate() {
            g[2 * k] = node_grad[t][i][0];
            g[2 * k + 1] = node_grad[t][i][1];
        }
        for (t, dofs) in l.node_dof.iter().enumerate() {
            for (i, d) in dofs.iter().enumerate() {
                if let NodeDof::Edge { class, side } = *d {
                    let v = self.edge_node_velocity(t, side, self.edge_log_y[class]);
                    let idx = l.class_dof[class].expect("free edge class");
                    g[idx] += node_grad[t][i][0] * v[0] + node_grad[t][i][1] * v[1];
                }
            }
        }
        g
    }

    /// Gradient of energy plus barrier over the free DOFs.
    pub fn gradient(&self, opts: &EnergyOptions, barrier: Option<f64>) -> Option<Vec<f64>> {
        Some(self.assemble_gradient(&self.node_gradients(opts, barrier)?))
    }

    /// One-sided contribution of the slot through face `t` to the derivative of
    /// the energy in the parameter of `class`.
    pub fn edge_face_derivative(&self, class: usize, t: usize, opts: &EnergyOptions) -> f64 {
        let mut total = 0.0;
        for m in self.mesh.edge_classes[class].members.iter().filter(|m| m.face == t) {
            let NodeTag::Edge { side, .. } = self.mesh.faces[t].tags[m.node] else {
                continue;
            };
            let v = self.edge_node_velocity(t, side, self.edge_log_y[class]);
            for &k in &self.layout.node_triangles[t][m.node] {
                let g = &self.layout.triangles[t][k];
                let mut gr = [[0.0; 2]; 3];
                triangle_energy(g, self.triangle_images(t, k), opts, None, Some(&mut gr));
                let j = g.nodes.iter().position(|&i| i == m.node).expect("incident triangle");
                total += gr[j][0] * v[0] + gr[j][1] * v[1];
            }
        }
        total
    }

    /// Gradient norm with node components measured against the hyperbolic
    /// length at the image, so values are comparable across the cusps.
    pub fn stationarity(&self, grad: &[f64]) -> f64 {
        let l = &self.layout;
        let mut s = 0.0;
        for (k, &(t, i)) in l.free_nodes.iter().enumerate() {
            let v = self.targets[t][i].y;
            s += (grad[2 * k] * v).powi(2) + (grad[2 * k + 1] * v).powi(2);
        }
        for g in &grad[l.num_node_dofs()..] {
            s += g * g;
        }
        s.sqrt()
    }

    /// Smallest determinant of the differential over all mesh triangles.
    pub fn min_jacobian(&self) -> f64 {
        let mut best = f64::INFINITY;
        for t in 0..self.targets.len() {
            best = best.min(self.face_min_jacobian(t));
        }
        best
    }

    pub fn face_min_jacobian(&self, t: usize) -> f64 {
        self.layout.triangles[t]
            .iter()
            .enumerate()
            .map(|(k, g)| g.differential(self.triangle_images(t, k)).determinant())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Options of the initial map.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialMapOptions {
    /// Per-vertex factor `λ_v` multiplying cusp heights in the boundary data;
    /// empty means 1 at every vertex.
    pub cusp_stretch: Vec<f64>,
}

impl InitialMapOptions {
    fn stretch(&self, v: usize) -> f64 {
        self.cusp_stretch.get(v).copied().unwrap_or(1.0)
    }

    /// Height factor at vertex height `y` near vertex `v`: 1 up to height 1,
    /// the full stretch from height 2 on, geometric in between.
    pub fn stretch_at(&self, v: usize, y: f64) -> f64 {
        self.stretch(v).powf(y.log2().clamp(0.0, 1.0))
    }
}

/// The map that is the identity in the coordinates of the vertex local models
/// near the cusps, moves edge nodes along their edges, and extends harmonically
/// (in the Euclidean sense of the face charts) over the interior of each face.
pub fn initial_map(
    mesh: Arc<ComplexMesh>,
    tau: &IdealMetric,
    opts: &InitialMapOptions,
) -> Result<SimplicialMap, SolveError> {
    let tau_charts = Arc::new(MetricCharts::new(tau, COMPLETENESS_TOL).map_err(SolveError::IncompleteMetric)?);
    let sigma = &mesh.charts;
    let complex = mesh.complex.clone();
    if tau.complex().counts() != complex.counts() || tau.num_shifts() != sigma.metric.num_shifts() {
        return Err(SolveError::InvalidConfig("σ and τ live on different complexes".into()));
    }
    if opts.cusp_stretch.iter().any(|l| !(*l > 0.5 && *l < 2.0)) {
        // outside (1/2, 2) the ramp would not be monotone
        return Err(SolveError::InvalidConfig("cusp stretch factors must lie in (1/2, 2)".into()));
    }
    let same = tau.shifts() == sigma.metric.shifts() && opts.cusp_stretch.iter().all(|&l| l == 1.0);

    // edge parameters: log y' = log y + c(y), with c moving from the tail value
    // (below tail vertex height 1) to the head value (above head vertex height 1)
    let mut edge_log_y = vec![0.0; mesh.edge_classes.len()];
    for edge in complex.edges() {
        let (a_s, b_s) = sigma.edge_height_factors(edge.id);
        let (a_t, b_t) = tau_charts.edge_height_factors(edge.id);
        let c_tail = (b_t / b_s).ln();
        let c_head = (a_s / a_t).ln();
        let (lo, hi) = (b_s.ln(), (1.0 / a_s).ln());
        for class in mesh.edge_samples(edge.id) {
            let ly = class.y.ln();
            let c = if same {
                0.0
            } else if hi - lo < 1e-12 {
                if ly < lo { c_tail } else { c_head }
            } else {
                let s = ((ly - lo) / (hi - lo)).clamp(0.0, 1.0);
                c_tail + s * (c_head - c_tail)
            };
            let stretch = opts.stretch_at(edge.head, a_s * class.y) / opts.stretch_at(edge.tail, b_s / class.y);
            let k = mesh.edge_class_offset[edge.id] + class.index;
            edge_log_y[k] = ly + c + stretch.ln();
        }
    }

    let mut targets: Vec<Vec<UHPoint>> = mesh.faces.iter().map(|f| f.nodes.clone()).collect();
    // nodes deep in the cusp neighbourhoods (vertex height ≥ 2) follow the cusp
    // rule; the rest of each face is filled in harmonically
    let mut movable: Vec<Vec<bool>> = mesh.faces.iter().map(|f| vec![true; f.nodes.len()]).collect();
    if !same {
        let cusp_rule = |t: usize, corner: usize, p: UHPoint| {
            let v = complex.corner_vertex(t, corner);
            let q = sigma.to_cusp(t, corner).apply(p);
            let ratio = sigma.corner(t, corner).scale / tau_charts.corner(t, corner).scale;
            let height = sigma.corner(t, corner).scale * q.y;
            let image = UHPoint::new(q.x, q.y * ratio * opts.stretch_at(v, height));
            tau_charts.to_cusp(t, corner).inverse().apply(image)
        };
        for face in &mesh.faces {
            let t = face.face;
            let tri = IdealTriangle::new(tau_charts.face_scale(t));
            for (i, tag) in face.tags.iter().enumerate() {
                let corner = match *tag {
                    NodeTag::Cut { corner } => Some(corner),
                    NodeTag::Interior => (0..3).find(|&c| {
                        let y = sigma.to_cusp(t, c).apply(face.nodes[i]).y;
                        sigma.corner(t, c).scale * y >= 2.0
                    }),
                    NodeTag::Edge { .. } => None,
                };
                if let Some(c) = corner {
                    targets[t][i] = project_into_face(&tri, cusp_rule(t, c, face.nodes[i]));
                    movable[t][i] = false;
                }
            }
        }
    }
    let mut map = SimplicialMap::new(mesh.clone(), tau_charts, targets, edge_log_y);
    if !same {
        for t in 0..mesh.faces.len() {
            harmonic_extension_masked(&mut map, t, &movable[t])?;
        }
    }
    map.validate()?;
    Ok(map)
}

/// Cotangent weights of the Euclidean Dirichlet form of face `t`.
pub fn cotangent_weights(map: &SimplicialMap, t: usize) -> Vec<(usize, usize, f64)> {
    let face = &map.mesh.faces[t];
    let mut out = Vec::with_capacity(3 * face.triangles.len());
    for tri in &face.triangles {
        let p = tri.map(|i| face.nodes[i]);
        for k in 0..3 {
            let (a, b, c) = (p[k], p[(k + 1) % 3], p[(k + 2) % 3]);
            let (ux, uy) = (b.x - a.x, b.y - a.y);
            let (vx, vy) = (c.x - a.x, c.y - a.y);
            let cot = (ux * vx + uy * vy) / (ux * vy - uy * vx).abs();
            out.push((tri[(k + 1) % 3], tri[(k + 2) % 3], 0.5 * cot));
        }
    }
    out
}

/// Replaces the free node images of face `t` by the discrete Euclidean
/// harmonic extension of the current boundary images.
pub fn harmonic_extension(map: &mut SimplicialMap, t: usize) -> Result<(), SolveError> {
    let movable: Vec<bool> = map.layout.node_dof[t].iter().map(|d| matches!(d, NodeDof::Free(_))).collect();
    harmonic_extension_masked(map, t, &movable)
}

/// Harmonic extension over the free nodes of face `t` marked `movable`, with
/// all other images as boundary data.
pub fn harmonic_extension_masked(map: &mut SimplicialMap, t: usize, movable: &[bool]) -> Result<(), SolveError> {
    let dofs = &map.layout.node_dof[t];
    let mut local = vec![usize::MAX; dofs.len()];
    let mut free = Vec::new();
    for (i, d) in dofs.iter().enumerate() {
        if matches!(d, NodeDof::Free(_)) && movable[i] {
            local[i] = free.len();
            free.push(i);
        }
    }
    if free.is_empty() {
        return Ok(());
    }
    let n = free.len();
    let mut coo = CooMatrix::new(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    for (i, j, w) in cotangent_weights(map, t) {
        for (a, b) in [(i, j), (j, i)] {
            if local[a] == usize::MAX {
                continue;
            }
            coo.push(local[a], local[a], w);
            if local[b] == usize::MAX {
                let q = map.targets[t][b];
                rhs[(local[a], 0)] += w * q.x;
                rhs[(local[a], 1)] += w * q.y;
            } else {
                coo.push(local[a], local[b], -w);
            }
        }
    }
    let csc = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&csc)
        .map_err(|e| SolveError::InvalidConfig(format!("face {t}: Laplacian is not positive definite: {e}")))?;
    let sol = chol.solve(&rhs);
    let tri = IdealTriangle::new(map.tau.face_scale(t));
    for (k, &i) in free.iter().enumerate() {
        let q = project_into_face(&tri, UHPoint::new(sol[(k, 0)], sol[(k, 1)]));
        map.targets[t][i] = q;
    }
    Ok(())
}

/// Moves a point outside the ideal triangle `r T̃` just inside it.
pub fn project_into_face(tri: &IdealTriangle, p: UHPoint) -> UHPoint {
    if tri.membership(p) != Membership::Outside {
        return p;
    }
    let r = tri.scale;
    let eps = 1e-9;
    let mut q = UHPoint::new(p.x.clamp(eps * r, (1.0 - eps) * r), p.y.max(eps * r));
    let (dx, dy) = (q.x - 0.5 * r, q.y);
    let d = dx.hypot(dy);
    if d < 0.5 * r * (1.0 + eps) {
        let s = 0.5 * r * (1.0 + eps) / d;
        q = UHPoint::new(0.5 * r + dx * s, dy * s);
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::{samples, Complex};
    use crate::mesh::MeshConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn book_pair(seed: u64) -> (IdealMetric, IdealMetric) {
        let c = Arc::new(Complex::build(&samples::book()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = IdealMetric::random_complete(c.clone(), &mut rng);
        let t = IdealMetric::random_complete(c, &mut rng);
        (s, t)
    }

    fn identity(sigma: &IdealMetric, h: f64) -> SimplicialMap {
        let mesh = Arc::new(ComplexMesh::build(sigma, MeshConfig::new(h, 2.0)).unwrap());
        initial_map(mesh, sigma, &InitialMapOptions::default()).unwrap()
    }

    #[test]
    fn identity_initial_map_is_exact() {
        let (s, _) = book_pair(1);
        let map = identity(&s, 0.2);
        for (face, targets) in map.mesh.faces.iter().zip(&map.targets) {
            for (p, q) in face.nodes.iter().zip(targets) {
                assert!((p.x - q.x).abs() <= 1e-12 * p.y && (p.y - q.y).abs() <= 1e-12 * p.y);
            }
        }
    }

    #[test]
    fn identity_energy_is_twice_the_area() {
        let c = Arc::new(Complex::build(&samples::double_triangle()).unwrap());
        let m = IdealMetric::zero(c);
        let mut prev = f64::INFINITY;
        for h in [0.2, 0.1, 0.05] {
            let map = identity(&m, h);
            let e = map.energy(&EnergyOptions::default()).unwrap().energy;
            let err = (e / (2.0 * map.mesh.truncated_area()) - 1.0).abs();
            assert!(err < prev, "h = {h}: {err} after {prev}");
            prev = err;
        }
        assert!(prev < 0.01, "{prev}");
    }

    #[test]
    fn triangle_energy_matches_cotangent_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let opts = EnergyOptions {
            quadrature: Quadrature::Centroid,
            ..Default::default()
        };
        for _ in 0..100 {
            let p: [UHPoint; 3] = std::array::from_fn(|_| UHPoint::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0)));
            let o = (p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[1].y - p[0].y) * (p[2].x - p[0].x);
            if o.abs() < 1e-2 {
                continue;
            }
            let p = if o > 0.0 { p } else { [p[0], p[2], p[1]] };
            // images with centroid height 1, so the density at the centroid is 1
            let mut q: [UHPoint; 3] = std::array::from_fn(|_| UHPoint::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.5..1.5)));
            let mean = (q[0].y + q[1].y + q[2].y) / 3.0;
            for qi in &mut q {
                qi.y += 1.0 - mean;
            }
            let g = TriangleGeom::new([0, 1, 2], p);
            let (e, _) = triangle_energy(&g, q, &opts, None, None).unwrap();
            let mut cot = 0.0;
            for k in 0..3 {
                let (a, b, c) = (p[k], p[(k + 1) % 3], p[(k + 2) % 3]);
                let (ux, uy, vx, vy) = (b.x - a.x, b.y - a.y, c.x - a.x, c.y - a.y);
                let w = (ux * vx + uy * vy) / (ux * vy - uy * vx);
                let (qb, qc) = (q[(k + 1) % 3], q[(k + 2) % 3]);
                cot += 0.5 * w * ((qb.x - qc.x).powi(2) + (qb.y - qc.y).powi(2));
            }
            assert!((e - cot).abs() <= 1e-10 * cot.abs().max(1.0), "{e} vs {cot}");
        }
    }

    #[test]
    fn domain_density_does_not_change_the_energy() {
        let (s, t) = book_pair(3);
        let mesh = Arc::new(ComplexMesh::build(&s, MeshConfig::new(0.2, 2.0)).unwrap());
        let map = initial_map(mesh, &t, &InitialMapOptions::default()).unwrap();
        for quadrature in [Quadrature::Centroid, Quadrature::SevenPoint] {
            let e = |density| {
                map.energy(&EnergyOptions { quadrature, density }).unwrap().energy
            };
            let (a, b) = (e(DomainDensity::Euclidean), e(DomainDensity::Hyperbolic));
            assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
        }
    }

    fn check_gradient(map: &SimplicialMap, opts: &EnergyOptions, barrier: Option<f64>) {
        let x0 = map.dofs();
        assert!(x0.len() >= 100, "{} dofs", x0.len());
        let grad = map.gradient(opts, barrier).unwrap();
        let obj = |x: &[f64]| {
            let mut m = map.clone();
            m.set_dofs(x);
            m.evaluate(opts, barrier).unwrap().objective()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut idx: Vec<usize> = (0..x0.len()).step_by((x0.len() / 150).max(1)).collect();
        idx.extend(map.layout.num_node_dofs()..x0.len());
        let mut worst = 0.0f64;
        for &i in &idx {
            let step = 1e-4 * x0[i].abs().max(1e-1) * rng.gen_range(0.5..1.0);
            let at = |s: f64| {
                let mut x = x0.clone();
                x[i] += s;
                obj(&x)
            };
            // fourth order central difference
            let fd = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
            let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-6, "worst relative error {worst}");
    }

    fn generic_map() -> SimplicialMap {
        let (s, t) = book_pair(5);
        let mesh = Arc::new(ComplexMesh::build(&s, MeshConfig::new(0.2, 2.0)).unwrap());
        let opts = InitialMapOptions {
            cusp_stretch: vec![1.3; mesh.complex.vertices().len()],
        };
        initial_map(mesh, &t, &opts).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences_mode_w() {
        let map = generic_map();
        check_gradient(&map, &EnergyOptions::default(), None);
        let seven = EnergyOptions {
            quadrature: Quadrature::SevenPoint,
            density: DomainDensity::Hyperbolic,
        };
        check_gradient(&map, &seven, None);
    }

    #[test]
    fn gradient_matches_finite_differences_mode_d() {
        let map = generic_map();
        assert!(map.min_jacobian() > 0.0);
        check_gradient(&map, &EnergyOptions::default(), Some(0.1));
    }

    #[test]
    fn edge_derivative_splits_over_faces() {
        let map = generic_map();
        let opts = EnergyOptions::default();
        let grad = map.gradient(&opts, None).unwrap();
        for (k, &class) in map.layout.edge_dofs.iter().enumerate() {
            let total: f64 = map.mesh.edge_classes[class]
                .members
                .iter()
                .map(|m| m.face)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .map(|t| map.edge_face_derivative(class, t, &opts))
                .sum();
            let g = grad[map.layout.num_node_dofs() + k];
            assert!((total - g).abs() <= 1e-10 * g.abs().max(1.0), "{total} vs {g}");
        }
    }

    #[test]
    fn initial_map_moves_edge_nodes_along_edges() {
        let map = generic_map();
        for class in &map.mesh.edge_classes {
            for m in &class.members {
                let side = map.complex().edge(class.edge).slots[m.slot].side;
                let q = map.tau.to_slot(m.face, side).apply(map.targets[m.face][m.node]);
                assert!(q.x.abs() <= 1e-10 * q.y, "{q:?}");
            }
        }
        assert!(map.images_in_faces());
    }

    #[test]
    fn divided_differences_match_direct_integration() {
        // ∫ over the reference simplex of (λ·v)^-2 by a fine midpoint rule
        let oracle = |v: [f64; 3]| {
            let n = 400;
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n - i {
                    for (a, b, w) in [(i as f64 + 1.0 / 3.0, j as f64 + 1.0 / 3.0, 1.0), (i as f64 + 2.0 / 3.0, j as f64 + 2.0 / 3.0, 1.0)] {
                        if a + b > n as f64 {
                            continue;
                        }
                        let (l1, l2) = (a / n as f64, b / n as f64);
                        let y = (1.0 - l1 - l2) * v[0] + l1 * v[1] + l2 * v[2];
                        s += w / (y * y);
                    }
                }
            }
            s * 0.5 / (n * n) as f64
        };
        for v in [[1.0, 1.0, 1.0], [1.0, 1.1, 0.95], [0.3, 1.0, 2.0], [1.0, 1.0, 3.0], [2.0, 0.5, 0.5]] {
            let d = neg_log_divided_difference(&v);
            let o = oracle(v);
            assert!((d - o).abs() <= 1e-5 * o, "{v:?}: {d} vs {o}");
        }
        assert!((neg_log_divided_difference(&[2.0, 2.0, 2.0]) - 0.125).abs() < 1e-16);
    }

    #[test]
    fn divided_differences_are_continuous_across_the_series_switch() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..2000 {
            let m: f64 = rng.gen_range(0.1..10.0);
            let spread = rng.gen_range(0.0..0.6);
            let v: [f64; 3] = std::array::from_fn(|_| m * (1.0 + spread * rng.gen_range(-0.5..0.5)));
            let d2 = neg_log_divided_difference(&v);
            // derivative in v0 is the divided difference with v0 repeated
            let step = 1e-5 * v[0];
            let f = |x: f64| neg_log_divided_difference(&[x, v[1], v[2]]);
            let fd = (8.0 * (f(v[0] + step) - f(v[0] - step)) - (f(v[0] + 2.0 * step) - f(v[0] - 2.0 * step))) / (12.0 * step);
            let d3 = neg_log_divided_difference(&[v[0], v[0], v[1], v[2]]);
            assert!(d2 > 0.0);
            assert!((fd - d3).abs() <= 1e-7 * d3.abs().max(d2 / m), "{v:?}: {fd} vs {d3}");
        }
    }

    #[test]
    fn identity_is_stationary_at_interior_nodes() {
        let (s, _) = book_pair(4);
        let map = identity(&s, 0.1);
        let opts = EnergyOptions::default();
        let grad = map.gradient(&opts, Some(0.1)).unwrap();
        let e = map.energy(&opts).unwrap().energy;
        let n = map.layout.num_node_dofs();
        let mut nodes = grad.clone();
        nodes[n..].iter_mut().for_each(|g| *g = 0.0);
        let scaled = map.stationarity(&nodes);
        assert!(scaled <= 1e-12 * e, "{scaled} vs {e}");
    }
}
