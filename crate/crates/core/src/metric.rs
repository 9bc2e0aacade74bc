//! Ideal hyperbolic structures on a complex, encoded by shift parameters.
//!
//! For an edge with incident slots `e_1, …, e_n` and edge local model scales
//! `r_j`, the shift parameter is `α_{k,j} = log(r_j / r_k)`. Only
//! `α_{j,1}` for `j = 2..n` is stored; the rest of the table follows from
//! antisymmetry and the cocycle identity.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::complex::{Complex, Cycle, EdgeSlot};
use crate::error::MetricError;
use crate::hyperbolic::{Ideal, Isometry};

/// Default tolerance for completeness, in log-scale units.
pub const COMPLETENESS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct IdealMetric {
    complex: Arc<Complex>,
    /// `shifts[e][j - 1] = α_{j+1,1}` in one-based slot numbering.
    shifts: Vec<Vec<f64>>,
}

/// Full antisymmetric table `alpha[k][j] = α_{k,j} = log(r_j / r_k)` of one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTable {
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLocalModel {
    pub edge: usize,
    /// Scale `r_j` of each incident slot, in incidence-list order; the largest is 1.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletenessResidual {
    pub vertex: usize,
    pub cycle_index: usize,
    pub cycle: Cycle,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub metric_dim: usize,
    pub relation_count: usize,
    pub teich_dim: usize,
    /// The closed form `E - V`, valid when every link is connected.
    pub e_minus_v: i64,
    pub links_connected: bool,
    /// Whether some link has a component without cycles.
    pub acyclic_link_component: bool,
}

impl Dims {
    pub fn closed_form_applies(&self) -> bool {
        self.links_connected
    }
}

/// Developing data of one face corner around a vertex: the face is carried
/// onto `scale · (unit cusp chart) + translation` with the vertex at `∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerModel {
    pub triangle: usize,
    pub corner: usize,
    pub log_scale: f64,
    pub scale: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexLocalModel {
    pub vertex: usize,
    /// One entry per link arc, in link-graph arc order.
    pub corners: Vec<CornerModel>,
    /// Largest log-scale disagreement found on non-tree incidences.
    pub max_mismatch: f64,
    /// Connected component of the link containing each arc.
    pub component: Vec<usize>,
}

/// On-disk metric format: `{ "shifts": { "<edge id>": [α_{2,1}, …], … } }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFile {
    pub shifts: BTreeMap<String, Vec<f64>>,
}

impl IdealMetric {
    pub fn new(complex: Arc<Complex>, shifts: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        if shifts.len() != complex.edges().len() {
            return Err(MetricError::Parse(format!(
                "expected shifts for {} edges, got {}",
                complex.edges().len(),
                shifts.len()
            )));
        }
        for (e, s) in shifts.iter().enumerate() {
            let degree = complex.edge(e).degree();
            if s.len() + 1 != degree {
                return Err(MetricError::WrongShiftCount {
                    edge: e,
                    degree,
                    given: s.len(),
                });
            }
            if s.iter().any(|a| !a.is_finite()) {
                return Err(MetricError::NonFiniteShift { edge: e });
            }
        }
        Ok(Self { complex, shifts })
    }

    pub fn zero(complex: Arc<Complex>) -> Self {
        let shifts = complex
            .edges()
            .iter()
            .map(|e| vec![0.0; e.degree() - 1])
            .collect();
        Self { complex, shifts }
    }

    pub fn complex(&self) -> &Arc<Complex> {
        &self.complex
    }

    pub fn shifts(&self) -> &[Vec<f64>] {
        &self.shifts
    }

    /// Number of stored shifts, `Σ_e (deg e − 1)`.
    pub fn num_shifts(&self) -> usize {
        self.shifts.iter().map(Vec::len).sum()
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.shifts.iter().flatten().copied().collect()
    }

    pub fn from_vector(complex: Arc<Complex>, v: &[f64]) -> Result<Self, MetricError> {
        let mut it = v.iter().copied();
        let shifts: Vec<Vec<f64>> = complex
            .edges()
            .iter()
            .map(|e| it.by_ref().take(e.degree() - 1).collect())
            .collect();
        if it.next().is_some() || shifts.iter().map(Vec::len).sum::<usize>() != v.len() {
            return Err(MetricError::Parse("shift vector has the wrong length".into()));
        }
        Self::new(complex, shifts)
    }

    /// Position of the stored shift `α_{j+1,1}` of edge `e` in [`Self::to_vector`].
    pub fn vector_index(&self, e: usize, j: usize) -> usize {
        self.shifts[..e].iter().map(Vec::len).sum::<usize>() + j - 1
    }

    pub fn from_file(complex: Arc<Complex>, file: &MetricFile) -> Result<Self, MetricError> {
        let mut shifts: Vec<Vec<f64>> = complex
            .edges()
            .iter()
            .map(|e| vec![0.0; e.degree() - 1])
            .collect();
        for (key, values) in &file.shifts {
            let e: usize = key
                .parse()
                .map_err(|_| MetricError::Parse(format!("bad edge id {key:?}")))?;
            if e >= shifts.len() {
                return Err(MetricError::Parse(format!("edge {e} does not exist")));
            }
            shifts[e] = values.clone();
        }
        Self::new(complex, shifts)
    }

    pub fn from_json(complex: Arc<Complex>, text: &str) -> Result<Self, MetricError> {
        let file: MetricFile =
            serde_json::from_str(text).map_err(|e| MetricError::Parse(e.to_string()))?;
        Self::from_file(complex, &file)
    }

    pub fn to_file(&self) -> MetricFile {
        MetricFile {
            shifts: self
                .shifts
                .iter()
                .enumerate()
                .map(|(e, s)| (e.to_string(), s.clone()))
                .collect(),
        }
    }

    /// Log-scales `δ_j` with `δ_j − δ_k = α_{k,j}` and `δ_1 = 0`.
    fn raw_log_scales(&self, e: usize) -> Vec<f64> {
        std::iter::once(0.0)
            .chain(self.shifts[e].iter().map(|a| -a))
            .collect()
    }

    pub fn full_shift_table(&self, e: usize) -> ShiftTable {
        let n = self.complex.edge(e).degree();
        let mut alpha = vec![vec![0.0; n]; n];
        for j in 1..n {
            alpha[j][0] = self.shifts[e][j - 1];
            alpha[0][j] = -self.shifts[e][j - 1];
        }
        for k in 1..n {
            for j in 1..n {
                if k != j {
                    alpha[k][j] = alpha[k][0] + alpha[0][j];
                }
            }
        }
        ShiftTable { alpha }
    }

    /// Normalised log-scales `log r_j` of the edge local model (maximum 0).
    pub fn edge_log_scales(&self, e: usize) -> Vec<f64> {
        let delta = self.raw_log_scales(e);
        let max = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        delta.iter().map(|d| d - max).collect()
    }

    pub fn edge_local_model(&self, e: usize) -> EdgeLocalModel {
        EdgeLocalModel {
            edge: e,
            scales: self.edge_log_scales(e).into_iter().map(f64::exp).collect(),
        }
    }

    /// Signed sum `Σ ε α_{next,prev}` along every basis cycle of every link.
    pub fn completeness_residuals(&self) -> Vec<CompletenessResidual> {
        let mut out = Vec::new();
        for v in 0..self.complex.vertices().len() {
            let g = self.complex.link_graph(v);
            for (i, cycle) in g.cycle_basis().into_iter().enumerate() {
                let k = cycle.steps.len();
                let mut residual = 0.0;
                for s in 0..k {
                    let exit = cycle.steps[s].exit(&g);
                    let entry = cycle.steps[(s + 1) % k].entry(&g);
                    let node = g.nodes[exit.node];
                    let delta = self.raw_log_scales(node.edge);
                    // α_{next,prev} = log(r_prev / r_next)
                    residual += node.sign as f64 * (delta[exit.slot] - delta[entry.slot]);
                }
                out.push(CompletenessResidual {
                    vertex: v,
                    cycle_index: i,
                    cycle,
                    residual,
                });
            }
        }
        out
    }

    pub fn max_residual(&self) -> f64 {
        self.completeness_residuals()
            .iter()
            .map(|r| r.residual.abs())
            .fold(0.0, f64::max)
    }

    pub fn is_complete(&self, tol: f64) -> bool {
        self.max_residual() <= tol
    }

    /// Develops the faces around `v` along a spanning tree of its link.
    pub fn vertex_local_model(&self, v: usize, tol: f64) -> Result<VertexLocalModel, MetricError> {
        let g = self.complex.link_graph(v);
        let na = g.arcs.len();
        let mut node_arcs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); g.nodes.len()];
        for (a, arc) in g.arcs.iter().enumerate() {
            for (i, end) in arc.ends.iter().enumerate() {
                node_arcs[end.node].push((a, i));
            }
        }
        let delta: Vec<Vec<f64>> = g
            .nodes
            .iter()
            .map(|n| self.raw_log_scales(n.edge))
            .collect();
        let mut ell: Vec<Option<f64>> = vec![None; na];
        let mut trans = vec![0.0; na];
        let mut node_const: Vec<Option<f64>> = vec![None; g.nodes.len()];
        let mut node_x = vec![0.0; g.nodes.len()];
        let mut component = vec![usize::MAX; na];
        let mut mismatch: f64 = 0.0;
        let mut components = 0;
        for root in 0..na {
            if ell[root].is_some() {
                continue;
            }
            ell[root] = Some(0.0);
            component[root] = components;
            let mut queue = VecDeque::from([root]);
            while let Some(a) = queue.pop_front() {
                let la = ell[a].unwrap();
                let sa = la.exp();
                for (i, end) in g.arcs[a].ends.iter().enumerate() {
                    let z = end.node;
                    let eps = g.nodes[z].sign as f64;
                    let k = la - eps * delta[z][end.slot];
                    match node_const[z] {
                        Some(existing) => {
                            mismatch = mismatch.max((existing - k).abs());
                            continue;
                        }
                        None => {
                            node_const[z] = Some(k);
                            node_x[z] = trans[a] + if i == 0 { 0.0 } else { sa };
                        }
                    }
                    for &(b, ib) in &node_arcs[z] {
                        let slot = g.arcs[b].ends[ib].slot;
                        let lb = k + eps * delta[z][slot];
                        match ell[b] {
                            Some(existing) => mismatch = mismatch.max((existing - lb).abs()),
                            None => {
                                ell[b] = Some(lb);
                                component[b] = components;
                                trans[b] = node_x[z] - if ib == 0 { 0.0 } else { lb.exp() };
                                queue.push_back(b);
                            }
                        }
                    }
                }
            }
            components += 1;
        }
        if mismatch > tol {
            return Err(MetricError::IncompleteAtVertex {
                vertex: v,
                mismatch,
            });
        }
        let mut max_ell = vec![f64::NEG_INFINITY; components];
        for a in 0..na {
            let c = component[a];
            max_ell[c] = max_ell[c].max(ell[a].unwrap());
        }
        let corners = g
            .arcs
            .iter()
            .enumerate()
            .map(|(a, arc)| {
                let shift = max_ell[component[a]];
                let log_scale = ell[a].unwrap() - shift;
                let factor = (-shift).exp();
                CornerModel {
                    triangle: arc.triangle,
                    corner: arc.corner,
                    log_scale,
                    scale: log_scale.exp(),
                    translation: trans[a] * factor,
                }
            })
            .collect();
        Ok(VertexLocalModel {
            vertex: v,
            corners,
            max_mismatch: mismatch,
            component,
        })
    }

    /// Matrix of the linear map from the stored shift vector to the
    /// completeness residuals (rows ordered as [`Self::completeness_residuals`]).
    pub fn residual_matrix(complex: &Arc<Complex>) -> DMatrix<f64> {
        let zero = IdealMetric::zero(complex.clone());
        let n = zero.num_shifts();
        let rows = zero.completeness_residuals().len();
        let mut m = DMatrix::zeros(rows, n);
        for i in 0..n {
            let mut x = vec![0.0; n];
            x[i] = 1.0;
            let metric = IdealMetric::from_vector(complex.clone(), &x).expect("valid length");
            for (r, res) in metric.completeness_residuals().iter().enumerate() {
                m[(r, i)] = res.residual;
            }
        }
        m
    }

    /// Orthogonal projection of the stored shifts onto the complete metrics.
    pub fn project_to_complete(&self) -> IdealMetric {
        let a = Self::residual_matrix(&self.complex);
        let x = DVector::from_vec(self.to_vector());
        if a.nrows() == 0 || a.ncols() == 0 {
            return self.clone();
        }
        let svd = a.svd(false, true);
        let vt = svd.v_t.expect("requested right singular vectors");
        let smax = svd.singular_values.max();
        let mut y = x.clone();
        for (k, s) in svd.singular_values.iter().enumerate() {
            if *s > 1e-10 * smax.max(1.0) {
                let row = vt.row(k).transpose();
                y -= &row * row.dot(&x);
            }
        }
        IdealMetric::from_vector(self.complex.clone(), y.as_slice()).expect("valid length")
    }

    /// Stored shifts drawn i.i.d. uniformly from `[-1, 1]`.
    pub fn random<R: Rng>(complex: Arc<Complex>, rng: &mut R) -> IdealMetric {
        let shifts = complex
            .edges()
            .iter()
            .map(|e| (1..e.degree()).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        IdealMetric { complex, shifts }
    }

    pub fn random_complete<R: Rng>(complex: Arc<Complex>, rng: &mut R) -> IdealMetric {
        Self::random(complex, rng).project_to_complete()
    }

    /// Componentwise sum of stored shifts.
    pub fn add(&self, other: &IdealMetric) -> IdealMetric {
        let v: Vec<f64> = self
            .to_vector()
            .iter()
            .zip(other.to_vector())
            .map(|(a, b)| a + b)
            .collect();
        IdealMetric::from_vector(self.complex.clone(), &v).expect("same complex")
    }
}

pub fn dims(c: &Complex) -> Dims {
    let counts = c.counts();
    let metric_dim = c.edges().iter().map(|e| e.degree() - 1).sum::<usize>();
    debug_assert_eq!(metric_dim, 3 * counts.faces - counts.edges);
    let mut relation_count = 0;
    let mut links_connected = true;
    let mut acyclic_link_component = false;
    for g in c.link_graphs() {
        let comps = g.num_components();
        relation_count += g.cycle_rank();
        links_connected &= comps == 1;
        acyclic_link_component |= g.cycle_rank() < comps;
    }
    Dims {
        metric_dim,
        relation_count,
        teich_dim: metric_dim - relation_count.min(metric_dim),
        e_minus_v: counts.edges as i64 - counts.vertices as i64,
        links_connected,
        acyclic_link_component,
    }
}

/// Where the three corners of a face land in the edge chart of one of its
/// slots: tail at `0`, head at `∞`, opposite corner at `r`.
pub fn slot_corner_positions(slot: &EdgeSlot, r: f64) -> [Ideal; 3] {
    let mut pos = [Ideal::Infinity; 3];
    pos[slot.tail_corner()] = Ideal::Finite(0.0);
    pos[slot.head_corner()] = Ideal::Infinity;
    pos[slot.opposite_corner()] = Ideal::Finite(r);
    pos
}

/// Corner positions in the unit cusp chart of corner `c`: `c ↦ ∞`,
/// `c + 1 ↦ 0`, `c + 2 ↦ 1`.
pub fn cusp_corner_positions(c: usize) -> [Ideal; 3] {
    let mut pos = [Ideal::Infinity; 3];
    pos[(c + 1) % 3] = Ideal::Finite(0.0);
    pos[(c + 2) % 3] = Ideal::Finite(1.0);
    pos
}

/// Charts of every face derived from a complete metric.
///
/// The face chart of triangle `t` is the edge chart of its slot `(t, 0)`, in
/// which the face is `r_{t,0} T̃`. All isometries below start in the face chart.
#[derive(Debug, Clone)]
pub struct MetricCharts {
    pub metric: IdealMetric,
    /// `slot_log_scale[3 t + k]`: log of the edge local model scale of slot `(t, k)`.
    pub slot_log_scale: Vec<f64>,
    /// Face chart to the edge chart of slot `(t, k)`.
    pub to_slot: Vec<Isometry>,
    /// Face chart to the unit cusp chart of corner `(t, c)`.
    pub to_cusp: Vec<Isometry>,
    /// Vertex local model data per corner `3 t + c`.
    pub corner: Vec<CornerModel>,
}

impl MetricCharts {
    pub fn new(metric: &IdealMetric, tol: f64) -> Result<Self, MetricError> {
        let c = metric.complex().clone();
        let f = c.num_triangles();
        let mut slot_log_scale = vec![0.0; 3 * f];
        for e in c.edges() {
            let logs = metric.edge_log_scales(e.id);
            for (j, s) in e.slots.iter().enumerate() {
                slot_log_scale[3 * s.triangle + s.side] = logs[j];
            }
        }
        let mut corner = vec![
            CornerModel {
                triangle: 0,
                corner: 0,
                log_scale: 0.0,
                scale: 1.0,
                translation: 0.0
            };
            3 * f
        ];
        for v in 0..c.vertices().len() {
            for cm in metric.vertex_local_model(v, tol)?.corners {
                corner[3 * cm.triangle + cm.corner] = cm;
            }
        }
        let mut to_slot = Vec::with_capacity(3 * f);
        let mut to_cusp = Vec::with_capacity(3 * f);
        for t in 0..f {
            let face_pos = slot_corner_positions(&c.slot(t, 0), slot_log_scale[3 * t].exp());
            for k in 0..3 {
                let pos = slot_corner_positions(&c.slot(t, k), slot_log_scale[3 * t + k].exp());
                to_slot.push(Isometry::from_ideal_points(face_pos, pos));
                to_cusp.push(Isometry::from_ideal_points(face_pos, cusp_corner_positions(k)));
            }
        }
        Ok(Self {
            metric: metric.clone(),
            slot_log_scale,
            to_slot,
            to_cusp,
            corner,
        })
    }

    pub fn complex(&self) -> &Arc<Complex> {
        self.metric.complex()
    }

    pub fn face_scale(&self, t: usize) -> f64 {
        self.slot_log_scale[3 * t].exp()
    }

    pub fn slot_scale(&self, t: usize, k: usize) -> f64 {
        self.slot_log_scale[3 * t + k].exp()
    }

    pub fn to_slot(&self, t: usize, k: usize) -> &Isometry {
        &self.to_slot[3 * t + k]
    }

    pub fn to_cusp(&self, t: usize, c: usize) -> &Isometry {
        &self.to_cusp[3 * t + c]
    }

    pub fn corner(&self, t: usize, c: usize) -> &CornerModel {
        &self.corner[3 * t + c]
    }

    /// Height in the vertex chart of a point `i y` on edge `e`, measured at
    /// its head (`at_head`) or tail vertex, is `a y` or `b / y`; returns `(a, b)`.
    ///
    /// Both factors are the same for all slots of the edge when the metric is complete.
    pub fn edge_height_factors(&self, e: usize) -> (f64, f64) {
        let s = self.complex().edge(e).slots[0];
        let r = self.slot_scale(s.triangle, s.side);
        let head = self.corner(s.triangle, s.head_corner()).scale;
        let tail = self.corner(s.triangle, s.tail_corner()).scale;
        (head / r, tail * r)
    }
}
