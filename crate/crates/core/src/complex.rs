//! Finite 2-dimensional simplicial complexes glued along edges.
//!
//! A complex is given by `F` triangles and a partition of the `3F` edge slots
//! `(triangle, side)` into edge classes. Side `k` of a triangle joins its
//! corners `k` and `k + 1 (mod 3)`. Every slot carries an orientation sign:
//! `+1` when the edge of the complex runs from corner `k` to corner `k + 1`,
//! `-1` when it runs the other way. Gluing maps are the orientation-preserving
//! identifications between the slots of one class, so the partition together
//! with the signs determines the whole gluing groupoid.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::ComplexError;
use crate::union_find::UnionFind;

pub type TriangleId = usize;

/// One side of one triangle, as a member of an edge class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeSlot {
    pub triangle: TriangleId,
    pub side: usize,
    /// `+1` if the triangle's boundary orientation on this side agrees with
    /// the orientation of the edge.
    pub orientation: i8,
}

impl EdgeSlot {
    /// Corner of the triangle at the start of the oriented edge.
    pub fn tail_corner(&self) -> usize {
        if self.orientation > 0 {
            self.side
        } else {
            (self.side + 1) % 3
        }
    }

    /// Corner of the triangle at the end of the oriented edge.
    pub fn head_corner(&self) -> usize {
        if self.orientation > 0 {
            (self.side + 1) % 3
        } else {
            self.side
        }
    }

    /// The corner of the triangle opposite this side.
    pub fn opposite_corner(&self) -> usize {
        (self.side + 2) % 3
    }

    pub fn corner_at(&self, end: EdgeEnd) -> usize {
        match end {
            EdgeEnd::Tail => self.tail_corner(),
            EdgeEnd::Head => self.head_corner(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeEnd {
    Tail,
    Head,
}

impl EdgeEnd {
    /// `+1` when the edge is oriented towards this end.
    pub fn sign(self) -> i8 {
        match self {
            EdgeEnd::Tail => -1,
            EdgeEnd::Head => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: usize,
    /// Incidence list in canonical order (ascending `(triangle, side)`).
    pub slots: Vec<EdgeSlot>,
    pub tail: usize,
    pub head: usize,
}

impl Edge {
    pub fn degree(&self) -> usize {
        self.slots.len()
    }

    pub fn is_singular(&self) -> bool {
        self.degree() >= 3
    }

    pub fn vertex_at(&self, end: EdgeEnd) -> usize {
        match end {
            EdgeEnd::Tail => self.tail,
            EdgeEnd::Head => self.head,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: usize,
    /// `(triangle, corner)` pairs identified to this vertex.
    pub corners: Vec<(TriangleId, usize)>,
}

/// JSON description of a complex:
/// `{ "triangles": F, "edge_classes": [ { "slots": [[t, side, orient], ...] }, ... ] }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexSpec {
    pub triangles: usize,
    pub edge_classes: Vec<EdgeClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeClassSpec {
    pub slots: Vec<(i64, i64, i64)>,
}

impl ComplexSpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("complex spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Complex {
    num_triangles: usize,
    edges: Vec<Edge>,
    /// `slot_edge[3 t + side] = (edge id, position in the edge's incidence list)`.
    slot_edge: Vec<(usize, usize)>,
    vertices: Vec<Vertex>,
    corner_vertex: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    pub faces: usize,
    pub edges: usize,
    pub vertices: usize,
    pub singular_edges: Vec<usize>,
}

impl Complex {
    /// Validates a complex description and derives its edges and vertices.
    ///
    /// Edge classes are put in canonical order: slots inside a class ascending
    /// by `(triangle, side)`, classes ascending by their lowest slot. Edge ids
    /// refer to this order.
    pub fn build(spec: &ComplexSpec) -> Result<Self, ComplexError> {
        let f = spec.triangles;
        if f == 0 {
            return Err(ComplexError::NoTriangles);
        }
        let mut seen = vec![false; 3 * f];
        let mut classes: Vec<Vec<EdgeSlot>> = Vec::with_capacity(spec.edge_classes.len());
        for (ci, class) in spec.edge_classes.iter().enumerate() {
            if class.slots.is_empty() {
                return Err(ComplexError::EmptyPartitionClass { class: ci });
            }
            let mut slots = Vec::with_capacity(class.slots.len());
            for &(t, side, orient) in &class.slots {
                if t < 0 || t as usize >= f || !(0..3).contains(&side) {
                    return Err(ComplexError::SlotOutOfRange {
                        triangle: t,
                        side,
                    });
                }
                if orient != 1 && orient != -1 {
                    return Err(ComplexError::InconsistentOrientation {
                        class: ci,
                        triangle: t as usize,
                        side: side as usize,
                        orientation: orient,
                    });
                }
                let key = 3 * t as usize + side as usize;
                if seen[key] {
                    return Err(ComplexError::DuplicateSlot {
                        triangle: t as usize,
                        side: side as usize,
                    });
                }
                seen[key] = true;
                slots.push(EdgeSlot {
                    triangle: t as usize,
                    side: side as usize,
                    orientation: orient as i8,
                });
            }
            slots.sort();
            classes.push(slots);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ComplexError::MissingSlot {
                triangle: missing / 3,
                side: missing % 3,
            });
        }
        classes.sort_by_key(|c| (c[0].triangle, c[0].side));

        let mut slot_edge = vec![(0, 0); 3 * f];
        let mut corners = UnionFind::new(3 * f);
        let mut faces = UnionFind::new(f);
        for (e, class) in classes.iter().enumerate() {
            for (j, s) in class.iter().enumerate() {
                slot_edge[3 * s.triangle + s.side] = (e, j);
            }
            let first = class[0];
            for s in &class[1..] {
                corners.union(
                    3 * first.triangle + first.tail_corner(),
                    3 * s.triangle + s.tail_corner(),
                );
                corners.union(
                    3 * first.triangle + first.head_corner(),
                    3 * s.triangle + s.head_corner(),
                );
                faces.union(first.triangle, s.triangle);
            }
        }
        let (_, components) = faces.labels();
        if components != 1 {
            return Err(ComplexError::DisconnectedComplex { components });
        }
        let (corner_vertex, nv) = corners.labels();
        let mut vertices: Vec<Vertex> = (0..nv)
            .map(|id| Vertex {
                id,
                corners: Vec::new(),
            })
            .collect();
        for (k, &v) in corner_vertex.iter().enumerate() {
            vertices[v].corners.push((k / 3, k % 3));
        }
        let edges = classes
            .into_iter()
            .enumerate()
            .map(|(id, slots)| {
                let s = slots[0];
                Edge {
                    id,
                    tail: corner_vertex[3 * s.triangle + s.tail_corner()],
                    head: corner_vertex[3 * s.triangle + s.head_corner()],
                    slots,
                }
            })
            .collect();
        Ok(Self {
            num_triangles: f,
            edges,
            slot_edge,
            vertices,
            corner_vertex,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ComplexError> {
        let spec = ComplexSpec::from_json(text).map_err(|e| ComplexError::Parse(e.to_string()))?;
        Self::build(&spec)
    }

    /// Canonical description; `Complex::build(&c.to_spec()) == c`.
    pub fn to_spec(&self) -> ComplexSpec {
        ComplexSpec {
            triangles: self.num_triangles,
            edge_classes: self
                .edges
                .iter()
                .map(|e| EdgeClassSpec {
                    slots: e
                        .slots
                        .iter()
                        .map(|s| (s.triangle as i64, s.side as i64, s.orientation as i64))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn num_triangles(&self) -> usize {
        self.num_triangles
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> &Edge {
        &self.edges[id]
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    /// Edge id and incidence-list position of slot `(t, side)`.
    pub fn slot_edge(&self, t: TriangleId, side: usize) -> (usize, usize) {
        self.slot_edge[3 * t + side]
    }

    pub fn slot(&self, t: TriangleId, side: usize) -> EdgeSlot {
        let (e, j) = self.slot_edge(t, side);
        self.edges[e].slots[j]
    }

    pub fn corner_vertex(&self, t: TriangleId, corner: usize) -> usize {
        self.corner_vertex[3 * t + corner]
    }

    pub fn counts(&self) -> Counts {
        let total: usize = self.edges.iter().map(Edge::degree).sum();
        assert_eq!(total, 3 * self.num_triangles, "sum of edge degrees must be 3F");
        Counts {
            faces: self.num_triangles,
            edges: self.edges.len(),
            vertices: self.vertices.len(),
            singular_edges: self
                .edges
                .iter()
                .filter(|e| e.is_singular())
                .map(|e| e.id)
                .collect(),
        }
    }

    /// Link of vertex `v`: a node per edge-end at `v`, an arc per face corner at `v`.
    pub fn link_graph(&self, v: usize) -> LinkGraph {
        let mut nodes = Vec::new();
        let mut node_of = std::collections::HashMap::new();
        for e in &self.edges {
            for end in [EdgeEnd::Head, EdgeEnd::Tail] {
                if e.vertex_at(end) == v {
                    node_of.insert((e.id, end), nodes.len());
                    nodes.push(LinkNode {
                        edge: e.id,
                        end,
                        sign: end.sign(),
                    });
                }
            }
        }
        let arcs = self.vertices[v]
            .corners
            .iter()
            .map(|&(t, c)| {
                let ends = [c, (c + 2) % 3].map(|side| {
                    let (e, j) = self.slot_edge(t, side);
                    let slot = self.edges[e].slots[j];
                    let end = if slot.tail_corner() == c {
                        EdgeEnd::Tail
                    } else {
                        EdgeEnd::Head
                    };
                    ArcEnd {
                        node: node_of[&(e, end)],
                        slot: j,
                    }
                });
                LinkArc {
                    triangle: t,
                    corner: c,
                    ends,
                }
            })
            .collect();
        LinkGraph {
            vertex: v,
            nodes,
            arcs,
        }
    }

    pub fn link_graphs(&self) -> Vec<LinkGraph> {
        (0..self.vertices.len()).map(|v| self.link_graph(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkNode {
    pub edge: usize,
    pub end: EdgeEnd,
    /// `+1` iff the edge is oriented towards the vertex.
    pub sign: i8,
}

/// Endpoint of a link arc: the node it meets and the incidence-list position
/// (within the node's edge) of the face side that realises the meeting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArcEnd {
    pub node: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkArc {
    pub triangle: TriangleId,
    pub corner: usize,
    /// `ends[0]` is on side `corner`, `ends[1]` on side `corner + 2 (mod 3)`.
    pub ends: [ArcEnd; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkGraph {
    pub vertex: usize,
    pub nodes: Vec<LinkNode>,
    pub arcs: Vec<LinkArc>,
}

/// One arc traversed in a cycle; `forward` runs from `ends[0]` to `ends[1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleStep {
    pub arc: usize,
    pub forward: bool,
}

impl CycleStep {
    pub fn entry(&self, g: &LinkGraph) -> ArcEnd {
        let a = &g.arcs[self.arc];
        if self.forward {
            a.ends[0]
        } else {
            a.ends[1]
        }
    }

    pub fn exit(&self, g: &LinkGraph) -> ArcEnd {
        let a = &g.arcs[self.arc];
        if self.forward {
            a.ends[1]
        } else {
            a.ends[0]
        }
    }
}

/// A closed walk in a link graph without repeated arcs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cycle {
    pub steps: Vec<CycleStep>,
}

impl LinkGraph {
    pub fn num_components(&self) -> usize {
        let mut uf = UnionFind::new(self.nodes.len());
        for a in &self.arcs {
            uf.union(a.ends[0].node, a.ends[1].node);
        }
        uf.labels().1
    }

    /// Dimension of the cycle space, `#arcs - #nodes + #components`.
    pub fn cycle_rank(&self) -> usize {
        self.arcs.len() + self.num_components() - self.nodes.len()
    }

    /// Fundamental cycles of a BFS spanning forest, one per non-tree arc.
    pub fn cycle_basis(&self) -> Vec<Cycle> {
        let n = self.nodes.len();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (i, a) in self.arcs.iter().enumerate() {
            adjacency[a.ends[0].node].push((i, a.ends[1].node));
            if a.ends[0].node != a.ends[1].node {
                adjacency[a.ends[1].node].push((i, a.ends[0].node));
            }
        }
        // parent[n] = (arc used to reach n, parent node)
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut depth = vec![usize::MAX; n];
        let mut tree_arc = vec![false; self.arcs.len()];
        for root in 0..n {
            if depth[root] != usize::MAX {
                continue;
            }
            depth[root] = 0;
            let mut queue = VecDeque::from([root]);
            while let Some(u) = queue.pop_front() {
                for &(arc, w) in &adjacency[u] {
                    if depth[w] == usize::MAX {
                        depth[w] = depth[u] + 1;
                        parent[w] = Some((arc, u));
                        tree_arc[arc] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        let step_towards_parent = |node: usize| -> (CycleStep, usize) {
            let (arc, up) = parent[node].expect("non-root node");
            // walking from `node` to `up`
            let forward = self.arcs[arc].ends[0].node == node && self.arcs[arc].ends[1].node == up;
            (CycleStep { arc, forward }, up)
        };
        let mut cycles = Vec::new();
        for (i, a) in self.arcs.iter().enumerate() {
            if tree_arc[i] {
                continue;
            }
            let (start, end) = (a.ends[0].node, a.ends[1].node);
            let mut steps = vec![CycleStep {
                arc: i,
                forward: true,
            }];
            // tree path end -> lca -> start
            let (mut x, mut y) = (end, start);
            let mut up_from_end = Vec::new();
            let mut up_from_start = Vec::new();
            while depth[x] > depth[y] {
                let (s, p) = step_towards_parent(x);
                up_from_end.push(s);
                x = p;
            }
            while depth[y] > depth[x] {
                let (s, p) = step_towards_parent(y);
                up_from_start.push(s);
                y = p;
            }
            while x != y {
                let (s, p) = step_towards_parent(x);
                up_from_end.push(s);
                x = p;
                let (s, p) = step_towards_parent(y);
                up_from_start.push(s);
                y = p;
            }
            steps.extend(up_from_end);
            steps.extend(up_from_start.into_iter().rev().map(|s| CycleStep {
                arc: s.arc,
                forward: !s.forward,
            }));
            cycles.push(Cycle { steps });
        }
        cycles
    }
}

impl Cycle {
    /// Checks that consecutive steps meet at a common node and the walk closes.
    pub fn is_closed(&self, g: &LinkGraph) -> bool {
        let k = self.steps.len();
        (0..k).all(|i| self.steps[i].exit(g).node == self.steps[(i + 1) % k].entry(g).node)
    }
}

/// Small complexes used throughout the tests and examples.
pub mod samples {
    use super::{ComplexSpec, EdgeClassSpec};

    fn spec(triangles: usize, classes: &[&[(i64, i64, i64)]]) -> ComplexSpec {
        ComplexSpec {
            triangles,
            edge_classes: classes
                .iter()
                .map(|c| EdgeClassSpec { slots: c.to_vec() })
                .collect(),
        }
    }

    /// Two triangles glued side `i` to side `i`: a thrice-punctured sphere.
    pub fn double_triangle() -> ComplexSpec {
        spec(
            2,
            &[
                &[(0, 0, 1), (1, 0, 1)],
                &[(0, 1, 1), (1, 1, 1)],
                &[(0, 2, 1), (1, 2, 1)],
            ],
        )
    }

    /// One triangle with nothing glued.
    pub fn isolated_triangle() -> ComplexSpec {
        spec(1, &[&[(0, 0, 1)], &[(0, 1, 1)], &[(0, 2, 1)]])
    }

    /// Three triangles sharing side 0 along a singular edge, the remaining
    /// sides paired across different triangles.
    pub fn book() -> ComplexSpec {
        spec(
            3,
            &[
                &[(0, 0, 1), (1, 0, 1), (2, 0, 1)],
                &[(0, 1, 1), (1, 1, 1)],
                &[(0, 2, 1), (2, 1, -1)],
                &[(1, 2, 1), (2, 2, 1)],
            ],
        )
    }
}
