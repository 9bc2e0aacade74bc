//! Energy minimization over simplicial maps.
//!
//! Each outer iteration sweeps the faces (Dirichlet replacement of the
//! interior of each face), then the edge classes one at a time, then runs a
//! joint quasi-Newton phase over all free parameters. The quasi-Newton seed
//! is the energy Hessian with the target density frozen, a weighted cotangent
//! matrix factored once per outer iteration.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use nalgebra_sparse::{factorization::CscCholesky, CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{
    face_objective, harmonic_extension_masked, initial_map, triangle_energy, triangle_weight, EnergyOptions,
    InitialMapOptions, Mode, NodeDof, SimplicialMap,
};
use crate::error::SolveError;
use crate::hyperbolic::{hyp_distance, UHPoint};
use crate::mesh::{ComplexMesh, MeshConfig, NodeTag};
use crate::metric::{IdealMetric, MetricCharts, COMPLETENESS_TOL};

/// Relative improvement below which an outer iteration counts as a stall.
pub const STALL_TOL: f64 = 1e-14;
pub const MAX_STALLS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    /// Sufficient decrease constant.
    pub armijo: f64,
    /// Step reduction per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

/// Orientation barrier of mode D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    /// Initial weight.
    pub weight: f64,
    /// Factor applied to the weight after every outer iteration.
    pub decay: f64,
    /// Final weight; mode D converges only once this is reached.
    pub min_weight: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            weight: 1e-2,
            decay: 0.1,
            min_weight: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mode: Mode,
    /// Outer iterations (sweeps).
    pub max_iterations: usize,
    /// Bound on `gᵀ P⁻¹ g`, the model decrease, in energy units.
    pub gradient_tol: f64,
    pub line_search: LineSearch,
    pub barrier: BarrierConfig,
    /// Cut levels of the exhaustion stages.
    pub schedule: Vec<f64>,
    pub energy: EnergyOptions,
    /// Quasi-Newton iterations per face in a face sweep.
    pub face_iterations: usize,
    /// Newton steps per class in an edge sweep.
    pub edge_iterations: usize,
    /// Quasi-Newton iterations of the joint phase per outer iteration.
    pub joint_iterations: usize,
    pub memory: usize,
    /// Sweep faces concurrently.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: Mode::W,
            max_iterations: 30,
            gradient_tol: 1e-12,
            line_search: LineSearch::default(),
            barrier: BarrierConfig::default(),
            schedule: vec![2.0],
            energy: EnergyOptions::default(),
            face_iterations: 10,
            edge_iterations: 2,
            joint_iterations: 400,
            memory: 10,
            parallel: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::InvalidConfig(m.into()));
        if !(self.gradient_tol > 0.0) {
            return bad("gradient tolerance must be positive");
        }
        let ls = &self.line_search;
        if !(ls.armijo > 0.0 && ls.armijo < 0.5 && ls.shrink > 0.0 && ls.shrink < 1.0) {
            return bad("line search needs armijo in (0, 0.5) and shrink in (0, 1)");
        }
        let b = &self.barrier;
        if !(b.weight > 0.0 && b.min_weight > 0.0 && b.min_weight <= b.weight && b.decay > 0.0 && b.decay <= 1.0) {
            return bad("barrier weights must be positive with min_weight ≤ weight and decay in (0, 1]");
        }
        if self.schedule.is_empty() || self.schedule.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("the exhaustion schedule must be non-empty and increasing");
        }
        if self.schedule.iter().any(|y| !(*y >= 2.0)) {
            return bad("cut levels must be at least 2");
        }
        if self.memory == 0 {
            return bad("quasi-Newton memory must be positive");
        }
        Ok(())
    }
}

/// Per-face energy before and after one face sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceSweep {
    pub face: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub mode: Mode,
    pub energy: f64,
    pub per_face: Vec<f64>,
    /// Barrier part of the objective at the final weight.
    pub barrier: f64,
    pub barrier_weight: Option<f64>,
    /// Objective after every outer iteration, starting with the initial map.
    pub trace: Vec<f64>,
    /// Energy after every outer iteration.
    pub energy_trace: Vec<f64>,
    /// `gᵀ P⁻¹ g` at the returned map.
    pub stationarity: f64,
    /// Gradient norm with node components in hyperbolic units at the image.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
    pub line_search_failure: bool,
    /// Smallest image Jacobian over all accepted iterates.
    pub min_jacobian_accepted: f64,
    pub min_jacobian: f64,
    /// Largest increase of any face energy in a face sweep (0 when none).
    pub face_sweep_max_increase: f64,
}

impl EnergyReport {
    /// Report of a map without minimization.
    pub fn of(map: &SimplicialMap, opts: &EnergyOptions, mode: Mode) -> Result<Self, SolveError> {
        let value = map.energy(opts)?;
        let grad = map.gradient(opts, None).expect("validated map");
        let model = ModelHessian::new(map, opts, &all_faces(map), None);
        Ok(Self {
            mode,
            energy: value.energy,
            per_face: value.per_face,
            barrier: 0.0,
            barrier_weight: None,
            trace: vec![value.energy],
            energy_trace: vec![value.energy],
            stationarity: model.decrement(&grad),
            gradient_norm: map.stationarity(&grad),
            iterations: 0,
            converged: false,
            stalled: false,
            line_search_failure: false,
            min_jacobian_accepted: map.min_jacobian(),
            min_jacobian: map.min_jacobian(),
            face_sweep_max_increase: 0.0,
        })
    }
}

fn for_faces<T: Send>(parallel: bool, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Objective, energy and DOF gradient of the whole map.
fn global_objective(map: &SimplicialMap, opts: &EnergyOptions, mu: Option<f64>, parallel: bool) -> Option<(f64, f64, Vec<f64>)> {
    if !map.images_in_faces() {
        return None;
    }
    let layout = &map.layout;
    let parts = for_faces(parallel, map.targets.len(), |t| {
        let mut g = vec![[0.0; 2]; map.targets[t].len()];
        face_objective(layout, t, &map.targets[t], opts, mu, Some(&mut g)).map(|(e, b)| (e, b, g))
    });
    let mut energy = 0.0;
    let mut barrier = 0.0;
    let mut node_grad = Vec::with_capacity(parts.len());
    for p in parts {
        let (e, b, g) = p?;
        energy += e;
        barrier += b;
        node_grad.push(g);
    }
    Some((energy + barrier, energy, map.assemble_gradient(&node_grad)))
}

/// DOFs through which a node moves, with the velocity of the node in each.
fn node_dof_velocities(map: &SimplicialMap, t: usize, i: usize) -> Vec<(usize, [f64; 2])> {
    match map.layout.node_dof[t][i] {
        NodeDof::Free(k) => vec![(k, [1.0, 0.0]), (k + 1, [0.0, 1.0])],
        NodeDof::Edge { class, side } => {
            let idx = map.layout.class_dof[class].expect("free edge class");
            vec![(idx, map.edge_node_velocity(t, side, map.edge_log_y[class]))]
        }
        NodeDof::Fixed => Vec::new(),
    }
}

/// Sparse model Hessian over a subset of DOFs, factored for preconditioning.
struct ModelHessian {
    chol: Option<CscCholesky<f64>>,
    diag: Vec<f64>,
}

impl ModelHessian {
    /// Model over the DOFs of the given faces; with `to_local`, only the DOFs
    /// it maps are kept, renumbered.
    fn new(map: &SimplicialMap, opts: &EnergyOptions, faces: &[usize], to_local: Option<(&[Option<usize>], usize)>) -> Self {
        let n = to_local.map_or(map.layout.num_dofs, |(_, n)| n);
        let local = |d: usize| match to_local {
            Some((l, _)) => l[d],
            None => Some(d),
        };
        let mut coo = CooMatrix::new(n, n);
        let mut diag = vec![0.0; n];
        for &t in faces {
            let dofs: Vec<Vec<(usize, [f64; 2])>> = (0..map.targets[t].len())
                .map(|i| {
                    node_dof_velocities(map, t, i)
                        .into_iter()
                        .filter_map(|(d, v)| local(d).map(|l| (l, v)))
                        .collect()
                })
                .collect();
            for (k, g) in map.layout.triangles[t].iter().enumerate() {
                let Some(w) = triangle_weight(g, map.triangle_images(t, k), opts) else {
                    continue;
                };
                // 2K Dᵀ (P⁻¹ P⁻ᵀ) D with D the difference operator
                let s = g.pinv * g.pinv.transpose();
                let d = [[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]];
                let mut m = [[0.0; 3]; 3];
                for (a, row) in m.iter_mut().enumerate() {
                    for (b, entry) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for p in 0..2 {
                            for q in 0..2 {
                                acc += d[p][a] * s[(p, q)] * d[q][b];
                            }
                        }
                        *entry = 2.0 * w * acc;
                    }
                }
                for a in 0..3 {
                    for b in 0..3 {
                        for &(da, va) in &dofs[g.nodes[a]] {
                            for &(db, vb) in &dofs[g.nodes[b]] {
                                let h = m[a][b] * (va[0] * vb[0] + va[1] * vb[1]);
                                if h != 0.0 {
                                    coo.push(da, db, h);
                                    if da == db {
                                        diag[da] += h;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let scale = diag.iter().copied().fold(0.0, f64::max).max(1e-300);
        for (i, d) in diag.iter_mut().enumerate() {
            let ridge = 1e-10 * scale;
            coo.push(i, i, ridge);
            *d += ridge;
        }
        let chol = CscCholesky::factor(&CscMatrix::from(&coo)).ok();
        Self { chol, diag }
    }

    fn apply_inverse(&self, g: &[f64]) -> Vec<f64> {
        match &self.chol {
            Some(c) => {
                let rhs = DMatrix::from_column_slice(g.len(), 1, g);
                c.solve(&rhs).as_slice().to_vec()
            }
            None => g.iter().zip(&self.diag).map(|(g, d)| g / d).collect(),
        }
    }

    fn decrement(&self, g: &[f64]) -> f64 {
        if g.is_empty() {
            return 0.0;
        }
        dot(g, &self.apply_inverse(g)).max(0.0)
    }
}

fn all_faces(map: &SimplicialMap) -> Vec<usize> {
    (0..map.targets.len()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Lbfgs<'a> {
    memory: usize,
    max_iterations: usize,
    tol: f64,
    line_search: &'a LineSearch,
}

struct LbfgsOutcome {
    x: Vec<f64>,
    f: f64,
    failed: bool,
}

impl Lbfgs<'_> {
    /// Minimizes from a feasible `x0`; `eval` returns `None` outside the
    /// feasible set. Every accepted step strictly decreases the objective.
    fn run(
        &self,
        x0: Vec<f64>,
        f0: f64,
        g0: Vec<f64>,
        mut eval: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
        precond: &dyn Fn(&[f64]) -> Vec<f64>,
        mut on_accept: impl FnMut(&[f64]),
    ) -> LbfgsOutcome {
        let (mut x, mut f, mut g) = (x0, f0, g0);
        let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut iterations = 0;
        let mut failed = false;
        while iterations < self.max_iterations && !x.is_empty() {
            let r = precond(&g);
            if dot(&g, &r) <= self.tol {
                break;
            }
            let mut d = if hist.is_empty() { r.clone() } else { two_loop(&g, &hist, precond) };
            d.iter_mut().for_each(|v| *v = -*v);
            if dot(&d, &g) >= 0.0 {
                hist.clear();
                d = r.iter().map(|v| -v).collect();
            }
            let mut accepted = None;
            for attempt in 0..2 {
                let slope = dot(&d, &g);
                let mut alpha = 1.0;
                for _ in 0..self.line_search.max_backtracks {
                    let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                    if let Some((fn_, gn)) = eval(&xn) {
                        if fn_ <= f + self.line_search.armijo * alpha * slope && fn_ < f {
                            accepted = Some((xn, fn_, gn));
                            break;
                        }
                    }
                    alpha *= self.line_search.shrink;
                }
                if accepted.is_some() || attempt == 1 || hist.is_empty() {
                    break;
                }
                hist.clear();
                d = r.iter().map(|v| -v).collect();
            }
            let Some((xn, fn_, gn)) = accepted else {
                failed = true;
                break;
            };
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-300 {
                if hist.len() == self.memory {
                    hist.pop_front();
                }
                hist.push_back((s, y, 1.0 / sy));
            }
            x = xn;
            f = fn_;
            g = gn;
            iterations += 1;
            on_accept(&x);
        }
        LbfgsOutcome {
            x,
            f,
            failed,
        }
    }
}

fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, precond: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    let mut r = precond(&q);
    if let Some((s, y, _)) = hist.back() {
        let hy = precond(y);
        let gamma = dot(s, y) / dot(y, &hy);
        if gamma.is_finite() && gamma > 0.0 {
            r.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &r);
        r.iter_mut().zip(s).for_each(|(ri, si)| *ri += (a - b) * si);
    }
    r
}

/// Minimizes each face over its interior images with the boundary fixed.
pub fn face_sweep(map: &mut SimplicialMap, cfg: &SolverConfig, mu: Option<f64>) -> Vec<FaceSweep> {
    let layout = map.layout.clone();
    let faces: Vec<Vec<(usize, usize)>> = (0..map.targets.len())
        .map(|t| {
            layout
                .free_nodes
                .iter()
                .enumerate()
                .filter(|(_, &(f, _))| f == t)
                .map(|(k, &(_, i))| (2 * k, i))
                .collect()
        })
        .collect();
    let opts = cfg.energy;
    let map_ref = &*map;
    let results = for_faces(cfg.parallel, faces.len(), |t| {
        let nodes = &faces[t];
        let mut targets = map_ref.targets[t].clone();
        let before = face_objective(&layout, t, &targets, &opts, mu, None)
            .map(|(e, b)| e + b)
            .unwrap_or(f64::INFINITY);
        if nodes.is_empty() || !before.is_finite() {
            return (t, targets, before, before);
        }
        let subset: Vec<usize> = nodes.iter().flat_map(|&(k, _)| [k, k + 1]).collect();
        let mut to_local = vec![None; layout.num_dofs];
        for (l, &d) in subset.iter().enumerate() {
            to_local[d] = Some(l);
        }
        let model = ModelHessian::new(map_ref, &opts, &[t], Some((&to_local, subset.len())));
        let tri = crate::hyperbolic::IdealTriangle::new(map_ref.tau.face_scale(t));
        let eval = |x: &[f64], targets: &mut Vec<UHPoint>| {
            for (j, &(_, i)) in nodes.iter().enumerate() {
                let q = UHPoint::new(x[2 * j], x[2 * j + 1]);
                if tri.membership(q) == crate::hyperbolic::Membership::Outside {
                    return None;
                }
                targets[i] = q;
            }
            let mut g = vec![[0.0; 2]; targets.len()];
            let (e, b) = face_objective(&layout, t, targets, &opts, mu, Some(&mut g))?;
            let grad = nodes.iter().flat_map(|&(_, i)| g[i]).collect();
            Some((e + b, grad))
        };
        let x0: Vec<f64> = nodes.iter().flat_map(|&(_, i)| [targets[i].x, targets[i].y]).collect();
        let mut work = targets.clone();
        let Some((f0, g0)) = eval(&x0, &mut work) else {
            return (t, targets, before, before);
        };
        let lb = Lbfgs {
            memory: cfg.memory,
            max_iterations: cfg.face_iterations,
            tol: cfg.gradient_tol,
            line_search: &cfg.line_search,
        };
        let out = lb.run(x0, f0, g0, |x| eval(x, &mut work), &|g| model.apply_inverse(g), |_| {});
        for (j, &(_, i)) in nodes.iter().enumerate() {
            targets[i] = UHPoint::new(out.x[2 * j], out.x[2 * j + 1]);
        }
        (t, targets, before, out.f.min(before))
    });
    let mut log = Vec::with_capacity(results.len());
    for (t, targets, before, after) in results {
        map.targets[t] = targets;
        log.push(FaceSweep { face: t, before, after });
    }
    log
}

/// Star triangles of every edge class, as `(face, triangle)` pairs.
fn class_stars(map: &SimplicialMap) -> Vec<Vec<(usize, usize)>> {
    map.mesh
        .edge_classes
        .iter()
        .map(|class| {
            let mut star: Vec<(usize, usize)> = class
                .members
                .iter()
                .flat_map(|m| map.layout.node_triangles[m.face][m.node].iter().map(move |&k| (m.face, k)))
                .collect();
            star.sort_unstable();
            star.dedup();
            star
        })
        .collect()
}

/// Objective of the star of a class, with its derivative in the class parameter
/// and the model second derivative.
fn star_objective(
    map: &SimplicialMap,
    class: usize,
    star: &[(usize, usize)],
    opts: &EnergyOptions,
    mu: Option<f64>,
) -> Option<(f64, f64, f64)> {
    let mut f = 0.0;
    let mut d = 0.0;
    let mut h = 0.0;
    let ly = map.edge_log_y[class];
    for &(t, k) in star {
        let g = &map.layout.triangles[t][k];
        let q = map.triangle_images(t, k);
        let mut gr = [[0.0; 2]; 3];
        let (e, b) = triangle_energy(g, q, opts, mu, Some(&mut gr))?;
        f += e + b;
        let w = triangle_weight(g, q, opts)?;
        let s = g.pinv * g.pinv.transpose();
        let vel: [Option<[f64; 2]>; 3] = std::array::from_fn(|j| match map.mesh.faces[t].tags[g.nodes[j]] {
            NodeTag::Edge { class: c, side } if c == class => Some(map.edge_node_velocity(t, side, ly)),
            _ => None,
        });
        // column j of the difference operator
        let dcol = |j: usize| match j {
            0 => [-1.0, -1.0],
            1 => [1.0, 0.0],
            _ => [0.0, 1.0],
        };
        for a in 0..3 {
            let Some(va) = vel[a] else { continue };
            d += gr[a][0] * va[0] + gr[a][1] * va[1];
            for b in 0..3 {
                let Some(vb) = vel[b] else { continue };
                let (da, db) = (dcol(a), dcol(b));
                let mut m = 0.0;
                for p in 0..2 {
                    for r in 0..2 {
                        m += da[p] * s[(p, r)] * db[r];
                    }
                }
                h += 2.0 * w * m * (va[0] * vb[0] + va[1] * vb[1]);
            }
        }
    }
    Some((f, d, h))
}

/// Damped Newton steps on each free edge class in turn, with the rest fixed.
pub fn edge_sweep(map: &mut SimplicialMap, cfg: &SolverConfig, mu: Option<f64>) {
    let stars = class_stars(map);
    let opts = cfg.energy;
    let classes = map.layout.edge_dofs.clone();
    for class in classes {
        let star = &stars[class];
        for _ in 0..cfg.edge_iterations {
            let Some((f0, d0, h0)) = star_objective(map, class, star, &opts, mu) else {
                break;
            };
            if !(h0 > 0.0) || d0 * d0 / h0 <= cfg.gradient_tol * 1e-2 {
                break;
            }
            let s0 = map.edge_log_y[class];
            let step = -d0 / h0;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..cfg.line_search.max_backtracks {
                map.set_edge_param(class, s0 + alpha * step);
                if let Some((f1, _, _)) = star_objective(map, class, star, &opts, mu) {
                    if f1 <= f0 + cfg.line_search.armijo * alpha * step * d0 && f1 < f0 {
                        accepted = true;
                        break;
                    }
                }
                alpha *= cfg.line_search.shrink;
            }
            if !accepted {
                map.set_edge_param(class, s0);
                break;
            }
        }
    }
}

/// Minimizes the energy (mode W) or the barrier objective with decreasing
/// weight (mode D) from `u0`.
pub fn minimize(u0: SimplicialMap, cfg: &SolverConfig) -> Result<(SimplicialMap, EnergyReport), SolveError> {
    cfg.validate()?;
    u0.validate()?;
    let mut map = u0;
    let opts = cfg.energy;
    if cfg.mode == Mode::D {
        for t in 0..map.targets.len() {
            for (k, g) in map.layout.triangles[t].iter().enumerate() {
                let det = g.differential(map.triangle_images(t, k)).determinant();
                if !(det > 0.0) {
                    return Err(SolveError::BarrierInfeasible { face: t, triangle: k, det });
                }
            }
        }
    }
    let mut mu = (cfg.mode == Mode::D).then_some(cfg.barrier.weight);
    let (f_init, e_init, _) = global_objective(&map, &opts, mu, cfg.parallel).ok_or_else(|| {
        SolveError::InvalidConfig("initial map has an image outside its target face".into())
    })?;
    let mut trace = vec![f_init];
    let mut energy_trace = vec![e_init];
    let mut min_jac = map.min_jacobian();
    let mut converged = false;
    let mut stalled = false;
    let mut line_search_failure = false;
    let mut stalls = 0;
    let mut failures_in_row = 0;
    let mut face_increase = 0.0f64;
    let mut iterations = 0;
    let lb = Lbfgs {
        memory: cfg.memory,
        max_iterations: cfg.joint_iterations,
        tol: cfg.gradient_tol,
        line_search: &cfg.line_search,
    };
    let at_final_weight = |mu: Option<f64>| mu.is_none_or(|m| m <= cfg.barrier.min_weight);
    loop {
        let (f_now, _, g_now) = global_objective(&map, &opts, mu, cfg.parallel).expect("accepted iterates are feasible");
        let model = ModelHessian::new(&map, &opts, &all_faces(&map), None);
        if at_final_weight(mu) && model.decrement(&g_now) <= cfg.gradient_tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        iterations += 1;

        for s in face_sweep(&mut map, cfg, mu) {
            face_increase = face_increase.max(s.after - s.before);
        }
        edge_sweep(&mut map, cfg, mu);
        min_jac = min_jac.min(map.min_jacobian());

        let x0 = map.dofs();
        let (f0, _, g0) = global_objective(&map, &opts, mu, cfg.parallel).expect("sweeps keep the map feasible");
        let model = ModelHessian::new(&map, &opts, &all_faces(&map), None);
        let mut work = map.clone();
        let mut track = map.clone();
        let out = lb.run(
            x0,
            f0,
            g0,
            |x| {
                work.set_dofs(x);
                global_objective(&work, &opts, mu, cfg.parallel).map(|(f, _, g)| (f, g))
            },
            &|g| model.apply_inverse(g),
            |x| {
                track.set_dofs(x);
                min_jac = min_jac.min(track.min_jacobian());
            },
        );
        map.set_dofs(&out.x);
        if out.failed {
            line_search_failure = true;
            failures_in_row += 1;
        } else {
            failures_in_row = 0;
        }
        let (f_end, e_end, _) = global_objective(&map, &opts, mu, cfg.parallel).expect("accepted iterates are feasible");
        debug_assert!(f_end <= f_now);
        trace.push(f_end);
        energy_trace.push(e_end);
        let improvement = (f_now - f_end) / f_now.abs().max(1e-300);
        if improvement < STALL_TOL && at_final_weight(mu) {
            stalls += 1;
            if stalls >= MAX_STALLS {
                stalled = true;
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
        if failures_in_row >= 2 && at_final_weight(mu) {
            break;
        }
        // lowering the weight cannot raise the objective since the barrier is ≥ 0
        if let Some(m) = mu.as_mut() {
            *m = (*m * cfg.barrier.decay).max(cfg.barrier.min_weight);
        }
    }
    let value = map.evaluate(&opts, mu).expect("final map is feasible");
    let grad = map.gradient(&opts, mu).expect("final map is feasible");
    let model = ModelHessian::new(&map, &opts, &all_faces(&map), None);
    let report = EnergyReport {
        mode: cfg.mode,
        energy: value.energy,
        per_face: value.per_face,
        barrier: value.barrier,
        barrier_weight: mu,
        trace,
        energy_trace,
        stationarity: model.decrement(&grad),
        gradient_norm: map.stationarity(&grad),
        iterations,
        converged,
        stalled,
        line_search_failure,
        min_jacobian_accepted: min_jac,
        min_jacobian: map.min_jacobian(),
        face_sweep_max_increase: face_increase,
    };
    Ok((map, report))
}

/// One stage of an exhaustion run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub y_cut: f64,
    pub num_nodes: usize,
    pub num_triangles: usize,
    pub truncated_area: f64,
    pub report: EnergyReport,
    /// Largest hyperbolic displacement of the images of first-stage nodes
    /// since the previous stage; `None` for the first stage.
    pub stability: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExhaustionRun {
    pub map: SimplicialMap,
    pub stages: Vec<StageReport>,
}

/// Runs the initial map and the minimization at every cut level of the
/// schedule, warm-starting each stage from the previous solution.
pub fn solve_with_exhaustion(
    sigma: &IdealMetric,
    tau: &IdealMetric,
    mesh_cfg: &MeshConfig,
    init: &InitialMapOptions,
    cfg: &SolverConfig,
) -> Result<ExhaustionRun, SolveError> {
    cfg.validate()?;
    let charts = Arc::new(MetricCharts::new(sigma, COMPLETENESS_TOL).map_err(SolveError::IncompleteMetric)?);
    let mut first = mesh_cfg.clone();
    first.y_cut = cfg.schedule[0];
    if first.y_base.is_some_and(|b| b > first.y_cut) {
        first.y_base = None;
    }
    let mesh = Arc::new(ComplexMesh::build_with_charts(charts, first)?);
    let u0 = initial_map(mesh.clone(), tau, init)?;
    let (mut map, report) = minimize(u0, cfg)?;
    // first-stage node ids in the current mesh
    let mut tracked: Vec<Vec<usize>> = mesh.faces.iter().map(|f| (0..f.nodes.len()).collect()).collect();
    let mut stages = vec![stage_report(&map, report, None)];
    for &y in &cfg.schedule[1..] {
        let ex = map.mesh.exhaust(y)?;
        let new_mesh = Arc::new(ex.mesh);
        let mut next = initial_map(new_mesh.clone(), tau, init)?;
        let mut movable: Vec<Vec<bool>> = new_mesh.faces.iter().map(|f| vec![true; f.nodes.len()]).collect();
        for (t, map_t) in ex.old_to_new.iter().enumerate() {
            for (i, j) in map_t.iter().enumerate() {
                let Some(j) = *j else { continue };
                next.targets[t][j] = map.targets[t][i];
                movable[t][j] = false;
                if let (NodeTag::Edge { class: old, .. }, NodeTag::Edge { class: new, .. }) =
                    (map.mesh.faces[t].tags[i], new_mesh.faces[t].tags[j])
                {
                    next.set_edge_param(new, map.edge_log_y[old]);
                }
            }
        }
        for t in 0..new_mesh.faces.len() {
            harmonic_extension_masked(&mut next, t, &movable[t])?;
        }
        let previous: Vec<Vec<UHPoint>> = tracked
            .iter()
            .enumerate()
            .map(|(t, ids)| ids.iter().map(|&i| map.targets[t][i]).collect())
            .collect();
        for (t, ids) in tracked.iter_mut().enumerate() {
            for i in ids.iter_mut() {
                *i = ex.old_to_new[t][*i].expect("exhaustion keeps old nodes");
            }
        }
        let (solved, report) = minimize(next, cfg)?;
        map = solved;
        let mut stability = 0.0f64;
        for (t, ids) in tracked.iter().enumerate() {
            for (k, &i) in ids.iter().enumerate() {
                stability = stability.max(hyp_distance(previous[t][k], map.targets[t][i]));
            }
        }
        stages.push(stage_report(&map, report, Some(stability)));
    }
    Ok(ExhaustionRun { map, stages })
}

fn stage_report(map: &SimplicialMap, report: EnergyReport, stability: Option<f64>) -> StageReport {
    StageReport {
        y_cut: map.mesh.cut_level(),
        num_nodes: map.mesh.num_nodes(),
        num_triangles: map.mesh.num_triangles(),
        truncated_area: map.mesh.truncated_area(),
        report,
        stability,
    }
}
