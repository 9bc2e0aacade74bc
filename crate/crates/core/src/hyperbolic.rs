//! Upper half-plane geometry and scaled ideal triangles `r T̃`, the convex
//! hull of `0`, `r` and `∞`.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Point of the upper half-plane with metric `(dx² + dy²) / y²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UHPoint {
    pub x: f64,
    pub y: f64,
}

impl UHPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.x, self.y)
    }

    pub fn from_complex(z: Complex64) -> Self {
        Self { x: z.re, y: z.im }
    }
}

pub fn hyp_distance(p: UHPoint, q: UHPoint) -> f64 {
    let chord = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
    2.0 * (chord / (2.0 * (p.y * q.y).sqrt())).asinh()
}

/// A point of `ℝ ∪ {∞}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ideal {
    Finite(f64),
    Infinity,
}

/// Isometry of the upper half-plane given by a real 2×2 matrix. With
/// positive determinant it acts as `z ↦ (az + b) / (cz + d)`; with negative
/// determinant it acts on `z̄` and reverses orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Isometry {
    pub m: Matrix2<f64>,
}

impl Isometry {
    pub fn identity() -> Self {
        Self {
            m: Matrix2::identity(),
        }
    }

    pub fn from_matrix(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self {
            m: Matrix2::new(a, b, c, d),
        }
    }

    /// `z ↦ s z + t`.
    pub fn affine(s: f64, t: f64) -> Self {
        Self::from_matrix(s, t, 0.0, 1.0)
    }

    /// `z ↦ t - s z̄`, which reverses orientation.
    pub fn reflected_affine(s: f64, t: f64) -> Self {
        Self::from_matrix(-s, t, 0.0, 1.0)
    }

    /// The map sending `a ↦ 0`, `b ↦ 1`, `c ↦ ∞`.
    fn normalizing(a: Ideal, b: Ideal, c: Ideal) -> Self {
        use Ideal::*;
        match (a, b, c) {
            (Infinity, Finite(b), Finite(c)) => Self::from_matrix(0.0, b - c, 1.0, -c),
            (Finite(a), Infinity, Finite(c)) => Self::from_matrix(1.0, -a, 1.0, -c),
            (Finite(a), Finite(b), Infinity) => Self::from_matrix(1.0, -a, 0.0, b - a),
            (Finite(a), Finite(b), Finite(c)) => {
                Self::from_matrix(b - c, -a * (b - c), b - a, -c * (b - a))
            }
            _ => panic!("ideal points must be distinct"),
        }
    }

    /// The unique isometry sending the ideal points `from[k] ↦ to[k]`.
    pub fn from_ideal_points(from: [Ideal; 3], to: [Ideal; 3]) -> Self {
        let n_from = Self::normalizing(from[0], from[1], from[2]);
        let n_to = Self::normalizing(to[0], to[1], to[2]);
        n_to.inverse().compose(&n_from)
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    pub fn preserves_orientation(&self) -> bool {
        self.det() > 0.0
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Isometry) -> Isometry {
        Isometry {
            m: self.m * other.m,
        }
    }

    pub fn inverse(&self) -> Isometry {
        let m = self.m;
        Isometry {
            m: Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]),
        }
    }

    fn mobius(&self, z: Complex64) -> Complex64 {
        let m = self.m;
        (z * m[(0, 0)] + m[(0, 1)]) / (z * m[(1, 0)] + m[(1, 1)])
    }

    fn source(&self, z: Complex64) -> Complex64 {
        if self.preserves_orientation() {
            z
        } else {
            z.conj()
        }
    }

    pub fn apply_complex(&self, z: Complex64) -> Complex64 {
        self.mobius(self.source(z))
    }

    pub fn apply(&self, p: UHPoint) -> UHPoint {
        UHPoint::from_complex(self.apply_complex(p.to_complex()))
    }

    pub fn apply_ideal(&self, p: Ideal) -> Ideal {
        let m = self.m;
        match p {
            Ideal::Infinity => {
                if m[(1, 0)] == 0.0 {
                    Ideal::Infinity
                } else {
                    Ideal::Finite(m[(0, 0)] / m[(1, 0)])
                }
            }
            Ideal::Finite(x) => {
                let den = m[(1, 0)] * x + m[(1, 1)];
                if den == 0.0 {
                    Ideal::Infinity
                } else {
                    Ideal::Finite((m[(0, 0)] * x + m[(0, 1)]) / den)
                }
            }
        }
    }

    /// Complex derivative of the underlying Möbius map at the source point.
    fn mobius_derivative(&self, w: Complex64) -> Complex64 {
        let m = self.m;
        let den = w * m[(1, 0)] + m[(1, 1)];
        Complex64::new(self.det(), 0.0) / (den * den)
    }

    /// Real Jacobian `∂(x', y') / ∂(x, y)` at `p`.
    pub fn jacobian(&self, p: UHPoint) -> Matrix2<f64> {
        let w = self.source(p.to_complex());
        let d = self.mobius_derivative(w);
        if self.preserves_orientation() {
            Matrix2::new(d.re, -d.im, d.im, d.re)
        } else {
            Matrix2::new(d.re, d.im, d.im, -d.re)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cusp {
    Zero,
    R,
    Infinity,
}

/// Sides of `r T̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    /// The vertical line `x = 0`.
    ZeroInf,
    /// The vertical line `x = r`.
    RInf,
    /// The semicircle of diameter `[0, r]`.
    ZeroR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Membership {
    Interior,
    Edge(Side),
    Outside,
}

/// Horocycle centred at a cusp of an ideal triangle: the preimage of the
/// line `y = level` under the symmetry taking the cusp to `∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horocycle {
    pub cusp: Cusp,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdealTriangle {
    pub scale: f64,
}

/// Relative tolerance used when classifying points against the sides.
const SIDE_TOL: f64 = 1e-12;

impl IdealTriangle {
    pub const STANDARD: IdealTriangle = IdealTriangle { scale: 1.0 };

    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0, "ideal triangle scale must be positive");
        Self { scale }
    }

    pub fn ideal_vertex(&self, cusp: Cusp) -> Ideal {
        match cusp {
            Cusp::Zero => Ideal::Finite(0.0),
            Cusp::R => Ideal::Finite(self.scale),
            Cusp::Infinity => Ideal::Infinity,
        }
    }

    pub fn membership(&self, p: UHPoint) -> Membership {
        let r = self.scale;
        let tol = SIDE_TOL * r.max(p.y).max(p.x.abs());
        // signed distances: positive inside
        let left = p.x;
        let right = r - p.x;
        let half = r / 2.0;
        let dx = p.x - half;
        let circle = ((dx * dx + p.y * p.y).sqrt() - half) * 2.0;
        if p.y <= 0.0 || left < -tol || right < -tol || circle < -tol {
            return Membership::Outside;
        }
        if left.abs() <= tol {
            Membership::Edge(Side::ZeroInf)
        } else if right.abs() <= tol {
            Membership::Edge(Side::RInf)
        } else if circle.abs() <= tol {
            Membership::Edge(Side::ZeroR)
        } else {
            Membership::Interior
        }
    }

    /// Centre and the feet on the sides `0∞`, `r∞`, `0r`.
    pub fn distinguished_points(&self) -> (UHPoint, [UHPoint; 3]) {
        let r = self.scale;
        (
            UHPoint::new(r * 0.5, r * 3f64.sqrt() / 2.0),
            [
                UHPoint::new(0.0, r),
                UHPoint::new(r, r),
                UHPoint::new(r * 0.5, r * 0.5),
            ],
        )
    }

    pub fn area(&self) -> f64 {
        PI
    }

    /// Area outside the horoballs bounded by the three horocycles, each at
    /// least at level `scale` so the horoballs are disjoint.
    pub fn truncated_area(&self, horocycles: &[Horocycle]) -> f64 {
        PI - horocycles
            .iter()
            .map(|h| self.scale / h.level)
            .sum::<f64>()
    }

    /// Orientation-preserving symmetry of the triangle carrying `cusp` to `∞`.
    pub fn cusp_symmetry(&self, cusp: Cusp) -> Isometry {
        let r = self.scale;
        match cusp {
            Cusp::Infinity => Isometry::identity(),
            Cusp::Zero => Isometry::from_matrix(r, -r * r, 1.0, 0.0),
            Cusp::R => Isometry::from_matrix(0.0, r * r, -1.0, r),
        }
    }

    /// Whether `p` lies strictly inside the horoball bounded by `h`.
    pub fn in_horoball(&self, h: &Horocycle, p: UHPoint) -> bool {
        self.cusp_symmetry(h.cusp).apply(p).y > h.level
    }
}

/// `n + 1` points along the geodesic segment from `p` to `q`, equally spaced
/// in hyperbolic arclength, including both endpoints.
pub fn geodesic_samples(p: UHPoint, q: UHPoint, n: usize) -> Vec<UHPoint> {
    assert!(n >= 1);
    let scale = p.y.max(q.y);
    if (p.x - q.x).abs() <= 1e-14 * scale {
        let (a, b) = (p.y.ln(), q.y.ln());
        return (0..=n)
            .map(|k| {
                let t = k as f64 / n as f64;
                UHPoint::new(p.x + t * (q.x - p.x), (a + t * (b - a)).exp())
            })
            .collect();
    }
    let center = (q.x * q.x + q.y * q.y - p.x * p.x - p.y * p.y) / (2.0 * (q.x - p.x));
    let radius = ((p.x - center).powi(2) + p.y * p.y).sqrt();
    let angle = |z: UHPoint| z.y.atan2(z.x - center);
    // arclength along the circle is ln tan(θ/2)
    let s = |theta: f64| (theta / 2.0).tan().ln();
    let (s0, s1) = (s(angle(p)), s(angle(q)));
    (0..=n)
        .map(|k| {
            if k == 0 {
                return p;
            }
            if k == n {
                return q;
            }
            let t = k as f64 / n as f64;
            let theta = 2.0 * (s0 + t * (s1 - s0)).exp().atan();
            UHPoint::new(center + radius * theta.cos(), radius * theta.sin())
        })
        .collect()
}

/// Distance from `p` to the complete geodesic with ideal endpoints `a`, `b`.
pub fn distance_to_geodesic(p: UHPoint, a: Ideal, b: Ideal) -> f64 {
    // move the geodesic to the imaginary axis
    let third = match (a, b) {
        (Ideal::Finite(x), Ideal::Finite(y)) => Ideal::Finite(x.max(y) + (x - y).abs() + 1.0),
        (Ideal::Finite(x), Ideal::Infinity) | (Ideal::Infinity, Ideal::Finite(x)) => {
            Ideal::Finite(x + 1.0)
        }
        _ => panic!("geodesic endpoints must be distinct"),
    };
    let m = Isometry::from_ideal_points(
        [a, third, b],
        [Ideal::Finite(0.0), Ideal::Finite(1.0), Ideal::Infinity],
    );
    let q = m.apply(p);
    (q.x.abs() / q.y).asinh()
}
