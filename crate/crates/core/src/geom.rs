//! Small fixed-size linear algebra for 2D chart computations.

use std::ops::{Add, Mul, Neg, Sub};

/// A chart vector: either a point (u, v) or a tangent vector in chart components.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vec2 {
    pub u: f64,
    pub v: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { u: 0.0, v: 0.0 };

    pub fn new(u: f64, v: f64) -> Self {
        Vec2 { u, v }
    }

    /// Euclidean (chart) dot product.
    pub fn dot(self, o: Vec2) -> f64 {
        self.u * o.u + self.v * o.v
    }

    /// Euclidean (chart) norm.
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    /// 2D cross product (the z-component of the wedge).
    pub fn cross(self, o: Vec2) -> f64 {
        self.u * o.v - self.v * o.u
    }

    pub fn scale(self, c: f64) -> Vec2 {
        Vec2::new(self.u * c, self.v * c)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.u + o.u, self.v + o.v)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.u - o.u, self.v - o.v)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, c: f64) -> Vec2 {
        self.scale(c)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.u, -self.v)
    }
}

/// Symmetric 2x2 matrix, used for metric tensors and their derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SymMat2 {
    pub uu: f64,
    pub uv: f64,
    pub vv: f64,
}

impl SymMat2 {
    pub const IDENTITY: SymMat2 = SymMat2 { uu: 1.0, uv: 0.0, vv: 1.0 };

    pub fn new(uu: f64, uv: f64, vv: f64) -> Self {
        SymMat2 { uu, uv, vv }
    }

    pub fn diag(uu: f64, vv: f64) -> Self {
        SymMat2 { uu, uv: 0.0, vv }
    }

    pub fn det(self) -> f64 {
        self.uu * self.vv - self.uv * self.uv
    }

    /// Positive definiteness via leading minors.
    pub fn is_spd(self) -> bool {
        self.uu > 0.0 && self.det() > 0.0
    }

    pub fn inverse(self) -> SymMat2 {
        let d = self.det();
        SymMat2::new(self.vv / d, -self.uv / d, self.uu / d)
    }

    pub fn apply(self, w: Vec2) -> Vec2 {
        Vec2::new(self.uu * w.u + self.uv * w.v, self.uv * w.u + self.vv * w.v)
    }

    /// Bilinear form w1^T g w2.
    pub fn inner(self, w1: Vec2, w2: Vec2) -> f64 {
        w1.dot(self.apply(w2))
    }

    /// Quadratic form w^T g w.
    pub fn quad(self, w: Vec2) -> f64 {
        self.inner(w, w)
    }

    pub fn scale(self, c: f64) -> SymMat2 {
        SymMat2::new(self.uu * c, self.uv * c, self.vv * c)
    }

    pub fn add(self, o: SymMat2) -> SymMat2 {
        SymMat2::new(self.uu + o.uu, self.uv + o.uv, self.vv + o.vv)
    }

    pub fn sub(self, o: SymMat2) -> SymMat2 {
        SymMat2::new(self.uu - o.uu, self.uv - o.uv, self.vv - o.vv)
    }

    /// Largest absolute entry, for tolerance comparisons.
    pub fn max_abs(self) -> f64 {
        self.uu.abs().max(self.uv.abs()).max(self.vv.abs())
    }
}

/// General (not necessarily symmetric) 2x2 matrix, row-major.
#[derive(Clone, Copy, Debug, Default)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 { a, b, c, d }
    }

    pub fn apply(self, w: Vec2) -> Vec2 {
        Vec2::new(self.a * w.u + self.b * w.v, self.c * w.u + self.d * w.v)
    }

    pub fn det(self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// J^T S J for symmetric S (pullback of a quadratic form).
    pub fn congruence(self, s: SymMat2) -> SymMat2 {
        let col1 = Vec2::new(self.a, self.c);
        let col2 = Vec2::new(self.b, self.d);
        SymMat2::new(s.inner(col1, col1), s.inner(col1, col2), s.inner(col2, col2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmat_inverse_roundtrip() {
        let g = SymMat2::new(2.0, 0.3, 1.5);
        let gi = g.inverse();
        let w = Vec2::new(0.7, -1.1);
        let back = gi.apply(g.apply(w));
        assert_relative_eq!(back.u, w.u, epsilon = 1e-14);
        assert_relative_eq!(back.v, w.v, epsilon = 1e-14);
    }

    #[test]
    fn congruence_matches_pullback() {
        let j = Mat2::new(2.0, 1.0, 1.0, -1.0);
        let s = SymMat2::IDENTITY;
        let g = j.congruence(s);
        // J^T J = [[5, 1], [1, 2]]
        assert_relative_eq!(g.uu, 5.0);
        assert_relative_eq!(g.uv, 1.0);
        assert_relative_eq!(g.vv, 2.0);
    }
}
