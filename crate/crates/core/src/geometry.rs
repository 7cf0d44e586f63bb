//! Planar vectors and the bistatic range model shared by every stage.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A point or displacement in the plane, in metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_polar(radius: f64, angle_rad: f64) -> Self {
        Self::new(radius * angle_rad.cos(), radius * angle_rad.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in the same direction, or `None` for (near-)zero vectors.
    pub fn unit(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 1e-12).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Length of the transmitter -> point -> receiver path.
pub fn bistatic_range(tap: Vec2, rap: Vec2, point: Vec2) -> f64 {
    point.distance(tap) + point.distance(rap)
}

/// Gradient of [`bistatic_range`] with respect to `point`.
///
/// At a focus the corresponding unit vector is undefined; that term is dropped.
pub fn bistatic_range_gradient(tap: Vec2, rap: Vec2, point: Vec2) -> Vec2 {
    let ut = (point - tap).unit().unwrap_or(Vec2::ZERO);
    let ur = (point - rap).unit().unwrap_or(Vec2::ZERO);
    ut + ur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_ops() {
        let a = Vec2::new(3.0, 4.0);
        assert_eq!(a.norm(), 5.0);
        assert_eq!((a - Vec2::new(3.0, 0.0)).norm(), 4.0);
        assert_eq!(a * 2.0, Vec2::new(6.0, 8.0));
        assert!(Vec2::ZERO.unit().is_none());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let tap = Vec2::new(-100.0, 20.0);
        let rap = Vec2::new(5.0, -3.0);
        let p = Vec2::new(37.0, 81.0);
        let g = bistatic_range_gradient(tap, rap, p);
        let h = 1e-5;
        let gx = (bistatic_range(tap, rap, p + Vec2::new(h, 0.0))
            - bistatic_range(tap, rap, p - Vec2::new(h, 0.0)))
            / (2.0 * h);
        let gy = (bistatic_range(tap, rap, p + Vec2::new(0.0, h))
            - bistatic_range(tap, rap, p - Vec2::new(0.0, h)))
            / (2.0 * h);
        assert!((g.x - gx).abs() < 1e-8 && (g.y - gy).abs() < 1e-8);
    }

    #[test]
    fn serde_as_pair() {
        let v: Vec2 = serde_json::from_str("[1.5, -2.0]").unwrap();
        assert_eq!(v, Vec2::new(1.5, -2.0));
        assert_eq!(serde_json::to_string(&v).unwrap(), "[1.5,-2.0]");
    }
}
