//! Planar rigid-body geometry.
//!
//! A [`Pose2`] `T^{AB}` maps coordinates expressed in frame `B` into frame `A`:
//! `apply(T^{AB}, p_B) = R(θ) p_B + t`. Headings are always stored wrapped to
//! `(-π, π]`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let a = theta.rem_euclid(two_pi);
    if a > PI {
        a - two_pi
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Centroid of a non-empty slice; `None` when empty.
    pub fn centroid(points: &[Point2]) -> Option<Point2> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let sum = points.iter().fold(Point2::ORIGIN, |acc, p| acc + *p);
        Some(sum * (1.0 / n))
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Rigid transform in SE(2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawPose2")]
pub struct Pose2 {
    x: f64,
    y: f64,
    theta: f64,
}

#[derive(Deserialize)]
struct RawPose2 {
    x: f64,
    y: f64,
    theta: f64,
}

impl From<RawPose2> for Pose2 {
    fn from(raw: RawPose2) -> Self {
        Pose2::new(raw.x, raw.y, raw.theta)
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn from_parts(translation: Point2, theta: f64) -> Self {
        Self::new(translation.x, translation.y, theta)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }

    /// Rotates `p` by this pose's heading without translating.
    pub fn rotate(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(c * p.x - s * p.y, s * p.x + c * p.y)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.rotate(other.translation()) + self.translation();
        Pose2::from_parts(t, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        // -R^T t
        let x = -(c * self.x + s * self.y);
        let y = -(-s * self.x + c * self.y);
        Pose2::new(x, y, -self.theta)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        self.rotate(p) + self.translation()
    }

    /// Relative transform from `self` to `other`, i.e. `inverse(self) ∘ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    /// Additive update on `(x, y, θ)` followed by heading normalization.
    pub fn retract(&self, delta: [f64; 3]) -> Pose2 {
        Pose2::new(self.x + delta[0], self.y + delta[1], self.theta + delta[2])
    }

    /// Component-wise closeness with headings compared on the circle.
    pub fn approx_eq(&self, other: &Pose2, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && normalize_angle(self.theta - other.theta).abs() <= tol
    }
}

pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn inverse(a: &Pose2) -> Pose2 {
    a.inverse()
}

pub fn apply(a: &Pose2, p: Point2) -> Point2 {
    a.apply(p)
}

pub fn between(a: &Pose2, b: &Pose2) -> Pose2 {
    a.between(b)
}

pub fn retract(a: &Pose2, delta: [f64; 3]) -> Pose2 {
    a.retract(delta)
}
