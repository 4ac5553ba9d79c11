//! Minimal 3-vector and 3x3 matrix math for geometry and cameras.
//!
//! Everything here is `f64`; the field stack converts to its own scalar type
//! at the encoding boundary.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const ONE: Vec3 = Vec3 { x: 1.0, y: 1.0, z: 1.0 };

    #[inline]
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    /// Componentwise product.
    #[inline]
    pub fn hadamard(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Two unit vectors completing `self` (not necessarily unit) to an
    /// orthogonal frame. The axis least aligned with `self` seeds the frame
    /// so the construction is stable for any direction.
    pub fn orthonormal_basis(self) -> (Vec3, Vec3) {
        let d = self.normalized();
        let seed = if d.x.abs() <= d.y.abs() && d.x.abs() <= d.z.abs() {
            Vec3::new(1.0, 0.0, 0.0)
        } else if d.y.abs() <= d.z.abs() {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let e1 = d.cross(seed).normalized();
        let e2 = d.cross(e1);
        (e1, e2)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Row-major 3x3 matrix; used for camera-to-world rotations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Mat3 {
            rows: [
                [c0.x, c1.x, c2.x],
                [c0.y, c1.y, c2.y],
                [c0.z, c1.z, c2.z],
            ],
        }
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.rows[0][0] * v.x + self.rows[0][1] * v.y + self.rows[0][2] * v.z,
            self.rows[1][0] * v.x + self.rows[1][1] * v.y + self.rows[1][2] * v.z,
            self.rows[2][0] * v.x + self.rows[2][1] * v.y + self.rows[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let r = &self.rows;
        Mat3 {
            rows: [
                [r[0][0], r[1][0], r[2][0]],
                [r[0][1], r[1][1], r[2][1]],
                [r[0][2], r[1][2], r[2][2]],
            ],
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    /// Camera at `eye` looking at `target`, OpenGL convention: camera space
    /// x right, y up, z backward (view direction is -z).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Pose {
        let backward = (eye - target).normalized();
        let right = up.cross(backward).normalized();
        let true_up = backward.cross(right);
        Pose {
            rotation: Mat3::from_columns(right, true_up, backward),
            translation: eye,
        }
    }

    #[inline]
    pub fn transform_direction(&self, d: Vec3) -> Vec3 {
        self.rotation.mul_vec(d)
    }

    /// 4x4 row-major camera-to-world matrix (bottom row 0 0 0 1).
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation.rows;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Pose {
        Pose {
            rotation: Mat3 {
                rows: [
                    [m[0][0], m[0][1], m[0][2]],
                    [m[1][0], m[1][1], m[1][2]],
                    [m[2][0], m[2][1], m[2][2]],
                ],
            },
            translation: Vec3::new(m[0][3], m[1][3], m[2][3]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn orthonormal_basis_is_orthonormal() {
        let dirs = [
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-0.3, 2.0, 0.4),
            Vec3::new(1e-8, -1.0, 1e-8),
        ];
        for d in dirs {
            let (e1, e2) = d.orthonormal_basis();
            assert_relative_eq!(e1.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(e2.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(e1.dot(e2), 0.0, epsilon = 1e-12);
            assert_relative_eq!(e1.dot(d.normalized()), 0.0, epsilon = 1e-12);
            assert_relative_eq!(e2.dot(d.normalized()), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn look_at_faces_target() {
        let eye = Vec3::new(0.0, 0.0, 4.0);
        let pose = Pose::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0));
        // Camera forward is -z in camera space.
        let fwd = pose.transform_direction(Vec3::new(0.0, 0.0, -1.0));
        assert_relative_eq!(fwd.z, -1.0, epsilon = 1e-12);
        // Round trip through the 4x4 form.
        let back = Pose::from_matrix4(&pose.to_matrix4());
        assert_eq!(back, pose);
    }
}
