//! World-frame geometry shared by the phantom, renderer and controller.
//!
//! World frame: `z` up, skin surface of the default phantom at `z = 0`,
//! `y` along the limb in the distal direction.
//!
//! The end-effector frame keeps a fixed orientation during a scan: its
//! `z` axis is world `-z` (into the tissue) and its `y` axis is world `y`.
//! Being right-handed, its `x` axis is world `-x`. Image columns grow along
//! world `+x`, so a vessel seen at a positive column offset is reached by
//! a negative end-effector `x` motion.

use std::ops::{Add, Mul, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotates about the world `z` axis through `pivot`.
    pub fn rotate_z_about(self, pivot: Vec3, angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        let dx = self.x - pivot.x;
        let dy = self.y - pivot.y;
        Self::new(pivot.x + c * dx - s * dy, pivot.y + s * dx + c * dy, self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Probe (end-effector) pose. Orientation is fixed, so only the position
/// of the probe face centre is stored, in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProbePose {
    pub position: Vec3,
}

impl ProbePose {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { position: Vec3::new(x, y, z) }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
    }

    /// Applies a translation expressed in the end-effector frame.
    pub fn translated_ee(&self, delta: EeDelta) -> Self {
        let p = self.position;
        Self::new(p.x - delta.dx, p.y + delta.dy, p.z - delta.dz)
    }
}

/// Translation command in the end-effector frame, millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EeDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ee_frame_is_right_handed_with_z_down() {
        let pose = ProbePose::new(1.0, 2.0, 3.0);
        let moved = pose.translated_ee(EeDelta { dx: 1.0, dy: 2.0, dz: 0.5 });
        assert_eq!(moved, ProbePose::new(0.0, 4.0, 2.5));
    }

    #[test]
    fn rotation_about_pivot_fixes_pivot() {
        let pivot = Vec3::new(3.0, -2.0, 0.0);
        let r = pivot.rotate_z_about(pivot, 0.7);
        assert_eq!(r, pivot);
        let p = Vec3::new(4.0, -2.0, 5.0).rotate_z_about(pivot, std::f64::consts::FRAC_PI_2);
        assert!((p.x - 3.0).abs() < 1e-12 && (p.y + 1.0).abs() < 1e-12 && p.z == 5.0);
    }
}
