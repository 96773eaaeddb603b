//! Rigid transforms and the axis-aligned scene box.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{CatError, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Rigid {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self { rotation: *r.matrix(), translation: Vec3::zeros() }
    }

    /// Rotation by `angle` about the axis through `pivot`.
    pub fn about_pivot(axis: Vec3, angle: f64, pivot: Vec3) -> Self {
        let r = Self::from_axis_angle(axis, angle).rotation;
        Self { rotation: r, translation: pivot - r * pivot }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    /// Row-major `[R | t]`, 12 values.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(CatError::Invalid(format!("rigid transform needs 12 values, got {}", v.len())));
        }
        let rotation = Mat3::from_fn(|r, c| v[r * 4 + c]);
        let translation = Vec3::new(v[3], v[7], v[11]);
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    /// Orthonormal with determinant +1, both within 1e-9.
    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(CatError::Invalid("non-finite rigid transform".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        let det = self.rotation.determinant();
        if err > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(CatError::Invalid(format!("rotation is not proper orthonormal (|RᵀR−I|={err:.3e}, det={det:.12})")));
        }
        Ok(())
    }
}

/// Axis-aligned box; the scene lives in `[-1, 1]³` by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Aabb {
    fn default() -> Self {
        Self::cube(1.0)
    }
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self { min: Vec3::repeat(-half), max: Vec3::repeat(half) }
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extent(&self) -> Vec3 {
        (self.max - self.min) * 0.5
    }

    /// Slab test; returns the parametric entry/exit distances clipped to `t >= 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut a, mut b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Closest-point parameter of `p` on segment `a..b`, clamped to `[0, 1]`.
pub fn segment_param(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return 0.0;
    }
    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

pub fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let t = segment_param(p, a, b);
    (p - (a + (b - a) * t)).norm()
}
