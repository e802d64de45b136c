use super::CoordField;
use crate::error::{Error, Result};

/// Rigid motion `p ↦ R·p + t` in voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    /// Validates orthonormality (`RᵀR = I` within 1e-12) and a positive determinant.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        let err = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rtr[i][j] - IDENTITY3[i][j]).abs())
            .fold(0.0, f64::max);
        if err > 1e-12 || det(&rotation) <= 0.0 || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR − I| = {err:e})"
            )));
        }
        Ok(t)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotation: IDENTITY3,
            translation: t,
        }
    }

    /// Rotation by `yaw` radians about the z axis, followed by `t`.
    pub fn from_yaw(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: t,
        }
    }

    /// Rotation by `yaw` about the vertical axis through `pivot`, then `t`.
    pub fn yaw_about(yaw: f64, pivot: [f64; 3], t: [f64; 3]) -> Self {
        let rot = Self::from_yaw(yaw, [0.0; 3]);
        let rp = rot.apply_rotation(pivot);
        Self::from_yaw(yaw, [pivot[0] - rp[0] + t[0], pivot[1] - rp[1] + t[1], pivot[2] - rp[2] + t[2]])
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.apply_rotation(p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    #[inline]
    pub fn apply_rotation(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    /// Inverse from the transpose: `(Rᵀ, −Rᵀt)`.
    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let inv = Self {
            rotation: rt,
            translation: [0.0; 3],
        };
        let t = inv.apply_rotation(self.translation);
        Self {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == IDENTITY3 && self.translation == [0.0; 3]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.rotation[i][j] - other.rotation[i][j]).abs());
            }
            m = m.max((self.translation[i] - other.translation[i]).abs());
        }
        m
    }
}

fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[j][i] = m[i][j];
        }
    }
    t
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn det(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `rotation·coords + translation` at every voxel.
pub fn transform_coords(t: &RigidTransform, coords: &CoordField) -> CoordField {
    let mut out = coords.clone();
    for v in 0..coords.voxels() {
        out.set_point(v, t.apply(coords.point(v)));
    }
    out
}
