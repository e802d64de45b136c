//! Temporal motion fusion.
//!
//! A per-voxel offset field `M` is predicted from the volume features by a
//! linear layer. The historical motion state is warped into the current
//! frame at `R·(P + M) + t` and compared against `M`; one gradient step on
//! that discrepancy (taken with respect to `M`) yields the fused motion.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    compensated_sum, transform_coords, trilinear_jacobian, trilinear_sample, CoordField, RigidTransform, Tensor,
    VoxelGrid,
};

/// Per-voxel 3-vector offsets in voxel units, stored as a 3-channel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField(VoxelGrid);

impl MotionField {
    pub fn zeros(extents: [usize; 3]) -> Self {
        Self(VoxelGrid::zeros(3, extents))
    }

    pub fn from_grid(g: VoxelGrid) -> Result<Self> {
        if g.channels() != 3 {
            return Err(shape_err("MotionField::from_grid", 3, g.channels()));
        }
        Ok(Self(g))
    }

    /// Same offset at every voxel.
    pub fn uniform(extents: [usize; 3], offset: [f64; 3]) -> Self {
        let mut g = VoxelGrid::zeros(3, extents);
        for v in 0..g.voxels() {
            for (axis, &o) in offset.iter().enumerate() {
                g.set(axis, v, o);
            }
        }
        Self(g)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.0.extents()
    }

    pub fn voxels(&self) -> usize {
        self.0.voxels()
    }

    #[inline]
    pub fn offset(&self, v: usize) -> [f64; 3] {
        [self.0.get(0, v), self.0.get(1, v), self.0.get(2, v)]
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn grid_mut(&mut self) -> &mut VoxelGrid {
        &mut self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        self.0.to_tensor()
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        Self::from_grid(VoxelGrid::from_tensor(t)?)
    }

    fn check_pair(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(shape_err(op, self.extents(), other.extents()));
        }
        Ok(())
    }
}

/// The linear layer `f_m`: a `3 × c` weight and a 3-vector bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPredictor {
    pub weight: Tensor,
    pub bias: [f64; 3],
}

impl MotionPredictor {
    pub fn zeros(c: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[3, c]),
            bias: [0.0; 3],
        }
    }

    /// Weights and bias drawn from `uniform(−scale/√c, scale/√c)`.
    pub fn random<R: Rng>(c: usize, scale: f64, rng: &mut R) -> Self {
        let a = scale / (c as f64).sqrt();
        if a == 0.0 {
            return Self::zeros(c);
        }
        let weight = Tensor::from_fn(&[3, c], |_| rng.gen_range(-a..a));
        let bias = [rng.gen_range(-a..a), rng.gen_range(-a..a), rng.gen_range(-a..a)];
        Self { weight, bias }
    }
}

/// `M = f_m(V)`, applied independently at every voxel.
pub fn predict_motion(v: &VoxelGrid, f_m: &MotionPredictor) -> Result<MotionField> {
    let (rows, c) = f_m.weight.shape2()?;
    if rows != 3 || c != v.channels() {
        return Err(shape_err("predict_motion", format!("[3, {}]", v.channels()), f_m.weight.dims()));
    }
    let mut out = v.mix_channels(&f_m.weight)?;
    let n = out.voxels();
    for (axis, &b) in f_m.bias.iter().enumerate() {
        for val in &mut out.data_mut()[axis * n..(axis + 1) * n] {
            *val += b;
        }
    }
    MotionField::from_grid(out)
}

/// Sampling coordinates `R·(P + M) + t`.
pub fn motion_coords(m_now: &MotionField, t: &RigidTransform) -> Result<CoordField> {
    let displaced = CoordField::displaced(m_now.grid())?;
    Ok(transform_coords(t, &displaced))
}

/// `Sample(H_m_prev; R·(P + M) + t)`.
pub fn warp_motion(h_prev: &MotionField, m_now: &MotionField, t: &RigidTransform) -> Result<MotionField> {
    h_prev.check_pair(m_now, "warp_motion")?;
    let coords = motion_coords(m_now, t)?;
    MotionField::from_grid(trilinear_sample(h_prev.grid(), &coords))
}

/// `‖Warp(H_m_prev) − M‖²` over all voxels and components.
pub fn motion_loss(h_prev: &MotionField, m_now: &MotionField, t: &RigidTransform) -> Result<f64> {
    let warped = warp_motion(h_prev, m_now, t)?;
    Ok(compensated_sum(
        warped
            .grid()
            .data()
            .iter()
            .zip(m_now.grid().data())
            .map(|(w, m)| (w - m) * (w - m)),
    ))
}

/// Gradient of [`motion_loss`] with respect to `M`.
///
/// Per voxel, with residual `r = Warp(H_m_prev) − M` and `J` the `3 × 3`
/// sampling Jacobian laid out `(component, axis)`:
/// `∇ = 2·((J·R)ᵀ − I)·r`, i.e. the sampler path through the coordinates
/// plus the direct `−I` path. Translation does not enter.
pub fn motion_gradient(h_prev: &MotionField, m_now: &MotionField, t: &RigidTransform) -> Result<MotionField> {
    h_prev.check_pair(m_now, "motion_gradient")?;
    let coords = motion_coords(m_now, t)?;
    let warped = trilinear_sample(h_prev.grid(), &coords);
    let jac = trilinear_jacobian(h_prev.grid(), &coords);
    let r = &t.rotation;
    let mut out = MotionField::zeros(m_now.extents());
    for v in 0..m_now.voxels() {
        let res = [
            warped.get(0, v) - m_now.grid().get(0, v),
            warped.get(1, v) - m_now.grid().get(1, v),
            warped.get(2, v) - m_now.grid().get(2, v),
        ];
        let j = jac.at(v);
        for axis in 0..3 {
            // (J·R)[comp][axis]
            let mut g = 0.0;
            for (comp, &rc) in res.iter().enumerate() {
                let jr = j[comp][0] * r[0][axis] + j[comp][1] * r[1][axis] + j[comp][2] * r[2][axis];
                g += jr * rc;
            }
            out.0.set(axis, v, 2.0 * (g - res[axis]));
        }
    }
    Ok(out)
}

/// `H_m = M − η_m·∇`; the result is also the fused motion `M_f`.
pub fn motion_update(m_now: &MotionField, grad: &MotionField, eta_m: f64) -> Result<MotionField> {
    if eta_m < 0.0 {
        return Err(Error::Argument(format!("eta_m must be non-negative, got {eta_m}")));
    }
    m_now.check_pair(grad, "motion_update")?;
    let data = m_now
        .grid()
        .data()
        .iter()
        .zip(grad.grid().data())
        .map(|(m, g)| m - eta_m * g)
        .collect();
    MotionField::from_grid(VoxelGrid::from_data(3, m_now.extents(), data)?)
}
