//! Voxel-level recurrent fusion with a single-frame-sized hidden state.
//!
//! `H_v^t = A_v·warp(H_v^{t−1}) + B_v·V^t`, where the warp samples the
//! previous state at `R·(P + M_f) + t`. A linear update of this form is one
//! gradient-descent step on `‖A·h − B·x‖²`; [`gd_step_transform`] maps
//! descent parameters `(A, B, η)` to the equivalent recurrent weights.

use crate::error::{shape_err, Error, Result};
use crate::gdft;
use crate::motion::{motion_coords, MotionField};
use crate::tensor::{trilinear_sample, RigidTransform, Tensor, VoxelGrid};

/// Recurrent weights `A_v, B_v ∈ ℝ^{c×c}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub a: Tensor,
    pub b: Tensor,
}

impl FusionWeights {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let w = Self { a, b };
        w.validate()?;
        Ok(w)
    }

    /// `A_v = αI`, `B_v = (1 − α)I`.
    pub fn ema(c: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Setting(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Self::new(Tensor::eye(c).scale(alpha), Tensor::eye(c).scale(1.0 - alpha))
    }

    /// `A_v = 0`, `B_v = I`: no memory.
    pub fn memoryless(c: usize) -> Self {
        Self {
            a: Tensor::zeros(&[c, c]),
            b: Tensor::eye(c),
        }
    }

    pub fn channels(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn validate(&self) -> Result<usize> {
        let (r, c) = self.a.shape2()?;
        if r != c || self.b.dims() != self.a.dims() {
            return Err(shape_err("FusionWeights", self.a.dims(), self.b.dims()));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Argument("fusion weights must be finite".into()));
        }
        Ok(c)
    }
}

/// The recurrent voxel state `H_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelHidden {
    pub state: VoxelGrid,
}

impl VoxelHidden {
    pub fn new(state: VoxelGrid) -> Self {
        Self { state }
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        gdft::encoded_len(&[self.state.channels(), self.state.extents()[0], self.state.extents()[1], self.state.extents()[2]])
    }
}

/// Descent parameters of the quadratic `‖A·h − B·x‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GDStepWeights {
    pub a: Tensor,
    pub b: Tensor,
    pub eta: f64,
}

/// `warp(H_v_prev)` at `R·(P + M_f) + t`.
pub fn warp_voxels(h_prev: &VoxelHidden, m_fused: &MotionField, t: &RigidTransform) -> Result<VoxelGrid> {
    if h_prev.state.extents() != m_fused.extents() {
        return Err(shape_err("warp_voxels", h_prev.state.extents(), m_fused.extents()));
    }
    let coords = motion_coords(m_fused, t)?;
    Ok(trilinear_sample(&h_prev.state, &coords))
}

/// `H_v = A_v·warp(H_v_prev) + B_v·V`; the new state is also the fused volume.
pub fn voxel_update(
    h_prev: &VoxelHidden,
    v_now: &VoxelGrid,
    m_fused: &MotionField,
    t: &RigidTransform,
    w: &FusionWeights,
) -> Result<VoxelHidden> {
    let c = w.validate()?;
    if v_now.channels() != c {
        return Err(shape_err("voxel_update", c, v_now.channels()));
    }
    h_prev.state.check_same(v_now, "voxel_update")?;
    let warped = warp_voxels(h_prev, m_fused, t)?;
    let state = warped.mix_channels(&w.a)?.add(&v_now.mix_channels(&w.b)?)?;
    Ok(VoxelHidden { state })
}

/// Sinusoidal embedding of elapsed time `τ = t_index·dt`:
/// entry `2i` is `sin(τ/10000^{2i/c})`, entry `2i+1` the matching cosine.
pub fn time_embed(t_index: u64, dt: f64, c: usize) -> Result<Vec<f64>> {
    if c == 0 || c % 2 == 1 {
        return Err(Error::Setting(format!("time embedding needs an even channel count, got {c}")));
    }
    let tau = t_index as f64 * dt;
    let mut out = vec![0.0; c];
    for i in 0..c / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / c as f64);
        let (s, co) = (tau / freq).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = co;
    }
    Ok(out)
}

/// Add a per-channel vector to every voxel.
pub fn add_channel_offsets(v: &VoxelGrid, offsets: &[f64]) -> Result<VoxelGrid> {
    if offsets.len() != v.channels() {
        return Err(shape_err("add_channel_offsets", v.channels(), offsets.len()));
    }
    let mut out = v.clone();
    let n = v.voxels();
    for (ch, &o) in offsets.iter().enumerate() {
        for val in &mut out.data_mut()[ch * n..(ch + 1) * n] {
            *val += o;
        }
    }
    Ok(out)
}

/// `A′ = I − 2ηAᵀA`, `B′ = 2ηAᵀB`.
pub fn gd_step_transform(g: &GDStepWeights) -> Result<FusionWeights> {
    let (r, c) = g.a.shape2()?;
    if r != c || g.b.dims() != g.a.dims() {
        return Err(shape_err("gd_step_transform", g.a.dims(), g.b.dims()));
    }
    let at = g.a.transpose()?;
    let a_prime = Tensor::eye(c).axpy_neg(2.0 * g.eta, &at.matmul(&g.a)?)?;
    let b_prime = at.matmul(&g.b)?.scale(2.0 * g.eta);
    Ok(FusionWeights {
        a: a_prime,
        b: b_prime,
    })
}

/// Largest entry-wise gap between `A′h + B′x` and `h − 2ηAᵀ(Ah − Bx)`.
pub fn gd_step_check(g: &GDStepWeights, h: &[f64], x: &[f64]) -> Result<f64> {
    let w = gd_step_transform(g)?;
    let c = w.channels();
    if h.len() != c || x.len() != c {
        return Err(shape_err("gd_step_check", c, (h.len(), x.len())));
    }
    let (h, x) = (Tensor::column(h), Tensor::column(x));
    let rnn = w.a.matmul(&h)?.add(&w.b.matmul(&x)?)?;
    let residual = g.a.matmul(&h)?.sub(&g.b.matmul(&x)?)?;
    let grad = g.a.transpose()?.matmul(&residual)?.scale(2.0);
    let gd = h.axpy_neg(g.eta, &grad)?;
    Ok(rnn.max_abs_diff(&gd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_grid(c: usize, extents: [usize; 3], rng: &mut ChaCha8Rng) -> VoxelGrid {
        let n: usize = extents.iter().product();
        VoxelGrid::from_data(c, extents, (0..c * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_gd(c: usize, rng: &mut ChaCha8Rng) -> GDStepWeights {
        GDStepWeights {
            a: Tensor::from_fn(&[c, c], |_| rng.gen_range(-1.0..1.0)),
            b: Tensor::from_fn(&[c, c], |_| rng.gen_range(-1.0..1.0)),
            eta: rng.gen_range(0.0..1.0),
        }
    }

    #[test]
    fn memoryless_returns_current() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = VoxelHidden::new(random_grid(3, [3, 4, 2], &mut rng));
        let v = random_grid(3, [3, 4, 2], &mut rng);
        let m = MotionField::uniform([3, 4, 2], [0.3, -0.2, 0.1]);
        let out = voxel_update(&h, &v, &m, &RigidTransform::from_yaw(0.3, [0.5, 0.0, 0.0]), &FusionWeights::memoryless(3)).unwrap();
        assert_eq!(out.state, v);
    }

    #[test]
    fn ema_fixed_point() {
        let x = VoxelGrid::from_data(2, [2, 2, 2], (0..16).map(|i| i as f64 * 0.25).collect()).unwrap();
        let m = MotionField::zeros([2, 2, 2]);
        for alpha in [0.0, 0.3, 0.5, 0.9] {
            let w = FusionWeights::ema(2, alpha).unwrap();
            let out = voxel_update(&VoxelHidden::new(x.clone()), &x, &m, &RigidTransform::identity(), &w).unwrap();
            assert!(out.state.max_abs_diff(&x) < 1e-15);
        }
        assert!(FusionWeights::ema(2, 1.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random_grid(2, [3, 3, 3], &mut rng);
        let alpha = 0.5;
        let w = FusionWeights::ema(2, alpha).unwrap();
        let m = MotionField::zeros([3, 3, 3]);
        let mut h = VoxelHidden::new(random_grid(2, [3, 3, 3], &mut rng));
        h = voxel_update(&h, &target, &m, &RigidTransform::identity(), &w).unwrap();
        let first = h.state.max_abs_diff(&target);
        for t in 2..20 {
            h = voxel_update(&h, &target, &m, &RigidTransform::identity(), &w).unwrap();
            let bound = alpha.powi(t - 1) * first;
            assert!(h.state.max_abs_diff(&target) <= bound * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn ema_steady_state_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (alpha, extents) = (0.5, [12, 12, 8]);
        let n = 12 * 12 * 8;
        let w = FusionWeights::ema(1, alpha).unwrap();
        let m = MotionField::zeros(extents);
        let mut noisy = || VoxelGrid::from_data(1, extents, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        let first = noisy();
        let mut h = VoxelHidden::new(first.clone());
        h = voxel_update(&h, &first, &m, &RigidTransform::identity(), &w).unwrap();
        for _ in 1..30 {
            h = voxel_update(&h, &noisy(), &m, &RigidTransform::identity(), &w).unwrap();
        }
        let var = h.state.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let expect = (1.0 - alpha) / (1.0 + alpha);
        assert!((var - expect).abs() / expect < 0.15, "variance {var}");
    }

    #[test]
    fn state_size_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = FusionWeights::ema(4, 0.5).unwrap();
        let m = MotionField::zeros([4, 4, 2]);
        let mut h = VoxelHidden::new(random_grid(4, [4, 4, 2], &mut rng));
        let size = h.byte_len();
        assert_eq!(size, gdft::encode(&h.state.to_tensor()).len());
        for _ in 0..5 {
            h = voxel_update(&h, &random_grid(4, [4, 4, 2], &mut rng), &m, &RigidTransform::identity(), &w).unwrap();
            assert_eq!(gdft::encode(&h.state.to_tensor()).len(), size);
        }
    }

    #[test]
    fn shape_errors() {
        let h = VoxelHidden::new(VoxelGrid::zeros(2, [2, 2, 2]));
        let w = FusionWeights::ema(2, 0.5).unwrap();
        let m = MotionField::zeros([2, 2, 2]);
        assert!(voxel_update(&h, &VoxelGrid::zeros(3, [2, 2, 2]), &m, &RigidTransform::identity(), &w).is_err());
        assert!(voxel_update(&h, &VoxelGrid::zeros(2, [2, 2, 3]), &m, &RigidTransform::identity(), &w).is_err());
        assert!(voxel_update(&h, &VoxelGrid::zeros(2, [2, 2, 2]), &MotionField::zeros([3, 2, 2]), &RigidTransform::identity(), &w).is_err());
    }

    #[test]
    fn time_embedding_cases() {
        let e = time_embed(0, 0.5, 6).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = time_embed(1, std::f64::consts::PI, 4).unwrap();
        assert!(e[0].abs() < 1e-12 && (e[1] + 1.0).abs() < 1e-12);
        for t in 0..50 {
            assert!(time_embed(t, 0.37, 8).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(matches!(time_embed(1, 0.5, 3), Err(Error::Setting(_))));
        let v = add_channel_offsets(&VoxelGrid::zeros(2, [1, 1, 2]), &[1.0, -1.0]).unwrap();
        assert_eq!(v.data(), &[1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn equivalence_examples() {
        let g = GDStepWeights {
            a: Tensor::eye(1),
            b: Tensor::eye(1),
            eta: 0.5,
        };
        let w = gd_step_transform(&g).unwrap();
        assert_eq!((w.a.data()[0], w.b.data()[0]), (0.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut frozen = random_gd(3, &mut rng);
        frozen.eta = 0.0;
        let w = gd_step_transform(&frozen).unwrap();
        assert_eq!(w.a, Tensor::eye(3));
        assert!(w.b.data().iter().all(|&v| v == 0.0));
        let h = [0.3, -1.2, 2.0];
        assert_eq!(gd_step_check(&frozen, &h, &[1.0, 1.0, 1.0]).unwrap(), 0.0);

        let g = random_gd(4, &mut rng);
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // one explicit descent step, written out with loops
        let mut step = h.clone();
        for j in 0..4 {
            let mut grad = 0.0;
            for i in 0..4 {
                let mut r = 0.0;
                for k in 0..4 {
                    r += g.a.at2(i, k) * h[k] - g.b.at2(i, k) * x[k];
                }
                grad += 2.0 * g.a.at2(i, j) * r;
            }
            step[j] -= g.eta * grad;
        }
        let w = gd_step_transform(&g).unwrap();
        let rnn = w.a.matmul(&Tensor::column(&h)).unwrap().add(&w.b.matmul(&Tensor::column(&x)).unwrap()).unwrap();
        for j in 0..4 {
            assert!((rnn.data()[j] - step[j]).abs() < 1e-12);
        }
        assert!(gd_step_check(&g, &h, &x[..3]).is_err());
    }

    proptest! {
        #[test]
        fn equivalence_identity_holds(seed in any::<u64>(), c in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gd(c, &mut rng);
            let h: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assert!(gd_step_check(&g, &h, &x).unwrap() <= 1e-11);
        }

        #[test]
        fn update_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let extents = [3, 3, 2];
            let w = FusionWeights::new(
                Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0)),
                Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0)),
            ).unwrap();
            let m = MotionField::uniform(extents, [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.2]);
            let t = RigidTransform::from_yaw(rng.gen_range(-0.3..0.3), [0.4, -0.1, 0.0]);
            let (h1, h2) = (random_grid(2, extents, &mut rng), random_grid(2, extents, &mut rng));
            let (v1, v2) = (random_grid(2, extents, &mut rng), random_grid(2, extents, &mut rng));
            let mix = |p: &VoxelGrid, q: &VoxelGrid| p.scale(a).add(&q.scale(b)).unwrap();
            let joint = voxel_update(&VoxelHidden::new(mix(&h1, &h2)), &mix(&v1, &v2), &m, &t, &w).unwrap();
            let sep = mix(
                &voxel_update(&VoxelHidden::new(h1), &v1, &m, &t, &w).unwrap().state,
                &voxel_update(&VoxelHidden::new(h2), &v2, &m, &t, &w).unwrap().state,
            );
            prop_assert!(joint.state.max_abs_diff(&sep) < 1e-12);
        }
    }
}
