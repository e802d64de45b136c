//! Reference computations used to check the fused kernels: central finite
//! differences, brute-force trilinear sums, a per-element chain-rule scene
//! gradient, and a multi-frame stacking fuser for memory comparisons.

use std::collections::VecDeque;

use crate::error::{shape_err, Error, Result};
use crate::gdft;
use crate::scene::{AugmentWeights, SceneGradient, SceneParams};
use crate::tensor::{transform_coords, trilinear_sample, CoordField, RigidTransform, Tensor, VoxelGrid, NORM_EPS};

/// Central differences `(L(x + hₑ·e) − L(x − hₑ·e)) / 2hₑ` per entry, with
/// `hₑ = h·max(1, |xₑ|)`.
pub fn finite_diff_grad(mut loss: impl FnMut(&Tensor) -> Result<f64>, at: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = at.clone();
    let mut out = Tensor::zeros(at.dims());
    for i in 0..at.len() {
        let x = at.data()[i];
        let step = h * x.abs().max(1.0);
        probe.data_mut()[i] = x + step;
        let plus = loss(&probe)?;
        probe.data_mut()[i] = x - step;
        let minus = loss(&probe)?;
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite loss at entry {i}")));
        }
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// `Σ_q grid[q]·Π_a max(0, 1 − |p_a − q_a|)` over every lattice point.
pub fn brute_force_trilinear(grid: &VoxelGrid, p: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; grid.channels()];
    for v in 0..grid.voxels() {
        let q = grid.voxel_coords(v);
        let w: f64 = (0..3).map(|a| (1.0 - (p[a] - q[a] as f64).abs()).max(0.0)).product();
        if w > 0.0 {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += w * grid.get(ch, v);
            }
        }
    }
    out
}

/// Gradient of the scene loss assembled one scalar chain term at a time.
///
/// Every `∂L/∂W_kl` is accumulated as `Σ_j Σ_i ∂L/∂Ẑ_ij · ∂Ẑ_ij/∂z_kj · x_lj`
/// with the per-column normalization Jacobian written out entry by entry,
/// so the cost is `O(c³·n)` against `O(c²·n)` for the fused form.
pub fn naive_chain_gradient(v: &Tensor, params: &SceneParams, aug: &AugmentWeights) -> Result<SceneGradient> {
    let c = params.validate()?;
    let (rows, n) = v.shape2()?;
    if rows != c {
        return Err(shape_err("naive_chain_gradient", format!("[{c}, n]"), v.dims()));
    }
    let (gamma, beta, w, b) = (params.gamma.data(), params.beta.data(), params.w.data(), params.b.data());
    let q = |m: &Tensor, i: usize, j: usize| (0..c).map(|k| m.at2(i, k) * v.at2(k, j)).sum::<f64>();

    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    let mut g_w = vec![0.0; c * c];
    let mut g_b = vec![0.0; c];
    let (mut x, mut z, mut zhat, mut dl_dzhat) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let mut jac = vec![0.0; c * c];
    for j in 0..n {
        for i in 0..c {
            x[i] = q(&aug.q1, i, j);
        }
        for k in 0..c {
            z[k] = b[k] + (0..c).map(|l| w[k * c + l] * x[l]).sum::<f64>();
        }
        let mean = z.iter().sum::<f64>() / c as f64;
        let var = z.iter().map(|zk| (zk - mean) * (zk - mean)).sum::<f64>() / c as f64;
        let sigma = (var + NORM_EPS).sqrt();
        for i in 0..c {
            zhat[i] = (z[i] - mean) / sigma;
        }
        for i in 0..c {
            let y = gamma[i] * zhat[i] + beta[i] + x[i];
            let d1 = y - q(&aug.q2, i, j);
            g_gamma[i] += 2.0 * d1 * zhat[i];
            g_beta[i] += 2.0 * d1;
            dl_dzhat[i] = 2.0 * d1 * gamma[i];
        }
        // ∂Ẑ_i/∂z_k = (δ_ik − 1/c − Ẑ_i·Ẑ_k/c) / σ
        for i in 0..c {
            for k in 0..c {
                let delta = if i == k { 1.0 } else { 0.0 };
                jac[i * c + k] = (delta - 1.0 / c as f64 - zhat[i] * zhat[k] / c as f64) / sigma;
            }
        }
        for k in 0..c {
            for l in 0..c {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += dl_dzhat[i] * jac[i * c + k] * x[l];
                }
                g_w[k * c + l] += acc;
            }
            g_b[k] += (0..c).map(|i| dl_dzhat[i] * jac[i * c + k]).sum::<f64>();
        }
    }
    Ok(SceneGradient {
        gamma: Tensor::new(vec![c], g_gamma)?,
        beta: Tensor::new(vec![c], g_beta)?,
        w: Tensor::new(vec![c, c], g_w)?,
        b: Tensor::new(vec![c], g_b)?,
    })
}

/// Queue of the last `N_h` volumes, already aligned to the latest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StackingState {
    pub n_h: usize,
    /// Most recent first.
    pub queue: VecDeque<VoxelGrid>,
    /// `c × (N_h + 1)·c`; block 0 acts on the current frame.
    pub fuse: Tensor,
}

impl StackingState {
    /// Uniform averaging over `N_h + 1` slots.
    pub fn averaging(n_h: usize, c: usize) -> Self {
        let slots = n_h + 1;
        let mut fuse = Tensor::zeros(&[c, slots * c]);
        for s in 0..slots {
            for i in 0..c {
                fuse.set2(i, s * c + i, 1.0 / slots as f64);
            }
        }
        Self {
            n_h,
            queue: VecDeque::with_capacity(n_h),
            fuse,
        }
    }

    /// Serialized bytes of the stored history.
    pub fn history_bytes(&self) -> usize {
        self.queue
            .iter()
            .map(|g| gdft::encoded_len(&[g.channels(), g.extents()[0], g.extents()[1], g.extents()[2]]))
            .sum()
    }
}

/// Warp every queued volume by `t`, fuse it with `v_now` through the
/// linear map (empty slots contribute zero), then push `v_now` and evict
/// beyond `N_h`.
pub fn stacking_update(state: &StackingState, v_now: &VoxelGrid, t: &RigidTransform) -> Result<(VoxelGrid, StackingState)> {
    let c = v_now.channels();
    if state.fuse.dims() != [c, (state.n_h + 1) * c] {
        return Err(shape_err("stacking_update", [c, (state.n_h + 1) * c], state.fuse.dims()));
    }
    let coords = transform_coords(t, &CoordField::canonical(v_now.extents()));
    let mut warped = VecDeque::with_capacity(state.n_h);
    for g in &state.queue {
        g.check_same(v_now, "stacking_update")?;
        warped.push_back(if t.is_identity() { g.clone() } else { trilinear_sample(g, &coords) });
    }
    let block = |s: usize| Tensor::from_fn(&[c, c], |idx| state.fuse.at2(idx / c, s * c + idx % c));
    let mut fused = v_now.mix_channels(&block(0))?;
    for (s, g) in warped.iter().enumerate() {
        fused = fused.add(&g.mix_channels(&block(s + 1))?)?;
    }
    warped.push_front(v_now.clone());
    warped.truncate(state.n_h);
    Ok((
        fused,
        StackingState {
            n_h: state.n_h,
            queue: warped,
            fuse: state.fuse.clone(),
        },
    ))
}
