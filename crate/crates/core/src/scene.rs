//! Scene-level temporal fusion.
//!
//! Scene information lives in the parameters `S = {γ, β, W, b}` of a
//! residual normalized-affine map
//!
//! ```text
//! f_s(X; S) = γ ⊙ Ẑ + β + X,   Ẑ = Norm(W·X + b·1ᵀ)
//! ```
//!
//! and is carried across frames by descending the self-supervised loss
//! `L_s = ‖f_s(Q1·V) − Q2·V‖²_F` once per frame. The loss is the
//! unnormalized squared norm; any `1/(n·c)` scale is left to the step size.
//!
//! The backward pass uses the closed-form chain
//!
//! ```text
//! Δ1 = f_s(Q1·V) − Q2·V          ∇γ = 2(Δ1 ⊙ Ẑ)·1_n    ∇β = 2Δ1·1_n
//! Δ2 = 2γ ⊙ Δ1
//! Δ3 = (Δ2 − (1/c)·1_c1_cᵀΔ2 − (1/c)·Ẑ ⊙ 1_c1_cᵀ(Ẑ ⊙ Δ2)) ⊘ (1_c·σ)
//! ∇W = Δ3·(Q1·V)ᵀ                ∇b = Δ3·1_n
//! ```
//!
//! where the normalization statistics run over the `c` channels of each
//! column, so the projection terms carry `1/c`.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{compensated_sum, zscore_norm, Normalized, Tensor, NORM_EPS};

/// Scene-adaptive parameters `{γ, β, W, b}`; also the hidden state `H_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

/// Gradient of `L_s` with the same block layout as [`SceneParams`].
pub type SceneGradient = SceneParams;

pub const SCENE_TENSOR_NAMES: [&str; 4] = ["gamma", "beta", "w", "b"];

impl SceneParams {
    /// Identity start: `γ = 1`, `β = 0`, `W = I`, `b = 0`.
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            w: Tensor::eye(c),
            b: Tensor::zeros(&[c]),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            gamma: Tensor::zeros(&[c]),
            beta: Tensor::zeros(&[c]),
            w: Tensor::zeros(&[c, c]),
            b: Tensor::zeros(&[c]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<usize> {
        let c = self.gamma.len();
        let ok = self.gamma.dims() == [c]
            && self.beta.dims() == [c]
            && self.b.dims() == [c]
            && self.w.dims() == [c, c];
        if !ok {
            return Err(shape_err(
                "SceneParams",
                format!("gamma/beta/b [{c}], w [{c}, {c}]"),
                (self.gamma.dims(), self.beta.dims(), self.w.dims(), self.b.dims()),
            ));
        }
        Ok(c)
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.gamma, &self.beta, &self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.gamma, &mut self.beta, &mut self.w, &mut self.b]
    }

    pub fn from_tensors(mut ts: Vec<Tensor>) -> Result<Self> {
        if ts.len() != 4 {
            return Err(shape_err("SceneParams::from_tensors", 4, ts.len()));
        }
        let b = ts.pop().unwrap();
        let w = ts.pop().unwrap();
        let beta = ts.pop().unwrap();
        let gamma = ts.pop().unwrap();
        let p = Self { gamma, beta, w, b };
        p.validate()?;
        Ok(p)
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Augmentation and output-projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentWeights {
    pub q1: Tensor,
    pub q2: Tensor,
    pub qo: Tensor,
}

impl AugmentWeights {
    /// Entries drawn from `uniform(−a, a)` with `a = 1/√c`.
    pub fn random<R: Rng>(c: usize, rng: &mut R) -> Self {
        let a = 1.0 / (c as f64).sqrt();
        let mut draw = || Tensor::from_fn(&[c, c], |_| rng.gen_range(-a..a));
        Self {
            q1: draw(),
            q2: draw(),
            qo: draw(),
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            q1: Tensor::eye(c),
            q2: Tensor::eye(c),
            qo: Tensor::eye(c),
        }
    }
}

/// Everything the backward pass produces along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneIntermediates {
    pub delta1: Tensor,
    pub delta2: Tensor,
    pub delta3: Tensor,
    pub zhat: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

fn check_input(x: &Tensor, c: usize, op: &'static str) -> Result<usize> {
    let (rows, n) = x.shape2()?;
    if rows != c {
        return Err(shape_err(op, format!("[{c}, n]"), x.dims()));
    }
    Ok(n)
}

/// `y = γ ⊙ Norm(W·x + b·1ᵀ) + β + x`, returning the normalization pieces.
pub fn scene_forward(x: &Tensor, params: &SceneParams) -> Result<(Tensor, Normalized)> {
    let c = params.validate()?;
    let n = check_input(x, c, "scene_forward")?;
    let mut z = params.w.matmul(x)?;
    {
        let b = params.b.data();
        let zd = z.data_mut();
        for i in 0..c {
            for v in &mut zd[i * n..(i + 1) * n] {
                *v += b[i];
            }
        }
    }
    let norm = zscore_norm(&z, NORM_EPS)?;
    let (g, be) = (params.gamma.data(), params.beta.data());
    let mut y = x.clone();
    {
        let zh = norm.zhat.data();
        let yd = y.data_mut();
        for i in 0..c {
            for j in 0..n {
                let idx = i * n + j;
                yd[idx] = g[i] * zh[idx] + be[i] + yd[idx];
            }
        }
    }
    Ok((y, norm))
}

fn residual(v: &Tensor, params: &SceneParams, aug: &AugmentWeights) -> Result<(Tensor, Tensor, Normalized)> {
    let c = params.validate()?;
    check_input(v, c, "scene_loss")?;
    let x = aug.q1.matmul(v)?;
    let (y, norm) = scene_forward(&x, params)?;
    let target = aug.q2.matmul(v)?;
    Ok((y.sub(&target)?, x, norm))
}

/// `‖f_s(Q1·v) − Q2·v‖²_F`.
pub fn scene_loss(v: &Tensor, params: &SceneParams, aug: &AugmentWeights) -> Result<f64> {
    Ok(residual(v, params, aug)?.0.sum_sq())
}

/// Closed-form gradient of [`scene_loss`] with respect to all four blocks.
pub fn scene_gradient(
    v: &Tensor,
    params: &SceneParams,
    aug: &AugmentWeights,
) -> Result<(SceneGradient, SceneIntermediates)> {
    let (delta1, x, norm) = residual(v, params, aug)?;
    let (c, n) = delta1.shape2()?;
    let gamma = params.gamma.data();
    let d1 = delta1.data();
    let zh = norm.zhat.data();
    let sigma = norm.sigma.data();

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for i in 0..c {
        let row = i * n..(i + 1) * n;
        d_gamma[i] = 2.0 * compensated_sum(d1[row.clone()].iter().zip(&zh[row.clone()]).map(|(a, b)| a * b));
        d_beta[i] = 2.0 * compensated_sum(d1[row].iter().copied());
    }

    let mut delta2 = vec![0.0; c * n];
    for i in 0..c {
        for j in 0..n {
            delta2[i * n + j] = 2.0 * gamma[i] * d1[i * n + j];
        }
    }

    // Column-wise projection through the normalization Jacobian.
    let inv_c = 1.0 / c as f64;
    let mut delta3 = vec![0.0; c * n];
    for j in 0..n {
        let mut s_d2 = 0.0;
        let mut s_zd2 = 0.0;
        for i in 0..c {
            let idx = i * n + j;
            s_d2 += delta2[idx];
            s_zd2 += zh[idx] * delta2[idx];
        }
        for i in 0..c {
            let idx = i * n + j;
            delta3[idx] = (delta2[idx] - inv_c * s_d2 - inv_c * zh[idx] * s_zd2) / sigma[j];
        }
    }
    let delta3 = Tensor::new(vec![c, n], delta3)?;
    let d_w = delta3.matmul_transposed(&x)?;
    let d_b: Vec<f64> = (0..c)
        .map(|i| compensated_sum(delta3.data()[i * n..(i + 1) * n].iter().copied()))
        .collect();

    let grad = SceneGradient {
        gamma: Tensor::new(vec![c], d_gamma)?,
        beta: Tensor::new(vec![c], d_beta)?,
        w: d_w,
        b: Tensor::new(vec![c], d_b)?,
    };
    let inter = SceneIntermediates {
        delta1,
        delta2: Tensor::new(vec![c, n], delta2)?,
        delta3,
        zhat: norm.zhat,
        mu: norm.mu,
        sigma: norm.sigma,
    };
    Ok((grad, inter))
}

/// `H_s = H_s_prev − η_s·∇`, block by block.
pub fn scene_update(h_prev: &SceneParams, grad: &SceneGradient, eta_s: f64) -> Result<SceneParams> {
    if eta_s < 0.0 {
        return Err(crate::Error::Argument(format!("eta_s must be non-negative, got {eta_s}")));
    }
    h_prev.validate()?;
    grad.validate()?;
    Ok(SceneParams {
        gamma: h_prev.gamma.axpy_neg(eta_s, &grad.gamma)?,
        beta: h_prev.beta.axpy_neg(eta_s, &grad.beta)?,
        w: h_prev.w.axpy_neg(eta_s, &grad.w)?,
        b: h_prev.b.axpy_neg(eta_s, &grad.b)?,
    })
}

/// `V̂ = f_s(Qo·V_f; S_f)`.
pub fn scene_apply(v_fused: &Tensor, s_fused: &SceneParams, aug: &AugmentWeights) -> Result<Tensor> {
    let projected = aug.qo.matmul(v_fused)?;
    Ok(scene_forward(&projected, s_fused)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    fn random_params(c: usize, rng: &mut ChaCha8Rng) -> SceneParams {
        SceneParams {
            gamma: random(&[c], rng),
            beta: random(&[c], rng),
            w: random(&[c, c], rng),
            b: random(&[c], rng),
        }
    }

    fn identity_acting(c: usize) -> SceneParams {
        SceneParams {
            gamma: Tensor::zeros(&[c]),
            ..SceneParams::identity(c)
        }
    }

    #[test]
    fn zeroed_affine_is_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 6], &mut rng);
        let (y, _) = scene_forward(&x, &identity_acting(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn unit_gamma_adds_normalized_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[5, 9], &mut rng);
        let (y, norm) = scene_forward(&x, &SceneParams::identity(5)).unwrap();
        let diff = y.sub(&x).unwrap();
        assert!(diff.max_abs_diff(&norm.zhat) < 1e-15);
        for j in 0..9 {
            let mean: f64 = (0..5).map(|i| diff.at2(i, j)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn two_channel_example() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let (y, _) = scene_forward(&x, &SceneParams::identity(2)).unwrap();
        // ẑ = (−1, 1) up to the 1e-6 variance regularizer
        assert!((y.data()[0] - 0.0).abs() < 1e-6);
        assert!((y.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn loss_zero_at_identity_and_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random(&[3, 5], &mut rng);
        let q = random(&[3, 3], &mut rng);
        let aug = AugmentWeights {
            q1: q.clone(),
            q2: q.clone(),
            qo: Tensor::eye(3),
        };
        assert_eq!(scene_loss(&v, &identity_acting(3), &aug).unwrap(), 0.0);

        let params = random_params(3, &mut rng);
        let aug = AugmentWeights::random(3, &mut rng);
        let loss = scene_loss(&v, &params, &aug).unwrap();
        let x = aug.q1.matmul(&v).unwrap();
        let (y, _) = scene_forward(&x, &params).unwrap();
        let t = aug.q2.matmul(&v).unwrap();
        let direct: f64 = y.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(loss >= 0.0);
        assert!((loss - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random(&[4, 6], &mut rng);
        let aug = AugmentWeights {
            q1: Tensor::eye(4),
            q2: Tensor::eye(4),
            qo: Tensor::eye(4),
        };
        let (g, inter) = scene_gradient(&v, &identity_acting(4), &aug).unwrap();
        assert!(inter.delta1.data().iter().all(|&d| d == 0.0));
        assert!(g.is_zero());
    }

    #[test]
    fn zero_gamma_kills_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random(&[4, 6], &mut rng);
        let mut params = random_params(4, &mut rng);
        params.gamma = Tensor::zeros(&[4]);
        let aug = AugmentWeights::random(4, &mut rng);
        let (g, _) = scene_gradient(&v, &params, &aug).unwrap();
        assert!(g.w.data().iter().all(|&x| x == 0.0));
        assert!(g.b.data().iter().all(|&x| x == 0.0));
        assert!(g.gamma.max_abs() > 0.0);
    }

    #[test]
    fn delta2_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random(&[5, 7], &mut rng);
        let params = random_params(5, &mut rng);
        let aug = AugmentWeights::random(5, &mut rng);
        let (_, inter) = scene_gradient(&v, &params, &aug).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let expect = 2.0 * params.gamma.data()[i] * inter.delta1.at2(i, j);
                assert_eq!(inter.delta2.at2(i, j).to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn update_edge_cases_and_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_params(3, &mut rng);
        let g = random_params(3, &mut rng);
        assert_eq!(scene_update(&h, &g, 0.0).unwrap(), h);
        assert_eq!(scene_update(&h, &SceneParams::zeros(3), 0.3).unwrap(), h);
        assert!(scene_update(&h, &g, -1.0).is_err());
        // doubling identity, up to the rounding of `h − η·g`
        let one = scene_update(&h, &g, 0.3).unwrap();
        let two = scene_update(&h, &g, 0.6).unwrap();
        for ((h, a), b) in h.tensors().iter().zip(one.tensors()).zip(two.tensors()) {
            for ((h, a), b) in h.data().iter().zip(a.data()).zip(b.data()) {
                assert!(((b - h) - 2.0 * (a - h)).abs() <= 4.0 * f64::EPSILON);
            }
        }
    }

    #[test]
    fn small_steps_descend() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random(&[4, 10], &mut rng);
        let aug = AugmentWeights::random(4, &mut rng);
        let mut h = random_params(4, &mut rng);
        let mut last = scene_loss(&v, &h, &aug).unwrap();
        for _ in 0..2 {
            let (g, _) = scene_gradient(&v, &h, &aug).unwrap();
            h = scene_update(&h, &g, 1e-4).unwrap();
            let now = scene_loss(&v, &h, &aug).unwrap();
            assert!(now <= last);
            last = now;
        }
    }

    #[test]
    fn apply_composes_projection_and_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random(&[4, 8], &mut rng);
        assert_eq!(scene_apply(&v, &identity_acting(4), &AugmentWeights::identity(4)).unwrap(), v);
        let params = random_params(4, &mut rng);
        let aug = AugmentWeights::random(4, &mut rng);
        let out = scene_apply(&v, &params, &aug).unwrap();
        assert_eq!(out.dims(), v.dims());
        let expect = scene_forward(&aug.qo.matmul(&v).unwrap(), &params).unwrap().0;
        assert_eq!(out, expect);
    }

    #[test]
    fn shape_errors() {
        let v = Tensor::zeros(&[3, 4]);
        let p = SceneParams::identity(4);
        assert!(scene_forward(&v, &p).is_err());
        assert!(scene_loss(&v, &p, &AugmentWeights::identity(4)).is_err());
        let mut bad = SceneParams::identity(3);
        bad.w = Tensor::zeros(&[3, 2]);
        assert!(bad.validate().is_err());
    }
}
