//! Parity sweeps of the closed-form kernels against the oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::motion::{motion_gradient, motion_loss, motion_coords, MotionField};
use crate::oracle::finite_diff_grad;
use crate::scene::{scene_gradient, scene_loss, AugmentWeights, SceneParams};
use crate::tensor::{sample_point, trilinear_jacobian, trilinear_sample, CoordField, RigidTransform, Tensor, VoxelGrid};
use crate::voxel::{gd_step_check, GDStepWeights};

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Largest relative error among entries whose magnitude exceeds the
    /// absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    pub passed: bool,
}

/// Entry-wise comparison: an entry passes when it is within `abs_tol`
/// absolutely or `rel_tol` relative to the larger magnitude.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    rel: f64,
    abs: f64,
    entries: usize,
    failed: bool,
}

impl Tally {
    fn compare(&mut self, analytic: &[f64], reference: &[f64], tol: Tolerance) {
        for (&a, &b) in analytic.iter().zip(reference) {
            let abs = (a - b).abs();
            let rel = if abs == 0.0 { 0.0 } else { abs / a.abs().max(b.abs()) };
            self.abs = self.abs.max(abs);
            if a.abs().max(b.abs()) > tol.abs {
                self.rel = self.rel.max(rel);
            }
            if !abs.is_finite() || (abs > tol.abs && rel > tol.rel) {
                self.failed = true;
            }
            self.entries += 1;
        }
    }

    fn finish(self, name: &str) -> CheckResult {
        CheckResult {
            name: name.into(),
            max_rel_err: self.rel,
            max_abs_err: self.abs,
            entries: self.entries,
            passed: !self.failed && self.entries > 0,
        }
    }
}

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// A random scene instance with modest magnitudes.
pub fn random_scene_instance(c: usize, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, SceneParams, AugmentWeights) {
    let v = uniform(&[c, n], -1.0, 1.0, rng);
    let params = SceneParams {
        gamma: uniform(&[c], 0.5, 1.5, rng),
        beta: uniform(&[c], -0.5, 0.5, rng),
        w: uniform(&[c, c], -1.0, 1.0, rng),
        b: uniform(&[c], -0.5, 0.5, rng),
    };
    (v, params, AugmentWeights::random(c, rng))
}

/// Closed-form scene gradient against central differences of the loss.
/// `flip_beta_sign` corrupts `∇β` to exercise the detector.
pub fn scene_parity(seed: u64, instances: usize, max_c: usize, max_n: usize, flip_beta_sign: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = Tolerance { rel: 1e-5, abs: 1e-8 };
    let mut tally = Tally::default();
    for _ in 0..instances {
        let c = rng.gen_range(1..=max_c);
        let n = rng.gen_range(1..=max_n);
        let (v, params, aug) = random_scene_instance(c, n, &mut rng);
        let (mut grad, _) = scene_gradient(&v, &params, &aug)?;
        if flip_beta_sign {
            grad.beta = grad.beta.scale(-1.0);
        }
        for block in 0..4 {
            let at = params.tensors()[block].clone();
            let fd = finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    *p.tensors_mut()[block] = t.clone();
                    scene_loss(&v, &p, &aug)
                },
                &at,
                FD_STEP,
            )?;
            tally.compare(grad.tensors()[block].data(), fd.data(), tol);
        }
    }
    Ok(tally.finish("scene_gradient"))
}

fn off_lattice(p: [f64; 3], margin: f64) -> bool {
    p.iter().all(|x| {
        let f = x - x.floor();
        f > margin && f < 1.0 - margin
    })
}

/// Random motion instance whose sampling points all sit at least `1e-3`
/// away from lattice planes.
pub fn random_motion_instance(extents: [usize; 3], rng: &mut ChaCha8Rng) -> Result<(MotionField, MotionField, RigidTransform)> {
    let n: usize = extents.iter().product();
    let h_prev = MotionField::from_grid(VoxelGrid::from_data(3, extents, (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())?)?;
    let t = RigidTransform::from_yaw(rng.gen_range(-0.3..0.3), [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3)]);
    let mut m = MotionField::zeros(extents);
    for v in 0..n {
        loop {
            let off = [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)];
            for (axis, &o) in off.iter().enumerate() {
                m.grid_mut().set(axis, v, o);
            }
            let coords = motion_coords(&m, &t)?;
            if off_lattice(coords.point(v), 1e-3) {
                break;
            }
        }
    }
    Ok((h_prev, m, t))
}

/// `∇_M L_m` against central differences at off-lattice configurations.
pub fn motion_parity(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = Tolerance { rel: 1e-4, abs: 1e-8 };
    let mut tally = Tally::default();
    for _ in 0..instances {
        let extents = [rng.gen_range(2..=5), rng.gen_range(2..=5), rng.gen_range(2..=4)];
        let (h_prev, m, t) = random_motion_instance(extents, &mut rng)?;
        let grad = motion_gradient(&h_prev, &m, &t)?;
        let fd = finite_diff_grad(
            |x| motion_loss(&h_prev, &MotionField::from_tensor(x.clone())?, &t),
            &m.to_tensor(),
            FD_STEP,
        )?;
        tally.compare(grad.to_tensor().data(), fd.data(), tol);
    }
    Ok(tally.finish("motion_gradient"))
}

/// Analytic sampling Jacobian against central differences at off-lattice
/// probes on grids of at most `6 × 6 × 6`.
pub fn trilinear_parity(seed: u64, probes: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = Tolerance { rel: 1e-5, abs: 1e-8 };
    let mut tally = Tally::default();
    let extents = [rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(2..=6)];
    let grid = VoxelGrid::from_data(3, extents, (0..3 * extents.iter().product::<usize>()).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
    let mut coords = CoordField::canonical([probes, 1, 1]);
    for v in 0..probes {
        let p = loop {
            let p = [0, 1, 2].map(|a| rng.gen_range(-0.9..extents[a] as f64 - 0.1));
            if off_lattice(p, 1e-3) {
                break p;
            }
        };
        coords.set_point(v, p);
    }
    let jac = trilinear_jacobian(&grid, &coords);
    for v in 0..probes {
        let p = coords.point(v);
        let analytic: Vec<f64> = jac.at(v).iter().flatten().copied().collect();
        let mut reference = vec![0.0; 9];
        // each sampled channel differentiated along each axis
        for ch in 0..3 {
            let d = finite_diff_grad(|x| Ok(out_component(&grid, [x.data()[0], x.data()[1], x.data()[2]], ch)), &Tensor::column(&p), FD_STEP)?;
            reference[ch * 3..ch * 3 + 3].copy_from_slice(d.data());
        }
        tally.compare(&analytic, &reference, tol);
    }
    // sampling at the lattice itself reproduces the grid
    let exact = trilinear_sample(&grid, &CoordField::canonical(extents));
    let lattice_err = exact.max_abs_diff(&grid);
    let mut r = tally.finish("trilinear_jacobian");
    if lattice_err > 1e-15 {
        r.passed = false;
    }
    r.max_abs_err = r.max_abs_err.max(lattice_err);
    Ok(r)
}

fn out_component(grid: &VoxelGrid, p: [f64; 3], ch: usize) -> f64 {
    let mut out = vec![0.0; grid.channels()];
    sample_point(grid, p, &mut out);
    out[ch]
}

/// Largest gap between the recurrent and descent forms over random instances.
pub fn equivalence_sweep(seed: u64, instances: usize, max_c: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = rng.gen_range(1..=max_c);
        let g = GDStepWeights {
            a: uniform(&[c, c], -1.0, 1.0, &mut rng),
            b: uniform(&[c, c], -1.0, 1.0, &mut rng),
            eta: rng.gen_range(0.0..1.0),
        };
        let h: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst = worst.max(gd_step_check(&g, &h, &x)?);
    }
    Ok(CheckResult {
        name: "recurrence_equivalence".into(),
        max_rel_err: 0.0,
        max_abs_err: worst,
        entries: instances,
        passed: worst <= 1e-11,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub flip_beta_sign: bool,
}

/// Every parity check with its default sweep size.
pub fn run_gradcheck(opts: GradcheckOptions) -> Result<Vec<CheckResult>> {
    let s = opts.seed;
    let mut degenerate = scene_parity(s ^ 0xC1, 3, 1, 16, opts.flip_beta_sign)?;
    degenerate.name = format!("{}_c1", degenerate.name);
    Ok(vec![
        scene_parity(s, 20, 8, 64, opts.flip_beta_sign)?,
        degenerate,
        motion_parity(s.wrapping_add(1), 20)?,
        trilinear_parity(s.wrapping_add(2), 200)?,
        equivalence_sweep(s.wrapping_add(3), 1000, 8)?,
    ])
}
