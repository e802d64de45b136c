//! Randomized invariants across modules.

use gdfusion::config::PipelineConfig;
use gdfusion::experiment::ExperimentData;
use gdfusion::geometry::{gate, geometry_update, warp_geometry, CameraPose, CameraRays, DepthDistribution, GateParams};
use gdfusion::gradcheck::{motion_parity, random_scene_instance, scene_parity};
use gdfusion::metrics::{ClassTable, ConfusionMatrix};
use gdfusion::motion::{motion_update, MotionField};
use gdfusion::oracle::{stacking_update, StackingState};
use gdfusion::pipeline::{FusionModel, HiddenStateBundle};
use gdfusion::scene::{scene_gradient, scene_loss, scene_update};
use gdfusion::synthworld::{render_frame, SensorNoise, TopDownCamera, Trajectory, WorldSpec};
use gdfusion::tensor::{trilinear_sample, zscore_norm, CoordField, RigidTransform, Tensor, VoxelGrid};
use gdfusion::voxel::{voxel_update, FusionWeights, VoxelHidden};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid(c: usize, e: [usize; 3], r: &mut ChaCha8Rng) -> VoxelGrid {
    VoxelGrid::from_data(c, e, (0..c * e.iter().product::<usize>()).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn random_depth(rays: usize, centers: &[f64], r: &mut ChaCha8Rng) -> DepthDistribution {
    let k = centers.len();
    let mut probs = Tensor::from_fn(&[rays, k], |_| r.gen_range(0.0..1.0f64).powi(3));
    for row in probs.data_mut().chunks_mut(k) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    DepthDistribution::new(probs, centers.to_vec()).unwrap()
}

fn small_camera(seed: u64) -> (TopDownCamera, Vec<f64>) {
    let cfg = PipelineConfig {
        extents: [5, 4, 4],
        bins: 8,
        depth_min: 1.0,
        depth_max: 9.0,
        channels: 4,
        ..PipelineConfig::default()
    };
    let cam = TopDownCamera::from_config(&cfg, &ClassTable::default_four(), seed).unwrap();
    let centers = cam.bin_centers.clone();
    (cam, centers)
}

fn close_scaled(x: f64, y: f64, scale: f64) -> bool {
    (x - y).abs() <= 4.0 * f64::EPSILON * scale.max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lattice_sampling_is_exact(seed in any::<u64>(), x in 1usize..6, y in 1usize..6, z in 1usize..6) {
        let g = random_grid(2, [x, y, z], &mut rng(seed));
        let s = trilinear_sample(&g, &CoordField::canonical([x, y, z]));
        prop_assert!(s.max_abs_diff(&g) <= 1e-15);
    }

    #[test]
    fn sampling_is_affine_along_each_axis(seed in any::<u64>(), axis in 0usize..3, t0 in 0.0f64..0.3, d in 0.01f64..0.3) {
        let mut r = rng(seed);
        let g = random_grid(3, [4, 4, 4], &mut r);
        let mut p = [r.gen_range(0.0..2.0f64).floor(), r.gen_range(0.0..2.0f64).floor(), r.gen_range(0.0..2.0f64).floor()];
        for v in p.iter_mut() {
            *v += r.gen_range(0.0..1.0);
        }
        p[axis] = p[axis].floor() + t0;
        let mut coords = CoordField::canonical([3, 1, 1]);
        for i in 0..3 {
            let mut q = p;
            q[axis] += i as f64 * d;
            coords.set_point(i, q);
        }
        let s = trilinear_sample(&g, &coords);
        for ch in 0..3 {
            let second = s.get(ch, 2) - 2.0 * s.get(ch, 1) + s.get(ch, 0);
            prop_assert!(second.abs() < 1e-12, "second difference {}", second);
        }
    }

    #[test]
    fn zscore_columns_are_standardized(seed in any::<u64>(), c in 2usize..9, n in 1usize..20) {
        let mut r = rng(seed);
        let z = Tensor::from_fn(&[c, n], |_| r.gen_range(-3.0..3.0));
        let eps = 1e-6;
        let out = zscore_norm(&z, eps).unwrap();
        for j in 0..n {
            let col: Vec<f64> = (0..c).map(|i| out.zhat.at2(i, j)).collect();
            let raw: Vec<f64> = (0..c).map(|i| z.at2(i, j)).collect();
            let mean = col.iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-12);
            let rm = raw.iter().sum::<f64>() / c as f64;
            let rv = raw.iter().map(|x| (x - rm).powi(2)).sum::<f64>() / c as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!((var - rv / (rv + eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_equals_triple_loop(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut r = rng(seed);
        let a = Tensor::from_fn(&[m, k], |_| r.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[k, n], |_| r.gen_range(-1.0..1.0));
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.at2(i, l) * b.at2(l, j);
                }
                prop_assert_eq!(c.at2(i, j), s);
            }
        }
    }

    #[test]
    fn scene_gradient_parity(seed in any::<u64>()) {
        let r = scene_parity(seed, 1, 6, 24, false).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn scene_step_descends(seed in any::<u64>()) {
        let (v, params, aug) = random_scene_instance(3, 10, &mut rng(seed));
        let (g, inter) = scene_gradient(&v, &params, &aug).unwrap();
        let delta2 = inter.delta1.hadamard(&Tensor::from_fn(inter.delta1.dims(), |idx| 2.0 * params.gamma.data()[idx / 10])).unwrap();
        prop_assert_eq!(&inter.delta2, &delta2);
        let before = scene_loss(&v, &params, &aug).unwrap();
        let grad_norm: f64 = g.tensors().iter().map(|t| t.sum_sq()).sum();
        prop_assume!(grad_norm > 1e-20);
        let mut eta = 1e-4;
        let mut decreased = false;
        for _ in 0..=5 {
            if scene_loss(&v, &scene_update(&params, &g, eta).unwrap(), &aug).unwrap() < before {
                decreased = true;
                break;
            }
            eta /= 2.0;
        }
        prop_assert!(decreased);
    }

    #[test]
    fn scene_update_is_affine_in_step(seed in any::<u64>(), eta in 0.0f64..1.0) {
        let (v, params, aug) = random_scene_instance(4, 8, &mut rng(seed));
        let (g, _) = scene_gradient(&v, &params, &aug).unwrap();
        let one = scene_update(&params, &g, eta).unwrap();
        let two = scene_update(&params, &g, 2.0 * eta).unwrap();
        for ((h, a), b) in params.tensors().iter().zip(one.tensors()).zip(two.tensors()) {
            for ((h, a), b) in h.data().iter().zip(a.data()).zip(b.data()) {
                prop_assert!(close_scaled(b - h, 2.0 * (a - h), h.abs().max(b.abs())));
            }
        }
    }

    #[test]
    fn motion_gradient_parity(seed in any::<u64>()) {
        let r = motion_parity(seed, 1).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn motion_update_is_affine_in_step(seed in any::<u64>(), eta in 0.0f64..1.0) {
        let mut r = rng(seed);
        let m = MotionField::from_grid(random_grid(3, [3, 3, 2], &mut r)).unwrap();
        let g = MotionField::from_grid(random_grid(3, [3, 3, 2], &mut r)).unwrap();
        let one = motion_update(&m, &g, eta).unwrap();
        let two = motion_update(&m, &g, 2.0 * eta).unwrap();
        for ((h, a), b) in m.grid().data().iter().zip(one.grid().data()).zip(two.grid().data()) {
            prop_assert!(close_scaled(b - h, 2.0 * (a - h), h.abs().max(b.abs())));
        }
    }

    #[test]
    fn geometry_update_stays_on_simplex(seed in any::<u64>(), yaw in -0.3f64..0.3, tx in -2.0f64..2.0, tz in -1.0f64..1.0) {
        let mut r = rng(seed);
        let (cam, centers) = small_camera(seed);
        let rays = cam.rays.len();
        let h = random_depth(rays, &centers, &mut r);
        let g = random_depth(rays, &centers, &mut r);
        let params = GateParams {
            weight: (0..2 * centers.len()).map(|_| r.gen_range(-3.0..3.0)).collect(),
            bias: r.gen_range(-3.0..3.0),
        };
        let pose = CameraPose { transform: cam.camera_delta(&RigidTransform::from_yaw(yaw, [tx, 0.5, tz])), rays: cam.rays.clone() };
        let warped = warp_geometry(&h, &pose).unwrap();
        let gates = gate(&warped, &g, &params).unwrap();
        prop_assert!(gates.iter().all(|&x| x > 0.0 && x < 1.0));
        let out = geometry_update(&warped, &g, &gates).unwrap();
        let (sum_err, min) = out.simplex_error();
        prop_assert!(sum_err <= 1e-12 && min >= 0.0);
        let agree = geometry_update(&g, &g, &gates).unwrap();
        prop_assert_eq!(agree.probs(), g.probs());
    }

    #[test]
    fn identity_pose_warp_is_identity(seed in any::<u64>()) {
        let (cam, centers) = small_camera(seed);
        let h = random_depth(cam.rays.len(), &centers, &mut rng(seed));
        let pose = CameraPose { transform: RigidTransform::identity(), rays: cam.rays.clone() };
        let w = warp_geometry(&h, &pose).unwrap();
        prop_assert!(w.probs().max_abs_diff(h.probs()) <= 1e-12);
    }

    #[test]
    fn voxel_state_size_is_constant(seed in any::<u64>(), frames in 1usize..12) {
        let mut r = rng(seed);
        let w = FusionWeights::ema(2, r.gen_range(0.0..1.0)).unwrap();
        let zero = MotionField::zeros([3, 3, 2]);
        let mut h = VoxelHidden::new(random_grid(2, [3, 3, 2], &mut r));
        let size = h.byte_len();
        for _ in 0..frames {
            let t = RigidTransform::from_yaw(r.gen_range(-0.5..0.5), [r.gen_range(-1.0..1.0), 0.0, 0.0]);
            h = voxel_update(&h, &random_grid(2, [3, 3, 2], &mut r), &zero, &t, &w).unwrap();
            prop_assert_eq!(h.byte_len(), size);
        }
    }

    #[test]
    fn ema_converges_within_bound(seed in any::<u64>(), alpha in 0.0f64..1.0, frames in 2usize..15) {
        let mut r = rng(seed);
        let v = random_grid(2, [3, 3, 2], &mut r);
        let h1 = VoxelHidden::new(random_grid(2, [3, 3, 2], &mut r));
        let w = FusionWeights::ema(2, alpha).unwrap();
        let zero = MotionField::zeros([3, 3, 2]);
        let start = h1.state.max_abs_diff(&v);
        let mut h = h1;
        for t in 2..=frames {
            h = voxel_update(&h, &v, &zero, &RigidTransform::identity(), &w).unwrap();
            prop_assert!(h.state.max_abs_diff(&v) <= alpha.powi(t as i32 - 1) * start + 1e-12);
        }
    }

    #[test]
    fn trajectory_deltas_compose_to_direct_delta(vx in -1.0f64..1.0, vy in -1.0f64..1.0, yaw in -0.2f64..0.2, t in 2usize..15) {
        let traj = Trajectory::centered([16, 16, 8], [vx, vy, 0.0], yaw);
        let mut acc = RigidTransform::identity();
        for s in 2..=t {
            acc = acc.compose(&traj.delta(s));
        }
        let direct = traj.pose(1).inverse().compose(&traj.pose(t));
        prop_assert!(acc.max_abs_diff(&direct) <= 1e-9);
    }

    #[test]
    fn confusion_totals_and_iou_range(seed in any::<u64>(), n in 1usize..200) {
        let mut r = rng(seed);
        let table = ClassTable::default_four();
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
        let gt: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
        let m = ConfusionMatrix::from_labels(&pred, &gt, 4).unwrap();
        prop_assert_eq!(m.total(), n as u64);
        for v in [m.miou(&table), m.miou_dynamic(&table), m.iou_binary(table.empty)].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for c in 0..4 {
            if let Some(v) = m.iou(c) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn stacking_history_grows_linearly(seed in any::<u64>(), n_h in 0usize..5, frames in 1usize..9) {
        let mut r = rng(seed);
        let mut s = StackingState::averaging(n_h, 2);
        let frame_bytes = gdfusion::gdft::encoded_len(&[2, 3, 3, 2]);
        for t in 1..=frames {
            prop_assert_eq!(s.history_bytes(), (t - 1).min(n_h) * frame_bytes);
            s = stacking_update(&s, &random_grid(2, [3, 3, 2], &mut r), &RigidTransform::identity()).unwrap().1;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rendering_is_deterministic(seed in any::<u64>(), t in 1usize..6) {
        let world = WorldSpec::generate([8, 8, 4], seed).unwrap();
        let (cam, _) = small_camera(seed);
        let cam = TopDownCamera::new([8, 8, 4], cam.bin_centers, cam.embeddings).unwrap();
        let noise = SensorNoise { sigma_depth: 1.0, sigma_feat: 0.5, tau: 0.5, seed };
        let traj = Trajectory::centered([8, 8, 4], [0.2, 0.0, 0.0], 0.05);
        let a = render_frame(&world, &traj, &cam, &noise, t, 0.5).unwrap();
        let b = render_frame(&world, &traj, &cam, &noise, t, 0.5).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn streaming_is_deterministic_and_resumable(seed in any::<u64>(), k in 1usize..5, run in prop::sample::select(vec!["B", "BV", "BVS", "BVMG", "Full"])) {
        let cfg = PipelineConfig {
            extents: [8, 8, 4],
            channels: 4,
            frames: 5,
            seed,
            ego_velocity: [0.2, 0.1, 0.0],
            ego_yaw_rate: 0.03,
            ..PipelineConfig::default()
        }
        .with_run(run)
        .unwrap();
        let data = ExperimentData::new(&cfg).unwrap();
        let model = FusionModel::new(&cfg).unwrap();
        let (p1, s1) = model.run_sequence(&data.noisy, None).unwrap();
        let (p2, s2) = model.run_sequence(&data.noisy, None).unwrap();
        prop_assert_eq!(&p1, &p2);
        prop_assert_eq!(&s1, &s2);
        let (head, mid) = model.run_sequence(&data.noisy[..k], None).unwrap();
        let mid = HiddenStateBundle::from_bytes(&mid.to_bytes()).unwrap();
        prop_assert_eq!(mid.byte_len(), s1.byte_len());
        let (tail, s3) = model.run_sequence(&data.noisy[k..], Some(mid)).unwrap();
        let joined: Vec<_> = head.into_iter().chain(tail).collect();
        prop_assert_eq!(joined, p1);
        prop_assert_eq!(s3, s1);
    }
}

#[test]
fn parallel_rays_recover_their_origin() {
    let rays = CameraRays::parallel(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(rays.nearest([1.1, 0.0, 4.0]).0, 1);
}
