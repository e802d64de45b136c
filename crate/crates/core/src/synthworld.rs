//! Seeded box worlds, an ego trajectory and a toy top-down depth camera.
//!
//! World coordinates coincide with the ego grid at frame 1; voxel `i`
//! has its center at coordinate `i` and spans `[i − ½, i + ½)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{uniform_bin_centers, CameraRays, DepthDistribution};
use crate::metrics::ClassTable;
use crate::pipeline::{FrameInput, ViewInput};
use crate::tensor::{RigidTransform, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct StaticBox {
    pub min: [i64; 3],
    pub extent: [usize; 3],
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicBox {
    pub min: [i64; 3],
    pub extent: [usize; 3],
    pub class: usize,
    /// Voxels per frame.
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub extents: [usize; 3],
    pub classes: ClassTable,
    pub statics: Vec<StaticBox>,
    pub dynamics: Vec<DynamicBox>,
}

/// Per-voxel class labels in grid order.
pub type Labels = Vec<usize>;

fn box_cells(min: [f64; 3], extent: [usize; 3], extents: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    // cell i is covered when its center lies in [min − ½, min + extent − ½)
    let range = move |a: usize| {
        let lo = (min[a] - 0.5).ceil().max(0.0) as i64;
        let hi = (min[a] + extent[a] as f64 - 0.5).ceil().min(extents[a] as f64) as i64;
        (lo.max(0) as usize)..(hi.max(lo) as usize)
    };
    let (rx, ry, rz) = (range(0), range(1), range(2));
    rx.flat_map(move |i| {
        let rz = rz.clone();
        ry.clone().flat_map(move |j| rz.clone().map(move |k| [i, j, k]))
    })
}

impl WorldSpec {
    pub fn new(extents: [usize; 3], classes: ClassTable, statics: Vec<StaticBox>, dynamics: Vec<DynamicBox>) -> Result<Self> {
        let w = Self {
            extents,
            classes,
            statics,
            dynamics,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e == 0) {
            return Err(Error::Argument(format!("world extents must be positive: {:?}", self.extents)));
        }
        let boxes = self
            .statics
            .iter()
            .map(|b| (b.min, b.extent, b.class))
            .chain(self.dynamics.iter().map(|b| (b.min, b.extent, b.class)));
        for (n, (min, extent, class)) in boxes.enumerate() {
            if class >= self.classes.len() || class == self.classes.empty {
                return Err(Error::Argument(format!("box {n} has invalid class {class}")));
            }
            for a in 0..3 {
                if extent[a] == 0 || min[a] < 0 || min[a] as usize + extent[a] > self.extents[a] {
                    return Err(Error::Argument(format!("box {n} does not fit inside the grid")));
                }
            }
        }
        for d in &self.dynamics {
            if !self.classes.dynamic[d.class] {
                return Err(Error::Argument(format!("moving box uses static class {}", self.classes.names[d.class])));
            }
        }
        Ok(())
    }

    pub fn empty(extents: [usize; 3]) -> Self {
        Self {
            extents,
            classes: ClassTable::default_four(),
            statics: vec![],
            dynamics: vec![],
        }
    }

    /// Ground slab, three buildings and two slow vehicles placed from `seed`.
    pub fn generate(extents: [usize; 3], seed: u64) -> Result<Self> {
        let [x, y, z] = extents;
        if x < 8 || y < 8 || z < 4 {
            return Err(Error::Argument(format!("generated worlds need at least 8×8×4 voxels, got {extents:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_3D);
        let classes = ClassTable::default_four();
        let mut statics = vec![StaticBox {
            min: [0, 0, 0],
            extent: [x, y, 1],
            class: 1,
        }];
        for _ in 0..3 {
            let e = [rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=(z - 3).max(2))];
            statics.push(StaticBox {
                min: [rng.gen_range(0..=x - e[0]) as i64, rng.gen_range(0..=y - e[1]) as i64, 1],
                extent: e,
                class: 2,
            });
        }
        let mut dynamics = vec![];
        for n in 0..2 {
            let e = [2, 2, 2];
            let min = [rng.gen_range(1..=x - 3) as i64, rng.gen_range(1..=y - 3) as i64, 1];
            let axis = n % 2;
            let towards_center = if (min[axis] as f64) < extents[axis] as f64 / 2.0 - 1.0 { 1.0 } else { -1.0 };
            let mut velocity = [0.0; 3];
            velocity[axis] = 0.25 * towards_center;
            dynamics.push(DynamicBox {
                min,
                extent: e,
                class: 3,
                velocity,
            });
        }
        Self::new(extents, classes, statics, dynamics)
    }

    /// Sectioned text form:
    ///
    /// ```text
    /// [world]
    /// extents = 16 16 8
    /// [classes]
    /// empty = empty
    /// ground = static
    /// vehicle = dynamic
    /// [boxes]
    /// static = x y z ex ey ez class
    /// dynamic = x y z ex ey ez class vx vy vz
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let cfg_err = |line: usize, msg: String| Error::Config { line, msg };
        let mut section = String::new();
        let mut extents = None;
        let (mut names, mut dynamic, mut empty) = (vec![], vec![], vec![]);
        let mut raw_boxes: Vec<(usize, bool, Vec<String>)> = vec![];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(s) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = s.trim().to_string();
                if !["world", "classes", "boxes"].contains(&section.as_str()) {
                    return Err(cfg_err(line, format!("unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| cfg_err(line, format!("expected key = value, got {content:?}")))?;
            match (section.as_str(), k) {
                ("world", "extents") => {
                    let vals: Vec<usize> = v
                        .split_whitespace()
                        .map(|s| s.parse().map_err(|_| cfg_err(line, format!("bad extent {s:?}"))))
                        .collect::<Result<_>>()?;
                    let e: [usize; 3] = vals.try_into().map_err(|_| cfg_err(line, "extents needs 3 values".into()))?;
                    extents = Some(e);
                }
                ("classes", name) => {
                    let flag = match v {
                        "empty" => (false, true),
                        "static" => (false, false),
                        "dynamic" => (true, false),
                        _ => return Err(cfg_err(line, format!("class kind must be empty, static or dynamic, got {v:?}"))),
                    };
                    names.push(name.to_string());
                    dynamic.push(flag.0);
                    empty.push(flag.1);
                }
                ("boxes", kind @ ("static" | "dynamic")) => {
                    raw_boxes.push((line, kind == "dynamic", v.split_whitespace().map(String::from).collect()));
                }
                _ => return Err(cfg_err(line, format!("unknown key {k:?} in [{section}]"))),
            }
        }
        let extents = extents.ok_or_else(|| cfg_err(0, "missing [world] extents".into()))?;
        let empties: Vec<usize> = empty.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i).collect();
        if empties.len() != 1 {
            return Err(cfg_err(0, format!("exactly one empty class required, found {}", empties.len())));
        }
        let classes = ClassTable::new(names, dynamic, empties[0])?;
        let (mut statics, mut dynamics) = (vec![], vec![]);
        for (line, is_dyn, f) in raw_boxes {
            let want = if is_dyn { 10 } else { 7 };
            if f.len() != want {
                return Err(cfg_err(line, format!("box needs {want} fields, got {}", f.len())));
            }
            let int = |s: &str| s.parse::<i64>().map_err(|_| cfg_err(line, format!("bad integer {s:?}")));
            let min = [int(&f[0])?, int(&f[1])?, int(&f[2])?];
            let mut extent = [0usize; 3];
            for a in 0..3 {
                extent[a] = f[3 + a].parse().map_err(|_| cfg_err(line, format!("bad extent {:?}", f[3 + a])))?;
            }
            let class = classes.index_of(&f[6]).ok_or_else(|| cfg_err(line, format!("unknown class {:?}", f[6])))?;
            if is_dyn {
                let mut velocity = [0.0; 3];
                for a in 0..3 {
                    velocity[a] = f[7 + a].parse().map_err(|_| cfg_err(line, format!("bad velocity {:?}", f[7 + a])))?;
                }
                dynamics.push(DynamicBox {
                    min,
                    extent,
                    class,
                    velocity,
                });
            } else {
                statics.push(StaticBox { min, extent, class });
            }
        }
        Self::new(extents, classes, statics, dynamics)
    }

    pub fn voxel_index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.extents[1] + c[1]) * self.extents[2] + c[2]
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }
}

/// Rasterize every box at frame `t` (1-based); later boxes overwrite earlier ones.
pub fn ground_truth_occupancy(world: &WorldSpec, t: usize) -> Result<Labels> {
    if t == 0 {
        return Err(Error::Argument("frames are numbered from 1".into()));
    }
    let mut labels = vec![world.classes.empty; world.voxels()];
    let elapsed = (t - 1) as f64;
    let placed = world
        .statics
        .iter()
        .map(|b| (b.min.map(|m| m as f64), b.extent, b.class))
        .chain(world.dynamics.iter().map(|b| {
            let min = [0, 1, 2].map(|a| b.min[a] as f64 + b.velocity[a] * elapsed);
            (min, b.extent, b.class)
        }));
    for (min, extent, class) in placed {
        for cell in box_cells(min, extent, world.extents) {
            labels[world.voxel_index(cell)] = class;
        }
    }
    Ok(labels)
}

/// Label of the world voxel containing `q`; outside the world is empty.
pub fn label_at(world: &WorldSpec, labels: &[usize], q: [f64; 3]) -> usize {
    let mut cell = [0usize; 3];
    for a in 0..3 {
        let c = (q[a] + 0.5).floor();
        if c < 0.0 || c >= world.extents[a] as f64 {
            return world.classes.empty;
        }
        cell[a] = c as usize;
    }
    labels[world.voxel_index(cell)]
}

/// Ego pose `pose(t)`: rotation by `yaw_rate·(t−1)` about `pivot`, then
/// translation `velocity·(t−1)`; maps ego-grid coordinates to world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub velocity: [f64; 3],
    pub yaw_rate: f64,
    pub pivot: [f64; 3],
}

impl Trajectory {
    pub fn stationary() -> Self {
        Self {
            velocity: [0.0; 3],
            yaw_rate: 0.0,
            pivot: [0.0; 3],
        }
    }

    /// Turning about the vertical axis through the grid center.
    pub fn centered(extents: [usize; 3], velocity: [f64; 3], yaw_rate: f64) -> Self {
        Self {
            velocity,
            yaw_rate,
            pivot: [(extents[0] as f64 - 1.0) / 2.0, (extents[1] as f64 - 1.0) / 2.0, 0.0],
        }
    }

    pub fn pose(&self, t: usize) -> RigidTransform {
        let e = t.saturating_sub(1) as f64;
        RigidTransform::yaw_about(self.yaw_rate * e, self.pivot, self.velocity.map(|v| v * e))
    }

    /// `R_{t→t−1}`: current ego coordinates to previous ego coordinates.
    /// Identity at the first frame.
    pub fn delta(&self, t: usize) -> RigidTransform {
        if t <= 1 {
            return RigidTransform::identity();
        }
        self.pose(t - 1).inverse().compose(&self.pose(t))
    }
}

/// Ground truth seen from the ego grid at frame `t`.
pub fn ego_ground_truth(world: &WorldSpec, traj: &Trajectory, t: usize) -> Result<Labels> {
    let labels = ground_truth_occupancy(world, t)?;
    let pose = traj.pose(t);
    let [_, y, z] = world.extents;
    Ok((0..world.voxels())
        .map(|v| {
            let p = [(v / (y * z)) as f64, ((v / z) % y) as f64, (v % z) as f64];
            label_at(world, &labels, pose.apply(p))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorNoise {
    /// Std of the per-bin score perturbation.
    pub sigma_depth: f64,
    /// Std of the additive feature noise.
    pub sigma_feat: f64,
    /// Depth sharpness in squared bin widths.
    pub tau: f64,
    pub seed: u64,
}

impl SensorNoise {
    pub fn noiseless(tau: f64) -> Self {
        Self {
            sigma_depth: 0.0,
            sigma_feat: 0.0,
            tau,
            seed: 0,
        }
    }
}

/// A single downward-looking camera with one parallel ray per grid column.
///
/// Rays run along `+z` of the camera frame; the extrinsic flips that onto
/// `−z` of the grid so that bin `k` of depth `d_k` lands at height
/// `(Z − 1) + d_1 − d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopDownCamera {
    pub rays: CameraRays,
    pub extrinsic: RigidTransform,
    pub bin_centers: Vec<f64>,
    /// `classes × c`; the empty class embeds to zero.
    pub embeddings: Tensor,
}

impl TopDownCamera {
    pub fn new(extents: [usize; 3], bin_centers: Vec<f64>, embeddings: Tensor) -> Result<Self> {
        let [x, y, z] = extents;
        let origins = (0..x).flat_map(|i| (0..y).map(move |j| [i as f64, -(j as f64), 0.0])).collect();
        let extrinsic = RigidTransform::new(
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            [0.0, 0.0, (z as f64 - 1.0) + bin_centers[0]],
        )?;
        Ok(Self {
            rays: CameraRays::parallel(origins)?,
            extrinsic,
            bin_centers,
            embeddings,
        })
    }

    /// Bins and class embeddings from the configuration; embeddings are
    /// standard normal per channel.
    pub fn from_config(cfg: &PipelineConfig, classes: &ClassTable, seed: u64) -> Result<Self> {
        let bins = uniform_bin_centers(cfg.depth_min, cfg.depth_max, cfg.bins)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE3B_ED);
        let c = cfg.channels;
        let mut emb = Tensor::zeros(&[classes.len(), c]);
        for k in 0..classes.len() {
            if k != classes.empty {
                for ch in 0..c {
                    emb.set2(k, ch, rng.sample(StandardNormal));
                }
            }
        }
        Self::new(cfg.extents, bins, emb)
    }

    pub fn channels(&self) -> usize {
        self.embeddings.dims()[1]
    }

    /// Camera motion from the previous camera frame into the current one.
    pub fn camera_delta(&self, ego_delta: &RigidTransform) -> RigidTransform {
        self.extrinsic.inverse().compose(&ego_delta.inverse()).compose(&self.extrinsic)
    }
}

/// First bin whose sample point along ray `r` falls in an occupied voxel,
/// with that voxel's class.
pub fn first_hit(world: &WorldSpec, labels: &[usize], cam: &TopDownCamera, pose: &RigidTransform, r: usize) -> Option<(usize, usize)> {
    cam.bin_centers.iter().enumerate().find_map(|(k, &d)| {
        let q = pose.apply(cam.extrinsic.apply(cam.rays.point(r, d)));
        let class = label_at(world, labels, q);
        (class != world.classes.empty).then_some((k, class))
    })
}

/// Render frame `t`: per-ray depth distributions
/// `softmax_k(−((d_k − d_true)/Δ)²/τ + σ_d·ε_k)` and features
/// `embedding(hit class) + σ_f·ε`. Misses report the farthest bin and the
/// empty embedding.
pub fn render_frame(world: &WorldSpec, traj: &Trajectory, cam: &TopDownCamera, noise: &SensorNoise, t: usize, dt: f64) -> Result<FrameInput> {
    let labels = ground_truth_occupancy(world, t)?;
    let pose = traj.pose(t);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(t as u64);
    let (rays, k, c) = (cam.rays.len(), cam.bin_centers.len(), cam.channels());
    let width = cam.bin_centers[1] - cam.bin_centers[0];
    let mut probs = Tensor::zeros(&[rays, k]);
    let mut features = Tensor::zeros(&[rays, c]);
    let mut scores = vec![0.0; k];
    for r in 0..rays {
        let (bin, class) = first_hit(world, &labels, cam, &pose, r).unwrap_or((k - 1, world.classes.empty));
        let d_true = cam.bin_centers[bin];
        for (s, &d) in scores.iter_mut().zip(&cam.bin_centers) {
            let u = (d - d_true) / width;
            *s = -u * u / noise.tau;
            if noise.sigma_depth > 0.0 {
                *s += noise.sigma_depth * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut probs.data_mut()[r * k..(r + 1) * k];
        for (p, &s) in row.iter_mut().zip(&scores) {
            *p = (s - top).exp();
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
        for ch in 0..c {
            let mut f = cam.embeddings.at2(class, ch);
            if noise.sigma_feat > 0.0 {
                f += noise.sigma_feat * rng.sample::<f64, _>(StandardNormal);
            }
            features.set2(r, ch, f);
        }
    }
    let ego_delta = traj.delta(t);
    Ok(FrameInput {
        index: t as u64,
        dt,
        ego_delta,
        views: vec![ViewInput {
            features,
            depth: DepthDistribution::new(probs, cam.bin_centers.clone())?,
            rays: cam.rays.clone(),
            extrinsic: cam.extrinsic,
            camera_delta: cam.camera_delta(&ego_delta),
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cam(extents: [usize; 3]) -> TopDownCamera {
        let cfg = PipelineConfig {
            extents,
            channels: 4,
            bins: 8,
            depth_min: 1.0,
            depth_max: 9.0,
            ..PipelineConfig::default()
        };
        TopDownCamera::from_config(&cfg, &ClassTable::default_four(), 1).unwrap()
    }

    #[test]
    fn empty_world_is_empty() {
        let w = WorldSpec::empty([4, 4, 4]);
        assert!(ground_truth_occupancy(&w, 1).unwrap().iter().all(|&l| l == 0));
        assert!(ground_truth_occupancy(&w, 0).is_err());
    }

    #[test]
    fn moving_box_kinematics() {
        let mut w = WorldSpec::empty([6, 2, 2]);
        w.dynamics.push(DynamicBox {
            min: [0, 0, 0],
            extent: [1, 1, 1],
            class: 3,
            velocity: [1.0, 0.0, 0.0],
        });
        w.validate().unwrap();
        let l = ground_truth_occupancy(&w, 3).unwrap();
        let occupied: Vec<usize> = (0..l.len()).filter(|&v| l[v] != 0).collect();
        assert_eq!(occupied, vec![w.voxel_index([2, 0, 0])]);
    }

    #[test]
    fn label_histogram_matches_box_volumes() {
        let w = WorldSpec::parse(
            "[world]\nextents = 8 8 4\n[classes]\nempty = empty\nground = static\nbuilding = static\nvehicle = dynamic\n[boxes]\nstatic = 0 0 0 8 8 1 ground\nstatic = 1 1 1 2 3 2 building\ndynamic = 5 5 1 2 2 1 vehicle 0 -1 0\n",
        )
        .unwrap();
        let l = ground_truth_occupancy(&w, 2).unwrap();
        let count = |c: usize| l.iter().filter(|&&x| x == c).count();
        assert_eq!(count(1), 64);
        assert_eq!(count(2), 12);
        assert_eq!(count(3), 4);
        assert_eq!(count(0), 256 - 80);
    }

    #[test]
    fn world_parse_errors() {
        assert!(matches!(WorldSpec::parse("[world]\nextents = 4 4\n"), Err(Error::Config { line: 2, .. })));
        assert!(WorldSpec::parse("[world]\nextents = 4 4 4\n[classes]\na = static\n").is_err());
        let bad = "[world]\nextents = 4 4 4\n[classes]\ne = empty\ng = static\n[boxes]\nstatic = 3 0 0 2 1 1 g\n";
        assert!(matches!(WorldSpec::parse(bad), Err(Error::Argument(_))));
        let bad_class = "[world]\nextents = 4 4 4\n[classes]\ne = empty\ng = static\n[boxes]\nstatic = 0 0 0 1 1 1 q\n";
        assert!(matches!(WorldSpec::parse(bad_class), Err(Error::Config { line: 7, .. })));
    }

    #[test]
    fn generated_world_is_valid_and_seeded() {
        let a = WorldSpec::generate([16, 16, 8], 3).unwrap();
        assert_eq!(a, WorldSpec::generate([16, 16, 8], 3).unwrap());
        assert_ne!(a, WorldSpec::generate([16, 16, 8], 4).unwrap());
        assert!(a.dynamics.iter().all(|d| a.classes.dynamic[d.class]));
    }

    #[test]
    fn trajectory_deltas_compose() {
        let traj = Trajectory::centered([16, 16, 8], [0.3, -0.2, 0.0], 0.05);
        let mut acc = RigidTransform::identity();
        for t in 2..=12 {
            acc = acc.compose(&traj.delta(t));
        }
        let direct = traj.pose(1).inverse().compose(&traj.pose(12));
        assert!(acc.max_abs_diff(&direct) < 1e-9);
        assert!(traj.delta(1).is_identity());
    }

    #[test]
    fn noiseless_render_hits_true_bin() {
        let mut w = WorldSpec::empty([4, 4, 4]);
        w.statics.push(StaticBox {
            min: [0, 0, 0],
            extent: [4, 4, 1],
            class: 1,
        });
        w.statics.push(StaticBox {
            min: [1, 1, 0],
            extent: [1, 1, 3],
            class: 2,
        });
        let cam = small_cam([4, 4, 4]);
        let f = render_frame(&w, &Trajectory::stationary(), &cam, &SensorNoise::noiseless(0.5), 1, 0.5).unwrap();
        let view = &f.views[0];
        // ray index i·Y + j looks down column (i, j); the surface is at z = 0 or z = 2
        for r in 0..16 {
            let expect = if r == 5 { 1 } else { 3 };
            assert_eq!(view.depth.argmax(r), expect);
            let class = if r == 5 { 2 } else { 1 };
            for ch in 0..4 {
                assert_eq!(view.features.at2(r, ch), cam.embeddings.at2(class, ch));
            }
        }
    }

    #[test]
    fn misses_report_farthest_bin() {
        let w = WorldSpec::empty([3, 3, 3]);
        let cam = small_cam([3, 3, 3]);
        let f = render_frame(&w, &Trajectory::stationary(), &cam, &SensorNoise::noiseless(0.5), 1, 0.5).unwrap();
        for r in 0..9 {
            assert_eq!(f.views[0].depth.argmax(r), 7);
            assert!(f.views[0].features.data()[r * 4..r * 4 + 4].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn noisy_renders_average_to_true_bin() {
        let w = WorldSpec::generate([8, 8, 4], 5).unwrap();
        let cam = small_cam([8, 8, 4]);
        let traj = Trajectory::stationary();
        let clean = render_frame(&w, &traj, &cam, &SensorNoise::noiseless(0.5), 1, 0.5).unwrap();
        let mut mean = Tensor::zeros(&[64, 8]);
        for s in 0..200 {
            let noise = SensorNoise {
                sigma_depth: 1.5,
                sigma_feat: 0.5,
                tau: 0.5,
                seed: s,
            };
            let f = render_frame(&w, &traj, &cam, &noise, 1, 0.5).unwrap();
            mean = mean.add(f.views[0].depth.probs()).unwrap();
        }
        let mean = DepthDistribution::new(mean.scale(1.0 / 200.0), cam.bin_centers.clone()).unwrap();
        for r in 0..64 {
            assert_eq!(mean.argmax(r), clean.views[0].depth.argmax(r));
        }
    }

    #[test]
    fn render_is_deterministic_and_seeded() {
        let w = WorldSpec::generate([8, 8, 4], 1).unwrap();
        let cam = small_cam([8, 8, 4]);
        let noise = SensorNoise {
            sigma_depth: 1.0,
            sigma_feat: 1.0,
            tau: 0.5,
            seed: 9,
        };
        let traj = Trajectory::stationary();
        let a = render_frame(&w, &traj, &cam, &noise, 2, 0.5).unwrap();
        assert_eq!(a, render_frame(&w, &traj, &cam, &noise, 2, 0.5).unwrap());
        assert_ne!(a, render_frame(&w, &traj, &cam, &SensorNoise { seed: 10, ..noise.clone() }, 2, 0.5).unwrap());
    }

    #[test]
    fn ego_ground_truth_follows_pose() {
        let w = WorldSpec::generate([8, 8, 4], 2).unwrap();
        assert_eq!(ego_ground_truth(&w, &Trajectory::stationary(), 3).unwrap(), ground_truth_occupancy(&w, 3).unwrap());
        let traj = Trajectory::centered([8, 8, 4], [1.0, 0.0, 0.0], 0.0);
        let ego = ego_ground_truth(&w, &traj, 2).unwrap();
        let world = ground_truth_occupancy(&w, 2).unwrap();
        assert_eq!(ego[w.voxel_index([0, 3, 1])], world[w.voxel_index([1, 3, 1])]);
        assert_eq!(ego[w.voxel_index([7, 3, 0])], 0);
    }
}
