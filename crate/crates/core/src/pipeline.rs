//! Per-frame orchestration of the four fusion levels.
//!
//! One call to [`FusionModel::step`] runs, in order: geometry gate and
//! update, lifting with the fused geometry, motion prediction and update,
//! voxel recurrence with the fused motion, scene parameter update and
//! application, and the occupancy head. Every stage can be switched off;
//! the four hidden states are carried either way.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineConfig, VoxelWeights};
use crate::error::{shape_err, Error, Result};
use crate::gdft::{self, Manifest};
use crate::geometry::{gate, geometry_update, warp_geometry, CameraPose, CameraRays, DepthDistribution, GateParams};
use crate::motion::{motion_gradient, motion_update, predict_motion, MotionField, MotionPredictor};
use crate::scene::{scene_apply, scene_gradient, scene_update, AugmentWeights, SceneParams};
use crate::tensor::{sampling_weights, RigidTransform, Tensor, VoxelGrid};
use crate::voxel::{add_channel_offsets, time_embed, voxel_update, FusionWeights, VoxelHidden};

/// One camera's observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInput {
    /// `rays × c` image features.
    pub features: Tensor,
    /// Predicted depth `G`.
    pub depth: DepthDistribution,
    pub rays: CameraRays,
    /// Camera frame to ego grid.
    pub extrinsic: RigidTransform,
    /// Previous camera frame to current camera frame.
    pub camera_delta: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub index: u64,
    pub dt: f64,
    /// `R_{t→t−1}`: current ego grid coordinates to previous ones.
    pub ego_delta: RigidTransform,
    pub views: Vec<ViewInput>,
}

/// The four carried states.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateBundle {
    pub h_v: VoxelHidden,
    pub h_s: SceneParams,
    pub h_m: MotionField,
    pub h_g: Vec<DepthDistribution>,
}

impl HiddenStateBundle {
    fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::column(&[self.h_g.len() as f64]), self.h_v.state.to_tensor()];
        out.extend(self.h_s.tensors().into_iter().cloned());
        out.push(self.h_m.to_tensor());
        for g in &self.h_g {
            out.extend(g.to_tensors());
        }
        out
    }

    /// Back-to-back GDFT records: view count, `h_v`, `γ, β, W, b`, `h_m`,
    /// then probabilities and bin centers per view.
    pub fn to_bytes(&self) -> Vec<u8> {
        gdft::encode_all(self.tensors().iter())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let head = gdft::read_tensor(&mut cur)?;
        let views = head.data()[0];
        if head.len() != 1 || views < 1.0 || views.fract() != 0.0 || views > 64.0 {
            return Err(Error::Format(format!("bad view count record {:?}", head.data())));
        }
        let mut next = || gdft::read_tensor(&mut cur);
        let h_v = VoxelHidden::new(VoxelGrid::from_tensor(next()?)?);
        let h_s = SceneParams::from_tensors((0..4).map(|_| next()).collect::<Result<_>>()?)?;
        let h_m = MotionField::from_tensor(next()?)?;
        let mut h_g = vec![];
        for _ in 0..views as usize {
            let (p, c) = (next()?, next()?);
            h_g.push(DepthDistribution::from_tensors(p, c)?);
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after state bundle", cur.len())));
        }
        let b = Self { h_v, h_s, h_m, h_g };
        b.check()?;
        Ok(b)
    }

    pub fn byte_len(&self) -> usize {
        self.tensors().iter().map(|t| gdft::encoded_len(t.dims())).sum()
    }

    /// Serialized bytes per state, plus the view-count header.
    pub fn component_bytes(&self) -> Vec<(String, usize)> {
        let len = |t: &Tensor| gdft::encoded_len(t.dims());
        vec![
            ("header".into(), len(&Tensor::column(&[0.0]))),
            ("h_v".into(), self.h_v.byte_len()),
            ("h_s".into(), self.h_s.tensors().iter().map(|t| len(t)).sum()),
            ("h_m".into(), len(&self.h_m.to_tensor())),
            ("h_g".into(), self.h_g.iter().flat_map(|g| g.to_tensors()).map(|t| len(&t)).sum()),
        ]
    }

    fn check(&self) -> Result<()> {
        let c = self.h_s.validate()?;
        if self.h_v.state.channels() != c || self.h_v.state.extents() != self.h_m.extents() {
            return Err(Error::Sequence("state bundle extents are inconsistent".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut m = Manifest::default();
        let hv = self.h_v.state.to_tensor();
        let hm = self.h_m.to_tensor();
        let hg: Vec<[Tensor; 2]> = self.h_g.iter().map(|g| g.to_tensors()).collect();
        let mut named: Vec<(String, &Tensor)> = vec![("h_v".into(), &hv)];
        for (name, t) in crate::scene::SCENE_TENSOR_NAMES.iter().zip(self.h_s.tensors()) {
            named.push((format!("h_s_{name}"), t));
        }
        named.push(("h_m".into(), &hm));
        for (i, [p, c]) in hg.iter().enumerate() {
            named.push((format!("h_g{i}_probs"), p));
            named.push((format!("h_g{i}_bins"), c));
        }
        m.write_tensors(dir, named)?;
        m.insert("views", self.h_g.len().to_string());
        m.save(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::load(&dir.join("manifest.txt"))?;
        let get = |k: &str| -> Result<Tensor> {
            let file = m.get(k).ok_or_else(|| Error::Format(format!("manifest lacks {k}")))?;
            gdft::load(&dir.join(file))
        };
        let views: usize = m
            .get("views")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("manifest lacks a view count".into()))?;
        let h_s = SceneParams::from_tensors(
            crate::scene::SCENE_TENSOR_NAMES
                .iter()
                .map(|n| get(&format!("h_s_{n}")))
                .collect::<Result<_>>()?,
        )?;
        let h_g = (0..views)
            .map(|i| DepthDistribution::from_tensors(get(&format!("h_g{i}_probs"))?, get(&format!("h_g{i}_bins"))?))
            .collect::<Result<_>>()?;
        let b = Self {
            h_v: VoxelHidden::new(VoxelGrid::from_tensor(get("h_v")?)?),
            h_s,
            h_m: MotionField::from_tensor(get("h_m")?)?,
            h_g,
        };
        b.check()?;
        Ok(b)
    }
}

/// Per-voxel affine classifier `f_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `classes × c`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(classes: usize, c: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[classes, c]),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyPrediction {
    /// One channel per class.
    pub logits: VoxelGrid,
}

impl OccupancyPrediction {
    /// Arg-max class per voxel; ties go to the lower index.
    pub fn labels(&self) -> Vec<usize> {
        let (k, n) = (self.logits.channels(), self.logits.voxels());
        let d = self.logits.data();
        (0..n)
            .map(|v| (1..k).fold(0, |best, c| if d[c * n + v] > d[best * n + v] { c } else { best }))
            .collect()
    }
}

/// `O = W·V + b` at every voxel.
pub fn head(v: &VoxelGrid, p: &HeadParams) -> Result<OccupancyPrediction> {
    let (k, c) = p.weight.shape2()?;
    if c != v.channels() || p.bias.len() != k {
        return Err(shape_err("head", format!("[{k}, {}]", v.channels()), p.weight.dims()));
    }
    let mut logits = v.mix_channels(&p.weight)?;
    let n = logits.voxels();
    for (cls, &b) in p.bias.iter().enumerate() {
        for x in &mut logits.data_mut()[cls * n..(cls + 1) * n] {
            *x += b;
        }
    }
    Ok(OccupancyPrediction { logits })
}

/// Splat every `(ray, bin)` feature, weighted by its probability, onto the
/// eight voxels around the bin's 3D point. Points outside the grid lose
/// the mass of their out-of-range corners.
pub fn lift(frame: &FrameInput, geometry: &[DepthDistribution], extents: [usize; 3]) -> Result<VoxelGrid> {
    if geometry.len() != frame.views.len() || frame.views.is_empty() {
        return Err(shape_err("lift", frame.views.len(), geometry.len()));
    }
    let c = frame.views[0].features.dims()[1];
    let mut out = VoxelGrid::zeros(c, extents);
    let n = out.voxels();
    let [_, y, z] = extents;
    for (view, g) in frame.views.iter().zip(geometry) {
        let (rays, fc) = view.features.shape2()?;
        if fc != c || g.rays() != rays || view.rays.len() != rays {
            return Err(shape_err("lift", format!("[{rays}, {c}]"), (g.rays(), fc)));
        }
        let data = out.data_mut();
        for r in 0..rays {
            let feat = &view.features.data()[r * c..(r + 1) * c];
            for (k, &p) in g.row(r).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let point = view.extrinsic.apply(view.rays.point(r, g.bin_centers()[k]));
                let (base, w) = sampling_weights(point);
                for (corner, &wc) in w.iter().enumerate() {
                    if wc == 0.0 {
                        continue;
                    }
                    let idx = [
                        base[0] + (corner >> 2) as i64,
                        base[1] + ((corner >> 1) & 1) as i64,
                        base[2] + (corner & 1) as i64,
                    ];
                    if (0..3).any(|a| idx[a] < 0 || idx[a] >= extents[a] as i64) {
                        continue;
                    }
                    let v = (idx[0] as usize * y + idx[1] as usize) * z + idx[2] as usize;
                    let s = p * wc;
                    for (ch, &f) in feat.iter().enumerate() {
                        data[ch * n + v] += s * f;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed model weights plus the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub cfg: PipelineConfig,
    pub aug: AugmentWeights,
    pub predictor: MotionPredictor,
    pub gate: GateParams,
    pub weights: FusionWeights,
    pub scene_init: SceneParams,
    pub head: HeadParams,
}

impl FusionModel {
    /// Seeded untrained weights; the head starts at zero.
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0DE1_5EED);
        let aug = AugmentWeights::random(c, &mut rng);
        let predictor = MotionPredictor::random(c, cfg.motion_scale, &mut rng);
        let weights = match &cfg.voxel_weights {
            VoxelWeights::Ema(alpha) => FusionWeights::ema(c, *alpha)?,
            VoxelWeights::Dense { a, b } => FusionWeights::new(gdft::load(a)?, gdft::load(b)?)?,
        };
        if weights.channels() != c {
            return Err(shape_err("FusionModel::new", c, weights.channels()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            aug,
            predictor,
            gate: GateParams::zeros(cfg.bins),
            weights,
            scene_init: SceneParams::identity(c),
            head: HeadParams::zeros(cfg.classes, c),
        })
    }

    fn scene_step(&self, n: usize) -> f64 {
        if self.cfg.normalize_scene_step {
            self.cfg.eta_s / (n * self.cfg.channels) as f64
        } else {
            self.cfg.eta_s
        }
    }

    /// The fixed part of the pre-head path for a single unfused volume.
    pub fn pre_head(&self, v: &VoxelGrid) -> Result<VoxelGrid> {
        if !self.cfg.fusion.scene {
            return Ok(v.clone());
        }
        let out = scene_apply(&v.flatten(), &self.scene_init, &self.aug)?;
        VoxelGrid::unflatten(out, v.extents())
    }

    fn check_frame(&self, frame: &FrameInput, prev: Option<&HiddenStateBundle>) -> Result<()> {
        if frame.views.is_empty() {
            return Err(Error::Sequence(format!("frame {} has no views", frame.index)));
        }
        for v in &frame.views {
            let (rays, c) = v.features.shape2()?;
            if c != self.cfg.channels || v.depth.rays() != rays || v.depth.bins() != self.cfg.bins || v.rays.len() != rays {
                return Err(shape_err(
                    "step",
                    format!("{rays} rays × {} channels, {} bins", self.cfg.channels, self.cfg.bins),
                    format!("{} rays × {c} channels, {} bins", v.depth.rays(), v.depth.bins()),
                ));
            }
        }
        if let Some(p) = prev {
            let same_views = p.h_g.len() == frame.views.len()
                && p.h_g.iter().zip(&frame.views).all(|(g, v)| g.probs().dims() == v.depth.probs().dims());
            if !same_views || p.h_v.state.extents() != self.cfg.extents || p.h_v.state.channels() != self.cfg.channels {
                return Err(Error::Sequence(format!("frame {} does not match the carried state", frame.index)));
            }
        }
        Ok(())
    }

    /// Advance every state by one frame. `prev = None` starts a sequence:
    /// `H_g = G`, `H_m = M`, `H_v = (A_v + B_v)·V`, `H_s` from the identity start.
    pub fn step(&self, frame: &FrameInput, prev: Option<&HiddenStateBundle>) -> Result<(OccupancyPrediction, HiddenStateBundle)> {
        let (v_hat, bundle) = self.step_features(frame, prev)?;
        Ok((head(&v_hat, &self.head)?, bundle))
    }

    /// [`Self::step`] without the head: the volume entering `f_o` and the
    /// advanced states.
    pub fn step_features(&self, frame: &FrameInput, prev: Option<&HiddenStateBundle>) -> Result<(VoxelGrid, HiddenStateBundle)> {
        self.check_frame(frame, prev)?;
        let fusion = self.cfg.fusion;

        let mut h_g = Vec::with_capacity(frame.views.len());
        for (i, view) in frame.views.iter().enumerate() {
            let fused = match prev {
                Some(p) if fusion.geometry => {
                    let pose = CameraPose {
                        transform: view.camera_delta,
                        rays: view.rays.clone(),
                    };
                    let warped = warp_geometry(&p.h_g[i], &pose)?;
                    let gates = gate(&warped, &view.depth, &self.gate)?;
                    geometry_update(&warped, &view.depth, &gates)?
                }
                _ => view.depth.clone(),
            };
            h_g.push(fused);
        }

        let v_now = lift(frame, &h_g, self.cfg.extents)?;

        let m_now = predict_motion(&v_now, &self.predictor)?;
        let h_m = match prev {
            Some(p) if fusion.motion => {
                let grad = motion_gradient(&p.h_m, &m_now, &frame.ego_delta)?;
                motion_update(&m_now, &grad, self.cfg.eta_m)?
            }
            _ => m_now,
        };

        let h_v = if fusion.voxel {
            let v_in = if self.cfg.time_embedding {
                add_channel_offsets(&v_now, &time_embed(frame.index, frame.dt, self.cfg.channels)?)?
            } else {
                v_now.clone()
            };
            match prev {
                Some(p) => {
                    let m_fused = if fusion.motion { h_m.clone() } else { MotionField::zeros(self.cfg.extents) };
                    voxel_update(&p.h_v, &v_in, &m_fused, &frame.ego_delta, &self.weights)?
                }
                None => {
                    let ab = self.weights.a.add(&self.weights.b)?;
                    VoxelHidden::new(v_in.mix_channels(&ab)?)
                }
            }
        } else {
            VoxelHidden::new(v_now.clone())
        };

        let s_prev = prev.map_or(&self.scene_init, |p| &p.h_s);
        let (h_s, v_hat) = if fusion.scene {
            let flat = v_now.flatten();
            let (grad, _) = scene_gradient(&flat, s_prev, &self.aug)?;
            let s_f = scene_update(s_prev, &grad, self.scene_step(flat.dims()[1]))?;
            let v_hat = scene_apply(&h_v.state.flatten(), &s_f, &self.aug)?;
            (s_f, VoxelGrid::unflatten(v_hat, self.cfg.extents)?)
        } else {
            (s_prev.clone(), h_v.state.clone())
        };

        Ok((v_hat, HiddenStateBundle { h_v, h_s, h_m, h_g }))
    }

    /// Fold [`Self::step`] over `frames`, optionally resuming from `init`.
    pub fn run_sequence(&self, frames: &[FrameInput], init: Option<HiddenStateBundle>) -> Result<(Vec<OccupancyPrediction>, HiddenStateBundle)> {
        if frames.is_empty() {
            return Err(Error::Argument("run_sequence needs at least one frame".into()));
        }
        let mut state = init;
        let mut preds = Vec::with_capacity(frames.len());
        for f in frames {
            let (p, s) = self.step(f, state.as_ref())?;
            preds.push(p);
            state = Some(s);
        }
        Ok((preds, state.expect("at least one frame")))
    }

    /// Ridge regression of one-hot labels on `[features, 1]`.
    pub fn fit_head(&mut self, volumes: &[VoxelGrid], labels: &[Vec<usize>]) -> Result<()> {
        self.head = fit_ridge_head(volumes, labels, self.cfg.classes, self.cfg.ridge)?;
        Ok(())
    }
}

pub fn fit_ridge_head(volumes: &[VoxelGrid], labels: &[Vec<usize>], classes: usize, ridge: f64) -> Result<HeadParams> {
    if volumes.is_empty() || volumes.len() != labels.len() {
        return Err(shape_err("fit_ridge_head", volumes.len(), labels.len()));
    }
    let c = volumes[0].channels();
    let d = c + 1;
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DMatrix::<f64>::zeros(d, classes);
    let mut row = DVector::<f64>::zeros(d);
    for (vol, lab) in volumes.iter().zip(labels) {
        if vol.channels() != c || lab.len() != vol.voxels() {
            return Err(shape_err("fit_ridge_head", vol.voxels(), lab.len()));
        }
        let n = vol.voxels();
        for v in 0..n {
            for ch in 0..c {
                row[ch] = vol.data()[ch * n + v];
            }
            row[c] = 1.0;
            xtx.ger(1.0, &row, &row, 1.0);
            let cls = lab[v];
            if cls >= classes {
                return Err(Error::Argument(format!("label {cls} out of range")));
            }
            for i in 0..d {
                xty[(i, cls)] += row[i];
            }
        }
    }
    for i in 0..c {
        xtx[(i, i)] += ridge;
    }
    let sol = xtx
        .cholesky()
        .ok_or_else(|| Error::Argument("ridge system is not positive definite".into()))?
        .solve(&xty);
    let mut weight = Tensor::zeros(&[classes, c]);
    for k in 0..classes {
        for ch in 0..c {
            weight.set2(k, ch, sol[(ch, k)]);
        }
    }
    Ok(HeadParams {
        weight,
        bias: (0..classes).map(|k| sol[(c, k)]).collect(),
    })
}
