//! Seeded end-to-end runs: world, sensor, head fitting, metrics and the
//! memory and runtime benches.

use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{gate, geometry_update, warp_geometry, CameraPose, DepthDistribution};
use crate::metrics::{runtime_profile, ConfusionMatrix, MemoryReport, MetricRow, ProfileRow, TIMED_RUNS};
use crate::motion::{motion_gradient, predict_motion};
use crate::oracle::{naive_chain_gradient, StackingState, stacking_update};
use crate::pipeline::{head, lift, FrameInput, FusionModel, HiddenStateBundle};
use crate::scene::scene_gradient;
use crate::synthworld::{ego_ground_truth, render_frame, Labels, SensorNoise, TopDownCamera, Trajectory, WorldSpec};
use crate::voxel::voxel_update;

/// World, camera and ego motion for one configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: PipelineConfig,
    pub world: WorldSpec,
    pub trajectory: Trajectory,
    pub camera: TopDownCamera,
}

impl Scenario {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let world = match &cfg.world {
            Some(path) => WorldSpec::parse(&std::fs::read_to_string(path)?)?,
            None => WorldSpec::generate(cfg.extents, cfg.seed)?,
        };
        if world.extents != cfg.extents {
            return Err(Error::Setting(format!("world extents {:?} differ from grid extents {:?}", world.extents, cfg.extents)));
        }
        if world.classes.len() != cfg.classes {
            return Err(Error::Setting(format!("world declares {} classes, configuration {}", world.classes.len(), cfg.classes)));
        }
        let camera = TopDownCamera::from_config(cfg, &world.classes, cfg.seed)?;
        Ok(Self {
            trajectory: Trajectory::centered(cfg.extents, cfg.ego_velocity, cfg.ego_yaw_rate),
            cfg: cfg.clone(),
            world,
            camera,
        })
    }

    pub fn noise(&self) -> SensorNoise {
        SensorNoise {
            sigma_depth: self.cfg.sigma_depth,
            sigma_feat: self.cfg.sigma_feat,
            tau: self.cfg.tau,
            seed: self.cfg.seed,
        }
    }

    /// Frames `1..=frames` under `noise`.
    pub fn render(&self, noise: &SensorNoise, frames: usize) -> Result<Vec<FrameInput>> {
        (1..=frames)
            .map(|t| render_frame(&self.world, &self.trajectory, &self.camera, noise, t, self.cfg.dt))
            .collect()
    }

    pub fn ground_truth(&self, frames: usize) -> Result<Vec<Labels>> {
        (1..=frames).map(|t| ego_ground_truth(&self.world, &self.trajectory, t)).collect()
    }
}

/// Shared inputs of every configuration in one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub scenario: Scenario,
    pub clean: Vec<FrameInput>,
    pub noisy: Vec<FrameInput>,
    pub truth: Vec<Labels>,
}

impl ExperimentData {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let scenario = Scenario::new(cfg)?;
        let clean = scenario.render(&SensorNoise::noiseless(cfg.tau), cfg.frames)?;
        let noisy = scenario.render(&scenario.noise(), cfg.frames)?;
        let truth = scenario.ground_truth(cfg.frames)?;
        Ok(Self { scenario, clean, noisy, truth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScores {
    pub miou: Option<f64>,
    pub miou_dynamic: Option<f64>,
    pub iou: Option<f64>,
}

impl FrameScores {
    fn of(m: &ConfusionMatrix, data: &ExperimentData) -> Self {
        let table = &data.scenario.world.classes;
        Self {
            miou: m.miou(table),
            miou_dynamic: m.miou_dynamic(table),
            iou: m.iou_binary(table.empty),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub per_frame: Vec<FrameScores>,
    /// Scores of the confusion matrix accumulated over all frames.
    pub overall: FrameScores,
    pub final_state: HiddenStateBundle,
}

/// A model for configuration `name` with its head fit on noiseless
/// single-frame volumes.
pub fn fitted_model(data: &ExperimentData, name: &str) -> Result<FusionModel> {
    let cfg = data.scenario.cfg.with_run(name)?;
    let mut model = FusionModel::new(&cfg)?;
    let volumes = data
        .clean
        .iter()
        .map(|f| {
            let depth: Vec<DepthDistribution> = f.views.iter().map(|v| v.depth.clone()).collect();
            model.pre_head(&lift(f, &depth, cfg.extents)?)
        })
        .collect::<Result<Vec<_>>>()?;
    model.fit_head(&volumes, &data.truth)?;
    Ok(model)
}

/// Run one configuration over the noisy frames. With `dump`, every frame's
/// bundle is saved under `dump/<name>/frame_<t>`.
pub fn run_configuration(data: &ExperimentData, name: &str, dump: Option<&Path>) -> Result<RunOutcome> {
    run_model(data, &fitted_model(data, name)?, name, dump)
}

/// Run an already fitted model over the noisy frames.
pub fn run_model(data: &ExperimentData, model: &FusionModel, name: &str, dump: Option<&Path>) -> Result<RunOutcome> {
    let classes = data.scenario.cfg.classes;
    let mut total = ConfusionMatrix::new(classes);
    let mut per_frame = Vec::with_capacity(data.noisy.len());
    let mut state: Option<HiddenStateBundle> = None;
    for (frame, gt) in data.noisy.iter().zip(&data.truth) {
        let (pred, next) = model.step(frame, state.as_ref())?;
        let labels = pred.labels();
        let m = ConfusionMatrix::from_labels(&labels, gt, classes)?;
        total.accumulate(&labels, gt)?;
        per_frame.push(FrameScores::of(&m, data));
        if let Some(dir) = dump {
            next.save(&dir.join(name).join(format!("frame_{:03}", frame.index)))?;
        }
        state = Some(next);
    }
    Ok(RunOutcome {
        name: name.into(),
        per_frame,
        overall: FrameScores::of(&total, data),
        final_state: state.ok_or_else(|| Error::Argument("no frames to run".into()))?,
    })
}

/// Every configuration listed in `cfg.runs`.
pub fn run_experiment(cfg: &PipelineConfig, dump: Option<&Path>) -> Result<Vec<RunOutcome>> {
    let data = ExperimentData::new(cfg)?;
    cfg.runs.iter().map(|name| run_configuration(&data, name, dump)).collect()
}

fn push_scores(rows: &mut Vec<MetricRow>, run: &str, frame: &str, s: &FrameScores) {
    for (metric, v) in [("miou", s.miou), ("miou_dynamic", s.miou_dynamic), ("iou", s.iou)] {
        if let Some(v) = v {
            rows.push(MetricRow::new(run, frame, metric, v));
        }
    }
}

/// Per-frame and overall rows; undefined scores are omitted.
pub fn outcome_rows(outcomes: &[RunOutcome]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for o in outcomes {
        for (t, s) in o.per_frame.iter().enumerate() {
            push_scores(&mut rows, &o.name, &(t + 1).to_string(), s);
        }
        push_scores(&mut rows, &o.name, "all", &o.overall);
    }
    rows
}

/// History memory per frame: the recurrent bundle after each step and the
/// stacking queue each frame consumes.
#[derive(Debug, Clone)]
pub struct MemoryCurves {
    pub gdfusion: Vec<MemoryReport>,
    /// `(N_h, history bytes per frame)`.
    pub stacking: Vec<(usize, Vec<usize>)>,
}

impl MemoryCurves {
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for r in &self.gdfusion {
            for (name, bytes) in &r.components {
                rows.push(MetricRow::new("gdfusion", r.frame, format!("bytes_{name}"), *bytes as f64));
            }
            rows.push(MetricRow::new("gdfusion", r.frame, "bytes_total", r.total() as f64));
        }
        for (n_h, curve) in &self.stacking {
            for (t, bytes) in curve.iter().enumerate() {
                rows.push(MetricRow::new(format!("stack_n{n_h}"), t + 1, "history_bytes", *bytes as f64));
            }
        }
        if let (Some(last), Some((_, s))) = (self.gdfusion.last(), self.stacking.iter().max_by_key(|(n, _)| *n)) {
            let h_v = last.get("h_v").unwrap_or(0);
            let others = last.total() - h_v - last.get("header").unwrap_or(0);
            if h_v > 0 {
                rows.push(MetricRow::new("gdfusion", "all", "aux_over_h_v", others as f64 / h_v as f64));
                rows.push(MetricRow::new("stacking", "all", "max_n_over_h_v", *s.last().unwrap_or(&0) as f64 / h_v as f64));
            }
        }
        rows
    }
}

pub const BENCH_QUEUE_LENGTHS: [usize; 5] = [1, 2, 4, 8, 16];

pub fn memory_curves(data: &ExperimentData, queue_lengths: &[usize]) -> Result<MemoryCurves> {
    let model = FusionModel::new(&data.scenario.cfg.with_run("Full")?)?;
    let extents = data.scenario.cfg.extents;
    let mut gdfusion = Vec::with_capacity(data.noisy.len());
    let mut state: Option<HiddenStateBundle> = None;
    let mut volumes = Vec::with_capacity(data.noisy.len());
    for (t, frame) in data.noisy.iter().enumerate() {
        let (_, next) = model.step(frame, state.as_ref())?;
        gdfusion.push(MemoryReport {
            frame: t + 1,
            components: next.component_bytes(),
        });
        state = Some(next);
        let depth: Vec<DepthDistribution> = frame.views.iter().map(|v| v.depth.clone()).collect();
        volumes.push(lift(frame, &depth, extents)?);
    }
    let mut stacking = Vec::with_capacity(queue_lengths.len());
    for &n_h in queue_lengths {
        let mut s = StackingState::averaging(n_h, data.scenario.cfg.channels);
        let mut curve = Vec::with_capacity(volumes.len());
        for (v, frame) in volumes.iter().zip(&data.noisy) {
            curve.push(s.history_bytes());
            s = stacking_update(&s, v, &frame.ego_delta)?.1;
        }
        stacking.push((n_h, curve));
    }
    Ok(MemoryCurves { gdfusion, stacking })
}

/// Channel count and voxel count of the fused-vs-naive kernel comparison.
pub const KERNEL_BENCH_DIMS: (usize, usize) = (32, 4096);

/// Median timings of the scene-gradient kernels at `(c, n)`.
pub fn kernel_profile(c: usize, n: usize, seed: u64, repeats: usize) -> Vec<ProfileRow> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (v, params, aug) = crate::gradcheck::random_scene_instance(c, n, &mut rng);
    let mut ops: Vec<(String, Box<dyn FnMut() + '_>)> = vec![
        (
            "scene_gradient".into(),
            Box::new(|| {
                std::hint::black_box(scene_gradient(&v, &params, &aug).expect("valid instance"));
            }),
        ),
        (
            "naive_chain_gradient".into(),
            Box::new(|| {
                std::hint::black_box(naive_chain_gradient(&v, &params, &aug).expect("valid instance"));
            }),
        ),
    ];
    runtime_profile(&mut ops, repeats)
}

/// Per-stage timings of one steady-state step of the full pipeline.
pub fn stage_profile(data: &ExperimentData, repeats: usize) -> Result<Vec<ProfileRow>> {
    let model = FusionModel::new(&data.scenario.cfg.with_run("Full")?)?;
    if data.noisy.len() < 2 {
        return Err(Error::Argument("stage profile needs at least two frames".into()));
    }
    let (_, prev) = model.step(&data.noisy[0], None)?;
    let frame = &data.noisy[1];
    let view = &frame.views[0];
    let extents = model.cfg.extents;
    let pose = CameraPose {
        transform: view.camera_delta,
        rays: view.rays.clone(),
    };
    let depth: Vec<DepthDistribution> = frame.views.iter().map(|v| v.depth.clone()).collect();
    let v_now = lift(frame, &depth, extents)?;
    let m_now = predict_motion(&v_now, &model.predictor)?;
    let flat = v_now.flatten();
    let mut ops: Vec<(String, Box<dyn FnMut() + '_>)> = vec![
        (
            "geometry".into(),
            Box::new(|| {
                let w = warp_geometry(&prev.h_g[0], &pose).unwrap();
                let g = gate(&w, &view.depth, &model.gate).unwrap();
                std::hint::black_box(geometry_update(&w, &view.depth, &g).unwrap());
            }),
        ),
        ("lift".into(), Box::new(|| drop(std::hint::black_box(lift(frame, &depth, extents).unwrap())))),
        (
            "motion".into(),
            Box::new(|| {
                let m = predict_motion(&v_now, &model.predictor).unwrap();
                std::hint::black_box(motion_gradient(&prev.h_m, &m, &frame.ego_delta).unwrap());
            }),
        ),
        (
            "voxel".into(),
            Box::new(|| drop(std::hint::black_box(voxel_update(&prev.h_v, &v_now, &m_now, &frame.ego_delta, &model.weights).unwrap()))),
        ),
        (
            "scene".into(),
            Box::new(|| drop(std::hint::black_box(scene_gradient(&flat, &prev.h_s, &model.aug).unwrap()))),
        ),
        ("head".into(), Box::new(|| drop(std::hint::black_box(head(&v_now, &model.head).unwrap())))),
    ];
    Ok(runtime_profile(&mut ops, repeats))
}

pub fn profile_rows(run_id: &str, rows: &[ProfileRow]) -> Vec<MetricRow> {
    rows.iter()
        .flat_map(|r| {
            [
                MetricRow::new(run_id, &r.name, "median_ms", r.median_ms),
                MetricRow::new(run_id, &r.name, "share", r.share),
            ]
        })
        .collect()
}

/// Memory curves plus both runtime profiles, as CSV rows.
pub fn run_bench(cfg: &PipelineConfig) -> Result<Vec<MetricRow>> {
    let data = ExperimentData::new(cfg)?;
    let mut rows = memory_curves(&data, &BENCH_QUEUE_LENGTHS)?.rows();
    rows.extend(profile_rows("runtime_stages", &stage_profile(&data, TIMED_RUNS)?));
    let (c, n) = KERNEL_BENCH_DIMS;
    rows.extend(profile_rows("runtime_kernels", &kernel_profile(c, n, cfg.seed, TIMED_RUNS)));
    Ok(rows)
}
