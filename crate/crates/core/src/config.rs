//! Run configuration: a sectioned `key = value` text file.
//!
//! ```text
//! [grid]
//! extents = 16 16 8
//! [model]
//! channels = 16
//! eta_s = 0.1
//! [fusion]
//! motion = false
//! ```
//!
//! Unknown sections and keys are errors carrying the offending line.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which fusion stages run. The baseline has all four off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Toggles {
    pub voxel: bool,
    pub scene: bool,
    pub motion: bool,
    pub geometry: bool,
}

impl Toggles {
    pub const ALL: Self = Self {
        voxel: true,
        scene: true,
        motion: true,
        geometry: true,
    };

    /// `B` followed by any of `V`, `S`, `M`, `G`, or `Full` for all four.
    pub fn from_name(name: &str) -> Result<Self> {
        if name == "Full" {
            return Ok(Self::ALL);
        }
        let rest = name
            .strip_prefix('B')
            .ok_or_else(|| Error::Setting(format!("configuration name {name:?} must start with 'B' or be 'Full'")))?;
        let mut t = Self::default();
        for ch in rest.chars() {
            let slot = match ch {
                'V' => &mut t.voxel,
                'S' => &mut t.scene,
                'M' => &mut t.motion,
                'G' => &mut t.geometry,
                _ => return Err(Error::Setting(format!("unknown fusion letter {ch:?} in {name:?}"))),
            };
            if *slot {
                return Err(Error::Setting(format!("repeated fusion letter {ch:?} in {name:?}")));
            }
            *slot = true;
        }
        Ok(t)
    }

    pub fn name(&self) -> String {
        if *self == Self::ALL {
            return "Full".into();
        }
        let mut s = String::from("B");
        for (on, ch) in [(self.voxel, 'V'), (self.scene, 'S'), (self.motion, 'M'), (self.geometry, 'G')] {
            if on {
                s.push(ch);
            }
        }
        s
    }
}

/// Source of the voxel recurrence weights.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelWeights {
    Ema(f64),
    /// `A_v` and `B_v` read from GDFT files.
    Dense { a: PathBuf, b: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub extents: [usize; 3],
    pub channels: usize,
    pub classes: usize,
    pub bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub eta_s: f64,
    pub eta_m: f64,
    /// Divide the scene step by `n·c`, the prefactor of the normalized loss.
    pub normalize_scene_step: bool,
    pub voxel_weights: VoxelWeights,
    pub motion_scale: f64,
    pub time_embedding: bool,
    pub dt: f64,
    pub ridge: f64,
    pub fusion: Toggles,
    pub sigma_depth: f64,
    pub sigma_feat: f64,
    pub tau: f64,
    pub seed: u64,
    pub frames: usize,
    pub baseline_n: usize,
    pub runs: Vec<String>,
    pub ego_velocity: [f64; 3],
    pub ego_yaw_rate: f64,
    pub world: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            extents: [16, 16, 8],
            channels: 16,
            classes: 4,
            bins: 32,
            depth_min: 1.0,
            depth_max: 33.0,
            eta_s: 0.1,
            eta_m: 0.01,
            normalize_scene_step: true,
            voxel_weights: VoxelWeights::Ema(0.5),
            motion_scale: 0.05,
            time_embedding: false,
            dt: 0.5,
            ridge: 1e-3,
            fusion: Toggles::ALL,
            sigma_depth: 1.0,
            sigma_feat: 1.0,
            tau: 0.5,
            seed: 0,
            frames: 20,
            baseline_n: 16,
            runs: ["B", "BV", "BVS", "BVMG", "Full"].map(String::from).to_vec(),
            ego_velocity: [0.0; 3],
            ego_yaw_rate: 0.0,
            world: None,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse {key} = {v:?}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("{key} expects a boolean, got {v:?}"),
        }),
    }
}

fn parse_array<T: FromStr + Copy + Default, const N: usize>(line: usize, key: &str, v: &str) -> Result<[T; N]> {
    let parts: Vec<&str> = v.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
    if parts.len() != N {
        return Err(Error::Config {
            line,
            msg: format!("{key} expects {N} values, got {}", parts.len()),
        });
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_value(line, key, p)?;
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_in(text, None)
    }

    /// Parse, resolving relative file paths against `base`.
    pub fn parse_in(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let (mut alpha, mut dense_a, mut dense_b, mut weights_kind) = (0.5, None, None, None::<(usize, String)>);
        let (mut saw_fusion, mut saw_configs) = (false, false);
        let resolve = |p: &str| match base {
            Some(b) if Path::new(p).is_relative() => b.join(p),
            _ => PathBuf::from(p),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                saw_fusion |= section == "fusion";
                if !["grid", "model", "fusion", "noise", "run", "ego", "world"].contains(&section.as_str()) {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown section [{section}]"),
                    });
                }
                continue;
            }
            let (key, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected key = value, got {content:?}"),
            })?;
            let (key, v) = (key.trim(), v.trim());
            match (section.as_str(), key) {
                ("grid", "extents") => cfg.extents = parse_array(line, key, v)?,
                ("model", "channels") => cfg.channels = parse_value(line, key, v)?,
                ("model", "classes") => cfg.classes = parse_value(line, key, v)?,
                ("model", "bins") => cfg.bins = parse_value(line, key, v)?,
                ("model", "depth_min") => cfg.depth_min = parse_value(line, key, v)?,
                ("model", "depth_max") => cfg.depth_max = parse_value(line, key, v)?,
                ("model", "eta_s") => cfg.eta_s = parse_value(line, key, v)?,
                ("model", "eta_m") => cfg.eta_m = parse_value(line, key, v)?,
                ("model", "normalize_scene_step") => cfg.normalize_scene_step = parse_bool(line, key, v)?,
                ("model", "alpha") => alpha = parse_value(line, key, v)?,
                ("model", "voxel_weights") => weights_kind = Some((line, v.to_string())),
                ("model", "a_v") => dense_a = Some(resolve(v)),
                ("model", "b_v") => dense_b = Some(resolve(v)),
                ("model", "motion_scale") => cfg.motion_scale = parse_value(line, key, v)?,
                ("model", "time_embedding") => cfg.time_embedding = parse_bool(line, key, v)?,
                ("model", "dt") => cfg.dt = parse_value(line, key, v)?,
                ("model", "ridge") => cfg.ridge = parse_value(line, key, v)?,
                ("fusion", "voxel") => cfg.fusion.voxel = parse_bool(line, key, v)?,
                ("fusion", "scene") => cfg.fusion.scene = parse_bool(line, key, v)?,
                ("fusion", "motion") => cfg.fusion.motion = parse_bool(line, key, v)?,
                ("fusion", "geometry") => cfg.fusion.geometry = parse_bool(line, key, v)?,
                ("noise", "sigma_depth") => cfg.sigma_depth = parse_value(line, key, v)?,
                ("noise", "sigma_feat") => cfg.sigma_feat = parse_value(line, key, v)?,
                ("noise", "tau") => cfg.tau = parse_value(line, key, v)?,
                ("run", "seed") => cfg.seed = parse_value(line, key, v)?,
                ("run", "frames") => cfg.frames = parse_value(line, key, v)?,
                ("run", "baseline_n") => cfg.baseline_n = parse_value(line, key, v)?,
                ("run", "configs") => {
                    saw_configs = true;
                    cfg.runs = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    for name in &cfg.runs {
                        Toggles::from_name(name).map_err(|e| Error::Config {
                            line,
                            msg: e.to_string(),
                        })?;
                    }
                }
                ("ego", "velocity") => cfg.ego_velocity = parse_array(line, key, v)?,
                ("ego", "yaw_rate") => cfg.ego_yaw_rate = parse_value(line, key, v)?,
                ("world", "file") => cfg.world = Some(resolve(v)),
                ("", _) => {
                    return Err(Error::Config {
                        line,
                        msg: format!("key {key:?} outside of any section"),
                    })
                }
                _ => {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown key {key:?} in [{section}]"),
                    })
                }
            }
        }
        if saw_fusion && !saw_configs {
            cfg.runs = vec![cfg.fusion.name()];
        }
        cfg.voxel_weights = match weights_kind {
            None => VoxelWeights::Ema(alpha),
            Some((_, k)) if k == "ema" => VoxelWeights::Ema(alpha),
            Some((line, k)) if k == "dense" => match (dense_a, dense_b) {
                (Some(a), Some(b)) => VoxelWeights::Dense { a, b },
                _ => {
                    return Err(Error::Config {
                        line,
                        msg: "dense voxel weights need both a_v and b_v".into(),
                    })
                }
            },
            Some((line, k)) => {
                return Err(Error::Config {
                    line,
                    msg: format!("voxel_weights must be 'ema' or 'dense', got {k:?}"),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_in(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Setting(m));
        if self.extents.iter().any(|&e| e == 0) {
            return bad(format!("grid extents must be positive, got {:?}", self.extents));
        }
        if self.channels == 0 || self.classes < 2 || self.bins < 2 {
            return bad("channels must be positive, classes and bins at least 2".into());
        }
        if !(self.depth_max > self.depth_min) {
            return bad("depth_max must exceed depth_min".into());
        }
        if self.eta_s < 0.0 || self.eta_m < 0.0 {
            return bad("eta_s and eta_m must be non-negative".into());
        }
        if let VoxelWeights::Ema(a) = self.voxel_weights {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha must lie in [0, 1], got {a}"));
            }
        }
        if self.sigma_depth < 0.0 || self.sigma_feat < 0.0 || self.tau <= 0.0 || self.ridge < 0.0 || self.motion_scale < 0.0 {
            return bad("noise sigmas, ridge and motion_scale must be non-negative and tau positive".into());
        }
        if self.time_embedding && self.channels % 2 == 1 {
            return bad(format!("time embedding needs an even channel count, got {}", self.channels));
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        Ok(())
    }

    /// Copy with the fusion stages of a named configuration.
    pub fn with_run(&self, name: &str) -> Result<Self> {
        let mut c = self.clone();
        c.fusion = Toggles::from_name(name)?;
        Ok(c)
    }
}
