//! Declarative scene configs (TOML) and camera trajectory files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::scene::{normalize_cameras, Camera, SceneLayout};
use crate::teacher::AnalyticScene;
use crate::train::TrainConfig;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub seed: u64,
    /// Cells per axis.
    #[serde(default = "one")]
    pub k: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub scene: AnalyticScene,
    pub cameras: CameraConfig,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    /// Vertical field of view in degrees, for rigs that do not set their own.
    #[serde(default = "default_fov")]
    pub fov: f64,
    pub train: Vec<Rig>,
    #[serde(default)]
    pub heldout: Vec<Rig>,
}

fn default_fov() -> f64 {
    50.0
}

fn up_z() -> Vec3 {
    Vec3::new(0.0, 0.0, 1.0)
}

/// A group of world-space camera poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rig {
    /// Cameras on a circle in a plane of constant z, looking at `target`.
    Ring {
        center: Vec3,
        radius: f64,
        count: usize,
        target: Vec3,
        /// Rotation offset in units of the angular spacing.
        #[serde(default)]
        phase: f64,
        /// Amplitude of a vertical `sin(3 angle)` wobble.
        #[serde(default)]
        wobble: f64,
        #[serde(default = "up_z")]
        up: Vec3,
    },
    /// Evenly spaced cameras from `from` to `to`; camera `i` looks at
    /// `targets[i % targets.len()]`.
    Line {
        from: Vec3,
        to: Vec3,
        count: usize,
        targets: Vec<Vec3>,
        #[serde(default = "up_z")]
        up: Vec3,
    },
    Poses { poses: Vec<Pose> },
    /// A trajectory file, resolved relative to the config file.
    File { path: PathBuf },
}

/// One camera: position, look-at point, up hint and vertical field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub look_at: Vec3,
    #[serde(default = "up_z")]
    pub up: Vec3,
    pub fov: Option<f64>,
}

impl Pose {
    pub fn camera(&self, default_fov: f64, width: u32, height: u32) -> Camera {
        Camera::look_at(self.position, self.look_at, self.up, self.fov.unwrap_or(default_fov), width, height)
    }
}

impl Rig {
    pub fn poses(&self, base_dir: &Path) -> Result<Vec<Pose>> {
        Ok(match self {
            Rig::Ring {
                center,
                radius,
                count,
                target,
                phase,
                wobble,
                up,
            } => (0..*count)
                .map(|i| {
                    let a = (i as f64 + phase) / *count as f64 * std::f64::consts::TAU;
                    let offset = Vec3::new(a.cos() * radius, a.sin() * radius, wobble * (3.0 * a).sin());
                    Pose {
                        position: *center + offset,
                        look_at: *target,
                        up: *up,
                        fov: None,
                    }
                })
                .collect(),
            Rig::Line {
                from,
                to,
                count,
                targets,
                up,
            } => {
                if targets.is_empty() {
                    return Err(Error::Config("line rig needs at least one target".into()));
                }
                (0..*count)
                    .map(|i| {
                        let s = if *count > 1 { i as f64 / (*count - 1) as f64 } else { 0.5 };
                        Pose {
                            position: *from + (*to - *from) * s,
                            look_at: targets[i % targets.len()],
                            up: *up,
                            fov: None,
                        }
                    })
                    .collect()
            }
            Rig::Poses { poses } => poses.clone(),
            Rig::File { path } => load_poses(&base_dir.join(path))?,
        })
    }
}

/// Cameras of a loaded config, in normalized scene space.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSet {
    pub layout: SceneLayout,
    pub train: Vec<Camera>,
    pub heldout: Vec<Camera>,
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |name: &str, v: usize| {
            if v < 2 || !v.is_power_of_two() {
                Err(Error::Config(format!("{name} = {v} must be a power of two, at least 2")))
            } else {
                Ok(())
            }
        };
        pow2("model.r", self.model.r)?;
        pow2("model.l", self.model.l)?;
        if self.model.l > self.model.r {
            return Err(Error::Config(format!(
                "model.l = {} exceeds model.r = {}; baking downsamples from R to L",
                self.model.l, self.model.r
            )));
        }
        if self.model.p == 0 {
            return Err(Error::Config("model.p must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.cameras.width == 0 || self.cameras.height == 0 {
            return Err(Error::Config("camera resolution must be positive".into()));
        }
        self.train.validate()
    }

    /// Builds the scene layout from the training camera positions and maps
    /// every camera into normalized space.
    pub fn cameras(&self, base_dir: &Path) -> Result<CameraSet> {
        let c = &self.cameras;
        let world = |rigs: &[Rig]| -> Result<Vec<Camera>> {
            let mut out = Vec::new();
            for rig in rigs {
                out.extend(rig.poses(base_dir)?.iter().map(|p| p.camera(c.fov, c.width, c.height)));
            }
            Ok(out)
        };
        let train = world(&c.train)?;
        if train.is_empty() {
            return Err(Error::NoCameras);
        }
        let heldout = world(&c.heldout)?;
        let layout = normalize_cameras(&train.iter().map(|c| c.position).collect::<Vec<_>>(), self.k)?;
        Ok(CameraSet {
            train: train.iter().map(|c| layout.camera_to_normalized(c)).collect(),
            heldout: heldout.iter().map(|c| layout.camera_to_normalized(c)).collect(),
            layout,
        })
    }
}

/// Parses a trajectory: one pose per line as `px py pz lx ly lz ux uy uz fov`
/// (position, look-at point, up, vertical field of view in degrees). Blank
/// lines and lines starting with `#` are ignored.
pub fn parse_trajectory(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("trajectory line {}: {e}", i + 1)))?;
        if v.len() != 10 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!(
                "trajectory line {}: expected 10 finite numbers, found {}",
                i + 1,
                v.len()
            )));
        }
        poses.push(Pose {
            position: Vec3::new(v[0], v[1], v[2]),
            look_at: Vec3::new(v[3], v[4], v[5]),
            up: Vec3::new(v[6], v[7], v[8]),
            fov: Some(v[9]),
        });
    }
    Ok(poses)
}

pub fn format_trajectory(poses: &[Pose], default_fov: f64) -> String {
    poses
        .iter()
        .map(|p| {
            let (a, b, c) = (p.position, p.look_at, p.up);
            format!(
                "{} {} {} {} {} {} {} {} {} {}\n",
                a.x,
                a.y,
                a.z,
                b.x,
                b.y,
                b.z,
                c.x,
                c.y,
                c.z,
                p.fov.unwrap_or(default_fov)
            )
        })
        .collect()
}

/// Loads poses from a file. Only the plain-text trajectory format is
/// supported; loaders for capture formats (e.g. COLMAP sparse models) would
/// dispatch here on the file name.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text)
}
