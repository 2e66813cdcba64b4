//! Trained student checkpoints: `checkpoint.json` with shapes, layout and
//! cameras, plus `params.bin` holding every parameter as little-endian f64
//! in [`Student::param_slices`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bake::bundle::write_atomic;
use crate::model::{ModelConfig, Student};
use crate::scene::{Camera, SceneLayout};
use crate::teacher::AnalyticScene;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const META_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub layout: SceneLayout,
    pub model: ModelConfig,
    pub steps: usize,
    pub param_count: usize,
    /// Training cameras in normalized space; baking selects from these.
    pub cameras: Vec<Camera>,
    pub heldout: Vec<Camera>,
    /// World-space teacher scene.
    pub scene: AnalyticScene,
    pub final_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub student: Student,
}

impl Checkpoint {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params: Vec<u8> = self
            .student
            .param_slices()
            .into_iter()
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write_atomic(&dir.join(PARAMS_FILE), &params)?;
        write_atomic(&dir.join(META_FILE), &serde_json::to_vec_pretty(&self.meta)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&text)?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {}", meta.format_version)));
        }
        let mut student = Student::zeros(meta.layout.clone(), &meta.model);
        if student.param_count() != meta.param_count {
            return Err(Error::Format("parameter count does not match the model shapes".into()));
        }
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != meta.param_count * 8 {
            return Err(Error::LengthMismatch {
                what: "checkpoint parameters",
                left: bytes.len() / 8,
                right: meta.param_count,
            });
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for slice in student.param_slices_mut() {
            for (x, v) in slice.iter_mut().zip(&mut values) {
                *x = v;
            }
        }
        Ok(Checkpoint { meta, student })
    }
}
