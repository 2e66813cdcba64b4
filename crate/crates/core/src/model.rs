//! The student: one feature field and MLP lattice per active cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deferred::{MlpArch, MlpLattice, MlpParams};
use crate::field::{Aggregation, FeatureField};
use crate::scene::{CellIndex, SceneLayout};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submodel {
    pub cell: CellIndex,
    pub field: FeatureField,
    pub lattice: MlpLattice,
}

impl Submodel {
    pub fn zeros_like(&self) -> Self {
        Submodel {
            cell: self.cell,
            field: self.field.zeros_like(),
            lattice: self.lattice.zeros_like(),
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.field.param_slices().into();
        out.extend(self.lattice.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.field.param_slices_mut().into();
        out.extend(self.lattice.param_slices_mut());
        out
    }
}

/// Shapes and initialization of a fresh student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Triplane resolution.
    pub r: usize,
    /// Voxel grid resolution.
    pub l: usize,
    /// MLP lattice vertices per axis.
    pub p: usize,
    pub aggregation: Aggregation,
    pub exposure: bool,
    pub init_std: f64,
    /// Added to the density preactivation of every voxel at init.
    pub density_bias: f64,
    /// Bias of the MLP output layer at init; sets the starting residual.
    pub output_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            r: 128,
            l: 32,
            p: 5,
            aggregation: Aggregation::Gated,
            exposure: false,
            init_std: 0.05,
            density_bias: -2.0,
            output_bias: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Student {
    pub layout: SceneLayout,
    /// One per active cell, in the layout's order.
    pub submodels: Vec<Submodel>,
}

impl Student {
    pub fn new<R: Rng>(layout: SceneLayout, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.r < 2 || cfg.l < 2 || cfg.p < 1 {
            return Err(Error::Config("R and L must be at least 2 and P at least 1".into()));
        }
        if layout.active.is_empty() {
            return Err(Error::NoActiveSubmodel);
        }
        let arch = MlpArch::new(cfg.exposure);
        let submodels = layout
            .active
            .iter()
            .map(|&cell| {
                let field = FeatureField::random(cfg.r, cfg.l, cfg.aggregation, cfg.init_std, cfg.density_bias, rng);
                let theta = MlpParams::random(&arch, cfg.output_bias, rng);
                Submodel {
                    cell,
                    field,
                    lattice: MlpLattice::uniform(cfg.p, arch, theta),
                }
            })
            .collect();
        Ok(Student { layout, submodels })
    }

    /// All-zero parameters with the shapes of `cfg`.
    pub fn zeros(layout: SceneLayout, cfg: &ModelConfig) -> Self {
        let arch = MlpArch::new(cfg.exposure);
        let submodels = layout
            .active
            .iter()
            .map(|&cell| Submodel {
                cell,
                field: FeatureField::zeros(cfg.r, cfg.l, cfg.aggregation),
                lattice: MlpLattice::uniform(cfg.p, arch, MlpParams::zeros(&arch)),
            })
            .collect();
        Student { layout, submodels }
    }

    pub fn arch(&self) -> MlpArch {
        self.submodels[0].lattice.arch
    }

    pub fn index_of(&self, cell: CellIndex) -> Result<usize> {
        self.layout.active_position(cell).ok_or(Error::InactiveSubmodel(cell))
    }

    pub fn submodel(&self, cell: CellIndex) -> Result<&Submodel> {
        Ok(&self.submodels[self.index_of(cell)?])
    }

    pub fn zeros_like(&self) -> Self {
        Student {
            layout: self.layout.clone(),
            submodels: self.submodels.iter().map(Submodel::zeros_like).collect(),
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.submodels.iter().flat_map(Submodel::param_slices).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.submodels.iter_mut().flat_map(Submodel::param_slices_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(0.0);
        }
    }

    /// `self += other`, slice by slice.
    pub fn add_assign(&mut self, other: &Student) {
        for (a, b) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}
