//! Baking: occupancy extraction, distance grids, quantization and the
//! on-disk bundle format, plus the marcher used to render baked scenes.

pub mod bundle;
pub mod distance;
pub mod occupancy;
pub mod quantize;

use std::collections::BTreeMap;
use std::path::Path;

use crate::deferred::{MlpLattice, MlpParams};
use crate::field::{FeatureField, FieldSample, CHANNELS};
use crate::model::{Student, Submodel};
use crate::render::{march_ray, MarchOptions, MarchSource, RayRenderer, EARLY_TERMINATION};
use crate::scene::{Camera, CellIndex, Ray, SceneLayout};
use crate::{Error, Result, Vec3};

pub use bundle::{BakedBundle, BundleManifest, SceneManifest};
pub use distance::{build_distance_grid, DistanceGrid};
pub use occupancy::{downsample_max, extract_occupancy, median_filter_27, OccupancyGrid, OccupancyOptions};
pub use quantize::{fit_ranges, QuantRange};

/// A field together with the distance grid that gates its evaluation.
#[derive(Debug, Clone)]
pub struct MarchField {
    pub field: FeatureField,
    pub distance: DistanceGrid,
}

impl MarchSource for MarchField {
    fn distance_resolution(&self) -> usize {
        self.distance.resolution
    }

    fn distance(&self, voxel: [usize; 3]) -> u8 {
        self.distance.get(voxel)
    }

    fn sample(&self, p: Vec3) -> FieldSample {
        self.field.query(p).sample
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BakeOptions {
    pub occupancy: OccupancyOptions,
    pub median_filter: bool,
    /// Clamp range for preactivations.
    pub quantization: QuantRange,
    /// Shrink each channel's range to the values the field actually holds.
    pub fit_ranges: bool,
}

impl Default for BakeOptions {
    fn default() -> Self {
        BakeOptions {
            occupancy: OccupancyOptions::default(),
            median_filter: true,
            quantization: QuantRange::default(),
            fit_ranges: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BakeStats {
    /// Occupied voxels at the extraction resolution before filtering.
    pub occupied_fine: usize,
    /// Occupied voxels at the voxel grid resolution.
    pub occupied: usize,
    pub atlas_blocks: usize,
    pub total_blocks: usize,
}

/// Occupancy at the voxel grid resolution: extracted, optionally majority
/// filtered, then max-downsampled to `L`. Extraction runs at
/// `opts.occupancy.resolution` when set and at `min(R, 2L)` otherwise, since
/// training rays are usually too sparse to cover a surface at `R` and the
/// filter then erodes it into holes.
pub fn occupancy_for(
    sm: &Submodel,
    cameras: &[Camera],
    layout: &SceneLayout,
    opts: &BakeOptions,
) -> Result<(OccupancyGrid, usize)> {
    let l = sm.field.grid.resolution;
    let mut occ_opts = opts.occupancy;
    occ_opts.resolution = Some(occ_opts.resolution.unwrap_or((2 * l).min(sm.field.planes.resolution)));
    let fine = extract_occupancy(&sm.field, cameras, layout, sm.cell, &occ_opts)?;
    let fine_count = fine.count();
    let fine = if opts.median_filter { median_filter_27(&fine) } else { fine };
    Ok((downsample_max(&fine, sm.field.grid.resolution)?, fine_count))
}

pub fn bake_submodel(
    sm: &Submodel,
    cameras: &[Camera],
    layout: &SceneLayout,
    opts: &BakeOptions,
) -> Result<(BakedBundle, BakeStats)> {
    let (occ, occupied_fine) = occupancy_for(sm, cameras, layout, opts)?;
    let distance = build_distance_grid(&occ);
    let ranges = if opts.fit_ranges {
        fit_ranges(&sm.field, opts.quantization)
    } else {
        [opts.quantization; CHANNELS]
    };
    let bundle = BakedBundle::build(layout, sm.cell, &sm.field, &sm.lattice, &occ, &distance, &ranges)?;
    let stats = BakeStats {
        occupied_fine,
        occupied: occ.count(),
        atlas_blocks: bundle.manifest.atlas_blocks,
        total_blocks: bundle.indirection.len(),
    };
    log::info!(
        "baked {}: {} occupied voxels, {}/{} blocks",
        sm.cell,
        stats.occupied,
        stats.atlas_blocks,
        stats.total_blocks
    );
    Ok((bundle, stats))
}

/// Bakes every submodel into `root/submodels/<slug>/` and writes
/// `root/scene.json` last, so a readable scene listing implies complete
/// submodel directories.
pub fn bake_scene(student: &Student, cameras: &[Camera], opts: &BakeOptions, root: &Path) -> Result<Vec<BakeStats>> {
    let mut stats = Vec::new();
    for sm in &student.submodels {
        let (bundle, s) = bake_submodel(sm, cameras, &student.layout, opts)?;
        bundle.write_dir(&SceneManifest::submodel_dir(root, sm.cell))?;
        stats.push(s);
    }
    SceneManifest::new(&student.layout).write(root)?;
    Ok(stats)
}

/// Marchable state of one submodel.
#[derive(Debug, Clone)]
pub struct MarchSubmodel {
    pub source: MarchField,
    pub lattice: MlpLattice,
    /// Triplane resolution, which sets the step size.
    pub resolution: usize,
}

impl MarchSubmodel {
    pub fn from_bundle(bundle: &BakedBundle) -> Self {
        MarchSubmodel {
            source: MarchField {
                field: bundle.dequantized_field(),
                distance: bundle.distance_grid(),
            },
            lattice: bundle.lattice(),
            resolution: bundle.manifest.r,
        }
    }

    /// The unquantized submodel marched through the same distance grid.
    pub fn float(sm: &Submodel, distance: DistanceGrid) -> Self {
        MarchSubmodel {
            source: MarchField {
                field: sm.field.clone(),
                distance,
            },
            lattice: sm.lattice.clone(),
            resolution: sm.field.planes.resolution,
        }
    }
}

/// Renders through [`march_ray`] with whatever submodels are loaded.
#[derive(Debug, Clone)]
pub struct MarchRenderer {
    pub layout: SceneLayout,
    pub submodels: BTreeMap<CellIndex, MarchSubmodel>,
    pub skip: bool,
    pub max_steps: usize,
}

impl MarchRenderer {
    pub fn new(layout: SceneLayout) -> Self {
        MarchRenderer {
            layout,
            submodels: BTreeMap::new(),
            skip: true,
            max_steps: 1 << 16,
        }
    }

    /// Loads every submodel listed in `root/scene.json`.
    pub fn load(root: &Path) -> Result<Self> {
        let scene = SceneManifest::read(root)?;
        let mut r = MarchRenderer::new(scene.layout);
        for entry in &scene.submodels {
            let bundle = BakedBundle::read_dir(&SceneManifest::submodel_dir(root, entry.cell))?;
            if bundle.manifest.cell != entry.cell || bundle.manifest.layout != r.layout {
                return Err(Error::Format(format!("bundle {} does not belong to this scene", entry.slug)));
            }
            r.insert(entry.cell, MarchSubmodel::from_bundle(&bundle));
        }
        Ok(r)
    }

    pub fn insert(&mut self, cell: CellIndex, sm: MarchSubmodel) {
        self.submodels.insert(cell, sm);
    }

    fn get(&self, cell: CellIndex) -> Result<&MarchSubmodel> {
        self.submodels.get(&cell).ok_or(Error::InactiveSubmodel(cell))
    }
}

impl RayRenderer for MarchRenderer {
    fn lattice(&self, cell: CellIndex) -> Result<&MlpLattice> {
        Ok(&self.get(cell)?.lattice)
    }

    fn render_ray(&self, ray: &Ray, cell: CellIndex, params: &MlpParams) -> Result<[f64; 3]> {
        let sm = self.get(cell)?;
        let opts = MarchOptions {
            resolution: sm.resolution,
            max_steps: self.max_steps,
            early_termination: EARLY_TERMINATION,
            skip: self.skip,
        };
        let (render, _) = march_ray(ray, &self.layout, cell, &sm.source, &sm.lattice.arch, params, &opts)?;
        Ok(render.rgb)
    }
}
