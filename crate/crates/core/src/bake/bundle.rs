//! Baked bundles: quantized triplanes, a block-sparse voxel atlas, the
//! distance grid and the MLP lattice, stored as gzip blobs next to a JSON
//! manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::distance::DistanceGrid;
use super::occupancy::OccupancyGrid;
use super::quantize::QuantRange;
use crate::deferred::{MlpArch, MlpLattice, MlpParams};
use crate::field::{Aggregation, FeatureField, TriplaneSet, VoxelGrid, CHANNELS};
use crate::scene::{CellIndex, SceneLayout};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
/// Edge of an atlas block in voxels.
pub const BLOCK: usize = 16;
/// Indirection entry of a block with no stored data.
pub const EMPTY_BLOCK: u32 = u32::MAX;

pub const MANIFEST: &str = "manifest.json";
pub const PLANE_FILES: [&str; 3] = ["plane_x.bin.gz", "plane_y.bin.gz", "plane_z.bin.gz"];
pub const ATLAS_FILE: &str = "grid_atlas.bin.gz";
pub const INDIRECTION_FILE: &str = "grid_indirection.bin.gz";
pub const DISTANCE_FILE: &str = "distance.bin.gz";
pub const LATTICE_FILE: &str = "mlp_lattice.bin.gz";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub layout: SceneLayout,
    pub k: u32,
    pub cell: CellIndex,
    pub p: usize,
    pub r: usize,
    pub l: usize,
    pub block_size: usize,
    pub atlas_blocks: usize,
    /// One range per feature channel, shared by planes and voxels.
    pub quantization: Vec<QuantRange>,
    pub exposure: bool,
    pub aggregation: Aggregation,
    pub mlp_params_per_vertex: usize,
}

impl BundleManifest {
    pub fn blocks_per_axis(&self) -> usize {
        self.l / self.block_size
    }

    fn expected_len(&self, file: &str) -> usize {
        match file {
            ATLAS_FILE => self.atlas_blocks * self.block_size.pow(3) * CHANNELS,
            INDIRECTION_FILE => self.blocks_per_axis().pow(3) * 4,
            DISTANCE_FILE => self.l.pow(3),
            LATTICE_FILE => self.p.pow(3) * self.mlp_params_per_vertex * 4,
            _ => self.r * self.r * CHANNELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BakedBundle {
    pub manifest: BundleManifest,
    /// Row-major `R x R` texels, 8 channels interleaved.
    pub planes: [Vec<u8>; 3],
    /// Stored blocks, each `BLOCK^3` voxels (x-major) with 8 channels.
    pub atlas: Vec<u8>,
    /// `(L / BLOCK)^3` slot ids, x-major.
    pub indirection: Vec<u32>,
    pub distance: Vec<u8>,
    /// Vertex-major, layer-major parameters.
    pub mlp_lattice: Vec<f32>,
}

/// Block edge for a grid of resolution `l`.
pub fn block_size(l: usize) -> usize {
    if l % BLOCK == 0 {
        BLOCK
    } else {
        l
    }
}

/// Voxels within Chebyshev distance 1 of an occupied voxel: the support of
/// every trilinear lookup made from inside an occupied voxel.
pub fn dilate(occ: &OccupancyGrid) -> OccupancyGrid {
    let n = occ.resolution;
    let mut out = OccupancyGrid::empty(n);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if !occ.get(x, y, z) {
                    continue;
                }
                for a in x.saturating_sub(1)..=(x + 1).min(n - 1) {
                    for b in y.saturating_sub(1)..=(y + 1).min(n - 1) {
                        for c in z.saturating_sub(1)..=(z + 1).min(n - 1) {
                            out.set(a, b, c, true);
                        }
                    }
                }
            }
        }
    }
    out
}

impl BakedBundle {
    /// Quantizes a field into a bundle. `occupancy` is at the voxel grid
    /// resolution and decides which atlas blocks are stored.
    pub fn build(
        layout: &SceneLayout,
        cell: CellIndex,
        field: &FeatureField,
        lattice: &MlpLattice,
        occupancy: &OccupancyGrid,
        distance: &DistanceGrid,
        ranges: &[QuantRange; CHANNELS],
    ) -> Result<Self> {
        let l = field.grid.resolution;
        if occupancy.resolution != l || distance.resolution != l {
            return Err(Error::Format("occupancy and distance grids must match the voxel grid".into()));
        }
        let bs = block_size(l);
        let nb = l / bs;
        let q = |x: f64, c: usize| ranges[c].quantize(x);
        let planes =
            [0, 1, 2].map(|i| field.planes.planes[i].iter().enumerate().map(|(j, &x)| q(x, j % CHANNELS)).collect());

        let keep = dilate(occupancy);
        let mut indirection = vec![EMPTY_BLOCK; nb * nb * nb];
        let mut atlas = Vec::new();
        let mut slots = 0u32;
        for bx in 0..nb {
            for by in 0..nb {
                for bz in 0..nb {
                    let voxels = || {
                        (0..bs).flat_map(move |i| {
                            (0..bs).flat_map(move |j| (0..bs).map(move |k| (bx * bs + i, by * bs + j, bz * bs + k)))
                        })
                    };
                    if !voxels().any(|(x, y, z)| keep.get(x, y, z)) {
                        continue;
                    }
                    indirection[(bx * nb + by) * nb + bz] = slots;
                    slots += 1;
                    for (x, y, z) in voxels() {
                        let at = ((x * l + y) * l + z) * CHANNELS;
                        atlas.extend(field.grid.data[at..at + CHANNELS].iter().enumerate().map(|(c, &v)| q(v, c)));
                    }
                }
            }
        }

        let arch = lattice.arch;
        let manifest = BundleManifest {
            format_version: FORMAT_VERSION,
            layout: layout.clone(),
            k: layout.k,
            cell,
            p: lattice.p,
            r: field.planes.resolution,
            l,
            block_size: bs,
            atlas_blocks: slots as usize,
            quantization: ranges.to_vec(),
            exposure: arch.exposure,
            aggregation: field.aggregation,
            mlp_params_per_vertex: arch.param_count(),
        };
        Ok(BakedBundle {
            manifest,
            planes,
            atlas,
            indirection,
            distance: distance.data.clone(),
            mlp_lattice: lattice.vertices.iter().flat_map(|v| v.values.iter().map(|&x| x as f32)).collect(),
        })
    }

    pub fn distance_grid(&self) -> DistanceGrid {
        DistanceGrid {
            resolution: self.manifest.l,
            data: self.distance.clone(),
        }
    }

    /// The dequantized field. Voxels in blocks that were not stored take the
    /// lowest code; the marcher never reads them.
    pub fn dequantized_field(&self) -> FeatureField {
        let m = &self.manifest;
        let deq = |q: u8, c: usize| m.quantization[c].dequantize(q);
        let planes = [0, 1, 2].map(|i| self.planes[i].iter().enumerate().map(|(j, &q)| deq(q, j % CHANNELS)).collect());
        let (l, bs) = (m.l, m.block_size);
        let nb = l / bs;
        let mut grid = vec![0.0; l * l * l * CHANNELS];
        for (j, g) in grid.iter_mut().enumerate() {
            *g = deq(0, j % CHANNELS);
        }
        for bx in 0..nb {
            for by in 0..nb {
                for bz in 0..nb {
                    let slot = self.indirection[(bx * nb + by) * nb + bz];
                    if slot == EMPTY_BLOCK {
                        continue;
                    }
                    let base = slot as usize * bs.pow(3) * CHANNELS;
                    let mut v = 0;
                    for i in 0..bs {
                        for j in 0..bs {
                            for k in 0..bs {
                                let (x, y, z) = (bx * bs + i, by * bs + j, bz * bs + k);
                                let at = ((x * l + y) * l + z) * CHANNELS;
                                for c in 0..CHANNELS {
                                    grid[at + c] = deq(self.atlas[base + v * CHANNELS + c], c);
                                }
                                v += 1;
                            }
                        }
                    }
                }
            }
        }
        FeatureField {
            aggregation: m.aggregation,
            planes: TriplaneSet {
                resolution: m.r,
                planes,
            },
            grid: VoxelGrid {
                resolution: l,
                data: grid,
            },
        }
    }

    pub fn lattice(&self) -> MlpLattice {
        let m = &self.manifest;
        let arch = MlpArch::new(m.exposure);
        let vertices = self
            .mlp_lattice
            .chunks(m.mlp_params_per_vertex)
            .map(|c| MlpParams {
                values: c.iter().map(|&x| x as f64).collect(),
            })
            .collect();
        MlpLattice { p: m.p, arch, vertices }
    }

    /// Gzip-compressed payloads and the manifest, keyed by file name.
    pub fn to_files(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut files = BTreeMap::new();
        files.insert(MANIFEST.to_string(), serde_json::to_vec_pretty(&self.manifest)?);
        for (name, plane) in PLANE_FILES.iter().zip(&self.planes) {
            files.insert(name.to_string(), gzip(plane));
        }
        files.insert(ATLAS_FILE.to_string(), gzip(&self.atlas));
        let ind: Vec<u8> = self.indirection.iter().flat_map(|v| v.to_le_bytes()).collect();
        files.insert(INDIRECTION_FILE.to_string(), gzip(&ind));
        files.insert(DISTANCE_FILE.to_string(), gzip(&self.distance));
        let lat: Vec<u8> = self.mlp_lattice.iter().flat_map(|v| v.to_le_bytes()).collect();
        files.insert(LATTICE_FILE.to_string(), gzip(&lat));
        Ok(files)
    }

    pub fn from_files(files: &BTreeMap<String, Vec<u8>>) -> Result<Self> {
        let get = |name: &str| files.get(name).ok_or_else(|| Error::Format(format!("missing {name}")));
        let manifest: BundleManifest = serde_json::from_slice(get(MANIFEST)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.block_size == 0
            || manifest.l % manifest.block_size != 0
            || manifest.quantization.len() != CHANNELS
            || manifest.mlp_params_per_vertex != MlpArch::new(manifest.exposure).param_count()
        {
            return Err(Error::Format("inconsistent manifest".into()));
        }
        let payload = |name: &str| -> Result<Vec<u8>> {
            let bytes = gunzip(get(name)?).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            let want = manifest.expected_len(name);
            if bytes.len() != want {
                return Err(Error::Format(format!("{name}: {} bytes, expected {want}", bytes.len())));
            }
            Ok(bytes)
        };
        let planes = [payload(PLANE_FILES[0])?, payload(PLANE_FILES[1])?, payload(PLANE_FILES[2])?];
        let atlas = payload(ATLAS_FILE)?;
        let indirection: Vec<u32> = payload(INDIRECTION_FILE)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if indirection
            .iter()
            .any(|&s| s != EMPTY_BLOCK && s as usize >= manifest.atlas_blocks)
        {
            return Err(Error::Format("indirection entry out of range".into()));
        }
        let distance = payload(DISTANCE_FILE)?;
        let mlp_lattice = payload(LATTICE_FILE)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(BakedBundle {
            manifest,
            planes,
            atlas,
            indirection,
            distance,
            mlp_lattice,
        })
    }

    /// Writes every file of the bundle into `dir`, each atomically.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.to_files()? {
            write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        let names = [MANIFEST, ATLAS_FILE, INDIRECTION_FILE, DISTANCE_FILE, LATTICE_FILE]
            .into_iter()
            .chain(PLANE_FILES);
        for name in names {
            let path = dir.join(name);
            files.insert(name.to_string(), fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
        Self::from_files(&files)
    }
}

/// Root listing of a baked scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format_version: u32,
    pub layout: SceneLayout,
    pub submodels: Vec<SubmodelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmodelEntry {
    pub cell: CellIndex,
    /// Directory name under `submodels/`.
    pub slug: String,
}

impl SceneManifest {
    pub fn new(layout: &SceneLayout) -> Self {
        SceneManifest {
            format_version: FORMAT_VERSION,
            layout: layout.clone(),
            submodels: layout
                .active
                .iter()
                .map(|&cell| SubmodelEntry { cell, slug: cell.slug() })
                .collect(),
        }
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_atomic(&root.join(SCENE_FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(SCENE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn submodel_dir(root: &Path, cell: CellIndex) -> std::path::PathBuf {
        root.join("submodels").join(cell.slug())
    }
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("writing to memory");
    enc.finish().expect("writing to memory")
}

fn gunzip(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
