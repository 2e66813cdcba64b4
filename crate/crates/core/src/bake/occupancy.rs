//! Binary occupancy grids over contracted space: extraction from a trained
//! field, 27-neighborhood majority filtering and max downsampling.

use bitvec::vec::BitVec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::field::FeatureField;
use crate::render::ray_extent;
use crate::scene::{Camera, CellIndex, SceneLayout};
use crate::train::batch::{jitter_ray, Jitter};
use crate::{Error, Result, Vec3};

/// Cubic bit grid over `[-2, 2]^3`, x-major (`(x * n + y) * n + z`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    bits: BitVec,
}

impl OccupancyGrid {
    pub fn empty(resolution: usize) -> Self {
        OccupancyGrid {
            resolution,
            bits: BitVec::repeat(false, resolution.pow(3)),
        }
    }

    pub fn full(resolution: usize) -> Self {
        OccupancyGrid {
            resolution,
            bits: BitVec::repeat(true, resolution.pow(3)),
        }
    }

    pub fn from_fn(resolution: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut g = Self::empty(resolution);
        for x in 0..resolution {
            for y in 0..resolution {
                for z in 0..resolution {
                    if f(x, y, z) {
                        g.set(x, y, z, true);
                    }
                }
            }
        }
        g
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.bits.set(i, v);
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.not_any()
    }

    /// Voxel containing a contracted point.
    pub fn voxel_of(&self, p: Vec3) -> [usize; 3] {
        let n = self.resolution;
        let idx = |x: f64| (((x + 2.0) * 0.25 * n as f64).floor().max(0.0) as usize).min(n - 1);
        [idx(p.x), idx(p.y), idx(p.z)]
    }
}

/// Criteria and ray selection for [`extract_occupancy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyOptions {
    /// Per-step opacity `1 - exp(-sigma * dt)` must exceed this.
    pub alpha_threshold: f64,
    /// Compositing weight must exceed this.
    pub weight_threshold: f64,
    /// Cameras within this distance of the cell center are used.
    pub camera_radius: f64,
    /// Every `subsample`-th pixel along each image axis.
    pub subsample: u32,
    pub jitter: Jitter,
    pub seed: u64,
    /// Resolution of the extracted grid; `None` uses the triplane resolution
    /// R. Must divide R. Lower values suit sparse ray sets, where the rays
    /// reaching a surface are further apart than one voxel at R and the
    /// majority filter would erode the marked shell.
    pub resolution: Option<usize>,
}

impl Default for OccupancyOptions {
    fn default() -> Self {
        OccupancyOptions {
            alpha_threshold: 0.005,
            weight_threshold: 5e-3,
            camera_radius: 1.5,
            subsample: 2,
            jitter: Jitter {
                origin_std: 0.0,
                cap_epsilon: 0.0,
            },
            seed: 0,
            resolution: None,
        }
    }
}

/// Training cameras near `cell`; all cameras when none are close.
pub fn select_cameras<'a>(cameras: &'a [Camera], layout: &SceneLayout, cell: CellIndex, radius: f64) -> Vec<&'a Camera> {
    let center = layout.cell_center(cell);
    let near: Vec<&Camera> = cameras.iter().filter(|c| (c.position - center).norm() <= radius).collect();
    if near.is_empty() {
        log::warn!("no cameras within {radius} of submodel {cell}; using all {}", cameras.len());
        cameras.iter().collect()
    } else {
        near
    }
}

/// Marks voxels (at `opts.resolution`, default R) in which some sample of
/// a training ray is both locally opaque and visible.
pub fn extract_occupancy(
    field: &FeatureField,
    cameras: &[Camera],
    layout: &SceneLayout,
    cell: CellIndex,
    opts: &OccupancyOptions,
) -> Result<OccupancyGrid> {
    if cameras.is_empty() {
        return Err(Error::NoCameras);
    }
    if !layout.is_active(cell) {
        return Err(Error::InactiveSubmodel(cell));
    }
    let res = field.planes.resolution;
    let n = opts.resolution.unwrap_or(res);
    if n == 0 || res % n != 0 {
        return Err(Error::Config(format!("occupancy resolution {n} does not divide R = {res}")));
    }
    let mut grid = OccupancyGrid::empty(n);
    let dt = 4.0 / res as f64 / (2.0 * layout.contraction_prescale);
    let step = opts.subsample.max(1);
    for (ci, cam) in select_cameras(cameras, layout, cell, opts.camera_radius).into_iter().enumerate() {
        for row in (0..cam.height).step_by(step as usize) {
            for col in (0..cam.width).step_by(step as usize) {
                // Seeded per pixel so that coarser subsampling picks a subset
                // of the same jittered rays.
                let key = opts.seed ^ ((ci as u64) << 40) ^ ((row as u64) << 20) ^ col as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                let ray = jitter_ray(&cam.ray(row, col), &opts.jitter, &mut rng);
                let Some((t0, t1)) = ray_extent(&ray, layout.scene_bound()) else { continue };
                let mut trans = 1.0;
                let mut t = t0 + 0.5 * dt;
                while t < t1 && trans > opts.weight_threshold {
                    let p = layout.to_contracted(ray.at(t), cell);
                    let sigma = field.query(p).sample.sigma;
                    let alpha = -(-sigma * dt).exp_m1();
                    if alpha > opts.alpha_threshold && trans * alpha > opts.weight_threshold {
                        let [x, y, z] = grid.voxel_of(p);
                        grid.set(x, y, z, true);
                    }
                    trans *= 1.0 - alpha;
                    t += dt;
                }
            }
        }
    }
    Ok(grid)
}

/// Majority vote over each voxel's 3x3x3 neighborhood, clipped at the grid
/// boundary; ties become empty.
pub fn median_filter_27(grid: &OccupancyGrid) -> OccupancyGrid {
    let n = grid.resolution;
    let idx = |x: usize, y: usize, z: usize| (x * n + y) * n + z;
    let mut counts: Vec<u8> = (0..n * n * n).map(|i| grid.bits[i] as u8).collect();
    // Separable box sums along z, y and x.
    for axis in 0..3 {
        let mut next = vec![0u8; counts.len()];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let at = |k: usize| match axis {
                        0 => idx(a, b, k),
                        1 => idx(a, k, c),
                        _ => idx(k, a, b),
                    };
                    let k = match axis {
                        0 => c,
                        1 => b,
                        _ => c,
                    };
                    let here = match axis {
                        0 => idx(a, b, c),
                        1 => idx(a, b, c),
                        _ => idx(c, a, b),
                    };
                    let lo = k.saturating_sub(1);
                    let hi = (k + 1).min(n - 1);
                    next[here] = (lo..=hi).map(|j| counts[at(j)]).sum();
                }
            }
        }
        counts = next;
    }
    let span = |k: usize| 1 + usize::from(k > 0) + usize::from(k + 1 < n);
    let mut out = OccupancyGrid::empty(n);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let available = span(x) * span(y) * span(z);
                if 2 * counts[idx(x, y, z)] as usize > available {
                    out.set(x, y, z, true);
                }
            }
        }
    }
    out
}

/// Block-wise OR down to `target` voxels per axis.
pub fn downsample_max(grid: &OccupancyGrid, target: usize) -> Result<OccupancyGrid> {
    let n = grid.resolution;
    if target == 0 || n % target != 0 {
        return Err(Error::Config(format!("downsample target {target} must divide {n}")));
    }
    let f = n / target;
    let mut out = OccupancyGrid::empty(target);
    for i in grid.bits.iter_ones() {
        let (x, y, z) = (i / (n * n), i / n % n, i % n);
        out.set(x / f, y / f, z / f, true);
    }
    Ok(out)
}
