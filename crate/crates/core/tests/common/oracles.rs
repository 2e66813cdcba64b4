//! Brute-force references for the baking stages.

use rand::Rng;
use tilefield_core::bake::{DistanceGrid, OccupancyGrid};

/// Sparse random grid: a few solid boxes plus scattered single voxels, or
/// (with small probability) an empty or full grid.
pub fn random_occupancy<R: Rng>(n: usize, rng: &mut R) -> OccupancyGrid {
    match rng.random_range(0..20) {
        0 => return OccupancyGrid::empty(n),
        1 => return OccupancyGrid::full(n),
        _ => {}
    }
    let mut g = OccupancyGrid::empty(n);
    for _ in 0..rng.random_range(0..4) {
        let lo: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..n));
        let size: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=n / 3 + 1));
        for x in lo[0]..(lo[0] + size[0]).min(n) {
            for y in lo[1]..(lo[1] + size[1]).min(n) {
                for z in lo[2]..(lo[2] + size[2]).min(n) {
                    g.set(x, y, z, true);
                }
            }
        }
    }
    let p = rng.random_range(0.0..0.05);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if rng.random_bool(p) {
                    g.set(x, y, z, true);
                }
            }
        }
    }
    g
}

fn cells(n: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..n).flat_map(move |x| (0..n).flat_map(move |y| (0..n).map(move |z| [x, y, z])))
}

/// Direct count over the clipped 3x3x3 neighborhood.
pub fn median_reference(g: &OccupancyGrid) -> OccupancyGrid {
    let n = g.resolution as isize;
    OccupancyGrid::from_fn(g.resolution, |x, y, z| {
        let (mut on, mut total) = (0, 0);
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if [a, b, c].iter().all(|&v| (0..n).contains(&v)) {
                        total += 1;
                        on += g.get(a as usize, b as usize, c as usize) as usize;
                    }
                }
            }
        }
        2 * on > total
    })
}

pub fn downsample_reference(g: &OccupancyGrid, target: usize) -> OccupancyGrid {
    let f = g.resolution / target;
    OccupancyGrid::from_fn(target, |x, y, z| {
        cells(f).any(|[i, j, k]| g.get(x * f + i, y * f + j, z * f + k))
    })
}

/// Chebyshev distance to the nearest occupied voxel, capped. Sparse grids
/// scan the list of occupied voxels; dense grids grow a cube around each
/// voxel until it contains one.
pub fn distance_reference(g: &OccupancyGrid) -> DistanceGrid {
    let n = g.resolution;
    let cap = DistanceGrid::cap(n) as usize;
    let occupied: Vec<[usize; 3]> = cells(n).filter(|&[x, y, z]| g.get(x, y, z)).collect();
    let dense = occupied.len() * 64 > n * n * n;
    let data = cells(n)
        .map(|v| {
            let d = if dense {
                shell_search(g, v)
            } else {
                occupied.iter().map(|o| (0..3).map(|a| v[a].abs_diff(o[a])).max().unwrap()).min()
            };
            d.unwrap_or(cap).min(cap) as u8
        })
        .collect();
    DistanceGrid { resolution: n, data }
}

fn shell_search(g: &OccupancyGrid, v: [usize; 3]) -> Option<usize> {
    let n = g.resolution;
    (0..n).find(|&r| {
        let lo = v.map(|c| c.saturating_sub(r));
        let hi = v.map(|c| (c + r).min(n - 1));
        (lo[0]..=hi[0]).any(|x| (lo[1]..=hi[1]).any(|y| (lo[2]..=hi[2]).any(|z| g.get(x, y, z))))
    })
}
