//! Chebyshev distance grids: per-voxel distance to the nearest occupied
//! voxel, used by the marcher to skip empty space.

use super::occupancy::OccupancyGrid;

/// `L^3` bytes; 0 exactly at occupied voxels, otherwise the Chebyshev
/// distance to the nearest occupied voxel clamped to `min(L, 255)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceGrid {
    pub resolution: usize,
    pub data: Vec<u8>,
}

impl DistanceGrid {
    #[inline]
    pub fn get(&self, v: [usize; 3]) -> u8 {
        let n = self.resolution;
        self.data[(v[0] * n + v[1]) * n + v[2]]
    }

    /// Largest value the grid can hold: a voxel with this distance has no
    /// occupied voxel anywhere in the grid.
    pub fn cap(resolution: usize) -> u8 {
        resolution.min(255) as u8
    }
}

/// Exact transform by a forward and a backward raster sweep over the 26
/// neighbors. For the chessboard metric every shortest path is a chain of
/// unit 26-neighbor steps, which the two sweeps propagate exactly.
pub fn build_distance_grid(occ: &OccupancyGrid) -> DistanceGrid {
    let n = occ.resolution;
    let cap = DistanceGrid::cap(n) as u16;
    let idx = |x: usize, y: usize, z: usize| (x * n + y) * n + z;
    let mut d: Vec<u16> = (0..n * n * n)
        .map(|i| if occ.get(i / (n * n), i / n % n, i % n) { 0 } else { cap })
        .collect();
    let ni = n as isize;
    let relax = |d: &mut Vec<u16>, x: usize, y: usize, z: usize, forward: bool| {
        let here = idx(x, y, z);
        let mut best = d[here];
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    // Neighbors already visited in this sweep direction.
                    let before = (dx, dy, dz) < (0, 0, 0);
                    if (dx, dy, dz) == (0, 0, 0) || before != forward {
                        continue;
                    }
                    let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if a < 0 || b < 0 || c < 0 || a >= ni || b >= ni || c >= ni {
                        continue;
                    }
                    best = best.min(d[idx(a as usize, b as usize, c as usize)] + 1);
                }
            }
        }
        d[here] = best.min(cap);
    };
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                relax(&mut d, x, y, z, true);
            }
        }
    }
    for x in (0..n).rev() {
        for y in (0..n).rev() {
            for z in (0..n).rev() {
                relax(&mut d, x, y, z, false);
            }
        }
    }
    DistanceGrid {
        resolution: n,
        data: d.into_iter().map(|v| v as u8).collect(),
    }
}
