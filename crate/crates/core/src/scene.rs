//! Scene normalization, the contraction function and camera-to-submodel
//! assignment.
//!
//! Normalized scene space places every training camera inside the cube
//! `[-K/2, K/2]^3`, which is split into `K^3` unit cells. A submodel's local
//! frame maps its cell onto `[-1, 1]^3`; points are then pre-scaled and
//! contracted into `[-2, 2]^3` before the feature grids are queried.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::math::{self, Vec3};
use crate::{Error, Result};

/// Pre-scale applied before contraction when the scene has a single cell.
pub const SINGLE_CELL_PRESCALE: f64 = 2.5;
/// Pre-scale applied before contraction for tiled scenes.
pub const TILED_PRESCALE: f64 = 0.8;
/// Centers closer than this (normalized units) to a ray origin count as neighbors.
pub const NEIGHBOR_RADIUS: f64 = 2.0;

/// Integer coordinates `(u, v, w)` of a cell in the `K^3` partition.
///
/// Ordering is lexicographic, which is also the tie-break order used by
/// [`SceneLayout::assign_submodel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex(pub [u32; 3]);

impl CellIndex {
    pub fn new(u: u32, v: u32, w: u32) -> Self {
        CellIndex([u, v, w])
    }

    /// Directory-safe form used by the bundle layout and the HTTP routes.
    pub fn slug(&self) -> String {
        format!("{}_{}_{}", self.0[0], self.0[1], self.0[2])
    }

    pub fn parse_slug(s: &str) -> Option<Self> {
        let mut it = s.split('_').map(|p| p.parse::<u32>().ok());
        let c = CellIndex([it.next()??, it.next()??, it.next()??]);
        if it.next().is_some() {
            return None;
        }
        Some(c)
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.0[0], self.0[1], self.0[2])
    }
}

/// A ray in normalized scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    /// Log-domain exposure, `ln(ISO * shutter / 1000)`.
    pub exposure: Option<f64>,
    pub pixel: Option<(u32, u32)>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalized(),
            exposure: None,
            pixel: None,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole camera. Poses in a scene config are in world units; the trainer and
/// renderers work with cameras already mapped into normalized space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
    pub right: Vec3,
    pub vfov_deg: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub exposure: Option<f64>,
}

impl Camera {
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up_hint: Vec3,
        vfov_deg: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - position).normalized();
        let mut right = forward.cross(up_hint);
        if right.norm() < 1e-9 {
            right = math::orthogonal(forward);
        }
        let right = right.normalized();
        let up = right.cross(forward);
        Camera {
            position,
            forward,
            up,
            right,
            vfov_deg,
            width,
            height,
            exposure: None,
        }
    }

    /// Ray through the center of pixel `(row, col)`.
    pub fn ray(&self, row: u32, col: u32) -> Ray {
        let tan = (self.vfov_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tan * aspect;
        let sy = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * tan;
        let dir = (self.forward + self.right * sx + self.up * sy).normalized();
        Ray {
            origin: self.position,
            direction: dir,
            exposure: self.exposure,
            pixel: Some((row, col)),
        }
    }

    pub fn with_resolution(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }
}

/// Per-coordinate contraction of `R^3` into `[-2, 2]^3`; identity on the unit
/// infinity-ball.
pub fn contract(x: Vec3) -> Vec3 {
    let m = x.max_abs();
    if m <= 1.0 {
        return x;
    }
    x.map(|xd| {
        if xd.abs() == m {
            (2.0 - 1.0 / m) * xd.signum()
        } else {
            xd / m
        }
    })
}

/// Chebyshev distance from `p` to the closed box `[lo, hi]`.
fn box_distance_inf(p: Vec3, lo: Vec3, hi: Vec3) -> f64 {
    (0..3)
        .map(|a| (lo[a] - p[a]).max(p[a] - hi[a]).max(0.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    /// Cells per axis.
    pub k: u32,
    /// World-space point mapped to the normalized origin.
    pub world_center: Vec3,
    /// Uniform world-to-normalized scale.
    pub world_scale: f64,
    pub contraction_prescale: f64,
    /// Sorted lexicographically.
    pub active: Vec<CellIndex>,
}

/// Fits the training camera origins into `[-K/2, K/2]^3` and activates every
/// cell that contains at least one camera.
pub fn normalize_cameras(origins: &[Vec3], k: u32) -> Result<SceneLayout> {
    if origins.is_empty() {
        return Err(Error::NoCameras);
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let (lo, hi) = origins.iter().fold(
        (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)),
        |(lo, hi), &p| (lo.min_elem(p), hi.max_elem(p)),
    );
    let center = (lo + hi) * 0.5;
    let longest = (hi - lo).max_abs();
    let scale = if longest > 0.0 { k as f64 / longest } else { 1.0 };
    let mut layout = SceneLayout {
        k,
        world_center: center,
        world_scale: scale,
        contraction_prescale: if k == 1 {
            SINGLE_CELL_PRESCALE
        } else {
            TILED_PRESCALE
        },
        active: Vec::new(),
    };
    let mut active: Vec<CellIndex> = origins
        .iter()
        .map(|&o| layout.cell_of(layout.world_to_normalized(o)))
        .collect();
    active.sort();
    active.dedup();
    layout.active = active;
    Ok(layout)
}

impl SceneLayout {
    /// A single-cell layout with the identity world transform.
    pub fn single_cell() -> Self {
        SceneLayout {
            k: 1,
            world_center: Vec3::ZERO,
            world_scale: 1.0,
            contraction_prescale: SINGLE_CELL_PRESCALE,
            active: vec![CellIndex::new(0, 0, 0)],
        }
    }

    pub fn half_extent(&self) -> f64 {
        self.k as f64 * 0.5
    }

    pub fn world_to_normalized(&self, x: Vec3) -> Vec3 {
        (x - self.world_center) * self.world_scale
    }

    pub fn normalized_to_world(&self, x: Vec3) -> Vec3 {
        x / self.world_scale + self.world_center
    }

    pub fn camera_to_normalized(&self, cam: &Camera) -> Camera {
        Camera {
            position: self.world_to_normalized(cam.position),
            ..*cam
        }
    }

    /// Lowest-index cell whose closed box contains `p`; points outside the
    /// partition cube are clamped into the nearest cell.
    pub fn cell_of(&self, p: Vec3) -> CellIndex {
        let h = self.half_extent();
        let idx = |c: f64| -> u32 {
            let i = (c + h).ceil() - 1.0;
            i.clamp(0.0, (self.k - 1) as f64) as u32
        };
        CellIndex([idx(p.x), idx(p.y), idx(p.z)])
    }

    pub fn cell_bounds(&self, c: CellIndex) -> (Vec3, Vec3) {
        let h = self.half_extent();
        let lo = Vec3::new(
            c.0[0] as f64 - h,
            c.0[1] as f64 - h,
            c.0[2] as f64 - h,
        );
        (lo, lo + Vec3::splat(1.0))
    }

    pub fn cell_center(&self, c: CellIndex) -> Vec3 {
        let (lo, hi) = self.cell_bounds(c);
        (lo + hi) * 0.5
    }

    pub fn is_active(&self, c: CellIndex) -> bool {
        self.active.binary_search(&c).is_ok()
    }

    pub fn active_position(&self, c: CellIndex) -> Option<usize> {
        self.active.binary_search(&c).ok()
    }

    /// Nearest active cell in the Chebyshev sense, with distance.
    pub fn assign_submodel_with_distance(&self, origin: Vec3) -> Result<(CellIndex, f64)> {
        let mut best: Option<(CellIndex, f64)> = None;
        for &c in &self.active {
            let (lo, hi) = self.cell_bounds(c);
            let d = box_distance_inf(origin, lo, hi);
            // `active` is sorted, so strict comparison keeps the lowest index on ties.
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        best.ok_or(Error::NoActiveSubmodel)
    }

    pub fn assign_submodel(&self, origin: Vec3) -> Result<CellIndex> {
        self.assign_submodel_with_distance(origin).map(|(c, _)| c)
    }

    /// Maps the cell of `k` onto `[-1, 1]^3`.
    pub fn world_to_submodel(&self, x: Vec3, k: CellIndex) -> Result<Vec3> {
        if !self.is_active(k) {
            return Err(Error::InactiveSubmodel(k));
        }
        Ok(self.to_local(x, k))
    }

    /// Unchecked form of [`Self::world_to_submodel`].
    #[inline]
    pub fn to_local(&self, x: Vec3, k: CellIndex) -> Vec3 {
        (x - self.cell_center(k)) * 2.0
    }

    /// Position of `x` in the contracted space of submodel `k`.
    #[inline]
    pub fn to_contracted(&self, x: Vec3, k: CellIndex) -> Vec3 {
        contract(self.to_local(x, k) * self.contraction_prescale)
    }

    /// Active cells other than `home` whose centers lie within
    /// [`NEIGHBOR_RADIUS`] of `origin`.
    pub fn neighbors(&self, origin: Vec3, home: CellIndex) -> Vec<CellIndex> {
        self.active
            .iter()
            .copied()
            .filter(|&c| c != home && (self.cell_center(c) - origin).norm() < NEIGHBOR_RADIUS)
            .collect()
    }

    /// Chebyshev distance from `p` to the closed cell `c`.
    pub fn cell_distance(&self, p: Vec3, c: CellIndex) -> f64 {
        let (lo, hi) = self.cell_bounds(c);
        box_distance_inf(p, lo, hi)
    }

    /// Signed Chebyshev depth of `p` inside cell `c` (negative outside).
    pub fn inward_margin(&self, p: Vec3, c: CellIndex) -> f64 {
        let (lo, hi) = self.cell_bounds(c);
        (0..3)
            .map(|a| (p[a] - lo[a]).min(hi[a] - p[a]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Extent of the region rays are integrated over: the partition cube plus
    /// a half-cell margin on every side.
    pub fn scene_bound(&self) -> f64 {
        self.half_extent() + 0.5
    }
}
