//! Ray jittering and batch construction.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::math::orthogonal;
use crate::scene::{Camera, CellIndex, Ray, SceneLayout};
use crate::teacher::{Teacher, TeacherResponse};
use crate::{Error, Result, Vec3};

/// Augmentation strengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Origin noise standard deviation in normalized units.
    pub origin_std: f64,
    /// Chord radius of the direction cap on the unit sphere.
    pub cap_epsilon: f64,
}

/// Uniform sample from `{v : |v| = 1, |v - d| < eps}`.
pub fn sample_cap<R: Rng>(d: Vec3, eps: f64, rng: &mut R) -> Vec3 {
    if eps <= 0.0 {
        return d;
    }
    // Chord length eps subtends the polar angle 2 asin(eps / 2).
    let cos_max = 1.0 - eps * eps / 2.0;
    let cos_t = rng.random_range(cos_max.max(-1.0)..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let u = orthogonal(d).normalized();
    let w = d.cross(u);
    (d * cos_t + u * (sin_t * phi.cos()) + w * (sin_t * phi.sin())).normalized()
}

/// Minimal rotation taking unit `from` onto unit `to`, applied to `v`.
pub fn rotate_between(v: Vec3, from: Vec3, to: Vec3) -> Vec3 {
    let axis = from.cross(to);
    let s = axis.norm();
    let c = from.dot(to);
    if s < 1e-15 {
        return if c > 0.0 { v } else { -v };
    }
    crate::math::rotate(v, axis / s, s.atan2(c))
}

/// Perturbs one ray: Gaussian origin noise and a uniform direction in the
/// cap around the original direction.
pub fn jitter_ray<R: Rng>(ray: &Ray, jitter: &Jitter, rng: &mut R) -> Ray {
    let mut out = *ray;
    out.origin = ray.origin + gaussian3(jitter.origin_std, rng);
    out.direction = sample_cap(ray.direction, jitter.cap_epsilon, rng);
    out
}

/// Jitters a patch: independent origin noise per ray and one rotation,
/// sampled around the center ray, shared by every ray of the patch.
pub fn jitter_patch<R: Rng>(rays: &[Ray; 9], jitter: &Jitter, rng: &mut R) -> [Ray; 9] {
    let center = rays[4].direction;
    let target = sample_cap(center, jitter.cap_epsilon, rng);
    std::array::from_fn(|i| {
        let mut r = rays[i];
        r.origin = r.origin + gaussian3(jitter.origin_std, rng);
        r.direction = rotate_between(r.direction, center, target).normalized();
        r
    })
}

fn gaussian3<R: Rng>(std: f64, rng: &mut R) -> Vec3 {
    if std <= 0.0 {
        return Vec3::ZERO;
    }
    let n = Normal::new(0.0, std).expect("valid std");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// One supervised ray.
#[derive(Debug, Clone)]
pub struct RayTask {
    pub ray: Ray,
    pub home: CellIndex,
    /// Submodel that renders the ray for the distillation losses.
    pub assigned: CellIndex,
    /// Second submodel rendering the ray for the consistency loss.
    pub partner: Option<CellIndex>,
    pub teacher: TeacherResponse,
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub rays: Vec<RayTask>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub patches: Vec<Patch>,
}

/// Settings for [`make_batch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub patches: usize,
    pub jitter: Jitter,
    pub reassign_fraction: f64,
    /// Pick consistency partners (only meaningful for tiled scenes).
    pub consistency: bool,
}

/// Picks the rendering submodel and consistency partner of one ray.
pub fn assign_ray<R: Rng>(
    origin: Vec3,
    layout: &SceneLayout,
    reassign_fraction: f64,
    consistency: bool,
    rng: &mut R,
) -> Result<(CellIndex, CellIndex, Option<CellIndex>)> {
    let home = layout.assign_submodel(origin)?;
    let neighbors = layout.neighbors(origin, home);
    if neighbors.is_empty() {
        return Ok((home, home, None));
    }
    let reassigned = rng.random_bool(reassign_fraction.clamp(0.0, 1.0));
    let assigned = if reassigned {
        *neighbors.choose(rng).expect("nonempty")
    } else {
        home
    };
    let partner = if !consistency {
        None
    } else if reassigned {
        Some(home)
    } else {
        Some(*neighbors.choose(rng).expect("nonempty"))
    };
    Ok((home, assigned, partner))
}

/// Samples 3x3 patches from random cameras, jitters them, assigns submodels
/// and queries the teacher.
pub fn make_batch<R: Rng>(
    cameras: &[Camera],
    layout: &SceneLayout,
    teacher: &impl Teacher,
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<Batch> {
    if cameras.is_empty() {
        return Err(Error::NoCameras);
    }
    let mut patches = Vec::with_capacity(cfg.patches);
    for _ in 0..cfg.patches {
        let cam = cameras.choose(rng).expect("nonempty");
        if cam.width < 3 || cam.height < 3 {
            return Err(Error::Config("training cameras need at least 3x3 pixels".into()));
        }
        let row = rng.random_range(0..cam.height - 2);
        let col = rng.random_range(0..cam.width - 2);
        let rays: [Ray; 9] = std::array::from_fn(|i| cam.ray(row + i as u32 / 3, col + i as u32 % 3));
        let rays = jitter_patch(&rays, &cfg.jitter, rng);
        let mut tasks = Vec::with_capacity(9);
        for ray in rays {
            let (home, assigned, partner) =
                assign_ray(ray.origin, layout, cfg.reassign_fraction, cfg.consistency, rng)?;
            tasks.push(RayTask {
                ray,
                home,
                assigned,
                partner,
                teacher: teacher.query(&ray),
            });
        }
        patches.push(Patch { rays: tasks });
    }
    Ok(Batch { patches })
}
