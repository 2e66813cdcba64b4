//! Teacher oracle: the interface the student distills from, and an analytic
//! provider built from boxes and spheres with exactly integrated transmittance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::render::{ray_extent, Image, IntervalSet};
use crate::scene::{Camera, Ray, SceneLayout};
use crate::Vec3;

/// Default number of intervals per teacher ray.
pub const TEACHER_INTERVALS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherResponse {
    pub color: [f64; 3],
    /// Intervals carrying the teacher's weights.
    pub intervals: IntervalSet,
    /// Mass-weighted mean emitted color inside each interval.
    pub interval_colors: Vec<[f64; 3]>,
    pub background: [f64; 3],
}

impl TeacherResponse {
    pub fn weights(&self) -> &[f64] {
        self.intervals.weights().expect("teacher intervals carry weights")
    }
}

/// Anything that can supervise the student with colors and interval weights.
pub trait Teacher: Sync {
    fn query(&self, ray: &Ray) -> TeacherResponse;
}

pub fn teacher_query(ray: &Ray, teacher: &impl Teacher) -> TeacherResponse {
    teacher.query(ray)
}

/// Renders a normalized-space camera with the teacher, pixel centers only.
pub fn teacher_image(camera: &Camera, teacher: &impl Teacher) -> Image {
    let pixels = (0..camera.width * camera.height)
        .into_par_iter()
        .map(|i| teacher.query(&camera.ray(i / camera.width, i % camera.width)).color)
        .collect();
    Image {
        width: camera.width,
        height: camera.height,
        pixels,
    }
}

/// Answers a 3x3 patch of rays in row-major order.
pub fn teacher_patch(rays: &[Ray; 9], teacher: &impl Teacher) -> [TeacherResponse; 9] {
    std::array::from_fn(|i| teacher.query(&rays[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Box { center: Vec3, half_size: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Shape {
    /// Entry and exit parameters of the ray, if it hits.
    fn chord(&self, ray: &Ray) -> Option<(f64, f64)> {
        match *self {
            Shape::Box { center, half_size } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    let o = ray.origin[a] - center[a];
                    let d = ray.direction[a];
                    let h = half_size[a];
                    if d == 0.0 {
                        if o.abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = ((-h - o) / d, (h - o) / d);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                (t1 > t0).then_some((t0, t1))
            }
            Shape::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(ray.direction);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Shape::Box { center, half_size } => (0..3).all(|a| (p[a] - center[a]).abs() <= half_size[a]),
            Shape::Sphere { center, radius } => (p - center).norm() <= radius,
        }
    }

    fn transformed(&self, layout: &SceneLayout) -> Shape {
        match *self {
            Shape::Box { center, half_size } => Shape::Box {
                center: layout.world_to_normalized(center),
                half_size: half_size * layout.world_scale,
            },
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: layout.world_to_normalized(center),
                radius: radius * layout.world_scale,
            },
        }
    }
}

/// Alternating albedo on an axis-aligned lattice of cubes of side `size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    pub size: f64,
    pub color_b: [f64; 3],
}

/// White specular lobe `strength * max(0, -d . direction)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Highlight {
    pub direction: Vec3,
    pub strength: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
    #[serde(default)]
    pub checker: Option<Checker>,
    #[serde(default)]
    pub highlight: Option<Highlight>,
}

impl Primitive {
    /// Emitted color at `p` seen along `dir`, clamped to `[0, 1]`.
    pub fn color(&self, p: Vec3, dir: Vec3) -> [f64; 3] {
        let mut c = self.albedo;
        if let Some(ch) = self.checker {
            let parity = (0..3).map(|a| (p[a] / ch.size).floor() as i64).sum::<i64>();
            if parity.rem_euclid(2) == 1 {
                c = ch.color_b;
            }
        }
        if let Some(h) = self.highlight {
            let lobe = h.strength * (-dir.dot(h.direction.normalized())).max(0.0).powf(h.exponent);
            c = c.map(|x| x + lobe);
        }
        c.map(|x| x.clamp(0.0, 1.0))
    }
}

/// Boxes and spheres with constant density over a background color.
/// Overlapping primitives add densities and mix colors by density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl AnalyticScene {
    /// Re-expresses a world-space scene in the normalized space of `layout`.
    pub fn to_normalized(&self, layout: &SceneLayout) -> AnalyticScene {
        let s = layout.world_scale;
        AnalyticScene {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive {
                    shape: p.shape.transformed(layout),
                    density: p.density / s,
                    checker: p.checker.map(|c| Checker {
                        size: c.size * s,
                        ..c
                    }),
                    ..*p
                })
                .collect(),
            background: self.background,
        }
    }

    /// Density and emitted color at a point.
    pub fn point(&self, p: Vec3, dir: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for prim in self.primitives.iter().filter(|q| q.shape.contains(p)) {
            sigma += prim.density;
            let c = prim.color(p, dir);
            for i in 0..3 {
                acc[i] += prim.density * c[i];
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|x| x / sigma))
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Breakpoints along `ray` within `[t0, t1]` between which density and
    /// color are constant.
    fn breakpoints(&self, ray: &Ray, t0: f64, t1: f64) -> Vec<f64> {
        let mut ts = vec![t0, t1];
        for prim in &self.primitives {
            let Some((a, b)) = prim.shape.chord(ray) else { continue };
            let (a, b) = (a.max(t0), b.min(t1));
            if a >= b {
                continue;
            }
            ts.push(a);
            ts.push(b);
            if let Some(ch) = prim.checker {
                for axis in 0..3 {
                    let d = ray.direction[axis];
                    if d == 0.0 {
                        continue;
                    }
                    let o = ray.origin[axis];
                    let (xa, xb) = (o + a * d, o + b * d);
                    let (lo, hi) = (xa.min(xb), xa.max(xb));
                    let mut m = (lo / ch.size).ceil();
                    while m * ch.size <= hi {
                        let t = (m * ch.size - o) / d;
                        if t > a && t < b {
                            ts.push(t);
                        }
                        m += 1.0;
                    }
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// Piecewise-constant `(t_start, t_end, sigma, color)` segments.
    pub fn segments(&self, ray: &Ray, t0: f64, t1: f64) -> Vec<(f64, f64, f64, [f64; 3])> {
        self.breakpoints(ray, t0, t1)
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let (s, c) = self.point(ray.at(0.5 * (w[0] + w[1])), ray.direction);
                (w[0], w[1], s, c)
            })
            .collect()
    }
}

/// Distance along a ray mapped so that far intervals grow like `1 / t`.
pub fn spacing(t: f64) -> f64 {
    if t <= 1.0 {
        t
    } else {
        2.0 - 1.0 / t
    }
}

pub fn spacing_inverse(s: f64) -> f64 {
    if s <= 1.0 {
        s
    } else {
        1.0 / (2.0 - s)
    }
}

/// Analytic teacher over a normalized-space scene.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticTeacher {
    pub scene: AnalyticScene,
    /// Rays are integrated until they leave `[-bound, bound]^3`.
    pub bound: f64,
    pub intervals: usize,
    /// Log-domain exposure multiplies colors by `exp(exposure)`.
    pub apply_exposure: bool,
}

impl AnalyticTeacher {
    /// Teacher for a world-space scene under `layout`.
    pub fn new(world_scene: &AnalyticScene, layout: &SceneLayout) -> Self {
        AnalyticTeacher {
            scene: world_scene.to_normalized(layout),
            bound: layout.scene_bound(),
            intervals: TEACHER_INTERVALS,
            apply_exposure: false,
        }
    }

    /// Interval boundaries: uniform in [`spacing`] between the ray origin
    /// and the exit from the scene bound.
    pub fn boundaries(&self, ray: &Ray) -> Vec<f64> {
        let (near, far) = match ray_extent(ray, self.bound) {
            Some((a, b)) => (a, b),
            // Rays that miss the bounds still need valid intervals.
            None => (0.0, 1.0),
        };
        let (s0, s1) = (spacing(near), spacing(far));
        let n = self.intervals;
        let mut b: Vec<f64> = (0..=n)
            .map(|i| spacing_inverse(s0 + (s1 - s0) * i as f64 / n as f64))
            .collect();
        b[0] = near;
        b[n] = far;
        b
    }
}

impl Teacher for AnalyticTeacher {
    fn query(&self, ray: &Ray) -> TeacherResponse {
        let bounds = self.boundaries(ray);
        let (near, far) = (bounds[0], bounds[bounds.len() - 1]);
        let segments = self.scene.segments(ray, near, far);
        let n = bounds.len() - 1;
        let mut weights = vec![0.0; n];
        let mut colored = vec![[0.0; 3]; n];
        let mut optical = 0.0f64;
        let mut interval = 0;
        for (a, b, sigma, c) in segments {
            // A segment may straddle several intervals; split it.
            let mut start = a;
            while start < b {
                while interval + 1 < n && bounds[interval + 1] <= start {
                    interval += 1;
                }
                let end = if interval + 1 < n { b.min(bounds[interval + 1]) } else { b };
                let u = sigma * (end - start);
                let mass = (-optical).exp() * -(-u).exp_m1();
                weights[interval] += mass;
                for i in 0..3 {
                    colored[interval][i] += mass * c[i];
                }
                optical += u;
                start = end;
            }
        }
        let t_final = (-optical).exp();
        let gain = match (self.apply_exposure, ray.exposure) {
            (true, Some(e)) => e.exp(),
            _ => 1.0,
        };
        let interval_colors: Vec<[f64; 3]> = colored
            .iter()
            .zip(&weights)
            .map(|(c, &w)| if w > 0.0 { c.map(|x| (x / w * gain).min(1.0)) } else { [0.0; 3] })
            .collect();
        let background = self.scene.background.map(|x| (x * gain).min(1.0));
        let mut color = background.map(|x| x * t_final);
        for (c, &w) in interval_colors.iter().zip(&weights) {
            for i in 0..3 {
                color[i] += w * c[i];
            }
        }
        let weights = weights.into_iter().map(|w| w.clamp(0.0, 1.0)).collect();
        let intervals = IntervalSet::new(bounds, Some(weights)).expect("teacher intervals are valid");
        TeacherResponse {
            color: color.map(|x| x.clamp(0.0, 1.0)),
            intervals,
            interval_colors,
            background,
        }
    }
}
