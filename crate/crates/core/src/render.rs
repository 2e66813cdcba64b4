//! Volume rendering: compositing weights, train-mode rendering over teacher
//! intervals (with its backward pass), distance-grid marching over baked or
//! float assets, and whole-image rendering.

use rayon::prelude::*;

use crate::deferred::{shade_backward, shade_forward, MlpArch, MlpLattice, MlpParams, ShadeCache, ShadeInput};
use crate::field::{FeatureField, FieldQuery, FieldSample, FEATURE_DIM};
use crate::scene::{Camera, CellIndex, Ray, SceneLayout};
use crate::{Error, Result};

/// Transmittance below which the baked marcher stops.
pub const EARLY_TERMINATION: f64 = 2e-3;

/// Ray intervals `[t_i, t_{i+1})` with optional per-interval weights.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    boundaries: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl IntervalSet {
    pub fn new(boundaries: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::InvalidIntervals("need at least two boundaries".into()));
        }
        if boundaries[0] < 0.0 || !boundaries.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidIntervals("boundaries must be finite and nonnegative".into()));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidIntervals("boundaries must be strictly increasing".into()));
        }
        if let Some(w) = &weights {
            if w.len() != boundaries.len() - 1 {
                return Err(Error::LengthMismatch {
                    what: "interval weights",
                    left: w.len(),
                    right: boundaries.len() - 1,
                });
            }
            if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) || w.iter().sum::<f64>() > 1.0 + 1e-4 {
                return Err(Error::InvalidIntervals("weights must lie in [0, 1] and sum to at most 1".into()));
            }
        }
        Ok(IntervalSet { boundaries, weights })
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn midpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1]))
    }

    pub fn deltas(&self) -> impl Iterator<Item = f64> + '_ {
        self.boundaries.windows(2).map(|w| w[1] - w[0])
    }
}

/// Result of rendering one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub diffuse_acc: [f64; 3],
    pub feature_acc: [f64; FEATURE_DIM],
    /// Compositing weights after thresholding.
    pub weights: Vec<f64>,
    /// Transmittance in front of each sample.
    pub transmittances: Vec<f64>,
    pub opacity: f64,
}

/// `w_i = T_i (1 - exp(-sigma_i delta_i))` with `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn compositing_weights(sigmas: &[f64], deltas: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigmas.len() != deltas.len() {
        return Err(Error::LengthMismatch {
            what: "sigmas vs deltas",
            left: sigmas.len(),
            right: deltas.len(),
        });
    }
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut trans = Vec::with_capacity(sigmas.len());
    let mut optical = 0.0f64;
    for (s, d) in sigmas.iter().zip(deltas) {
        let t = (-optical).exp();
        let u = s * d;
        trans.push(t);
        weights.push(t * -(-u).exp_m1());
        optical += u;
    }
    Ok((weights, trans))
}

/// Gradient of `sum_i g_w[i] * w_i` with respect to each optical depth
/// `u_k = sigma_k delta_k`.
pub fn compositing_backward(g_w: &[f64], weights: &[f64], trans: &[f64], optical: &[f64]) -> Vec<f64> {
    let n = g_w.len();
    let mut g_u = vec![0.0; n];
    let mut tail = 0.0;
    for k in (0..n).rev() {
        let t_next = trans[k] * (-optical[k]).exp();
        g_u[k] = g_w[k] * t_next - tail;
        tail += g_w[k] * weights[k];
    }
    g_u
}

/// State kept from a train-mode render for its backward pass.
#[derive(Debug, Clone)]
pub struct RayTrace {
    queries: Vec<FieldQuery>,
    deltas: Vec<f64>,
    raw_weights: Vec<f64>,
    kept: Vec<bool>,
    shade: ShadeCache,
}

/// Renders a ray through one submodel at the teacher's interval midpoints.
/// Weights below `threshold` are zeroed.
pub fn render_ray_train(
    ray: &Ray,
    intervals: &IntervalSet,
    layout: &SceneLayout,
    cell: CellIndex,
    field: &FeatureField,
    arch: &MlpArch,
    params: &MlpParams,
    threshold: f64,
) -> Result<RayRender> {
    render_ray_train_traced(ray, intervals, layout, cell, field, arch, params, threshold).map(|(r, _)| r)
}

#[allow(clippy::too_many_arguments)]
pub fn render_ray_train_traced(
    ray: &Ray,
    intervals: &IntervalSet,
    layout: &SceneLayout,
    cell: CellIndex,
    field: &FeatureField,
    arch: &MlpArch,
    params: &MlpParams,
    threshold: f64,
) -> Result<(RayRender, RayTrace)> {
    if !layout.is_active(cell) {
        return Err(Error::InactiveSubmodel(cell));
    }
    let queries: Vec<FieldQuery> = intervals
        .midpoints()
        .map(|t| field.query(layout.to_contracted(ray.at(t), cell)))
        .collect();
    let deltas: Vec<f64> = intervals.deltas().collect();
    let sigmas: Vec<f64> = queries.iter().map(|q| q.sample.sigma).collect();
    let (raw_weights, transmittances) = compositing_weights(&sigmas, &deltas)?;
    let kept: Vec<bool> = raw_weights.iter().map(|&w| w >= threshold).collect();
    let weights: Vec<f64> = raw_weights
        .iter()
        .zip(&kept)
        .map(|(&w, &k)| if k { w } else { 0.0 })
        .collect();
    let samples: Vec<FieldSample> = queries.iter().map(|q| q.sample).collect();
    let (diffuse_acc, feature_acc) = accumulate(&samples, &weights);
    let (rgb, shade) = shade_forward(
        arch,
        params,
        &ShadeInput {
            diffuse: diffuse_acc,
            features: feature_acc,
            view_dir: ray.direction,
            exposure: ray.exposure,
        },
    );
    let render = RayRender {
        rgb,
        diffuse_acc,
        feature_acc,
        opacity: weights.iter().sum(),
        weights,
        transmittances,
    };
    let trace = RayTrace {
        queries,
        deltas,
        raw_weights,
        kept,
        shade,
    };
    Ok((render, trace))
}

fn accumulate(samples: &[FieldSample], weights: &[f64]) -> ([f64; 3], [f64; FEATURE_DIM]) {
    let mut diffuse = [0.0; 3];
    let mut features = [0.0; FEATURE_DIM];
    for (s, &w) in samples.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for c in 0..3 {
            diffuse[c] += w * s.diffuse[c];
        }
        for c in 0..FEATURE_DIM {
            features[c] += w * s.features[c];
        }
    }
    (diffuse, features)
}

/// Backpropagates `g_rgb` (and optionally a gradient on the thresholded
/// weights) into field and MLP parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn render_ray_backward(
    trace: &RayTrace,
    render: &RayRender,
    field: &FeatureField,
    arch: &MlpArch,
    params: &MlpParams,
    g_rgb: &[f64; 3],
    g_weights: Option<&[f64]>,
    grad_field: &mut FeatureField,
    g_params: &mut [f64],
) {
    let gi = shade_backward(arch, params, &trace.shade, g_rgb, g_params);
    let n = trace.queries.len();
    let mut g_w = vec![0.0; n];
    for i in 0..n {
        if !trace.kept[i] {
            continue;
        }
        let s = &trace.queries[i].sample;
        let mut g = g_weights.map_or(0.0, |g| g[i]);
        g += (0..3).map(|c| gi.diffuse[c] * s.diffuse[c]).sum::<f64>();
        g += (0..FEATURE_DIM).map(|c| gi.features[c] * s.features[c]).sum::<f64>();
        g_w[i] = g;
    }
    let optical: Vec<f64> = trace
        .queries
        .iter()
        .zip(&trace.deltas)
        .map(|(q, d)| q.sample.sigma * d)
        .collect();
    let g_u = compositing_backward(&g_w, &trace.raw_weights, &render.transmittances, &optical);
    for i in 0..n {
        let w = render.weights[i];
        let g_sigma = g_u[i] * trace.deltas[i];
        if w == 0.0 && g_sigma == 0.0 {
            continue;
        }
        let g_diffuse = gi.diffuse.map(|g| g * w);
        let g_features = gi.features.map(|g| g * w);
        field.backward(&trace.queries[i], g_sigma, &g_diffuse, &g_features, grad_field);
    }
}

/// Feature source for the distance-grid marcher: either quantized baked
/// assets or the float field they came from.
pub trait MarchSource {
    /// Resolution of the distance grid.
    fn distance_resolution(&self) -> usize;
    fn distance(&self, voxel: [usize; 3]) -> u8;
    /// Activated field sample at a contracted point.
    fn sample(&self, p: crate::Vec3) -> FieldSample;
}

/// Options for [`march_ray`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarchOptions {
    /// Field resolution `R`; one step advances one voxel edge `4 / R` in
    /// contracted space inside the uncontracted core.
    pub resolution: usize,
    pub max_steps: usize,
    pub early_termination: f64,
    /// Use the distance grid to jump over empty space.
    pub skip: bool,
}

/// Marching statistics, used to check skipping efficiency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MarchStats {
    /// Loop iterations (evaluated samples plus skips).
    pub iterations: usize,
    pub evaluated: usize,
}

/// Ray parameter range integrated by the marcher and teacher: from the ray
/// origin to the exit of the cube `[-bound, bound]^3`.
pub fn ray_extent(ray: &Ray, bound: f64) -> Option<(f64, f64)> {
    let mut t0: f64 = 0.0;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-300 {
            if o.abs() > bound {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-bound - o) / d, (bound - o) / d);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

fn voxel_of(p: crate::Vec3, res: usize) -> [usize; 3] {
    let idx = |x: f64| (((x + 2.0) * 0.25 * res as f64).floor().max(0.0) as usize).min(res - 1);
    [idx(p.x), idx(p.y), idx(p.z)]
}

/// Distance along `dir` (from `p`) that stays inside the empty Chebyshev cube
/// around `voxel`, measured in contracted units.
fn cube_clearance(p: crate::Vec3, voxel: [usize; 3], d: u8, res: usize) -> f64 {
    let e = 4.0 / res as f64;
    let d = d as f64;
    (0..3)
        .map(|a| {
            let lo = (voxel[a] as f64 - (d - 1.0)) * e - 2.0;
            let hi = (voxel[a] as f64 + d) * e - 2.0;
            (p[a] - lo).min(hi - p[a])
        })
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Ray distance from `t` to the next point where the dominant axis of the
/// prescaled local coordinate may change. The contraction jumps across such
/// points outside the unit ball, so the Lipschitz bound used for skipping
/// only holds up to there. Returns 0 when `t` is itself at a tie.
fn piece_extent(ray: &Ray, layout: &SceneLayout, cell: CellIndex, t: f64) -> f64 {
    let s = 2.0 * layout.contraction_prescale;
    let a0 = (ray.origin - layout.cell_center(cell)) * s;
    let b = ray.direction * s;
    let y = a0 + b * t;
    let axis = (0..3).fold(0, |m, i| if y[i].abs() > y[m].abs() { i } else { m });
    let margin = 1e-9 * t.abs().max(1.0);
    let mut extent = f64::INFINITY;
    for j in (0..3).filter(|&j| j != axis) {
        for sign in [1.0, -1.0] {
            let denom = b[axis] - sign * b[j];
            if denom == 0.0 {
                continue;
            }
            let tie = (sign * a0[j] - a0[axis]) / denom;
            if tie >= t - margin {
                extent = extent.min(tie - t - margin);
            }
        }
    }
    extent.max(0.0)
}

/// Marches uniform steps through the contracted space of `cell`, only
/// evaluating samples in occupied voxels of the distance grid. With
/// `skip` enabled, runs of samples guaranteed to fall in empty voxels are
/// jumped over; the result is bit-identical to the dense march.
pub fn march_ray(
    ray: &Ray,
    layout: &SceneLayout,
    cell: CellIndex,
    source: &impl MarchSource,
    arch: &MlpArch,
    params: &MlpParams,
    opts: &MarchOptions,
) -> Result<(RayRender, MarchStats)> {
    if !layout.is_active(cell) {
        return Err(Error::InactiveSubmodel(cell));
    }
    let res_d = source.distance_resolution();
    let scale = 2.0 * layout.contraction_prescale;
    let dt = 4.0 / opts.resolution as f64 / scale;
    // Local-frame speed of the ray, then the contraction's Lipschitz bound 2
    // in the infinity norm.
    let speed = 2.0 * scale * ray.direction.max_abs();
    let mut samples = Vec::new();
    let mut weights = Vec::new();
    let mut transmittances = Vec::new();
    let mut stats = MarchStats::default();
    if let Some((t_near, t_far)) = ray_extent(ray, layout.scene_bound()) {
        let mut optical = 0.0f64;
        let mut n: usize = 0;
        while stats.iterations < opts.max_steps {
            let t = t_near + (n as f64 + 0.5) * dt;
            if t >= t_far {
                break;
            }
            stats.iterations += 1;
            let p = layout.to_contracted(ray.at(t), cell);
            let v = voxel_of(p, res_d);
            let d = source.distance(v);
            if d > 0 {
                let mut step = 1;
                if opts.skip {
                    let clearance = cube_clearance(p, v, d, res_d) * (1.0 - 1e-9) - 1e-12;
                    let safe = (clearance / speed).min(piece_extent(ray, layout, cell, t));
                    // Samples strictly closer than `safe` stay inside the cube.
                    if safe > dt {
                        step = (safe / dt).ceil().max(1.0) as usize;
                    }
                }
                n += step;
                continue;
            }
            stats.evaluated += 1;
            let s = source.sample(p);
            let trans = (-optical).exp();
            let u = s.sigma * dt;
            weights.push(trans * -(-u).exp_m1());
            transmittances.push(trans);
            samples.push(s);
            optical += u;
            if (-optical).exp() < opts.early_termination {
                break;
            }
            n += 1;
        }
    }
    let (diffuse_acc, feature_acc) = accumulate(&samples, &weights);
    let (rgb, _) = shade_forward(
        arch,
        params,
        &ShadeInput {
            diffuse: diffuse_acc,
            features: feature_acc,
            view_dir: ray.direction,
            exposure: ray.exposure,
        },
    );
    let render = RayRender {
        rgb,
        diffuse_acc,
        feature_acc,
        opacity: weights.iter().sum(),
        weights,
        transmittances,
    };
    Ok((render, stats))
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    /// Mean squared error over all channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.pixels.len() != other.pixels.len() {
            return Err(Error::LengthMismatch {
                what: "image pixels",
                left: self.pixels.len(),
                right: other.pixels.len(),
            });
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum();
        Ok(sum / (3 * self.pixels.len()).max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Something that can render rays for [`render_image`].
pub trait RayRenderer: Sync {
    fn lattice(&self, cell: CellIndex) -> Result<&MlpLattice>;
    /// Renders one ray in normalized space with already interpolated MLP
    /// parameters.
    fn render_ray(&self, ray: &Ray, cell: CellIndex, params: &MlpParams) -> Result<[f64; 3]>;
}

/// Renders a normalized-space camera: the submodel and MLP parameters are
/// chosen once from the camera origin, then every pixel center is rendered.
pub fn render_image(camera: &Camera, layout: &SceneLayout, renderer: &impl RayRenderer) -> Result<Image> {
    let cell = layout.assign_submodel(camera.position)?;
    let lattice = renderer.lattice(cell)?;
    let params = crate::deferred::interpolate_params(layout.to_local(camera.position, cell), lattice);
    let pixels = (0..camera.height * camera.width)
        .into_par_iter()
        .map(|i| renderer.render_ray(&camera.ray(i / camera.width, i % camera.width), cell, &params))
        .collect::<Result<Vec<_>>>()?;
    Ok(Image {
        width: camera.width,
        height: camera.height,
        pixels,
    })
}
