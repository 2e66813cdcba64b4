//! Distillation training: losses, batches, schedules and the optimization
//! loop with hand-derived gradients.

pub mod adam;
pub mod batch;
pub mod losses;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deferred::{interpolate_params, MlpLattice, MlpParams};
use crate::math::psnr;
use crate::model::Student;
use crate::render::{
    render_image, render_ray_backward, render_ray_train_traced, Image, RayRender, RayRenderer, RayTrace,
};
use crate::scene::{Camera, CellIndex, Ray};
use crate::teacher::{teacher_image, Teacher};
use crate::{Error, Result};

use adam::Adam;
use batch::{make_batch, Batch, BatchConfig, Jitter, Patch};
use losses::{consistency_loss_with_grad, dssim_with_grad, geometry_loss_with_grad, rmse_with_grad, Rgb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// 3x3 patches per optimization step.
    pub patches_per_batch: usize,
    /// Fixed number of gradient partial sums per step, reduced in order, so
    /// results do not depend on the thread count.
    pub sub_batches: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub dssim_weight: f64,
    pub rmse_weight: f64,
    pub geometry_weight: f64,
    /// Mean squared magnitude of triplane and voxel parameters.
    pub magnitude_weight: f64,
    pub tv_weight: f64,
    pub consistency_weight: f64,
    /// Origin jitter standard deviation as a multiple of `K`.
    pub jitter_std_per_cell: f64,
    pub cap_epsilon: f64,
    pub reassign_fraction: f64,
    pub threshold_start: f64,
    pub threshold_end: f64,
    /// Fractions of the run at which the weight threshold starts and ends
    /// its linear ramp.
    pub threshold_ramp: (f64, f64),
    /// Held-out PSNR every this many steps (0 = only after the last step).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            patches_per_batch: 64,
            sub_batches: 4,
            lr_init: 1e-2,
            lr_final: 3e-4,
            dssim_weight: losses::DSSIM_WEIGHT,
            rmse_weight: 1.0,
            geometry_weight: 1.0,
            magnitude_weight: 0.01,
            tv_weight: 0.1,
            consistency_weight: 1.0,
            jitter_std_per_cell: 0.03,
            cap_epsilon: 0.03,
            reassign_fraction: 0.2,
            threshold_start: 5e-4,
            threshold_end: 5e-3,
            threshold_ramp: (0.4, 0.8),
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lr_init,
            self.lr_final,
            self.dssim_weight,
            self.rmse_weight,
            self.geometry_weight,
            self.magnitude_weight,
            self.tv_weight,
            self.consistency_weight,
            self.jitter_std_per_cell,
            self.cap_epsilon,
            self.threshold_start,
            self.threshold_end,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("weights and rates must be finite and nonnegative".into()));
        }
        let (a, b) = self.threshold_ramp;
        if !(0.0..=1.0).contains(&self.reassign_fraction) || !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if self.patches_per_batch == 0 || self.sub_batches == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_config(&self, k: u32) -> BatchConfig {
        BatchConfig {
            patches: self.patches_per_batch,
            jitter: Jitter {
                origin_std: self.jitter_std_per_cell * k as f64,
                cap_epsilon: self.cap_epsilon,
            },
            reassign_fraction: self.reassign_fraction,
            consistency: self.consistency_weight > 0.0,
        }
    }
}

/// Cosine decay from `init` at step 0 to `fin` at `steps`.
pub fn cosine_lr(step: usize, steps: usize, init: f64, fin: f64) -> f64 {
    if steps == 0 {
        return init;
    }
    let x = (step as f64 / steps as f64).min(1.0);
    fin + 0.5 * (init - fin) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Zero, then a linear ramp from `threshold_start` to `threshold_end`, then
/// `threshold_end`.
pub fn weight_threshold(step: usize, steps: usize, cfg: &TrainConfig) -> f64 {
    let x = if steps == 0 { 1.0 } else { step as f64 / steps as f64 };
    let (a, b) = cfg.threshold_ramp;
    if x < a {
        0.0
    } else if x >= b {
        cfg.threshold_end
    } else {
        cfg.threshold_start + (cfg.threshold_end - cfg.threshold_start) * (x - a) / (b - a)
    }
}

/// Loss components of one batch. Data terms are means over patches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub dssim: f64,
    pub rmse: f64,
    pub geometry: f64,
    pub consistency: f64,
    pub magnitude: f64,
    pub tv: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.dssim += o.dssim;
        self.rmse += o.rmse;
        self.geometry += o.geometry;
        self.consistency += o.consistency;
    }
}

struct Rendered {
    render: RayRender,
    trace: RayTrace,
    params: MlpParams,
    vertices: Vec<(usize, f64)>,
    sub: usize,
}

fn render_task(
    student: &Student,
    ray: &Ray,
    cell: CellIndex,
    intervals: &crate::render::IntervalSet,
    threshold: f64,
) -> Result<Rendered> {
    let sub = student.index_of(cell)?;
    let sm = &student.submodels[sub];
    let local = student.layout.to_local(ray.origin, cell);
    let vertices = sm.lattice.trilerp_weights(local);
    let params = interpolate_params(local, &sm.lattice);
    let (render, trace) = render_ray_train_traced(
        ray,
        intervals,
        &student.layout,
        cell,
        &sm.field,
        &sm.lattice.arch,
        &params,
        threshold,
    )?;
    Ok(Rendered {
        render,
        trace,
        params,
        vertices,
        sub,
    })
}

fn backprop(student: &Student, r: &Rendered, g_rgb: &Rgb, g_w: Option<&[f64]>, grad: &mut Student) {
    let sm = &student.submodels[r.sub];
    let arch = sm.lattice.arch;
    let mut g_params = vec![0.0; arch.param_count()];
    let gs = &mut grad.submodels[r.sub];
    render_ray_backward(&r.trace, &r.render, &sm.field, &arch, &r.params, g_rgb, g_w, &mut gs.field, &mut g_params);
    scatter_lattice(&mut gs.lattice, &r.vertices, &g_params);
}

fn scatter_lattice(lattice: &mut MlpLattice, vertices: &[(usize, f64)], g: &[f64]) {
    for &(v, w) in vertices {
        for (a, b) in lattice.vertices[v].values.iter_mut().zip(g) {
            *a += w * b;
        }
    }
}

/// Data terms of one patch; gradients scaled by `scale` are added to `grad`.
fn patch_loss(
    student: &Student,
    patch: &Patch,
    cfg: &TrainConfig,
    threshold: f64,
    scale: f64,
    mut grad: Option<&mut Student>,
) -> Result<LossTerms> {
    let mut terms = LossTerms::default();
    let main: Vec<Rendered> = patch
        .rays
        .iter()
        .map(|t| render_task(student, &t.ray, t.assigned, &t.teacher.intervals, threshold))
        .collect::<Result<_>>()?;
    let student_rgb: Vec<Rgb> = main.iter().map(|r| r.render.rgb).collect();
    let teacher_rgb: Vec<Rgb> = patch.rays.iter().map(|t| t.teacher.color).collect();

    let (dssim, g_dssim) = dssim_with_grad(&student_rgb, &teacher_rgb)?;
    let (rmse, g_rmse) = rmse_with_grad(&student_rgb, &teacher_rgb)?;
    terms.dssim = dssim;
    terms.rmse = rmse;
    let mut g_rgb: Vec<Rgb> = (0..main.len())
        .map(|i| std::array::from_fn(|c| cfg.dssim_weight * g_dssim[i][c] + cfg.rmse_weight * g_rmse[i][c]))
        .collect();

    let mut g_w = Vec::with_capacity(main.len());
    for (r, t) in main.iter().zip(&patch.rays) {
        let (geo, g) = geometry_loss_with_grad(&r.render.weights, t.teacher.weights())?;
        terms.geometry += geo;
        g_w.push(g);
    }

    let mut partners = Vec::new();
    if cfg.consistency_weight > 0.0 {
        for (i, t) in patch.rays.iter().enumerate() {
            let Some(cell) = t.partner else { continue };
            let other = render_task(student, &t.ray, cell, &t.teacher.intervals, threshold)?;
            let (c, g) = consistency_loss_with_grad(&main[i].render.rgb, &other.render.rgb);
            terms.consistency += c;
            for k in 0..3 {
                g_rgb[i][k] += cfg.consistency_weight * g[k];
            }
            partners.push((other, g.map(|x| -cfg.consistency_weight * x)));
        }
    }

    if let Some(grad) = grad.as_deref_mut() {
        for (i, r) in main.iter().enumerate() {
            let g = g_rgb[i].map(|x| x * scale);
            let gw: Vec<f64> = g_w[i].iter().map(|x| x * cfg.geometry_weight * scale).collect();
            backprop(student, r, &g, Some(&gw), grad);
        }
        for (r, g) in &partners {
            backprop(student, r, &g.map(|x| x * scale), None, grad);
        }
    }
    Ok(terms)
}

/// Reusable gradient buffers, one per sub-batch.
pub struct GradWorkspace {
    partials: Vec<Student>,
}

impl GradWorkspace {
    pub fn new(student: &Student, sub_batches: usize) -> Self {
        GradWorkspace {
            partials: (0..sub_batches.max(1)).map(|_| student.zeros_like()).collect(),
        }
    }
}

/// Evaluates the full objective on a batch. When `grad` is given it is
/// overwritten with the gradient of `total`.
pub fn total_loss(
    student: &Student,
    batch: &Batch,
    cfg: &TrainConfig,
    threshold: f64,
    grad: Option<(&mut Student, &mut GradWorkspace)>,
) -> Result<LossTerms> {
    let n = batch.patches.len().max(1);
    let scale = 1.0 / n as f64;
    let mut terms = LossTerms::default();
    match grad {
        None => {
            let eval = |p: &Patch| patch_loss(student, p, cfg, threshold, scale, None);
            // Dispatching a handful of patches to the pool costs more than it saves.
            let parts: Vec<LossTerms> = if batch.patches.len() < 16 {
                batch.patches.iter().map(eval).collect::<Result<_>>()?
            } else {
                batch.patches.par_iter().map(eval).collect::<Result<_>>()?
            };
            for p in &parts {
                terms.add(p);
            }
        }
        Some((grad, ws)) => {
            let chunk = n.div_ceil(ws.partials.len());
            let parts: Vec<LossTerms> = ws
                .partials
                .par_iter_mut()
                .enumerate()
                .map(|(i, g)| {
                    g.fill_zero();
                    let mut t = LossTerms::default();
                    let lo = (i * chunk).min(batch.patches.len());
                    let hi = ((i + 1) * chunk).min(batch.patches.len());
                    for p in &batch.patches[lo..hi] {
                        t.add(&patch_loss(student, p, cfg, threshold, scale, Some(g))?);
                    }
                    Ok(t)
                })
                .collect::<Result<_>>()?;
            for p in &parts {
                terms.add(p);
            }
            grad.fill_zero();
            for g in &ws.partials {
                grad.add_assign(g);
            }
            for (sm, gs) in student.submodels.iter().zip(&mut grad.submodels) {
                sm.field.magnitude_penalty_backward(cfg.magnitude_weight, &mut gs.field);
                sm.lattice.tv_backward(cfg.tv_weight, &mut gs.lattice);
            }
        }
    }
    terms.dssim *= scale;
    terms.rmse *= scale;
    terms.geometry *= scale;
    terms.consistency *= scale;
    terms.magnitude = student.submodels.iter().map(|s| s.field.magnitude_penalty()).sum();
    terms.tv = student.submodels.iter().map(|s| s.lattice.tv_penalty()).sum();
    terms.total = cfg.dssim_weight * terms.dssim
        + cfg.rmse_weight * terms.rmse
        + cfg.geometry_weight * terms.geometry
        + cfg.consistency_weight * terms.consistency
        + cfg.magnitude_weight * terms.magnitude
        + cfg.tv_weight * terms.tv;
    Ok(terms)
}

/// Renders through the student using the teacher's intervals.
pub struct TrainRenderer<'a, T: Teacher> {
    pub student: &'a Student,
    pub teacher: &'a T,
    pub threshold: f64,
}

impl<T: Teacher> RayRenderer for TrainRenderer<'_, T> {
    fn lattice(&self, cell: CellIndex) -> Result<&MlpLattice> {
        Ok(&self.student.submodel(cell)?.lattice)
    }

    fn render_ray(&self, ray: &Ray, cell: CellIndex, params: &MlpParams) -> Result<[f64; 3]> {
        let sm = self.student.submodel(cell)?;
        let resp = self.teacher.query(ray);
        let (r, _) = render_ray_train_traced(
            ray,
            &resp.intervals,
            &self.student.layout,
            cell,
            &sm.field,
            &sm.lattice.arch,
            params,
            self.threshold,
        )?;
        Ok(r.rgb)
    }
}

/// Training and held-out cameras, already in normalized space.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub heldout: Vec<Camera>,
}

/// Mean PSNR of student renders against teacher renders.
pub fn heldout_psnr(
    student: &Student,
    teacher: &impl Teacher,
    cameras: &[Camera],
    references: &[Image],
    threshold: f64,
) -> Result<f64> {
    let renderer = TrainRenderer {
        student,
        teacher,
        threshold,
    };
    let mut total = 0.0;
    for (cam, reference) in cameras.iter().zip(references) {
        let img = render_image(cam, &student.layout, &renderer)?;
        total += psnr(img.mse(reference)?);
    }
    Ok(total / cameras.len().max(1) as f64)
}

/// Mean per-pixel color distance `||c_a - c_b||_2` between renders of the
/// same camera through submodels `a` and `b`, each with its lattice
/// parameters interpolated at the camera origin.
pub fn cross_submodel_discrepancy(
    student: &Student,
    teacher: &impl Teacher,
    camera: &Camera,
    a: CellIndex,
    b: CellIndex,
    threshold: f64,
) -> Result<f64> {
    let layout = &student.layout;
    let (sa, sb) = (student.submodel(a)?, student.submodel(b)?);
    let pa = interpolate_params(layout.to_local(camera.position, a), &sa.lattice);
    let pb = interpolate_params(layout.to_local(camera.position, b), &sb.lattice);
    let n = camera.width * camera.height;
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let ray = camera.ray(i / camera.width, i % camera.width);
            let iv = teacher.query(&ray).intervals;
            let ca = render_ray_train_traced(&ray, &iv, layout, a, &sa.field, &sa.lattice.arch, &pa, threshold)?.0.rgb;
            let cb = render_ray_train_traced(&ray, &iv, layout, b, &sb.field, &sb.lattice.arch, &pb, threshold)?.0.rgb;
            Ok(losses::consistency_loss(&ca, &cb))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub terms: LossTerms,
    pub lr: f64,
    pub threshold: f64,
    pub heldout_psnr: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,total,dssim,rmse,geometry,consistency,magnitude,tv,lr,threshold,heldout_psnr";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            t.total,
            t.dssim,
            t.rmse,
            t.geometry,
            t.consistency,
            t.magnitude,
            t.tv,
            self.lr,
            self.threshold,
            self.heldout_psnr.map(|p| p.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub final_psnr: Option<f64>,
}

/// Runs `cfg.steps` Adam steps on freshly sampled batches. Metrics rows are
/// appended to `metrics` as CSV when given.
pub fn train(
    student: &mut Student,
    teacher: &impl Teacher,
    data: &Dataset,
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_cfg = cfg.batch_config(student.layout.k);
    let references: Vec<Image> = data.heldout.iter().map(|c| teacher_image(c, teacher)).collect();
    let mut adam = Adam::new(&student.param_slices());
    let mut grad = student.zeros_like();
    let mut ws = GradWorkspace::new(student, cfg.sub_batches);
    let mut report = TrainReport::default();
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    }
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_final);
        let threshold = weight_threshold(step, cfg.steps, cfg);
        let batch = make_batch(&data.cameras, &student.layout, teacher, &batch_cfg, &mut rng)?;
        let terms = total_loss(student, &batch, cfg, threshold, Some((&mut grad, &mut ws)))?;
        if !terms.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{terms:?}"),
            });
        }
        adam.step(student.param_slices_mut(), grad.param_slices(), lr);
        let last = step + 1 == cfg.steps;
        let eval = !data.heldout.is_empty() && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0));
        let heldout = if eval {
            let t = weight_threshold(step + 1, cfg.steps, cfg);
            Some(heldout_psnr(student, teacher, &data.heldout, &references, t)?)
        } else {
            None
        };
        let row = MetricsRow {
            step,
            terms,
            lr,
            threshold,
            heldout_psnr: heldout,
        };
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{}", row.csv()).map_err(|e| Error::io("metrics", e))?;
        }
        if let Some(p) = heldout {
            log::info!("step {step}: loss {:.5}, held-out PSNR {p:.2} dB", terms.total);
            report.final_psnr = Some(p);
        } else {
            log::debug!("step {step}: loss {:.5}", terms.total);
        }
        report.rows.push(row);
    }
    Ok(report)
}
