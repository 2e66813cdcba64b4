//! Self-checks run by `tilefield verify`: brute-force references for the
//! distance grid and filters, skip-equivalence of the marcher, quantization
//! round trips and finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bake::bundle::BakedBundle;
use crate::bake::{median_filter_27, DistanceGrid, MarchField, OccupancyGrid, QuantRange};
use crate::deferred::interpolate_params;
use crate::field::Aggregation;
use crate::model::{ModelConfig, Student};
use crate::render::{march_ray, MarchOptions, EARLY_TERMINATION};
use crate::scene::{normalize_cameras, Camera, Ray};
use crate::teacher::{AnalyticScene, AnalyticTeacher, Primitive, Shape};
use crate::train::batch::{make_batch, Batch};
use crate::train::{total_loss, GradWorkspace, TrainConfig};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Chebyshev distance to the nearest occupied voxel by direct search,
/// capped like [`DistanceGrid`].
pub fn brute_force_distance(occ: &OccupancyGrid) -> DistanceGrid {
    let n = occ.resolution;
    let cap = DistanceGrid::cap(n) as usize;
    let mut occupied = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if occ.get(x, y, z) {
                    occupied.push([x, y, z]);
                }
            }
        }
    }
    let mut data = Vec::with_capacity(n * n * n);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let v = [x, y, z];
                let mut best = cap;
                for o in &occupied {
                    let d = (0..3).map(|a| v[a].abs_diff(o[a])).max().unwrap_or(0);
                    best = best.min(d);
                    if best <= 1 && (best == 0 || !occ.get(x, y, z)) {
                        break;
                    }
                }
                data.push(best as u8);
            }
        }
    }
    DistanceGrid { resolution: n, data }
}

/// Occupancy implied by a distance grid: voxels at distance zero.
pub fn occupancy_of(distance: &DistanceGrid) -> OccupancyGrid {
    let n = distance.resolution;
    OccupancyGrid::from_fn(n, |x, y, z| distance.get([x, y, z]) == 0)
}

/// Checks every submodel of a loaded bundle.
pub fn verify_bundle(bundle: &BakedBundle, rays: usize, seed: u64, report: &mut VerifyReport) {
    let m = &bundle.manifest;
    let tag = m.cell.slug();

    let distance = bundle.distance_grid();
    let reference = brute_force_distance(&occupancy_of(&distance));
    let mismatches = distance.data.iter().zip(&reference.data).filter(|(a, b)| a != b).count();
    report.push(
        format!("{tag}/distance-grid"),
        mismatches == 0,
        format!("{mismatches} of {} voxels differ from brute force", distance.data.len()),
    );

    let mut worst = 0.0f64;
    let mut unstable = 0usize;
    let codes = bundle.planes.iter().flatten().chain(&bundle.atlas);
    for (i, &q) in codes.enumerate() {
        let range = m.quantization[i % m.quantization.len()];
        let x = range.dequantize(q);
        unstable += usize::from(range.quantize(x) != q);
        // A value anywhere within half a step of x must map back to q.
        for off in [-0.49, 0.49] {
            let y = (x + off * range.step()).clamp(range.min, range.max);
            worst = worst.max((range.dequantize(range.quantize(y)) - y).abs() / range.step());
        }
    }
    report.push(
        format!("{tag}/quantization"),
        unstable == 0 && worst <= 0.5,
        format!("{unstable} unstable codes, worst round-trip error {worst:.3} steps"),
    );

    let source = MarchField {
        field: bundle.dequantized_field(),
        distance,
    };
    let lattice = bundle.lattice();
    let layout = &m.layout;
    let center = layout.cell_center(m.cell);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut differing = 0;
    let mut iterations = [0usize; 2];
    for _ in 0..rays {
        let origin = center + random_vec(&mut rng, 0.5);
        let mut dir = random_vec(&mut rng, 1.0);
        if dir.norm() < 1e-3 {
            dir = Vec3::new(0.0, 0.0, 1.0);
        }
        let ray = Ray::new(origin, dir.normalized());
        let params = interpolate_params(layout.to_local(origin, m.cell), &lattice);
        let opts = MarchOptions {
            resolution: m.r,
            max_steps: 1 << 20,
            early_termination: EARLY_TERMINATION,
            skip: false,
        };
        let run = |skip| march_ray(&ray, layout, m.cell, &source, &lattice.arch, &params, &MarchOptions { skip, ..opts });
        match (run(false), run(true)) {
            (Ok((a, sa)), Ok((b, sb))) => {
                differing += usize::from(a != b);
                iterations[0] += sa.iterations;
                iterations[1] += sb.iterations;
            }
            _ => differing += 1,
        }
    }
    report.push(
        format!("{tag}/skip-equivalence"),
        differing == 0,
        format!(
            "{differing} of {rays} rays differ; {} dense vs {} skipping iterations",
            iterations[0], iterations[1]
        ),
    );
}

fn random_vec<R: Rng>(rng: &mut R, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

/// Median filter against a direct neighborhood count on random grids.
pub fn verify_filters(grids: usize, n: usize, seed: u64, report: &mut VerifyReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..grids {
        let p = rng.random_range(0.0..1.0);
        let mut g = OccupancyGrid::empty(n);
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    g.set(x, y, z, rng.random_bool(p));
                }
            }
        }
        let direct = OccupancyGrid::from_fn(n, |x, y, z| {
            let (mut on, mut total) = (0, 0);
            for a in x.saturating_sub(1)..=(x + 1).min(n - 1) {
                for b in y.saturating_sub(1)..=(y + 1).min(n - 1) {
                    for c in z.saturating_sub(1)..=(z + 1).min(n - 1) {
                        total += 1;
                        on += usize::from(g.get(a, b, c));
                    }
                }
            }
            2 * on > total
        });
        bad += usize::from(median_filter_27(&g) != direct);
    }
    report.push("median-filter", bad == 0, format!("{bad} of {grids} random {n}^3 grids differ"));
}

/// Worst-case agreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GradReport {
    pub worst_rel: f64,
    /// Parameters compared by relative error.
    pub checked_rel: usize,
    /// Parameters whose gradient is too small for the difference quotient to
    /// resolve, compared against its rounding noise instead.
    pub checked_abs: usize,
    /// Relative checks that needed a Richardson-extrapolated difference.
    pub refined: usize,
    pub failures: usize,
}

/// A small random problem whose objective is smooth at the current point:
/// `R = 8`, `L = 4`, `P = 2`, three teacher intervals, one patch and no
/// weight threshold. Lattice vertices are spread apart so the total
/// variation penalty stays away from its kinks. With `k = 2` two cells are
/// active and the consistency term is exercised.
pub struct GradInstance {
    pub student: Student,
    pub batch: Batch,
    pub cfg: TrainConfig,
}

pub fn gradient_instance(seed: u64, k: u32, exposure: bool, aggregation: Aggregation) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origins = [Vec3::new(-0.6, 0.1, 0.0), Vec3::new(0.6, -0.1, 0.05)];
    let layout = normalize_cameras(&origins, k).expect("two distinct origins");
    let model = ModelConfig {
        r: 8,
        l: 4,
        p: 2,
        aggregation,
        exposure,
        init_std: 0.4,
        density_bias: 0.5,
        output_bias: -1.0,
    };
    let mut student = Student::new(layout.clone(), &model, &mut rng).expect("valid shapes");
    for sm in &mut student.submodels {
        for (i, v) in sm.lattice.vertices.iter_mut().enumerate() {
            for x in &mut v.values {
                *x += 0.03 * i as f64 + rng.random_range(-0.005..0.005);
            }
        }
    }
    let scene = AnalyticScene {
        primitives: vec![Primitive {
            shape: Shape::Box {
                center: Vec3::new(rng.random_range(-0.3..0.3), 0.0, 0.0),
                half_size: Vec3::splat(0.35),
            },
            density: 3.0,
            albedo: [0.7, 0.4, 0.2],
            checker: None,
            highlight: None,
        }],
        background: [0.2, 0.3, 0.5],
    };
    let mut teacher = AnalyticTeacher::new(&scene, &layout);
    teacher.intervals = 3;
    let cameras: Vec<Camera> = origins
        .iter()
        .map(|&o| {
            let target = Vec3::new(0.0, 0.6, 0.1);
            let mut c = Camera::look_at(layout.world_to_normalized(o), target, Vec3::new(0.0, 0.0, 1.0), 50.0, 6, 6);
            if exposure {
                c.exposure = Some(rng.random_range(-0.5..0.5));
            }
            c
        })
        .collect();
    let cfg = TrainConfig {
        patches_per_batch: 1,
        reassign_fraction: 0.5,
        ..Default::default()
    };
    let batch = make_batch(&cameras, &layout, &teacher, &cfg.batch_config(k), &mut rng).expect("cameras present");
    GradInstance { student, batch, cfg }
}

/// Compares every parameter's analytic gradient with a central difference
/// of step `h`.
///
/// Gradients large enough for the difference quotient to resolve must agree
/// to `1e-4` relative error, after Richardson extrapolation with `h / 2`
/// where the plain quotient misses. Below that the quotient is dominated by rounding
/// of the loss (about `eps * |L| / h`), so agreement to a small multiple of
/// that noise floor is required instead.
pub fn gradient_check(inst: GradInstance, h: f64) -> crate::Result<GradReport> {
    let GradInstance { mut student, batch, cfg } = inst;
    let mut grad = student.zeros_like();
    let mut ws = GradWorkspace::new(&student, 2);
    let loss = total_loss(&student, &batch, &cfg, 0.0, Some((&mut grad, &mut ws)))?.total;
    let noise = 4.0 * f64::EPSILON * loss.abs().max(1.0) / h;
    let analytic: Vec<f64> = grad.param_slices().concat();
    let mut report = GradReport::default();
    let mut idx = 0;
    for s in 0..student.param_slices().len() {
        for i in 0..student.param_slices()[s].len() {
            let mut central = |step: f64| -> crate::Result<f64> {
                let orig = student.param_slices()[s][i];
                student.param_slices_mut()[s][i] = orig + step;
                let up = total_loss(&student, &batch, &cfg, 0.0, None)?.total;
                student.param_slices_mut()[s][i] = orig - step;
                let dn = total_loss(&student, &batch, &cfg, 0.0, None)?.total;
                student.param_slices_mut()[s][i] = orig;
                Ok((up - dn) / (2.0 * step))
            };
            let a = analytic[idx];
            let mut numeric = central(h)?;
            let rel = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs());
            if a.abs().max(numeric.abs()) > 1e5 * noise {
                if rel(numeric) >= 1e-4 {
                    // Strongly curved directions: cancel the h^2 truncation
                    // term before judging.
                    numeric = (4.0 * central(0.5 * h)? - numeric) / 3.0;
                    report.refined += 1;
                }
                let r = rel(numeric);
                report.worst_rel = report.worst_rel.max(r);
                report.checked_rel += 1;
                report.failures += usize::from(r >= 1e-4);
            } else {
                report.checked_abs += 1;
                report.failures += usize::from((a - numeric).abs() > 10.0 * noise);
            }
            idx += 1;
        }
    }
    Ok(report)
}

/// Finite-difference step used by [`verify_gradients`].
pub const GRADIENT_STEP: f64 = 1e-3;

pub fn verify_gradients(cases: &[(u64, u32, bool, Aggregation)], report: &mut VerifyReport) {
    for &(seed, k, exposure, agg) in cases {
        let name = format!("gradients/seed{seed}-k{k}-{agg:?}{}", if exposure { "-exposure" } else { "" });
        match gradient_check(gradient_instance(seed, k, exposure, agg), GRADIENT_STEP) {
            Ok(r) => report.push(
                name,
                r.failures == 0,
                format!(
                    "{} failures; {} relative checks (worst {:.2e}, {} refined), {} at the noise floor",
                    r.failures, r.checked_rel, r.worst_rel, r.refined, r.checked_abs
                ),
            ),
            Err(e) => report.push(name, false, e.to_string()),
        }
    }
}

/// Quantization of arbitrary values, including out-of-range ones.
pub fn verify_quantizer(range: QuantRange, samples: usize, seed: u64, report: &mut VerifyReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x: f64 = rng.random_range(range.min - 3.0..range.max + 3.0);
        let err = (range.dequantize(range.quantize(x)) - x.clamp(range.min, range.max)).abs();
        worst = worst.max(err / range.step());
    }
    report.push(
        "quantizer",
        worst <= 0.5 + 1e-9,
        format!("worst round-trip error {worst:.4} steps over {samples} values"),
    );
}
