//! Distillation losses on 3x3 patches, each with its analytic gradient.

use crate::{Error, Result};

pub type Rgb = [f64; 3];

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// DSSIM weight in the photometric loss.
pub const DSSIM_WEIGHT: f64 = 1.5;

fn check_shapes(a: &[Rgb], b: &[Rgb]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::LengthMismatch {
            what: "patch pixels",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `(1 - SSIM) / 2` using one mean window over the whole patch, averaged over
/// channels. Returns the value and its gradient with respect to `x`.
pub fn dssim_with_grad(x: &[Rgb], y: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    check_shapes(x, y)?;
    let n = x.len() as f64;
    let mut grad = vec![[0.0; 3]; x.len()];
    let mut ssim_sum = 0.0;
    for c in 0..3 {
        let mx = x.iter().map(|p| p[c]).sum::<f64>() / n;
        let my = y.iter().map(|p| p[c]).sum::<f64>() / n;
        let vx = x.iter().map(|p| (p[c] - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|p| (p[c] - my).powi(2)).sum::<f64>() / n;
        let cxy = x.iter().zip(y).map(|(p, q)| (p[c] - mx) * (q[c] - my)).sum::<f64>() / n;
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * cxy + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = vx + vy + C2;
        let s = a1 * a2 / (b1 * b2);
        ssim_sum += s;
        for (i, g) in grad.iter_mut().enumerate() {
            let da1 = 2.0 * my / n;
            let da2 = 2.0 * (y[i][c] - my) / n;
            let db1 = 2.0 * mx / n;
            let db2 = 2.0 * (x[i][c] - mx) / n;
            let ds = s * (da1 / a1 + da2 / a2 - db1 / b1 - db2 / b2);
            // d/dx of (1 - mean_c s) / 2.
            g[c] = -ds / 6.0;
        }
    }
    Ok(((1.0 - ssim_sum / 3.0) * 0.5, grad))
}

pub fn dssim(x: &[Rgb], y: &[Rgb]) -> Result<f64> {
    dssim_with_grad(x, y).map(|(v, _)| v)
}

/// `sum_pixels ||x - y||_2`; the subgradient at zero is zero.
pub fn rmse_with_grad(x: &[Rgb], y: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    check_shapes(x, y)?;
    let mut total = 0.0;
    let grad = x
        .iter()
        .zip(y)
        .map(|(p, q)| {
            let d: Rgb = std::array::from_fn(|c| p[c] - q[c]);
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            total += norm;
            if norm > 0.0 {
                d.map(|v| v / norm)
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Ok((total, grad))
}

/// `1.5 * DSSIM + sum_pixels ||c - c*||_2`.
pub fn photometric_loss_with_grad(student: &[Rgb], teacher: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    let (d, gd) = dssim_with_grad(student, teacher)?;
    let (r, gr) = rmse_with_grad(student, teacher)?;
    let grad = gd
        .iter()
        .zip(&gr)
        .map(|(a, b)| std::array::from_fn(|c| DSSIM_WEIGHT * a[c] + b[c]))
        .collect();
    Ok((DSSIM_WEIGHT * d + r, grad))
}

pub fn photometric_loss(student: &[Rgb], teacher: &[Rgb]) -> Result<f64> {
    photometric_loss_with_grad(student, teacher).map(|(v, _)| v)
}

/// `sum_i |w_teacher_i - w_student_i|` with the sign subgradient.
pub fn geometry_loss_with_grad(student: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::LengthMismatch {
            what: "interval weights",
            left: student.len(),
            right: teacher.len(),
        });
    }
    let mut total = 0.0;
    let grad = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let d = s - t;
            total += d.abs();
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok((total, grad))
}

pub fn geometry_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    geometry_loss_with_grad(student, teacher).map(|(v, _)| v)
}

/// `||a - b||_2` between one ray rendered by two submodels; the gradient is
/// returned for `a` (the gradient for `b` is its negation).
pub fn consistency_loss_with_grad(a: &Rgb, b: &Rgb) -> (f64, Rgb) {
    let d: Rgb = std::array::from_fn(|c| a[c] - b[c]);
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm > 0.0 {
        (norm, d.map(|v| v / norm))
    } else {
        (0.0, [0.0; 3])
    }
}

pub fn consistency_loss(a: &Rgb, b: &Rgb) -> f64 {
    consistency_loss_with_grad(a, b).0
}
