//! Deferred appearance: a `P^3` lattice of tiny MLPs whose parameters are
//! trilinearly blended by camera origin, then evaluated once per ray on the
//! composited diffuse color and features.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::field::FEATURE_DIM;
use crate::math::{elu, elu_grad, logit, sigmoid, Vec3};

pub const HIDDEN: usize = 16;
pub const OUTPUTS: usize = 3;
/// Logits of composited features are clamped to this magnitude.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Fixed MLP shape: `input -> 16 -> 16 -> 3` with ELU activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub exposure: bool,
}

impl MlpArch {
    pub fn new(exposure: bool) -> Self {
        MlpArch { exposure }
    }

    /// View direction, diffuse color, features and optionally exposure.
    pub fn input_width(&self) -> usize {
        3 + 3 + FEATURE_DIM + usize::from(self.exposure)
    }

    /// `(rows, cols)` of each weight matrix.
    pub fn layers(&self) -> [(usize, usize); 3] {
        [
            (HIDDEN, self.input_width()),
            (HIDDEN, HIDDEN),
            (OUTPUTS, HIDDEN),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(r, c)| r * c + r).sum()
    }

    /// Offsets of `(weights, biases)` for each layer in the flat layout.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        let mut at = 0;
        for (i, (r, c)) in self.layers().into_iter().enumerate() {
            out[i] = (at, at + r * c);
            at += r * c + r;
        }
        out
    }
}

/// Flat parameters of one MLP, layer-major: `W1, b1, W2, b2, W3, b3` with
/// row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub values: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(arch: &MlpArch) -> Self {
        MlpParams {
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn random<R: Rng>(arch: &MlpArch, output_bias: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for (li, ((rows, cols), (w_at, b_at))) in arch.layers().into_iter().zip(arch.offsets()).enumerate() {
            let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("valid std");
            for x in &mut p.values[w_at..w_at + rows * cols] {
                *x = normal.sample(rng);
            }
            if li == 2 {
                p.values[b_at..b_at + rows].fill(output_bias);
            }
        }
        p
    }
}

/// Inputs to the deferred shader for one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadeInput {
    pub diffuse: [f64; 3],
    pub features: [f64; FEATURE_DIM],
    pub view_dir: Vec3,
    pub exposure: Option<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ShadeCache {
    input: Vec<f64>,
    z1: [f64; HIDDEN],
    h1: [f64; HIDDEN],
    z2: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    residual: [f64; OUTPUTS],
    /// Unclamped `diffuse + residual`.
    pre_clamp: [f64; OUTPUTS],
    features: [f64; FEATURE_DIM],
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Builds the MLP input vector, applying exposure conditioning when enabled.
fn mlp_input(arch: &MlpArch, inp: &ShadeInput) -> Vec<f64> {
    let mut x = Vec::with_capacity(arch.input_width());
    x.extend_from_slice(&inp.view_dir.to_array());
    x.extend_from_slice(&inp.diffuse);
    if arch.exposure {
        let e = inp.exposure.unwrap_or(0.0);
        x.extend(
            inp.features
                .iter()
                .map(|&f| logit(f).clamp(-LOGIT_CLAMP, LOGIT_CLAMP) + e),
        );
        x.push(e);
    } else {
        x.extend_from_slice(&inp.features);
    }
    x
}

/// Deferred shading: `clamp(diffuse + sigmoid(mlp(...)), 0, 1)`.
pub fn shade(arch: &MlpArch, params: &MlpParams, inp: &ShadeInput) -> [f64; 3] {
    shade_forward(arch, params, inp).0
}

pub fn shade_forward(arch: &MlpArch, params: &MlpParams, inp: &ShadeInput) -> ([f64; 3], ShadeCache) {
    let [(w1, b1), (w2, b2), (w3, b3)] = arch.offsets();
    let v = &params.values;
    let input = mlp_input(arch, inp);
    let mut z1 = [0.0; HIDDEN];
    dense(&v[w1..b1], &v[b1..b1 + HIDDEN], &input, &mut z1);
    let h1 = z1.map(elu);
    let mut z2 = [0.0; HIDDEN];
    dense(&v[w2..b2], &v[b2..b2 + HIDDEN], &h1, &mut z2);
    let h2 = z2.map(elu);
    let mut out = [0.0; OUTPUTS];
    dense(&v[w3..b3], &v[b3..b3 + OUTPUTS], &h2, &mut out);
    let residual = out.map(sigmoid);
    let pre_clamp: [f64; 3] = std::array::from_fn(|c| inp.diffuse[c] + residual[c]);
    let rgb = pre_clamp.map(|x| x.clamp(0.0, 1.0));
    (
        rgb,
        ShadeCache {
            input,
            z1,
            h1,
            z2,
            h2,
            residual,
            pre_clamp,
            features: inp.features,
        },
    )
}

/// Gradients of the shaded color with respect to the shader inputs.
pub struct ShadeInputGrad {
    pub diffuse: [f64; 3],
    pub features: [f64; FEATURE_DIM],
}

/// Backpropagates `g_rgb`; parameter gradients are added into `g_params`.
pub fn shade_backward(
    arch: &MlpArch,
    params: &MlpParams,
    cache: &ShadeCache,
    g_rgb: &[f64; 3],
    g_params: &mut [f64],
) -> ShadeInputGrad {
    let [(w1, b1), (w2, b2), (w3, b3)] = arch.offsets();
    let v = &params.values;
    let n_in = cache.input.len();

    let mut g_pre = [0.0; 3];
    for c in 0..3 {
        let x = cache.pre_clamp[c];
        if x > 0.0 && x < 1.0 {
            g_pre[c] = g_rgb[c];
        }
    }
    let g_out: [f64; OUTPUTS] = std::array::from_fn(|c| {
        let s = cache.residual[c];
        g_pre[c] * s * (1.0 - s)
    });

    // Layer 3.
    let mut g_h2 = [0.0; HIDDEN];
    for r in 0..OUTPUTS {
        g_params[b3 + r] += g_out[r];
        for j in 0..HIDDEN {
            g_params[w3 + r * HIDDEN + j] += g_out[r] * cache.h2[j];
            g_h2[j] += g_out[r] * v[w3 + r * HIDDEN + j];
        }
    }
    let g_z2: [f64; HIDDEN] = std::array::from_fn(|j| g_h2[j] * elu_grad(cache.z2[j]));

    // Layer 2.
    let mut g_h1 = [0.0; HIDDEN];
    for r in 0..HIDDEN {
        g_params[b2 + r] += g_z2[r];
        for j in 0..HIDDEN {
            g_params[w2 + r * HIDDEN + j] += g_z2[r] * cache.h1[j];
            g_h1[j] += g_z2[r] * v[w2 + r * HIDDEN + j];
        }
    }
    let g_z1: [f64; HIDDEN] = std::array::from_fn(|j| g_h1[j] * elu_grad(cache.z1[j]));

    // Layer 1.
    let mut g_in = vec![0.0; n_in];
    for r in 0..HIDDEN {
        g_params[b1 + r] += g_z1[r];
        let row = w1 + r * n_in;
        for j in 0..n_in {
            g_params[row + j] += g_z1[r] * cache.input[j];
            g_in[j] += g_z1[r] * v[row + j];
        }
    }

    let diffuse = std::array::from_fn(|c| g_pre[c] + g_in[3 + c]);
    let features = std::array::from_fn(|c| {
        let g = g_in[6 + c];
        if arch.exposure {
            let f = cache.features[c];
            if logit(f).abs() < LOGIT_CLAMP {
                g / (f * (1.0 - f))
            } else {
                0.0
            }
        } else {
            g
        }
    });
    ShadeInputGrad { diffuse, features }
}

/// `P^3` MLP parameter sets spanning the submodel's `[-1, 1]^3` frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLattice {
    pub p: usize,
    pub arch: MlpArch,
    /// Vertex `(u, v, w)` lives at index `(u * P + v) * P + w`.
    pub vertices: Vec<MlpParams>,
}

impl MlpLattice {
    pub fn uniform(p: usize, arch: MlpArch, params: MlpParams) -> Self {
        assert!(p >= 1, "lattice needs at least one vertex per axis");
        MlpLattice {
            p,
            arch,
            vertices: vec![params; p * p * p],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::uniform(self.p, self.arch, MlpParams::zeros(&self.arch))
    }

    pub fn vertex_index(&self, u: usize, v: usize, w: usize) -> usize {
        (u * self.p + v) * self.p + w
    }

    /// Position of vertex index `i` along each axis in `[-1, 1]`.
    pub fn vertex_position(&self, u: usize) -> f64 {
        if self.p == 1 {
            0.0
        } else {
            -1.0 + 2.0 * u as f64 / (self.p - 1) as f64
        }
    }

    /// Trilinear vertex weights for an origin in submodel-local coordinates;
    /// origins outside `[-1, 1]^3` clamp to the boundary.
    pub fn trilerp_weights(&self, origin_local: Vec3) -> Vec<(usize, f64)> {
        if self.p == 1 {
            return vec![(0, 1.0)];
        }
        let axis = |x: f64| -> (usize, f64) {
            let u = (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (self.p - 1) as f64;
            let i = (u.floor() as usize).min(self.p - 2);
            (i, (u - i as f64).clamp(0.0, 1.0))
        };
        let (i, fx) = axis(origin_local.x);
        let (j, fy) = axis(origin_local.y);
        let (k, fz) = axis(origin_local.z);
        let mut out = Vec::with_capacity(8);
        for n in 0..8 {
            let (di, dj, dk) = (n >> 2 & 1, n >> 1 & 1, n & 1);
            let w = (if di == 1 { fx } else { 1.0 - fx })
                * (if dj == 1 { fy } else { 1.0 - fy })
                * (if dk == 1 { fz } else { 1.0 - fz });
            if w != 0.0 {
                out.push((self.vertex_index(i + di, j + dj, k + dk), w));
            }
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.vertices.iter().map(|v| v.values.as_slice()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.vertices.iter_mut().map(|v| v.values.as_mut_slice()).collect()
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.vertices {
            v.values.fill(0.0);
        }
    }

    /// Axis-positive neighbor pairs `(a, b)` with `b = a + delta`,
    /// `delta in {0,1}^3 \ {0}`.
    fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let p = self.p;
        let mut out = Vec::new();
        for a in 0..p * p * p {
            let (u, v, w) = (a / (p * p), a / p % p, a % p);
            for d in 1..8usize {
                let (nu, nv, nw) = (u + (d >> 2 & 1), v + (d >> 1 & 1), w + (d & 1));
                if nu < p && nv < p && nw < p {
                    out.push((a, (nu * p + nv) * p + nw));
                }
            }
        }
        out
    }

    /// Unweighted total-variation penalty between adjacent vertices.
    pub fn tv_penalty(&self) -> f64 {
        let n = self.arch.param_count() as f64;
        let mut total = 0.0;
        for (a, b) in self.neighbor_pairs() {
            let (x, y) = (&self.vertices[a].values, &self.vertices[b].values);
            total += x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>();
        }
        total / n
    }

    pub fn tv_backward(&self, scale: f64, grad: &mut MlpLattice) {
        let k = scale / self.arch.param_count() as f64;
        for (a, b) in self.neighbor_pairs() {
            for i in 0..self.arch.param_count() {
                let d = self.vertices[a].values[i] - self.vertices[b].values[i];
                let s = if d > 0.0 {
                    k
                } else if d < 0.0 {
                    -k
                } else {
                    0.0
                };
                grad.vertices[a].values[i] += s;
                grad.vertices[b].values[i] -= s;
            }
        }
    }
}

/// Trilinear blend of the lattice parameters for a camera origin.
pub fn interpolate_params(origin_local: Vec3, lattice: &MlpLattice) -> MlpParams {
    let mut out = MlpParams::zeros(&lattice.arch);
    for (i, w) in lattice.trilerp_weights(origin_local) {
        for (o, x) in out.values.iter_mut().zip(&lattice.vertices[i].values) {
            *o += w * x;
        }
    }
    out
}
