//! The trainable per-submodel representation: three axis-aligned feature
//! planes plus a dense low-resolution voxel grid, aggregated with a gate
//! channel and rectified into density, diffuse color and view features.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math::{sigmoid, Vec3};

/// Channels stored per texel / voxel.
pub const CHANNELS: usize = 8;
/// Channel of the voxel grid used as the triplane gate.
pub const GATE_CHANNEL: usize = 7;
/// Width of the view-dependent feature vector handed to the deferred MLP:
/// four aggregated channels followed by the eight voxel channels.
pub const FEATURE_DIM: usize = 4 + CHANNELS;
/// Upper bound on density to keep `exp` finite early in training.
pub const MAX_DENSITY: f64 = 1e4;

pub type Features8 = [f64; CHANNELS];

/// How the triplane and voxel contributions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Triplane sum scaled by the voxel gate channel, plus the voxel sample.
    #[default]
    Gated,
    /// Plain sum of the four samples.
    Summed,
}

/// Maps a coordinate in `[-2, 2]` to a lower texel index and fraction for
/// cell-centered interpolation on a grid of `res` samples.
#[inline]
fn texel_coord(p: f64, res: usize) -> (usize, f64) {
    let u = (p.clamp(-2.0, 2.0) + 2.0) * 0.25 * res as f64 - 0.5;
    let i = (u.floor().max(0.0) as usize).min(res - 2);
    let f = (u - i as f64).clamp(0.0, 1.0);
    (i, f)
}

/// Base offsets and weights of a bilinear lookup.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil2 {
    pub offset: [usize; 4],
    pub weight: [f64; 4],
}

/// Base offsets and weights of a trilinear lookup.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil3 {
    pub offset: [usize; 8],
    pub weight: [f64; 8],
}

fn stencil2(a: f64, b: f64, res: usize) -> Stencil2 {
    let (i, fa) = texel_coord(a, res);
    let (j, fb) = texel_coord(b, res);
    let base = (i * res + j) * CHANNELS;
    let row = res * CHANNELS;
    Stencil2 {
        offset: [base, base + CHANNELS, base + row, base + row + CHANNELS],
        weight: [
            (1.0 - fa) * (1.0 - fb),
            (1.0 - fa) * fb,
            fa * (1.0 - fb),
            fa * fb,
        ],
    }
}

fn stencil3(p: Vec3, res: usize) -> Stencil3 {
    let (i, fx) = texel_coord(p.x, res);
    let (j, fy) = texel_coord(p.y, res);
    let (k, fz) = texel_coord(p.z, res);
    let mut s = Stencil3::default();
    for n in 0..8 {
        let (di, dj, dk) = (n >> 2 & 1, n >> 1 & 1, n & 1);
        s.offset[n] = (((i + di) * res + (j + dj)) * res + (k + dk)) * CHANNELS;
        s.weight[n] = (if di == 1 { fx } else { 1.0 - fx })
            * (if dj == 1 { fy } else { 1.0 - fy })
            * (if dk == 1 { fz } else { 1.0 - fz });
    }
    s
}

#[inline]
fn gather<const N: usize>(data: &[f64], offset: &[usize; N], weight: &[f64; N]) -> Features8 {
    let mut out = [0.0; CHANNELS];
    for n in 0..N {
        let w = weight[n];
        let texel = &data[offset[n]..offset[n] + CHANNELS];
        for c in 0..CHANNELS {
            out[c] += w * texel[c];
        }
    }
    out
}

#[inline]
fn scatter<const N: usize>(data: &mut [f64], offset: &[usize; N], weight: &[f64; N], g: &Features8) {
    for n in 0..N {
        let w = weight[n];
        if w == 0.0 {
            continue;
        }
        let texel = &mut data[offset[n]..offset[n] + CHANNELS];
        for c in 0..CHANNELS {
            texel[c] += w * g[c];
        }
    }
}

/// Three `R x R x 8` feature planes, perpendicular to x, y and z.
///
/// Plane `x` is indexed by `(y, z)`, plane `y` by `(x, z)` and plane `z` by
/// `(x, y)`; texels are row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriplaneSet {
    pub resolution: usize,
    pub planes: [Vec<f64>; 3],
}

impl TriplaneSet {
    pub fn constant(resolution: usize, value: Features8) -> Self {
        let plane: Vec<f64> = value.iter().copied().cycle().take(resolution * resolution * CHANNELS).collect();
        TriplaneSet {
            resolution,
            planes: [plane.clone(), plane.clone(), plane],
        }
    }

    pub fn texel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    /// The 2D coordinates each plane sees for a 3D point.
    #[inline]
    pub fn projections(p: Vec3) -> [(f64, f64); 3] {
        [(p.y, p.z), (p.x, p.z), (p.x, p.y)]
    }

    pub fn stencils(&self, p: Vec3) -> [Stencil2; 3] {
        Self::projections(p).map(|(a, b)| stencil2(a, b, self.resolution))
    }
}

/// Bilinear lookup of one plane at a point of `[-2, 2]^2`.
pub fn sample_plane(plane: &[f64], resolution: usize, a: f64, b: f64) -> Features8 {
    let s = stencil2(a, b, resolution);
    gather(plane, &s.offset, &s.weight)
}

/// Dense `L^3 x 8` grid; the last channel is the gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn constant(resolution: usize, value: Features8) -> Self {
        VoxelGrid {
            resolution,
            data: value.iter().copied().cycle().take(resolution.pow(3) * CHANNELS).collect(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn stencil(&self, p: Vec3) -> Stencil3 {
        stencil3(p, self.resolution)
    }
}

/// Trilinear lookup of the voxel grid at a point of `[-2, 2]^3`.
pub fn sample_voxel(grid: &VoxelGrid, p: Vec3) -> Features8 {
    let s = grid.stencil(p);
    gather(&grid.data, &s.offset, &s.weight)
}

/// Density, diffuse color and view feature of one sample point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub diffuse: [f64; 3],
    pub features: [f64; FEATURE_DIM],
}

/// Rectifies aggregated features `t_hat` and the raw voxel sample `v`.
pub fn activations(t_hat: &Features8, v: &Features8) -> FieldSample {
    let sigma = t_hat[0].exp().min(MAX_DENSITY);
    let diffuse = [sigmoid(t_hat[1]), sigmoid(t_hat[2]), sigmoid(t_hat[3])];
    let mut features = [0.0; FEATURE_DIM];
    for c in 0..4 {
        features[c] = sigmoid(t_hat[4 + c]);
    }
    for c in 0..CHANNELS {
        features[4 + c] = sigmoid(v[c]);
    }
    FieldSample {
        sigma,
        diffuse,
        features,
    }
}

/// Gated aggregation: `w * (Px + Py + Pz) + V` with `w = V[GATE_CHANNEL]`.
/// Returns the aggregate and the voxel sample.
pub fn gated_features(p: Vec3, planes: &TriplaneSet, grid: &VoxelGrid) -> (Features8, Features8) {
    let (t_hat, v, _) = aggregate(p, planes, grid, Aggregation::Gated);
    (t_hat, v)
}

/// Ungated aggregation `Px + Py + Pz + V`.
pub fn merf_features(p: Vec3, planes: &TriplaneSet, grid: &VoxelGrid) -> Features8 {
    aggregate(p, planes, grid, Aggregation::Summed).0
}

fn aggregate(
    p: Vec3,
    planes: &TriplaneSet,
    grid: &VoxelGrid,
    mode: Aggregation,
) -> (Features8, Features8, Features8) {
    let mut p_sum = [0.0; CHANNELS];
    for (plane, s) in planes.planes.iter().zip(planes.stencils(p)) {
        let f = gather(plane, &s.offset, &s.weight);
        for c in 0..CHANNELS {
            p_sum[c] += f[c];
        }
    }
    let v = sample_voxel(grid, p);
    let w = match mode {
        Aggregation::Gated => v[GATE_CHANNEL],
        Aggregation::Summed => 1.0,
    };
    let mut t_hat = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        t_hat[c] = w * p_sum[c] + v[c];
    }
    (t_hat, v, p_sum)
}

/// Everything the backward pass needs about one field query.
#[derive(Debug, Clone, Copy)]
pub struct FieldQuery {
    pub plane_stencils: [Stencil2; 3],
    pub voxel_stencil: Stencil3,
    pub p_sum: Features8,
    pub v: Features8,
    pub t_hat: Features8,
    pub sample: FieldSample,
}

/// Trainable triplanes plus voxel grid of one submodel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureField {
    pub aggregation: Aggregation,
    pub planes: TriplaneSet,
    pub grid: VoxelGrid,
}

impl FeatureField {
    pub fn zeros(r: usize, l: usize, aggregation: Aggregation) -> Self {
        FeatureField {
            aggregation,
            planes: TriplaneSet::constant(r, [0.0; CHANNELS]),
            grid: VoxelGrid::constant(l, [0.0; CHANNELS]),
        }
    }

    /// Small Gaussian noise everywhere, density preactivations offset by
    /// `density_bias`, and the gate channel starting fully open.
    pub fn random<R: Rng>(
        r: usize,
        l: usize,
        aggregation: Aggregation,
        std: f64,
        density_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut f = Self::zeros(r, l, aggregation);
        let normal = Normal::new(0.0, std).expect("valid std");
        for plane in &mut f.planes.planes {
            plane.iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        for (i, x) in f.grid.data.iter_mut().enumerate() {
            *x = normal.sample(rng);
            match i % CHANNELS {
                0 => *x += density_bias,
                GATE_CHANNEL => *x += 1.0,
                _ => {}
            }
        }
        f
    }

    pub fn zeros_like(&self) -> Self {
        FeatureField::zeros(self.planes.resolution, self.grid.resolution, self.aggregation)
    }

    pub fn param_slices(&self) -> [&[f64]; 4] {
        let [a, b, c] = &self.planes.planes;
        [a, b, c, &self.grid.data]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 4] {
        let [a, b, c] = &mut self.planes.planes;
        [a, b, c, &mut self.grid.data]
    }

    pub fn fill_zero(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(0.0);
        }
    }

    /// Forward query at a contracted point.
    pub fn query(&self, p: Vec3) -> FieldQuery {
        let plane_stencils = self.planes.stencils(p);
        let voxel_stencil = self.grid.stencil(p);
        let mut p_sum = [0.0; CHANNELS];
        for (plane, s) in self.planes.planes.iter().zip(&plane_stencils) {
            let f = gather(plane, &s.offset, &s.weight);
            for c in 0..CHANNELS {
                p_sum[c] += f[c];
            }
        }
        let v = gather(&self.grid.data, &voxel_stencil.offset, &voxel_stencil.weight);
        let w = match self.aggregation {
            Aggregation::Gated => v[GATE_CHANNEL],
            Aggregation::Summed => 1.0,
        };
        let mut t_hat = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            t_hat[c] = w * p_sum[c] + v[c];
        }
        FieldQuery {
            plane_stencils,
            voxel_stencil,
            p_sum,
            v,
            t_hat,
            sample: activations(&t_hat, &v),
        }
    }

    /// Accumulates into `grad` the gradient of a scalar whose partials with
    /// respect to the query's sample are given.
    pub fn backward(
        &self,
        q: &FieldQuery,
        g_sigma: f64,
        g_diffuse: &[f64; 3],
        g_features: &[f64; FEATURE_DIM],
        grad: &mut FeatureField,
    ) {
        let s = &q.sample;
        let mut g_t = [0.0; CHANNELS];
        let mut g_v = [0.0; CHANNELS];
        if q.t_hat[0].exp() < MAX_DENSITY {
            g_t[0] = g_sigma * s.sigma;
        }
        for c in 0..3 {
            let d = s.diffuse[c];
            g_t[1 + c] = g_diffuse[c] * d * (1.0 - d);
        }
        for c in 0..4 {
            let f = s.features[c];
            g_t[4 + c] = g_features[c] * f * (1.0 - f);
        }
        for c in 0..CHANNELS {
            let f = s.features[4 + c];
            g_v[c] = g_features[4 + c] * f * (1.0 - f) + g_t[c];
        }
        let mut g_p = g_t;
        if self.aggregation == Aggregation::Gated {
            let w = q.v[GATE_CHANNEL];
            g_v[GATE_CHANNEL] += (0..CHANNELS).map(|c| g_t[c] * q.p_sum[c]).sum::<f64>();
            g_p.iter_mut().for_each(|g| *g *= w);
        }
        for (plane, st) in grad.planes.planes.iter_mut().zip(&q.plane_stencils) {
            scatter(plane, &st.offset, &st.weight, &g_p);
        }
        scatter(&mut grad.grid.data, &q.voxel_stencil.offset, &q.voxel_stencil.weight, &g_v);
    }

    /// Mean squared magnitude of each grid, summed over the four grids.
    pub fn magnitude_penalty(&self) -> f64 {
        self.param_slices()
            .iter()
            .map(|s| s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64)
            .sum()
    }

    pub fn magnitude_penalty_backward(&self, scale: f64, grad: &mut FeatureField) {
        for (p, g) in self.param_slices().into_iter().zip(grad.param_slices_mut()) {
            let k = 2.0 * scale / p.len() as f64;
            for (gi, pi) in g.iter_mut().zip(p) {
                *gi += k * pi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat(v: f64) -> Features8 {
        [v; CHANNELS]
    }

    fn assert_close(a: Features8, b: Features8) {
        for c in 0..CHANNELS {
            assert!((a[c] - b[c]).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    fn ramp() -> Features8 {
        [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8]
    }

    #[test]
    fn plane_constant_and_centers() {
        let r = 8;
        let tp = TriplaneSet::constant(r, ramp());
        assert_close(sample_plane(&tp.planes[0], r, 1.3, -0.7), ramp());

        let mut plane = vec![0.0; r * r * CHANNELS];
        for (i, x) in plane.iter_mut().enumerate() {
            *x = i as f64;
        }
        // Texel (2, 5) center.
        let center = |i: usize| -2.0 + (i as f64 + 0.5) * 4.0 / r as f64;
        let got = sample_plane(&plane, r, center(2), center(5));
        let base = (2 * r + 5) * CHANNELS;
        for c in 0..CHANNELS {
            assert!((got[c] - plane[base + c]).abs() < 1e-12);
        }
        // Midpoint of texels (2,5) and (3,5).
        let mid = 0.5 * (center(2) + center(3));
        let got = sample_plane(&plane, r, mid, center(5));
        let next = (3 * r + 5) * CHANNELS;
        for c in 0..CHANNELS {
            assert!((got[c] - 0.5 * (plane[base + c] + plane[next + c])).abs() < 1e-12);
        }
    }

    #[test]
    fn voxel_constant_center_and_edge_midpoint() {
        let l = 4;
        assert_close(sample_voxel(&VoxelGrid::constant(l, ramp()), Vec3::new(0.3, -1.9, 2.5)), ramp());
        let mut g = VoxelGrid::constant(l, feat(0.0));
        for (i, x) in g.data.iter_mut().enumerate() {
            *x = (i as f64).sin();
        }
        let center = |i: usize| -2.0 + (i as f64 + 0.5);
        let at = |i: usize, j: usize, k: usize| ((i * l + j) * l + k) * CHANNELS;
        let got = sample_voxel(&g, Vec3::new(center(1), center(2), center(3)));
        for c in 0..CHANNELS {
            assert!((got[c] - g.data[at(1, 2, 3) + c]).abs() < 1e-12);
        }
        let got = sample_voxel(&g, Vec3::new(center(1), 0.5 * (center(2) + center(3)), center(0)));
        for c in 0..CHANNELS {
            let want = 0.5 * (g.data[at(1, 2, 0) + c] + g.data[at(1, 3, 0) + c]);
            assert!((got[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_domain_queries_clamp() {
        let g = VoxelGrid::constant(4, ramp());
        assert_close(sample_voxel(&g, Vec3::new(9.0, -9.0, 0.0)), ramp());
    }

    #[test]
    fn gate_zero_kills_triplanes() {
        let tp = TriplaneSet::constant(8, ramp());
        let vg = VoxelGrid::constant(4, feat(0.0));
        let (t_hat, v) = gated_features(Vec3::new(0.2, 0.1, -0.3), &tp, &vg);
        assert_eq!(t_hat, feat(0.0));
        assert_eq!(v, feat(0.0));
    }

    #[test]
    fn zero_planes_pass_voxels_through() {
        let tp = TriplaneSet::constant(8, feat(0.0));
        let vg = VoxelGrid::constant(4, ramp());
        let (t_hat, _) = gated_features(Vec3::new(0.2, 0.1, -0.3), &tp, &vg);
        assert_close(t_hat, ramp());
    }

    #[test]
    fn open_gate_matches_plain_sum() {
        let mut tp = TriplaneSet::constant(8, feat(0.25));
        tp.planes[1] = TriplaneSet::constant(8, feat(-0.5)).planes[1].clone();
        tp.planes[2] = TriplaneSet::constant(8, feat(1.5)).planes[2].clone();
        let mut v = feat(0.125);
        v[GATE_CHANNEL] = 1.0;
        let vg = VoxelGrid::constant(4, v);
        let p = Vec3::new(-0.7, 1.1, 0.4);
        let (t_hat, _) = gated_features(p, &tp, &vg);
        for c in 0..CHANNELS {
            let want = 0.25 - 0.5 + 1.5 + v[c];
            assert!((t_hat[c] - want).abs() < 1e-12);
        }
        assert_eq!(merf_features(p, &tp, &vg), t_hat);
    }

    #[test]
    fn summed_constants() {
        let tp = TriplaneSet::constant(8, feat(1.0));
        for (vv, want) in [(0.0, 3.0), (2.0, 5.0), (-3.0, 0.0)] {
            let vg = VoxelGrid::constant(4, feat(vv));
            assert_eq!(merf_features(Vec3::new(0.1, 0.2, 0.3), &tp, &vg), feat(want));
        }
    }

    #[test]
    fn activation_examples() {
        let s = activations(&feat(0.0), &feat(0.0));
        assert_eq!(s.sigma, 1.0);
        assert_eq!(s.diffuse, [0.5; 3]);
        assert_eq!(s.features, [0.5; FEATURE_DIM]);

        let mut t = feat(0.0);
        t[0] = -20.0;
        assert!((activations(&t, &feat(0.0)).sigma - 2.061_153_622_438_558e-9).abs() < 1e-20);

        let mut t = feat(0.0);
        t[1] = 20.0;
        t[2] = 20.0;
        t[3] = 20.0;
        t[0] = 50.0;
        let s = activations(&t, &feat(0.0));
        assert!(s.diffuse.iter().all(|&c| (c - 1.0).abs() < 1e-8));
        assert_eq!(s.sigma, MAX_DENSITY);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for aggregation in [Aggregation::Gated, Aggregation::Summed] {
            let mut field = FeatureField::random(8, 4, aggregation, 0.5, 0.0, &mut rng);
            let p = Vec3::new(0.37, -1.21, 0.83);
            // Scalar objective: a fixed linear functional of the sample.
            let coeff_sigma = 0.3;
            let coeff_d = [0.7, -0.2, 0.4];
            let coeff_f: [f64; FEATURE_DIM] = std::array::from_fn(|i| (i as f64 * 0.37).sin());
            let objective = |f: &FeatureField| {
                let s = f.query(p).sample;
                coeff_sigma * s.sigma
                    + (0..3).map(|c| coeff_d[c] * s.diffuse[c]).sum::<f64>()
                    + (0..FEATURE_DIM).map(|c| coeff_f[c] * s.features[c]).sum::<f64>()
            };
            let mut grad = field.zeros_like();
            let q = field.query(p);
            field.backward(&q, coeff_sigma, &coeff_d, &coeff_f, &mut grad);
            let h = 1e-5;
            for s in 0..4 {
                let n = field.param_slices()[s].len();
                for i in 0..n {
                    let a = grad.param_slices()[s][i];
                    let orig = field.param_slices()[s][i];
                    field.param_slices_mut()[s][i] = orig + h;
                    let up = objective(&field);
                    field.param_slices_mut()[s][i] = orig - h;
                    let down = objective(&field);
                    field.param_slices_mut()[s][i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    assert!((a - fd).abs() <= 1e-7 * (1.0 + fd.abs()), "{aggregation:?} slice {s} idx {i}: {a} vs {fd}");
                }
            }
        }
    }
}
